#include "raq/harness/model.hpp"

#include <cmath>
#include <stdexcept>

namespace raq::harness {

namespace {

// Index of each conv's kernel in parameters(); the bias follows it.
enum Param : std::size_t {
  enc_conv1 = 0,
  enc_conv2 = 2,
  enc_res3 = 4,
  enc_res1 = 6,
  enc_proj = 8,
  dec_conv = 10,
  dec_res3 = 12,
  dec_res1 = 14,
  dec_up1 = 16,
  dec_up2 = 18,
  param_count = 20,
};

std::size_t fan_in(const Shape& kernel, bool transposed) {
  // conv kernels are F×C×k×k, transposed kernels C×F×k×k; fan-in counts the
  // inputs feeding one output.
  return (transposed ? kernel[0] : kernel[1]) * kernel[2] * kernel[3];
}

}  // namespace

std::vector<Shape> ToyVqModel::parameter_shapes(std::size_t h, std::size_t d) {
  return {
      {h, 1, 4, 4}, {h},  // enc_conv1
      {h, h, 4, 4}, {h},  // enc_conv2
      {h, h, 3, 3}, {h},  // enc_res3
      {h, h, 1, 1}, {h},  // enc_res1
      {d, h, 1, 1}, {d},  // enc_proj
      {h, d, 3, 3}, {h},  // dec_conv
      {h, h, 3, 3}, {h},  // dec_res3
      {h, h, 1, 1}, {h},  // dec_res1
      {h, h, 4, 4}, {h},  // dec_up1 (transposed)
      {h, 1, 4, 4}, {1},  // dec_up2 (transposed)
  };
}

ToyVqModel ToyVqModel::init(std::size_t hidden, std::size_t dim, std::mt19937_64& rng) {
  if (hidden < 1 || dim < 1) throw std::invalid_argument("ToyVqModel: hidden and dim must be >= 1");
  const auto shapes = parameter_shapes(hidden, dim);
  ToyVqModel m;
  m.hidden_ = hidden;
  m.dim_ = dim;
  for (std::size_t i = 0; i < shapes.size(); i += 2) {
    const bool transposed = i == dec_up1 || i == dec_up2;
    const double bound = 1.0 / std::sqrt(double(fan_in(shapes[i], transposed)));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<float> w(numel(shapes[i]));
    for (auto& x : w) x = float(u(rng));
    m.p_.push_back(Tensorf::from(shapes[i], std::move(w), true));
    m.p_.push_back(Tensorf::zeros(shapes[i + 1], true));
  }
  return m;
}

ToyVqModel ToyVqModel::from_parameters(std::size_t hidden, std::size_t dim, std::vector<Tensorf> ps) {
  const auto shapes = parameter_shapes(hidden, dim);
  if (ps.size() != shapes.size()) throw std::invalid_argument("ToyVqModel: wrong parameter count");
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps[i].shape() != shapes[i])
      throw shape_error("ToyVqModel: parameter " + std::to_string(i) + " has shape " + to_string(ps[i].shape()) +
                        ", expected " + to_string(shapes[i]));
  ToyVqModel m;
  m.hidden_ = hidden;
  m.dim_ = dim;
  m.p_ = std::move(ps);
  return m;
}

std::vector<Tensorf> ToyVqModel::parameters() const { return p_; }

Tensorf ToyVqModel::encode(const Tensorf& x) const {
  if (p_.size() != param_count) throw std::logic_error("ToyVqModel: not initialised");
  auto conv = [&](const Tensorf& in, std::size_t at, std::size_t stride, std::size_t pad) {
    return conv2d(in, p_[at], std::optional<Tensorf>(p_[at + 1]), stride, pad);
  };
  auto h = relu(conv(x, enc_conv1, 2, 1));
  h = conv(h, enc_conv2, 2, 1);
  h = add(h, conv(relu(conv(relu(h), enc_res3, 1, 1)), enc_res1, 1, 0));
  h = conv(relu(h), enc_proj, 1, 0);
  return permute(h, {0, 2, 3, 1});
}

Tensorf ToyVqModel::decode(const Tensorf& z) const {
  if (p_.size() != param_count) throw std::logic_error("ToyVqModel: not initialised");
  auto conv = [&](const Tensorf& in, std::size_t at, std::size_t stride, std::size_t pad) {
    return conv2d(in, p_[at], std::optional<Tensorf>(p_[at + 1]), stride, pad);
  };
  auto up = [&](const Tensorf& in, std::size_t at) {
    return conv_transpose2d(in, p_[at], std::optional<Tensorf>(p_[at + 1]), 2, 1);
  };
  auto h = conv(permute(z, {0, 3, 1, 2}), dec_conv, 1, 1);
  h = add(h, conv(relu(conv(relu(h), dec_res3, 1, 1)), dec_res1, 1, 0));
  h = relu(up(relu(h), dec_up1));
  return sigmoid(up(h, dec_up2));
}

}  // namespace raq::harness
