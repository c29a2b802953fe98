#pragma once

// Rate adaptation module: a stacked-LSTM encoder reads the original
// codebook row by row, and a stacked-LSTM decoder, started from the
// encoder's final state, emits one adapted vector per step through a linear
// projection. Decoder inputs follow the cross-forcing schedule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <vector>

#include "raq/ops.hpp"
#include "raq/tensor.hpp"
#include "raq/vq.hpp"

namespace raq {

/// Where a decoder step takes its input from. Indices are 0-based:
/// original(j) is e_{j+1}, generated(i) is the output of step i+1.
struct StepSource {
  enum class Kind { original, generated };
  Kind kind;
  std::size_t index;

  friend bool operator==(const StepSource&, const StepSource&) = default;
};

struct AdaptSchedule {
  std::size_t original_size = 0;
  std::size_t target_size = 0;
  std::vector<StepSource> steps;
};

/// Cross-forcing: 1-based step i reads e_{(i+1)/2} when i is odd and i <= 2K,
/// and the previous output otherwise. With cross_forcing off, only step 1
/// reads e_1 and every later step free-runs.
inline AdaptSchedule build_schedule(std::size_t k, std::size_t k_tilde, bool cross_forcing = true) {
  if (k < 1 || k_tilde < 1) throw std::invalid_argument("build_schedule: sizes must be >= 1");
  AdaptSchedule s{k, k_tilde, {}};
  s.steps.reserve(k_tilde);
  for (std::size_t i = 1; i <= k_tilde; ++i) {
    const bool teacher = cross_forcing ? (i % 2 == 1 && i <= 2 * k) : i == 1;
    if (teacher)
      s.steps.push_back({StepSource::Kind::original, (i + 1) / 2 - 1});
    else
      s.steps.push_back({StepSource::Kind::generated, i - 2});
  }
  return s;
}

/// One LSTM layer, gate order (input, forget, candidate, output).
/// gates = x * w_ih + h * w_hh + bias, with w_ih in×4H and w_hh H×4H.
template <typename Scalar>
struct LstmCell {
  Tensor<Scalar> w_ih;
  Tensor<Scalar> w_hh;
  Tensor<Scalar> bias;  // 1×4H

  std::size_t hidden() const { return w_hh.dim(0); }
};

template <typename Scalar>
struct LstmState {
  std::vector<Tensor<Scalar>> h;  // per layer, 1×H
  std::vector<Tensor<Scalar>> c;
};

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> lstm_step(const LstmCell<Scalar>& cell, const Tensor<Scalar>& x,
                                                     const Tensor<Scalar>& h, const Tensor<Scalar>& c) {
  const std::size_t hd = cell.hidden();
  auto gates = add(add(matmul(x, cell.w_ih), matmul(h, cell.w_hh)), cell.bias);
  auto i = sigmoid(slice_cols(gates, 0, hd));
  auto f = sigmoid(slice_cols(gates, hd, hd));
  auto g = tanh(slice_cols(gates, 2 * hd, hd));
  auto o = sigmoid(slice_cols(gates, 3 * hd, hd));
  auto c_next = add(mul(f, c), mul(i, g));
  auto h_next = mul(o, tanh(c_next));
  return {h_next, c_next};
}

/// Feeds one input through the stack; returns the top layer's output.
template <typename Scalar>
Tensor<Scalar> stack_step(const std::vector<LstmCell<Scalar>>& cells, LstmState<Scalar>& state,
                          const Tensor<Scalar>& x) {
  Tensor<Scalar> input = x;
  for (std::size_t l = 0; l < cells.size(); ++l) {
    auto [h, c] = lstm_step(cells[l], input, state.h[l], state.c[l]);
    state.h[l] = h;
    state.c[l] = c;
    input = h;
  }
  return input;
}

template <typename Scalar>
class RateAdapter {
 public:
  RateAdapter() = default;

  /// Recurrent weights ~ U(-1/sqrt(d), 1/sqrt(d)); biases zero except the
  /// forget gate at 1. The output projection uses the same range.
  template <typename Rng>
  static RateAdapter init(std::size_t d, std::size_t num_layers, Rng& rng) {
    if (d < 1 || num_layers < 1) throw std::invalid_argument("RateAdapter: d and num_layers must be >= 1");
    const double bound = 1.0 / std::sqrt(double(d));
    std::uniform_real_distribution<double> u(-bound, bound);
    auto uniform = [&](Shape shape) {
      std::vector<Scalar> v(numel(shape));
      for (auto& x : v) x = Scalar(u(rng));
      return Tensor<Scalar>::from(std::move(shape), std::move(v), true);
    };
    auto make_stack = [&] {
      std::vector<LstmCell<Scalar>> cells;
      for (std::size_t l = 0; l < num_layers; ++l) {
        std::vector<Scalar> b(4 * d, Scalar(0));
        for (std::size_t j = d; j < 2 * d; ++j) b[j] = Scalar(1);
        cells.push_back({uniform({d, 4 * d}), uniform({d, 4 * d}), Tensor<Scalar>::from({1, 4 * d}, b, true)});
      }
      return cells;
    };
    RateAdapter a;
    a.encoder_ = make_stack();
    a.decoder_ = make_stack();
    a.out_weight_ = uniform({d, d});
    a.out_bias_ = Tensor<Scalar>::zeros({1, d}, true);
    return a;
  }

  /// Every parameter zero (including the forget bias).
  static RateAdapter zeros(std::size_t d, std::size_t num_layers) {
    RateAdapter a;
    for (auto* stack : {&a.encoder_, &a.decoder_})
      for (std::size_t l = 0; l < num_layers; ++l)
        stack->push_back({Tensor<Scalar>::zeros({d, 4 * d}, true), Tensor<Scalar>::zeros({d, 4 * d}, true),
                          Tensor<Scalar>::zeros({1, 4 * d}, true)});
    a.out_weight_ = Tensor<Scalar>::zeros({d, d}, true);
    a.out_bias_ = Tensor<Scalar>::zeros({1, d}, true);
    return a;
  }

  /// Inverse of parameters(): rebuilds an adapter from the fixed-order list.
  static RateAdapter from_parameters(std::size_t d, std::size_t num_layers, std::vector<Tensor<Scalar>> ps) {
    if (ps.size() != 6 * num_layers + 2) throw std::invalid_argument("RateAdapter: wrong parameter count");
    const Shape w_shape{d, 4 * d}, b_shape{1, 4 * d};
    std::size_t k = 0;
    auto take = [&](const Shape& shape) {
      auto& t = ps[k++];
      if (t.shape() != shape)
        throw shape_error("RateAdapter: parameter " + std::to_string(k - 1) + " has shape " + to_string(t.shape()) +
                          ", expected " + to_string(shape));
      return t;
    };
    RateAdapter a;
    for (auto* stack : {&a.encoder_, &a.decoder_})
      for (std::size_t l = 0; l < num_layers; ++l) {
        auto w_ih = take(w_shape);
        auto w_hh = take(w_shape);
        auto b = take(b_shape);
        stack->push_back({w_ih, w_hh, b});
      }
    a.out_weight_ = take({d, d});
    a.out_bias_ = take({1, d});
    return a;
  }

  std::size_t dim() const { return out_weight_.dim(0); }
  std::size_t num_layers() const { return encoder_.size(); }

  const std::vector<LstmCell<Scalar>>& encoder() const { return encoder_; }
  const std::vector<LstmCell<Scalar>>& decoder() const { return decoder_; }
  const Tensor<Scalar>& out_weight() const { return out_weight_; }
  const Tensor<Scalar>& out_bias() const { return out_bias_; }

  /// Fixed order: encoder layers (w_ih, w_hh, bias), decoder layers
  /// (w_ih, w_hh, bias), output weight, output bias.
  std::vector<Tensor<Scalar>> parameters() const {
    std::vector<Tensor<Scalar>> ps;
    for (const auto* stack : {&encoder_, &decoder_})
      for (const auto& c : *stack) {
        ps.push_back(c.w_ih);
        ps.push_back(c.w_hh);
        ps.push_back(c.bias);
      }
    ps.push_back(out_weight_);
    ps.push_back(out_bias_);
    return ps;
  }

  LstmState<Scalar> zero_state() const {
    LstmState<Scalar> s;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      s.h.push_back(Tensor<Scalar>::zeros({1, dim()}));
      s.c.push_back(Tensor<Scalar>::zeros({1, dim()}));
    }
    return s;
  }

  Tensor<Scalar> project(const Tensor<Scalar>& h) const { return add(matmul(h, out_weight_), out_bias_); }

 private:
  std::vector<LstmCell<Scalar>> encoder_;
  std::vector<LstmCell<Scalar>> decoder_;
  Tensor<Scalar> out_weight_;  // H×d
  Tensor<Scalar> out_bias_;    // 1×d
};

/// Runs the encoder stack over e_1..e_K from a zero state.
template <typename Scalar>
LstmState<Scalar> encode_codebook(const Tensor<Scalar>& codebook, const RateAdapter<Scalar>& adapter) {
  if (codebook.rank() != 2 || codebook.dim(0) < 1) throw shape_error("encode_codebook: empty codebook");
  if (codebook.dim(1) != adapter.dim())
    throw shape_error("encode_codebook: codebook dim " + std::to_string(codebook.dim(1)) + " != adapter dim " +
                      std::to_string(adapter.dim()));
  auto state = adapter.zero_state();
  for (std::size_t i = 0; i < codebook.dim(0); ++i) stack_step(adapter.encoder(), state, row(codebook, i));
  return state;
}

/// Adapted K̃×d codebook. Deterministic in (codebook, adapter, K̃) and
/// graph-connected to both when they require gradients.
template <typename Scalar>
Tensor<Scalar> generate_codebook(const Tensor<Scalar>& codebook, std::size_t k_tilde,
                                 const RateAdapter<Scalar>& adapter, bool cross_forcing = true) {
  if (k_tilde < 1) throw std::invalid_argument("generate_codebook: target size must be >= 1");
  auto state = encode_codebook(codebook, adapter);
  const auto schedule = build_schedule(codebook.dim(0), k_tilde, cross_forcing);
  std::vector<Tensor<Scalar>> out;
  out.reserve(k_tilde);
  for (const auto& step : schedule.steps) {
    const Tensor<Scalar> input =
        step.kind == StepSource::Kind::original ? row(codebook, step.index) : out[step.index];
    out.push_back(adapter.project(stack_step(adapter.decoder(), state, input)));
  }
  return concat_rows(out);
}

template <typename Scalar>
Tensor<Scalar> generate_codebook(const Codebook<Scalar>& codebook, std::size_t k_tilde,
                                 const RateAdapter<Scalar>& adapter, bool cross_forcing = true) {
  return generate_codebook(codebook.vectors(), k_tilde, adapter, cross_forcing);
}

/// Log-uniform integer in [k_min, k_max].
template <typename Rng>
std::size_t sample_target_size(Rng& rng, std::size_t k_min, std::size_t k_max) {
  if (k_min < 1 || k_min > k_max) throw std::invalid_argument("sample_target_size: need 1 <= k_min <= k_max");
  std::uniform_real_distribution<double> u(std::log(double(k_min)), std::log(double(k_max) + 1.0));
  const auto k = std::size_t(std::floor(std::exp(u(rng))));
  return std::clamp(k, k_min, k_max);
}

}  // namespace raq
