#pragma once

// Desk-scale convolutional autoencoder around the quantiser.
//
// encoder: conv4x4/2 -> relu -> conv4x4/2 -> resblock -> relu -> conv1x1 to d,
//          then NCHW -> NHWC so the code dimension is last
// decoder: NHWC -> NCHW, conv3x3 to hidden -> resblock -> relu
//          -> tconv4x4/2 -> relu -> tconv4x4/2 to 1 channel -> sigmoid
// resblock(x) = x + conv1x1(relu(conv3x3(relu(x))))

#include <cstddef>
#include <random>
#include <vector>

#include "raq/ops.hpp"
#include "raq/tensor.hpp"

namespace raq::harness {

class ToyVqModel {
 public:
  ToyVqModel() = default;

  /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
  static ToyVqModel init(std::size_t hidden, std::size_t dim, std::mt19937_64& rng);
  /// Inverse of parameters().
  static ToyVqModel from_parameters(std::size_t hidden, std::size_t dim, std::vector<Tensorf> ps);

  std::size_t hidden() const { return hidden_; }
  std::size_t dim() const { return dim_; }

  /// B×1×H×W -> B×(H/4)×(W/4)×d.
  Tensorf encode(const Tensorf& x) const;
  /// B×M×N×d -> B×1×4M×4N.
  Tensorf decode(const Tensorf& z) const;

  /// Fixed order, encoder then decoder, each conv as (kernel, bias).
  std::vector<Tensorf> parameters() const;

  /// Shapes of parameters(), in order.
  static std::vector<Shape> parameter_shapes(std::size_t hidden, std::size_t dim);

 private:
  std::size_t hidden_ = 0;
  std::size_t dim_ = 0;
  std::vector<Tensorf> p_;
};

}  // namespace raq::harness
