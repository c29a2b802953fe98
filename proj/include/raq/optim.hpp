#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "raq/tensor.hpp"

namespace raq {

template <typename Scalar>
void zero_grad(std::span<Tensor<Scalar>> params) {
  for (auto& p : params) p.zero_grad();
}

/// Plain gradient descent: p -= lr * grad.
template <typename Scalar>
void sgd_step(std::span<Tensor<Scalar>> params, double lr) {
  for (auto& p : params) {
    if (!p.has_grad()) throw std::logic_error("sgd_step: parameter has no gradient");
    auto w = p.mutable_data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = Scalar(w[i] - lr * g[i]);
  }
}

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay. Moments are keyed by parameter identity,
/// each with its own step count, so disjoint parameter groups can be stepped
/// independently.
template <typename Scalar>
class AdamW {
 public:
  struct Moments {
    std::size_t step = 0;
    std::vector<double> m;
    std::vector<double> v;
  };

  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  void step(std::span<Tensor<Scalar>> params) {
    for (auto& p : params) {
      if (!p.has_grad()) throw std::logic_error("adamw_step: parameter has no gradient");
      update(p, p.grad());
    }
  }

  /// Steps `params` with externally supplied gradients (same order, same sizes).
  void step(std::span<Tensor<Scalar>> params, std::span<const std::vector<Scalar>> grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("adamw_step: gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (grads[i].size() != params[i].size()) throw std::invalid_argument("adamw_step: gradient size mismatch");
      update(params[i], grads[i]);
    }
  }

  Moments& moments(const Tensor<Scalar>& p) { return state_[p.id()]; }
  const Moments* find(const Tensor<Scalar>& p) const {
    auto it = state_.find(p.id());
    return it == state_.end() ? nullptr : &it->second;
  }

 private:
  void update(Tensor<Scalar>& p, std::span<const Scalar> g) {
    auto& s = state_[p.id()];
    if (s.m.size() != p.size()) {
      s.m.assign(p.size(), 0.0);
      s.v.assign(p.size(), 0.0);
    }
    ++s.step;
    const double bc1 = 1.0 - std::pow(config_.beta1, double(s.step));
    const double bc2 = 1.0 - std::pow(config_.beta2, double(s.step));
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g[i];
      s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * double(g[i]) * g[i];
      const double m_hat = s.m[i] / bc1;
      const double v_hat = s.v[i] / bc2;
      double wi = double(w[i]) * (1.0 - config_.lr * config_.weight_decay);
      wi -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      w[i] = Scalar(wi);
    }
  }

  AdamWConfig config_;
  std::unordered_map<const detail::Node<Scalar>*, Moments> state_;
};

}  // namespace raq
