#pragma once

// One RAQ training iteration over a batch:
//   quantize with e, generate ẽ = G(e), quantize with ẽ, decode both,
//   compute L_VQ and L_RAQ, then apply Update(L_VQ) to {encoder, decoder, e}
//   followed by Update(L_RAQ) to {encoder, decoder, adapter, e}.
// Both gradients are taken at the pre-update parameters.

#include <concepts>
#include <optional>
#include <span>
#include <sstream>
#include <vector>

#include "raq/metrics.hpp"
#include "raq/optim.hpp"
#include "raq/seq2seq.hpp"
#include "raq/tensor.hpp"
#include "raq/vq.hpp"

namespace raq {

/// An encoder/decoder pair around a quantiser. encode() returns latents with
/// the code dimension last; decode() maps them back to the input shape.
template <typename Model, typename Scalar>
concept VqAutoencoder = requires(Model& m, const Tensor<Scalar>& t) {
  { m.encode(t) } -> std::same_as<Tensor<Scalar>>;
  { m.decode(t) } -> std::same_as<Tensor<Scalar>>;
  { m.parameters() } -> std::same_as<std::vector<Tensor<Scalar>>>;
};

struct TrainStepConfig {
  double beta = 0.25;
  double gamma = 0.99;
  bool cross_forcing = true;
};

struct LossParts {
  double recon = 0.0;
  double embed = 0.0;
  double commit = 0.0;
  double total = 0.0;
};

struct StepMetrics {
  std::size_t k_tilde = 0;
  LossParts vq;
  LossParts raq;
  double perplexity_vq = 0.0;
  double perplexity_raq = 0.0;
};

template <typename Scalar>
LossParts to_parts(const VqLoss<Scalar>& l) {
  return {double(l.recon.item()), double(l.embed.item()), double(l.commit.item()), double(l.total.item())};
}

/// Baseline forward pass: L_VQ and the quantisation it used.
template <typename Scalar, VqAutoencoder<Scalar> Model>
std::pair<VqLoss<Scalar>, QuantizationResult<Scalar>> vq_forward(Model& model, const Codebook<Scalar>& codebook,
                                                                 const Tensor<Scalar>& x, double beta) {
  auto z_e = model.encode(x);
  auto q = quantize(z_e, codebook);
  auto x_hat = model.decode(straight_through(z_e, q.quantized));
  return {vq_loss(x, x_hat, z_e, q.quantized, beta), std::move(q)};
}

namespace detail {

template <typename Scalar>
std::vector<std::vector<Scalar>> take_grads(std::vector<Tensor<Scalar>>& params) {
  std::vector<std::vector<Scalar>> out;
  out.reserve(params.size());
  for (auto& p : params) {
    out.emplace_back(p.grad().begin(), p.grad().end());
    p.zero_grad();
  }
  return out;
}

inline void check_finite_loss(const char* which, const LossParts& l) {
  if (!std::isfinite(l.total)) {
    std::ostringstream os;
    os << "train_step: non-finite " << which << " (recon=" << l.recon << ", embed=" << l.embed
       << ", commit=" << l.commit << ")";
    throw numeric_error(os.str());
  }
}

}  // namespace detail

/// `adapter` may be null, which reduces the step to a plain VQ-VAE update.
template <typename Scalar, VqAutoencoder<Scalar> Model>
StepMetrics train_step(Model& model, Codebook<Scalar>& codebook, RateAdapter<Scalar>* adapter,
                       AdamW<Scalar>& optimizer, const Tensor<Scalar>& x, std::size_t k_tilde,
                       const TrainStepConfig& config) {
  StepMetrics m;
  m.k_tilde = k_tilde;
  const bool ema = codebook.mode() == UpdateMode::ema;

  std::vector<Tensor<Scalar>> vq_params = model.parameters();
  if (!ema) vq_params.push_back(codebook.vectors());
  std::vector<Tensor<Scalar>> raq_params = vq_params;
  if (adapter)
    for (auto& p : adapter->parameters()) raq_params.push_back(p);
  for (auto& p : raq_params) p.zero_grad();

  std::optional<VqLoss<Scalar>> l_vq;
  std::optional<QuantizationResult<Scalar>> q;
  std::optional<VqLoss<Scalar>> l_raq;
  Tensor<Scalar> z_e;
  try {
    z_e = model.encode(x);
    q = quantize(z_e, codebook);
    auto x_hat = model.decode(straight_through(z_e, q->quantized));
    l_vq = vq_loss(x, x_hat, z_e, q->quantized, config.beta);
    if (adapter) {
      auto adapted = generate_codebook(codebook.vectors(), k_tilde, *adapter, config.cross_forcing);
      auto q_adapted = quantize(z_e, adapted);
      auto x_hat_adapted = model.decode(straight_through(z_e, q_adapted.quantized));
      l_raq = raq_loss(x, x_hat_adapted, z_e, q_adapted.quantized, config.beta);
      m.perplexity_raq = metrics::perplexity(q_adapted.usage_counts);
    }
  } catch (const numeric_error& e) {
    throw numeric_error(std::string("train_step: forward pass failed: ") + e.what());
  }
  m.vq = to_parts(*l_vq);
  m.perplexity_vq = metrics::perplexity(q->usage_counts);
  detail::check_finite_loss("L_VQ", m.vq);
  if (l_raq) {
    m.raq = to_parts(*l_raq);
    detail::check_finite_loss("L_RAQ", m.raq);
  }

  backward(l_vq->total);
  const auto vq_grads = detail::take_grads(vq_params);
  std::vector<std::vector<Scalar>> raq_grads;
  if (l_raq) {
    for (auto& p : raq_params) p.zero_grad();
    backward(l_raq->total);
    raq_grads = detail::take_grads(raq_params);
  }

  optimizer.step(vq_params, vq_grads);
  if (ema) ema_update(codebook, *q, z_e, config.gamma);
  if (l_raq) optimizer.step(raq_params, raq_grads);
  return m;
}

}  // namespace raq
