#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gdist/encoders.hpp"

namespace gdist {

enum class GraphMode { empty, uniform, prior_only, learned };
enum class PriorOrientation { sender_weighted, receiver_weighted };
using NormalizationAxis = ag::SoftmaxAxis;

NLOHMANN_JSON_SERIALIZE_ENUM(GraphMode, {{GraphMode::empty, "empty"},
                                         {GraphMode::uniform, "uniform"},
                                         {GraphMode::prior_only, "prior"},
                                         {GraphMode::learned, "learned"}})
NLOHMANN_JSON_SERIALIZE_ENUM(PriorOrientation, {{PriorOrientation::sender_weighted, "sender_weighted"},
                                                {PriorOrientation::receiver_weighted, "receiver_weighted"}})

inline constexpr double kCosineEps = 1e-8;

/// Knobs of the distillation layer. Defaults follow the published setup where one exists.
struct DistillConfig {
  double lambda_logits = 10.0;
  double lambda_rep = 5.0;
  double alpha = 10.0;
  std::size_t latent_dim = 128;
  NormalizationAxis axis = NormalizationAxis::rows;
  PriorOrientation orientation = PriorOrientation::sender_weighted;
  /// Feed the graph learner constant copies of the modality outputs, so encoders receive no
  /// gradient through G.
  bool detach_graph_inputs = false;
};

// ---------------------------------------------------------------------------
// Per-example form on plain values. M, G and priors are [S,S] tensors with
// entry (j,k) describing the edge k <- j.
// ---------------------------------------------------------------------------

/// One modality's outputs for a single example.
struct ExampleOutputs {
  std::vector<double> representation;
  std::vector<double> logits;
};

inline double cosine_distance(std::span<const double> u, std::span<const double> v, double eps = kCosineEps) {
  if (u.size() != v.size()) throw ShapeError("cosine_distance: length mismatch");
  double d = 0.0, a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    d += u[i] * v[i];
    a += u[i] * u[i];
    b += v[i] * v[i];
  }
  return 1.0 - d / std::max(std::sqrt(a) * std::sqrt(b), eps);
}

/// m_{receiver <- sender} = lambda1 * cos_dist(logits) + lambda2 * cos_dist(representation).
inline double pairwise_message(const ExampleOutputs& receiver, const ExampleOutputs& sender, double lambda_logits,
                               double lambda_rep) {
  if (lambda_logits < 0.0 || lambda_rep < 0.0) throw ConfigError("message weights must be non-negative");
  return lambda_logits * cosine_distance(receiver.logits, sender.logits) +
         lambda_rep * cosine_distance(receiver.representation, sender.representation);
}

inline Tensor message_matrix(std::span<const ExampleOutputs> outputs, double lambda_logits, double lambda_rep) {
  const std::size_t S = outputs.size();
  if (S < 2) throw PreconditionError("message matrix needs at least 2 modalities");
  Tensor M({S, S});
  for (std::size_t j = 0; j < S; ++j)
    for (std::size_t k = 0; k < S; ++k)
      if (j != k) M(j, k) = pairwise_message(outputs[k], outputs[j], lambda_logits, lambda_rep);
  return M;
}

inline Tensor uniform_graph(std::size_t S) {
  if (S < 2) throw PreconditionError("graph needs at least 2 vertices");
  Tensor G({S, S}, 1.0 / static_cast<double>(S - 1));
  for (std::size_t j = 0; j < S; ++j) G(j, j) = 0.0;
  return G;
}

inline void validate_prior(std::span<const double> c) {
  if (c.empty()) throw ConfigError("prior vector is empty");
  double s = 0.0;
  for (double v : c) {
    if (!(v >= 0.0)) throw ConfigError("prior vector has a negative or NaN entry");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-6) throw ConfigError("prior vector must sum to 1, sums to " + std::to_string(s));
}

/// Constant rank-one graph from c. sender_weighted: (j,k) = c_j; receiver_weighted (1 c^T): (j,k) = c_k.
inline Tensor prior_graph(std::span<const double> c, PriorOrientation orientation) {
  validate_prior(c);
  const std::size_t S = c.size();
  Tensor P({S, S});
  for (std::size_t j = 0; j < S; ++j)
    for (std::size_t k = 0; k < S; ++k) P(j, k) = orientation == PriorOrientation::sender_weighted ? c[j] : c[k];
  return P;
}

inline Tensor add_prior(const Tensor& G, std::span<const double> c, PriorOrientation orientation) {
  Tensor P = prior_graph(c, orientation);
  expect_shape(G, P.shape(), "add_prior");
  for (std::size_t i = 0; i < P.size(); ++i) P[i] += G[i];
  return P;
}

/// Softmax of alpha * G along each row (or column), diagonal excluded and set to 0.
inline Tensor normalize_graph(const Tensor& raw, double alpha, NormalizationAxis axis = NormalizationAxis::rows) {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  expect_rank(raw, 2, "normalize_graph");
  ag::NoGradGuard guard;
  const Var out = ag::masked_softmax(ag::Var(raw.reshaped({1, raw.dim(0), raw.dim(1)})), alpha, axis);
  return out.value().reshaped({raw.dim(0), raw.dim(1)});
}

/// l_m[k] = sum_j G[j,k] * M[j,k], i.e. (G .* M)^T 1.
inline std::vector<double> imitation_loss_vector(const Tensor& G, const Tensor& M) {
  expect_rank(G, 2, "imitation_loss_vector");
  expect_shape(M, G.shape(), "imitation_loss_vector messages");
  const std::size_t S = G.dim(0);
  std::vector<double> loss(S, 0.0);
  for (std::size_t j = 0; j < S; ++j)
    for (std::size_t k = 0; k < S; ++k) loss[k] += G(j, k) * M(j, k);
  return loss;
}

// ---------------------------------------------------------------------------
// Batched, differentiable form used in training.
// ---------------------------------------------------------------------------

/// Messages for a batch as [B,S,S]. The sender side is detached: gradients reach only the receiver.
/// `senders` optionally supplies the sender targets (default: `outs` itself); gradient checks pass a
/// frozen snapshot so finite differences see the same function the analytic gradient describes.
inline Var message_tensor(std::span<const ModalityOutputs> outs, double lambda_logits, double lambda_rep,
                          std::span<const ModalityOutputs> senders = {}) {
  const std::size_t S = outs.size();
  if (S < 2) throw PreconditionError("message matrix needs at least 2 modalities");
  if (senders.empty()) senders = outs;
  if (senders.size() != S) throw ShapeError("sender targets do not match the modality count");
  const std::size_t B = outs[0].logits.dim(0);
  std::vector<Var> entries(S * S);
  std::vector<Var> rep_target(S), logit_target(S);
  for (std::size_t j = 0; j < S; ++j) {
    rep_target[j] = senders[j].representation.detach();
    logit_target[j] = senders[j].logits.detach();
  }
  for (std::size_t j = 0; j < S; ++j)
    for (std::size_t k = 0; k < S; ++k) {
      if (j == k) continue;
      Var m = ag::affine(ag::cosine_distance(outs[k].logits, logit_target[j], kCosineEps), lambda_logits, 0.0);
      Var r = ag::affine(ag::cosine_distance(outs[k].representation, rep_target[j], kCosineEps), lambda_rep, 0.0);
      entries[j * S + k] = ag::add(m, r);
    }
  return ag::matrix_from_entries(entries, S, B);
}

/// W11: d_f -> d_z, W12: classes -> d_z, W21: 2*d_z -> 1 (no biases; a bias on W21 cancels in the softmax).
class GraphParams {
public:
  GraphParams() = default;
  GraphParams(std::size_t feature_dim, std::size_t classes, std::size_t latent_dim, Rng& rng)
      : w11_(feature_dim, latent_dim, rng, false),
        w12_(classes, latent_dim, rng, false),
        w21_(nn::fan_in_uniform({2 * latent_dim}, 2 * latent_dim, rng)) {}

  /// z_k = W11 rep_k + W12 logits_k, stacked as [B,S,d_z].
  Var latents(std::span<const ModalityOutputs> outs) const {
    std::vector<Var> z;
    for (const auto& o : outs) z.push_back(ag::add(w11_.forward(o.representation), w12_.forward(o.logits)));
    return ag::stack_dim1(z);
  }

  /// Raw G[b,j,k] = W21 [z_j || z_k] over every ordered pair, diagonal included.
  Var raw_graph(std::span<const ModalityOutputs> outs) const { return ag::pair_scores(latents(outs), w21_); }

  nn::ParameterList parameters() const {
    nn::ParameterList out;
    if (!w21_.defined()) return out;  // single-modality model: no graph
    w11_.collect(out, "graph.w11");
    w12_.collect(out, "graph.w12");
    out.push_back({"graph.w21", w21_});
    return out;
  }

  nn::Linear& w11() { return w11_; }
  nn::Linear& w12() { return w12_; }
  Var& w21() { return w21_; }

private:
  nn::Linear w11_, w12_;
  Var w21_;
};

/// Plain-value learn_graph for one example (literal concatenation per pair).
inline Tensor learn_graph(std::span<const ExampleOutputs> outputs, const GraphParams& params) {
  std::vector<ModalityOutputs> outs;
  for (const auto& o : outputs)
    outs.push_back({Var(Tensor({1, o.representation.size()}, o.representation)),
                    Var(Tensor({1, o.logits.size()}, o.logits))});
  ag::NoGradGuard guard;
  const std::size_t S = outputs.size();
  return params.raw_graph(outs).value().reshaped({S, S});
}

/// The graph used in one training step: its mode, the prior vector once known, and the learner.
class DistillationGraph {
public:
  DistillationGraph() = default;
  DistillationGraph(std::size_t modalities, std::size_t feature_dim, std::size_t classes, DistillConfig cfg,
                    Rng& rng)
      : S_(modalities), cfg_(cfg) {
    if (modalities >= 2) params_ = GraphParams(feature_dim, classes, cfg.latent_dim, rng);
  }

  GraphMode mode() const { return mode_; }
  void set_mode(GraphMode m) {
    if (m != GraphMode::empty && S_ < 2) throw PreconditionError("a distillation graph needs at least 2 modalities");
    if (m == GraphMode::prior_only && !prior_) throw PreconditionError("prior graph requested before c is known");
    mode_ = m;
  }
  void set_prior(std::vector<double> c) {
    if (c.size() != S_) throw ConfigError("prior vector length does not match modality count");
    validate_prior(c);
    prior_ = std::move(c);
  }
  const std::optional<std::vector<double>>& prior() const { return prior_; }
  const DistillConfig& config() const { return cfg_; }
  std::size_t vertices() const { return S_; }
  GraphParams& params() { return params_; }
  const GraphParams& params() const { return params_; }

  /// Effective per-example weights [B,S,S], or undefined for the empty graph.
  Var effective_weights(std::span<const ModalityOutputs> outs) const {
    const std::size_t B = outs.empty() ? 0 : outs[0].logits.dim(0);
    switch (mode_) {
      case GraphMode::empty:
        return {};
      case GraphMode::uniform:
        return constant_batch(uniform_graph(S_), B);
      case GraphMode::prior_only:
        return constant_batch(prior_graph(*prior_, cfg_.orientation), B);
      case GraphMode::learned: {
        Var raw;
        if (cfg_.detach_graph_inputs) {
          std::vector<ModalityOutputs> fixed;
          for (const auto& o : outs) fixed.push_back({o.representation.detach(), o.logits.detach()});
          raw = params_.raw_graph(fixed);
        } else {
          raw = params_.raw_graph(outs);
        }
        Var G = ag::masked_softmax(raw, cfg_.alpha, cfg_.axis);
        if (prior_) G = ag::add_broadcast(G, prior_graph(*prior_, cfg_.orientation));
        return G;
      }
    }
    return {};
  }

  /// Per-example per-modality imitation losses [B,S], or undefined for the empty graph.
  Var imitation(std::span<const ModalityOutputs> outs, std::span<const ModalityOutputs> senders = {}) const {
    if (mode_ == GraphMode::empty || S_ < 2) return {};
    if (outs.size() != S_) throw ShapeError("graph has " + std::to_string(S_) + " vertices but got outputs for " +
                                            std::to_string(outs.size()) + " modalities");
    Var M = message_tensor(outs, cfg_.lambda_logits, cfg_.lambda_rep, senders);
    if (mode_ == GraphMode::uniform) return ag::column_sums(ag::mul_broadcast(M, uniform_graph(S_)));
    if (mode_ == GraphMode::prior_only)
      return ag::column_sums(ag::mul_broadcast(M, prior_graph(*prior_, cfg_.orientation)));
    return ag::column_sums(ag::mul(effective_weights(outs), M));
  }

private:
  static Var constant_batch(const Tensor& G, std::size_t B) {
    Tensor out({B, G.dim(0), G.dim(1)});
    for (std::size_t b = 0; b < B; ++b) std::copy(G.storage().begin(), G.storage().end(), out.data() + b * G.size());
    return Var(std::move(out));
  }

  std::size_t S_ = 0;
  DistillConfig cfg_;
  GraphMode mode_ = GraphMode::empty;
  std::optional<std::vector<double>> prior_;
  GraphParams params_;
};

/// mean over the batch of [sum_k CE_k + sum_k l_m[k]].
inline Var total_loss(std::span<const ModalityOutputs> outs, std::span<const int> labels,
                      const DistillationGraph& graph, std::span<const double> class_weights = {},
                      std::span<const ModalityOutputs> senders = {}) {
  if (outs.empty()) throw PreconditionError("total_loss needs at least one modality");
  const double inv_b = 1.0 / static_cast<double>(labels.size());
  Var sum;
  for (const auto& o : outs) {
    Var ce = ag::sum_all(ag::cross_entropy(o.logits, labels, class_weights));
    sum = sum.defined() ? ag::add(sum, ce) : ce;
  }
  if (Var im = graph.imitation(outs, senders); im.defined()) sum = ag::add(sum, ag::sum_all(im));
  return ag::scale(sum, inv_b);
}

}  // namespace gdist
