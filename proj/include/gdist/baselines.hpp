#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gdist/distill.hpp"

namespace gdist {

enum class StrategyKind { empty, uniform, prior, learned, kd, cross_modal, multitask };

NLOHMANN_JSON_SERIALIZE_ENUM(StrategyKind, {{StrategyKind::empty, "empty"},
                                            {StrategyKind::uniform, "uniform"},
                                            {StrategyKind::prior, "prior"},
                                            {StrategyKind::learned, "learned"},
                                            {StrategyKind::kd, "kd"},
                                            {StrategyKind::cross_modal, "cross_modal"},
                                            {StrategyKind::multitask, "multitask"}})

inline bool is_graph_strategy(StrategyKind k) {
  return k == StrategyKind::empty || k == StrategyKind::uniform || k == StrategyKind::prior ||
         k == StrategyKind::learned;
}

/// How privileged modalities are used during training.
struct StrategyConfig {
  StrategyKind kind = StrategyKind::learned;
  DistillConfig distill;
  double temperature = 2.0;
  double multitask_weight = 1.0;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (distill.lambda_logits < 0.0 || distill.lambda_rep < 0.0) throw ConfigError("lambda weights must be >= 0");
    if (!(distill.alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (distill.latent_dim == 0) throw ConfigError("latent_dim must be positive");
    if (multitask_weight < 0.0) throw ConfigError("multitask_weight must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const StrategyConfig& s) {
  j = {{"kind", s.kind},
       {"lambda1", s.distill.lambda_logits},
       {"lambda2", s.distill.lambda_rep},
       {"alpha", s.distill.alpha},
       {"latent_dim", s.distill.latent_dim},
       {"normalization_axis", s.distill.axis == NormalizationAxis::rows ? "rows" : "cols"},
       {"prior_orientation", s.distill.orientation},
       {"detach_graph_inputs", s.distill.detach_graph_inputs},
       {"temperature", s.temperature},
       {"multitask_weight", s.multitask_weight}};
}

inline void from_json(const nlohmann::json& j, StrategyConfig& s) {
  StrategyConfig d;
  s.kind = j.value("kind", d.kind);
  s.distill.lambda_logits = j.value("lambda1", d.distill.lambda_logits);
  s.distill.lambda_rep = j.value("lambda2", d.distill.lambda_rep);
  s.distill.alpha = j.value("alpha", d.distill.alpha);
  s.distill.latent_dim = j.value("latent_dim", d.distill.latent_dim);
  const auto axis = j.value("normalization_axis", std::string("rows"));
  if (axis != "rows" && axis != "cols") throw ConfigError("normalization_axis must be 'rows' or 'cols'");
  s.distill.axis = axis == "rows" ? NormalizationAxis::rows : NormalizationAxis::cols;
  s.distill.orientation = j.value("prior_orientation", d.distill.orientation);
  s.distill.detach_graph_inputs = j.value("detach_graph_inputs", d.distill.detach_graph_inputs);
  s.temperature = j.value("temperature", d.temperature);
  s.multitask_weight = j.value("multitask_weight", d.multitask_weight);
  // Unknown enum strings would otherwise map silently to the first enumerator.
  if (j.contains("kind") && nlohmann::json(s.kind) != j.at("kind"))
    throw ConfigError("unknown strategy kind " + j.at("kind").dump());
  if (j.contains("prior_orientation") && nlohmann::json(s.distill.orientation) != j.at("prior_orientation"))
    throw ConfigError("unknown prior_orientation " + j.at("prior_orientation").dump());
}

namespace detail {
/// S values of shape [B] -> [B,S]
inline Var columns(std::span<const Var> cols) {
  std::vector<Var> as2d;
  const std::size_t B = cols[0].dim(0);
  for (const auto& c : cols) as2d.push_back(ag::reshape(c, {B, 1}));
  return ag::reshape(ag::stack_dim1(as2d), {B, cols.size()});
}

inline std::vector<ModalityOutputs> single_batch(std::span<const ExampleOutputs> outputs) {
  std::vector<ModalityOutputs> outs;
  for (const auto& o : outputs)
    outs.push_back({Var(Tensor({1, o.representation.size()}, o.representation)),
                    Var(Tensor({1, o.logits.size()}, o.logits))});
  return outs;
}

inline std::vector<double> row_values(const Var& v) { return v.value().storage(); }
}  // namespace detail

/// Pairwise-averaged high-temperature distillation: for receiver k,
/// mean over senders j != k of CE(softmax(z_j/T) detached, softmax(z_k/T)). Returns [B,S].
inline Var kd_loss(std::span<const ModalityOutputs> outs, double temperature) {
  const std::size_t S = outs.size();
  if (S < 2) throw PreconditionError("kd_loss needs at least 2 modalities");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  std::vector<Var> soft(S);
  for (std::size_t j = 0; j < S; ++j) soft[j] = ag::softmax(outs[j].logits.detach(), temperature);
  std::vector<Var> per_modality;
  for (std::size_t k = 0; k < S; ++k) {
    std::vector<Var> pairs;
    for (std::size_t j = 0; j < S; ++j)
      if (j != k) pairs.push_back(ag::soft_cross_entropy(outs[k].logits, soft[j], temperature));
    per_modality.push_back(ag::average(pairs));
  }
  return detail::columns(per_modality);
}

/// Pairwise-averaged squared L2 on softened logits and representations, sender detached. Returns [B,S].
inline Var cross_modal_loss(std::span<const ModalityOutputs> outs, double temperature, double w_logits = 1.0,
                            double w_rep = 1.0) {
  const std::size_t S = outs.size();
  if (S < 2) throw PreconditionError("cross_modal_loss needs at least 2 modalities");
  for (const auto& o : outs)
    if (o.representation.shape() != outs[0].representation.shape() || o.logits.shape() != outs[0].logits.shape())
      throw ShapeError("cross_modal_loss: modality outputs differ in shape");
  std::vector<Var> soft(S), soft_target(S), rep_target(S);
  for (std::size_t j = 0; j < S; ++j) {
    soft[j] = ag::softmax(outs[j].logits, temperature);
    soft_target[j] = soft[j].detach();
    rep_target[j] = outs[j].representation.detach();
  }
  std::vector<Var> per_modality;
  for (std::size_t k = 0; k < S; ++k) {
    std::vector<Var> pairs;
    for (std::size_t j = 0; j < S; ++j) {
      if (j == k) continue;
      pairs.push_back(ag::add(ag::scale(ag::squared_distance(soft[k], soft_target[j]), w_logits),
                              ag::scale(ag::squared_distance(outs[k].representation, rep_target[j]), w_rep)));
    }
    per_modality.push_back(ag::average(pairs));
  }
  return detail::columns(per_modality);
}

inline std::vector<double> kd_loss(std::span<const ExampleOutputs> outputs, double temperature) {
  ag::NoGradGuard guard;
  return detail::row_values(kd_loss(detail::single_batch(outputs), temperature));
}

inline std::vector<double> cross_modal_loss(std::span<const ExampleOutputs> outputs, double temperature,
                                            double w_logits = 1.0, double w_rep = 1.0) {
  ag::NoGradGuard guard;
  return detail::row_values(cross_modal_loss(detail::single_batch(outputs), temperature, w_logits, w_rep));
}

/// One linear decoder per ordered (source, target) modality pair predicting the target's raw clip
/// from the source representation.
class MultitaskDecoders {
public:
  MultitaskDecoders() = default;
  MultitaskDecoders(std::size_t feature_dim, const std::vector<std::size_t>& clip_sizes, Rng& rng)
      : S_(clip_sizes.size()), clip_sizes_(clip_sizes) {
    for (std::size_t k = 0; k < S_; ++k)
      for (std::size_t j = 0; j < S_; ++j)
        decoders_.push_back(j == k ? nn::Linear() : nn::Linear(feature_dim, clip_sizes[j], rng));
  }

  const nn::Linear& decoder(std::size_t source, std::size_t target) const { return decoders_[source * S_ + target]; }
  nn::Linear& decoder(std::size_t source, std::size_t target) { return decoders_[source * S_ + target]; }

  /// Returns [B] reconstruction loss for `source`: sum over other modalities of the mean squared error.
  Var loss_for(std::size_t source, const Var& representation, std::span<const Tensor> raw_clips) const {
    if (raw_clips.size() != S_) throw ShapeError("multitask loss: expected one clip batch per modality");
    const std::size_t B = representation.dim(0);
    Var total;
    for (std::size_t j = 0; j < S_; ++j) {
      if (j == source) continue;
      if (raw_clips[j].size() != B * clip_sizes_[j])
        throw ShapeError("multitask loss: target clip batch for modality " + std::to_string(j) + " has " +
                         std::to_string(raw_clips[j].size()) + " values, decoder emits " +
                         std::to_string(B * clip_sizes_[j]));
      Var pred = decoder(source, j).forward(representation);
      Var target(raw_clips[j].reshaped({B, clip_sizes_[j]}));
      Var mse = ag::scale(ag::squared_distance(pred, target), 1.0 / static_cast<double>(clip_sizes_[j]));
      total = total.defined() ? ag::add(total, mse) : mse;
    }
    return total;
  }

  /// [B,S] per-modality reconstruction losses.
  Var loss(std::span<const ModalityOutputs> outs, std::span<const Tensor> raw_clips) const {
    std::vector<Var> cols;
    for (std::size_t k = 0; k < S_; ++k) cols.push_back(loss_for(k, outs[k].representation, raw_clips));
    return detail::columns(cols);
  }

  nn::ParameterList parameters() const {
    nn::ParameterList out;
    for (std::size_t k = 0; k < S_; ++k)
      for (std::size_t j = 0; j < S_; ++j)
        if (j != k) decoder(k, j).collect(out, "decoder." + std::to_string(k) + "->" + std::to_string(j));
    return out;
  }

private:
  std::size_t S_ = 0;
  std::vector<std::size_t> clip_sizes_;
  std::vector<nn::Linear> decoders_;
};

/// Fixed graphs for the ablations: empty (all zero), uniform (1/(S-1) off the diagonal) or
/// prior (sender-weighted rows from c).
inline Tensor build_predefined_graph(StrategyKind kind, std::size_t S, std::span<const double> c = {}) {
  switch (kind) {
    case StrategyKind::empty:
      return Tensor({S, S});
    case StrategyKind::uniform:
      return uniform_graph(S);
    case StrategyKind::prior:
      if (c.size() != S) throw ConfigError("prior graph needs a vector of length " + std::to_string(S));
      return prior_graph(c, PriorOrientation::sender_weighted);
    default:
      throw ConfigError("strategy is not a predefined graph");
  }
}

}  // namespace gdist
