#pragma once

#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gdist/baselines.hpp"
#include "gdist/datagen.hpp"
#include "gdist/distill.hpp"
#include "gdist/encoders.hpp"
#include "gdist/eval.hpp"
#include "gdist/optim.hpp"

namespace gdist {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainSchedule {
  std::size_t total_epochs = 60;
  std::size_t stage1_epochs = 30;
  std::size_t batch_size = 16;
  double visual_lr = 1e-2;  // momentum SGD: visual encoders, heads, decoders
  double momentum = 0.9;
  double weight_decay = 0.0;
  double sequence_lr = 1e-3;  // Adam: sequence encoders
  double graph_lr = 1e-3;     // Adam: W11, W12, W21
  /// Epochs at which every rate is multiplied by 0.1. Empty: 62.5% and 87.5% of total_epochs.
  std::vector<std::size_t> milestones;
  double validation_fraction = 0.1;
  /// Detection only; 0 derives it from the training footage.
  std::size_t steps_per_epoch = 0;
  /// Rescale all gradients when their global L2 norm exceeds this; 0 disables.
  double clip_grad_norm = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (total_epochs == 0) throw ConfigError("schedule.total_epochs must be >= 1");
    if (stage1_epochs > total_epochs) throw ConfigError("schedule.stage1_epochs must not exceed total_epochs");
    if (batch_size == 0) throw ConfigError("schedule.batch_size must be >= 1");
    if (!(visual_lr > 0.0) || !(sequence_lr > 0.0) || !(graph_lr > 0.0))
      throw ConfigError("schedule learning rates must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("schedule.momentum must lie in [0, 1)");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0)
      throw ConfigError("schedule.validation_fraction must lie in [0, 1)");
    if (clip_grad_norm < 0.0) throw ConfigError("schedule.clip_grad_norm must be >= 0");
  }

  std::vector<std::size_t> resolved_milestones() const {
    if (!milestones.empty()) return milestones;
    const auto at = [&](double f) {
      return static_cast<std::size_t>(std::llround(f * static_cast<double>(total_epochs)));
    };
    return {at(0.625), at(0.875)};
  }
};

inline void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = {{"total_epochs", s.total_epochs},   {"stage1_epochs", s.stage1_epochs},
       {"batch_size", s.batch_size},       {"visual_lr", s.visual_lr},
       {"momentum", s.momentum},           {"weight_decay", s.weight_decay},
       {"sequence_lr", s.sequence_lr},     {"graph_lr", s.graph_lr},
       {"milestones", s.milestones},       {"validation_fraction", s.validation_fraction},
       {"steps_per_epoch", s.steps_per_epoch}, {"clip_grad_norm", s.clip_grad_norm},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, TrainSchedule& s) {
  TrainSchedule d;
  s.total_epochs = j.value("total_epochs", d.total_epochs);
  s.stage1_epochs = j.value("stage1_epochs", d.stage1_epochs);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.visual_lr = j.value("visual_lr", d.visual_lr);
  s.momentum = j.value("momentum", d.momentum);
  s.weight_decay = j.value("weight_decay", d.weight_decay);
  s.sequence_lr = j.value("sequence_lr", d.sequence_lr);
  s.graph_lr = j.value("graph_lr", d.graph_lr);
  s.milestones = j.value("milestones", d.milestones);
  s.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  s.steps_per_epoch = j.value("steps_per_epoch", d.steps_per_epoch);
  s.clip_grad_norm = j.value("clip_grad_norm", d.clip_grad_norm);
  s.seed = j.value("seed", d.seed);
}

struct SamplerConfig {
  std::size_t clip_length = 10;   // T_c
  std::size_t window_clips = 10;  // T_w
  std::size_t clip_step = 0;      // s_c; 0 means T_c
  std::size_t window_step = 0;    // s_w in frames; 0 means T_w * s_c
  double gamma = 0.4;
  std::size_t test_clips = 5;
  ActivityGate gate = ActivityGate::non_background_mass;

  std::size_t s_c() const { return clip_step ? clip_step : clip_length; }
  std::size_t s_w() const { return window_step ? window_step : window_clips * s_c(); }
  std::size_t window_span() const { return (window_clips - 1) * s_c() + clip_length; }

  void validate() const {
    if (clip_length == 0 || window_clips == 0 || test_clips == 0)
      throw ConfigError("sampler lengths and test_clips must be >= 1");
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("sampler.gamma must lie in (0, 1)");
    if (s_w() % s_c() != 0) throw ConfigError("sampler.window_step must be a multiple of the clip step");
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(ActivityGate, {{ActivityGate::non_background_mass, "non_background_mass"},
                                            {ActivityGate::max_class, "max_class"}})

inline void to_json(nlohmann::json& j, const SamplerConfig& s) {
  j = {{"clip_length", s.clip_length}, {"window_clips", s.window_clips}, {"clip_step", s.clip_step},
       {"window_step", s.window_step}, {"gamma", s.gamma},               {"test_clips", s.test_clips},
       {"gate", s.gate}};
}

inline void from_json(const nlohmann::json& j, SamplerConfig& s) {
  SamplerConfig d;
  s.clip_length = j.value("clip_length", d.clip_length);
  s.window_clips = j.value("window_clips", d.window_clips);
  s.clip_step = j.value("clip_step", d.clip_step);
  s.window_step = j.value("window_step", d.window_step);
  s.gamma = j.value("gamma", d.gamma);
  s.test_clips = j.value("test_clips", d.test_clips);
  s.gate = j.value("gate", d.gate);
  if (j.contains("gate") && nlohmann::json(s.gate) != j.at("gate"))
    throw ConfigError("unknown sampler gate " + j.at("gate").dump());
}

using MetricsSink = std::function<void(const nlohmann::json&)>;

// ---------------------------------------------------------------------------
// Sampling and weighting
// ---------------------------------------------------------------------------

inline std::size_t sample_clip_start(std::size_t length, std::size_t clip_length, Rng& rng) {
  if (clip_length == 0) throw PreconditionError("clip length must be >= 1");
  if (length < clip_length)
    throw DataError("video of " + std::to_string(length) + " frames is shorter than a clip of " +
                    std::to_string(clip_length));
  return uniform_index(rng, length - clip_length + 1);
}

/// One aligned clip: the same start frame in every modality.
inline std::vector<Tensor> sample_clip(const std::vector<Tensor>& video, std::size_t clip_length, Rng& rng) {
  if (video.empty()) throw DataError("video has no modalities");
  const std::size_t start = sample_clip_start(video.front().dim(0), clip_length, rng);
  std::vector<Tensor> out;
  for (const auto& m : video) out.push_back(slice_leading(m, start, clip_length));
  return out;
}

/// Majority frame label of [start, start+T_c); ties prefer background, then the lower class index.
inline int clip_label(std::span<const int> frame_labels, std::size_t start, std::size_t clip_length,
                      int background) {
  std::map<int, std::size_t> count;
  for (std::size_t t = start; t < start + clip_length; ++t) ++count[frame_labels[t]];
  int best = background;
  std::size_t best_n = count.count(background) ? count[background] : 0;
  for (const auto& [label, n] : count)
    if (n > best_n) {
      best = label;
      best_n = n;
    }
  return best;
}

struct Window {
  std::size_t start = 0;
  std::vector<Tensor> clips;  // per modality [T_w, T_c, frame...]
  std::vector<int> labels;    // per clip
};

/// Window of T_w clips (each T_c frames, stepped by s_c) starting at `start` in every listed modality.
inline Window window_at(const DetectionVideo& video, std::span<const int> frame_labels, std::size_t start,
                        const SamplerConfig& s, int background, std::span<const std::size_t> modalities) {
  Window w;
  w.start = start;
  for (std::size_t m : modalities) {
    std::vector<Tensor> clips;
    for (std::size_t t = 0; t < s.window_clips; ++t)
      clips.push_back(slice_leading(video.frames.at(m), start + t * s.s_c(), s.clip_length));
    w.clips.push_back(stack(clips));
  }
  for (std::size_t t = 0; t < s.window_clips; ++t)
    w.labels.push_back(clip_label(frame_labels, start + t * s.s_c(), s.clip_length, background));
  return w;
}

inline Window sample_window(const DetectionVideo& video, std::size_t num_classes, const SamplerConfig& s, Rng& rng,
                            std::span<const std::size_t> modalities) {
  const std::size_t span = s.window_span();
  if (video.length() < span)
    throw DataError("video of " + std::to_string(video.length()) + " frames is shorter than a window of " +
                    std::to_string(span));
  const auto labels = video.frame_labels(num_classes);
  const std::size_t start = uniform_index(rng, video.length() - span + 1);
  return window_at(video, labels, start, s, static_cast<int>(num_classes), modalities);
}

/// Inverse-frequency weights with mean 1 over the classes that occur; absent classes get 0.
inline std::vector<double> class_weights(std::span<const int> labels, std::size_t classes) {
  if (labels.empty()) throw DataError("class_weights: empty label set");
  std::vector<std::size_t> count(classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw DataError("class_weights: label out of range");
    ++count[static_cast<std::size_t>(y)];
  }
  std::vector<double> w(classes, 0.0);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (count[c] == 0) {
      std::clog << "warning: class " << c << " absent from training labels; weight set to 0\n";
      continue;
    }
    w[c] = 1.0 / static_cast<double>(count[c]);
    sum += w[c];
    ++present;
  }
  for (auto& v : w) v *= static_cast<double>(present) / sum;
  return w;
}

namespace detail {

inline std::vector<std::size_t> resolve_modalities(const CorpusSpec& spec, const std::vector<std::string>& names) {
  if (names.empty()) throw ConfigError("at least one training modality is required");
  std::vector<std::size_t> idx;
  for (const auto& n : names) {
    const auto i = spec.modality_index(n);
    if (std::find(idx.begin(), idx.end(), i) != idx.end()) throw ConfigError("modality '" + n + "' listed twice");
    idx.push_back(i);
  }
  return idx;
}

inline void check_strategy(const StrategyConfig& strategy, std::size_t modalities) {
  strategy.validate();
  if (strategy.kind != StrategyKind::empty && modalities < 2)
    throw ConfigError("strategy needs at least 2 training modalities; use 'empty' for one");
}

inline std::uint64_t hash_tensor(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* p = reinterpret_cast<const unsigned char*>(t.data());
  for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

/// Scale the gradients of every listed parameter so their joint L2 norm is at most max_norm.
inline void clip_gradients(std::initializer_list<const nn::ParameterList*> groups, double max_norm) {
  if (max_norm <= 0.0) return;
  double ss = 0.0;
  for (const auto* g : groups)
    for (const auto& p : *g)
      for (double v : p.var.grad().storage()) ss += v * v;
  const double norm = std::sqrt(ss);
  if (norm <= max_norm) return;
  const double k = max_norm / norm;
  for (const auto* g : groups)
    for (const auto& p : *g) {
      auto& grad = p.var.node()->grad;
      for (auto& v : grad.storage()) v *= k;
    }
}

inline std::vector<double> normalize_accuracy(const std::vector<double>& acc) {
  double sum = 0.0;
  for (double a : acc) sum += a;
  std::vector<double> c(acc.size(), 1.0 / static_cast<double>(acc.size()));
  if (sum > 0.0)
    for (std::size_t i = 0; i < acc.size(); ++i) c[i] = acc[i] / sum;
  return c;
}

/// Graph mode for one epoch under the curriculum.
inline GraphMode graph_mode_for(StrategyKind kind, std::size_t epoch, std::size_t stage1) {
  switch (kind) {
    case StrategyKind::uniform:
      return GraphMode::uniform;
    case StrategyKind::prior:
      return epoch < stage1 ? GraphMode::uniform : GraphMode::prior_only;
    case StrategyKind::learned:
      return epoch < stage1 ? GraphMode::uniform : GraphMode::learned;
    default:
      return GraphMode::empty;
  }
}

inline bool needs_prior(StrategyKind k) { return k == StrategyKind::prior || k == StrategyKind::learned; }

/// The per-batch objective shared by both trainers: mean over rows of classification plus
/// strategy-specific losses.
inline Var strategy_loss(const StrategyConfig& strategy, std::span<const ModalityOutputs> outs,
                         std::span<const int> labels, const DistillationGraph& graph,
                         std::span<const double> weights, const MultitaskDecoders* decoders,
                         std::span<const Tensor> raw_clips) {
  if (is_graph_strategy(strategy.kind)) return total_loss(outs, labels, graph, weights);
  const double inv_b = 1.0 / static_cast<double>(labels.size());
  Var sum;
  for (const auto& o : outs) {
    Var ce = ag::sum_all(ag::cross_entropy(o.logits, labels, weights));
    sum = sum.defined() ? ag::add(sum, ce) : ce;
  }
  Var extra;
  switch (strategy.kind) {
    case StrategyKind::kd:
      extra = ag::scale(ag::sum_all(kd_loss(outs, strategy.temperature)), strategy.distill.lambda_logits);
      break;
    case StrategyKind::cross_modal:
      extra = ag::sum_all(
          cross_modal_loss(outs, strategy.temperature, strategy.distill.lambda_logits, strategy.distill.lambda_rep));
      break;
    case StrategyKind::multitask:
      extra = ag::scale(ag::sum_all(decoders->loss(outs, raw_clips)), strategy.multitask_weight);
      break;
    default:
      break;
  }
  return ag::scale(ag::add(sum, extra), inv_b);
}

inline std::string dump_batch(std::size_t epoch, std::size_t batch, std::span<const ModalityOutputs> outs,
                              const std::vector<std::string>& names, const std::vector<std::size_t>& rows) {
  std::ostringstream os;
  os << "non-finite loss at epoch " << epoch << ", batch " << batch << "; rows [";
  for (std::size_t i = 0; i < rows.size(); ++i) os << (i ? "," : "") << rows[i];
  os << "]";
  for (std::size_t m = 0; m < outs.size(); ++m)
    os << "; " << names[m] << " logits finite=" << outs[m].logits.value().all_finite()
       << " representation finite=" << outs[m].representation.value().all_finite();
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

struct ClassificationModel {
  std::vector<std::string> modalities;
  std::vector<std::size_t> corpus_index;
  std::size_t clip_length = 0;
  std::vector<std::unique_ptr<VisualEncoder>> encoders;
  std::vector<ClassifyHead> heads;

  ModalityOutputs forward(std::size_t m, const Var& clips) const {
    Var rep = encoders[m]->encode(clips);
    return {rep, heads[m].forward(rep)};
  }

  std::size_t slot(const std::string& name) const {
    for (std::size_t i = 0; i < modalities.size(); ++i)
      if (modalities[i] == name) return i;
    throw ConfigError("modality '" + name + "' is not part of this model");
  }

  /// Multi-clip class distribution of `ex` seen through model slot m.
  std::vector<double> classify(const MultimodalExample& ex, std::size_t m, std::size_t n_clips) const {
    return classify_video(ex.clips.at(corpus_index[m]), *encoders[m], heads[m], clip_length, n_clips);
  }

  nn::ParameterList parameters() const {
    nn::ParameterList out;
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      for (const auto& p : encoders[m]->parameters()) out.push_back({modalities[m] + ".encoder." + p.name, p.var});
      heads[m].collect(out, modalities[m] + ".head");
    }
    return out;
  }

  /// One checkpoint per modality: encoder blobs plus the classification head.
  std::vector<Checkpoint> checkpoints(const nlohmann::json& metadata) const {
    std::vector<Checkpoint> out;
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      Checkpoint ck = encoder_checkpoint(modalities[m], *encoders[m], metadata);
      ck.architecture["head"] = {{"classes", heads[m].classes()}, {"feature_dim", encoders[m]->feature_dim()}};
      nn::ParameterList head;
      heads[m].collect(head, "head");
      append_parameters(ck, head, "");
      out.push_back(std::move(ck));
    }
    return out;
  }
};

/// Per-modality classification accuracy on `examples` with multi-clip averaging; the last entry of
/// `predictions` (when requested) is the fused prediction.
inline std::vector<double> classification_accuracy(const ClassificationModel& model,
                                                   const std::vector<MultimodalExample>& examples,
                                                   std::size_t n_clips,
                                                   std::vector<std::vector<int>>* predictions = nullptr) {
  const std::size_t S = model.modalities.size();
  std::vector<std::vector<int>> pred(S + 1);
  std::vector<int> truth;
  for (const auto& ex : examples) {
    truth.push_back(ex.label);
    std::vector<std::vector<double>> dists;
    for (std::size_t m = 0; m < S; ++m) {
      dists.push_back(model.classify(ex, m, n_clips));
      pred[m].push_back(argmax(dists.back()));
    }
    pred[S].push_back(argmax(fuse_distributions(dists)));
  }
  std::vector<double> acc;
  for (const auto& p : pred) acc.push_back(accuracy(truth, p));
  if (predictions) *predictions = std::move(pred);
  return acc;
}

struct ClassificationRun {
  ClassificationModel model;
  DistillationGraph graph;
  std::vector<nlohmann::json> metrics;
  std::vector<double> prior;  // c, once computed
  std::vector<double> epoch_loss;
  EvalReport test;  // accuracy per modality plus "fusion"; confusion of the first modality
  /// Mean effective weights per class on the test split, [L][S*S] row-major (j,k).
  std::vector<std::vector<double>> class_graph;
};

inline EvalReport classification_report(const ClassificationModel& model,
                                        const std::vector<MultimodalExample>& examples, std::size_t n_clips,
                                        std::size_t classes) {
  EvalReport r;
  std::vector<std::vector<int>> pred;
  const auto acc = classification_accuracy(model, examples, n_clips, &pred);
  for (std::size_t m = 0; m < model.modalities.size(); ++m) r.accuracy[model.modalities[m]] = acc[m];
  if (model.modalities.size() > 1) r.accuracy["fusion"] = acc.back();
  std::vector<int> truth;
  for (const auto& ex : examples) truth.push_back(ex.label);
  if (!examples.empty()) r.confusion = confusion_matrix(truth, pred[0], classes);
  return r;
}

/// Split indices [0, n) into (train, validation) with a seeded shuffle.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> validation_split(std::size_t n, double fraction,
                                                                                      std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (fraction <= 0.0 || n < 2) return {idx, {}};
  Rng rng = make_rng(seed, "validation-split");
  shuffle(idx, rng);
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n - 1);
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {train, val};
}

/// Train one encoder + head per listed modality under `strategy`. Every random stream is derived
/// from (schedule.seed, purpose), and each modality's initialization from its name only, so an
/// empty-graph run matches independent single-modality runs exactly.
inline ClassificationRun train_classification(const ClassificationCorpus& corpus,
                                              const std::vector<std::string>& modalities,
                                              const StrategyConfig& strategy, const TrainSchedule& schedule,
                                              const SamplerConfig& sampler, const EncoderConfig& enc_cfg,
                                              const MetricsSink& sink = {}) {
  schedule.validate();
  sampler.validate();
  const auto& spec = corpus.spec;
  const auto idx = detail::resolve_modalities(spec, modalities);
  const std::size_t S = idx.size(), L = spec.num_classes;
  detail::check_strategy(strategy, S);
  if (corpus.train.empty()) throw DataError("classification corpus has no training examples");
  const std::uint64_t seed = schedule.seed;

  ClassificationRun run;
  auto& model = run.model;
  model.modalities = modalities;
  model.corpus_index = idx;
  model.clip_length = sampler.clip_length;
  for (std::size_t m = 0; m < S; ++m) {
    Rng er = make_rng(seed, "encoder/" + modalities[m]);
    model.encoders.push_back(make_encoder(spec.modalities[idx[m]], sampler.clip_length, enc_cfg, er));
    Rng hr = make_rng(seed, "head/" + modalities[m]);
    model.heads.emplace_back(enc_cfg.feature_dim, L, hr);
  }
  {
    Rng gr = make_rng(seed, "graph");
    run.graph = DistillationGraph(S, enc_cfg.feature_dim, L, strategy.distill, gr);
  }
  MultitaskDecoders decoders;
  if (strategy.kind == StrategyKind::multitask) {
    std::vector<std::size_t> sizes;
    for (auto i : idx) sizes.push_back(sampler.clip_length * spec.modalities[i].frame_size());
    Rng dr = make_rng(seed, "decoders");
    decoders = MultitaskDecoders(enc_cfg.feature_dim, sizes, dr);
  }

  auto [train_rows, val_rows] = validation_split(corpus.train.size(), schedule.validation_fraction, seed);
  std::vector<MultimodalExample> val;
  for (auto i : val_rows) val.push_back(corpus.train[i]);
  std::vector<int> train_labels;
  for (auto i : train_rows) train_labels.push_back(corpus.train[i].label);
  const auto weights = class_weights(train_labels, L);

  nn::ParameterList visual = model.parameters();
  if (strategy.kind == StrategyKind::multitask)
    for (const auto& p : decoders.parameters()) visual.push_back(p);
  optim::Sgd sgd(visual, schedule.momentum, schedule.weight_decay);
  optim::Adam adam(run.graph.params().parameters());
  const auto milestones = schedule.resolved_milestones();

  Rng order_rng = make_rng(seed, "batch-order");
  Rng clip_rng = make_rng(seed, "clips");

  auto emit = [&](nlohmann::json rec) {
    if (sink) sink(rec);
    run.metrics.push_back(std::move(rec));
  };

  auto compute_prior = [&] {
    const auto& rows = val.empty() ? corpus.train : val;
    auto acc = classification_accuracy(model, rows, sampler.test_clips);
    acc.pop_back();
    run.prior = detail::normalize_accuracy(acc);
    run.graph.set_prior(run.prior);
    emit({{"event", "prior"}, {"epoch", schedule.stage1_epochs}, {"validation_accuracy", acc}, {"c", run.prior}});
  };

  for (std::size_t epoch = 0; epoch < schedule.total_epochs; ++epoch) {
    if (detail::needs_prior(strategy.kind) && epoch == schedule.stage1_epochs) compute_prior();
    run.graph.set_mode(detail::graph_mode_for(strategy.kind, epoch, schedule.stage1_epochs));
    const double lr = optim::step_decay(schedule.visual_lr, epoch, milestones);
    const double glr = optim::step_decay(schedule.graph_lr, epoch, milestones);

    std::vector<std::size_t> order = train_rows;
    shuffle(order, order_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    std::vector<std::size_t> correct(S, 0);
    Tensor graph_sum({S, S});
    for (std::size_t b0 = 0; b0 < order.size(); b0 += schedule.batch_size) {
      const std::size_t B = std::min(schedule.batch_size, order.size() - b0);
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                    order.begin() + static_cast<std::ptrdiff_t>(b0 + B));
      std::vector<std::vector<Tensor>> per_mod(S);
      std::vector<int> labels;
      for (auto r : rows) {
        const auto& ex = corpus.train[r];
        const std::size_t start = sample_clip_start(ex.length(), sampler.clip_length, clip_rng);
        for (std::size_t m = 0; m < S; ++m) per_mod[m].push_back(slice_leading(ex.clips[idx[m]], start, sampler.clip_length));
        labels.push_back(ex.label);
      }
      std::vector<Tensor> raw;
      std::vector<ModalityOutputs> outs;
      for (std::size_t m = 0; m < S; ++m) {
        raw.push_back(stack(per_mod[m]));
        outs.push_back(model.forward(m, Var(raw.back())));
      }
      Var loss = detail::strategy_loss(strategy, outs, labels, run.graph, weights, &decoders, raw);
      if (!std::isfinite(loss.value().item()))
        throw TrainingError(detail::dump_batch(epoch, batches, outs, modalities, rows), batches);
      sgd.zero_grad();
      adam.zero_grad();
      ag::backward(loss);
      detail::clip_gradients({&sgd.params(), &adam.params()}, schedule.clip_grad_norm);
      sgd.step(lr);
      if (run.graph.mode() == GraphMode::learned) adam.step(glr);

      loss_sum += loss.value().item();
      ++batches;
      for (std::size_t m = 0; m < S; ++m)
        for (std::size_t i = 0; i < B; ++i)
          correct[m] += argmax({outs[m].logits.value().data() + i * L, L}) == labels[i];
      if (S >= 2 && run.graph.mode() != GraphMode::empty) {
        ag::NoGradGuard guard;
        const Tensor G = run.graph.effective_weights(outs).value();
        for (std::size_t i = 0; i < B; ++i)
          for (std::size_t e = 0; e < S * S; ++e) graph_sum[e] += G[i * S * S + e] / static_cast<double>(order.size());
      }
    }
    const double mean_loss = loss_sum / static_cast<double>(batches);
    run.epoch_loss.push_back(mean_loss);

    std::vector<double> train_acc;
    for (auto c : correct) train_acc.push_back(static_cast<double>(c) / static_cast<double>(order.size()));
    nlohmann::json rec = {{"epoch", epoch},
                          {"split", "train"},
                          {"loss", mean_loss},
                          {"accuracy", train_acc},
                          {"graph_mode", run.graph.mode()},
                          {"graph", graph_sum.storage()},
                          {"graph_hash", detail::hex(detail::hash_tensor(graph_sum))},
                          {"lr", lr}};
    emit(rec);
    if (!val.empty()) {
      auto acc = classification_accuracy(model, val, sampler.test_clips);
      emit({{"epoch", epoch}, {"split", "val"}, {"accuracy", std::vector<double>(acc.begin(), acc.begin() + static_cast<std::ptrdiff_t>(S))}});
    }
  }

  run.test = classification_report(model, corpus.test, sampler.test_clips, L);
  nlohmann::json acc_rec = {{"split", "test"}, {"accuracy", run.test.accuracy}};
  emit(acc_rec);

  if (S >= 2 && run.graph.mode() != GraphMode::empty && !corpus.test.empty()) {
    run.class_graph.assign(L, std::vector<double>(S * S, 0.0));
    std::vector<std::size_t> count(L, 0);
    ag::NoGradGuard guard;
    for (const auto& ex : corpus.test) {
      const std::size_t start = (ex.length() - sampler.clip_length) / 2;
      std::vector<ModalityOutputs> outs;
      for (std::size_t m = 0; m < S; ++m) {
        Tensor clip = slice_leading(ex.clips[idx[m]], start, sampler.clip_length);
        Shape s = clip.shape();
        s.insert(s.begin(), 1);
        outs.push_back(model.forward(m, Var(clip.reshaped(s))));
      }
      const Tensor G = run.graph.effective_weights(outs).value();
      auto& acc = run.class_graph[static_cast<std::size_t>(ex.label)];
      for (std::size_t e = 0; e < S * S; ++e) acc[e] += G[e];
      ++count[static_cast<std::size_t>(ex.label)];
    }
    for (std::size_t c = 0; c < L; ++c)
      for (auto& v : run.class_graph[c]) v /= static_cast<double>(std::max<std::size_t>(count[c], 1));
  }
  return run;
}

/// Rebuild encoder + head of a classification checkpoint.
inline std::pair<std::unique_ptr<VisualEncoder>, ClassifyHead> restore_classifier(const Checkpoint& ck) {
  auto enc = restore_encoder(ck);
  if (!ck.architecture.contains("head")) throw TransferError("checkpoint for '" + ck.modality + "' has no head");
  Rng rng(0);
  ClassifyHead head(ck.architecture["head"].at("feature_dim").get<std::size_t>(),
                    ck.architecture["head"].at("classes").get<std::size_t>(), rng);
  nn::ParameterList params;
  head.collect(params, "head");
  load_parameters(ck, params, "");
  return {std::move(enc), std::move(head)};
}

inline ClassificationModel restore_classification_model(const std::vector<Checkpoint>& cks, const CorpusSpec& spec,
                                                        std::size_t clip_length) {
  ClassificationModel model;
  model.clip_length = clip_length;
  for (const auto& ck : cks) {
    auto [enc, head] = restore_classifier(ck);
    model.modalities.push_back(ck.modality);
    model.corpus_index.push_back(spec.modality_index(ck.modality));
    model.encoders.push_back(std::move(enc));
    model.heads.push_back(std::move(head));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Transfer
// ---------------------------------------------------------------------------

/// Copy the source visual encoders of `targets`. With `expected`, each stored architecture must
/// equal the target's descriptor.
inline std::vector<std::unique_ptr<VisualEncoder>> transfer_encoders(
    const std::map<std::string, Checkpoint>& source, const std::vector<std::string>& targets,
    const std::vector<nlohmann::json>* expected = nullptr) {
  std::vector<std::unique_ptr<VisualEncoder>> out;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto it = source.find(targets[i]);
    if (it == source.end()) throw TransferError("no source checkpoint for target modality '" + targets[i] + "'");
    out.push_back(restore_encoder(it->second, expected ? &expected->at(i) : nullptr));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detection
// ---------------------------------------------------------------------------

/// Clip g of a video covers frames [g*s_c, g*s_c + T_c).
inline std::size_t clip_count(std::size_t length, const SamplerConfig& s) {
  return length < s.clip_length ? 0 : (length - s.clip_length) / s.s_c() + 1;
}

inline std::vector<std::pair<std::size_t, std::size_t>> clip_frames(std::size_t length, const SamplerConfig& s) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t g = 0; g < clip_count(length, s); ++g) out.emplace_back(g * s.s_c(), g * s.s_c() + s.clip_length);
  return out;
}

/// First-clip indices of the test-time window tiling; the last window is pulled back to end on
/// the final clip.
inline std::vector<std::size_t> window_tiling(std::size_t length, const SamplerConfig& s) {
  const std::size_t n = clip_count(length, s), tw = s.window_clips, step = s.s_w() / s.s_c();
  if (n < tw) throw DataError("video too short for one window");
  std::vector<std::size_t> firsts;
  for (std::size_t g = 0; g + tw <= n; g += step) firsts.push_back(g);
  if (firsts.back() + tw < n) firsts.push_back(n - tw);
  return firsts;
}

struct DetectionModel {
  std::vector<std::string> modalities;
  std::vector<std::size_t> corpus_index;
  SamplerConfig sampler;
  std::size_t classes = 0;  // L (background excluded)
  std::vector<std::unique_ptr<VisualEncoder>> encoders;
  std::vector<SequenceEncoder> sequences;

  std::size_t slot(const std::string& name) const {
    for (std::size_t i = 0; i < modalities.size(); ++i)
      if (modalities[i] == name) return i;
    throw ConfigError("modality '" + name + "' is not part of this model");
  }

  /// clips [W*T_w, T_c, frame...] -> per-clip outputs.
  ModalityOutputs forward(std::size_t m, const Var& clips, std::size_t windows) const {
    return sequences[m].forward(encoders[m]->encode(clips), windows, sampler.window_clips);
  }

  /// Per-clip probabilities [clips, L+1] over a whole video, overlapping windows averaged.
  Tensor clip_probabilities(const DetectionVideo& video, std::size_t m) const {
    const auto firsts = window_tiling(video.length(), sampler);
    std::vector<Tensor> clips;
    for (auto g : firsts)
      for (std::size_t t = 0; t < sampler.window_clips; ++t)
        clips.push_back(slice_leading(video.frames.at(corpus_index[m]), (g + t) * sampler.s_c(), sampler.clip_length));
    ag::NoGradGuard guard;
    const Tensor logits = forward(m, Var(stack(clips)), firsts.size()).logits.value();
    const std::size_t K = classes + 1;
    std::vector<WindowProbabilities> windows;
    for (std::size_t w = 0; w < firsts.size(); ++w) {
      Tensor p({sampler.window_clips, K});
      for (std::size_t t = 0; t < sampler.window_clips; ++t) {
        const auto row = softmax_row({logits.data() + (w * sampler.window_clips + t) * K, K});
        std::copy(row.begin(), row.end(), p.data() + t * K);
      }
      windows.push_back({firsts[w], std::move(p)});
    }
    return merge_windows(windows, clip_count(video.length(), sampler));
  }

  std::vector<DetectionSegment> detect(const DetectionVideo& video, std::size_t m) const {
    const auto probs = clip_probabilities(video, m);
    const auto spans = clip_frames(video.length(), sampler);
    return extract_segments(probs, sampler.gamma, spans, sampler.gate);
  }

  std::vector<Checkpoint> checkpoints(const nlohmann::json& metadata) const {
    std::vector<Checkpoint> out;
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      Checkpoint ck = encoder_checkpoint(modalities[m], *encoders[m], metadata);
      ck.architecture["sequence"] = {{"classes", sequences[m].classes()}, {"feature_dim", sequences[m].feature_dim()}};
      nn::ParameterList seq;
      sequences[m].collect(seq, "sequence");
      append_parameters(ck, seq, "");
      out.push_back(std::move(ck));
    }
    return out;
  }
};

inline DetectionModel restore_detection_model(const std::vector<Checkpoint>& cks, const CorpusSpec& spec,
                                             const SamplerConfig& sampler) {
  DetectionModel model;
  model.sampler = sampler;
  model.classes = spec.num_classes;
  for (const auto& ck : cks) {
    if (!ck.architecture.contains("sequence"))
      throw TransferError("checkpoint for '" + ck.modality + "' has no sequence encoder");
    const auto& a = ck.architecture["sequence"];
    if (a.at("classes").get<std::size_t>() != spec.num_classes + 1)
      throw TransferError("checkpoint for '" + ck.modality + "' was trained for a different class count");
    model.modalities.push_back(ck.modality);
    model.corpus_index.push_back(spec.modality_index(ck.modality));
    model.encoders.push_back(restore_encoder(ck));
    Rng rng(0);
    SequenceEncoder seq(a.at("feature_dim").get<std::size_t>(), a.at("classes").get<std::size_t>(), rng);
    nn::ParameterList params;
    seq.collect(params, "sequence");
    load_parameters(ck, params, "");
    model.sequences.push_back(std::move(seq));
  }
  return model;
}

inline const std::vector<double> kDefaultThresholds = {0.1, 0.3, 0.5};

inline std::vector<VideoSegment> ground_truth_segments(const std::vector<DetectionVideo>& videos) {
  std::vector<VideoSegment> out;
  for (std::size_t v = 0; v < videos.size(); ++v)
    for (const auto& s : videos[v].segments) out.push_back({v, {s.start, s.end, s.label, 1.0}});
  return out;
}

/// mAP report of model slot m on `videos`.
inline EvalReport evaluate_detection(const DetectionModel& model, const std::vector<DetectionVideo>& videos,
                                     std::size_t m, const std::vector<double>& thresholds = kDefaultThresholds,
                                     std::vector<VideoSegment>* predictions = nullptr) {
  std::vector<VideoSegment> preds;
  for (std::size_t v = 0; v < videos.size(); ++v)
    for (const auto& s : model.detect(videos[v], m)) preds.push_back({v, s});
  auto report = map_at_tiou(preds, ground_truth_segments(videos), thresholds, model.classes);
  if (predictions) *predictions = std::move(preds);
  return report;
}

/// Keep a seeded fraction (at least one) of the training videos.
inline DetectionCorpus subsample_training(const DetectionCorpus& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subsample fraction must lie in (0, 1]");
  DetectionCorpus out{corpus.spec, corpus.seed, {}, corpus.test};
  std::vector<std::size_t> idx(corpus.train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng = make_rng(seed, "subsample");
  shuffle(idx, rng);
  const auto keep = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size()))), 1, idx.size());
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  for (auto i : idx) out.train.push_back(corpus.train[i]);
  return out;
}

struct DetectionRun {
  DetectionModel model;
  DistillationGraph graph;
  std::vector<nlohmann::json> metrics;
  std::vector<double> prior;
  std::vector<double> epoch_loss;
};

/// Per-clip accuracy of each modality over the tiled training footage; drives the prior c.
inline std::vector<double> detection_clip_accuracy(const DetectionModel& model, const std::vector<DetectionVideo>& videos) {
  std::vector<double> acc(model.modalities.size(), 0.0);
  std::size_t total = 0;
  const int bg = static_cast<int>(model.classes);
  for (const auto& v : videos) {
    const auto labels = v.frame_labels(model.classes);
    const auto spans = clip_frames(v.length(), model.sampler);
    total += spans.size();
    for (std::size_t m = 0; m < model.modalities.size(); ++m) {
      const auto probs = model.clip_probabilities(v, m);
      for (std::size_t g = 0; g < spans.size(); ++g)
        acc[m] += argmax({probs.data() + g * (model.classes + 1), model.classes + 1}) ==
                  clip_label(labels, spans[g].first, model.sampler.clip_length, bg);
    }
  }
  for (auto& a : acc) a /= static_cast<double>(std::max<std::size_t>(total, 1));
  return acc;
}

/// Train visual + sequence encoders per modality on windows of untrimmed videos. With `init`,
/// visual encoders start from the named source checkpoints (architectures must match).
inline DetectionRun train_detection(const DetectionCorpus& corpus, const std::vector<std::string>& modalities,
                                    const StrategyConfig& strategy, const TrainSchedule& schedule,
                                    const SamplerConfig& sampler, const EncoderConfig& enc_cfg,
                                    const std::map<std::string, Checkpoint>* init = nullptr,
                                    const MetricsSink& sink = {}) {
  schedule.validate();
  sampler.validate();
  const auto& spec = corpus.spec;
  const auto idx = detail::resolve_modalities(spec, modalities);
  const std::size_t S = idx.size(), L = spec.num_classes, K = L + 1;
  detail::check_strategy(strategy, S);
  if (corpus.train.empty()) throw DataError("detection corpus has no training videos");
  for (const auto& v : corpus.train)
    if (v.length() < sampler.window_span()) throw DataError("training video shorter than one window");
  const std::uint64_t seed = schedule.seed;

  DetectionRun run;
  auto& model = run.model;
  model.modalities = modalities;
  model.corpus_index = idx;
  model.sampler = sampler;
  model.classes = L;
  std::vector<nlohmann::json> expected;
  for (std::size_t m = 0; m < S; ++m) {
    Rng er = make_rng(seed, "encoder/" + modalities[m]);
    model.encoders.push_back(make_encoder(spec.modalities[idx[m]], sampler.clip_length, enc_cfg, er));
    expected.push_back(model.encoders.back()->descriptor());
    Rng sr = make_rng(seed, "sequence/" + modalities[m]);
    model.sequences.emplace_back(enc_cfg.feature_dim, K, sr);
  }
  if (init) model.encoders = transfer_encoders(*init, modalities, &expected);
  {
    Rng gr = make_rng(seed, "graph");
    run.graph = DistillationGraph(S, enc_cfg.feature_dim, K, strategy.distill, gr);
  }
  MultitaskDecoders decoders;
  if (strategy.kind == StrategyKind::multitask) {
    std::vector<std::size_t> sizes;
    for (auto i : idx) sizes.push_back(sampler.clip_length * spec.modalities[i].frame_size());
    Rng dr = make_rng(seed, "decoders");
    decoders = MultitaskDecoders(enc_cfg.feature_dim, sizes, dr);
  }

  std::vector<int> clip_labels;
  std::vector<std::vector<int>> frame_labels;
  for (const auto& v : corpus.train) {
    frame_labels.push_back(v.frame_labels(L));
    for (const auto& [a, b] : clip_frames(v.length(), sampler))
      clip_labels.push_back(clip_label(frame_labels.back(), a, sampler.clip_length, static_cast<int>(L)));
  }
  const auto weights = class_weights(clip_labels, K);

  nn::ParameterList visual, sequential;
  for (std::size_t m = 0; m < S; ++m) {
    for (const auto& p : model.encoders[m]->parameters()) visual.push_back({modalities[m] + ".encoder." + p.name, p.var});
    model.sequences[m].collect(sequential, modalities[m] + ".sequence");
  }
  if (strategy.kind == StrategyKind::multitask)
    for (const auto& p : decoders.parameters()) visual.push_back(p);
  optim::Sgd sgd(visual, schedule.momentum, schedule.weight_decay);
  optim::Adam seq_opt(sequential);
  optim::Adam graph_opt(run.graph.params().parameters());
  const auto milestones = schedule.resolved_milestones();

  std::size_t steps = schedule.steps_per_epoch;
  if (steps == 0) {
    std::size_t windows = 0;
    for (const auto& v : corpus.train) windows += (v.length() + sampler.window_span() - 1) / sampler.window_span();
    steps = std::max<std::size_t>(1, (windows + schedule.batch_size - 1) / schedule.batch_size);
  }

  Rng window_rng = make_rng(seed, "windows");
  auto emit = [&](nlohmann::json rec) {
    if (sink) sink(rec);
    run.metrics.push_back(std::move(rec));
  };

  for (std::size_t epoch = 0; epoch < schedule.total_epochs; ++epoch) {
    if (detail::needs_prior(strategy.kind) && epoch == schedule.stage1_epochs) {
      const auto acc = detection_clip_accuracy(model, corpus.train);
      run.prior = detail::normalize_accuracy(acc);
      run.graph.set_prior(run.prior);
      emit({{"event", "prior"}, {"epoch", epoch}, {"clip_accuracy", acc}, {"c", run.prior}});
    }
    run.graph.set_mode(detail::graph_mode_for(strategy.kind, epoch, schedule.stage1_epochs));
    const double lr = optim::step_decay(schedule.visual_lr, epoch, milestones);
    const double slr = optim::step_decay(schedule.sequence_lr, epoch, milestones);
    const double glr = optim::step_decay(schedule.graph_lr, epoch, milestones);

    double loss_sum = 0.0;
    std::vector<std::size_t> correct(S, 0);
    std::size_t rows_seen = 0;
    Tensor graph_sum({S, S});
    for (std::size_t step = 0; step < steps; ++step) {
      const std::size_t B = schedule.batch_size;
      std::vector<std::vector<Tensor>> per_mod(S);
      std::vector<int> labels;
      std::vector<std::size_t> video_ids;
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t v = uniform_index(window_rng, corpus.train.size());
        video_ids.push_back(v);
        const auto& video = corpus.train[v];
        const std::size_t start = uniform_index(window_rng, video.length() - sampler.window_span() + 1);
        Window w = window_at(video, frame_labels[v], start, sampler, static_cast<int>(L), idx);
        for (std::size_t m = 0; m < S; ++m) per_mod[m].push_back(std::move(w.clips[m]));
        labels.insert(labels.end(), w.labels.begin(), w.labels.end());
      }
      std::vector<Tensor> raw;
      std::vector<ModalityOutputs> outs;
      for (std::size_t m = 0; m < S; ++m) {
        Tensor batch = stack(per_mod[m]);  // [B, T_w, T_c, frame...]
        Shape s = batch.shape();
        s.erase(s.begin());
        s[0] = B * sampler.window_clips;
        raw.push_back(batch.reshaped(s));
        outs.push_back(model.forward(m, Var(raw.back()), B));
      }
      Var loss = detail::strategy_loss(strategy, outs, labels, run.graph, weights, &decoders, raw);
      if (!std::isfinite(loss.value().item()))
        throw TrainingError(detail::dump_batch(epoch, step, outs, modalities, video_ids), step);
      sgd.zero_grad();
      seq_opt.zero_grad();
      graph_opt.zero_grad();
      ag::backward(loss);
      detail::clip_gradients({&sgd.params(), &seq_opt.params(), &graph_opt.params()}, schedule.clip_grad_norm);
      sgd.step(lr);
      seq_opt.step(slr);
      if (run.graph.mode() == GraphMode::learned) graph_opt.step(glr);

      loss_sum += loss.value().item();
      const std::size_t R = labels.size();
      rows_seen += R;
      for (std::size_t m = 0; m < S; ++m)
        for (std::size_t i = 0; i < R; ++i) correct[m] += argmax({outs[m].logits.value().data() + i * K, K}) == labels[i];
      if (S >= 2 && run.graph.mode() != GraphMode::empty) {
        ag::NoGradGuard guard;
        const Tensor G = run.graph.effective_weights(outs).value();
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t e = 0; e < S * S; ++e) graph_sum[e] += G[i * S * S + e];
      }
    }
    for (auto& g : graph_sum.storage()) g /= static_cast<double>(rows_seen);
    const double mean_loss = loss_sum / static_cast<double>(steps);
    run.epoch_loss.push_back(mean_loss);
    std::vector<double> acc;
    for (auto c : correct) acc.push_back(static_cast<double>(c) / static_cast<double>(rows_seen));
    emit({{"epoch", epoch},
          {"split", "train"},
          {"loss", mean_loss},
          {"clip_accuracy", acc},
          {"graph_mode", run.graph.mode()},
          {"graph", graph_sum.storage()},
          {"graph_hash", detail::hex(detail::hash_tensor(graph_sum))},
          {"lr", lr}});
  }
  return run;
}

}  // namespace gdist
