#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gdist/datagen.hpp"
#include "gdist/distill.hpp"
#include "gdist/encoders.hpp"

namespace gdist {

// ---------------------------------------------------------------------------
// Classification protocol
// ---------------------------------------------------------------------------

/// Starts of n clips of length T_c spread evenly over [0, length - T_c]; n = 1 takes the centre.
inline std::vector<std::size_t> clip_starts(std::size_t length, std::size_t clip_length, std::size_t n_clips) {
  if (n_clips == 0) throw PreconditionError("need at least one test clip");
  if (length < clip_length)
    throw DataError("video of " + std::to_string(length) + " frames is shorter than a clip of " +
                    std::to_string(clip_length));
  const std::size_t span = length - clip_length;
  std::vector<std::size_t> starts;
  if (n_clips == 1) return {span / 2};
  for (std::size_t i = 0; i < n_clips; ++i)
    starts.push_back(static_cast<std::size_t>(
        std::llround(static_cast<double>(i) * static_cast<double>(span) / static_cast<double>(n_clips - 1))));
  return starts;
}

inline std::vector<double> softmax_row(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - mx);
  for (auto& v : p) v /= z;
  return p;
}

/// Class distribution for one modality of a video: mean softmax over n evenly spaced clips.
inline std::vector<double> classify_video(const Tensor& video, const VisualEncoder& encoder, const ClassifyHead& head,
                                          std::size_t clip_length, std::size_t n_clips) {
  std::vector<Tensor> clips;
  for (auto s : clip_starts(video.dim(0), clip_length, n_clips)) clips.push_back(slice_leading(video, s, clip_length));
  ag::NoGradGuard guard;
  const Tensor logits = head.forward(encoder.encode(Var(stack(clips)))).value();
  const std::size_t L = logits.dim(1);
  std::vector<double> mean(L, 0.0);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto p = softmax_row({logits.data() + i * L, L});
    for (std::size_t c = 0; c < L; ++c) mean[c] += p[c] / static_cast<double>(clips.size());
  }
  return mean;
}

/// Arithmetic mean of per-modality distributions.
inline std::vector<double> fuse_distributions(const std::vector<std::vector<double>>& dists) {
  if (dists.empty()) throw PreconditionError("nothing to fuse");
  std::vector<double> out(dists[0].size(), 0.0);
  for (const auto& d : dists)
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += d[c] / static_cast<double>(dists.size());
  return out;
}

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const int> truth, std::span<const int> pred,
                                                              std::size_t classes) {
  std::vector<std::vector<std::size_t>> m(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) ++m.at(truth[i]).at(pred[i]);
  return m;
}

inline double accuracy(std::span<const int> truth, std::span<const int> pred) {
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------
// Detection post-processing
// ---------------------------------------------------------------------------

struct DetectionSegment {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  int label = 0;
  double score = 0.0;
  friend bool operator==(const DetectionSegment&, const DetectionSegment&) = default;
};

/// A scored prediction or a ground-truth interval tagged with its video.
struct VideoSegment {
  std::size_t video = 0;
  DetectionSegment segment;
};

enum class ActivityGate { non_background_mass, max_class };

/// Per-window clip probabilities placed at a global clip offset.
struct WindowProbabilities {
  std::size_t first_clip = 0;
  Tensor probs;  // [T_w, L+1]
};

/// Average overlapping windows per clip position. Positions no window covers stay all-background.
inline Tensor merge_windows(std::span<const WindowProbabilities> windows, std::size_t total_clips) {
  if (windows.empty()) throw PreconditionError("no windows to merge");
  const std::size_t K = windows[0].probs.dim(1);
  Tensor sum({total_clips, K});
  std::vector<std::size_t> count(total_clips, 0);
  for (const auto& w : windows) {
    if (w.probs.rank() != 2 || w.probs.dim(1) != K) throw ShapeError("merge_windows: inconsistent window shapes");
    for (std::size_t t = 0; t < w.probs.dim(0); ++t) {
      const std::size_t g = w.first_clip + t;
      if (g >= total_clips) throw ShapeError("merge_windows: window extends past the last clip");
      for (std::size_t c = 0; c < K; ++c) sum(g, c) += w.probs(t, c);
      ++count[g];
    }
  }
  for (std::size_t g = 0; g < total_clips; ++g) {
    if (count[g] == 0) {
      sum(g, K - 1) = 1.0;
      continue;
    }
    for (std::size_t c = 0; c < K; ++c) sum(g, c) /= static_cast<double>(count[g]);
  }
  return sum;
}

/// Runs of consecutive activity clips sharing the same foreground argmax become segments.
/// probs is [T, L+1] with background last; clip_frames[t] is clip t's [start, end) frame span.
inline std::vector<DetectionSegment> extract_segments(const Tensor& probs, double gamma,
                                                      std::span<const std::pair<std::size_t, std::size_t>> clip_frames,
                                                      ActivityGate gate = ActivityGate::non_background_mass) {
  if (probs.rank() != 2 || probs.dim(1) < 2) throw ShapeError("extract_segments expects [T, L+1] probabilities");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("activity threshold must lie in (0, 1)");
  const std::size_t T = probs.dim(0), K = probs.dim(1), L = K - 1;
  if (clip_frames.size() != T) throw ShapeError("extract_segments: one frame span per clip required");
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < K; ++c) {
      if (!(probs(t, c) >= 0.0)) throw DataError("probability row " + std::to_string(t) + " has a negative entry");
      s += probs(t, c);
    }
    if (std::abs(s - 1.0) > 1e-4) throw DataError("probability row " + std::to_string(t) + " sums to " + std::to_string(s));
  }

  auto active_class = [&](std::size_t t) -> int {
    int best = 0;
    double fg = 0.0;
    for (std::size_t c = 0; c < L; ++c) {
      fg += probs(t, c);
      if (probs(t, c) > probs(t, static_cast<std::size_t>(best))) best = static_cast<int>(c);
    }
    const double gated = gate == ActivityGate::non_background_mass ? fg : probs(t, static_cast<std::size_t>(best));
    return gated > gamma ? best : -1;
  };

  std::vector<DetectionSegment> out;
  std::size_t t = 0;
  while (t < T) {
    const int c = active_class(t);
    if (c < 0) {
      ++t;
      continue;
    }
    std::size_t u = t;
    double score = 0.0;
    while (u < T && active_class(u) == c) score += probs(u++, static_cast<std::size_t>(c));
    out.push_back({clip_frames[t].first, clip_frames[u - 1].second, c, score / static_cast<double>(u - t)});
    t = u;
  }
  return out;
}

/// Probabilities implied by segments: each covered clip puts the segment score on its class
/// and the remainder on background.
inline Tensor segments_to_probabilities(std::span<const DetectionSegment> segments, std::size_t classes,
                                        std::span<const std::pair<std::size_t, std::size_t>> clip_frames) {
  Tensor p({clip_frames.size(), classes + 1});
  for (std::size_t t = 0; t < clip_frames.size(); ++t) {
    p(t, classes) = 1.0;
    for (const auto& s : segments)
      if (clip_frames[t].first >= s.start && clip_frames[t].second <= s.end) {
        p(t, static_cast<std::size_t>(s.label)) = s.score;
        p(t, classes) = 1.0 - s.score;
      }
  }
  return p;
}

inline double tiou(const DetectionSegment& a, const DetectionSegment& b) {
  const double inter = static_cast<double>(std::min(a.end, b.end)) - static_cast<double>(std::max(a.start, b.start));
  if (inter <= 0.0) return 0.0;
  const double uni = static_cast<double>(std::max(a.end, b.end)) - static_cast<double>(std::min(a.start, b.start));
  return inter / uni;
}

/// All-point interpolated AP of one class. Equal scores are ordered by (video, start).
inline double average_precision(std::vector<VideoSegment> predictions, const std::vector<VideoSegment>& truth,
                                double threshold) {
  if (truth.empty()) return 0.0;
  std::stable_sort(predictions.begin(), predictions.end(), [](const VideoSegment& a, const VideoSegment& b) {
    if (a.segment.score != b.segment.score) return a.segment.score > b.segment.score;
    if (a.video != b.video) return a.video < b.video;
    return a.segment.start < b.segment.start;
  });
  std::vector<bool> used(truth.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    double best = -1.0;
    std::size_t best_j = truth.size();
    for (std::size_t j = 0; j < truth.size(); ++j) {
      if (used[j] || truth[j].video != p.video) continue;
      const double iou = tiou(p.segment, truth[j].segment);
      if (iou >= threshold && iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best_j < truth.size()) {
      used[best_j] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(truth.size()));
  }
  // Precision envelope, then sum over recall steps.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct EvalReport {
  std::vector<double> thresholds;
  /// ap[t][c]; nullopt for classes without ground truth.
  std::vector<std::vector<std::optional<double>>> ap;
  std::vector<double> map;
  std::map<std::string, double> accuracy;
  std::vector<std::vector<std::size_t>> confusion;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json::object();
  if (!r.thresholds.empty()) {
    nlohmann::json det = nlohmann::json::array();
    for (std::size_t t = 0; t < r.thresholds.size(); ++t) {
      nlohmann::json per_class = nlohmann::json::array();
      for (const auto& a : r.ap[t]) per_class.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
      det.push_back({{"threshold", r.thresholds[t]}, {"ap", per_class}, {"map", r.map[t]}});
    }
    j["detection"] = det;
  }
  if (!r.accuracy.empty()) j["accuracy"] = r.accuracy;
  if (!r.confusion.empty()) j["confusion"] = r.confusion;
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r = {};
  if (j.contains("detection"))
    for (const auto& d : j.at("detection")) {
      r.thresholds.push_back(d.at("threshold").get<double>());
      r.map.push_back(d.at("map").get<double>());
      std::vector<std::optional<double>> per_class;
      for (const auto& a : d.at("ap")) per_class.push_back(a.is_null() ? std::nullopt : std::optional(a.get<double>()));
      r.ap.push_back(std::move(per_class));
    }
  if (j.contains("accuracy")) r.accuracy = j.at("accuracy").get<std::map<std::string, double>>();
  if (j.contains("confusion")) r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
}

/// Per-class AP and mAP (mean over classes present in the ground truth) at each tIoU threshold.
inline EvalReport map_at_tiou(const std::vector<VideoSegment>& predictions, const std::vector<VideoSegment>& truth,
                              const std::vector<double>& thresholds, std::size_t classes) {
  EvalReport r;
  r.thresholds = thresholds;
  for (double th : thresholds) {
    if (!(th > 0.0 && th < 1.0)) throw ConfigError("tIoU thresholds must lie in (0, 1)");
    std::vector<std::optional<double>> per_class(classes);
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<VideoSegment> p, g;
      for (const auto& x : predictions)
        if (x.segment.label == static_cast<int>(c)) p.push_back(x);
      for (const auto& x : truth)
        if (x.segment.label == static_cast<int>(c)) g.push_back(x);
      if (g.empty()) continue;
      per_class[c] = average_precision(p, g, th);
      sum += *per_class[c];
      ++present;
    }
    r.ap.push_back(std::move(per_class));
    r.map.push_back(present ? sum / static_cast<double>(present) : 0.0);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

struct GradientCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "name[index]"
  std::size_t coordinates = 0;
};

/// Central differences against reverse-mode gradients over every coordinate of `params`.
/// Relative error per coordinate uses max(|a|, |n|, floor); floor = max(1e-8, 1e-6 * max(1, |f|))
/// absorbs the cancellation noise of (f+ - f-) on coordinates whose true gradient is zero.
inline GradientCheck finite_difference_check(const std::function<Var()>& fn, const nn::ParameterList& params,
                                             double eps = 1e-5) {
  nn::zero_grad(params);
  const Var out = fn();
  if (out.value().size() != 1) throw OracleError("finite_difference_check needs a scalar function");
  const double f0 = out.value().item();
  if (!std::isfinite(f0)) throw OracleError("function value is not finite");
  ag::backward(out);
  const double floor = std::max(1e-8, 1e-6 * std::max(1.0, std::abs(f0)));

  GradientCheck result;
  ag::NoGradGuard guard;
  for (const auto& p : params) {
    Var v = p.var;
    const Tensor analytic = v.grad().size() == v.value().size() ? v.grad() : Tensor(v.shape());
    Tensor& w = v.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double fp = fn().value().item();
      w[i] = orig - eps;
      const double fm = fn().value().item();
      w[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw OracleError("non-finite function value while perturbing " + p.name);
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++result.coordinates;
      if (rel > result.max_rel_error || result.worst.empty()) {
        result.max_rel_error = rel;
        result.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  nn::zero_grad(params);
  return result;
}

/// Direct nested loop: l[k] = sum_j G[j][k] * m_{k<-j}.
inline std::vector<double> imitation_loss_oracle(std::span<const ExampleOutputs> outputs, const Tensor& G,
                                                 double lambda_logits, double lambda_rep) {
  const std::size_t S = outputs.size();
  std::vector<double> loss(S, 0.0);
  for (std::size_t k = 0; k < S; ++k)
    for (std::size_t j = 0; j < S; ++j) {
      if (j == k) continue;
      loss[k] += G(j, k) * pairwise_message(outputs[k], outputs[j], lambda_logits, lambda_rep);
    }
  return loss;
}

struct CentroidResult {
  double accuracy = 0.0;
  std::vector<double> per_class;  // recall per class; NaN for classes absent from the test split
};

/// Nearest class centroid over the flattened clip of one modality.
inline CentroidResult nearest_centroid(const std::vector<MultimodalExample>& train,
                                       const std::vector<MultimodalExample>& test, std::size_t modality,
                                       std::size_t classes) {
  if (train.empty()) throw DataError("nearest_centroid: empty training split");
  const std::size_t n = train[0].clips.at(modality).size();
  std::vector<std::vector<double>> centroid(classes, std::vector<double>(n, 0.0));
  std::vector<std::size_t> count(classes, 0);
  for (const auto& ex : train) {
    const auto& x = ex.clips.at(modality);
    auto& c = centroid.at(static_cast<std::size_t>(ex.label));
    for (std::size_t i = 0; i < n; ++i) c[i] += x[i];
    ++count[static_cast<std::size_t>(ex.label)];
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (auto& v : centroid[c]) v /= static_cast<double>(std::max<std::size_t>(count[c], 1));

  CentroidResult r;
  std::vector<std::size_t> hits(classes, 0), total(classes, 0);
  std::size_t all_hits = 0;
  for (const auto& ex : test) {
    const auto& x = ex.clips.at(modality);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) {
      if (count[c] == 0) continue;
      double d = 0.0;
      for (std::size_t i = 0; i < n; ++i) d += (x[i] - centroid[c][i]) * (x[i] - centroid[c][i]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    const auto y = static_cast<std::size_t>(ex.label);
    ++total[y];
    if (best == y) {
      ++hits[y];
      ++all_hits;
    }
  }
  r.accuracy = test.empty() ? 0.0 : static_cast<double>(all_hits) / static_cast<double>(test.size());
  for (std::size_t c = 0; c < classes; ++c)
    r.per_class.push_back(total[c] ? static_cast<double>(hits[c]) / static_cast<double>(total[c])
                                   : std::numeric_limits<double>::quiet_NaN());
  return r;
}

}  // namespace gdist
