#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gdist/error.hpp"
#include "gdist/random.hpp"
#include "gdist/tensor.hpp"

namespace gdist {

enum class ModalityKind { image, vector };

NLOHMANN_JSON_SERIALIZE_ENUM(ModalityKind, {{ModalityKind::image, "image"}, {ModalityKind::vector, "vector"}})

struct ModalitySpec {
  std::string name;
  ModalityKind kind = ModalityKind::vector;
  std::size_t height = 0, width = 0, channels = 0;  // image
  std::size_t dim = 0;                              // vector
  std::vector<int> informative_classes;
  double noise_sigma = 0.5;

  Shape frame_shape() const {
    return kind == ModalityKind::image ? Shape{height, width, channels} : Shape{dim};
  }
  std::size_t frame_size() const { return shape_numel(frame_shape()); }
  bool informative_for(int c) const {
    return std::find(informative_classes.begin(), informative_classes.end(), c) != informative_classes.end();
  }
};

inline void to_json(nlohmann::json& j, const ModalitySpec& m) {
  j = {{"name", m.name}, {"kind", m.kind}, {"informative_classes", m.informative_classes},
       {"noise_sigma", m.noise_sigma}};
  if (m.kind == ModalityKind::image) {
    j["height"] = m.height;
    j["width"] = m.width;
    j["channels"] = m.channels;
  } else {
    j["dim"] = m.dim;
  }
}

inline void from_json(const nlohmann::json& j, ModalitySpec& m) {
  m.name = j.at("name").get<std::string>();
  m.kind = j.at("kind").get<ModalityKind>();
  if (nlohmann::json(m.kind) != j.at("kind")) throw ConfigError("unknown modality kind " + j.at("kind").dump());
  m.height = j.value("height", std::size_t{0});
  m.width = j.value("width", std::size_t{0});
  m.channels = j.value("channels", std::size_t{0});
  m.dim = j.value("dim", std::size_t{0});
  m.informative_classes = j.value("informative_classes", std::vector<int>{});
  m.noise_sigma = j.value("noise_sigma", 0.5);
}

/// Everything needed to generate a synthetic corpus, both the classification and detection flavors.
struct CorpusSpec {
  std::vector<ModalitySpec> modalities;
  std::size_t num_classes = 8;

  // Classification: each example is a short trimmed video.
  std::size_t train_per_class = 20;
  std::size_t test_per_class = 20;
  std::size_t video_length = 20;
  std::size_t clip_length = 10;

  // Class patterns.
  double uninformative_noise_scale = 3.0;
  double motion_gain = 0.5;
  double blend_max = 0.0;
  std::optional<std::uint64_t> template_seed;

  // Detection: long untrimmed videos with background gaps.
  std::size_t train_videos = 10;
  std::size_t test_videos = 5;
  std::size_t video_frames = 400;
  std::size_t segments_per_video = 5;
  std::size_t segment_min = 20;
  std::size_t segment_max = 40;
  std::size_t min_gap = 4;
  std::size_t window_clips = 10;

  std::size_t modality_index(const std::string& name) const {
    for (std::size_t i = 0; i < modalities.size(); ++i)
      if (modalities[i].name == name) return i;
    throw ConfigError("unknown modality '" + name + "'");
  }

  void validate() const {
    if (modalities.size() < 2) throw ConfigError("corpus spec needs at least 2 modalities");
    if (num_classes < 2) throw ConfigError("corpus spec needs at least 2 classes");
    if (clip_length == 0) throw ConfigError("clip_length must be positive");
    for (std::size_t i = 0; i < modalities.size(); ++i) {
      const auto& m = modalities[i];
      if (m.name.empty()) throw ConfigError("modality " + std::to_string(i) + " has no name");
      for (std::size_t k = 0; k < i; ++k)
        if (modalities[k].name == m.name) throw ConfigError("duplicate modality name '" + m.name + "'");
      if (m.kind == ModalityKind::image && (m.height == 0 || m.width == 0 || m.channels == 0))
        throw ConfigError("image modality '" + m.name + "' needs positive height, width and channels");
      if (m.kind == ModalityKind::vector && m.dim == 0)
        throw ConfigError("vector modality '" + m.name + "' needs a positive dim");
      if (m.noise_sigma < 0.0) throw ConfigError("modality '" + m.name + "' has negative noise_sigma");
      for (int c : m.informative_classes)
        if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
          throw ConfigError("modality '" + m.name + "' lists informative class " + std::to_string(c) +
                            " outside [0," + std::to_string(num_classes) + ")");
    }
    if (uninformative_noise_scale < 0.0 || motion_gain < 0.0) throw ConfigError("negative pattern scale");
    if (blend_max < 0.0 || blend_max >= 0.5) throw ConfigError("blend_max must lie in [0, 0.5)");
  }

  void validate_classification() const {
    validate();
    if (train_per_class == 0 || test_per_class == 0) throw ConfigError("per-class counts must be at least 1");
    if (video_length < clip_length) throw ConfigError("video_length must be at least clip_length");
  }

  void validate_detection() const {
    validate();
    if (video_frames < clip_length * window_clips)
      throw ConfigError("video_frames (" + std::to_string(video_frames) + ") is shorter than one window (" +
                        std::to_string(clip_length * window_clips) + " frames)");
    if (segment_min == 0 || segment_min > segment_max) throw ConfigError("invalid segment length range");
    const std::size_t needed = segments_per_video * segment_max + (segments_per_video + 1) * min_gap;
    if (needed > video_frames)
      throw ConfigError("video_frames (" + std::to_string(video_frames) + ") cannot hold " +
                        std::to_string(segments_per_video) + " segments (needs " + std::to_string(needed) + ")");
  }
};

inline void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = {{"modalities", s.modalities},
       {"num_classes", s.num_classes},
       {"train_per_class", s.train_per_class},
       {"test_per_class", s.test_per_class},
       {"video_length", s.video_length},
       {"clip_length", s.clip_length},
       {"uninformative_noise_scale", s.uninformative_noise_scale},
       {"motion_gain", s.motion_gain},
       {"blend_max", s.blend_max},
       {"train_videos", s.train_videos},
       {"test_videos", s.test_videos},
       {"video_frames", s.video_frames},
       {"segments_per_video", s.segments_per_video},
       {"segment_min", s.segment_min},
       {"segment_max", s.segment_max},
       {"min_gap", s.min_gap},
       {"window_clips", s.window_clips}};
  if (s.template_seed) j["template_seed"] = *s.template_seed;
}

inline void from_json(const nlohmann::json& j, CorpusSpec& s) {
  CorpusSpec d;
  s.modalities = j.at("modalities").get<std::vector<ModalitySpec>>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.train_per_class = j.value("train_per_class", d.train_per_class);
  s.test_per_class = j.value("test_per_class", d.test_per_class);
  s.video_length = j.value("video_length", d.video_length);
  s.clip_length = j.value("clip_length", d.clip_length);
  s.uninformative_noise_scale = j.value("uninformative_noise_scale", d.uninformative_noise_scale);
  s.motion_gain = j.value("motion_gain", d.motion_gain);
  s.blend_max = j.value("blend_max", d.blend_max);
  s.train_videos = j.value("train_videos", d.train_videos);
  s.test_videos = j.value("test_videos", d.test_videos);
  s.video_frames = j.value("video_frames", d.video_frames);
  s.segments_per_video = j.value("segments_per_video", d.segments_per_video);
  s.segment_min = j.value("segment_min", d.segment_min);
  s.segment_max = j.value("segment_max", d.segment_max);
  s.min_gap = j.value("min_gap", d.min_gap);
  s.window_clips = j.value("window_clips", d.window_clips);
  if (j.contains("template_seed")) s.template_seed = j.at("template_seed").get<std::uint64_t>();
  else s.template_seed.reset();
}

/// One trimmed sample: per-modality clips ([T,H,W,C] or [T,D]) sharing T, plus a label.
struct MultimodalExample {
  std::vector<Tensor> clips;
  int label = 0;

  std::size_t length() const { return clips.empty() ? 0 : clips.front().dim(0); }
  const Tensor& clip(const CorpusSpec& spec, const std::string& modality) const {
    return clips.at(spec.modality_index(modality));
  }
  friend bool operator==(const MultimodalExample&, const MultimodalExample&) = default;
};

struct ClassificationCorpus {
  CorpusSpec spec;
  std::uint64_t seed = 0;
  std::vector<MultimodalExample> train, test;
};

struct Segment {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  int label = 0;
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// One untrimmed video. Frames outside every segment are background (class index L).
struct DetectionVideo {
  std::vector<Tensor> frames;
  std::vector<Segment> segments;

  std::size_t length() const { return frames.empty() ? 0 : frames.front().dim(0); }

  std::vector<int> frame_labels(std::size_t num_classes) const {
    std::vector<int> labels(length(), static_cast<int>(num_classes));
    for (const auto& s : segments)
      for (std::size_t t = s.start; t < s.end; ++t) labels[t] = s.label;
    return labels;
  }
  friend bool operator==(const DetectionVideo&, const DetectionVideo&) = default;
};

struct DetectionCorpus {
  CorpusSpec spec;
  std::uint64_t seed = 0;
  std::vector<DetectionVideo> train, test;
};

/// Per-frame labels the generator used, kept for cross-checking annotations.
struct DetectionTrace {
  std::vector<std::vector<int>> train_frame_labels, test_frame_labels;
};

namespace detail {

/// Fixed per-(class, modality) pattern: a static base plus a sinusoidally modulated motion vector.
struct ClassPattern {
  std::vector<double> base, motion;
  double omega = 0.3;
};

class PatternBank {
public:
  PatternBank(const CorpusSpec& spec, std::uint64_t template_seed) : spec_(spec) {
    Rng rng = make_rng(template_seed, "class-templates");
    // Class index L is the background pattern.
    patterns_.resize(spec.num_classes + 1);
    for (std::size_t c = 0; c <= spec.num_classes; ++c) {
      const double omega = uniform(rng, 0.15, 0.9);
      for (const auto& m : spec.modalities) {
        ClassPattern p;
        p.omega = omega;
        p.base = m.kind == ModalityKind::image ? grating(m, rng) : unit_rms(m.frame_size(), rng);
        p.motion = m.kind == ModalityKind::image ? grating(m, rng) : unit_rms(m.frame_size(), rng);
        patterns_[c].push_back(std::move(p));
      }
    }
  }

  const ClassPattern& get(std::size_t cls, std::size_t modality) const { return patterns_[cls][modality]; }

  double sigma(std::size_t modality, int cls) const {
    const auto& m = spec_.modalities[modality];
    if (static_cast<std::size_t>(cls) >= spec_.num_classes || m.informative_for(cls)) return m.noise_sigma;
    return m.noise_sigma * spec_.uninformative_noise_scale;
  }

  /// Write one frame of class `cls` (optionally blended with `other`) at phase-shifted time t.
  void frame(std::size_t modality, int cls, int other, double blend, double t, double phase, Rng& rng,
             double* out) const {
    const auto& p = get(static_cast<std::size_t>(cls), modality);
    const double s = std::sin(p.omega * t + phase) * spec_.motion_gain;
    const std::size_t n = p.base.size();
    const double keep = 1.0 - blend;
    for (std::size_t i = 0; i < n; ++i) out[i] = keep * (p.base[i] + s * p.motion[i]);
    if (blend > 0.0) {
      const auto& q = get(static_cast<std::size_t>(other), modality);
      const double s2 = std::sin(q.omega * t + phase) * spec_.motion_gain;
      for (std::size_t i = 0; i < n; ++i) out[i] += blend * (q.base[i] + s2 * q.motion[i]);
    }
    const double sig = sigma(modality, cls);
    if (sig > 0.0)
      for (std::size_t i = 0; i < n; ++i) out[i] += sig * normal(rng);
  }

private:
  static void normalize_rms(std::vector<double>& v) {
    double ss = 0.0;
    for (double x : v) ss += x * x;
    const double scale = ss > 0.0 ? 1.0 / std::sqrt(ss / static_cast<double>(v.size())) : 0.0;
    for (auto& x : v) x *= scale;
  }

  /// Two random plane waves per channel; image patterns are textures so that
  /// translation-tolerant encoders can pick them up.
  static std::vector<double> grating(const ModalitySpec& m, Rng& rng) {
    constexpr double kTwoPi = 6.283185307179586;
    std::vector<double> v(m.frame_size(), 0.0);
    for (std::size_t c = 0; c < m.channels; ++c)
      for (int wave = 0; wave < 2; ++wave) {
        const double theta = uniform(rng, 0.0, kTwoPi);
        const double freq = uniform(rng, 0.15, 0.45);
        const double kx = kTwoPi * freq * std::cos(theta), ky = kTwoPi * freq * std::sin(theta);
        const double phase = uniform(rng, 0.0, kTwoPi);
        for (std::size_t y = 0; y < m.height; ++y)
          for (std::size_t x = 0; x < m.width; ++x)
            v[(y * m.width + x) * m.channels + c] +=
                std::cos(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
      }
    normalize_rms(v);
    return v;
  }

  static std::vector<double> unit_rms(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    double ss = 0.0;
    for (auto& x : v) {
      x = normal(rng);
      ss += x * x;
    }
    const double scale = 1.0 / std::sqrt(ss / static_cast<double>(n));
    for (auto& x : v) x *= scale;
    return v;
  }

  const CorpusSpec& spec_;
  std::vector<std::vector<ClassPattern>> patterns_;
};

inline std::uint64_t template_seed_of(const CorpusSpec& spec, std::uint64_t seed) {
  return spec.template_seed.value_or(seed);
}

/// Per-example latent shared by all modalities: temporal phase and an optional blend partner.
struct ExampleLatent {
  double phase = 0.0;
  int other = 0;
  double blend = 0.0;
};

inline ExampleLatent draw_latent(const CorpusSpec& spec, int label, Rng& rng) {
  ExampleLatent z;
  z.phase = uniform(rng, 0.0, 6.283185307179586);
  const auto L = spec.num_classes;
  z.other = static_cast<int>((static_cast<std::size_t>(label) + 1 + uniform_index(rng, L - 1)) % L);
  z.blend = spec.blend_max > 0.0 ? uniform(rng, 0.0, spec.blend_max) : 0.0;
  return z;
}

inline Tensor make_clip(const CorpusSpec& spec, const PatternBank& bank, std::size_t m, int label,
                        const ExampleLatent& z, std::size_t frames, Rng& rng) {
  const auto& ms = spec.modalities[m];
  Shape shape = ms.frame_shape();
  shape.insert(shape.begin(), frames);
  Tensor clip(shape);
  const std::size_t fs = ms.frame_size();
  for (std::size_t t = 0; t < frames; ++t)
    bank.frame(m, label, z.other, z.blend, static_cast<double>(t), z.phase, rng, clip.data() + t * fs);
  return clip;
}

}  // namespace detail

/// Seeded synthetic classification corpus. Modalities listing class c as informative carry
/// its pattern at noise_sigma; the others carry it at noise_sigma * uninformative_noise_scale.
inline ClassificationCorpus generate_classification_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  spec.validate_classification();
  ClassificationCorpus corpus{spec, seed, {}, {}};
  const detail::PatternBank bank(spec, detail::template_seed_of(spec, seed));

  auto make_split = [&](std::size_t per_class, std::string_view tag) {
    std::vector<MultimodalExample> out;
    Rng rng = make_rng(seed, tag);
    for (std::size_t c = 0; c < spec.num_classes; ++c)
      for (std::size_t i = 0; i < per_class; ++i) {
        MultimodalExample ex;
        ex.label = static_cast<int>(c);
        const auto z = detail::draw_latent(spec, ex.label, rng);
        for (std::size_t m = 0; m < spec.modalities.size(); ++m)
          ex.clips.push_back(detail::make_clip(spec, bank, m, ex.label, z, spec.video_length, rng));
        out.push_back(std::move(ex));
      }
    return out;
  };
  corpus.train = make_split(spec.train_per_class, "train-examples");
  corpus.test = make_split(spec.test_per_class, "test-examples");
  return corpus;
}

/// Seeded synthetic detection corpus of untrimmed videos with exactly segments_per_video
/// non-overlapping actions separated by background.
inline DetectionCorpus generate_detection_corpus(const CorpusSpec& spec, std::uint64_t seed,
                                                 DetectionTrace* trace = nullptr) {
  spec.validate_detection();
  DetectionCorpus corpus{spec, seed, {}, {}};
  const detail::PatternBank bank(spec, detail::template_seed_of(spec, seed));
  const int background = static_cast<int>(spec.num_classes);

  auto make_video = [&](Rng& rng, std::vector<int>& labels) {
    DetectionVideo v;
    const std::size_t n = spec.segments_per_video;
    std::vector<std::size_t> lengths(n);
    std::size_t used = (n + 1) * spec.min_gap;
    for (auto& len : lengths) {
      len = spec.segment_min + uniform_index(rng, spec.segment_max - spec.segment_min + 1);
      used += len;
    }
    // Spread the remaining frames over the n+1 gaps.
    const std::size_t spare = spec.video_frames - used;
    std::vector<double> w(n + 1);
    double wsum = 0.0;
    for (auto& x : w) {
      x = uniform01(rng) + 1e-3;
      wsum += x;
    }
    std::vector<std::size_t> gaps(n + 1, spec.min_gap);
    std::size_t assigned = 0;
    for (std::size_t g = 0; g < n; ++g) {
      const auto extra = static_cast<std::size_t>(std::floor(static_cast<double>(spare) * w[g] / wsum));
      gaps[g] += extra;
      assigned += extra;
    }
    gaps[n] += spare - assigned;

    labels.assign(spec.video_frames, background);
    std::vector<detail::ExampleLatent> latents;
    std::size_t t = 0;
    for (std::size_t s = 0; s < n; ++s) {
      t += gaps[s];
      Segment seg{t, t + lengths[s], static_cast<int>(uniform_index(rng, spec.num_classes))};
      for (std::size_t f = seg.start; f < seg.end; ++f) labels[f] = seg.label;
      latents.push_back(detail::draw_latent(spec, seg.label, rng));
      v.segments.push_back(seg);
      t = seg.end;
    }

    const double bg_phase = uniform(rng, 0.0, 6.283185307179586);
    for (std::size_t m = 0; m < spec.modalities.size(); ++m) {
      const auto& ms = spec.modalities[m];
      Shape shape = ms.frame_shape();
      shape.insert(shape.begin(), spec.video_frames);
      Tensor frames(shape);
      const std::size_t fs = ms.frame_size();
      std::size_t seg_idx = 0;
      for (std::size_t f = 0; f < spec.video_frames; ++f) {
        while (seg_idx < n && f >= v.segments[seg_idx].end) ++seg_idx;
        double* out = frames.data() + f * fs;
        if (seg_idx < n && f >= v.segments[seg_idx].start) {
          const auto& seg = v.segments[seg_idx];
          const auto& z = latents[seg_idx];
          bank.frame(m, seg.label, z.other, z.blend, static_cast<double>(f - seg.start), z.phase, rng, out);
        } else {
          bank.frame(m, background, background, 0.0, static_cast<double>(f), bg_phase, rng, out);
        }
      }
      v.frames.push_back(std::move(frames));
    }
    return v;
  };

  std::vector<int> labels;
  Rng train_rng = make_rng(seed, "train-videos");
  for (std::size_t i = 0; i < spec.train_videos; ++i) {
    corpus.train.push_back(make_video(train_rng, labels));
    if (trace) trace->train_frame_labels.push_back(labels);
  }
  Rng test_rng = make_rng(seed, "test-videos");
  for (std::size_t i = 0; i < spec.test_videos; ++i) {
    corpus.test.push_back(make_video(test_rng, labels));
    if (trace) trace->test_frame_labels.push_back(labels);
  }
  return corpus;
}

}  // namespace gdist
