#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gdist/container.hpp"
#include "gdist/datagen.hpp"
#include "gdist/nn.hpp"

namespace gdist {

using ag::Var;

/// Representation (the layer before the logits) and logits of one modality for a batch.
struct ModalityOutputs {
  Var representation;  // [B, d_f]
  Var logits;          // [B, L] (L+1 for detection)
};

struct EncoderConfig {
  std::size_t feature_dim = 512;
  std::size_t conv_width = 16;
  std::size_t gru_layers = 3;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"feature_dim", c.feature_dim}, {"conv_width", c.conv_width}, {"gru_layers", c.gru_layers}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.conv_width = j.value("conv_width", d.conv_width);
  c.gru_layers = j.value("gru_layers", d.gru_layers);
}

/// Clip encoder for one modality: [B, T_c, frame...] -> [B, d_f].
class VisualEncoder {
public:
  virtual ~VisualEncoder() = default;
  virtual Var encode(const Var& clips) const = 0;
  virtual nlohmann::json descriptor() const = 0;
  virtual nn::ParameterList parameters() const = 0;
  virtual std::size_t feature_dim() const = 0;
  /// Expected per-example input shape [T_c, frame...].
  virtual Shape clip_shape() const = 0;

  /// Single clip convenience: [T_c, frame...] -> [d_f].
  Tensor encode_clip(const Tensor& clip) const {
    check_clip(clip.shape());
    Shape batched = clip.shape();
    batched.insert(batched.begin(), 1);
    ag::NoGradGuard guard;
    return encode(Var(clip.reshaped(batched))).value().reshaped({feature_dim()});
  }

protected:
  void check_clip(const Shape& s) const {
    if (s != clip_shape())
      throw ShapeError("clip shape mismatch: expected " + shape_str(clip_shape()) + ", got " + shape_str(s));
  }
  void check_batch(const Var& clips) const {
    Shape s = clips.shape();
    if (s.empty()) throw ShapeError("clip batch has rank 0");
    s.erase(s.begin());
    check_clip(s);
  }
};

/// Frames channel-stacked to [T_c*C, H, W], a 3x3 stem, two residual blocks
/// (conv-norm-relu, conv-norm, skip), global average pooling and a projection to d_f.
class ImageEncoder final : public VisualEncoder {
public:
  ImageEncoder(std::size_t frames, std::size_t height, std::size_t width, std::size_t channels,
               const EncoderConfig& cfg, Rng& rng)
      : frames_(frames), height_(height), width_(width), channels_(channels), cfg_(cfg) {
    const std::size_t in = frames * channels, w = cfg.conv_width;
    stem_ = nn::Conv3x3(in, w, rng);
    stem_norm_ = nn::GroupNorm(w);
    for (auto& b : blocks_) {
      b.conv1 = nn::Conv3x3(w, w, rng);
      b.norm1 = nn::GroupNorm(w);
      b.conv2 = nn::Conv3x3(w, w, rng);
      b.norm2 = nn::GroupNorm(w);
    }
    proj_ = nn::Linear(w, cfg.feature_dim, rng);
  }

  Var encode(const Var& clips) const override {
    check_batch(clips);
    Var h = ag::relu(stem_norm_.forward(stem_.forward(ag::stack_frames(clips))));
    for (const auto& b : blocks_) {
      Var y = ag::relu(b.norm1.forward(b.conv1.forward(h)));
      y = b.norm2.forward(b.conv2.forward(y));
      h = ag::relu(ag::add(h, y));
    }
    return proj_.forward(ag::global_avg_pool(h));
  }

  nlohmann::json descriptor() const override {
    return {{"type", "image"}, {"frames", frames_}, {"height", height_}, {"width", width_},
            {"channels", channels_}, {"conv_width", cfg_.conv_width}, {"feature_dim", cfg_.feature_dim}};
  }

  nn::ParameterList parameters() const override {
    nn::ParameterList out;
    stem_.collect(out, "stem");
    stem_norm_.collect(out, "stem_norm");
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "block" + std::to_string(i);
      blocks_[i].conv1.collect(out, p + ".conv1");
      blocks_[i].norm1.collect(out, p + ".norm1");
      blocks_[i].conv2.collect(out, p + ".conv2");
      blocks_[i].norm2.collect(out, p + ".norm2");
    }
    proj_.collect(out, "proj");
    return out;
  }

  std::size_t feature_dim() const override { return cfg_.feature_dim; }
  Shape clip_shape() const override { return {frames_, height_, width_, channels_}; }

private:
  struct Block {
    nn::Conv3x3 conv1, conv2;
    nn::GroupNorm norm1, norm2;
  };
  std::size_t frames_, height_, width_, channels_;
  EncoderConfig cfg_;
  nn::Conv3x3 stem_;
  nn::GroupNorm stem_norm_;
  std::array<Block, 2> blocks_;
  nn::Linear proj_;
};

/// Stacked GRU over the T_c frame vectors; representation is the time-average of the
/// top layer's raw hidden outputs. Hidden size equals d_f.
class VectorEncoder final : public VisualEncoder {
public:
  VectorEncoder(std::size_t frames, std::size_t dim, const EncoderConfig& cfg, Rng& rng)
      : frames_(frames), dim_(dim), cfg_(cfg) {
    if (cfg.gru_layers == 0) throw ConfigError("vector encoder needs at least one GRU layer");
    std::size_t in = dim;
    for (std::size_t l = 0; l < cfg.gru_layers; ++l) {
      layers_.emplace_back(in, cfg.feature_dim, rng);
      in = cfg.feature_dim;
    }
  }

  Var encode(const Var& clips) const override {
    check_batch(clips);
    std::vector<Var> seq;
    for (std::size_t t = 0; t < frames_; ++t) seq.push_back(ag::select_step(clips, t));
    for (const auto& layer : layers_) seq = layer.forward(seq);
    return ag::average(seq);
  }

  nlohmann::json descriptor() const override {
    return {{"type", "vector"}, {"frames", frames_}, {"dim", dim_}, {"layers", cfg_.gru_layers},
            {"feature_dim", cfg_.feature_dim}};
  }

  nn::ParameterList parameters() const override {
    nn::ParameterList out;
    for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(out, "gru" + std::to_string(l));
    return out;
  }

  std::size_t feature_dim() const override { return cfg_.feature_dim; }
  Shape clip_shape() const override { return {frames_, dim_}; }

private:
  std::size_t frames_, dim_;
  EncoderConfig cfg_;
  std::vector<nn::GRULayer> layers_;
};

inline std::unique_ptr<VisualEncoder> make_encoder(const ModalitySpec& m, std::size_t clip_length,
                                                   const EncoderConfig& cfg, Rng& rng) {
  if (m.kind == ModalityKind::image)
    return std::make_unique<ImageEncoder>(clip_length, m.height, m.width, m.channels, cfg, rng);
  return std::make_unique<VectorEncoder>(clip_length, m.dim, cfg, rng);
}

inline std::unique_ptr<VisualEncoder> make_encoder(const nlohmann::json& d, Rng& rng) {
  EncoderConfig cfg;
  cfg.feature_dim = d.at("feature_dim").get<std::size_t>();
  const auto type = d.at("type").get<std::string>();
  if (type == "image") {
    cfg.conv_width = d.at("conv_width").get<std::size_t>();
    return std::make_unique<ImageEncoder>(d.at("frames").get<std::size_t>(), d.at("height").get<std::size_t>(),
                                          d.at("width").get<std::size_t>(), d.at("channels").get<std::size_t>(),
                                          cfg, rng);
  }
  if (type == "vector") {
    cfg.gru_layers = d.at("layers").get<std::size_t>();
    return std::make_unique<VectorEncoder>(d.at("frames").get<std::size_t>(), d.at("dim").get<std::size_t>(), cfg,
                                           rng);
  }
  throw ConfigError("unknown encoder type '" + type + "'");
}

inline std::unique_ptr<VisualEncoder> clone_encoder(const VisualEncoder& e) {
  Rng rng(0);
  auto copy = make_encoder(e.descriptor(), rng);
  nn::copy_values(e.parameters(), copy->parameters());
  return copy;
}

/// Task-specific linear layer. Logits stay unnormalized; softmax lives in losses and inference.
class ClassifyHead {
public:
  ClassifyHead() = default;
  ClassifyHead(std::size_t feature_dim, std::size_t classes, Rng& rng) : linear_(feature_dim, classes, rng) {}
  Var forward(const Var& representation) const { return linear_.forward(representation); }
  Tensor logits(const Tensor& representation) const {
    ag::NoGradGuard guard;
    const bool single = representation.rank() == 1;
    Var in(single ? representation.reshaped({1, representation.size()}) : representation);
    Tensor out = forward(in).value();
    return single ? out.reshaped({out.size()}) : out;
  }
  void collect(nn::ParameterList& out, const std::string& prefix) const { linear_.collect(out, prefix); }
  nn::Linear& linear() { return linear_; }
  std::size_t classes() const { return linear_.out_features(); }

private:
  nn::Linear linear_;
};

/// 1-layer GRU over the T_w clip features of a window, then a per-clip linear head.
class SequenceEncoder {
public:
  SequenceEncoder() = default;
  SequenceEncoder(std::size_t feature_dim, std::size_t classes_with_background, Rng& rng)
      : gru_(feature_dim, feature_dim, rng), head_(feature_dim, classes_with_background, rng) {}

  /// features [B*T_w, d_f] ordered window-major -> outputs for the same rows.
  ModalityOutputs forward(const Var& features, std::size_t windows, std::size_t window_clips) const {
    if (window_clips == 0) throw PreconditionError("sequence encoder needs a non-empty window");
    if (features.shape() != Shape{windows * window_clips, gru_.hidden()})
      throw ShapeError("sequence encoder input: expected " + shape_str({windows * window_clips, gru_.hidden()}) +
                       ", got " + shape_str(features.shape()));
    Var seq = ag::reshape(features, {windows, window_clips, gru_.hidden()});
    std::vector<Var> steps;
    for (std::size_t t = 0; t < window_clips; ++t) steps.push_back(ag::select_step(seq, t));
    auto hs = gru_.forward(steps);
    Var rep = ag::reshape(ag::stack_dim1(hs), {windows * window_clips, gru_.hidden()});
    return {rep, head_.forward(rep)};
  }

  /// One window of clip features [T_w, d_f] -> per-clip logits [T_w, L+1].
  Tensor encode_window(const Tensor& clip_features) const {
    if (clip_features.rank() != 2 || clip_features.dim(0) == 0)
      throw PreconditionError("encode_window needs a non-empty [T_w, d_f] window");
    if (clip_features.dim(1) != gru_.hidden())
      throw ShapeError("encode_window: expected feature dim " + std::to_string(gru_.hidden()) + ", got " +
                       std::to_string(clip_features.dim(1)));
    ag::NoGradGuard guard;
    return forward(Var(clip_features), 1, clip_features.dim(0)).logits.value();
  }

  void collect(nn::ParameterList& out, const std::string& prefix) const {
    gru_.collect(out, prefix + ".gru");
    head_.collect(out, prefix + ".head");
  }
  std::size_t classes() const { return head_.classes(); }
  std::size_t feature_dim() const { return gru_.hidden(); }

private:
  nn::GRULayer gru_;
  ClassifyHead head_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Named parameter blobs plus an architecture descriptor checked strictly on load.
struct Checkpoint {
  std::string modality;
  nlohmann::json architecture;
  std::vector<io::Block> parameters;
  nlohmann::json metadata = nlohmann::json::object();
};

inline void append_parameters(Checkpoint& ck, const nn::ParameterList& params, const std::string& prefix) {
  for (const auto& p : params) ck.parameters.push_back({prefix + p.name, io::DType::f64, p.var.value()});
}

inline nn::ParameterList with_prefix(const nn::ParameterList& params, const std::string& prefix) {
  nn::ParameterList out;
  for (const auto& p : params) out.push_back({prefix + p.name, p.var});
  return out;
}

/// Load the checkpoint blobs whose names start with `prefix` into `params`.
inline void load_parameters(const Checkpoint& ck, const nn::ParameterList& params, const std::string& prefix) {
  nn::ParameterList src;
  for (const auto& b : ck.parameters)
    if (b.name.rfind(prefix, 0) == 0) src.push_back({b.name.substr(prefix.size()), Var(b.tensor)});
  nn::copy_values(src, params);
}

inline Checkpoint encoder_checkpoint(const std::string& modality, const VisualEncoder& enc,
                                     nlohmann::json metadata = nlohmann::json::object()) {
  Checkpoint ck{modality, {{"encoder", enc.descriptor()}}, {}, std::move(metadata)};
  append_parameters(ck, enc.parameters(), "encoder.");
  return ck;
}

/// Rebuild the visual encoder stored in a checkpoint. When `expected` is given the stored
/// descriptor must match it exactly.
inline std::unique_ptr<VisualEncoder> restore_encoder(const Checkpoint& ck,
                                                      const nlohmann::json* expected = nullptr) {
  if (!ck.architecture.contains("encoder")) throw TransferError("checkpoint for '" + ck.modality + "' has no encoder");
  const auto& desc = ck.architecture.at("encoder");
  if (expected && desc != *expected)
    throw TransferError("encoder architecture mismatch for '" + ck.modality + "': checkpoint " + desc.dump() +
                        " vs target " + expected->dump());
  Rng rng(0);
  auto enc = make_encoder(desc, rng);
  load_parameters(ck, enc->parameters(), "encoder.");
  return enc;
}

inline io::Container to_container(const Checkpoint& ck) {
  io::Container c;
  c.kind = io::ContainerKind::checkpoint;
  c.header = {{"modality", ck.modality}, {"architecture", ck.architecture}, {"metadata", ck.metadata}};
  c.blocks = ck.parameters;
  return c;
}

inline Checkpoint checkpoint_from_container(const io::Container& c) {
  if (c.kind != io::ContainerKind::checkpoint) throw ParseError("container is not a checkpoint", 8);
  Checkpoint ck;
  try {
    ck.modality = c.header.at("modality").get<std::string>();
    ck.architecture = c.header.at("architecture");
    ck.metadata = c.header.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what(), 16);
  }
  ck.parameters = c.blocks;
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_container(to_container(ck), path);
}
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_container(io::read_container(path));
}

}  // namespace gdist
