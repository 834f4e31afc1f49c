#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "gdist/distill.hpp"
#include "gdist/datagen.hpp"

namespace gdist::testing {

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * normal(rng);
  return v;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& x : t.values()) x = scale * normal(rng);
  return t;
}

inline std::vector<ExampleOutputs> random_outputs(std::size_t S, std::size_t d, std::size_t L, Rng& rng) {
  std::vector<ExampleOutputs> out(S);
  for (auto& o : out) {
    o.representation = random_vector(d, rng);
    o.logits = random_vector(L, rng);
  }
  return out;
}

/// Two image and two vector modalities, each informative for a disjoint pair of 8 classes.
inline CorpusSpec small_spec() {
  CorpusSpec s;
  s.modalities = {
      {"rgb", ModalityKind::image, 4, 4, 1, 0, {0, 1}, 0.8},
      {"depth", ModalityKind::image, 4, 4, 1, 0, {2, 3}, 0.8},
      {"flow", ModalityKind::vector, 0, 0, 0, 6, {4, 5}, 0.8},
      {"skel", ModalityKind::vector, 0, 0, 0, 6, {6, 7}, 0.8},
  };
  s.num_classes = 8;
  s.train_per_class = 3;
  s.test_per_class = 2;
  s.video_length = 6;
  s.clip_length = 3;
  s.video_frames = 60;
  s.segments_per_video = 3;
  s.segment_min = 6;
  s.segment_max = 10;
  s.min_gap = 2;
  s.train_videos = 3;
  s.test_videos = 2;
  s.window_clips = 3;
  return s;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("gdist-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

private:
  std::filesystem::path path_;
};

}  // namespace gdist::testing
