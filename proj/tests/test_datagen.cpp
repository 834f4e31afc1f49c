#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "gdist/container.hpp"
#include "gdist/eval.hpp"
#include "helpers.hpp"

using namespace gdist;
using gdist::testing::small_spec;
using gdist::testing::TempDir;

namespace {

// Two modalities, each informative for half of 8 classes.
CorpusSpec halves_spec(double sigma) {
  CorpusSpec s;
  s.modalities = {{"a", ModalityKind::vector, 0, 0, 0, 12, {0, 1, 2, 3}, sigma},
                  {"b", ModalityKind::vector, 0, 0, 0, 12, {4, 5, 6, 7}, sigma}};
  s.num_classes = 8;
  s.train_per_class = 20;
  s.test_per_class = 20;
  s.video_length = 6;
  s.clip_length = 3;
  return s;
}

bool same_examples(const std::vector<MultimodalExample>& a, const std::vector<MultimodalExample>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].label != b[i].label || !(a[i].clips == b[i].clips)) return false;
  return true;
}

}  // namespace

TEST(ClassificationCorpus, SameSeedIsBitIdentical) {
  const auto spec = small_spec();
  const auto a = generate_classification_corpus(spec, 7);
  const auto b = generate_classification_corpus(spec, 7);
  EXPECT_TRUE(same_examples(a.train, b.train));
  EXPECT_TRUE(same_examples(a.test, b.test));
  const auto c = generate_classification_corpus(spec, 8);
  EXPECT_FALSE(same_examples(a.train, c.train));
}

TEST(ClassificationCorpus, ShapesAndCounts) {
  const auto spec = small_spec();
  const auto corpus = generate_classification_corpus(spec, 1);
  ASSERT_EQ(corpus.train.size(), spec.num_classes * spec.train_per_class);
  ASSERT_EQ(corpus.test.size(), spec.num_classes * spec.test_per_class);
  for (const auto& ex : corpus.train) {
    ASSERT_EQ(ex.clips.size(), 4u);
    EXPECT_EQ(ex.clips[0].shape(), (Shape{6, 4, 4, 1}));
    EXPECT_EQ(ex.clips[2].shape(), (Shape{6, 6}));
    for (const auto& c : ex.clips) EXPECT_TRUE(c.all_finite());
  }
}

TEST(ClassificationCorpus, NoiselessIsCentroidSeparable) {
  auto spec = small_spec();
  for (auto& m : spec.modalities) m.noise_sigma = 0.0;
  const auto corpus = generate_classification_corpus(spec, 3);
  for (std::size_t m = 0; m < spec.modalities.size(); ++m)
    EXPECT_DOUBLE_EQ(nearest_centroid(corpus.train, corpus.train, m, spec.num_classes).accuracy, 1.0)
        << spec.modalities[m].name;
}

TEST(ClassificationCorpus, InformativeModalityWinsPerClass) {
  const auto spec = halves_spec(1.0);
  std::vector<double> a(8, 0.0), b(8, 0.0);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto corpus = generate_classification_corpus(spec, seed);
    const auto ra = nearest_centroid(corpus.train, corpus.test, 0, 8);
    const auto rb = nearest_centroid(corpus.train, corpus.test, 1, 8);
    for (std::size_t c = 0; c < 8; ++c) {
      a[c] += ra.per_class[c] / 5.0;
      b[c] += rb.per_class[c] / 5.0;
    }
  }
  for (std::size_t c = 0; c < 4; ++c) EXPECT_GT(a[c], b[c]) << "class " << c;
  for (std::size_t c = 4; c < 8; ++c) EXPECT_GT(b[c], a[c]) << "class " << c;
}

TEST(ClassificationCorpus, HalvesCorpusIsModeratelyHard) {
  const auto spec = halves_spec(1.4);
  for (std::uint64_t seed = 11; seed <= 15; ++seed) {
    const auto corpus = generate_classification_corpus(spec, seed);
    for (std::size_t m = 0; m < 2; ++m) {
      const double acc = nearest_centroid(corpus.train, corpus.test, m, 8).accuracy;
      EXPECT_GE(acc, 0.55) << "seed " << seed << " modality " << m;
      EXPECT_LE(acc, 0.85) << "seed " << seed << " modality " << m;
    }
  }
}

TEST(ClassificationCorpus, InvalidSpecsRejected) {
  auto spec = small_spec();
  spec.modalities.resize(1);
  EXPECT_THROW(generate_classification_corpus(spec, 0), ConfigError);
  spec = small_spec();
  spec.num_classes = 1;
  spec.modalities[0].informative_classes = {0};
  spec.modalities[1].informative_classes = {};
  spec.modalities[2].informative_classes = {};
  spec.modalities[3].informative_classes = {};
  EXPECT_THROW(generate_classification_corpus(spec, 0), ConfigError);
  spec = small_spec();
  spec.modalities[1].name = "rgb";
  EXPECT_THROW(generate_classification_corpus(spec, 0), ConfigError);
  spec = small_spec();
  spec.video_length = 2;
  EXPECT_THROW(generate_classification_corpus(spec, 0), ConfigError);
}

TEST(ModalitySpecJson, UnknownKindRejected) {
  nlohmann::json j = {{"name", "x"}, {"kind", "audio"}, {"dim", 3}};
  EXPECT_THROW(j.get<ModalitySpec>(), ConfigError);
}

TEST(CorpusSpecJson, RoundTrip) {
  auto spec = small_spec();
  spec.template_seed = 99;
  const nlohmann::json j = spec;
  EXPECT_EQ(nlohmann::json(j.get<CorpusSpec>()), j);
}

TEST(DetectionCorpus, ZeroSegmentsIsAllBackground) {
  auto spec = small_spec();
  spec.segments_per_video = 0;
  const auto corpus = generate_detection_corpus(spec, 2);
  for (const auto& v : corpus.train) {
    EXPECT_TRUE(v.segments.empty());
    for (int y : v.frame_labels(spec.num_classes)) EXPECT_EQ(y, 8);
  }
}

TEST(DetectionCorpus, TwentySegmentsDoNotOverlap) {
  auto spec = small_spec();
  spec.segments_per_video = 20;
  spec.video_frames = 20 * 10 + 21 * 2 + 30;
  const auto corpus = generate_detection_corpus(spec, 4);
  for (const auto* split : {&corpus.train, &corpus.test})
    for (const auto& v : *split) {
      ASSERT_EQ(v.segments.size(), 20u);
      for (std::size_t i = 0; i < v.segments.size(); ++i) {
        EXPECT_LT(v.segments[i].start, v.segments[i].end);
        EXPECT_LE(v.segments[i].end - v.segments[i].start, spec.segment_max);
        EXPECT_GE(v.segments[i].end - v.segments[i].start, spec.segment_min);
        if (i) {
          EXPECT_GE(v.segments[i].start, v.segments[i - 1].end + spec.min_gap);
        }
      }
      EXPECT_LE(v.segments.back().end, spec.video_frames);
    }
}

TEST(DetectionCorpus, FrameLabelsMatchGeneratorTrace) {
  const auto spec = small_spec();
  DetectionTrace trace;
  const auto corpus = generate_detection_corpus(spec, 5, &trace);
  ASSERT_EQ(trace.train_frame_labels.size(), corpus.train.size());
  for (std::size_t i = 0; i < corpus.train.size(); ++i)
    EXPECT_EQ(corpus.train[i].frame_labels(spec.num_classes), trace.train_frame_labels[i]);
  for (std::size_t i = 0; i < corpus.test.size(); ++i)
    EXPECT_EQ(corpus.test[i].frame_labels(spec.num_classes), trace.test_frame_labels[i]);
}

TEST(DetectionCorpus, SegmentsAndBackgroundPartitionTheVideo) {
  const auto spec = small_spec();
  const auto corpus = generate_detection_corpus(spec, 6);
  for (const auto& v : corpus.train) {
    std::size_t covered = 0, background = 0;
    for (const auto& s : v.segments) covered += s.end - s.start;
    for (int y : v.frame_labels(spec.num_classes)) background += y == 8;
    EXPECT_EQ(covered + background, spec.video_frames);
    EXPECT_EQ(v.length(), spec.video_frames);
  }
}

TEST(DetectionCorpus, TooShortForOneWindow) {
  auto spec = small_spec();
  spec.video_frames = spec.clip_length * spec.window_clips - 1;
  spec.segments_per_video = 0;
  EXPECT_THROW(generate_detection_corpus(spec, 0), ConfigError);
}

TEST(Container, ClassificationRoundTrip) {
  TempDir dir("container");
  const auto corpus = generate_classification_corpus(small_spec(), 9);
  io::write_corpus(corpus, dir.path() / "c.gdst");
  const auto back = io::read_classification_corpus(dir.path() / "c.gdst");
  EXPECT_EQ(back.seed, corpus.seed);
  EXPECT_EQ(nlohmann::json(back.spec), nlohmann::json(corpus.spec));
  EXPECT_TRUE(same_examples(back.train, corpus.train));
  EXPECT_TRUE(same_examples(back.test, corpus.test));
}

TEST(Container, DetectionRoundTripKeepsShapesAndAnnotations) {
  TempDir dir("container");
  const auto corpus = generate_detection_corpus(small_spec(), 10);
  io::write_corpus(corpus, dir.path() / "d.gdst");
  const auto back = io::read_detection_corpus(dir.path() / "d.gdst");
  ASSERT_EQ(back.train.size(), corpus.train.size());
  EXPECT_EQ(back.train, corpus.train);
  EXPECT_EQ(back.test, corpus.test);
  EXPECT_EQ(back.train[0].frames[0].shape(), (Shape{60, 4, 4, 1}));
  EXPECT_EQ(back.train[0].frames[3].shape(), (Shape{60, 6}));
}

TEST(Container, EveryTruncationIsAParseError) {
  const auto bytes = io::encode(io::to_container(generate_classification_corpus(small_spec(), 1)));
  for (std::size_t n : {std::size_t{0}, std::size_t{3}, std::size_t{9}, std::size_t{30}, bytes.size() / 2,
                        bytes.size() - 5, bytes.size() - 1}) {
    std::vector<unsigned char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(io::decode(cut), ParseError) << n;
  }
}

TEST(Container, TruncatedFileOnDisk) {
  TempDir dir("container");
  const auto path = dir.path() / "c.gdst";
  io::write_corpus(generate_classification_corpus(small_spec(), 1), path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 17);
  try {
    io::read_classification_corpus(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_GT(e.offset(), 0u);
  }
}

TEST(Container, VersionMismatch) {
  auto bytes = io::encode(io::to_container(generate_classification_corpus(small_spec(), 1)));
  bytes[4] = 7;  // little-endian version field follows the 4-byte magic
  try {
    io::decode(bytes);
    FAIL() << "expected VersionError";
  } catch (const VersionError& e) {
    EXPECT_EQ(e.found(), 7u);
  }
}

TEST(Container, BadMagicAndTrailingBytes) {
  auto bytes = io::encode(io::to_container(generate_classification_corpus(small_spec(), 1)));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(io::decode(bad), ParseError);
  bytes.push_back(0);
  EXPECT_THROW(io::decode(bytes), ParseError);
}

TEST(Container, WrongPayloadKind) {
  TempDir dir("container");
  io::write_corpus(generate_classification_corpus(small_spec(), 1), dir.path() / "c.gdst");
  EXPECT_THROW(io::read_detection_corpus(dir.path() / "c.gdst"), ParseError);
}
