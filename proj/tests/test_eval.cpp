#include <gtest/gtest.h>

#include "gdist/eval.hpp"
#include "helpers.hpp"

using namespace gdist;
using gdist::testing::random_tensor;

namespace {

VideoSegment seg(std::size_t video, std::size_t start, std::size_t end, int label, double score = 1.0) {
  return {video, {start, end, label, score}};
}

std::vector<std::pair<std::size_t, std::size_t>> spans(std::size_t clips, std::size_t T) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t g = 0; g < clips; ++g) out.emplace_back(g * T, (g + 1) * T);
  return out;
}

/// [T, K] rows: foreground class c with mass p (background gets the rest), or all background.
Tensor rows(const std::vector<std::pair<int, double>>& spec, std::size_t K) {
  Tensor t({spec.size(), K});
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto [c, p] = spec[i];
    if (c < 0) {
      t(i, K - 1) = 1.0;
    } else {
      t(i, static_cast<std::size_t>(c)) = p;
      t(i, K - 1) = 1.0 - p;
    }
  }
  return t;
}

std::vector<VideoSegment> random_predictions(Rng& rng, std::size_t n, std::size_t classes) {
  std::vector<VideoSegment> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = uniform_index(rng, 80), len = 5 + uniform_index(rng, 20);
    out.push_back(seg(uniform_index(rng, 3), s, s + len, static_cast<int>(uniform_index(rng, classes)), uniform01(rng)));
  }
  return out;
}

}  // namespace

TEST(Tiou, Basics) {
  EXPECT_DOUBLE_EQ(tiou({0, 10, 0, 1}, {0, 10, 0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(tiou({0, 10, 0, 1}, {5, 15, 0, 1}), 5.0 / 15.0);
  EXPECT_EQ(tiou({0, 10, 0, 1}, {10, 20, 0, 1}), 0.0);
}

TEST(AveragePrecision, SingleExactHit) {
  EXPECT_DOUBLE_EQ(average_precision({seg(0, 5, 15, 0)}, {seg(0, 5, 15, 0)}, 0.5), 1.0);
}

TEST(AveragePrecision, FalsePositiveRankedFirst) {
  const std::vector<VideoSegment> truth{seg(0, 0, 10, 0), seg(0, 30, 40, 0)};
  const std::vector<VideoSegment> preds{seg(0, 60, 70, 0, 0.9), seg(0, 0, 10, 0, 0.8), seg(0, 30, 40, 0, 0.7)};
  // precision 0, 1/2, 2/3 at recall 0, 1/2, 1; the envelope is 2/3 throughout
  EXPECT_NEAR(average_precision(preds, truth, 0.5), 2.0 / 3.0, 1e-15);
}

TEST(AveragePrecision, DuplicateDetectionCountsOnce) {
  const std::vector<VideoSegment> truth{seg(0, 0, 10, 0)};
  const std::vector<VideoSegment> preds{seg(0, 0, 10, 0, 0.9), seg(0, 1, 10, 0, 0.8)};
  EXPECT_DOUBLE_EQ(average_precision(preds, truth, 0.5), 1.0);
  // Same interval in another video is not a match.
  EXPECT_DOUBLE_EQ(average_precision({seg(1, 0, 10, 0)}, truth, 0.5), 0.0);
}

TEST(MapAtTiou, TwoClassesWithPartialOverlap) {
  const std::vector<VideoSegment> truth{seg(0, 0, 20, 0), seg(0, 40, 50, 1)};
  const std::vector<VideoSegment> preds{seg(0, 0, 9, 0, 0.8), seg(0, 40, 50, 1, 0.6)};  // tIoU 9/20 = 0.45
  const auto r = map_at_tiou(preds, truth, {0.3, 0.5}, 3);
  EXPECT_DOUBLE_EQ(*r.ap[0][0], 1.0);
  EXPECT_DOUBLE_EQ(*r.ap[1][0], 0.0);
  EXPECT_DOUBLE_EQ(*r.ap[1][1], 1.0);
  EXPECT_FALSE(r.ap[0][2].has_value());  // no ground truth for class 2
  EXPECT_DOUBLE_EQ(r.map[0], 1.0);
  EXPECT_DOUBLE_EQ(r.map[1], 0.5);
  EXPECT_THROW(map_at_tiou(preds, truth, {1.0}, 3), ConfigError);
}

TEST(MapAtTiou, PerfectAndDisjointPredictions) {
  Rng rng(1);
  auto truth = random_predictions(rng, 20, 4);
  const auto perfect = map_at_tiou(truth, truth, {0.1, 0.5, 0.9}, 4);
  for (double m : perfect.map) EXPECT_DOUBLE_EQ(m, 1.0);
  std::vector<VideoSegment> shifted;
  for (auto t : truth) {
    t.segment.start += 200;
    t.segment.end += 200;
    shifted.push_back(t);
  }
  for (double m : map_at_tiou(shifted, truth, {0.1, 0.5}, 4).map) EXPECT_EQ(m, 0.0);
}

TEST(MapAtTiou, InvariantToMonotoneScoreRescaling) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto truth = random_predictions(rng, 10, 3);
    auto preds = random_predictions(rng, 25, 3);
    const auto a = map_at_tiou(preds, truth, {0.1, 0.3, 0.5}, 3);
    for (auto& p : preds) p.segment.score = 3.0 * p.segment.score * p.segment.score + 1.0;
    const auto b = map_at_tiou(preds, truth, {0.1, 0.3, 0.5}, 3);
    for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(a.map[t], b.map[t], 1e-15);
  }
}

TEST(MapAtTiou, NonIncreasingInThreshold) {
  Rng rng(3);
  const std::vector<double> th{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  for (int trial = 0; trial < 100; ++trial) {
    const auto truth = random_predictions(rng, 10, 3);
    const auto r = map_at_tiou(random_predictions(rng, 30, 3), truth, th, 3);
    for (std::size_t i = 1; i < th.size(); ++i) EXPECT_LE(r.map[i], r.map[i - 1] + 1e-15);
  }
}

TEST(EvalReport, JsonRoundTrip) {
  const auto r = map_at_tiou({seg(0, 0, 9, 0, 0.8)}, {seg(0, 0, 20, 0), seg(0, 40, 50, 1)}, {0.3, 0.5}, 3);
  const nlohmann::json j = r;
  EXPECT_EQ(nlohmann::json(j.get<EvalReport>()), j);
}

TEST(ExtractSegments, AllBackgroundGivesNothing) {
  const Tensor p = rows({{-1, 0}, {-1, 0}, {-1, 0}}, 4);
  EXPECT_TRUE(extract_segments(p, 0.4, spans(3, 5)).empty());
}

TEST(ExtractSegments, SingleRunScore) {
  const Tensor p = rows({{-1, 0}, {2, 0.9}, {2, 0.9}, {2, 0.9}, {2, 0.9}, {-1, 0}}, 4);
  const auto s = extract_segments(p, 0.4, spans(6, 5));
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].start, 5u);
  EXPECT_EQ(s[0].end, 25u);
  EXPECT_EQ(s[0].label, 2);
  EXPECT_NEAR(s[0].score, 0.9, 1e-15);
}

TEST(ExtractSegments, SubThresholdGapSplits) {
  const Tensor p = rows({{1, 0.8}, {1, 0.8}, {1, 0.2}, {1, 0.7}, {1, 0.7}}, 3);
  const auto s = extract_segments(p, 0.4, spans(5, 4));
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].end, 8u);
  EXPECT_EQ(s[1].start, 12u);
  // A change of class also ends a run.
  const auto t = extract_segments(rows({{0, 0.8}, {1, 0.8}}, 3), 0.4, spans(2, 4));
  EXPECT_EQ(t.size(), 2u);
}

TEST(ExtractSegments, MaxClassGate) {
  // Foreground mass 0.6 split over two classes: active under the mass gate only.
  Tensor p({1, 3});
  p(0, 0) = 0.35;
  p(0, 1) = 0.25;
  p(0, 2) = 0.4;
  EXPECT_EQ(extract_segments(p, 0.4, spans(1, 4), ActivityGate::non_background_mass).size(), 1u);
  EXPECT_TRUE(extract_segments(p, 0.4, spans(1, 4), ActivityGate::max_class).empty());
}

TEST(ExtractSegments, Idempotent) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::pair<int, double>> spec;
    for (int i = 0; i < 12; ++i)
      spec.push_back(uniform01(rng) < 0.3 ? std::pair{-1, 0.0}
                                          : std::pair{static_cast<int>(uniform_index(rng, 3)), uniform(rng, 0.5, 1.0)});
    const auto frames = spans(12, 4);
    const auto s = extract_segments(rows(spec, 4), 0.4, frames);
    const auto again = extract_segments(segments_to_probabilities(s, 3, frames), 0.4, frames);
    ASSERT_EQ(again.size(), s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_EQ(again[i].start, s[i].start);
      EXPECT_EQ(again[i].end, s[i].end);
      EXPECT_EQ(again[i].label, s[i].label);
      EXPECT_NEAR(again[i].score, s[i].score, 1e-12);
    }
  }
}

TEST(ExtractSegments, MalformedInputs) {
  Tensor p = rows({{0, 0.5}, {-1, 0}}, 3);
  p(1, 2) = 0.9;
  EXPECT_THROW(extract_segments(p, 0.4, spans(2, 4)), DataError);
  p(1, 2) = 1.0;
  p(0, 0) = -0.1;
  p(0, 2) = 0.6;
  EXPECT_THROW(extract_segments(p, 0.4, spans(2, 4)), DataError);
  const Tensor ok = rows({{0, 0.5}}, 3);
  EXPECT_THROW(extract_segments(ok, 1.0, spans(1, 4)), ConfigError);
  EXPECT_THROW(extract_segments(ok, 0.0, spans(1, 4)), ConfigError);
  EXPECT_THROW(extract_segments(ok, 0.4, spans(2, 4)), ShapeError);
}

TEST(MergeWindows, OverlapsAverageAndGapsAreBackground) {
  WindowProbabilities a{0, rows({{0, 0.8}, {0, 0.6}}, 3)}, b{1, rows({{1, 0.4}, {1, 0.9}}, 3)};
  const Tensor m = merge_windows(std::vector<WindowProbabilities>{a, b}, 4);
  EXPECT_NEAR(m(0, 0), 0.8, 1e-15);
  EXPECT_NEAR(m(1, 0), 0.3, 1e-15);
  EXPECT_NEAR(m(1, 1), 0.2, 1e-15);
  EXPECT_NEAR(m(1, 2), 0.5, 1e-15);
  EXPECT_EQ(m(3, 2), 1.0);
  EXPECT_THROW(merge_windows(std::vector<WindowProbabilities>{b}, 2), ShapeError);
}

TEST(ClipStarts, EvenlySpaced) {
  EXPECT_EQ(clip_starts(10, 4, 3), (std::vector<std::size_t>{0, 3, 6}));
  EXPECT_EQ(clip_starts(10, 4, 1), (std::vector<std::size_t>{3}));
  EXPECT_EQ(clip_starts(4, 4, 5), (std::vector<std::size_t>(5, 0)));
  EXPECT_THROW(clip_starts(3, 4, 1), DataError);
}

TEST(ClassifyVideo, ProtocolProperties) {
  Rng rng(5);
  const EncoderConfig cfg{6, 4, 1};
  VectorEncoder enc(3, 4, cfg, rng);
  ClassifyHead head(6, 5, rng);
  const Tensor video = random_tensor({12, 4}, rng);

  const auto one = classify_video(video, enc, head, 3, 1);
  const auto direct = softmax_row(head.logits(enc.encode_clip(slice_leading(video, 4, 3))).storage());
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(one[c], direct[c], 1e-15);

  double s = 0.0;
  for (double p : classify_video(video, enc, head, 3, 5)) s += p;
  EXPECT_NEAR(s, 1.0, 1e-12);

  Tensor constant({12, 4});
  for (std::size_t t = 0; t < 12; ++t)
    for (std::size_t d = 0; d < 4; ++d) constant(t, d) = 0.3 * static_cast<double>(d);
  const auto c1 = classify_video(constant, enc, head, 3, 1), c5 = classify_video(constant, enc, head, 3, 5);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(c1[c], c5[c], 1e-15);
}

TEST(ClassifyVideo, ClassPermutationEquivariance) {
  Rng rng(6);
  VectorEncoder enc(3, 4, EncoderConfig{6, 4, 1}, rng);
  ClassifyHead head(6, 4, rng);
  ClassifyHead permuted(6, 4, rng);
  const std::size_t perm[] = {2, 0, 3, 1};
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 6; ++i)
      permuted.linear().weight.mutable_value()(c, i) = head.linear().weight.value()(perm[c], i);
    permuted.linear().bias.mutable_value()[c] = head.linear().bias.value()[perm[c]];
  }
  const Tensor video = random_tensor({9, 4}, rng);
  const auto p = classify_video(video, enc, head, 3, 3), q = classify_video(video, enc, permuted, 3, 3);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(q[c], p[perm[c]], 1e-15);
}

TEST(Fusion, MeanOfDistributions) {
  const auto f = fuse_distributions({{0.2, 0.8}, {0.6, 0.4}});
  EXPECT_NEAR(f[0], 0.4, 1e-15);
  EXPECT_EQ(argmax(f), 1);
  const std::vector<int> truth{0, 1, 1}, pred{0, 0, 1};
  EXPECT_NEAR(accuracy(truth, pred), 2.0 / 3.0, 1e-15);
  const auto m = confusion_matrix(truth, pred, 2);
  EXPECT_EQ(m[1][0], 1u);
  EXPECT_EQ(m[1][1], 1u);
}

TEST(GradientOracle, QuadraticIsExact) {
  Var x = Var::parameter(Tensor({3}, std::vector<double>{0.5, -1.0, 2.0}));
  nn::ParameterList params{{"x", x}};
  // f = sum 3 x^2 + x: central differences are exact up to rounding
  const auto r = finite_difference_check(
      [&] { return ag::sum_all(ag::add(ag::scale(ag::mul(x, x), 3.0), x)); }, params);
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.coordinates, 3u);
}

TEST(GradientOracle, DetachedSenderHasExactlyZeroAnalyticGradient) {
  Var u = Var::parameter(Tensor({1, 3}, std::vector<double>{1.0, 0.5, -0.2}));
  Var v = Var::parameter(Tensor({1, 3}, std::vector<double>{0.3, -0.4, 0.9}));
  std::vector<ModalityOutputs> outs{{u, u}, {v, v}};
  auto message_to_1 = [&] {
    const Var M = message_tensor(outs, 10.0, 5.0);
    Tensor mask({2, 2});
    mask(0, 1) = 1.0;
    return ag::sum_all(ag::mul_broadcast(M, mask));
  };
  nn::ParameterList sender{{"u", u}}, receiver{{"v", v}};
  nn::zero_grad(sender);
  ag::backward(message_to_1());
  for (double g : u.grad().values()) EXPECT_EQ(g, 0.0);
  EXPECT_LT(finite_difference_check(message_to_1, receiver).max_rel_error, 1e-6);
  // Numerically the message does depend on the sender, so the oracle flags the detached path.
  EXPECT_GT(finite_difference_check(message_to_1, sender).max_rel_error, 0.5);
}

TEST(Oracles, NearestCentroidOnSeparableData) {
  auto spec = gdist::testing::small_spec();
  for (auto& m : spec.modalities) m.noise_sigma = 0.0;
  const auto corpus = generate_classification_corpus(spec, 2);
  const auto r = nearest_centroid(corpus.train, corpus.train, 2, spec.num_classes);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  ASSERT_EQ(r.per_class.size(), 8u);
  EXPECT_THROW(nearest_centroid({}, corpus.test, 0, 8), DataError);
}
