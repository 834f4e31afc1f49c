#include <gtest/gtest.h>

#include "gdist/training.hpp"
#include "helpers.hpp"

using namespace gdist;
using gdist::testing::random_tensor;
using gdist::testing::small_spec;

namespace {

TrainSchedule quick_schedule(std::size_t epochs, std::size_t stage1) {
  TrainSchedule s;
  s.total_epochs = epochs;
  s.stage1_epochs = stage1;
  s.batch_size = 4;
  s.visual_lr = 0.05;
  s.graph_lr = 0.01;
  s.seed = 5;
  return s;
}

SamplerConfig quick_sampler() {
  SamplerConfig s;
  s.clip_length = 3;
  s.window_clips = 3;
  s.test_clips = 2;
  return s;
}

EncoderConfig tiny() { return {6, 4, 1}; }

StrategyConfig strategy(StrategyKind kind) {
  StrategyConfig s;
  s.kind = kind;
  s.distill.latent_dim = 4;
  return s;
}

std::vector<Tensor> values_of(const nn::ParameterList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.var.value());
  return out;
}

}  // namespace

TEST(Sampling, ClipOfFullLengthStartsAtZero) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_clip_start(7, 7, rng), 0u);
  EXPECT_THROW(sample_clip_start(3, 4, rng), DataError);
  const std::vector<Tensor> video{random_tensor({5, 2}, rng), random_tensor({5, 3, 3, 1}, rng)};
  const auto clip = sample_clip(video, 5, rng);
  EXPECT_EQ(clip[0], video[0]);
  EXPECT_EQ(clip[1], video[1]);
}

TEST(Sampling, ClipStartsAreUniform) {
  Rng rng(2);
  const std::size_t length = 30, T = 5, n = 10000, bins = length - T + 1;
  std::vector<double> count(bins, 0.0);
  for (std::size_t i = 0; i < n; ++i) ++count[sample_clip_start(length, T, rng)];
  const double expected = static_cast<double>(n) / static_cast<double>(bins);
  double chi2 = 0.0;
  for (double c : count) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 52.6);  // 25 degrees of freedom, p = 0.001
}

TEST(Sampling, AlignedClipsShareStart) {
  Rng rng(3);
  Tensor a({20, 1}), b({20, 2});
  for (std::size_t t = 0; t < 20; ++t) {
    a(t, 0) = static_cast<double>(t);
    b(t, 0) = b(t, 1) = static_cast<double>(t);
  }
  for (int i = 0; i < 50; ++i) {
    const auto clip = sample_clip({a, b}, 4, rng);
    EXPECT_EQ(clip[0](0, 0), clip[1](0, 1));
  }
}

TEST(ClipLabel, MajorityWithTieRules) {
  const std::vector<int> labels{0, 0, 8, 8, 3, 3, 1, 1, 2, 2, 2};
  EXPECT_EQ(clip_label(labels, 0, 4, 8), 8);   // tie with background
  EXPECT_EQ(clip_label(labels, 4, 4, 8), 1);   // tie between classes: lower index
  EXPECT_EQ(clip_label(labels, 7, 4, 8), 2);   // plain majority
  EXPECT_EQ(clip_label(labels, 1, 3, 8), 8);
}

TEST(Windows, InsideSegmentAllBackgroundAndRecount) {
  auto spec = small_spec();
  spec.clip_length = 2;
  const auto corpus = generate_detection_corpus(spec, 11);
  SamplerConfig s;
  s.clip_length = 2;
  s.window_clips = 3;  // span 6 == segment_min
  const std::vector<std::size_t> mods{0, 2};
  const int bg = static_cast<int>(spec.num_classes);
  for (const auto& v : corpus.train) {
    const auto labels = v.frame_labels(spec.num_classes);
    for (const auto& seg : v.segments) {
      const auto w = window_at(v, labels, seg.start, s, bg, mods);
      for (int y : w.labels) EXPECT_EQ(y, seg.label);
      ASSERT_EQ(w.clips.size(), 2u);
      EXPECT_EQ(w.clips[0].shape(), (Shape{3, 2, 4, 4, 1}));
      EXPECT_EQ(w.clips[1].shape(), (Shape{3, 2, 6}));
    }
    // Independent recount for every start.
    for (std::size_t start = 0; start + s.window_span() <= v.length(); ++start) {
      const auto w = window_at(v, labels, start, s, bg, mods);
      for (std::size_t t = 0; t < 3; ++t) {
        std::vector<int> count(spec.num_classes + 1, 0);
        for (std::size_t f = start + 2 * t; f < start + 2 * t + 2; ++f) ++count[static_cast<std::size_t>(labels[f])];
        int best = bg;
        for (std::size_t c = 0; c < spec.num_classes; ++c)
          if (count[c] > count[static_cast<std::size_t>(best)] ||
              (count[c] == count[static_cast<std::size_t>(best)] && best != bg && static_cast<int>(c) < best))
            best = static_cast<int>(c);
        ASSERT_EQ(w.labels[t], best) << start << "," << t;
      }
    }
  }
  spec.segments_per_video = 0;
  const auto empty = generate_detection_corpus(spec, 12);
  Rng rng(13);
  const auto w = sample_window(empty.train[0], spec.num_classes, s, rng, mods);
  for (int y : w.labels) EXPECT_EQ(y, bg);
}

TEST(ClassWeights, InverseFrequencyWithMeanOne) {
  std::vector<int> labels(90, 0);
  labels.insert(labels.end(), 10, 1);
  const auto w = class_weights(labels, 2);
  EXPECT_NEAR(w[0], 0.2, 1e-12);
  EXPECT_NEAR(w[1], 1.8, 1e-12);
  const std::vector<int> balanced{0, 1, 2, 0, 1, 2};
  for (double v : class_weights(balanced, 3)) EXPECT_NEAR(v, 1.0, 1e-12);
  EXPECT_THROW(class_weights(std::vector<int>{}, 3), DataError);
  EXPECT_THROW(class_weights(std::vector<int>{0, 3}, 3), DataError);
  const auto absent = class_weights(std::vector<int>{0, 0, 2}, 3);
  EXPECT_EQ(absent[1], 0.0);
}

TEST(Curriculum, ModePerEpoch) {
  EXPECT_EQ(detail::graph_mode_for(StrategyKind::learned, 0, 2), GraphMode::uniform);
  EXPECT_EQ(detail::graph_mode_for(StrategyKind::learned, 2, 2), GraphMode::learned);
  EXPECT_EQ(detail::graph_mode_for(StrategyKind::prior, 3, 2), GraphMode::prior_only);
  EXPECT_EQ(detail::graph_mode_for(StrategyKind::uniform, 9, 2), GraphMode::uniform);
  EXPECT_EQ(detail::graph_mode_for(StrategyKind::kd, 0, 2), GraphMode::empty);
}

TEST(Schedule, Validation) {
  auto s = quick_schedule(3, 4);
  EXPECT_THROW(s.validate(), ConfigError);
  s = quick_schedule(3, 1);
  s.visual_lr = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_EQ(quick_schedule(8, 4).resolved_milestones(), (std::vector<std::size_t>{5, 7}));
  SamplerConfig bad;
  bad.gamma = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ClassificationTraining, EmptyGraphMatchesSingleModalityRuns) {
  const auto corpus = generate_classification_corpus(small_spec(), 21);
  const auto sched = quick_schedule(2, 1);
  const auto joint = train_classification(corpus, {"rgb", "skel"}, strategy(StrategyKind::empty), sched,
                                          quick_sampler(), tiny());
  for (const std::string m : {"rgb", "skel"}) {
    const auto alone = train_classification(corpus, {m}, strategy(StrategyKind::empty), sched, quick_sampler(), tiny());
    EXPECT_EQ(joint.test.accuracy.at(m), alone.test.accuracy.at(m)) << m;
    const auto a = values_of(joint.model.encoders[joint.model.slot(m)]->parameters());
    const auto b = values_of(alone.model.encoders[0]->parameters());
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << m << " parameter " << i;
  }
}

TEST(ClassificationTraining, GraphFrozenWhileStageOneLasts) {
  const auto corpus = generate_classification_corpus(small_spec(), 22);
  const auto sched = quick_schedule(2, 2);
  const auto run =
      train_classification(corpus, {"rgb", "depth", "flow"}, strategy(StrategyKind::learned), sched, quick_sampler(), tiny());
  Rng gr = make_rng(sched.seed, "graph");
  DistillationGraph fresh(3, tiny().feature_dim, 8, strategy(StrategyKind::learned).distill, gr);
  const auto a = values_of(run.graph.params().parameters()), b = values_of(fresh.params().parameters());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_TRUE(run.prior.empty());
}

TEST(ClassificationTraining, CurriculumFlipsAtStageOne) {
  const auto corpus = generate_classification_corpus(small_spec(), 23);
  const auto sched = quick_schedule(3, 1);
  const auto run =
      train_classification(corpus, {"rgb", "depth", "flow"}, strategy(StrategyKind::learned), sched, quick_sampler(), tiny());
  std::vector<std::string> modes;
  bool prior_seen = false;
  for (const auto& rec : run.metrics) {
    if (rec.value("event", "") == "prior") {
      prior_seen = true;
      EXPECT_EQ(modes.size(), 1u);  // computed after the first epoch
      double s = 0.0;
      for (double c : rec.at("c")) s += c;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    if (rec.value("split", "") == "train") modes.push_back(rec.at("graph_mode"));
  }
  EXPECT_TRUE(prior_seen);
  EXPECT_EQ(modes, (std::vector<std::string>{"uniform", "learned", "learned"}));
  ASSERT_EQ(run.prior.size(), 3u);
  Rng gr = make_rng(sched.seed, "graph");
  DistillationGraph fresh(3, tiny().feature_dim, 8, strategy(StrategyKind::learned).distill, gr);
  EXPECT_NE(run.graph.params().parameters().back().var.value(), fresh.params().parameters().back().var.value());
  ASSERT_EQ(run.class_graph.size(), 8u);
  EXPECT_EQ(run.class_graph[0].size(), 9u);
}

TEST(ClassificationTraining, SameSeedSameMetrics) {
  const auto corpus = generate_classification_corpus(small_spec(), 24);
  for (auto kind : {StrategyKind::learned, StrategyKind::kd, StrategyKind::cross_modal, StrategyKind::multitask}) {
    const auto a = train_classification(corpus, {"rgb", "skel"}, strategy(kind), quick_schedule(2, 1), quick_sampler(), tiny());
    const auto b = train_classification(corpus, {"rgb", "skel"}, strategy(kind), quick_schedule(2, 1), quick_sampler(), tiny());
    EXPECT_EQ(nlohmann::json(a.metrics).dump(), nlohmann::json(b.metrics).dump());
    for (double l : a.epoch_loss) EXPECT_TRUE(std::isfinite(l));
  }
}

TEST(ClassificationTraining, RejectsBadInputs) {
  const auto corpus = generate_classification_corpus(small_spec(), 25);
  EXPECT_THROW(train_classification(corpus, {"rgb", "audio"}, strategy(StrategyKind::empty), quick_schedule(1, 0),
                                    quick_sampler(), tiny()),
               ConfigError);
  EXPECT_THROW(train_classification(corpus, {"rgb"}, strategy(StrategyKind::learned), quick_schedule(1, 0),
                                    quick_sampler(), tiny()),
               ConfigError);
}

TEST(ClassificationTraining, CheckpointsRestoreTheSamePredictions) {
  const auto corpus = generate_classification_corpus(small_spec(), 26);
  const auto run = train_classification(corpus, {"rgb", "flow"}, strategy(StrategyKind::uniform), quick_schedule(1, 0),
                                        quick_sampler(), tiny());
  const auto restored = restore_classification_model(run.model.checkpoints({}), corpus.spec, quick_sampler().clip_length);
  EXPECT_EQ(classification_accuracy(restored, corpus.test, 2), classification_accuracy(run.model, corpus.test, 2));
}

TEST(Transfer, MissingModalityIsTransferError) {
  const auto corpus = generate_classification_corpus(small_spec(), 27);
  const auto run = train_classification(corpus, {"rgb"}, strategy(StrategyKind::empty), quick_schedule(1, 0),
                                        quick_sampler(), tiny());
  std::map<std::string, Checkpoint> source;
  for (auto& ck : run.model.checkpoints({})) source.emplace(ck.modality, ck);
  EXPECT_THROW(transfer_encoders(source, {"rgb", "depth"}), TransferError);
  const auto enc = transfer_encoders(source, {"rgb"});
  Rng rng(1);
  const Tensor clip = random_tensor({3, 4, 4, 1}, rng);
  EXPECT_EQ(enc[0]->encode_clip(clip), run.model.encoders[0]->encode_clip(clip));
}

TEST(Transfer, InitializationThenFineTuning) {
  const auto spec = small_spec();
  const auto cls = generate_classification_corpus(spec, 28);
  const auto det = generate_detection_corpus(spec, 29);
  const auto src = train_classification(cls, {"rgb", "skel"}, strategy(StrategyKind::empty), quick_schedule(1, 0),
                                        quick_sampler(), tiny());
  std::map<std::string, Checkpoint> source;
  for (auto& ck : src.model.checkpoints({})) source.emplace(ck.modality, ck);
  Rng rng(2);
  const Tensor clip = random_tensor({3, 4, 4, 1}, rng);

  // A vanishing visual rate leaves the transferred weights in place.
  auto frozen = quick_schedule(1, 0);
  frozen.visual_lr = 1e-300;
  frozen.steps_per_epoch = 2;
  const auto kept = train_detection(det, {"rgb", "skel"}, strategy(StrategyKind::empty), frozen, quick_sampler(), tiny(), &source);
  EXPECT_EQ(kept.model.encoders[0]->encode_clip(clip), src.model.encoders[0]->encode_clip(clip));

  auto tuned_sched = quick_schedule(1, 0);
  tuned_sched.steps_per_epoch = 2;
  const auto tuned =
      train_detection(det, {"rgb", "skel"}, strategy(StrategyKind::empty), tuned_sched, quick_sampler(), tiny(), &source);
  EXPECT_NE(tuned.model.encoders[0]->encode_clip(clip), src.model.encoders[0]->encode_clip(clip));

  auto wider = tiny();
  wider.conv_width = 5;
  EXPECT_THROW(train_detection(det, {"rgb"}, strategy(StrategyKind::empty), tuned_sched, quick_sampler(), wider, &source),
               TransferError);
}

TEST(DetectionTraining, LearnedCurriculumAndDeterminism) {
  const auto det = generate_detection_corpus(small_spec(), 30);
  auto sched = quick_schedule(2, 1);
  sched.steps_per_epoch = 2;
  const auto a = train_detection(det, {"rgb", "flow"}, strategy(StrategyKind::learned), sched, quick_sampler(), tiny());
  const auto b = train_detection(det, {"rgb", "flow"}, strategy(StrategyKind::learned), sched, quick_sampler(), tiny());
  EXPECT_EQ(nlohmann::json(a.metrics).dump(), nlohmann::json(b.metrics).dump());
  ASSERT_EQ(a.prior.size(), 2u);
  const auto probs = a.model.clip_probabilities(det.test[0], 0);
  EXPECT_EQ(probs.shape(), (Shape{clip_count(det.test[0].length(), quick_sampler()), 9}));
  const auto restored = restore_detection_model(a.model.checkpoints({}), det.spec, quick_sampler());
  EXPECT_EQ(restored.clip_probabilities(det.test[0], 1), a.model.clip_probabilities(det.test[0], 1));
}

TEST(Subsample, KeepsAtLeastOneVideo) {
  const auto det = generate_detection_corpus(small_spec(), 31);
  const auto one = subsample_training(det, 0.01, 1);
  EXPECT_EQ(one.train.size(), 1u);
  EXPECT_EQ(one.test.size(), det.test.size());
  EXPECT_EQ(subsample_training(det, 1.0, 1).train.size(), det.train.size());
  EXPECT_EQ(subsample_training(det, 0.5, 7).train, subsample_training(det, 0.5, 7).train);
  EXPECT_THROW(subsample_training(det, 0.0, 1), ConfigError);
}

TEST(Tiling, WindowsCoverEveryClip) {
  SamplerConfig s;
  s.clip_length = 3;
  s.window_clips = 4;
  EXPECT_EQ(clip_count(20, s), 6u);
  EXPECT_EQ(window_tiling(20, s), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(window_tiling(24, s), (std::vector<std::size_t>{0, 4}));
  EXPECT_THROW(window_tiling(11, s), DataError);
  s.window_step = 6;  // two clips
  EXPECT_EQ(window_tiling(20, s), (std::vector<std::size_t>{0, 2}));
}
