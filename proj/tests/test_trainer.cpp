#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "dalab/trainer.hpp"

using namespace dalab;

namespace {

GenConfig tiny_world() {
  GenConfig c;
  c.grid_size = 4;
  c.max_objects = 2;
  return c;
}

TrainSchedule tiny_schedule() {
  TrainSchedule s;
  s.pretrain_iterations = 30;
  s.pretrain_decay = {20};
  s.pretrain_batch = 4;
  s.adapt_iterations = 40;
  s.adapt_decay = {20};
  s.source_batch = 4;
  s.target_batch = 4;
  s.norm_images = 8;
  s.transferability.warmup = 5;
  return s;
}

struct Tiny {
  GenConfig world = tiny_world();
  Dataset source = generate_dataset(world, Domain::kSource, 24, 1);
  Dataset target = generate_dataset(world, Domain::kTarget, 24, 2).withheld();
  Dataset target_test = generate_dataset(world, Domain::kTarget, 12, 3, Split::kTest);
  TrainSchedule sched = tiny_schedule();
  Checkpoint pretrained = pretrain(sched, source, 7).checkpoint;
};

const Tiny& tiny() {
  static const Tiny t;
  return t;
}

ParamSet single(const std::string& name, Tensor t) {
  ParamSet p;
  p.add(name, std::move(t));
  return p;
}

Gradients grad_of(const std::string& name, Tensor t) {
  Gradients g;
  g.emplace(name, std::move(t));
  return g;
}

}  // namespace

TEST(Sgd, PlainStep) {
  ParamSet p = single("w", Tensor::scalar(1.0));
  OptState s = make_opt_state({0.1, {}, 0.1}, 0.0, 0.0);
  sgd_step(p, grad_of("w", Tensor::scalar(0.1)), s);
  EXPECT_DOUBLE_EQ(p.at("w")[0], 0.99);
  EXPECT_EQ(s.iteration, 1u);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  ParamSet p = single("w", Tensor({1, 3}, {1.0, -2.0, 3.0}));
  OptState s = make_opt_state({0.1, {}, 0.1}, 0.9, 0.0);
  sgd_step(p, grad_of("w", Tensor({1, 3})), s);
  EXPECT_EQ(p.at("w"), Tensor({1, 3}, {1.0, -2.0, 3.0}));
}

TEST(Sgd, MomentumRecurrence) {
  const double lr = 0.1, g = 0.3;
  ParamSet p = single("w", Tensor::scalar(0.0));
  OptState s = make_opt_state({lr, {}, 0.1}, 0.9, 0.0);
  sgd_step(p, grad_of("w", Tensor::scalar(g)), s);
  const double after_first = p.at("w")[0];
  sgd_step(p, grad_of("w", Tensor::scalar(g)), s);
  EXPECT_NEAR(after_first - p.at("w")[0], lr * (0.9 * g + g), 1e-15);
}

TEST(Sgd, WeightDecayEntersVelocity) {
  ParamSet p = single("w", Tensor::scalar(2.0));
  OptState s = make_opt_state({0.5, {}, 0.1}, 0.0, 0.1);
  sgd_step(p, grad_of("w", Tensor::scalar(0.0)), s);
  EXPECT_DOUBLE_EQ(p.at("w")[0], 2.0 - 0.5 * 0.2);
}

TEST(Sgd, NonFiniteGradientNamesParameter) {
  ParamSet p = single("dm.l1.w", Tensor::scalar(1.0));
  OptState s = make_opt_state({0.1, {}, 0.1});
  try {
    sgd_step(p, grad_of("dm.l1.w", Tensor::scalar(std::nan(""))), s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("dm.l1.w"), std::string::npos);
  }
  EXPECT_EQ(p.at("dm.l1.w")[0], 1.0);
}

TEST(Sgd, LearningRateFollowsSchedule) {
  ParamSet p = single("w", Tensor::scalar(0.0));
  OptState s = make_opt_state({0.001, {300}, 0.1});
  for (int i = 0; i < 300; ++i) {
    EXPECT_EQ(s.lr, 0.001);
    sgd_step(p, grad_of("w", Tensor::scalar(0.0)), s);
  }
  EXPECT_EQ(s.lr, 0.001 * 0.1);
}

TEST(Plateau, Examples) {
  EXPECT_TRUE(plateau_stop(std::vector<double>(100, 3.0)));
  EXPECT_FALSE(plateau_stop(std::vector<double>(99, 3.0)));
  std::vector<double> h(50, 1.0);
  h.insert(h.end(), 50, 0.9);
  EXPECT_FALSE(plateau_stop(h));
  std::vector<double> small(50, 1.0);
  small.insert(small.end(), 50, 0.995);
  EXPECT_TRUE(plateau_stop(small));
  EXPECT_TRUE(plateau_stop(std::vector<double>(10, 0.0), 5, 0.01));
}

TEST(Batches, SizesAndDeterminism) {
  const Tiny& t = tiny();
  MixedBatches a = make_batches(t.source, t.target, {16, 16}, 5);
  MixedBatches b = make_batches(t.source, t.target, {16, 16}, 5);
  for (int i = 0; i < 10; ++i) {
    const MixedBatch x = a.next(), y = b.next();
    EXPECT_EQ(x.source.size(), 16u);
    EXPECT_EQ(x.target.size(), 16u);
    EXPECT_EQ(x.source, y.source);
    EXPECT_EQ(x.target, y.target);
  }
}

TEST(Batches, EpochsAreWithoutReplacement) {
  EpochSampler s(24, 3);
  const auto first = s.next(24);
  EXPECT_EQ(std::set<std::size_t>(first.begin(), first.end()).size(), 24u);
  const auto second = s.next(24);
  EXPECT_EQ(std::set<std::size_t>(second.begin(), second.end()).size(), 24u);
  EXPECT_NE(first, second);
}

TEST(Batches, SmallSubsetIsCycled) {
  const Tiny& t = tiny();
  const Dataset three = t.target.subset({0, 1, 2});
  MixedBatches m = make_batches(t.source, three, {16, 16}, 1);
  const MixedBatch batch = m.next();
  std::vector<int> seen(3, 0);
  for (std::size_t i : batch.target) ++seen.at(i);
  for (int c : seen) EXPECT_GE(c, 5);
}

TEST(Batches, EmptyTargetIsRejected) {
  const Tiny& t = tiny();
  EXPECT_THROW(make_batches(t.source, t.target.subset({}), {16, 16}, 1), Error);
}

TEST(Pretrain, ZeroIterationsIsSeededInit) {
  TrainSchedule s = tiny_schedule();
  s.pretrain_iterations = 0;
  const Checkpoint ck = pretrain(s, tiny().source, 9).checkpoint;
  const ParamSet init = init_detector_params(DetectorShape::from(tiny_world()), 9);
  for (const auto& [name, t] : init) EXPECT_EQ(ck.params.at(name), t) << name;
}

TEST(Pretrain, SameSeedSameDigest) {
  const Tiny& t = tiny();
  EXPECT_EQ(pretrain(t.sched, t.source, 7).checkpoint.digest(), t.pretrained.digest());
  EXPECT_NE(pretrain(t.sched, t.source, 8).checkpoint.digest(), t.pretrained.digest());
}

TEST(Pretrain, DivergenceAborts) {
  TrainSchedule s = tiny_schedule();
  s.pretrain_lr = 1e4;
  s.pretrain_decay = {};
  try {
    pretrain(s, tiny().source, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
  }
}

TEST(Variant, ParseAndName) {
  for (const char* n : {"baseline", "M", "C", "WC", "M+C", "M+WC"}) {
    EXPECT_EQ(Variant::parse(n).name(), n);
  }
  EXPECT_THROW(Variant::parse("W"), Error);
  EXPECT_THROW(Variant::parse("m+wc"), Error);
}

TEST(JointAdapt, RequiresPretrainedCheckpoint) {
  const Tiny& t = tiny();
  const Checkpoint adapted =
      joint_adapt(t.pretrained, t.source, t.target, Variant::parse("M"), t.sched, 3).checkpoint;
  EXPECT_THROW(joint_adapt(adapted, t.source, t.target, Variant::parse("M"), t.sched, 3), Error);
}

TEST(JointAdapt, LearningRateDropsExactlyTenfoldAtDecay) {
  const Tiny& t = tiny();
  TrainSchedule s = t.sched;
  s.adapt_iterations = 320;
  s.adapt_decay = {300};
  s.plateau_enabled = false;
  const TrainResult r = joint_adapt(t.pretrained, t.source, t.target, Variant::parse("M+WC"), s, 3);
  ASSERT_EQ(r.log.size(), 320u);
  for (const LossRecord& rec : r.log) {
    EXPECT_EQ(rec.lr, rec.iteration < 300 ? s.adapt_lr : s.adapt_lr * 0.1) << rec.iteration;
  }
}

TEST(JointAdapt, NoAdversarialTermsEqualsFineTuneLoop) {
  const Tiny& t = tiny();
  TrainSchedule s = t.sched;
  s.plateau_enabled = false;
  const TrainResult r = joint_adapt(t.pretrained, t.source, t.target, Variant::parse("baseline"), s, 4);

  ParamSet p = t.pretrained.detector_params();
  OptState opt = make_opt_state({s.adapt_lr, s.adapt_decay, 0.1}, s.momentum, s.weight_decay);
  MixedBatches batches =
      make_batches(t.source, t.target, {s.source_batch, s.target_batch}, derive_seed(4, "adapt-batches"));
  const DetectorShape shape = DetectorShape::from(t.world);
  for (std::size_t it = 0; it < s.adapt_iterations; ++it) {
    const MixedBatch b = batches.next();
    const Tensor x = stack_cells(t.source, b.source);
    Graph g;
    const DetectorNodes d = backbone_and_heads(g, g.input("x"), shape.grid);
    const NodeId loss = detection_loss(g, d.probs, d.offsets, batch_targets(t.source, b.source),
                                       shape.num_classes, s.bg_weight);
    Feeds f;
    p.bind(f);
    f.bind("x", x);
    g.evaluate(f, loss);
    sgd_step(p, g.backward(Tensor::scalar(1.0)), opt);
  }
  for (const auto& [name, w] : p) EXPECT_EQ(r.checkpoint.params.at(name), w) << name;
}

TEST(JointAdapt, ZeroLambdaMatchesSourceFineTune) {
  const Tiny& t = tiny();
  TrainSchedule s = t.sched;
  s.plateau_enabled = false;
  s.lambda = 0.0;
  const ParamSet base =
      joint_adapt(t.pretrained, t.source, t.target, Variant::parse("baseline"), s, 4)
          .checkpoint.detector_params();
  for (const char* v : {"M", "C", "M+WC"}) {
    const ParamSet adapted =
        joint_adapt(t.pretrained, t.source, t.target, Variant::parse(v), s, 4).checkpoint.detector_params();
    for (const auto& [name, w] : base) EXPECT_EQ(adapted.at(name), w) << v << ' ' << name;
  }
}

TEST(JointAdapt, DeterministicAndLabelFree) {
  const Tiny& t = tiny();
  const TrainResult a = joint_adapt(t.pretrained, t.source, t.target, Variant::parse("M+WC"), t.sched, 5);
  const TrainResult b = joint_adapt(t.pretrained, t.source, t.target, Variant::parse("M+WC"), t.sched, 5);
  EXPECT_EQ(a.checkpoint.digest(), b.checkpoint.digest());
  EXPECT_EQ(a.target_label_reads, 0u);
  EXPECT_EQ(t.target.label_reads(), 0u);
  ASSERT_TRUE(a.checkpoint.transferability);
  EXPECT_EQ(a.log.back().s, a.checkpoint.transferability->weights);
}

TEST(JointAdapt, UnweightedVariantsKeepUnitWeights) {
  const Tiny& t = tiny();
  const TrainResult r = joint_adapt(t.pretrained, t.source, t.target, Variant::parse("M+C"), t.sched, 5);
  for (const LossRecord& rec : r.log) EXPECT_EQ(rec.s, (std::vector<double>{1, 1, 1}));
}

TEST(JointAdapt, PlateauOnlyAfterLastDecay) {
  const Tiny& t = tiny();
  TrainSchedule s = t.sched;
  s.adapt_iterations = 200;
  s.adapt_decay = {30};
  s.plateau_window = 5;
  s.plateau_rel_tol = 10.0;
  const TrainResult r = joint_adapt(t.pretrained, t.source, t.target, Variant::parse("M"), s, 5);
  EXPECT_TRUE(r.stopped_on_plateau);
  EXPECT_EQ(r.log.size(), 30u + 10u);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const Tiny& t = tiny();
  const Checkpoint ck =
      joint_adapt(t.pretrained, t.source, t.target, Variant::parse("M+WC"), t.sched, 6).checkpoint;
  const auto path = std::filesystem::temp_directory_path() / "dalab_trainer_roundtrip.ckpt";
  ck.save(path);
  const Checkpoint back = Checkpoint::load(path);
  EXPECT_EQ(back.serialize(), ck.serialize());
  std::filesystem::remove(path);
  EXPECT_THROW(Checkpoint::deserialize("DALABCK1"), Error);
  EXPECT_THROW(Checkpoint::deserialize("garbage!"), Error);
}

TEST(Checkpoint, StrippedHasNoAdaptationState) {
  const Tiny& t = tiny();
  const Checkpoint ck =
      joint_adapt(t.pretrained, t.source, t.target, Variant::parse("M+WC"), t.sched, 6).checkpoint;
  const Checkpoint s = ck.stripped();
  for (const auto& [name, w] : s.params) EXPECT_FALSE(is_adaptation_param(name)) << name;
  for (const auto& [name, v] : s.opt.velocity) EXPECT_FALSE(is_adaptation_param(name)) << name;
  EXPECT_FALSE(s.transferability);
  EXPECT_FALSE(s.input_norm);
  EXPECT_TRUE(std::any_of(ck.params.begin(), ck.params.end(),
                          [](const auto& kv) { return is_adaptation_param(kv.first); }));
}

TEST(Checkpoint, EvaluationIgnoresAdaptationParameters) {
  const Tiny& t = tiny();
  const Checkpoint ck =
      joint_adapt(t.pretrained, t.source, t.target, Variant::parse("M+WC"), t.sched, 6).checkpoint;
  const DetectionEval full = evaluate_detector(ck.params, t.target_test);
  const DetectionEval stripped = evaluate_detector(ck.stripped().params, t.target_test);
  EXPECT_EQ(full.report.map, stripped.report.map);
  EXPECT_EQ(full.report.ap, stripped.report.ap);
  ASSERT_EQ(full.detections.size(), stripped.detections.size());
  for (std::size_t i = 0; i < full.detections.size(); ++i) {
    ASSERT_EQ(full.detections[i].size(), stripped.detections[i].size());
    for (std::size_t j = 0; j < full.detections[i].size(); ++j) {
      EXPECT_EQ(full.detections[i][j].score, stripped.detections[i][j].score);
      EXPECT_EQ(full.detections[i][j].box, stripped.detections[i][j].box);
    }
  }
}

TEST(LossCurve, CsvColumns) {
  const std::string csv = loss_curve_csv({{0, 1.5, 0.7, 0.2, {1.0, 0.9, 1.1}, 0.001}}, 3);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "iteration,l_det,l_m,c,s_1,s_2,s_3,lr");
  EXPECT_NE(csv.find("\n0,1.5,0.69999999999999996,0.20000000000000001,1,0.90000000000000002,"
                     "1.1000000000000001,0.001"),
            std::string::npos);
}

// Full-size benchmark checks: the default schedule on the default generator.
class DefaultBenchmark : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const GenConfig world;
    source_ = new Dataset(generate_dataset(world, Domain::kSource, 2000, 11));
    source_test_ = new Dataset(generate_dataset(world, Domain::kSource, 500, 13, Split::kTest));
    pretrained_ = new Checkpoint(pretrain(TrainSchedule{}, *source_, 1).checkpoint);
  }
  static void TearDownTestSuite() {
    delete source_;
    delete source_test_;
    delete pretrained_;
  }
  static const Dataset* source_;
  static const Dataset* source_test_;
  static const Checkpoint* pretrained_;
};
const Dataset* DefaultBenchmark::source_ = nullptr;
const Dataset* DefaultBenchmark::source_test_ = nullptr;
const Checkpoint* DefaultBenchmark::pretrained_ = nullptr;

TEST_F(DefaultBenchmark, PretrainedSourceMapIsHigh) {
  EXPECT_GE(evaluate_detector(pretrained_->params, *source_test_).report.map, 0.85);
}

TEST_F(DefaultBenchmark, NoClassGapMarginalAdaptationClosesTheGap) {
  GenConfig world;
  world.class_gap = {0.0, 0.0, 0.0};
  const Dataset target = generate_dataset(world, Domain::kTarget, 1000, 12).withheld();
  const Dataset target_test = generate_dataset(world, Domain::kTarget, 500, 14, Split::kTest);
  const Checkpoint adapted =
      joint_adapt(*pretrained_, *source_, target, Variant::parse("M"), TrainSchedule{}, 2).checkpoint;
  const double src = evaluate_detector(adapted.params, *source_test_).report.map;
  const double tgt = evaluate_detector(adapted.params, target_test).report.map;
  EXPECT_LE(src - tgt, 0.02) << "source " << src << " target " << tgt;
}
