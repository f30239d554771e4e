#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "latentedit/edit.hpp"
#include "latentedit/errors.hpp"
#include "latentedit/trainer.hpp"
#include "test_util.hpp"

using namespace latentedit;
using latentedit::testing::central_difference;
using latentedit::testing::relative_error;

namespace {

SceneDataset small_scene(std::uint64_t seed = 0, int views = 3) {
  SceneSpec spec;
  spec.views = views;
  spec.rows = 8;
  spec.cols = 8;
  return synth_scene(spec, seed);
}

TrainConfig small_config(std::uint64_t seed = 0) {
  TrainConfig cfg;
  cfg.architecture = {2, 1, 16, 2};
  cfg.adapter_channels = 2;
  cfg.render.samples_per_ray = 16;
  cfg.render.stratified = true;
  cfg.render.adapter_tile = 4;
  cfg.patch_size = 4;
  cfg.proxy_points = 8;
  cfg.seed = seed;
  return cfg;
}

// Random biases everywhere and a random adapter, so every path carries
// gradient; a non-zero camera residual exercises the preconditioned chain.
TrainingState randomized_state(const SceneDataset& scene, const TrainConfig& cfg, std::uint64_t seed) {
  TrainingState st = init_training(scene, cfg);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (const auto& l : st.field.layout()) {
    for (int k = 0; k < l.out; ++k) st.field.params[static_cast<Eigen::Index>(l.bias_offset) + k] = u(rng);
  }
  for (Eigen::Index i = 0; i < st.adapter.params.size(); ++i) st.adapter.params[i] = 0.6 * u(rng);
  for (auto& cam : st.cameras) {
    for (int k = 0; k < kCameraParamCount; ++k) cam.delta_phi(k) = 0.02 * u(rng);
  }
  return st;
}

// The network is piecewise linear, so finite-difference steps stay small
// enough not to cross ReLU kinks.
constexpr LossWeights kAllTerms{0.8, 0.1, 0.1};

}  // namespace

TEST(Gradients, FieldMatchesFiniteDifferences) {
  for (std::uint64_t k = 0; k < 3; ++k) {
    const SceneDataset scene = small_scene(k);
    const TrainConfig cfg = small_config(k);
    const TrainingState st = randomized_state(scene, cfg, 10 + k);
    const TrainBatch batch = make_batch(scene, static_cast<int>(k % 3), 2, 4, 4, 4);
    const LossGradients g = compute_gradients(st, scene, batch, kAllTerms, cfg, 77, false);
    auto f = [&](const Eigen::VectorXd& p) {
      TrainingState t = st;
      t.field.params = p;
      return compute_gradients(t, scene, batch, kAllTerms, cfg, 77, false).report.total;
    };
    EXPECT_LT(relative_error(g.field, central_difference(f, st.field.params, 1e-6)), 1e-4) << "configuration " << k;
  }
}

TEST(Gradients, AdapterMatchesFiniteDifferences) {
  for (std::uint64_t k = 0; k < 3; ++k) {
    const SceneDataset scene = small_scene(k);
    const TrainConfig cfg = small_config(k);
    const TrainingState st = randomized_state(scene, cfg, 20 + k);
    const TrainBatch batch = make_batch(scene, 1, 4, 0, 4, 4);
    const LossGradients g = compute_gradients(st, scene, batch, kAllTerms, cfg, 5, false);
    auto f = [&](const Eigen::VectorXd& p) {
      TrainingState t = st;
      t.adapter.params = p;
      return compute_gradients(t, scene, batch, kAllTerms, cfg, 5, false).report.total;
    };
    EXPECT_LT(relative_error(g.adapter, central_difference(f, st.adapter.params, 1e-4)), 1e-4)
        << "configuration " << k;
  }
}

TEST(Gradients, CameraResidualsMatchFiniteDifferences) {
  for (std::uint64_t k = 0; k < 3; ++k) {
    const SceneDataset scene = small_scene(k);
    const TrainConfig cfg = small_config(k);
    const TrainingState st = randomized_state(scene, cfg, 30 + k);
    const int view = static_cast<int>(k);
    const TrainBatch batch = make_batch(scene, view, 2, 2, 4, 4);
    const LossGradients g = compute_gradients(st, scene, batch, kAllTerms, cfg, 9, true);
    for (std::size_t c = 0; c < st.cameras.size(); ++c) {
      auto f = [&](const Eigen::VectorXd& dphi) {
        TrainingState t = st;
        t.cameras[c].delta_phi = dphi;
        return compute_gradients(t, scene, batch, kAllTerms, cfg, 9, false).report.total;
      };
      const Eigen::VectorXd analytic = g.cameras[c];
      const Eigen::VectorXd x = st.cameras[c].delta_phi;
      EXPECT_LT(relative_error(analytic, central_difference(f, x, 1e-7)), 1e-4)
          << "configuration " << k << " camera " << c << (static_cast<int>(c) == view ? " (batch view)" : "");
    }
  }
}

TEST(TrainStep, InactiveTermsLeaveAdapterAndCamerasBitIdentical) {
  const SceneDataset scene = small_scene();
  const TrainConfig cfg = small_config();
  TrainingState st = randomized_state(scene, cfg, 1);
  const TrainingState before = st;
  for (std::int64_t s = 0; s < 5; ++s) train_step(st, scene, sample_batch(scene, cfg, s), {1.0, 0.0, 0.0}, cfg);
  EXPECT_EQ(st.adapter, before.adapter);
  EXPECT_EQ(st.cameras, before.cameras);
  EXPECT_EQ(st.adapter_optimizer.steps, 0);
  EXPECT_NE(st.field.params, before.field.params);
  EXPECT_EQ(st.field.step_count, 5);
}

TEST(TrainStep, ActiveTermsMoveAdapterAndCameras) {
  const SceneDataset scene = small_scene();
  const TrainConfig cfg = small_config();
  TrainingState st = randomized_state(scene, cfg, 2);
  const TrainingState before = st;
  train_step(st, scene, make_batch(scene, 0, 0, 0, 4, 4), kAllTerms, cfg);
  EXPECT_NE(st.adapter.params, before.adapter.params);
  EXPECT_NE(st.cameras[0].delta_phi, before.cameras[0].delta_phi);
}

TEST(TrainStep, NonFiniteLossLeavesStateUntouched) {
  const SceneDataset scene = small_scene();
  const TrainConfig cfg = small_config();
  TrainingState st = randomized_state(scene, cfg, 3);
  const TrainingState before = st;
  TrainBatch batch = make_batch(scene, 0, 0, 0, 4, 4);
  batch.target.at(1, 1, 2) = std::nan("");
  EXPECT_THROW(train_step(st, scene, batch, kAllTerms, cfg), NonFiniteError);
  EXPECT_TRUE(st == before);
}

TEST(TrainStep, FixedSeedIsDeterministic) {
  const SceneDataset scene = small_scene();
  const TrainConfig cfg = small_config(4);
  TrainingState a = init_training(scene, cfg), b = init_training(scene, cfg);
  const PhaseSchedule sched = init_phase_schedule(30);
  train(a, scene, sched, cfg);
  train(b, scene, sched, cfg);
  EXPECT_TRUE(a == b);
}

TEST(TrainStep, ReconstructionLossDecreases) {
  const SceneDataset scene = small_scene();
  TrainConfig cfg = small_config();
  cfg.architecture = {4, 1, 32, 3};
  RenderConfig eval = cfg.render;
  eval.stratified = false;
  TrainingState st = init_training(scene, cfg);
  const double before = render_rms_error(st, scene, eval, false);
  train(st, scene, PhaseSchedule({{0, 300, {1.0, 0.0, 0.0}, "fit"}}), cfg);
  EXPECT_LT(render_rms_error(st, scene, eval, false), 0.7 * before);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const SceneDataset scene = small_scene();
  const TrainConfig cfg = small_config(6);
  const PhaseSchedule sched = init_phase_schedule(40);
  TrainingState straight = init_training(scene, cfg);
  train(straight, scene, sched, cfg);

  TrainingState first = init_training(scene, cfg);
  train(first, scene, PhaseSchedule({sched.phases()[0], {sched.phases()[1].begin, 25, sched.phases()[1].weights, ""}}),
        cfg);
  const auto dir = std::filesystem::temp_directory_path() / "latentedit_test_resume";
  std::filesystem::remove_all(dir);
  save_checkpoint(first, dir);
  TrainingState resumed = load_checkpoint(dir, cfg);
  EXPECT_TRUE(resumed == first);
  train(resumed, scene, sched, cfg);
  EXPECT_TRUE(resumed == straight);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, MissingDirectoryIsFormatError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/latentedit_checkpoint", small_config()), FormatError);
}

TEST(PhaseSchedules, InitialisationBoundaryScales) {
  const PhaseSchedule full = init_phase_schedule(30000);
  ASSERT_EQ(full.phases().size(), 2u);
  EXPECT_EQ(full.phases()[0].end, 2500);
  EXPECT_EQ(full.at(2499).weights, (LossWeights{0.80, 0.1, 0.1}));
  EXPECT_EQ(full.at(2500).weights, (LossWeights{0.75, 0.0, 0.25}));
  const PhaseSchedule short_run = init_phase_schedule(2000);
  EXPECT_EQ(short_run.phases()[0].end, 167);
  EXPECT_EQ(short_run.total_steps(), 2000);
}

TEST(PhaseSchedules, EditingWarmPhase) {
  const PhaseSchedule s = edit_phase_schedule(2000);
  EXPECT_EQ(s.at(0).weights, (LossWeights{0.90, 0.1, 0.0}));
  EXPECT_EQ(s.at(399).weights, (LossWeights{0.90, 0.1, 0.0}));
  EXPECT_EQ(s.at(400).weights, (LossWeights{1.0, 0.0, 0.0}));
  EXPECT_EQ(edit_phase_schedule(100).phases().size(), 1u);
  EXPECT_THROW(s.at(2000), ValidationError);
}

TEST(PhaseSchedules, GapsAndNegativeWeightsAreConfigErrors) {
  EXPECT_THROW(PhaseSchedule({{0, 10, {}, "a"}, {11, 20, {}, "b"}}), ConfigError);
  EXPECT_THROW(PhaseSchedule({{1, 10, {}, "a"}}), ConfigError);
  EXPECT_THROW(PhaseSchedule({{0, 10, {1.0, -0.1, 0.0}, "a"}}), ConfigError);
}

TEST(TrainConfig, PatchMustMatchAdapterTile) {
  TrainConfig cfg = small_config();
  cfg.patch_size = 8;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(SampleBatch, DeterministicAndInsideGrid) {
  const SceneDataset scene = small_scene();
  const TrainConfig cfg = small_config(3);
  for (std::int64_t s = 0; s < 50; ++s) {
    const TrainBatch a = sample_batch(scene, cfg, s), b = sample_batch(scene, cfg, s);
    EXPECT_EQ(a.view, b.view);
    EXPECT_EQ(a.row0, b.row0);
    EXPECT_EQ(a.col0, b.col0);
    EXPECT_EQ(a.row0 % 4, 0);
    EXPECT_EQ(a.col0 % 4, 0);
    EXPECT_EQ(a.pixels.size(), 16u);
  }
}

// Slow: default architecture and optimiser on a 4-view box scene.
TEST(TrainStep, BoxSceneConvergesWithDefaults) {
  SceneSpec spec;
  spec.views = 4;
  spec.rows = spec.cols = 16;
  const SceneDataset scene = synth_scene(spec, 0);
  const TrainConfig cfg;
  TrainingState st = init_training(scene, cfg);
  train(st, scene, init_phase_schedule(2000), cfg);
  RenderConfig eval = cfg.render;
  eval.stratified = false;
  EXPECT_LT(render_rms_error(st, scene, eval, false), 0.05);
}
