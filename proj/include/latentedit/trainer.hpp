#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "latentedit/adapter.hpp"
#include "latentedit/camera.hpp"
#include "latentedit/field.hpp"
#include "latentedit/optim.hpp"
#include "latentedit/scene.hpp"

namespace latentedit {

// Everything train_step mutates: field, adapter, camera residuals and their
// optimiser moments.
struct TrainingState {
  FieldState field;
  AdapterWeights adapter;
  std::vector<CameraParams> cameras;
  Adam field_optimizer;
  Adam adapter_optimizer;
  std::vector<Adam> camera_optimizers;

  bool operator==(const TrainingState& o) const;
};

struct TrainConfig {
  FieldArchitecture architecture;
  int adapter_channels = 0;  // 0 = default_adapter_channels()
  RenderConfig render{.samples_per_ray = 64, .stratified = true};
  // Each step renders one patch_size x patch_size tile of one view. Tiles are
  // aligned to the same grid render_view uses for the adapter.
  int patch_size = 16;
  AdamConfig field_optim{.lr = 1e-3};
  AdamConfig adapter_optim{.lr = 1e-3};
  AdamConfig camera_optim{.lr = 1e-4};
  int proxy_points = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

// Builds the initial training state: seeded field and adapter, cameras
// copied from the scene with preconditioners computed over proxy points
// sampled in the scene bounding box.
TrainingState init_training(const SceneDataset& scene, const TrainConfig& cfg);

struct TrainBatch {
  int view = 0;
  int row0 = 0;
  int col0 = 0;
  std::vector<PixelIndex> pixels;  // row-major over the tile
  LatentImage target;              // tile of the view's latent
};

// Deterministic tile choice for `step` given the config seed.
TrainBatch sample_batch(const SceneDataset& scene, const TrainConfig& cfg, std::int64_t step);
TrainBatch make_batch(const SceneDataset& scene, int view, int row0, int col0, int rows, int cols);

// The three loss components of the total training loss and their weighted
// sum. Nothing else is computed.
struct LossReport {
  double loss_r = 0.0;
  double loss_f = 0.0;
  double loss_reg = 0.0;
  double total = 0.0;
};

// One gradient step of lambda_r L_r + lambda_f L_f + lambda_p L_reg. The
// adapter is only evaluated and updated when lambda_f > 0; camera residuals
// only when lambda_p > 0. Throws NonFiniteError (leaving `state` untouched)
// when the loss, gradients or updated parameters are non-finite.
LossReport train_step(TrainingState& state, const SceneDataset& scene, const TrainBatch& batch, const LossWeights& w,
                      const TrainConfig& cfg);

// Gradients of the total loss without applying them (used by train_step
// and by the gradient checks).
struct LossGradients {
  LossReport report;
  Eigen::VectorXd field;
  Eigen::VectorXd adapter;
  std::vector<CameraVector> cameras;  // w.r.t. delta_phi
};
LossGradients compute_gradients(const TrainingState& state, const SceneDataset& scene, const TrainBatch& batch,
                                const LossWeights& w, const TrainConfig& cfg, std::uint64_t jitter_seed,
                                bool want_camera_grads);

struct Phase {
  std::int64_t begin = 0;
  std::int64_t end = 0;  // exclusive
  LossWeights weights;
  std::string name;
};

// Piecewise-constant loss weights over [0, total_steps).
class PhaseSchedule {
 public:
  PhaseSchedule() = default;
  explicit PhaseSchedule(std::vector<Phase> phases);

  const std::vector<Phase>& phases() const { return phases_; }
  std::int64_t total_steps() const { return phases_.empty() ? 0 : phases_.back().end; }
  const Phase& at(std::int64_t step) const;

 private:
  std::vector<Phase> phases_;
};

struct TrainLogEntry {
  std::int64_t step = 0;
  std::string phase;
  LossReport loss;
};

// Runs `schedule` from state.field.step_count to the schedule's end.
void train(TrainingState& state, const SceneDataset& scene, const PhaseSchedule& schedule, const TrainConfig& cfg,
           const std::function<void(const TrainLogEntry&)>& on_step = {});

// Per-pixel RMS of (render - latent) over all views and channels.
double render_rms_error(const TrainingState& state, const SceneDataset& scene, const RenderConfig& cfg,
                        bool use_adapter);

// Checkpoint directory: tensors in the binary container plus checkpoint.json.
void save_checkpoint(const TrainingState& state, const std::filesystem::path& dir);
TrainingState load_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg);

}  // namespace latentedit
