#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "latentedit/delta.hpp"
#include "latentedit/diffusion.hpp"
#include "latentedit/trainer.hpp"

namespace latentedit {

// edited where mask = 1, original elsewhere; the mask is shared by all four
// channels.
LatentImage blend_masked(const LatentImage& edited, const LatentImage& original, const Mask& mask);

// Splits a multi-attribute instruction on the word "and". A clause that
// starts with a determiner ("the cub white") borrows the first clause's
// leading verb ("Turn the cub white").
std::vector<std::string> split_prompt(const std::string& prompt);

// Initialisation weights: (0.80, 0.1, 0.1) for the first 2500 of 30000
// reference steps, then (0.75, 0, 0.25). The boundary scales with
// total_steps.
PhaseSchedule init_phase_schedule(std::int64_t total_steps, std::int64_t reference_steps = 30000,
                                  std::int64_t reference_boundary = 2500,
                                  const LossWeights& early = {0.80, 0.1, 0.1},
                                  const LossWeights& late = {0.75, 0.0, 0.25});
// Editing weights: (0.90, 0.1, 0) for the first `warm_steps`, then (1, 0, 0).
PhaseSchedule edit_phase_schedule(std::int64_t total_steps, std::int64_t warm_steps = 400,
                                  const LossWeights& warm = {0.90, 0.1, 0.0},
                                  const LossWeights& late = {1.0, 0.0, 0.0});

struct EditConfig {
  int editing_rate = 10;
  double mask_threshold = 0.45;
  GuidanceConfig guidance;
  std::int64_t edit_iterations = 2000;
  PhaseSchedule phase_schedule = edit_phase_schedule(2000);
  bool refresh_mask_each_edit = true;
  int denoise_steps = 20;
  // Masks for every view are computed and consolidated across views once,
  // before the first iteration, and reused at every dataset update.
  bool consolidate_masks = false;
  ConsolidateConfig consolidation;
  // Written when a training step fails (checkpoint of the last good state).
  std::optional<std::filesystem::path> snapshot_dir;

  void validate() const;
};

struct EditPrompt {
  std::string text;
  const Denoiser* denoiser = nullptr;
};

struct EditSession {
  TrainingState training;
  SceneDataset dataset;                 // working copy, Z -> Z_e
  std::vector<LatentImage> originals;   // dataset latents before editing
  std::vector<Mask> masks;              // last union mask per view
  // Per-view, per-prompt masks kept when masks are not refreshed.
  std::vector<std::vector<Mask>> cached_masks;
  bool masks_consolidated = false;
  std::int64_t step = 0;
  std::int64_t dataset_updates = 0;
  std::size_t next_view = 0;
};

EditSession start_session(TrainingState trained, const SceneDataset& scene);

struct EditLogRecord {
  std::int64_t step = 0;
  std::string phase;
  LossReport loss;
  std::optional<int> du_view;
  std::optional<double> mask_area_frac;
  std::optional<double> mask_overlap_frac;  // only with several prompts
};
std::string to_json_line(const EditLogRecord& rec);

struct DatasetUpdate {
  int view = 0;
  std::vector<Mask> prompt_masks;
  Mask mask;  // union
  LatentImage render;
  LatentImage blended;
};

struct EditCallbacks {
  std::function<void(const EditLogRecord&)> on_step;
  std::function<void(const DatasetUpdate&)> on_update;
};

// Runs iterations session.step .. cfg.edit_iterations - 1. A dataset update
// happens after every editing_rate-th iteration (counting from 1), so I
// iterations perform floor(I / editing_rate) updates. Every iteration runs
// one train_step with the phase's loss weights on the current dataset.
void edit_scene(EditSession& session, const std::vector<EditPrompt>& prompts, const EditConfig& cfg,
                const NoiseSchedule& sched, const TrainConfig& train_cfg, std::uint64_t seed,
                const EditCallbacks& callbacks = {});

// One dataset update of view `view` (exposed for tests).
DatasetUpdate dataset_update(EditSession& session, int view, const std::vector<EditPrompt>& prompts,
                             const EditConfig& cfg, const NoiseSchedule& sched, const TrainConfig& train_cfg,
                             std::uint64_t seed);

inline constexpr double kPsnrSentinel = 99.0;

// 10 log10(peak^2 / MSE) over the selected pixels (all when region is
// empty), MSE averaged over pixels and channels. Identical inputs give the
// sentinel.
double edit_psnr(const LatentImage& a, const LatentImage& b, const Mask* region = nullptr, double peak = 1.0);

// Cosine between the mean per-pixel change (after - before) over `region`
// and `direction`. Throws UndefinedResultError when the mean change is zero
// or the region is empty.
double displacement_cosine(const LatentImage& before, const LatentImage& after, const Mask& region,
                           const Eigen::Vector4d& direction);

// Maps latents and text into a shared embedding space.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Eigen::VectorXd embed_image(const LatentImage& z) const = 0;
  virtual Eigen::VectorXd embed_text(const std::string& text) const = 0;
};

// Seeded random projections of per-channel statistics and of hashed text.
// Carries no semantics; it only exercises the metric.
class RandomProjectionEmbedder : public Embedder {
 public:
  explicit RandomProjectionEmbedder(int dim = 64, std::uint64_t seed = 0);
  Eigen::VectorXd embed_image(const LatentImage& z) const override;
  Eigen::VectorXd embed_text(const std::string& text) const override;

 private:
  int dim_;
  std::uint64_t seed_;
  Eigen::MatrixXd image_proj_;
};

// Cosine between the image embedding change and the caption embedding
// change. Throws UndefinedResultError when either change is zero.
double directional_similarity(const Embedder& e, const LatentImage& before, const LatentImage& after,
                              const std::string& prompt_before, const std::string& prompt_after);

}  // namespace latentedit
