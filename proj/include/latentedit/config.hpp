#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "latentedit/diffusion.hpp"
#include "latentedit/edit.hpp"
#include "latentedit/scene.hpp"
#include "latentedit/trainer.hpp"

namespace latentedit {

// Every tunable of a run. Keys are flat and namespaced ("edit.mu",
// "guidance.s_text", ...); see config_keys().
struct RunConfig {
  std::uint64_t seed = 0;

  // Noise schedule.
  int schedule_num_steps = 1000;
  std::string schedule_kind = "scaled_linear";
  double schedule_t_min = 0.02;
  double schedule_t_max = 0.98;
  double schedule_delta_t = 0.75;

  // Classifier-free guidance.
  double guidance_s_text = 7.5;
  double guidance_s_image = 1.5;

  // Editing.
  double edit_mu = 0.45;
  int edit_rate = 10;
  std::int64_t edit_iterations = 2000;
  std::int64_t edit_warm_steps = 400;
  std::array<double, 3> edit_lambda_warm{0.90, 0.1, 0.0};
  std::array<double, 3> edit_lambda_late{1.0, 0.0, 0.0};
  bool edit_refresh_mask = true;
  int edit_denoise_steps = 20;
  bool edit_consolidate = false;
  std::int64_t edit_checkpoint_every = 0;  // 0 = final checkpoint only

  // Initialisation training.
  std::int64_t init_steps = 2000;
  std::int64_t init_reference_steps = 30000;
  std::int64_t init_reference_boundary = 2500;
  std::array<double, 3> init_lambda_early{0.80, 0.1, 0.1};
  std::array<double, 3> init_lambda_late{0.75, 0.0, 0.25};

  // Field and optimisation.
  int field_position_bands = 6;
  int field_direction_bands = 2;
  int field_hidden_width = 64;
  int field_hidden_layers = 4;
  int adapter_channels = 0;  // 0 = closest to the parameter budget
  int train_patch_size = 16;
  double train_lr_field = 1e-3;
  double train_lr_adapter = 1e-3;
  double train_lr_camera = 1e-4;
  int train_proxy_points = 32;

  // Rendering.
  int render_samples = 64;
  bool render_stratified = true;
  std::array<double, 4> render_background{0.0, 0.0, 0.0, 0.0};
  int render_adapter_tile = 16;
  int render_chunk_rays = 16;

  // Denoiser backend.
  std::string backend_name = "oracle_edit";
  std::array<double, 4> backend_direction{0.5, 0.5, 0.5, 0.5};
  double backend_magnitude = 0.002;
  std::vector<std::string> backend_command;

  void validate() const;
};

// All recognised keys, in a fixed order.
const std::vector<std::string>& config_keys();

nlohmann::json config_to_json(const RunConfig& cfg);
// Applies every key of a flat JSON object; unknown keys and wrongly typed
// values throw ConfigError.
void apply_config_json(RunConfig& cfg, const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
// "key=value" where value is JSON (bare words are taken as strings).
void apply_override(RunConfig& cfg, const std::string& assignment);

NoiseSchedule make_schedule(const RunConfig& cfg);
GuidanceConfig guidance_config(const RunConfig& cfg);
TrainConfig train_config(const RunConfig& cfg);
PhaseSchedule init_schedule(const RunConfig& cfg);
EditConfig edit_config(const RunConfig& cfg);

// Backend named by backend.name. The oracle backend edits each view's
// ground-truth region (keyed by the view's current latent) along the
// normalised backend.direction.
std::unique_ptr<Denoiser> make_denoiser(const RunConfig& cfg, const SceneDataset& scene);

}  // namespace latentedit
