#include "latentedit/config.hpp"

#include <fstream>
#include <functional>
#include <map>

#include "latentedit/errors.hpp"

namespace latentedit {

namespace {

using nlohmann::json;

struct Key {
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <typename T>
T as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
  }
}

template <std::size_t N>
std::array<double, N> as_array(const json& v, const std::string& key) {
  if (!v.is_array() || v.size() != N) {
    throw ConfigError("config key '" + key + "' must be an array of " + std::to_string(N) + " numbers");
  }
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = as<double>(v[i], key);
  return out;
}

#define LE_FIELD(name, member, type)                                                                 \
  {                                                                                                 \
    name, Key {                                                                                     \
      [](const RunConfig& c) { return json(c.member); },                                            \
          [](RunConfig& c, const json& v) { c.member = as<type>(v, name); }                         \
    }                                                                                               \
  }
#define LE_ARRAY(name, member, n)                                                                    \
  {                                                                                                 \
    name, Key {                                                                                     \
      [](const RunConfig& c) { return json(c.member); },                                            \
          [](RunConfig& c, const json& v) { c.member = as_array<n>(v, name); }                      \
    }                                                                                               \
  }

const std::vector<std::pair<std::string, Key>>& key_table() {
  static const std::vector<std::pair<std::string, Key>> table = {
      LE_FIELD("seed", seed, std::uint64_t),
      LE_FIELD("schedule.num_steps", schedule_num_steps, int),
      LE_FIELD("schedule.kind", schedule_kind, std::string),
      LE_FIELD("schedule.t_min", schedule_t_min, double),
      LE_FIELD("schedule.t_max", schedule_t_max, double),
      LE_FIELD("schedule.delta_t", schedule_delta_t, double),
      LE_FIELD("guidance.s_text", guidance_s_text, double),
      LE_FIELD("guidance.s_image", guidance_s_image, double),
      LE_FIELD("edit.mu", edit_mu, double),
      LE_FIELD("edit.editing_rate", edit_rate, int),
      LE_FIELD("edit.iterations", edit_iterations, std::int64_t),
      LE_FIELD("edit.warm_steps", edit_warm_steps, std::int64_t),
      LE_ARRAY("edit.lambda_warm", edit_lambda_warm, 3),
      LE_ARRAY("edit.lambda_late", edit_lambda_late, 3),
      LE_FIELD("edit.refresh_mask", edit_refresh_mask, bool),
      LE_FIELD("edit.denoise_steps", edit_denoise_steps, int),
      LE_FIELD("edit.consolidate", edit_consolidate, bool),
      LE_FIELD("edit.checkpoint_every", edit_checkpoint_every, std::int64_t),
      LE_FIELD("init.steps", init_steps, std::int64_t),
      LE_FIELD("init.reference_steps", init_reference_steps, std::int64_t),
      LE_FIELD("init.reference_boundary", init_reference_boundary, std::int64_t),
      LE_ARRAY("init.lambda_early", init_lambda_early, 3),
      LE_ARRAY("init.lambda_late", init_lambda_late, 3),
      LE_FIELD("field.position_bands", field_position_bands, int),
      LE_FIELD("field.direction_bands", field_direction_bands, int),
      LE_FIELD("field.hidden_width", field_hidden_width, int),
      LE_FIELD("field.hidden_layers", field_hidden_layers, int),
      LE_FIELD("adapter.channels", adapter_channels, int),
      LE_FIELD("train.patch_size", train_patch_size, int),
      LE_FIELD("train.lr_field", train_lr_field, double),
      LE_FIELD("train.lr_adapter", train_lr_adapter, double),
      LE_FIELD("train.lr_camera", train_lr_camera, double),
      LE_FIELD("train.proxy_points", train_proxy_points, int),
      LE_FIELD("render.samples_per_ray", render_samples, int),
      LE_FIELD("render.stratified", render_stratified, bool),
      LE_ARRAY("render.background", render_background, 4),
      LE_FIELD("render.adapter_tile", render_adapter_tile, int),
      LE_FIELD("render.chunk_rays", render_chunk_rays, int),
      LE_FIELD("backend.name", backend_name, std::string),
      LE_ARRAY("backend.direction", backend_direction, 4),
      LE_FIELD("backend.magnitude", backend_magnitude, double),
      {"backend.command",
       Key{[](const RunConfig& c) { return json(c.backend_command); },
           [](RunConfig& c, const json& v) {
             if (!v.is_array()) throw ConfigError("config key 'backend.command' must be an array of strings");
             c.backend_command.clear();
             for (const auto& s : v) c.backend_command.push_back(as<std::string>(s, "backend.command"));
           }}},
  };
  return table;
}

#undef LE_FIELD
#undef LE_ARRAY

const Key* find_key(const std::string& name) {
  for (const auto& [k, v] : key_table())
    if (k == name) return &v;
  return nullptr;
}

LossWeights weights(const std::array<double, 3>& a) { return {a[0], a[1], a[2]}; }

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, _] : key_table()) k.push_back(name);
    return k;
  }();
  return keys;
}

void RunConfig::validate() const {
  (void)latentedit::make_schedule(*this);
  guidance_config(*this).validate();
  train_config(*this).validate();
  (void)init_schedule(*this);
  edit_config(*this).validate();
  if (backend_name != "oracle_edit" && backend_name != "identity" && backend_name != "null" &&
      backend_name != "external") {
    throw ConfigError("unknown backend '" + backend_name + "' (oracle_edit, identity, null, external)");
  }
  if (backend_name == "external" && backend_command.empty()) {
    throw ConfigError("backend 'external' needs backend.command");
  }
  const Eigen::Vector4d d(backend_direction.data());
  if (!(d.norm() > 0.0)) throw ConfigError("backend.direction must be non-zero");
  if (edit_checkpoint_every < 0) throw ConfigError("edit.checkpoint_every must be non-negative");
}

nlohmann::json config_to_json(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& [name, key] : key_table()) j[name] = key.get(cfg);
  return j;
}

void apply_config_json(RunConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object of flat keys");
  for (const auto& [name, value] : j.items()) {
    const Key* key = find_key(name);
    if (!key) throw ConfigError("unknown config key '" + name + "'");
    key->set(cfg, value);
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig cfg;
  apply_config_json(cfg, j);
  return cfg;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string name = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  apply_config_json(cfg, json{{name, value}});
}

NoiseSchedule make_schedule(const RunConfig& cfg) {
  return make_schedule(cfg.schedule_num_steps, parse_schedule_kind(cfg.schedule_kind), cfg.schedule_t_min,
                       cfg.schedule_t_max, cfg.schedule_delta_t);
}

GuidanceConfig guidance_config(const RunConfig& cfg) { return {cfg.guidance_s_image, cfg.guidance_s_text}; }

TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.architecture = {cfg.field_position_bands, cfg.field_direction_bands, cfg.field_hidden_width,
                    cfg.field_hidden_layers};
  t.adapter_channels = cfg.adapter_channels;
  t.render.samples_per_ray = cfg.render_samples;
  t.render.stratified = cfg.render_stratified;
  t.render.background_latent = Eigen::Vector4d(cfg.render_background.data());
  t.render.adapter_tile = cfg.render_adapter_tile;
  t.render.chunk_rays = cfg.render_chunk_rays;
  t.render.seed = cfg.seed;
  t.patch_size = cfg.train_patch_size;
  t.field_optim.lr = cfg.train_lr_field;
  t.adapter_optim.lr = cfg.train_lr_adapter;
  t.camera_optim.lr = cfg.train_lr_camera;
  t.proxy_points = cfg.train_proxy_points;
  t.seed = cfg.seed;
  return t;
}

PhaseSchedule init_schedule(const RunConfig& cfg) {
  return init_phase_schedule(cfg.init_steps, cfg.init_reference_steps, cfg.init_reference_boundary,
                             weights(cfg.init_lambda_early), weights(cfg.init_lambda_late));
}

EditConfig edit_config(const RunConfig& cfg) {
  EditConfig e;
  e.editing_rate = cfg.edit_rate;
  e.mask_threshold = cfg.edit_mu;
  e.guidance = guidance_config(cfg);
  e.edit_iterations = cfg.edit_iterations;
  e.phase_schedule = edit_phase_schedule(cfg.edit_iterations, cfg.edit_warm_steps, weights(cfg.edit_lambda_warm),
                                         weights(cfg.edit_lambda_late));
  e.refresh_mask_each_edit = cfg.edit_refresh_mask;
  e.denoise_steps = cfg.edit_denoise_steps;
  e.consolidate_masks = cfg.edit_consolidate;
  e.consolidation.render = train_config(cfg).render;
  e.consolidation.render.stratified = false;
  e.consolidation.seed = cfg.seed;
  return e;
}

std::unique_ptr<Denoiser> make_denoiser(const RunConfig& cfg, const SceneDataset& scene) {
  if (cfg.backend_name == "identity") return std::make_unique<IdentityDenoiser>();
  if (cfg.backend_name == "null") return std::make_unique<NullEditDenoiser>();
  if (cfg.backend_name == "external") {
    if (cfg.backend_command.empty()) throw ConfigError("backend 'external' needs backend.command");
    return std::make_unique<ExternalDenoiser>(cfg.backend_command);
  }
  if (cfg.backend_name != "oracle_edit") throw ConfigError("unknown backend '" + cfg.backend_name + "'");
  const Eigen::Vector4d d(cfg.backend_direction.data());
  if (!(d.norm() > 0.0)) throw ConfigError("backend.direction must be non-zero");
  if (!scene.ground_truth_edit_region) throw ConfigError("oracle_edit backend needs a scene with an edit region");
  auto oracle = std::make_unique<OracleEditDenoiser>(Mask{}, d.normalized(), cfg.backend_magnitude);
  for (std::size_t v = 0; v < scene.size(); ++v) oracle->add_view(scene.latents[v], (*scene.ground_truth_edit_region)[v]);
  return oracle;
}

}  // namespace latentedit
