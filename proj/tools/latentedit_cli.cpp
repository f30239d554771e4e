#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "latentedit/config.hpp"
#include "latentedit/delta.hpp"
#include "latentedit/edit.hpp"
#include "latentedit/errors.hpp"
#include "latentedit/scene.hpp"
#include "latentedit/tensor_io.hpp"
#include "latentedit/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace latentedit;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string backend;
  std::vector<std::string> overrides;
};

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
  for (const auto& o : g.overrides) apply_override(cfg, o);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.backend.empty()) cfg.backend_name = g.backend;
  return cfg;
}

fs::path require_out(const Globals& g) {
  if (g.out.empty()) throw ConfigError("--out is required");
  return g.out;
}

void require_dir(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " path is required");
  if (!fs::is_directory(path)) throw ConfigError(what + " not found: " + path);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_ppm(const FeatureMap& rgb, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P6\n" << rgb.cols() << ' ' << rgb.rows() << "\n255\n";
  for (int r = 0; r < rgb.rows(); ++r) {
    for (int c = 0; c < rgb.cols(); ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(rgb.at(r, c, ch), 0.0, 1.0);
        out.put(static_cast<char>(static_cast<int>(std::lround(v * 255.0))));
      }
    }
  }
}

std::string json_line(const TrainLogEntry& e) {
  return json{{"step", e.step},
              {"phase", e.phase},
              {"loss_r", e.loss.loss_r},
              {"loss_f", e.loss.loss_f},
              {"loss_reg", e.loss.loss_reg},
              {"total", e.loss.total}}
      .dump();
}

PhaseSchedule without_adapter(const PhaseSchedule& s) {
  std::vector<Phase> phases = s.phases();
  for (auto& p : phases) p.weights.lambda_f = 0.0;
  return PhaseSchedule(std::move(phases));
}

std::vector<int> parse_views(const std::string& spec, std::size_t n) {
  std::vector<int> views;
  if (spec.empty() || spec == "all") {
    for (std::size_t i = 0; i < n; ++i) views.push_back(static_cast<int>(i));
    return views;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int v = 0;
    try {
      v = std::stoi(item);
    } catch (const std::exception&) {
      throw ConfigError("bad view index '" + item + "'");
    }
    if (v < 0 || static_cast<std::size_t>(v) >= n) throw ConfigError("view index out of range: " + item);
    views.push_back(v);
  }
  return views;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string spec = "box";
  int views = 8;
  int rows = 48;
  int cols = 48;
  int downscale = 1;
  double camera_noise = 0.0;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  const RunConfig cfg = resolve_config(g);
  const fs::path out = require_out(g);
  if (a.views < 2) throw ConfigError("--views must be at least 2");
  if (a.rows < 1 || a.cols < 1 || a.downscale < 1) throw ConfigError("--rows, --cols and --downscale must be positive");
  SceneSpec spec;
  spec.name = a.spec;
  spec.views = a.views;
  spec.rows = a.rows;
  spec.cols = a.cols;
  spec.downscale_factor = a.downscale;
  spec.camera_noise = a.camera_noise;
  write_scene(synth_scene(spec, cfg.seed), out);
  std::cout << "wrote " << a.views << " views to " << out.string() << '\n';
  return 0;
}

struct InitArgs {
  std::string scene;
  std::string resume;
  std::optional<std::int64_t> steps;
  std::optional<std::int64_t> until;
  bool no_adapter = false;
};

// The schedule cut at `step`, so a run can stop early and resume later.
PhaseSchedule truncated(const PhaseSchedule& s, std::int64_t step) {
  std::vector<Phase> phases;
  for (Phase p : s.phases()) {
    if (p.begin >= step) break;
    p.end = std::min(p.end, step);
    phases.push_back(p);
  }
  return PhaseSchedule(std::move(phases));
}

int cmd_init(const Globals& g, const InitArgs& a) {
  RunConfig cfg = resolve_config(g);
  if (a.steps) cfg.init_steps = *a.steps;
  cfg.validate();
  const fs::path out = require_out(g);
  require_dir(a.scene, "scene");
  const SceneDataset scene = load_scene(a.scene);
  const TrainConfig tc = train_config(cfg);
  PhaseSchedule schedule = init_schedule(cfg);
  if (a.no_adapter) schedule = without_adapter(schedule);
  if (a.until) {
    if (*a.until < 1 || *a.until > schedule.total_steps()) throw ConfigError("--until must lie in [1, steps]");
    schedule = truncated(schedule, *a.until);
  }

  TrainingState state;
  if (!a.resume.empty()) {
    require_dir(a.resume, "checkpoint");
    state = load_checkpoint(a.resume, tc);
  } else {
    state = init_training(scene, tc);
  }
  fs::create_directories(out);
  std::ofstream log(out / "init_log.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
  train(state, scene, schedule, tc, [&](const TrainLogEntry& e) { log << json_line(e) << '\n'; });
  save_checkpoint(state, out);
  write_json(out / "run_config.json", config_to_json(cfg));
  std::cout << "trained to step " << state.field.step_count << ", checkpoint in " << out.string() << '\n';
  return 0;
}

struct EditArgs {
  std::string scene;
  std::string checkpoint;
  std::string prompts = "edit the tagged region";
  std::string dump_masks;
  std::optional<std::int64_t> steps;
};

int cmd_edit(const Globals& g, const EditArgs& a) {
  RunConfig cfg = resolve_config(g);
  if (a.steps) cfg.edit_iterations = *a.steps;
  cfg.validate();
  const fs::path out = require_out(g);
  require_dir(a.scene, "scene");
  require_dir(a.checkpoint, "checkpoint");
  const SceneDataset scene = load_scene(a.scene);
  const TrainConfig tc = train_config(cfg);
  EditConfig ec = edit_config(cfg);
  ec.snapshot_dir = out / "snapshot";
  const auto denoiser = make_denoiser(cfg, scene);

  std::vector<EditPrompt> prompts;
  for (const auto& text : split_prompt(a.prompts)) prompts.push_back({text, denoiser.get()});
  if (prompts.empty()) throw ConfigError("--prompts is empty");

  fs::create_directories(out);
  if (!a.dump_masks.empty()) fs::create_directories(a.dump_masks);
  EditSession session = start_session(load_checkpoint(a.checkpoint, tc), scene);
  std::ofstream log(out / "session.jsonl");
  std::int64_t du = 0;
  EditCallbacks cb;
  cb.on_step = [&](const EditLogRecord& r) {
    log << to_json_line(r) << '\n';
    if (cfg.edit_checkpoint_every > 0 && (r.step + 1) % cfg.edit_checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06lld", static_cast<long long>(r.step + 1));
      save_checkpoint(session.training, out / "checkpoints" / name);
    }
  };
  cb.on_update = [&](const DatasetUpdate& u) {
    if (!a.dump_masks.empty()) {
      for (std::size_t p = 0; p < u.prompt_masks.size(); ++p) {
        char name[64];
        std::snprintf(name, sizeof name, "du%04lld_view%02d_p%zu.pgm", static_cast<long long>(du), u.view, p);
        write_pgm(u.prompt_masks[p], fs::path(a.dump_masks) / name);
      }
    }
    ++du;
  };
  edit_scene(session, prompts, ec, make_schedule(cfg), tc, cfg.seed, cb);

  save_checkpoint(session.training, out / "checkpoint");
  write_scene(session.dataset, out / "scene");
  write_json(out / "run_config.json", config_to_json(cfg));
  std::cout << session.dataset_updates << " dataset updates over " << session.step << " iterations\n";
  return 0;
}

struct RenderArgs {
  std::string scene;
  std::string checkpoint;
  std::string views = "all";
  bool no_adapter = false;
};

int cmd_render(const Globals& g, const RenderArgs& a) {
  const RunConfig cfg = resolve_config(g);
  cfg.validate();
  const fs::path out = require_out(g);
  require_dir(a.scene, "scene");
  require_dir(a.checkpoint, "checkpoint");
  const SceneDataset scene = load_scene(a.scene);
  const TrainConfig tc = train_config(cfg);
  const TrainingState state = load_checkpoint(a.checkpoint, tc);
  const ViewGeometry geom = view_geometry(scene);
  RenderConfig rc = tc.render;
  rc.stratified = false;
  const int f = scene.downscale_factor;
  const Codec codec = f == 1 ? Codec::identity() : Codec::pooled(f);

  fs::create_directories(out);
  std::ofstream log(out / "render_log.jsonl");
  for (int v : parse_views(a.views, scene.size())) {
    std::size_t rays = 0;
    const LatentImage z =
        render_view(state.field, a.no_adapter ? nullptr : &state.adapter, state.cameras[static_cast<std::size_t>(v)],
                    geom, rc, v, &rays);
    char stem[32];
    std::snprintf(stem, sizeof stem, "frame_%03d", v);
    write_tensor_file(out / (std::string(stem) + ".lte"), to_blob(z));
    const std::size_t pixels = static_cast<std::size_t>(geom.rows) * f * geom.cols * f;
    log << json{{"frame", v}, {"event", "render"}, {"rays", rays}, {"image_pixels", pixels}}.dump() << '\n';
    const FeatureMap rgb = codec.decode(z);
    write_ppm(rgb, out / (std::string(stem) + ".ppm"));
    log << json{{"frame", v}, {"event", "decode"}, {"rows", rgb.rows()}, {"cols", rgb.cols()}}.dump() << '\n';
    std::cout << "frame " << v << ": " << rays << " rays for " << pixels << " image pixels\n";
  }
  return 0;
}

struct EvalArgs {
  std::string scene;
  std::string before;
  std::string after;
  std::string prompt_before = "a box";
  std::string prompt_after = "an edited box";
};

json maybe(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const RunConfig cfg = resolve_config(g);
  cfg.validate();
  require_dir(a.scene, "scene");
  require_dir(a.before, "checkpoint");
  require_dir(a.after, "checkpoint");
  const SceneDataset scene = load_scene(a.scene);
  const TrainConfig tc = train_config(cfg);
  const TrainingState before = load_checkpoint(a.before, tc);
  const TrainingState after = load_checkpoint(a.after, tc);
  const ViewGeometry geom = view_geometry(scene);
  RenderConfig rc = tc.render;
  rc.stratified = false;
  const Eigen::Vector4d direction(cfg.backend_direction.data());
  const RandomProjectionEmbedder embedder(64, cfg.seed);

  json views = json::array();
  double psnr_out_sum = 0.0, cos_sum = 0.0;
  int cos_count = 0;
  for (std::size_t v = 0; v < scene.size(); ++v) {
    const int id = static_cast<int>(v);
    const LatentImage zb = render_view(before.field, &before.adapter, before.cameras[v], geom, rc, id);
    const LatentImage za = render_view(after.field, &after.adapter, after.cameras[v], geom, rc, id);
    const Mask region = scene.ground_truth_edit_region ? (*scene.ground_truth_edit_region)[v]
                                                       : Mask(scene.rows(), scene.cols());
    const Mask outside = region.complement();
    json row{{"view", id}, {"psnr_all", edit_psnr(za, zb)}};
    const double psnr_out = outside.area() > 0 ? edit_psnr(za, zb, &outside) : kPsnrSentinel;
    row["psnr_outside"] = psnr_out;
    row["psnr_inside"] = region.area() > 0 ? json(edit_psnr(za, zb, &region)) : json(nullptr);
    psnr_out_sum += psnr_out;
    double cos = std::nan("");
    if (region.area() > 0) {
      try {
        cos = displacement_cosine(zb, za, region, direction);
        cos_sum += cos;
        ++cos_count;
      } catch (const UndefinedResultError&) {
      }
    }
    row["inside_cosine"] = maybe(cos);
    double clip = std::nan("");
    try {
      clip = directional_similarity(embedder, zb, za, a.prompt_before, a.prompt_after);
    } catch (const UndefinedResultError&) {
    }
    row["directional_similarity"] = maybe(clip);
    views.push_back(row);
  }
  json metrics{{"views", views},
               {"mean_psnr_outside", psnr_out_sum / static_cast<double>(scene.size())},
               {"mean_inside_cosine", cos_count > 0 ? json(cos_sum / cos_count) : json(nullptr)}};
  if (g.out.empty()) {
    std::cout << metrics.dump(2) << '\n';
  } else {
    write_json(g.out, metrics);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent radiance field editing"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file with flat keys");
  app.add_option("--seed", g.seed, "Run seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory (or file for eval)");
  app.add_option("--backend", g.backend, "Denoiser backend: oracle_edit, identity, null, external");
  app.add_option("--set", g.overrides, "Config override key=value (repeatable)");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic multi-view scene");
  s->add_option("--spec", synth.spec, "Scene name");
  s->add_option("--views", synth.views, "Number of views");
  s->add_option("--rows", synth.rows, "Latent rows");
  s->add_option("--cols", synth.cols, "Latent columns");
  s->add_option("--downscale", synth.downscale, "Codec factor between image and latent");
  s->add_option("--camera-noise", synth.camera_noise, "Perturbation of the stored cameras");

  InitArgs init;
  auto* i = app.add_subcommand("init", "Train the latent field on a scene");
  i->add_option("--scene", init.scene, "Scene directory")->required();
  i->add_option("--resume", init.resume, "Checkpoint to continue from");
  i->add_option("--steps", init.steps, "Total initialisation steps");
  i->add_option("--until", init.until, "Stop after this step; resume later with --resume");
  i->add_flag("--no-adapter", init.no_adapter, "Train with lambda_f = 0");

  EditArgs edit;
  auto* e = app.add_subcommand("edit", "Edit a trained scene");
  e->add_option("--scene", edit.scene, "Scene directory")->required();
  e->add_option("--checkpoint", edit.checkpoint, "Trained checkpoint")->required();
  e->add_option("--prompts", edit.prompts, "Instruction; several attributes joined by 'and'");
  e->add_option("--dump-masks", edit.dump_masks, "Directory for one PGM per prompt per dataset update");
  e->add_option("--steps", edit.steps, "Editing iterations");

  RenderArgs render;
  auto* r = app.add_subcommand("render", "Render latent maps and decoded frames");
  r->add_option("--scene", render.scene, "Scene directory (cameras and geometry)")->required();
  r->add_option("--checkpoint", render.checkpoint, "Checkpoint")->required();
  r->add_option("--views", render.views, "Comma-separated view indices or 'all'");
  r->add_flag("--no-adapter", render.no_adapter, "Skip the refinement adapter");

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "Compare two checkpoints");
  v->add_option("--scene", ev.scene, "Scene directory with the edit region")->required();
  v->add_option("--before", ev.before, "Checkpoint before editing")->required();
  v->add_option("--after", ev.after, "Checkpoint after editing")->required();
  v->add_option("--prompt-before", ev.prompt_before, "Caption before the edit");
  v->add_option("--prompt-after", ev.prompt_after, "Caption after the edit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (s->parsed()) return cmd_synth(g, synth);
    if (i->parsed()) return cmd_init(g, init);
    if (e->parsed()) return cmd_edit(g, edit);
    if (r->parsed()) return cmd_render(g, render);
    if (v->parsed()) return cmd_eval(g, ev);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 1;
}
