#include "latentedit/trainer.hpp"

#include <Eigen/Geometry>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "latentedit/rng.hpp"
#include "latentedit/tensor_io.hpp"

namespace latentedit {

namespace {

constexpr std::uint64_t kStreamBatch = 1;
constexpr std::uint64_t kStreamJitter = 2;
constexpr std::uint64_t kStreamAdapter = 3;
constexpr std::uint64_t kStreamProxy = 4;

bool all_finite(const Eigen::VectorXd& v) { return v.allFinite(); }

}  // namespace

bool TrainingState::operator==(const TrainingState& o) const {
  if (!(field == o.field && adapter == o.adapter && cameras == o.cameras)) return false;
  auto same_opt = [](const Adam& a, const Adam& b) {
    return a.steps == b.steps && a.m.size() == b.m.size() && a.m == b.m && a.v == b.v;
  };
  if (!same_opt(field_optimizer, o.field_optimizer) || !same_opt(adapter_optimizer, o.adapter_optimizer)) return false;
  if (camera_optimizers.size() != o.camera_optimizers.size()) return false;
  for (std::size_t i = 0; i < camera_optimizers.size(); ++i) {
    if (!same_opt(camera_optimizers[i], o.camera_optimizers[i])) return false;
  }
  return true;
}

void TrainConfig::validate() const {
  render.validate();
  if (patch_size <= 0 || patch_size % 2 != 0) throw ConfigError("patch_size must be a positive even number");
  if (render.adapter_tile > 0 && render.adapter_tile != patch_size) {
    throw ConfigError("patch_size must equal the adapter tile so training and rendering see the same tiles");
  }
  if (adapter_channels < 0) throw ConfigError("adapter_channels must be non-negative");
  if (proxy_points < 6) throw ConfigError("proxy_points must be at least 6");
  for (const AdamConfig* a : {&field_optim, &adapter_optim, &camera_optim}) {
    if (!(a->lr > 0.0) || !(a->beta1 >= 0.0 && a->beta1 < 1.0) || !(a->beta2 >= 0.0 && a->beta2 < 1.0) ||
        !(a->eps > 0.0)) {
      throw ConfigError("invalid optimiser settings");
    }
  }
}

TrainingState init_training(const SceneDataset& scene, const TrainConfig& cfg) {
  cfg.validate();
  scene.validate();
  TrainingState st;
  st.field = FieldState::create(cfg.architecture, cfg.seed);
  const int channels = cfg.adapter_channels > 0 ? cfg.adapter_channels : default_adapter_channels();
  st.adapter = AdapterWeights::create(channels, derive_seed(cfg.seed, kStreamAdapter, 0));
  st.field_optimizer = Adam(cfg.field_optim, st.field.params.size());
  st.adapter_optimizer = Adam(cfg.adapter_optim, st.adapter.params.size());
  st.cameras = scene.cameras;
  for (std::size_t i = 0; i < st.cameras.size(); ++i) {
    const auto proxy =
        sample_proxy_points(scene.bbox_lo, scene.bbox_hi, cfg.proxy_points, derive_seed(cfg.seed, kStreamProxy, i));
    initialize_preconditioner(st.cameras[i], proxy);
    st.camera_optimizers.emplace_back(cfg.camera_optim, kCameraParamCount);
  }
  return st;
}

TrainBatch make_batch(const SceneDataset& scene, int view, int row0, int col0, int rows, int cols) {
  if (view < 0 || static_cast<std::size_t>(view) >= scene.size()) throw ValidationError("batch view out of range");
  if (row0 < 0 || col0 < 0 || rows <= 0 || cols <= 0 || row0 + rows > scene.rows() || col0 + cols > scene.cols()) {
    throw ValidationError("batch tile outside the latent grid");
  }
  TrainBatch b;
  b.view = view;
  b.row0 = row0;
  b.col0 = col0;
  b.target = LatentImage(rows, cols, view);
  const LatentImage& src = scene.latents[static_cast<std::size_t>(view)];
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      b.pixels.push_back({row0 + r, col0 + c});
      for (int ch = 0; ch < 4; ++ch) b.target.at(r, c, ch) = src.at(row0 + r, col0 + c, ch);
    }
  }
  return b;
}

TrainBatch sample_batch(const SceneDataset& scene, const TrainConfig& cfg, std::int64_t step) {
  const int p = cfg.patch_size;
  const int tiles_r = (scene.rows() + p - 1) / p;
  const int tiles_c = (scene.cols() + p - 1) / p;
  const std::uint64_t h = derive_seed(cfg.seed, kStreamBatch, static_cast<std::uint64_t>(step));
  const auto n_views = static_cast<std::uint64_t>(scene.size());
  const int view = static_cast<int>(h % n_views);
  const std::uint64_t tile = (h / n_views) % static_cast<std::uint64_t>(tiles_r * tiles_c);
  const int tr = static_cast<int>(tile) / tiles_c, tc = static_cast<int>(tile) % tiles_c;
  const int row0 = tr * p, col0 = tc * p;
  return make_batch(scene, view, row0, col0, std::min(p, scene.rows() - row0), std::min(p, scene.cols() - col0));
}

LossGradients compute_gradients(const TrainingState& state, const SceneDataset& scene, const TrainBatch& batch,
                                const LossWeights& w, const TrainConfig& cfg, std::uint64_t jitter_seed,
                                bool want_camera_grads) {
  w.validate();
  const CameraParams& cam = state.cameras.at(static_cast<std::size_t>(batch.view));
  const int rows = batch.target.rows(), cols = batch.target.cols();
  const auto rays = generate_rays(cam, batch.pixels, scene.rows(), scene.cols(), scene.downscale_factor, scene.near,
                                  scene.far);
  const RenderTape tape(state.field, rays, cfg.render, jitter_seed);
  const auto n = static_cast<Eigen::Index>(rays.size());

  Eigen::Matrix4Xd target(4, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& px = batch.pixels[static_cast<std::size_t>(k)];
    for (int ch = 0; ch < 4; ++ch) target(ch, k) = batch.target.at(px.row - batch.row0, px.col - batch.col0, ch);
  }

  LossGradients out;
  out.field = Eigen::VectorXd::Zero(state.field.params.size());
  out.adapter = Eigen::VectorXd::Zero(state.adapter.params.size());
  out.cameras.assign(state.cameras.size(), CameraVector::Zero());

  const Eigen::Matrix4Xd& pred = tape.outputs();
  out.report.loss_r = loss_reconstruction(pred, target);
  Eigen::Matrix4Xd upstream = (w.lambda_r * 2.0 / static_cast<double>(n)) * (pred - target);

  if (w.lambda_f > 0.0) {
    LatentImage raw(rows, cols, batch.view);
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto& px = batch.pixels[static_cast<std::size_t>(k)];
      for (int ch = 0; ch < 4; ++ch) raw.at(px.row - batch.row0, px.col - batch.col0, ch) = pred(ch, k);
    }
    const AdapterPass pass(state.adapter, raw);
    out.report.loss_f = loss_refinement(pass.output(), batch.target);
    LatentImage d_out(rows, cols, batch.view);
    const double scale = w.lambda_f * 2.0 / static_cast<double>(raw.pixel_count());
    for (std::size_t i = 0; i < d_out.size(); ++i) {
      d_out.values()[i] = scale * (pass.output().values()[i] - batch.target.values()[i]);
    }
    const LatentImage d_raw = pass.backward(d_out, out.adapter);
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto& px = batch.pixels[static_cast<std::size_t>(k)];
      for (int ch = 0; ch < 4; ++ch) upstream(ch, k) += d_raw.at(px.row - batch.row0, px.col - batch.col0, ch);
    }
  }

  out.report.loss_reg = loss_camera_reg(state.cameras);
  out.report.total = loss_total(out.report.loss_r, out.report.loss_f, out.report.loss_reg, w);

  std::vector<Vec3> d_origin, d_direction;
  tape.backward(upstream, out.field, want_camera_grads ? &d_origin : nullptr,
                want_camera_grads ? &d_direction : nullptr);

  if (want_camera_grads) {
    if (cam.distortion.x() != 0.0 || cam.distortion.y() != 0.0) {
      throw ValidationError("camera refinement requires undistorted cameras");
    }
    const CameraVector offset = cam.offset();
    const Mat3 r = cam.rotation();
    const Mat3 jl = so3_left_jacobian(offset.segment<3>(camera_index::kRotation));
    const Vec2 f = cam.focal();
    CameraVector g_offset = CameraVector::Zero();
    for (std::size_t k = 0; k < rays.size(); ++k) {
      const auto& px = batch.pixels[k];
      const Vec3 u = pixel_camera_direction(cam, px.row, px.col, scene.downscale_factor);
      const Vec3 d = r * u;
      const double norm = d.norm();
      const Vec3 v = d / norm;
      const Vec3 g_d = (d_direction[k] - v * v.dot(d_direction[k])) / norm;
      g_offset.segment<3>(camera_index::kRotation) += jl.transpose() * d.cross(g_d);
      g_offset.segment<3>(camera_index::kTranslation) += d_origin[k];
      const Vec3 g_u = r.transpose() * g_d;
      g_offset(camera_index::kFocal) += -g_u.x() * u.x() / f.x();
      g_offset(camera_index::kFocal + 1) += -g_u.y() * u.y() / f.y();
      g_offset(camera_index::kPrincipal) += -g_u.x() / f.x();
      g_offset(camera_index::kPrincipal + 1) += -g_u.y() / f.y();
    }
    out.cameras[static_cast<std::size_t>(batch.view)] = cam.precond.transpose() * g_offset;
  }
  if (w.lambda_p > 0.0) {
    for (std::size_t i = 0; i < state.cameras.size(); ++i) {
      out.cameras[i] += w.lambda_p * camera_reg_gradient(state.cameras[i]);
    }
  }
  return out;
}

LossReport train_step(TrainingState& state, const SceneDataset& scene, const TrainBatch& batch, const LossWeights& w,
                      const TrainConfig& cfg) {
  const std::uint64_t jitter =
      derive_seed(cfg.seed, kStreamJitter, static_cast<std::uint64_t>(state.field.step_count));
  const bool cameras_active = w.lambda_p > 0.0;
  const bool adapter_active = w.lambda_f > 0.0;
  const LossGradients g = compute_gradients(state, scene, batch, w, cfg, jitter, cameras_active);
  const std::string at = " at step " + std::to_string(state.field.step_count);
  if (!std::isfinite(g.report.total)) throw NonFiniteError("non-finite training loss" + at);
  if (!all_finite(g.field) || !all_finite(g.adapter)) throw NonFiniteError("non-finite gradient" + at);

  Eigen::VectorXd fm, fv, am, av;
  const Eigen::VectorXd field_next = state.field_optimizer.propose(state.field.params, g.field, fm, fv);
  if (!all_finite(field_next)) throw NonFiniteError("non-finite field parameters" + at);
  Eigen::VectorXd adapter_next;
  if (adapter_active) {
    adapter_next = state.adapter_optimizer.propose(state.adapter.params, g.adapter, am, av);
    if (!all_finite(adapter_next)) throw NonFiniteError("non-finite adapter parameters" + at);
  }
  std::vector<Eigen::VectorXd> cam_next, cm(state.cameras.size()), cv(state.cameras.size());
  if (cameras_active) {
    for (std::size_t i = 0; i < state.cameras.size(); ++i) {
      const Eigen::VectorXd grad = g.cameras[i];
      if (!all_finite(grad)) throw NonFiniteError("non-finite camera gradient" + at);
      cam_next.push_back(state.camera_optimizers[i].propose(state.cameras[i].delta_phi, grad, cm[i], cv[i]));
      if (!all_finite(cam_next.back())) throw NonFiniteError("non-finite camera parameters" + at);
    }
  }

  state.field.params = field_next;
  state.field_optimizer.commit(std::move(fm), std::move(fv));
  if (adapter_active) {
    state.adapter.params = adapter_next;
    state.adapter_optimizer.commit(std::move(am), std::move(av));
  }
  if (cameras_active) {
    for (std::size_t i = 0; i < state.cameras.size(); ++i) {
      state.cameras[i].delta_phi = cam_next[i];
      state.camera_optimizers[i].commit(std::move(cm[i]), std::move(cv[i]));
    }
  }
  ++state.field.step_count;
  return g.report;
}

PhaseSchedule::PhaseSchedule(std::vector<Phase> phases) : phases_(std::move(phases)) {
  std::int64_t expect = 0;
  for (const auto& p : phases_) {
    if (p.begin != expect || p.end <= p.begin) throw ConfigError("phase schedule must be contiguous from step 0");
    p.weights.validate();
    expect = p.end;
  }
}

const Phase& PhaseSchedule::at(std::int64_t step) const {
  for (const auto& p : phases_) {
    if (step >= p.begin && step < p.end) return p;
  }
  throw ValidationError("step " + std::to_string(step) + " outside the phase schedule");
}

void train(TrainingState& state, const SceneDataset& scene, const PhaseSchedule& schedule, const TrainConfig& cfg,
           const std::function<void(const TrainLogEntry&)>& on_step) {
  cfg.validate();
  while (state.field.step_count < schedule.total_steps()) {
    const std::int64_t step = state.field.step_count;
    const Phase& phase = schedule.at(step);
    const TrainBatch batch = sample_batch(scene, cfg, step);
    const LossReport rep = train_step(state, scene, batch, phase.weights, cfg);
    if (on_step) on_step({step, phase.name, rep});
  }
}

double render_rms_error(const TrainingState& state, const SceneDataset& scene, const RenderConfig& cfg,
                        bool use_adapter) {
  const ViewGeometry g = view_geometry(scene);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const LatentImage img =
        render_view(state.field, use_adapter ? &state.adapter : nullptr, state.cameras[i], g, cfg, static_cast<int>(i));
    for (std::size_t k = 0; k < img.size(); ++k) {
      const double d = img.values()[k] - scene.latents[i].values()[k];
      sum += d * d;
    }
    count += img.size();
  }
  return std::sqrt(sum / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr int kCameraRecord = 9 + 3 + 2 + 2 + 2 + kCameraParamCount + kCameraParamCount * kCameraParamCount;

void write_vector(const std::filesystem::path& p, const Eigen::VectorXd& v) {
  write_tensor_file(p, to_blob(std::vector<double>(v.data(), v.data() + v.size()), DType::kFloat64));
}

Eigen::VectorXd read_vector(const std::filesystem::path& p, Eigen::Index expected) {
  const TensorBlob b = read_tensor_file(p);
  if (static_cast<Eigen::Index>(b.values.size()) != expected) {
    throw FormatError(p.filename().string() + ": expected " + std::to_string(expected) + " values, found " +
                      std::to_string(b.values.size()));
  }
  return Eigen::Map<const Eigen::VectorXd>(b.values.data(), expected);
}

std::vector<double> camera_record(const CameraParams& c) {
  std::vector<double> v;
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) v.push_back(c.rotation0(r, k));
  for (int k = 0; k < 3; ++k) v.push_back(c.translation0(k));
  v.insert(v.end(), {c.focal0.x(), c.focal0.y(), c.principal0.x(), c.principal0.y(), c.distortion.x(),
                     c.distortion.y()});
  for (int k = 0; k < kCameraParamCount; ++k) v.push_back(c.delta_phi(k));
  for (int r = 0; r < kCameraParamCount; ++r)
    for (int k = 0; k < kCameraParamCount; ++k) v.push_back(c.precond(r, k));
  return v;
}

CameraParams camera_from_record(const double* v) {
  CameraParams c;
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) c.rotation0(r, k) = *v++;
  for (int k = 0; k < 3; ++k) c.translation0(k) = *v++;
  c.focal0 = Vec2(v[0], v[1]);
  c.principal0 = Vec2(v[2], v[3]);
  c.distortion = Vec2(v[4], v[5]);
  v += 6;
  for (int k = 0; k < kCameraParamCount; ++k) c.delta_phi(k) = *v++;
  for (int r = 0; r < kCameraParamCount; ++r)
    for (int k = 0; k < kCameraParamCount; ++k) c.precond(r, k) = *v++;
  return c;
}

}  // namespace

void save_checkpoint(const TrainingState& state, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_vector(dir / "field.lte", state.field.params);
  write_vector(dir / "field_adam_m.lte", state.field_optimizer.m);
  write_vector(dir / "field_adam_v.lte", state.field_optimizer.v);
  write_vector(dir / "adapter.lte", state.adapter.params);
  write_vector(dir / "adapter_adam_m.lte", state.adapter_optimizer.m);
  write_vector(dir / "adapter_adam_v.lte", state.adapter_optimizer.v);

  const std::size_t n = state.cameras.size();
  std::vector<double> cams, cam_m, cam_v;
  nlohmann::json cam_steps = nlohmann::json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const auto rec = camera_record(state.cameras[i]);
    cams.insert(cams.end(), rec.begin(), rec.end());
    const Adam& opt = state.camera_optimizers[i];
    cam_m.insert(cam_m.end(), opt.m.data(), opt.m.data() + opt.m.size());
    cam_v.insert(cam_v.end(), opt.v.data(), opt.v.data() + opt.v.size());
    cam_steps.push_back(opt.steps);
  }
  TensorBlob blob;
  blob.dtype = DType::kFloat64;
  blob.rank = 2;
  blob.dims = {static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(kCameraRecord), 1};
  blob.values = cams;
  write_tensor_file(dir / "cameras.lte", blob);
  blob.dims = {static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(kCameraParamCount), 1};
  blob.values = cam_m;
  write_tensor_file(dir / "camera_adam_m.lte", blob);
  blob.values = cam_v;
  write_tensor_file(dir / "camera_adam_v.lte", blob);

  const auto& arch = state.field.architecture();
  nlohmann::json j;
  j["step_count"] = state.field.step_count;
  j["encoding_bands"] = {{"position", arch.position_bands}, {"direction", arch.direction_bands}};
  j["hidden_width"] = arch.hidden_width;
  j["hidden_layers"] = arch.hidden_layers;
  j["layer_dims"] = state.field.layer_dims();
  j["adapter_channels"] = state.adapter.channels();
  j["n_cameras"] = n;
  j["optimizer_steps"] = {{"field", state.field_optimizer.steps},
                          {"adapter", state.adapter_optimizer.steps},
                          {"cameras", cam_steps}};
  std::ofstream out(dir / "checkpoint.json");
  if (!out) throw FormatError("cannot write " + (dir / "checkpoint.json").string());
  out << j.dump(2) << '\n';
}

TrainingState load_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg) {
  const auto meta_path = dir / "checkpoint.json";
  std::ifstream in(meta_path);
  if (!in) throw FormatError("missing " + meta_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    FieldArchitecture arch;
    arch.position_bands = j.at("encoding_bands").at("position").get<int>();
    arch.direction_bands = j.at("encoding_bands").at("direction").get<int>();
    arch.hidden_width = j.at("hidden_width").get<int>();
    arch.hidden_layers = j.at("hidden_layers").get<int>();
    TrainingState st;
    st.field = FieldState::create(arch, 0);
    if (j.at("layer_dims").get<std::vector<int>>() != st.field.layer_dims()) {
      throw FormatError("checkpoint layer_dims do not match its architecture");
    }
    st.field.step_count = j.at("step_count").get<std::int64_t>();
    st.field.params = read_vector(dir / "field.lte", st.field.params.size());
    st.field_optimizer = Adam(cfg.field_optim, st.field.params.size());
    st.field_optimizer.m = read_vector(dir / "field_adam_m.lte", st.field.params.size());
    st.field_optimizer.v = read_vector(dir / "field_adam_v.lte", st.field.params.size());
    st.field_optimizer.steps = j.at("optimizer_steps").at("field").get<std::int64_t>();

    st.adapter = AdapterWeights::create(j.at("adapter_channels").get<int>(), 0);
    const auto na = st.adapter.params.size();
    st.adapter.params = read_vector(dir / "adapter.lte", na);
    st.adapter_optimizer = Adam(cfg.adapter_optim, na);
    st.adapter_optimizer.m = read_vector(dir / "adapter_adam_m.lte", na);
    st.adapter_optimizer.v = read_vector(dir / "adapter_adam_v.lte", na);
    st.adapter_optimizer.steps = j.at("optimizer_steps").at("adapter").get<std::int64_t>();

    const auto n = j.at("n_cameras").get<std::size_t>();
    const auto cams = read_vector(dir / "cameras.lte", static_cast<Eigen::Index>(n) * kCameraRecord);
    const auto cm = read_vector(dir / "camera_adam_m.lte", static_cast<Eigen::Index>(n) * kCameraParamCount);
    const auto cv = read_vector(dir / "camera_adam_v.lte", static_cast<Eigen::Index>(n) * kCameraParamCount);
    const auto& steps = j.at("optimizer_steps").at("cameras");
    for (std::size_t i = 0; i < n; ++i) {
      st.cameras.push_back(camera_from_record(cams.data() + i * kCameraRecord));
      Adam opt(cfg.camera_optim, kCameraParamCount);
      opt.m = cm.segment(static_cast<Eigen::Index>(i) * kCameraParamCount, kCameraParamCount);
      opt.v = cv.segment(static_cast<Eigen::Index>(i) * kCameraParamCount, kCameraParamCount);
      opt.steps = steps.at(i).get<std::int64_t>();
      st.camera_optimizers.push_back(std::move(opt));
    }
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint.json: " + std::string(e.what()));
  }
}

}  // namespace latentedit
