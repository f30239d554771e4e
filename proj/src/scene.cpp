#include "latentedit/scene.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "latentedit/errors.hpp"
#include "latentedit/rays.hpp"
#include "latentedit/tensor_io.hpp"

namespace latentedit {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Codec

Codec::Codec(int factor, bool identity) : factor_(factor), identity_(identity) {
  if (identity) {
    lift_.setZero();
    lift_.topRows<3>().setIdentity();
  } else {
    lift_ << 0.30, 0.25, 0.10,  //
        -0.20, 0.35, 0.15,      //
        0.10, -0.15, 0.40,      //
        0.20, 0.20, -0.25;
  }
  unlift_ = (lift_.transpose() * lift_).inverse() * lift_.transpose();
}

Codec Codec::identity() { return Codec(1, true); }

Codec Codec::pooled(int downscale_factor) {
  if (downscale_factor < 1) throw ConfigError("codec downscale factor must be positive");
  return Codec(downscale_factor, false);
}

LatentImage Codec::encode(const FeatureMap& rgb, int view_id) const {
  if (rgb.channels() != 3) throw ValidationError("codec input must have 3 channels");
  if (rgb.rows() % factor_ != 0 || rgb.cols() % factor_ != 0) {
    throw ValidationError("image size " + std::to_string(rgb.rows()) + "x" + std::to_string(rgb.cols()) +
                          " is not divisible by downscale factor " + std::to_string(factor_));
  }
  const int rows = rgb.rows() / factor_, cols = rgb.cols() / factor_;
  LatentImage out(rows, cols, view_id);
  if (identity_) {
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = rgb.at(r, c, ch);
    return out;
  }
  const double inv_area = 1.0 / (factor_ * factor_);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      Eigen::Vector3d mean = Eigen::Vector3d::Zero();
      for (int dr = 0; dr < factor_; ++dr)
        for (int dc = 0; dc < factor_; ++dc)
          for (int ch = 0; ch < 3; ++ch) mean(ch) += rgb.at(r * factor_ + dr, c * factor_ + dc, ch);
      const Eigen::Vector4d z = lift_ * (mean * inv_area);
      for (int ch = 0; ch < 4; ++ch) out.at(r, c, ch) = z(ch);
    }
  }
  return out;
}

FeatureMap Codec::decode(const LatentImage& latent) const {
  FeatureMap out(latent.rows() * factor_, latent.cols() * factor_, 3);
  for (int r = 0; r < latent.rows(); ++r) {
    for (int c = 0; c < latent.cols(); ++c) {
      Eigen::Vector3d rgb;
      if (identity_) {
        rgb << latent.at(r, c, 0), latent.at(r, c, 1), latent.at(r, c, 2);
      } else {
        const Eigen::Vector4d z(latent.at(r, c, 0), latent.at(r, c, 1), latent.at(r, c, 2), latent.at(r, c, 3));
        rgb = unlift_ * z;
      }
      for (int dr = 0; dr < factor_; ++dr)
        for (int dc = 0; dc < factor_; ++dc)
          for (int ch = 0; ch < 3; ++ch) out.at(r * factor_ + dr, c * factor_ + dc, ch) = rgb(ch);
    }
  }
  return out;
}

std::vector<LatentImage> encode_views(const std::vector<FeatureMap>& images, const Codec& codec) {
  std::vector<LatentImage> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i].same_shape(images.front())) throw ValidationError("all views must share the same image size");
    out.push_back(codec.encode(images[i], static_cast<int>(i)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset

void SceneDataset::validate() const {
  if (latents.size() < 2) throw ValidationError("a scene needs at least 2 views, got " + std::to_string(latents.size()));
  if (latents.size() != cameras.size()) {
    throw ValidationError("scene has " + std::to_string(cameras.size()) + " cameras but " +
                          std::to_string(latents.size()) + " latents");
  }
  for (const auto& z : latents) {
    z.validate();
    if (!z.same_shape(latents.front())) throw ValidationError("all latents must share (H', W')");
  }
  for (const auto& cam : cameras) cam.validate();
  if (ground_truth_edit_region) {
    if (ground_truth_edit_region->size() != latents.size()) throw ValidationError("one edit region per view required");
    for (const auto& m : *ground_truth_edit_region) {
      if (m.rows() != rows() || m.cols() != cols()) throw ValidationError("edit region shape mismatch");
    }
  }
  if (!(near > 0.0 && near < far)) throw ValidationError("scene requires 0 < near < far");
  if (downscale_factor < 1) throw ValidationError("downscale factor must be positive");
}

namespace {

std::string view_file(const char* stem, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%03zu.lte", stem, i);
  return buf;
}

TensorBlob mask_blob(const Mask& m) {
  TensorBlob blob;
  blob.dtype = DType::kFloat32;
  blob.rank = 2;
  blob.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols()), 1};
  blob.values.assign(m.values().begin(), m.values().end());
  return blob;
}

Mask mask_from_blob(const TensorBlob& blob) {
  if (blob.rank != 2) throw FormatError("edit region tensor must be rank 2");
  Mask m(static_cast<int>(blob.dims[0]), static_cast<int>(blob.dims[1]));
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double v = blob.values[i];
    if (v != 0.0 && v != 1.0) throw ValidationError("edit region values must be 0 or 1");
    m.values()[i] = static_cast<std::uint8_t>(v);
  }
  return m;
}

json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

void write_scene(const SceneDataset& scene, const fs::path& dir) {
  scene.validate();
  fs::create_directories(dir);
  json manifest;
  manifest["n_views"] = scene.size();
  manifest["latent_shape"] = {scene.rows(), scene.cols(), kLatentChannels};
  manifest["near"] = scene.near;
  manifest["far"] = scene.far;
  manifest["downscale_factor"] = scene.downscale_factor;
  manifest["bbox"] = {vec3_json(scene.bbox_lo), vec3_json(scene.bbox_hi)};
  json views = json::array();
  for (std::size_t i = 0; i < scene.size(); ++i) {
    json v;
    v["latent_file"] = view_file("latent", i);
    v["camera"] = camera_to_json(scene.cameras[i]);
    write_tensor_file(dir / view_file("latent", i), to_blob(scene.latents[i], DType::kFloat32));
    if (scene.ground_truth_edit_region) {
      v["edit_region_file"] = view_file("region", i);
      write_tensor_file(dir / view_file("region", i), mask_blob((*scene.ground_truth_edit_region)[i]));
    }
    views.push_back(v);
  }
  manifest["views"] = views;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

SceneDataset load_scene(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw FormatError("missing manifest.json in " + dir.string());
  json manifest;
  try {
    std::ifstream in(manifest_path);
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  for (const char* key : {"n_views", "latent_shape", "views"}) {
    if (!manifest.contains(key)) throw FormatError(std::string("manifest missing field '") + key + "'");
  }
  SceneDataset scene;
  try {
    const auto n = manifest.at("n_views").get<std::size_t>();
    const auto shape = manifest.at("latent_shape").get<std::vector<int>>();
    if (shape.size() != 3 || shape[2] != kLatentChannels) throw ValidationError("latent_shape must be [H', W', 4]");
    scene.near = manifest.value("near", scene.near);
    scene.far = manifest.value("far", scene.far);
    scene.downscale_factor = manifest.value("downscale_factor", 1);
    if (manifest.contains("bbox")) {
      scene.bbox_lo = vec3_from(manifest["bbox"].at(0));
      scene.bbox_hi = vec3_from(manifest["bbox"].at(1));
    }
    const auto& views = manifest.at("views");
    if (!views.is_array()) throw FormatError("manifest 'views' must be an array");
    std::size_t latent_files = 0;
    for (const auto& v : views) latent_files += v.contains("latent_file") ? 1 : 0;
    if (views.size() != n || latent_files != n) {
      throw ValidationError("manifest declares " + std::to_string(n) + " views, lists " +
                            std::to_string(views.size()) + " cameras and " + std::to_string(latent_files) +
                            " latent files");
    }
    bool any_region = false;
    std::vector<Mask> regions;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& v = views[i];
      if (!v.contains("camera")) throw ValidationError("view " + std::to_string(i) + " has no camera");
      scene.cameras.push_back(camera_from_json(v["camera"]));
      const fs::path latent_path = dir / v["latent_file"].get<std::string>();
      if (!fs::exists(latent_path)) throw ValidationError("latent file missing: " + latent_path.string());
      LatentImage z = latent_from_blob(read_tensor_file(latent_path), static_cast<int>(i));
      if (z.rows() != shape[0] || z.cols() != shape[1]) {
        throw ValidationError("latent " + latent_path.filename().string() + " does not match latent_shape");
      }
      scene.latents.push_back(std::move(z));
      if (v.contains("edit_region_file")) {
        any_region = true;
        regions.push_back(mask_from_blob(read_tensor_file(dir / v["edit_region_file"].get<std::string>())));
      }
    }
    if (any_region) scene.ground_truth_edit_region = std::move(regions);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  scene.validate();
  return scene;
}

// ---------------------------------------------------------------------------
// Analytic box

std::optional<std::pair<double, double>> intersect_box(const Vec3& origin, const Vec3& dir, const Vec3& lo,
                                                       const Vec3& hi, double t_min, double t_max) {
  double t0 = t_min, t1 = t_max;
  for (int a = 0; a < 3; ++a) {
    if (dir(a) == 0.0) {
      if (origin(a) < lo(a) || origin(a) > hi(a)) return std::nullopt;
      continue;
    }
    double ta = (lo(a) - origin(a)) / dir(a);
    double tb = (hi(a) - origin(a)) / dir(a);
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 >= t1) return std::nullopt;
  }
  return std::make_pair(t0, t1);
}

Eigen::Vector4d AnalyticBox::latent_at(const Vec3& p) const {
  for (const auto& reg : regions) {
    if ((p.array() >= reg.lo.array()).all() && (p.array() <= reg.hi.array()).all()) return reg.latent;
  }
  return base_latent;
}

Eigen::Vector4d AnalyticBox::render(const Vec3& origin, const Vec3& dir, double t_near, double t_far) const {
  const auto hit = intersect_box(origin, dir, lo, hi, t_near, t_far);
  if (!hit) return Eigen::Vector4d::Zero();
  const auto [t_in, t_out] = *hit;
  std::vector<double> breaks{t_in, t_out};
  for (const auto& reg : regions) {
    if (auto r = intersect_box(origin, dir, reg.lo, reg.hi, t_in, t_out)) {
      breaks.push_back(r->first);
      breaks.push_back(r->second);
    }
  }
  std::sort(breaks.begin(), breaks.end());
  Eigen::Vector4d out = Eigen::Vector4d::Zero();
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
    const double a = breaks[i], b = breaks[i + 1];
    if (b <= a) continue;
    const Eigen::Vector4d c = latent_at(origin + 0.5 * (a + b) * dir);
    out += c * (std::exp(-sigma * (a - t_in)) - std::exp(-sigma * (b - t_in)));
  }
  return out;
}

double AnalyticBox::edit_region_chord(const Vec3& origin, const Vec3& dir, double t_near, double t_far) const {
  if (edit_region >= regions.size()) return 0.0;
  const auto box_hit = intersect_box(origin, dir, lo, hi, t_near, t_far);
  if (!box_hit) return 0.0;
  const auto& reg = regions[edit_region];
  const auto hit = intersect_box(origin, dir, reg.lo, reg.hi, box_hit->first, box_hit->second);
  return hit ? hit->second - hit->first : 0.0;
}

AnalyticBox box_volume() {
  AnalyticBox box;
  // Tagged region R: an upper corner block, visible from an elevated ring.
  box.regions.push_back({Vec3(-0.2, -1.0, 0.3), Vec3(1.0, 1.0, 1.0), Eigen::Vector4d(-0.2, 0.5, 0.3, -0.4)});
  // Lower band for extra structure.
  box.regions.push_back({Vec3(-1.0, -1.0, -1.0), Vec3(1.0, 1.0, -0.4), Eigen::Vector4d(0.1, 0.2, -0.5, 0.3)});
  box.edit_region = 0;
  return box;
}

SceneDataset synth_scene(const SceneSpec& spec, std::uint64_t seed) {
  if (spec.name != "box") throw ConfigError("unknown synthetic scene '" + spec.name + "'");
  if (spec.views < 2) throw ValidationError("synthetic scene needs at least 2 views");
  if (spec.rows < 1 || spec.cols < 1) throw ValidationError("synthetic scene needs a positive latent size");
  if (spec.downscale_factor < 1) throw ValidationError("downscale factor must be positive");

  const AnalyticBox box = box_volume();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI / spec.views);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double azimuth0 = phase(rng);
  const double elev = spec.elevation_deg * M_PI / 180.0;
  const int f = spec.downscale_factor;
  const double focal = 0.9 * std::max(spec.rows, spec.cols) * f;

  SceneDataset scene;
  scene.near = spec.radius - 2.0;
  scene.far = spec.radius + 2.0;
  scene.downscale_factor = f;
  scene.bbox_lo = box.lo;
  scene.bbox_hi = box.hi;
  scene.ground_truth_edit_region.emplace();
  const auto pixels = all_pixels(spec.rows, spec.cols);
  for (int i = 0; i < spec.views; ++i) {
    const double az = azimuth0 + 2.0 * M_PI * i / spec.views;
    const Vec3 eye(spec.radius * std::cos(elev) * std::cos(az), spec.radius * std::cos(elev) * std::sin(az),
                   spec.radius * std::sin(elev));
    const CameraParams truth = look_at(eye, Vec3::Zero(), Vec3::UnitZ(), Vec2(focal, focal),
                                       Vec2(0.5 * spec.cols * f, 0.5 * spec.rows * f));
    const auto rays = generate_rays(truth, pixels, spec.rows, spec.cols, f, scene.near, scene.far);
    LatentImage z(spec.rows, spec.cols, i);
    Mask region(spec.rows, spec.cols);
    for (std::size_t k = 0; k < rays.size(); ++k) {
      const auto [row, col] = pixels[k];
      const Eigen::Vector4d v = box.render(rays[k].origin, rays[k].direction, rays[k].t_near, rays[k].t_far);
      // Stored latents are float32 on disk; keep the in-memory copy identical.
      for (int ch = 0; ch < 4; ++ch) z.at(row, col, ch) = static_cast<double>(static_cast<float>(v(ch)));
      region.at(row, col) = box.edit_region_chord(rays[k].origin, rays[k].direction, rays[k].t_near, rays[k].t_far) > 0;
    }
    CameraParams stored = truth;
    if (spec.camera_noise > 0.0) {
      for (int a = 0; a < 3; ++a) stored.translation0(a) += spec.camera_noise * noise(rng);
      stored.focal0 += Vec2::Constant(spec.camera_noise * noise(rng));
    }
    scene.latents.push_back(std::move(z));
    scene.cameras.push_back(stored);
    scene.ground_truth_edit_region->push_back(std::move(region));
  }
  scene.validate();
  return scene;
}

}  // namespace latentedit
