#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "latentedit/camera.hpp"
#include "latentedit/tensor.hpp"

namespace latentedit {

// Image <-> latent boundary. Two desk-scale codecs are provided:
//  - identity (factor 1): RGB is zero-padded to 4 channels, decode truncates.
//  - pooled (factor f): f x f average pooling followed by a fixed 3 -> 4
//    linear lift; decode applies the lift's pseudo-inverse and nearest
//    upsampling.
class Codec {
 public:
  static Codec identity();
  static Codec pooled(int downscale_factor);

  int downscale_factor() const { return factor_; }
  bool is_identity() const { return factor_ == 1 && identity_; }

  LatentImage encode(const FeatureMap& rgb, int view_id = 0) const;
  FeatureMap decode(const LatentImage& latent) const;

 private:
  Codec(int factor, bool identity);

  int factor_ = 1;
  bool identity_ = true;
  Eigen::Matrix<double, 4, 3> lift_;
  Eigen::Matrix<double, 3, 4> unlift_;
};

struct SceneDataset {
  std::vector<LatentImage> latents;
  std::vector<CameraParams> cameras;
  std::optional<std::vector<Mask>> ground_truth_edit_region;
  double near = 2.0;
  double far = 6.0;
  // Cameras are stored at image resolution; rays are generated with
  // intrinsics divided by this factor.
  int downscale_factor = 1;
  Vec3 bbox_lo{-1.0, -1.0, -1.0};
  Vec3 bbox_hi{1.0, 1.0, 1.0};

  std::size_t size() const { return latents.size(); }
  int rows() const { return latents.empty() ? 0 : latents.front().rows(); }
  int cols() const { return latents.empty() ? 0 : latents.front().cols(); }

  // N >= 2, matching lengths, shared latent shape, finite values.
  void validate() const;

  bool operator==(const SceneDataset& o) const = default;
};

SceneDataset load_scene(const std::filesystem::path& dir);
void write_scene(const SceneDataset& scene, const std::filesystem::path& dir);

std::vector<LatentImage> encode_views(const std::vector<FeatureMap>& images, const Codec& codec);

// Constant-density box with axis-aligned colour regions. Rendering is exact:
// colour is piecewise constant along a ray, so each interval contributes
// c * (T(a) - T(b)) with T(t) = exp(-sigma (t - t_entry)).
struct AnalyticBox {
  struct Region {
    Vec3 lo, hi;
    Eigen::Vector4d latent;
  };
  Vec3 lo{-1.0, -1.0, -1.0};
  Vec3 hi{1.0, 1.0, 1.0};
  double sigma = 12.0;
  Eigen::Vector4d base_latent{0.6, -0.3, 0.2, 0.4};
  std::vector<Region> regions;  // first match wins
  std::size_t edit_region = 0;  // index into regions of the tagged region R

  Eigen::Vector4d latent_at(const Vec3& p) const;
  Eigen::Vector4d render(const Vec3& origin, const Vec3& dir, double t_near, double t_far) const;
  // Chord length of the ray inside the tagged region (clipped to the box and
  // [t_near, t_far]); zero when the ray misses it.
  double edit_region_chord(const Vec3& origin, const Vec3& dir, double t_near, double t_far) const;
};

// Slab intersection of a ray with an axis-aligned box; returns [t0, t1]
// clipped to [t_min, t_max] or nothing.
std::optional<std::pair<double, double>> intersect_box(const Vec3& origin, const Vec3& dir, const Vec3& lo,
                                                       const Vec3& hi, double t_min, double t_max);

struct SceneSpec {
  std::string name = "box";
  int views = 8;
  int rows = 48;
  int cols = 48;
  double radius = 4.0;
  double elevation_deg = 30.0;
  // Standard deviation of the perturbation applied to the stored camera
  // estimates (translation in world units, focal in pixels). Latents are
  // always rendered with the unperturbed cameras.
  double camera_noise = 0.0;
  // Codec factor f: cameras describe an image of (f rows) x (f cols) pixels
  // and latents are rendered at rows x cols.
  int downscale_factor = 1;
};

AnalyticBox box_volume();
SceneDataset synth_scene(const SceneSpec& spec, std::uint64_t seed);

}  // namespace latentedit
