#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "latentedit/diffusion.hpp"
#include "latentedit/field.hpp"
#include "latentedit/scene.hpp"

namespace latentedit {

// |eps(z_dt, I, C) - eps(z_dt, I, 0)| per element, both calls on the same
// noised latent.
struct DeltaScores {
  FeatureMap data;
  int view_id = 0;
  double delta_t_used = 0.0;
};

DeltaScores delta_scores(const Denoiser& d, const LatentImage& z, const LatentImage* image_cond, const Prompt& text,
                         const NoiseSchedule& sched, std::uint64_t seed);

// Channel mean of the scores, min-max normalised over the view. A map with
// no spread (relative to rounding) normalises to 1 when it is positive and to 0 otherwise.
std::vector<double> normalized_score_map(const DeltaScores& scores);

// 1 where the normalised score is >= mu. Throws ValidationError unless
// 0 <= mu <= 1.
Mask threshold_mask(const DeltaScores& scores, double mu);

// Partitioning-around-medoids over the positive pixel coordinates; exact
// enumeration when there are at most 50000 candidate medoid sets. Masks with
// more than `max_points` positives are subsampled with `seed` first.
std::vector<PixelIndex> kmedoids_query_points(const Mask& mask, int k, std::uint64_t seed, int max_points = 1500);

// Total distance from every positive pixel to its nearest medoid.
double kmedoids_cost(const Mask& mask, std::span<const PixelIndex> medoids);

struct ConsolidateConfig {
  RenderConfig render;
  // Rays with accumulated weight below this are treated as empty space.
  double min_weight = 0.5;
  // Reprojected points further than this behind the target view's surface
  // are occluded (world units; 0 = two sample spacings).
  double depth_tolerance = 0.0;
  int k_medoids = 8;
  std::uint64_t seed = 0;
};

// Lifts every view's mask to 3D through the field's expected depth, pools
// the points, splats them into every view with a visibility test, closes
// the splat footprint with a 1-pixel dilation/erosion and unions it with
// the original mask.
std::vector<Mask> consolidate_masks(const std::vector<Mask>& masks, const SceneDataset& scene,
                                    std::span<const CameraParams> cameras, const FieldState& field,
                                    const ConsolidateConfig& cfg);
std::vector<Mask> consolidate_masks(const std::vector<Mask>& masks, const SceneDataset& scene,
                                    const FieldState& field, const ConsolidateConfig& cfg = {});

Mask erode(const Mask& m, int radius = 1);

// Binary 8-bit PGM, 0 / 255.
void write_pgm(const Mask& mask, const std::filesystem::path& path);

}  // namespace latentedit
