#include "latentedit/delta.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>

#include "latentedit/errors.hpp"

namespace latentedit {

DeltaScores delta_scores(const Denoiser& d, const LatentImage& z, const LatentImage* image_cond, const Prompt& text,
                         const NoiseSchedule& sched, std::uint64_t seed) {
  const NoisedLatent noised = add_noise(z, sched.delta_t, sched, seed);
  record_noise_if_supported(d, noised.eps);
  const LatentImage cond = d.eps(noised.z_t, noised.t, image_cond, text);
  const LatentImage uncond = d.eps(noised.z_t, noised.t, image_cond, std::nullopt);
  if (!cond.same_shape(z) || !uncond.same_shape(z)) throw ValidationError("delta_scores: denoiser changed the shape");
  DeltaScores out;
  out.data = FeatureMap(z.rows(), z.cols(), kLatentChannels);
  out.view_id = z.view_id();
  out.delta_t_used = sched.delta_t;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data.values()[i] = std::abs(cond.values()[i] - uncond.values()[i]);
  }
  return out;
}

std::vector<double> normalized_score_map(const DeltaScores& scores) {
  const FeatureMap& s = scores.data;
  std::vector<double> m(s.pixel_count());
  for (int r = 0; r < s.rows(); ++r) {
    for (int c = 0; c < s.cols(); ++c) {
      double acc = 0.0;
      for (double v : s.pixel(r, c)) acc += v;
      m[static_cast<std::size_t>(r) * s.cols() + c] = acc / s.channels();
    }
  }
  if (m.empty()) return m;
  const auto [lo_it, hi_it] = std::minmax_element(m.begin(), m.end());
  const double lo = *lo_it, hi = *hi_it;
  // A spread at rounding level (differences of equal predictions) counts as
  // constant.
  if (!(hi - lo > 1e-9 * std::abs(hi))) {
    std::fill(m.begin(), m.end(), hi > 0.0 ? 1.0 : 0.0);
    return m;
  }
  for (double& v : m) v = (v - lo) / (hi - lo);
  return m;
}

Mask threshold_mask(const DeltaScores& scores, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw ValidationError("mask threshold must lie in [0, 1]");
  const auto m = normalized_score_map(scores);
  Mask out(scores.data.rows(), scores.data.cols());
  const auto raw = scores.data.values();
  // An all-zero score map stays empty at any threshold.
  if (std::all_of(raw.begin(), raw.end(), [](double v) { return v == 0.0; })) {
    out.threshold_used = mu;
    return out;
  }
  for (std::size_t i = 0; i < m.size(); ++i) out.values()[i] = m[i] >= mu ? 1 : 0;
  out.threshold_used = mu;
  return out;
}

// ---------------------------------------------------------------------------
// K-medoids

namespace {

std::vector<PixelIndex> positives(const Mask& mask) {
  std::vector<PixelIndex> pts;
  for (int r = 0; r < mask.rows(); ++r)
    for (int c = 0; c < mask.cols(); ++c)
      if (mask.at(r, c)) pts.push_back({r, c});
  return pts;
}

double dist(const PixelIndex& a, const PixelIndex& b) {
  return std::hypot(static_cast<double>(a.row - b.row), static_cast<double>(a.col - b.col));
}

}  // namespace

std::vector<PixelIndex> kmedoids_query_points(const Mask& mask, int k, std::uint64_t seed, int max_points) {
  if (k < 1) throw ValidationError("k-medoids needs K >= 1");
  std::vector<PixelIndex> pts = positives(mask);
  if (static_cast<int>(pts.size()) < k) {
    throw ValidationError("mask has " + std::to_string(pts.size()) + " positive pixels, fewer than K = " +
                          std::to_string(k));
  }
  if (static_cast<int>(pts.size()) == k) return pts;
  if (max_points > 0 && static_cast<int>(pts.size()) > std::max(max_points, k)) {
    std::mt19937_64 rng(seed);
    std::shuffle(pts.begin(), pts.end(), rng);
    pts.resize(static_cast<std::size_t>(std::max(max_points, k)));
    std::sort(pts.begin(), pts.end(), [](const PixelIndex& a, const PixelIndex& b) {
      return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
  }
  const std::size_t n = pts.size();
  Eigen::MatrixXd d(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = dist(pts[i], pts[j]);

  // Small problems are solved exactly by enumerating every K-subset.
  double subsets = 1.0;
  for (int i = 0; i < k; ++i) subsets *= static_cast<double>(n - static_cast<std::size_t>(i)) / (i + 1);
  if (subsets <= 50000.0) {
    std::vector<Eigen::Index> pick(static_cast<std::size_t>(k)), best_pick;
    double best_cost = std::numeric_limits<double>::infinity();
    std::function<void(int, Eigen::Index, const Eigen::VectorXd&)> enumerate =
        [&](int depth, Eigen::Index from, const Eigen::VectorXd& near) {
          if (depth == k) {
            const double cost = near.sum();
            if (cost < best_cost - 1e-12) {
              best_cost = cost;
              best_pick = pick;
            }
            return;
          }
          for (Eigen::Index i = from; i < static_cast<Eigen::Index>(n); ++i) {
            pick[static_cast<std::size_t>(depth)] = i;
            enumerate(depth + 1, i + 1, near.cwiseMin(d.col(i)));
          }
        };
    enumerate(0, 0, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), std::numeric_limits<double>::infinity()));
    std::vector<PixelIndex> out;
    for (Eigen::Index i : best_pick) out.push_back(pts[static_cast<std::size_t>(i)]);
    return out;
  }

  // BUILD: greedy selection, each new medoid giving the largest cost drop.
  std::vector<Eigen::Index> medoids;
  Eigen::VectorXd nearest = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n),
                                                      std::numeric_limits<double>::infinity());
  std::vector<bool> is_medoid(n, false);
  for (int m = 0; m < k; ++m) {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index best_i = -1;
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
      if (is_medoid[static_cast<std::size_t>(i)]) continue;
      const double cost = nearest.cwiseMin(d.col(i)).sum();
      if (cost < best) {
        best = cost;
        best_i = i;
      }
    }
    medoids.push_back(best_i);
    is_medoid[static_cast<std::size_t>(best_i)] = true;
    nearest = nearest.cwiseMin(d.col(best_i));
  }

  // SWAP: apply the best improving (medoid, non-medoid) exchange until none.
  auto total_cost = [&](const std::vector<Eigen::Index>& meds) {
    Eigen::VectorXd near = d.col(meds[0]);
    for (std::size_t j = 1; j < meds.size(); ++j) near = near.cwiseMin(d.col(meds[j]));
    return near.sum();
  };
  double current = total_cost(medoids);
  for (int iter = 0; iter < 100; ++iter) {
    double best = current;
    std::size_t best_m = 0;
    Eigen::Index best_h = -1;
    for (std::size_t m = 0; m < medoids.size(); ++m) {
      // Nearest distance to the other medoids.
      Eigen::VectorXd others = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n),
                                                         std::numeric_limits<double>::infinity());
      for (std::size_t j = 0; j < medoids.size(); ++j)
        if (j != m) others = others.cwiseMin(d.col(medoids[j]));
      for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(n); ++h) {
        if (is_medoid[static_cast<std::size_t>(h)]) continue;
        const double cost = others.cwiseMin(d.col(h)).sum();
        if (cost < best - 1e-12) {
          best = cost;
          best_m = m;
          best_h = h;
        }
      }
    }
    if (best_h < 0) break;
    is_medoid[static_cast<std::size_t>(medoids[best_m])] = false;
    is_medoid[static_cast<std::size_t>(best_h)] = true;
    medoids[best_m] = best_h;
    current = best;
  }

  std::vector<PixelIndex> out;
  for (Eigen::Index i : medoids) out.push_back(pts[static_cast<std::size_t>(i)]);
  return out;
}

double kmedoids_cost(const Mask& mask, std::span<const PixelIndex> medoids) {
  double total = 0.0;
  for (const auto& p : positives(mask)) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& m : medoids) best = std::min(best, dist(p, m));
    total += best;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Consolidation

Mask erode(const Mask& m, int radius) { return dilate(m.complement(), radius).complement(); }

std::vector<Mask> consolidate_masks(const std::vector<Mask>& masks, const SceneDataset& scene,
                                    std::span<const CameraParams> cameras, const FieldState& field,
                                    const ConsolidateConfig& cfg) {
  if (masks.size() != cameras.size()) throw ValidationError("consolidate_masks: one mask per view required");
  if (masks.size() < 2) return masks;
  const int rows = scene.rows(), cols = scene.cols();
  for (const auto& m : masks) {
    if (m.rows() != rows || m.cols() != cols) throw ValidationError("consolidate_masks: mask shape mismatch");
  }
  const ViewGeometry g = view_geometry(scene);
  const double tol =
      cfg.depth_tolerance > 0.0 ? cfg.depth_tolerance : 2.0 * (g.far - g.near) / cfg.render.samples_per_ray;

  std::vector<DepthMap> depths;
  for (const auto& cam : cameras) depths.push_back(render_depth(field, cam, g, cfg.render));

  // Lift positives, cluster by cluster around each view's medoids.
  std::vector<Vec3> pool;
  for (std::size_t v = 0; v < masks.size(); ++v) {
    const Mask& m = masks[v];
    const std::size_t area = m.area();
    if (area == 0) continue;
    const auto pixels = positives(m);
    const auto medoids = kmedoids_query_points(m, static_cast<int>(std::min<std::size_t>(area, cfg.k_medoids)),
                                               cfg.seed + v);
    std::vector<std::size_t> order(pixels.size());
    std::vector<std::size_t> cluster(pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < medoids.size(); ++c) {
        const double dd = dist(pixels[i], medoids[c]);
        if (dd < best) {
          best = dd;
          cluster[i] = c;
        }
      }
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cluster[a] < cluster[b]; });
    const auto rays = generate_rays(cameras[v], pixels, rows, cols, g.downscale, g.near, g.far);
    for (std::size_t i : order) {
      const auto& px = pixels[i];
      const std::size_t idx = static_cast<std::size_t>(px.row) * cols + px.col;
      const double w = depths[v].weight_sum[idx];
      const double t = depths[v].depth[idx];
      if (!(w >= cfg.min_weight) || !std::isfinite(t)) continue;
      pool.push_back(rays[i].origin + t * rays[i].direction);
    }
  }

  std::vector<Mask> out;
  for (std::size_t v = 0; v < masks.size(); ++v) {
    const CameraParams& cam = cameras[v];
    const Mat3 r = cam.rotation();
    const Vec3 center = cam.translation();
    const double s = g.downscale;
    const Vec2 f = cam.focal() / s, c = cam.principal() / s;
    Mask splat(rows, cols);
    for (const Vec3& p : pool) {
      const Vec3 x = r.transpose() * (p - center);
      if (x.z() <= 0.0) continue;
      const double u = f.x() * x.x() / x.z() + c.x();
      const double vv = f.y() * x.y() / x.z() + c.y();
      const int col = static_cast<int>(std::floor(u)), row = static_cast<int>(std::floor(vv));
      if (row < 0 || row >= rows || col < 0 || col >= cols) continue;
      const std::size_t idx = static_cast<std::size_t>(row) * cols + col;
      const double surface = depths[v].depth[idx];
      if (!(depths[v].weight_sum[idx] >= cfg.min_weight) || !std::isfinite(surface)) continue;
      if ((p - center).norm() > surface + tol) continue;
      splat.at(row, col) = 1;
    }
    out.push_back(mask_union(masks[v], erode(dilate(splat, 1), 1)));
    out.back().threshold_used = masks[v].threshold_used;
  }
  return out;
}

std::vector<Mask> consolidate_masks(const std::vector<Mask>& masks, const SceneDataset& scene,
                                    const FieldState& field, const ConsolidateConfig& cfg) {
  return consolidate_masks(masks, scene, scene.cameras, field, cfg);
}

void write_pgm(const Mask& mask, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << mask.cols() << ' ' << mask.rows() << "\n255\n";
  for (std::uint8_t v : mask.values()) out.put(static_cast<char>(v ? 255 : 0));
}

}  // namespace latentedit
