#include "latentedit/rays.hpp"

#include <string>

namespace latentedit {

Vec3 pixel_camera_direction(const CameraParams& camera, double row, double col, int downscale) {
  const double s = static_cast<double>(downscale);
  const Vec2 f = camera.focal() / s;
  const Vec2 c = camera.principal() / s;
  const double xd = (col + 0.5 - c.x()) / f.x();
  const double yd = (row + 0.5 - c.y()) / f.y();
  double xn = xd, yn = yd;
  const double k1 = camera.distortion.x(), k2 = camera.distortion.y();
  if (k1 != 0.0 || k2 != 0.0) {
    for (int it = 0; it < 30; ++it) {
      const double r2 = xn * xn + yn * yn;
      const double d = 1.0 + k1 * r2 + k2 * r2 * r2;
      xn = xd / d;
      yn = yd / d;
    }
  }
  return {xn, yn, 1.0};
}

std::vector<Ray> generate_rays(const CameraParams& camera, std::span<const PixelIndex> pixels, int rows, int cols,
                               int downscale, double t_near, double t_far) {
  if (!(t_near < t_far)) throw ValidationError("ray bounds require t_near < t_far");
  const Mat3 r = camera.rotation();
  const Vec3 origin = camera.translation();
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& px : pixels) {
    if (px.row < 0 || px.row >= rows || px.col < 0 || px.col >= cols) {
      throw ValidationError("pixel (" + std::to_string(px.row) + ", " + std::to_string(px.col) +
                            ") outside latent grid " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    Ray ray;
    ray.origin = origin;
    ray.direction = (r * pixel_camera_direction(camera, px.row, px.col, downscale)).normalized();
    ray.t_near = t_near;
    ray.t_far = t_far;
    rays.push_back(ray);
  }
  return rays;
}

std::vector<PixelIndex> all_pixels(int rows, int cols) {
  std::vector<PixelIndex> px;
  px.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) px.push_back({r, c});
  return px;
}

}  // namespace latentedit
