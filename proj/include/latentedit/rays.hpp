#pragma once

#include <span>
#include <vector>

#include "latentedit/camera.hpp"

namespace latentedit {

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();  // unit length
  double t_near = 0.0;
  double t_far = 1.0;
};

struct PixelIndex {
  int row = 0;
  int col = 0;

  bool operator==(const PixelIndex&) const = default;
};

// Camera-frame direction (unnormalised, z = 1) through the centre of latent
// pixel (row, col), using intrinsics divided by `downscale`. Radial
// distortion is inverted by fixed-point iteration.
Vec3 pixel_camera_direction(const CameraParams& camera, double row, double col, int downscale);

// One ray per pixel through its centre, starting at the camera centre.
// Throws ValidationError for pixels outside [0, rows) x [0, cols).
std::vector<Ray> generate_rays(const CameraParams& camera, std::span<const PixelIndex> pixels, int rows, int cols,
                               int downscale, double t_near, double t_far);

// All pixels of a rows x cols grid in row-major order.
std::vector<PixelIndex> all_pixels(int rows, int cols);

}  // namespace latentedit
