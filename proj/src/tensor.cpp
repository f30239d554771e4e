#include "latentedit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "latentedit/errors.hpp"

namespace latentedit {

FeatureMap::FeatureMap(int rows, int cols, int channels)
    : rows_(rows), cols_(cols), channels_(channels) {
  if (rows < 0 || cols < 0 || channels < 0) throw ValidationError("negative feature map dimension");
  data_.assign(static_cast<std::size_t>(rows) * cols * channels, 0.0);
}

FeatureMap::FeatureMap(int rows, int cols, int channels, std::vector<double> data)
    : rows_(rows), cols_(cols), channels_(channels), data_(std::move(data)) {
  if (rows < 0 || cols < 0 || channels < 0) throw ValidationError("negative feature map dimension");
  if (data_.size() != static_cast<std::size_t>(rows) * cols * channels) {
    throw ValidationError("feature map payload has " + std::to_string(data_.size()) + " values, expected " +
                          std::to_string(static_cast<std::size_t>(rows) * cols * channels));
  }
}

bool FeatureMap::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

LatentImage::LatentImage(int rows, int cols, int view_id)
    : FeatureMap(rows, cols, kLatentChannels), view_id_(view_id) {}

LatentImage::LatentImage(int rows, int cols, std::vector<double> data, int view_id)
    : FeatureMap(rows, cols, kLatentChannels, std::move(data)), view_id_(view_id) {}

void LatentImage::validate() const {
  if (rows_ < 1 || cols_ < 1) throw ValidationError("latent image must be at least 1x1");
  if (channels_ != kLatentChannels) throw ValidationError("latent image must have exactly 4 channels");
  if (!all_finite()) throw ValidationError("latent image of view " + std::to_string(view_id_) + " has non-finite values");
}

Mask::Mask(int rows, int cols, std::uint8_t fill) : rows_(rows), cols_(cols) {
  if (rows < 0 || cols < 0) throw ValidationError("negative mask dimension");
  data_.assign(static_cast<std::size_t>(rows) * cols, fill ? 1 : 0);
}

std::size_t Mask::area() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

double Mask::area_fraction() const {
  return data_.empty() ? 0.0 : static_cast<double>(area()) / static_cast<double>(data_.size());
}

Mask Mask::complement() const {
  Mask out(rows_, cols_);
  for (std::size_t i = 0; i < data_.size(); ++i) out.data_[i] = data_[i] ? 0 : 1;
  out.threshold_used = threshold_used;
  return out;
}

bool Mask::subset_of(const Mask& other) const {
  if (rows_ != other.rows_ || cols_ != other.cols_) return false;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (data_[i] && !other.data_[i]) return false;
  }
  return true;
}

Mask mask_union(const Mask& a, const Mask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("mask union: shape mismatch");
  Mask out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = (a.values()[i] || b.values()[i]) ? 1 : 0;
  out.threshold_used = a.threshold_used;
  return out;
}

double mask_iou(const Mask& a, const Mask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("mask iou: shape mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.values()[i], y = b.values()[i];
    inter += (x && y);
    uni += (x || y);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Mask dilate(const Mask& m, int radius) {
  Mask out(m.rows(), m.cols());
  out.threshold_used = m.threshold_used;
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) {
      if (!m.at(r, c)) continue;
      for (int dr = -radius; dr <= radius; ++dr) {
        for (int dc = -radius; dc <= radius; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr >= 0 && rr < m.rows() && cc >= 0 && cc < m.cols()) out.at(rr, cc) = 1;
        }
      }
    }
  }
  return out;
}

}  // namespace latentedit
