#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace latentedit {

inline constexpr int kLatentChannels = 4;

// Dense row-major (rows, cols, channels) map of doubles.
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(int rows, int cols, int channels);
  FeatureMap(int rows, int cols, int channels, std::vector<double> data);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(rows_) * cols_; }

  double& at(int r, int c, int ch) { return data_[index(r, c, ch)]; }
  double at(int r, int c, int ch) const { return data_[index(r, c, ch)]; }

  std::span<double> pixel(int r, int c) { return {data_.data() + index(r, c, 0), static_cast<std::size_t>(channels_)}; }
  std::span<const double> pixel(int r, int c) const {
    return {data_.data() + index(r, c, 0), static_cast<std::size_t>(channels_)};
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool same_shape(const FeatureMap& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_ && channels_ == other.channels_;
  }
  bool all_finite() const;

  friend bool operator==(const FeatureMap& a, const FeatureMap& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 protected:
  std::size_t index(int r, int c, int ch) const {
    return (static_cast<std::size_t>(r) * cols_ + c) * channels_ + ch;
  }

  int rows_ = 0;
  int cols_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

// A (H', W', 4) latent feature map belonging to one view.
class LatentImage : public FeatureMap {
 public:
  LatentImage() : FeatureMap(0, 0, kLatentChannels) {}
  LatentImage(int rows, int cols, int view_id = 0);
  LatentImage(int rows, int cols, std::vector<double> data, int view_id = 0);

  int view_id() const { return view_id_; }
  void set_view_id(int id) { view_id_ = id; }

  // Throws ValidationError when dimensions are empty or any entry is non-finite.
  void validate() const;

  friend bool operator==(const LatentImage& a, const LatentImage& b) {
    return a.view_id_ == b.view_id_ && static_cast<const FeatureMap&>(a) == static_cast<const FeatureMap&>(b);
  }

 private:
  int view_id_ = 0;
};

// Binary (H', W') map. Broadcast over latent channels where it is applied.
class Mask {
 public:
  Mask() = default;
  Mask(int rows, int cols, std::uint8_t fill = 0);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  std::uint8_t& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  std::uint8_t at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  std::span<std::uint8_t> values() { return data_; }
  std::span<const std::uint8_t> values() const { return data_; }

  std::size_t area() const;
  double area_fraction() const;
  bool empty_selection() const { return area() == 0; }

  Mask complement() const;
  // Every positive pixel of this mask is positive in `other`.
  bool subset_of(const Mask& other) const;

  double threshold_used = 0.0;

  friend bool operator==(const Mask& a, const Mask& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<std::uint8_t> data_;
};

Mask mask_union(const Mask& a, const Mask& b);
// Intersection over union; two empty masks give 1.
double mask_iou(const Mask& a, const Mask& b);
// 8-neighbourhood dilation by `radius` pixels.
Mask dilate(const Mask& m, int radius = 1);

}  // namespace latentedit
