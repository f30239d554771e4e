#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "latentedit/tensor.hpp"

namespace latentedit {

// Little-endian binary tensor container shared by latent files, checkpoints
// and the external denoiser protocol:
//
//   bytes 0..3   magic "LTE1"
//   byte  4      dtype code (0 = float32, 1 = float64)
//   byte  5      rank (1..3)
//   bytes 6..7   reserved, zero
//   bytes 8..19  dims, 3 x u32 (unused trailing dims are 1)
//   payload      row-major values
enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

inline constexpr std::size_t kTensorHeaderBytes = 20;

struct TensorBlob {
  DType dtype = DType::kFloat32;
  std::uint8_t rank = 3;
  std::array<std::uint32_t, 3> dims{1, 1, 1};
  std::vector<double> values;

  std::size_t element_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
};

void write_tensor(std::ostream& out, const TensorBlob& blob);
TensorBlob read_tensor(std::istream& in);

void write_tensor_file(const std::filesystem::path& path, const TensorBlob& blob);
TensorBlob read_tensor_file(const std::filesystem::path& path);

TensorBlob to_blob(const FeatureMap& map, DType dtype = DType::kFloat32);
TensorBlob to_blob(const std::vector<double>& flat, DType dtype = DType::kFloat64);
LatentImage latent_from_blob(const TensorBlob& blob, int view_id = 0);

}  // namespace latentedit
