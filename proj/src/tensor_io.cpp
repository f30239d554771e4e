#include "latentedit/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "latentedit/errors.hpp"

namespace latentedit {
namespace {

static_assert(std::endian::native == std::endian::little, "tensor container assumes a little-endian host");

constexpr char kMagic[4] = {'L', 'T', 'E', '1'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw FormatError("tensor container truncated");
  return value;
}

}  // namespace

void write_tensor(std::ostream& out, const TensorBlob& blob) {
  if (blob.rank < 1 || blob.rank > 3) throw FormatError("tensor rank must be 1..3");
  if (blob.values.size() != blob.element_count()) throw FormatError("tensor payload does not match dims");
  out.write(kMagic, 4);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(blob.dtype));
  put<std::uint8_t>(out, blob.rank);
  put<std::uint16_t>(out, 0);
  for (auto d : blob.dims) put<std::uint32_t>(out, d);
  if (blob.dtype == DType::kFloat32) {
    std::vector<float> buf(blob.values.begin(), blob.values.end());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  } else {
    out.write(reinterpret_cast<const char*>(blob.values.data()),
              static_cast<std::streamsize>(blob.values.size() * sizeof(double)));
  }
  if (!out) throw FormatError("failed writing tensor container");
}

TensorBlob read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in) throw FormatError("tensor container truncated");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad tensor magic (expected LTE1)");
  TensorBlob blob;
  const auto dtype = get<std::uint8_t>(in);
  if (dtype > 1) throw FormatError("unknown tensor dtype code " + std::to_string(dtype));
  blob.dtype = static_cast<DType>(dtype);
  blob.rank = get<std::uint8_t>(in);
  if (blob.rank < 1 || blob.rank > 3) throw FormatError("tensor rank must be 1..3");
  (void)get<std::uint16_t>(in);
  for (auto& d : blob.dims) d = get<std::uint32_t>(in);
  const std::size_t n = blob.element_count();
  blob.values.resize(n);
  if (blob.dtype == DType::kFloat32) {
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw FormatError("tensor payload truncated");
    for (std::size_t i = 0; i < n; ++i) blob.values[i] = buf[i];
  } else {
    in.read(reinterpret_cast<char*>(blob.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw FormatError("tensor payload truncated");
  }
  return blob;
}

void write_tensor_file(const std::filesystem::path& path, const TensorBlob& blob) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, blob);
}

TensorBlob read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open tensor file " + path.string());
  return read_tensor(in);
}

TensorBlob to_blob(const FeatureMap& map, DType dtype) {
  TensorBlob blob;
  blob.dtype = dtype;
  blob.rank = 3;
  blob.dims = {static_cast<std::uint32_t>(map.rows()), static_cast<std::uint32_t>(map.cols()),
               static_cast<std::uint32_t>(map.channels())};
  blob.values.assign(map.values().begin(), map.values().end());
  return blob;
}

TensorBlob to_blob(const std::vector<double>& flat, DType dtype) {
  TensorBlob blob;
  blob.dtype = dtype;
  blob.rank = 1;
  blob.dims = {static_cast<std::uint32_t>(flat.size()), 1, 1};
  blob.values = flat;
  return blob;
}

LatentImage latent_from_blob(const TensorBlob& blob, int view_id) {
  if (blob.rank != 3 || blob.dims[2] != kLatentChannels) {
    throw FormatError("latent tensor must be rank 3 with 4 channels");
  }
  return LatentImage(static_cast<int>(blob.dims[0]), static_cast<int>(blob.dims[1]), blob.values, view_id);
}

}  // namespace latentedit
