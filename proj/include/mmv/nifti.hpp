#pragma once
// Single-file NIfTI-1 (.nii / .nii.gz) reader and writer. zlib's gz* API reads
// both compressed and uncompressed files.

#include "mmv/errors.hpp"
#include "mmv/volume.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

namespace mmv::nifti {

namespace detail {

template <class V>
V swap_bytes(V v) {
  unsigned char b[sizeof(V)];
  std::memcpy(b, &v, sizeof(V));
  std::reverse(b, b + sizeof(V));
  std::memcpy(&v, b, sizeof(V));
  return v;
}

template <class V>
V field(const unsigned char* hdr, std::size_t off, bool swap) {
  V v;
  std::memcpy(&v, hdr + off, sizeof(V));
  return swap ? swap_bytes(v) : v;
}

class GzFile {
 public:
  GzFile(const std::string& path, const char* mode) : f_(gzopen(path.c_str(), mode)) {
    if (!f_) throw IoError("cannot open NIfTI file: " + path);
  }
  ~GzFile() { gzclose(f_); }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  void read(void* dst, std::size_t n, const std::string& path) {
    auto* p = static_cast<unsigned char*>(dst);
    while (n > 0) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      const int got = gzread(f_, p, chunk);
      if (got <= 0) throw IoError("truncated NIfTI file: " + path);
      p += got;
      n -= static_cast<std::size_t>(got);
    }
  }
  void skip(std::size_t n, const std::string& path) {
    std::vector<unsigned char> tmp(n);
    read(tmp.data(), n, path);
  }
  void write(const void* src, std::size_t n, const std::string& path) {
    if (n && gzwrite(f_, src, static_cast<unsigned>(n)) != static_cast<int>(n))
      throw IoError("failed writing NIfTI file: " + path);
  }

 private:
  gzFile f_;
};

template <class Src>
void convert(const std::vector<unsigned char>& raw, bool swap, std::vector<double>& out) {
  const std::size_t n = raw.size() / sizeof(Src);
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Src v;
    std::memcpy(&v, raw.data() + i * sizeof(Src), sizeof(Src));
    if (swap) v = swap_bytes(v);
    out[i] = static_cast<double>(v);
  }
}

}  // namespace detail

struct Image {
  Dims dims;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<double> data;  // scaled by scl_slope/scl_inter, C order (z, y, x)
};

/// Reads a 3-D NIfTI-1 image. dim[1] (x) is the fastest axis on disk, which
/// matches the (D,H,W) = (nz,ny,nx) C-order layout used everywhere else.
inline Image read(const std::string& path) {
  detail::GzFile f(path, "rb");
  unsigned char hdr[348];
  f.read(hdr, sizeof hdr, path);
  const std::int32_t sizeof_hdr = detail::field<std::int32_t>(hdr, 0, false);
  bool swap = false;
  if (sizeof_hdr != 348) {
    if (detail::swap_bytes(sizeof_hdr) != 348) throw IoError("not a NIfTI-1 file: " + path);
    swap = true;
  }
  if (std::memcmp(hdr + 344, "n+1", 3) != 0) throw IoError("only single-file NIfTI-1 (n+1) is supported: " + path);
  std::int16_t dim[8];
  for (int i = 0; i < 8; ++i) dim[i] = detail::field<std::int16_t>(hdr, 40 + 2 * i, swap);
  if (dim[0] < 1 || dim[0] > 7) throw IoError("invalid NIfTI dim[0] in " + path);
  for (int i = 4; i <= dim[0]; ++i)
    if (dim[i] > 1) throw IoError("NIfTI image is not 3-D: " + path);
  const std::int16_t datatype = detail::field<std::int16_t>(hdr, 70, swap);
  float pixdim[8];
  for (int i = 0; i < 8; ++i) pixdim[i] = detail::field<float>(hdr, 76 + 4 * i, swap);
  const float vox_offset = detail::field<float>(hdr, 108, swap);
  const float slope = detail::field<float>(hdr, 112, swap);
  const float inter = detail::field<float>(hdr, 116, swap);

  Image img;
  auto extent = [&](int i) { return i <= dim[0] ? std::max<std::int64_t>(1, dim[i]) : 1; };
  img.dims = {extent(3), extent(2), extent(1)};
  img.spacing = {pixdim[3] > 0 ? pixdim[3] : 1.0, pixdim[2] > 0 ? pixdim[2] : 1.0, pixdim[1] > 0 ? pixdim[1] : 1.0};

  std::size_t bytes_per = 0;
  switch (datatype) {
    case 2: case 256: bytes_per = 1; break;
    case 4: case 512: bytes_per = 2; break;
    case 8: case 768: case 16: bytes_per = 4; break;
    case 64: bytes_per = 8; break;
    default: throw IoError("unsupported NIfTI datatype " + std::to_string(datatype) + " in " + path);
  }
  const auto offset = static_cast<std::size_t>(vox_offset);
  if (offset < 348) throw IoError("invalid NIfTI vox_offset in " + path);
  f.skip(offset - 348, path);
  std::vector<unsigned char> raw(static_cast<std::size_t>(img.dims.voxels()) * bytes_per);
  f.read(raw.data(), raw.size(), path);
  switch (datatype) {
    case 2: detail::convert<std::uint8_t>(raw, false, img.data); break;
    case 256: detail::convert<std::int8_t>(raw, false, img.data); break;
    case 4: detail::convert<std::int16_t>(raw, swap, img.data); break;
    case 512: detail::convert<std::uint16_t>(raw, swap, img.data); break;
    case 8: detail::convert<std::int32_t>(raw, swap, img.data); break;
    case 768: detail::convert<std::uint32_t>(raw, swap, img.data); break;
    case 16: detail::convert<float>(raw, swap, img.data); break;
    case 64: detail::convert<double>(raw, swap, img.data); break;
  }
  if (slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f))
    for (auto& v : img.data) v = v * slope + inter;
  return img;
}

/// Writes a float32 NIfTI-1 image; gzip-compressed when the path ends in ".gz".
inline void write(const std::string& path, const Volume& v) {
  const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  detail::GzFile f(path, gz ? "wb6" : "wbT");
  unsigned char hdr[352] = {};
  auto put = [&](std::size_t off, auto value) { std::memcpy(hdr + off, &value, sizeof(value)); };
  put(0, std::int32_t{348});
  const std::int16_t dim[8] = {3, static_cast<std::int16_t>(v.dims.w), static_cast<std::int16_t>(v.dims.h),
                               static_cast<std::int16_t>(v.dims.d), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(40 + 2 * i, dim[i]);
  put(70, std::int16_t{16});
  put(72, std::int16_t{32});
  const float pixdim[8] = {1.0f, static_cast<float>(v.spacing[2]), static_cast<float>(v.spacing[1]),
                           static_cast<float>(v.spacing[0]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(76 + 4 * i, pixdim[i]);
  put(108, 352.0f);
  put(112, 1.0f);
  std::memcpy(hdr + 344, "n+1\0", 4);
  f.write(hdr, sizeof hdr, path);
  f.write(v.data.data(), v.data.size() * sizeof(float), path);
}

}  // namespace mmv::nifti
