#pragma once
// Volume <-> patch-token conversion: non-overlapping cubic patching,
// modality-specific linear adapters and fixed 3-D sine-cosine positions.

#include "mmv/nn.hpp"
#include "mmv/volume.hpp"

#include <array>
#include <map>

namespace mmv {

using ag::Tensor;

struct Coord {
  std::int64_t z = 0, y = 0, x = 0;
  bool operator==(const Coord&) const = default;
};

struct PatchGridSpec {
  std::int64_t patch = 16;
  Dims grid;

  static PatchGridSpec for_volume(const Dims& d, std::int64_t p) {
    if (!d.divisible_by(p))
      throw ValidationError("volume dims " + d.str() + " not divisible by patch size " + std::to_string(p));
    return {p, {d.d / p, d.h / p, d.w / p}};
  }
  std::int64_t count() const { return grid.voxels(); }
  std::int64_t patch_voxels() const { return patch * patch * patch; }
  Dims volume_dims() const { return {grid.d * patch, grid.h * patch, grid.w * patch}; }
  /// Canonical (z-major) token index of a grid coordinate.
  std::int64_t linear(const Coord& c) const { return (c.z * grid.h + c.y) * grid.w + c.x; }
  Coord coord(std::int64_t i) const { return {i / (grid.h * grid.w), (i / grid.w) % grid.h, i % grid.w}; }
  bool contains(const Coord& c) const {
    return c.z >= 0 && c.y >= 0 && c.x >= 0 && c.z < grid.d && c.y < grid.h && c.x < grid.w;
  }
  bool operator==(const PatchGridSpec&) const = default;
};

/// Flattened patches (each p^3 scalars in (dz,dy,dx) order) with their grid coordinates.
struct PatchArray {
  PatchGridSpec spec;
  std::vector<Coord> coords;
  std::vector<float> data;

  std::int64_t rows() const { return static_cast<std::int64_t>(coords.size()); }
  std::span<const float> row(std::int64_t i) const {
    return {data.data() + i * spec.patch_voxels(), static_cast<std::size_t>(spec.patch_voxels())};
  }

  /// Rows at `idx`, in the order given.
  PatchArray select(const std::vector<std::int64_t>& idx) const {
    PatchArray out{spec, {}, {}};
    const auto pv = spec.patch_voxels();
    out.data.reserve(idx.size() * static_cast<std::size_t>(pv));
    for (auto i : idx) {
      out.coords.push_back(coords.at(static_cast<std::size_t>(i)));
      auto r = row(i);
      out.data.insert(out.data.end(), r.begin(), r.end());
    }
    return out;
  }
};

/// Splits a volume into non-overlapping p^3 patches in canonical z-major order.
inline PatchArray patchify(const Volume& v, std::int64_t p) {
  const auto spec = PatchGridSpec::for_volume(v.dims, p);
  PatchArray out{spec, {}, {}};
  out.coords.reserve(static_cast<std::size_t>(spec.count()));
  out.data.resize(static_cast<std::size_t>(spec.count() * spec.patch_voxels()));
  std::size_t k = 0;
  for (std::int64_t i = 0; i < spec.count(); ++i) {
    const Coord c = spec.coord(i);
    out.coords.push_back(c);
    for (std::int64_t dz = 0; dz < p; ++dz)
      for (std::int64_t dy = 0; dy < p; ++dy) {
        const float* src = &v.data[v.index(c.z * p + dz, c.y * p + dy, c.x * p)];
        std::copy(src, src + p, out.data.begin() + static_cast<std::ptrdiff_t>(k));
        k += static_cast<std::size_t>(p);
      }
  }
  return out;
}

/// Places every patch at its coordinate. Requires one patch per grid cell.
inline Volume unpatchify(const PatchArray& a) {
  const auto& spec = a.spec;
  if (a.rows() != spec.count())
    throw ValidationError("unpatchify: " + std::to_string(a.rows()) + " patches for a grid of " +
                          std::to_string(spec.count()));
  if (static_cast<std::int64_t>(a.data.size()) != a.rows() * spec.patch_voxels())
    throw ValidationError("unpatchify: patch data size mismatch");
  const auto p = spec.patch;
  Volume v(spec.volume_dims());
  std::vector<char> seen(static_cast<std::size_t>(spec.count()), 0);
  for (std::int64_t i = 0; i < a.rows(); ++i) {
    const Coord c = a.coords[static_cast<std::size_t>(i)];
    if (!spec.contains(c)) throw ValidationError("unpatchify: coordinate outside the grid");
    auto& s = seen[static_cast<std::size_t>(spec.linear(c))];
    if (s) throw ValidationError("unpatchify: duplicate coordinate");
    s = 1;
    const float* src = a.data.data() + i * spec.patch_voxels();
    for (std::int64_t dz = 0; dz < p; ++dz)
      for (std::int64_t dy = 0; dy < p; ++dy, src += p)
        std::copy(src, src + p, &v.data[v.index(c.z * p + dz, c.y * p + dy, c.x * p)]);
  }
  return v;
}

/// Fixed 3-D sine-cosine table [grid.count(), dim]. The width is split into
/// three axis blocks (z, y, x); each block holds sin(pos*w_i) then cos(pos*w_i)
/// with w_i = 1 / 10000^(2i / block).
inline std::vector<double> sincos_pos_embed_3d(const Dims& grid, std::int64_t dim) {
  if (dim <= 0 || dim % 6 != 0)
    throw std::invalid_argument("positional embedding width " + std::to_string(dim) + " is not divisible by 6");
  const std::int64_t block = dim / 3, half = block / 2;
  std::vector<double> omega(static_cast<std::size_t>(half));
  for (std::int64_t i = 0; i < half; ++i)
    omega[i] = 1.0 / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(block));
  std::vector<double> table(static_cast<std::size_t>(grid.voxels() * dim));
  std::int64_t r = 0;
  for (std::int64_t z = 0; z < grid.d; ++z)
    for (std::int64_t y = 0; y < grid.h; ++y)
      for (std::int64_t x = 0; x < grid.w; ++x, ++r) {
        const std::array<double, 3> pos{double(z), double(y), double(x)};
        for (int a = 0; a < 3; ++a) {
          double* out = table.data() + r * dim + a * block;
          for (std::int64_t i = 0; i < half; ++i) {
            out[i] = std::sin(pos[a] * omega[i]);
            out[half + i] = std::cos(pos[a] * omega[i]);
          }
        }
      }
  return table;
}

/// Model-width table. Widths that are not a multiple of 6 use the sine-cosine
/// code over the largest multiple of 6 and leave the trailing columns zero.
template <class T>
Tensor<T> pos_embed_tensor(const Dims& grid, std::int64_t dim) {
  const std::int64_t coded = dim - dim % 6;
  if (coded <= 0) throw std::invalid_argument("positional embedding width " + std::to_string(dim) + " is below 6");
  const auto table = sincos_pos_embed_3d(grid, coded);
  std::vector<T> out(static_cast<std::size_t>(grid.voxels() * dim), T(0));
  for (std::int64_t r = 0; r < grid.voxels(); ++r)
    for (std::int64_t c = 0; c < coded; ++c)
      out[static_cast<std::size_t>(r * dim + c)] = static_cast<T>(table[static_cast<std::size_t>(r * coded + c)]);
  return Tensor<T>::constant({grid.voxels(), dim}, std::move(out));
}

/// Memoizes positional tables per (grid, width).
template <class T>
class PosEmbedCache {
 public:
  const Tensor<T>& get(const Dims& grid, std::int64_t dim) {
    const auto key = std::make_tuple(grid.d, grid.h, grid.w, dim);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, pos_embed_tensor<T>(grid, dim)).first;
    return it->second;
  }

 private:
  std::map<std::tuple<std::int64_t, std::int64_t, std::int64_t, std::int64_t>, Tensor<T>> cache_;
};

template <class T>
struct TokenSet {
  Modality modality = Modality::t1;
  Tensor<T> tokens;  // [n, dim]
  std::vector<Coord> coords;
  PatchGridSpec spec;

  std::int64_t size() const { return static_cast<std::int64_t>(coords.size()); }
};

template <class T>
Tensor<T> patches_tensor(const PatchArray& a) {
  return Tensor<T>::constant({a.rows(), a.spec.patch_voxels()}, std::vector<T>(a.data.begin(), a.data.end()));
}

/// Modality-specific linear adapters p^3 -> dim plus one learned modality embedding each.
template <class T>
struct Adapters {
  std::array<nn::Linear<T>, kModalityCount> proj;
  std::array<Tensor<T>, kModalityCount> modality_embed;
  std::int64_t patch_voxels = 0;
  std::int64_t dim = 0;

  Adapters() = default;
  Adapters(nn::ParamStore<T>& ps, const std::string& name, std::int64_t patch, std::int64_t dim_, nn::Rng& rng)
      : patch_voxels(patch * patch * patch), dim(dim_) {
    for (auto m : kRegistry) {
      const std::string base = name + "." + std::string(modality_name(m));
      proj[index_of(m)] = nn::Linear<T>(ps, base, patch_voxels, dim, rng);
      modality_embed[index_of(m)] = ps.add(base + ".modality_embed", {dim}, nn::init::trunc_normal<T>(0.02, dim, rng));
    }
  }
};

/// token_i = W_m patch_i + b_m + pos(coord_i) + e_m
template <class T>
TokenSet<T> project_tokens(const PatchArray& patches, Modality m, const Adapters<T>& adapters,
                           const Tensor<T>& pos_table) {
  if (!adapters.proj[index_of(m)].weight.defined())
    throw ValidationError("no adapter for modality " + std::string(modality_name(m)));
  if (patches.spec.patch_voxels() != adapters.patch_voxels)
    throw ValidationError("patch size does not match the adapters");
  std::vector<std::int64_t> rows;
  rows.reserve(patches.coords.size());
  for (const auto& c : patches.coords) rows.push_back(patches.spec.linear(c));
  auto x = adapters.proj[index_of(m)](patches_tensor<T>(patches));
  x = ag::add(x, ag::gather_rows(pos_table, rows));
  x = ag::add_rowvec(x, adapters.modality_embed[index_of(m)]);
  return {m, x, patches.coords, patches.spec};
}

}  // namespace mmv
