#pragma once
// Core data types: the modality registry, scalar volumes, labelmaps and
// multi-modal studies.

#include "mmv/errors.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mmv {

enum class Modality : int { t1 = 0, t1c = 1, t2 = 2, fla = 3 };

inline constexpr int kModalityCount = 4;
inline constexpr std::array<Modality, kModalityCount> kRegistry{Modality::t1, Modality::t1c, Modality::t2,
                                                                Modality::fla};

inline constexpr int index_of(Modality m) { return static_cast<int>(m); }

inline std::string_view modality_name(Modality m) {
  constexpr std::array<std::string_view, kModalityCount> names{"t1", "t1c", "t2", "fla"};
  return names[index_of(m)];
}

inline std::optional<Modality> parse_modality(std::string_view s) {
  for (auto m : kRegistry)
    if (modality_name(m) == s) return m;
  return std::nullopt;
}

enum class TumorClass : int { GBM = 0, Astro = 1, Oligo = 2 };
inline constexpr int kClassCount = 3;

inline std::string_view class_name(TumorClass c) {
  constexpr std::array<std::string_view, kClassCount> names{"GBM", "Astro", "Oligo"};
  return names[static_cast<int>(c)];
}

inline std::optional<TumorClass> parse_class(std::string_view s) {
  for (int i = 0; i < kClassCount; ++i)
    if (class_name(static_cast<TumorClass>(i)) == s) return static_cast<TumorClass>(i);
  return std::nullopt;
}

struct Dims {
  std::int64_t d = 1, h = 1, w = 1;

  std::int64_t voxels() const { return d * h * w; }
  std::int64_t operator[](int axis) const { return axis == 0 ? d : axis == 1 ? h : w; }
  std::int64_t& operator[](int axis) { return axis == 0 ? d : axis == 1 ? h : w; }
  bool operator==(const Dims&) const = default;
  bool divisible_by(std::int64_t p) const { return p > 0 && d % p == 0 && h % p == 0 && w % p == 0; }
  std::string str() const {
    return "(" + std::to_string(d) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// Scalar intensities in C order (z slowest, x fastest). Spacing is metadata.
struct Volume {
  Dims dims;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<float> data;

  Volume() = default;
  explicit Volume(Dims d, float fill = 0.0f) : dims(d), data(static_cast<std::size_t>(d.voxels()), fill) {}

  std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return static_cast<std::size_t>((z * dims.h + y) * dims.w + x);
  }
  float& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[index(z, y, x)]; }
  float at(std::int64_t z, std::int64_t y, std::int64_t x) const { return data[index(z, y, x)]; }

  void validate() const {
    if (dims.d < 1 || dims.h < 1 || dims.w < 1) throw ValidationError("volume dims must be >= 1, got " + dims.str());
    if (static_cast<std::int64_t>(data.size()) != dims.voxels())
      throw ValidationError("volume data size does not match dims " + dims.str());
    for (float v : data)
      if (!std::isfinite(v)) throw ValidationError("volume contains non-finite intensities");
  }
};

/// Integer labelmap with BraTS codes {0 background, 1 necrotic core, 2 edema, 4 enhancing}.
struct LabelMap {
  Dims dims;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  explicit LabelMap(Dims d) : dims(d), data(static_cast<std::size_t>(d.voxels()), 0) {}

  static bool valid_code(int v) { return v == 0 || v == 1 || v == 2 || v == 4; }
  void validate() const {
    if (static_cast<std::int64_t>(data.size()) != dims.voxels())
      throw ValidationError("labelmap data size does not match dims " + dims.str());
    for (auto v : data)
      if (!valid_code(v)) throw ValidationError("labelmap value " + std::to_string(int(v)) + " not in {0,1,2,4}");
  }
};

/// Contiguous class index used by the segmentation head: {0,1,2,4} -> {0,1,2,3}.
inline int label_to_class(std::uint8_t code) { return code == 4 ? 3 : static_cast<int>(code); }
inline std::uint8_t class_to_label(int cls) { return static_cast<std::uint8_t>(cls == 3 ? 4 : cls); }

struct MultiModalStudy {
  std::string id;
  std::array<std::optional<Volume>, kModalityCount> volumes;
  std::optional<LabelMap> labelmap;
  std::optional<TumorClass> class_label;

  bool has(Modality m) const { return volumes[index_of(m)].has_value(); }
  const Volume& volume(Modality m) const {
    if (!has(m)) throw ValidationError("study '" + id + "' has no " + std::string(modality_name(m)) + " volume");
    return *volumes[index_of(m)];
  }
  Volume& volume(Modality m) {
    if (!has(m)) throw ValidationError("study '" + id + "' has no " + std::string(modality_name(m)) + " volume");
    return *volumes[index_of(m)];
  }

  /// Present modalities in registry order.
  std::vector<Modality> present() const {
    std::vector<Modality> out;
    for (auto m : kRegistry)
      if (has(m)) out.push_back(m);
    return out;
  }

  Dims dims() const {
    for (auto m : kRegistry)
      if (has(m)) return volumes[index_of(m)]->dims;
    throw ValidationError("study '" + id + "' has no modalities");
  }

  MultiModalStudy without(Modality m) const {
    MultiModalStudy s = *this;
    s.volumes[index_of(m)].reset();
    return s;
  }

  void validate() const {
    const auto p = present();
    if (p.empty()) throw ValidationError("study '" + id + "' has no modalities");
    const Dims d = dims();
    for (auto m : p) {
      const auto& v = *volumes[index_of(m)];
      v.validate();
      if (!(v.dims == d))
        throw ValidationError("study '" + id + "': " + std::string(modality_name(m)) + " dims " + v.dims.str() +
                              " differ from " + d.str());
    }
    if (labelmap) {
      labelmap->validate();
      if (!(labelmap->dims == d))
        throw ValidationError("study '" + id + "': labelmap dims " + labelmap->dims.str() + " differ from " + d.str());
    }
  }
};

}  // namespace mmv
