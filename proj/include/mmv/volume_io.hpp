#pragma once
// Study ingestion and export, synthetic phantoms, foreground cropping and
// intensity normalization.

#include "mmv/errors.hpp"
#include "mmv/nifti.hpp"
#include "mmv/volume.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>

namespace mmv {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Synthetic phantoms

/// Intensity of each tissue for one modality.
struct TissueIntensities {
  float brain, edema, necrosis, enhancing;
};

/// t1 low contrast; t1c bright enhancing rim; t2 bright on edema and core; fla bright on edema.
inline std::array<TissueIntensities, kModalityCount> default_intensities() {
  return {{
      {0.60f, 0.52f, 0.42f, 0.56f},  // t1
      {0.55f, 0.50f, 0.28f, 1.00f},  // t1c
      {0.40f, 0.85f, 0.95f, 0.78f},  // t2
      {0.42f, 1.00f, 0.55f, 0.70f},  // fla
  }};
}

struct PhantomConfig {
  Dims dims{64, 64, 64};
  std::int64_t patch = 16;
  int min_tumors = 1;
  int max_tumors = 2;
  std::array<TissueIntensities, kModalityCount> intensity = default_intensities();
  /// Cut points on |ET|/|TC|: below the first -> GBM, below the second -> Astro, else Oligo.
  std::array<double, 2> class_thresholds{0.77, 0.915};
  std::uint64_t seed = 0;

  void validate() const {
    if (!dims.divisible_by(patch))
      throw ConfigError("phantom dims " + dims.str() + " not divisible by patch size " + std::to_string(patch));
    if (min_tumors < 1 || max_tumors < min_tumors) throw ConfigError("phantom tumor count range is invalid");
    for (const auto& t : intensity)
      for (float v : {t.brain, t.edema, t.necrosis, t.enhancing})
        if (!(v > 0.0f && v <= 1.0f)) throw ConfigError("phantom intensities must lie in (0, 1]");
    if (!(class_thresholds[0] < class_thresholds[1])) throw ConfigError("phantom class thresholds must increase");
  }
};

namespace detail {

struct Ellipsoid {
  std::array<double, 3> center, radii;
  double norm2(double z, double y, double x) const {
    const double a = (z - center[0]) / radii[0], b = (y - center[1]) / radii[1], c = (x - center[2]) / radii[2];
    return a * a + b * b + c * c;
  }
};

}  // namespace detail

/// Deterministic four-modality phantom: an ellipsoidal brain with a smooth
/// bias field and one or more nested tumors (edema > core > necrosis).
inline MultiModalStudy generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  const Dims D = cfg.dims;
  detail::Ellipsoid brain;
  for (int a = 0; a < 3; ++a) {
    brain.center[a] = D[a] * (0.5 + uni(-0.03, 0.03));
    brain.radii[a] = D[a] * uni(0.36, 0.42);
  }
  const double fa = uni(0.5, 1.5), fb = uni(0.5, 1.5), fc = uni(0.5, 1.5);
  const double pa = uni(0, 2 * std::numbers::pi), pb = uni(0, 2 * std::numbers::pi), pc = uni(0, 2 * std::numbers::pi);

  struct Tumor {
    detail::Ellipsoid edema, core, necrosis;
  };
  std::vector<Tumor> tumors;
  const int count = cfg.min_tumors + static_cast<int>(u01(rng) * (cfg.max_tumors - cfg.min_tumors + 1));
  const double rmin = std::min({brain.radii[0], brain.radii[1], brain.radii[2]});
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int t = 0; t < std::min(count, cfg.max_tumors); ++t) {
    std::array<double, 3> dir{gauss(rng), gauss(rng), gauss(rng)};
    const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
    const double off = uni(0.0, 0.45);
    Tumor tm;
    for (int a = 0; a < 3; ++a) {
      tm.edema.center[a] = brain.center[a] + off * brain.radii[a] * dir[a] / len;
      tm.edema.radii[a] = rmin * uni(0.25, 0.38);
    }
    const double core_f = uni(0.45, 0.70), nec_f = uni(0.15, 0.85);
    tm.core = tm.necrosis = tm.edema;
    for (int a = 0; a < 3; ++a) {
      tm.core.radii[a] = tm.edema.radii[a] * core_f;
      tm.necrosis.radii[a] = tm.core.radii[a] * nec_f;
    }
    tumors.push_back(tm);
  }

  MultiModalStudy s;
  s.id = "phantom-" + std::to_string(cfg.seed);
  for (auto m : kRegistry) s.volumes[index_of(m)] = Volume(D);
  s.labelmap = LabelMap(D);

  enum Tissue { kBg, kBrain, kEdema, kNecrosis, kEnhancing };
  std::int64_t n_et = 0, n_tc = 0;
  for (std::int64_t z = 0; z < D.d; ++z)
    for (std::int64_t y = 0; y < D.h; ++y)
      for (std::int64_t x = 0; x < D.w; ++x) {
        const double pz = z + 0.5, py = y + 0.5, px = x + 0.5;
        const double rb = brain.norm2(pz, py, px);
        if (rb > 1.0) continue;
        Tissue tissue = kBrain;
        for (const auto& tm : tumors) {
          if (tm.necrosis.norm2(pz, py, px) <= 1.0) tissue = std::max(tissue, kNecrosis);
          else if (tm.core.norm2(pz, py, px) <= 1.0) tissue = std::max(tissue, kEnhancing);
          else if (tm.edema.norm2(pz, py, px) <= 1.0) tissue = std::max(tissue, kEdema);
        }
        // necrosis wins over enhancing where tumors overlap
        for (const auto& tm : tumors)
          if (tm.necrosis.norm2(pz, py, px) <= 1.0) tissue = kNecrosis;
        const double field = 1.0 + 0.08 * std::sin(2 * std::numbers::pi * fa * pz / D.d + pa) *
                                       std::cos(2 * std::numbers::pi * fb * py / D.h + pb) +
                             0.05 * std::cos(2 * std::numbers::pi * fc * px / D.w + pc);
        const bool cortex = rb > 0.72;  // outer shell behaves like grey matter
        for (auto m : kRegistry) {
          const auto& ti = cfg.intensity[index_of(m)];
          double base = 0;
          switch (tissue) {
            case kBrain: base = ti.brain; break;
            case kEdema: base = ti.edema; break;
            case kNecrosis: base = ti.necrosis; break;
            case kEnhancing: base = ti.enhancing; break;
            default: break;
          }
          if (tissue == kBrain && cortex) base *= (m == Modality::t1 || m == Modality::t1c) ? 0.85 : 1.2;
          s.volumes[index_of(m)]->at(z, y, x) = static_cast<float>(std::min(1.0, base * field));
        }
        std::uint8_t code = 0;
        if (tissue == kNecrosis) code = 1;
        else if (tissue == kEdema) code = 2;
        else if (tissue == kEnhancing) code = 4;
        s.labelmap->data[s.volumes[0]->index(z, y, x)] = code;
        n_et += code == 4;
        n_tc += code == 1 || code == 4;
      }
  const double ratio = n_tc > 0 ? static_cast<double>(n_et) / static_cast<double>(n_tc) : 0.0;
  s.class_label = ratio < cfg.class_thresholds[0]   ? TumorClass::GBM
                  : ratio < cfg.class_thresholds[1] ? TumorClass::Astro
                                                    : TumorClass::Oligo;
  return s;
}

// ---------------------------------------------------------------------------
// Interchange format: raw little-endian float32 (C order) + JSON sidecar.

namespace detail {

inline bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline fs::path sidecar_for(const fs::path& raw) {
  fs::path p = raw;
  return p.replace_extension(".json");
}

inline json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

struct RawArray {
  Dims dims;
  std::array<double, 3> spacing{1, 1, 1};
  std::vector<double> data;
};

inline RawArray read_raw(const fs::path& raw_path) {
  const json side = read_json_file(sidecar_for(raw_path));
  RawArray a;
  try {
    const auto dims = side.at("dims").get<std::vector<std::int64_t>>();
    if (dims.size() != 3) throw IoError("sidecar dims must have 3 entries: " + raw_path.string());
    a.dims = {dims[0], dims[1], dims[2]};
    if (side.contains("spacing")) {
      const auto sp = side.at("spacing").get<std::vector<double>>();
      if (sp.size() == 3) a.spacing = {sp[0], sp[1], sp[2]};
    }
  } catch (const json::exception& e) {
    throw IoError("malformed sidecar for " + raw_path.string() + ": " + e.what());
  }
  const std::string dtype = side.value("dtype", "float32");
  std::size_t width = dtype == "float32" ? 4 : dtype == "uint8" ? 1 : dtype == "int16" ? 2 : 0;
  if (width == 0) throw IoError("unsupported dtype '" + dtype + "' in sidecar of " + raw_path.string());
  std::ifstream in(raw_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + raw_path.string());
  const auto n = static_cast<std::size_t>(a.dims.voxels());
  std::vector<char> bytes(n * width);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw IoError("raw file " + raw_path.string() + " is shorter than dims " + a.dims.str() + " require");
  a.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (width == 4) {
      float f;
      std::memcpy(&f, bytes.data() + 4 * i, 4);
      a.data[i] = f;
    } else if (width == 2) {
      std::int16_t v;
      std::memcpy(&v, bytes.data() + 2 * i, 2);
      a.data[i] = v;
    } else {
      a.data[i] = static_cast<unsigned char>(bytes[i]);
    }
  }
  return a;
}

inline RawArray read_any(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing volume file: " + p.string());
  const std::string s = p.string();
  if (ends_with(s, ".nii") || ends_with(s, ".nii.gz")) {
    auto img = nifti::read(s);
    return {img.dims, img.spacing, std::move(img.data)};
  }
  return read_raw(p);
}

inline void write_sidecar(const fs::path& raw, const Dims& d, const std::array<double, 3>& spacing,
                          const std::string& dtype, const json& extra) {
  json side = {{"dims", {d.d, d.h, d.w}}, {"spacing", {spacing[0], spacing[1], spacing[2]}}, {"dtype", dtype}};
  for (auto it = extra.begin(); it != extra.end(); ++it) side[it.key()] = it.value();
  std::ofstream out(sidecar_for(raw));
  if (!out) throw IoError("cannot write " + sidecar_for(raw).string());
  out << side.dump(2) << '\n';
}

}  // namespace detail

inline Volume read_volume(const fs::path& p) {
  auto a = detail::read_any(p);
  Volume v(a.dims);
  v.spacing = a.spacing;
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(a.data[i]);
  v.validate();
  return v;
}

/// Writes `<path>` (raw float32) and its `.json` sidecar. `extra` keys are merged into the sidecar.
inline void write_volume(const fs::path& raw, const Volume& v, const json& extra = json::object()) {
  std::ofstream out(raw, std::ios::binary);
  if (!out) throw IoError("cannot write " + raw.string());
  out.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(float)));
  detail::write_sidecar(raw, v.dims, v.spacing, "float32", extra);
}

inline void write_labelmap(const fs::path& raw, const LabelMap& l, const json& extra = json::object()) {
  std::ofstream out(raw, std::ios::binary);
  if (!out) throw IoError("cannot write " + raw.string());
  out.write(reinterpret_cast<const char*>(l.data.data()), static_cast<std::streamsize>(l.data.size()));
  detail::write_sidecar(raw, l.dims, {1, 1, 1}, "uint8", extra);
}

/// Loads a study manifest: JSON mapping modality name -> volume path, plus
/// optional "labelmap", "class_label", "label_remap" and "id". Paths are
/// relative to the manifest's directory.
inline MultiModalStudy load_study(const fs::path& manifest_path) {
  const json m = detail::read_json_file(manifest_path);
  if (!m.is_object()) throw ValidationError("manifest must be a JSON object: " + manifest_path.string());
  const fs::path base = manifest_path.parent_path();
  MultiModalStudy s;
  s.id = m.value("id", manifest_path.parent_path().filename().string());
  std::map<int, int> remap;
  if (m.contains("label_remap")) {
    for (auto it = m["label_remap"].begin(); it != m["label_remap"].end(); ++it)
      remap[std::stoi(it.key())] = it.value().get<int>();
  }
  for (auto it = m.begin(); it != m.end(); ++it) {
    const std::string& key = it.key();
    if (key == "id" || key == "label_remap") continue;
    if (key == "class_label") {
      auto c = parse_class(it.value().get<std::string>());
      if (!c) throw ValidationError("unknown class_label '" + it.value().get<std::string>() + "'");
      s.class_label = *c;
      continue;
    }
    const fs::path p = base / it.value().get<std::string>();
    if (key == "labelmap") {
      auto a = detail::read_any(p);
      LabelMap l(a.dims);
      for (std::size_t i = 0; i < a.data.size(); ++i) {
        int v = static_cast<int>(std::lround(a.data[i]));
        if (auto r = remap.find(v); r != remap.end()) v = r->second;
        if (!LabelMap::valid_code(v))
          throw ValidationError("labelmap value " + std::to_string(v) + " not in {0,1,2,4}: " + p.string());
        l.data[i] = static_cast<std::uint8_t>(v);
      }
      s.labelmap = std::move(l);
      continue;
    }
    auto mod = parse_modality(key);
    if (!mod) throw ValidationError("unknown modality '" + key + "' in " + manifest_path.string());
    s.volumes[index_of(*mod)] = read_volume(p);
  }
  s.validate();
  return s;
}

/// Writes every present modality (and the labelmap) into `dir` and returns the manifest path.
inline fs::path write_study(const MultiModalStudy& s, const fs::path& dir) {
  fs::create_directories(dir);
  json m = json::object();
  m["id"] = s.id;
  for (auto mod : s.present()) {
    const std::string file = std::string(modality_name(mod)) + ".raw";
    write_volume(dir / file, s.volume(mod));
    m[std::string(modality_name(mod))] = file;
  }
  if (s.labelmap) {
    write_labelmap(dir / "labelmap.raw", *s.labelmap);
    m["labelmap"] = "labelmap.raw";
  }
  if (s.class_label) m["class_label"] = std::string(class_name(*s.class_label));
  const fs::path manifest = dir / "manifest.json";
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << m.dump(2) << '\n';
  return manifest;
}

// ---------------------------------------------------------------------------
// Cropping

/// Copies a box starting at `start` (may be negative) of size `size`; voxels
/// outside the source are background (0).
inline Volume extract_region(const Volume& v, const std::array<std::int64_t, 3>& start, const Dims& size) {
  Volume out(size);
  out.spacing = v.spacing;
  for (std::int64_t z = 0; z < size.d; ++z) {
    const std::int64_t sz = start[0] + z;
    if (sz < 0 || sz >= v.dims.d) continue;
    for (std::int64_t y = 0; y < size.h; ++y) {
      const std::int64_t sy = start[1] + y;
      if (sy < 0 || sy >= v.dims.h) continue;
      for (std::int64_t x = 0; x < size.w; ++x) {
        const std::int64_t sx = start[2] + x;
        if (sx < 0 || sx >= v.dims.w) continue;
        out.at(z, y, x) = v.at(sz, sy, sx);
      }
    }
  }
  return out;
}

inline LabelMap extract_region(const LabelMap& l, const std::array<std::int64_t, 3>& start, const Dims& size) {
  LabelMap out(size);
  for (std::int64_t z = 0; z < size.d; ++z)
    for (std::int64_t y = 0; y < size.h; ++y)
      for (std::int64_t x = 0; x < size.w; ++x) {
        const std::int64_t sz = start[0] + z, sy = start[1] + y, sx = start[2] + x;
        if (sz < 0 || sy < 0 || sx < 0 || sz >= l.dims.d || sy >= l.dims.h || sx >= l.dims.w) continue;
        out.data[static_cast<std::size_t>((z * size.h + y) * size.w + x)] =
            l.data[static_cast<std::size_t>((sz * l.dims.h + sy) * l.dims.w + sx)];
      }
  return out;
}

inline MultiModalStudy extract_region(const MultiModalStudy& s, const std::array<std::int64_t, 3>& start,
                                      const Dims& size) {
  MultiModalStudy out;
  out.id = s.id;
  out.class_label = s.class_label;
  for (auto m : s.present()) out.volumes[index_of(m)] = extract_region(s.volume(m), start, size);
  if (s.labelmap) out.labelmap = extract_region(*s.labelmap, start, size);
  return out;
}

struct CropResult {
  MultiModalStudy study;
  std::array<std::int64_t, 3> start{};  // source index of the output origin (negative = padding)
  bool center_fallback = false;         // no foreground found; geometric center used
};

/// Crops (or zero-pads) to `target` around the union bounding box of nonzero
/// voxels. Axes where the source is not larger than the target are centered
/// as a whole; otherwise the window is centered on the foreground box (ties
/// toward lower indices) and clamped to stay inside the volume.
inline CropResult foreground_crop_pad(const MultiModalStudy& s, const Dims& target, std::int64_t patch = 1) {
  if (!target.divisible_by(patch))
    throw ConfigError("crop target " + target.str() + " not divisible by patch size " + std::to_string(patch));
  s.validate();
  const Dims d = s.dims();
  std::array<std::int64_t, 3> lo{d.d, d.h, d.w}, hi{-1, -1, -1};
  for (auto m : s.present()) {
    const auto& v = s.volume(m);
    for (std::int64_t z = 0; z < d.d; ++z)
      for (std::int64_t y = 0; y < d.h; ++y)
        for (std::int64_t x = 0; x < d.w; ++x)
          if (v.at(z, y, x) != 0.0f) {
            lo = {std::min(lo[0], z), std::min(lo[1], y), std::min(lo[2], x)};
            hi = {std::max(hi[0], z), std::max(hi[1], y), std::max(hi[2], x)};
          }
  }
  CropResult r;
  r.center_fallback = hi[0] < 0;
  for (int a = 0; a < 3; ++a) {
    const std::int64_t n = d[a], t = target[a];
    if (n <= t) {
      r.start[a] = -((t - n) / 2);
    } else if (r.center_fallback) {
      r.start[a] = (n - t) / 2;
    } else {
      const std::int64_t num = lo[a] + hi[a] + 1 - t;
      std::int64_t st = num >= 0 ? num / 2 : -((-num + 1) / 2);  // floor division
      r.start[a] = std::clamp<std::int64_t>(st, 0, n - t);
    }
  }
  r.study = extract_region(s, r.start, target);
  return r;
}

// ---------------------------------------------------------------------------
// Normalization

enum class NormScheme { zscore_foreground, minmax_unit };

struct NormalizeResult {
  Volume volume;
  bool degenerate = false;  // all background, or constant foreground
};

inline NormalizeResult normalize_modality(const Volume& v, NormScheme scheme) {
  NormalizeResult r{v, false};
  if (scheme == NormScheme::zscore_foreground) {
    double sum = 0, sq = 0;
    std::int64_t n = 0;
    for (float x : v.data)
      if (x != 0.0f) {
        sum += x;
        ++n;
      }
    if (n == 0) {
      r.degenerate = true;
      return r;
    }
    const double mu = sum / static_cast<double>(n);
    for (float x : v.data)
      if (x != 0.0f) sq += (x - mu) * (x - mu);
    const double sd = std::sqrt(sq / static_cast<double>(n));
    r.degenerate = !(sd > 0.0);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      if (v.data[i] != 0.0f)
        r.volume.data[i] = static_cast<float>(r.degenerate ? 0.0 : (v.data[i] - mu) / sd);
    return r;
  }
  const auto [mn_it, mx_it] = std::minmax_element(v.data.begin(), v.data.end());
  const double mn = *mn_it, mx = *mx_it;
  if (!(mx > mn)) {
    r.degenerate = true;
    return r;
  }
  for (std::size_t i = 0; i < v.data.size(); ++i)
    r.volume.data[i] = static_cast<float>((v.data[i] - mn) / (mx - mn));
  return r;
}

/// Crop to `target` and z-score every present modality: the model-input contract.
inline MultiModalStudy prepare_study(const MultiModalStudy& s, const Dims& target, std::int64_t patch) {
  auto out = foreground_crop_pad(s, target, patch).study;
  for (auto m : out.present()) out.volume(m) = normalize_modality(out.volume(m), NormScheme::zscore_foreground).volume;
  return out;
}

}  // namespace mmv
