#pragma once
// Single-file checkpoint container:
//   "MMVCKPT1" | u32 version | u64 header bytes | JSON header | raw arrays
// The header lists every array (name, shape, dtype, offset, bytes) next to
// free-form metadata such as the run config and training state.

#include "mmv/errors.hpp"
#include "mmv/nn.hpp"
#include "mmv/optim.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mmv {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are little-endian");

struct CheckpointArray {
  std::string name;
  ag::Shape shape;
  std::string dtype;  // "float32" | "float64"
  std::vector<char> bytes;
};

struct Checkpoint {
  static constexpr char kMagic[9] = "MMVCKPT1";
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointArray> arrays;

  const CheckpointArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "float32" : "float64";
}

template <class T>
void put_array(Checkpoint& ck, const std::string& name, const ag::Shape& shape, std::span<const T> values) {
  CheckpointArray a{name, shape, dtype_name<T>(), std::vector<char>(values.size_bytes())};
  std::memcpy(a.bytes.data(), values.data(), values.size_bytes());
  ck.arrays.push_back(std::move(a));
}

template <class T>
std::vector<T> get_array(const Checkpoint& ck, const std::string& name, const ag::Shape& expect) {
  const auto* a = ck.find(name);
  if (!a) throw ValidationError("checkpoint has no array '" + name + "'");
  if (a->shape != expect)
    throw ValidationError("checkpoint array '" + name + "' has shape " + ag::shape_str(a->shape) + ", expected " +
                          ag::shape_str(expect));
  std::vector<T> out(static_cast<std::size_t>(ag::numel(expect)));
  if (a->dtype == dtype_name<T>()) {
    std::memcpy(out.data(), a->bytes.data(), a->bytes.size());
  } else if (a->dtype == "float32") {
    for (std::size_t i = 0; i < out.size(); ++i) {
      float f;
      std::memcpy(&f, a->bytes.data() + 4 * i, 4);
      out[i] = static_cast<T>(f);
    }
  } else if (a->dtype == "float64") {
    for (std::size_t i = 0; i < out.size(); ++i) {
      double d;
      std::memcpy(&d, a->bytes.data() + 8 * i, 8);
      out[i] = static_cast<T>(d);
    }
  } else {
    throw ValidationError("checkpoint array '" + name + "' has unsupported dtype " + a->dtype);
  }
  return out;
}

/// Writes to a sibling temp file and renames, so a crash never leaves a torn checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["meta"] = ck.meta;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : ck.arrays) {
    header["arrays"].push_back(
        {{"name", a.name}, {"shape", a.shape}, {"dtype", a.dtype}, {"offset", offset}, {"bytes", a.bytes.size()}});
    offset += a.bytes.size();
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    const std::uint32_t version = Checkpoint::kVersion;
    const std::uint64_t len = text.size();
    out.write(Checkpoint::kMagic, 8);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : ck.arrays) out.write(a.bytes.data(), static_cast<std::streamsize>(a.bytes.size()));
    if (!out) throw IoError("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, Checkpoint::kMagic, 8) != 0)
    throw ValidationError("not a checkpoint file: " + path.string());
  if (version != Checkpoint::kVersion)
    throw ValidationError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError("truncated checkpoint header: " + path.string());
  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  ck.meta = header.at("meta");
  for (const auto& e : header.at("arrays")) {
    CheckpointArray a;
    a.name = e.at("name");
    a.shape = e.at("shape").get<ag::Shape>();
    a.dtype = e.at("dtype");
    a.bytes.resize(e.at("bytes").get<std::size_t>());
    in.read(a.bytes.data(), static_cast<std::streamsize>(a.bytes.size()));
    if (!in) throw ValidationError("truncated checkpoint payload: " + path.string());
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

template <class T>
void store_params(Checkpoint& ck, const nn::ParamStore<T>& ps) {
  for (const auto& [name, t] : ps.entries()) put_array<T>(ck, "param/" + name, t.shape(), t.data());
}

/// Copies every parameter whose name starts with `prefix` from the checkpoint.
/// Missing arrays or shape mismatches are errors.
template <class T>
void restore_params(const Checkpoint& ck, nn::ParamStore<T>& ps, const std::string& prefix = "") {
  for (auto& [name, t] : ps.entries()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const auto v = get_array<T>(ck, "param/" + name, t.shape());
    auto dst = t.mutable_data();
    std::copy(v.begin(), v.end(), dst.begin());
  }
}

template <class T>
void store_optimizer(Checkpoint& ck, const AdamW<T>& opt) {
  ck.meta["optimizer"] = {{"steps", opt.steps()}};
  for (const auto& [name, st] : opt.state()) {
    const ag::Shape shape{static_cast<std::int64_t>(st.m.size())};
    put_array<T>(ck, "adam.m/" + name, shape, st.m);
    put_array<T>(ck, "adam.v/" + name, shape, st.v);
  }
}

template <class T>
void restore_optimizer(const Checkpoint& ck, AdamW<T>& opt) {
  if (!ck.meta.contains("optimizer")) throw ValidationError("checkpoint has no optimizer state");
  opt.set_steps(ck.meta["optimizer"].at("steps").get<std::int64_t>());
  opt.state().clear();
  for (const auto& a : ck.arrays) {
    if (a.name.rfind("adam.m/", 0) != 0) continue;
    const std::string name = a.name.substr(7);
    auto& st = opt.state()[name];
    st.m = get_array<T>(ck, a.name, a.shape);
    st.v = get_array<T>(ck, "adam.v/" + name, a.shape);
  }
}

/// FNV-1a over names, shapes and raw bytes of the parameters under `prefix`.
template <class T>
std::string params_digest(const nn::ParamStore<T>& ps, const std::string& prefix = "") {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
  };
  for (const auto& [name, t] : ps.entries()) {
    if (name.rfind(prefix, 0) != 0) continue;
    mix(name.data(), name.size());
    for (auto d : t.shape()) mix(&d, sizeof d);
    mix(t.data().data(), t.data().size_bytes());
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

inline std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void set_rng_state(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw ValidationError("corrupt rng state in checkpoint");
}

}  // namespace mmv
