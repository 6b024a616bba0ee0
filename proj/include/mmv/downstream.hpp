#pragma once
// Downstream adaptation of a pretrained encoder: per-location token fusion, a
// UNETR-style segmentation head, a pooled linear classification head, sliding
// window inference, class-balanced oversampling and the finetuning loop.

#include "mmv/baseline.hpp"
#include "mmv/conv.hpp"
#include "mmv/volume_io.hpp"

#include <bit>

namespace mmv {

enum class Task { segmentation, classification };
enum class Regime { scratch, frozen, full };

inline std::string_view task_name(Task t) { return t == Task::segmentation ? "segmentation" : "classification"; }
inline std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::scratch: return "scratch";
    case Regime::frozen: return "frozen";
    case Regime::full: return "full";
  }
  return "?";
}
inline Task parse_task(std::string_view s) {
  if (s == "segmentation") return Task::segmentation;
  if (s == "classification") return Task::classification;
  throw ConfigError("finetune.task must be 'segmentation' or 'classification', got '" + std::string(s) + "'");
}
inline Regime parse_regime(std::string_view s) {
  if (s == "scratch") return Regime::scratch;
  if (s == "frozen") return Regime::frozen;
  if (s == "full") return Regime::full;
  throw ConfigError("finetune.regime must be 'scratch', 'frozen' or 'full', got '" + std::string(s) + "'");
}

// ---------------------------------------------------------------- encoding

/// Every present modality tokenized without masking.
template <class T>
EncodedSequence<T> encode_unmasked(const MultiMae<T>& model, const MultiModalStudy& s) {
  return model.encode(s, no_mask_plan(s.present(), model.grid_for(s).count()));
}

/// The baseline always sees the full 4-channel grid; absent channels are background.
template <class T>
EncodedSequence<T> encode_unmasked(const BaselineVit<T>& model, const MultiModalStudy& s) {
  return model.encode(stack_study(s), no_mask(model.grid_for(s).count()));
}

template <class T>
std::int64_t model_patch(const MultiMae<T>& m) { return m.config().patch; }
template <class T>
std::int64_t model_patch(const BaselineVit<T>& m) { return m.config().patch; }

/// Mean of the tokens at each grid location over the contributing modalities.
/// `tokens` is [1 + N, dim] with CLS in row 0, which is not part of any location.
template <class T>
Tensor<T> fuse_tokens_per_location(const Tensor<T>& tokens, const std::vector<TokenOrigin>& origin,
                                   const PatchGridSpec& spec) {
  if (tokens.dim(0) != static_cast<std::int64_t>(origin.size()) + 1)
    throw ValidationError("fuse_tokens_per_location: one origin per non-CLS row required");
  std::vector<std::int64_t> rows(origin.size()), seg(origin.size());
  std::vector<int> seen(static_cast<std::size_t>(spec.count()), 0);
  for (std::size_t i = 0; i < origin.size(); ++i) {
    rows[i] = static_cast<std::int64_t>(i) + 1;
    seg[i] = spec.linear(origin[i].coord);
    ++seen[static_cast<std::size_t>(seg[i])];
  }
  for (std::int64_t l = 0; l < spec.count(); ++l)
    if (seen[static_cast<std::size_t>(l)] == 0)
      throw ValidationError("grid location " + std::to_string(l) + " has no token to fuse (was masking applied?)");
  return ag::segment_mean(ag::gather_rows(tokens, rows), seg, spec.count());
}

/// [N, dim] tokens in canonical order -> [dim, gz, gy, gx] feature volume.
template <class T>
Tensor<T> tokens_to_grid(const Tensor<T>& fused, const PatchGridSpec& spec) {
  return ag::reshape(ag::transpose(fused), {fused.dim(1), spec.grid.d, spec.grid.h, spec.grid.w});
}

/// Registry-ordered [4, D, H, W] input with absent modalities at 0.
template <class T>
Tensor<T> stacked_input(const MultiModalStudy& s) {
  const auto v = stack_study(s);
  ag::Buffer<T> data;
  data.reserve(static_cast<std::size_t>(v.dims.voxels()) * kModalityCount);
  for (const auto& c : v.channels) data.insert(data.end(), c.data.begin(), c.data.end());
  return Tensor<T>::constant({static_cast<std::int64_t>(kModalityCount), v.dims.d, v.dims.h, v.dims.w}, std::move(data));
}

// ---------------------------------------------------------------- heads

struct SegHeadConfig {
  std::int64_t feature_size = 16;
  int classes = 4;
  std::int64_t crop = 128;
  std::int64_t window = 128;
  double overlap = 0.25;

  void validate(std::int64_t patch) const {
    if (feature_size < 1) throw ConfigError("seg.feature_size must be >= 1");
    if (classes < 2) throw ConfigError("seg.classes must be >= 2");
    if (crop < patch || crop % patch != 0) throw ConfigError("seg.crop must be a positive multiple of the patch size");
    if (window < patch || window % patch != 0) throw ConfigError("seg.window must be a positive multiple of the patch size");
    if (!(overlap >= 0 && overlap < 1)) throw ConfigError("seg.overlap must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const SegHeadConfig& c) {
  j = {{"feature_size", c.feature_size}, {"classes", c.classes}, {"crop", c.crop}, {"window", c.window}, {"overlap", c.overlap}};
}
inline void from_json(const nlohmann::json& j, SegHeadConfig& c) {
  c.feature_size = j.at("feature_size");
  c.classes = j.at("classes");
  c.crop = j.at("crop");
  c.window = j.at("window");
  c.overlap = j.at("overlap");
}

struct ClsHeadConfig {
  int classes = kClassCount;
  bool pool_cls = true;  // mean over N+1 rows including CLS; false averages patch tokens only
};

inline void to_json(nlohmann::json& j, const ClsHeadConfig& c) { j = {{"classes", c.classes}, {"pool_cls", c.pool_cls}}; }
inline void from_json(const nlohmann::json& j, ClsHeadConfig& c) {
  c.classes = j.at("classes");
  c.pool_cls = j.at("pool_cls");
}

template <class T>
struct Conv3d {
  Tensor<T> weight, bias;

  Conv3d() = default;
  Conv3d(nn::ParamStore<T>& ps, const std::string& name, std::int64_t ci, std::int64_t co, std::int64_t k, nn::Rng& rng) {
    const auto kk = k * k * k;
    weight = ps.add(name + ".weight", {co, ci, k, k, k}, nn::init::xavier_uniform<T>(ci * kk, co * kk, static_cast<std::size_t>(co * ci * kk), rng));
    bias = ps.add(name + ".bias", {co}, nn::init::constant<T>(static_cast<std::size_t>(co), T(0)));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ag::conv3d(x, weight, bias); }
};

template <class T>
struct UpConv {
  Tensor<T> weight, bias;

  UpConv() = default;
  UpConv(nn::ParamStore<T>& ps, const std::string& name, std::int64_t ci, std::int64_t co, nn::Rng& rng) {
    weight = ps.add(name + ".weight", {ci, co, 2, 2, 2}, nn::init::xavier_uniform<T>(ci * 8, co * 8, static_cast<std::size_t>(ci * co * 8), rng));
    bias = ps.add(name + ".bias", {co}, nn::init::constant<T>(static_cast<std::size_t>(co), T(0)));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ag::conv_transpose3d_k2s2(x, weight, bias); }
};

template <class T>
struct InstanceNorm {
  Tensor<T> gamma, beta;

  InstanceNorm() = default;
  InstanceNorm(nn::ParamStore<T>& ps, const std::string& name, std::int64_t c) {
    gamma = ps.add(name + ".weight", {c}, nn::init::constant<T>(static_cast<std::size_t>(c), T(1)));
    beta = ps.add(name + ".bias", {c}, nn::init::constant<T>(static_cast<std::size_t>(c), T(0)));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ag::instance_norm(x, gamma, beta); }
};

/// conv3 -> instance norm -> leaky ReLU
template <class T>
struct ConvBlock {
  Conv3d<T> conv;
  InstanceNorm<T> norm;

  ConvBlock() = default;
  ConvBlock(nn::ParamStore<T>& ps, const std::string& name, std::int64_t ci, std::int64_t co, nn::Rng& rng)
      : conv(ps, name + ".conv", ci, co, 3, rng), norm(ps, name + ".norm", co) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return ag::leaky_relu(norm(conv(x))); }
};

/// Two conv3/norm stages with a (projected) identity path.
template <class T>
struct ResBlock {
  Conv3d<T> conv1, conv2, proj;
  InstanceNorm<T> norm1, norm2, norm_proj;
  bool project = false;

  ResBlock() = default;
  ResBlock(nn::ParamStore<T>& ps, const std::string& name, std::int64_t ci, std::int64_t co, nn::Rng& rng)
      : conv1(ps, name + ".conv1", ci, co, 3, rng),
        conv2(ps, name + ".conv2", co, co, 3, rng),
        norm1(ps, name + ".norm1", co),
        norm2(ps, name + ".norm2", co),
        project(ci != co) {
    if (project) {
      proj = Conv3d<T>(ps, name + ".proj", ci, co, 1, rng);
      norm_proj = InstanceNorm<T>(ps, name + ".norm_proj", co);
    }
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = norm2(conv2(ag::leaky_relu(norm1(conv1(x)))));
    return ag::leaky_relu(ag::add(y, project ? norm_proj(proj(x)) : x));
  }
};

/// UNETR-style decoder over log2(p) resolution levels. Tap k (shallowest first)
/// is upsampled to 1/2^(k+1) of the input resolution; the deepest tap is the
/// bottleneck. Level j carries feature_size * 2^j channels.
template <class T>
class UnetrHead {
 public:
  UnetrHead() = default;
  UnetrHead(nn::ParamStore<T>& ps, const std::string& name, std::int64_t enc_dim, std::int64_t patch,
            std::size_t tap_count, const SegHeadConfig& cfg, nn::Rng& rng)
      : cfg_(cfg) {
    cfg.validate(patch);
    if (patch < 2 || !std::has_single_bit(static_cast<std::uint64_t>(patch)))
      throw ConfigError("segmentation needs a power-of-two patch size >= 2, got " + std::to_string(patch));
    levels_ = std::countr_zero(static_cast<std::uint64_t>(patch));
    if (static_cast<int>(tap_count) != levels_)
      throw ConfigError("segmentation with patch " + std::to_string(patch) + " needs " + std::to_string(levels_) +
                        " encoder taps, got " + std::to_string(tap_count));
    const auto width = [&](int j) { return cfg.feature_size << j; };
    stem_ = ResBlock<T>(ps, name + ".stem", kModalityCount, width(0), rng);
    for (int k = 0; k + 1 < levels_; ++k) {
      std::vector<std::pair<UpConv<T>, ConvBlock<T>>> steps;
      const int n = levels_ - 1 - k;
      std::int64_t ci = enc_dim;
      for (int s = 0; s < n; ++s) {
        const auto base = name + ".skip" + std::to_string(k) + "." + std::to_string(s);
        steps.emplace_back(UpConv<T>(ps, base + ".up", ci, width(k + 1), rng),
                           ConvBlock<T>(ps, base + ".block", width(k + 1), width(k + 1), rng));
        ci = width(k + 1);
      }
      skips_.push_back(std::move(steps));
    }
    for (int j = levels_ - 1; j >= 0; --j) {
      const auto ci = j + 1 == levels_ ? enc_dim : width(j + 1);
      const auto base = name + ".up" + std::to_string(j);
      ups_.push_back(UpConv<T>(ps, base + ".up", ci, width(j), rng));
      merges_.push_back(ResBlock<T>(ps, base + ".block", 2 * width(j), width(j), rng));
    }
    out_ = Conv3d<T>(ps, name + ".out", width(0), cfg.classes, 1, rng);
  }

  const SegHeadConfig& config() const { return cfg_; }
  int levels() const { return levels_; }

  /// `taps` are fused feature volumes [dim, g...] ordered shallow to deep; `input` is [4, D, H, W].
  Tensor<T> operator()(const std::vector<Tensor<T>>& taps, const Tensor<T>& input) const {
    ag::require(static_cast<int>(taps.size()) == levels_, "UnetrHead: tap count mismatch");
    std::vector<Tensor<T>> skip(static_cast<std::size_t>(levels_));
    skip[0] = stem_(input);
    for (int k = 0; k + 1 < levels_; ++k) {
      auto x = taps[static_cast<std::size_t>(k)];
      for (const auto& [up, block] : skips_[static_cast<std::size_t>(k)]) x = block(up(x));
      skip[static_cast<std::size_t>(k + 1)] = x;
    }
    auto x = taps.back();
    for (int i = 0; i < levels_; ++i) {
      const int j = levels_ - 1 - i;
      x = ups_[static_cast<std::size_t>(i)](x);
      x = merges_[static_cast<std::size_t>(i)](ag::concat_channels<T>({x, skip[static_cast<std::size_t>(j)]}));
    }
    return out_(x);
  }

 private:
  SegHeadConfig cfg_;
  int levels_ = 0;
  ResBlock<T> stem_;
  std::vector<std::vector<std::pair<UpConv<T>, ConvBlock<T>>>> skips_;
  std::vector<UpConv<T>> ups_;
  std::vector<ResBlock<T>> merges_;
  Conv3d<T> out_;
};

template <class T>
class ClsHead {
 public:
  ClsHead() = default;
  ClsHead(nn::ParamStore<T>& ps, const std::string& name, std::int64_t enc_dim, const ClsHeadConfig& cfg, nn::Rng& rng)
      : cfg_(cfg), fc_(ps, name + ".fc", enc_dim, cfg.classes, rng) {}

  const ClsHeadConfig& config() const { return cfg_; }

  /// Pooled rows of the final encoder output -> [1, classes] logits.
  Tensor<T> operator()(const Tensor<T>& tokens) const { return fc_(pool(tokens)); }

  Tensor<T> pool(const Tensor<T>& tokens) const {
    if (cfg_.pool_cls) return ag::mean_rows(tokens);
    std::vector<std::int64_t> rows(static_cast<std::size_t>(tokens.dim(0) - 1));
    std::iota(rows.begin(), rows.end(), 1);
    return ag::mean_rows(ag::gather_rows(tokens, rows));
  }

 private:
  ClsHeadConfig cfg_;
  nn::Linear<T> fc_;
};

// ---------------------------------------------------------------- finetune model

template <class Backbone>
struct FinetuneModel {
  using T = typename Backbone::scalar_type;
  using scalar_type = T;

  Task task = Task::segmentation;
  std::unique_ptr<Backbone> backbone;
  nn::ParamStore<T> head_params;
  UnetrHead<T> seg;
  ClsHead<T> cls;
  std::vector<int> taps;  // encoder block indices feeding the segmentation head, shallow to deep

  FinetuneModel(std::unique_ptr<Backbone> b, Task t, const SegHeadConfig& seg_cfg, const ClsHeadConfig& cls_cfg,
                std::uint64_t head_seed)
      : task(t), backbone(std::move(b)) {
    nn::Rng rng(head_seed);
    const auto& enc = backbone->config().encoder;
    taps = enc.taps;
    std::sort(taps.begin(), taps.end());
    if (t == Task::segmentation)
      seg = UnetrHead<T>(head_params, "seg_head", enc.dim, model_patch(*backbone), taps.size(), seg_cfg, rng);
    else
      cls = ClsHead<T>(head_params, "cls_head", enc.dim, cls_cfg, rng);
  }

  /// Backbone (unless frozen) and head parameters that receive updates.
  NamedParams<T> trainable() {
    auto out = trainable_params(backbone->params());
    for (auto& p : trainable_params(head_params)) out.push_back(p);
    return out;
  }

  void freeze_backbone(bool frozen) { backbone->params().set_trainable("", !frozen); }
};

/// Per-voxel class logits [classes, D, H, W]; dims must be multiples of the patch size.
template <class Backbone, class T = typename Backbone::scalar_type>
Tensor<T> seg_forward(const FinetuneModel<Backbone>& m, const MultiModalStudy& s) {
  if (m.task != Task::segmentation) throw ValidationError("seg_forward on a classification model");
  const auto enc = encode_unmasked(*m.backbone, s);
  const auto spec = m.backbone->grid_for(s);
  std::vector<Tensor<T>> grids;
  for (int t : m.taps) grids.push_back(tokens_to_grid(fuse_tokens_per_location(enc.taps.at(t), enc.origin, spec), spec));
  return m.seg(grids, stacked_input<T>(s));
}

/// [1, classes] logits from the pooled final encoder output.
template <class Backbone, class T = typename Backbone::scalar_type>
Tensor<T> cls_forward(const FinetuneModel<Backbone>& m, const MultiModalStudy& s) {
  if (m.task != Task::classification) throw ValidationError("cls_forward on a segmentation model");
  return m.cls(encode_unmasked(*m.backbone, s).tokens);
}

// ---------------------------------------------------------------- sliding window

/// Window starts along one axis: multiples of the stride, the last one clamped to len - window.
inline std::vector<std::int64_t> sliding_window_starts(std::int64_t len, std::int64_t window, double overlap) {
  if (window < 1) throw ValidationError("sliding window size must be >= 1");
  if (len < window)
    throw ValidationError("axis length " + std::to_string(len) + " is smaller than the window " + std::to_string(window));
  if (!(overlap >= 0 && overlap < 1)) throw ValidationError("sliding window overlap must lie in [0, 1)");
  const auto stride = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(static_cast<double>(window) * (1.0 - overlap) + 1e-9)));
  std::vector<std::int64_t> starts;
  for (std::int64_t s = 0;; s += stride) {
    if (s + window >= len) {
      if (starts.empty() || starts.back() != len - window) starts.push_back(len - window);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

/// Averages `forward` over overlapping windows with uniform weights. `forward`
/// maps a window-sized study to [C, w, w, w] logits. Tiles run in a fixed order.
template <class T, class Fn>
Tensor<T> sliding_window_infer(const MultiModalStudy& s, std::int64_t window, double overlap, Fn&& forward) {
  ag::NoGradGuard guard;
  const Dims d = s.dims();
  const auto zs = sliding_window_starts(d.d, window, overlap), ys = sliding_window_starts(d.h, window, overlap),
             xs = sliding_window_starts(d.w, window, overlap);
  const Dims wd{window, window, window};
  std::vector<double> sum;
  std::vector<int> count(static_cast<std::size_t>(d.voxels()), 0);
  std::int64_t channels = 0;
  for (auto z0 : zs)
    for (auto y0 : ys)
      for (auto x0 : xs) {
        const auto logits = forward(extract_region(s, {z0, y0, x0}, wd));
        if (channels == 0) {
          channels = logits.dim(0);
          sum.assign(static_cast<std::size_t>(channels * d.voxels()), 0.0);
        }
        const auto v = logits.data();
        for (std::int64_t c = 0; c < channels; ++c)
          for (std::int64_t z = 0; z < window; ++z)
            for (std::int64_t y = 0; y < window; ++y)
              for (std::int64_t x = 0; x < window; ++x) {
                const auto dst = ((c * d.d + z0 + z) * d.h + y0 + y) * d.w + x0 + x;
                sum[static_cast<std::size_t>(dst)] += v[static_cast<std::size_t>(((c * window + z) * window + y) * window + x)];
              }
        for (std::int64_t z = 0; z < window; ++z)
          for (std::int64_t y = 0; y < window; ++y)
            for (std::int64_t x = 0; x < window; ++x) ++count[static_cast<std::size_t>(((z0 + z) * d.h + y0 + y) * d.w + x0 + x)];
      }
  ag::Buffer<T> out(sum.size());
  const auto vox = static_cast<std::size_t>(d.voxels());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(sum[i] / count[i % vox]);
  return Tensor<T>::constant({channels, d.d, d.h, d.w}, std::move(out));
}

/// Segmentation logits for a whole study: one direct pass when it fits the window, tiles otherwise.
template <class Backbone, class T = typename Backbone::scalar_type>
Tensor<T> segment_study(const FinetuneModel<Backbone>& m, const MultiModalStudy& s) {
  const auto& cfg = m.seg.config();
  const Dims d = s.dims();
  auto fwd = [&](const MultiModalStudy& w) { return seg_forward(m, w); };
  if (d.d <= cfg.window && d.h <= cfg.window && d.w <= cfg.window) {
    ag::NoGradGuard guard;
    return fwd(s);
  }
  return sliding_window_infer<T>(s, cfg.window, cfg.overlap, fwd);
}

template <class T>
LabelMap argmax_labels(const Tensor<T>& logits) {
  const auto c = logits.dim(0);
  const Dims d{logits.dim(1), logits.dim(2), logits.dim(3)};
  LabelMap out(d);
  const auto v = logits.data();
  const auto n = d.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    for (std::int64_t k = 1; k < c; ++k)
      if (v[static_cast<std::size_t>(k * n + i)] > v[static_cast<std::size_t>(best * n + i)]) best = static_cast<int>(k);
    out.data[static_cast<std::size_t>(i)] = class_to_label(best);
  }
  return out;
}

inline std::vector<int> label_classes(const LabelMap& l) {
  std::vector<int> out(l.data.size());
  std::transform(l.data.begin(), l.data.end(), out.begin(), [](std::uint8_t v) { return label_to_class(v); });
  return out;
}

// ---------------------------------------------------------------- sampling

/// Draws a class uniformly among the classes that occur, then a study uniformly within it.
class Oversampler {
 public:
  Oversampler(const std::vector<int>& labels, int classes) : pools_(static_cast<std::size_t>(classes)) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= classes) throw ValidationError("oversampler: label out of range");
      pools_[static_cast<std::size_t>(labels[i])].push_back(i);
    }
    for (std::size_t c = 0; c < pools_.size(); ++c)
      if (!pools_[c].empty()) present_.push_back(c);
    if (present_.empty()) throw ValidationError("oversampler: no labeled samples");
  }

  std::size_t draw(Rng& rng) const {
    std::uniform_int_distribution<std::size_t> pick_class(0, present_.size() - 1);
    const auto& pool = pools_[present_[pick_class(rng)]];
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    return pool[pick(rng)];
  }

  std::vector<std::size_t> stream(Rng& rng, std::size_t n) const {
    std::vector<std::size_t> out(n);
    for (auto& i : out) i = draw(rng);
    return out;
  }

 private:
  std::vector<std::vector<std::size_t>> pools_;
  std::vector<std::size_t> present_;
};

/// Uniformly placed crop of `size` (clamped to the study extent per axis).
inline MultiModalStudy random_crop(const MultiModalStudy& s, std::int64_t size, Rng& rng) {
  const Dims d = s.dims();
  auto start = [&](std::int64_t len) {
    if (len <= size) return std::int64_t{0};
    return std::uniform_int_distribution<std::int64_t>(0, len - size)(rng);
  };
  const std::array<std::int64_t, 3> st{start(d.d), start(d.h), start(d.w)};
  return extract_region(s, st, {std::min(size, d.d), std::min(size, d.h), std::min(size, d.w)});
}

// ---------------------------------------------------------------- finetuning

struct FinetuneConfig {
  Task task = Task::segmentation;
  Regime regime = Regime::full;
  int epochs = 100;
  double warmup_epochs = 40;
  double lr = 1e-4;
  double weight_decay = 0.05;
  double clip_norm = 0.5;
  int batch_size = 0;  // 0 picks the task default: 2 for segmentation, 16 for classification
  bool oversample = true;
  std::uint64_t seed = 0;
  SegHeadConfig seg;
  ClsHeadConfig cls;

  int effective_batch() const { return batch_size > 0 ? batch_size : (task == Task::segmentation ? 2 : 16); }

  void validate() const {
    if (epochs < 1) throw ConfigError("finetune.epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs) throw ConfigError("finetune.warmup_epochs must lie in [0, epochs)");
    if (!(lr > 0)) throw ConfigError("finetune.lr must be positive");
    if (weight_decay < 0) throw ConfigError("finetune.weight_decay must be non-negative");
    if (!(clip_norm > 0)) throw ConfigError("finetune.clip_norm must be positive");
    if (batch_size < 0) throw ConfigError("finetune.batch_size must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = {{"task", task_name(c.task)},   {"regime", regime_name(c.regime)}, {"epochs", c.epochs},
       {"warmup_epochs", c.warmup_epochs}, {"lr", c.lr},             {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},     {"batch_size", c.batch_size},  {"oversample", c.oversample},
       {"seed", c.seed},               {"seg", c.seg},                {"cls", c.cls}};
}

struct FinetuneEpoch {
  int epoch = 0;
  double loss = 0;
  double lr = 0;  // rate at the epoch's last step
  double grad_norm = 0;
};

struct FinetuneResult {
  std::vector<FinetuneEpoch> history;
  std::filesystem::path checkpoint;
  std::filesystem::path ledger;
};

struct FinetuneRunOptions {
  std::filesystem::path out_dir;
  nlohmann::json run_config = nlohmann::json::object();
  std::function<void(const FinetuneEpoch&)> on_epoch;
};

template <class Backbone>
Checkpoint make_finetune_checkpoint(const FinetuneModel<Backbone>& m, const FinetuneConfig& cfg,
                                    const nlohmann::json& run_config) {
  Checkpoint ck;
  ck.meta["kind"] = "finetuned";
  ck.meta["backbone_kind"] = Backbone::kKind;
  ck.meta["model"] = model_config_json(*m.backbone);
  ck.meta["finetune"] = cfg;
  ck.meta["run_config"] = run_config;
  store_params(ck, m.backbone->params());
  store_params(ck, m.head_params);
  return ck;
}

template <class Backbone>
FinetuneModel<Backbone> load_finetuned(const Checkpoint& ck) {
  using T = typename Backbone::scalar_type;
  if (ck.meta.value("kind", "") != "finetuned" || ck.meta.value("backbone_kind", "") != Backbone::kKind)
    throw ValidationError(std::string("checkpoint does not hold a finetuned ") + Backbone::kKind + " model");
  const auto& f = ck.meta.at("finetune");
  SegHeadConfig seg = f.at("seg").get<SegHeadConfig>();
  ClsHeadConfig cls = f.at("cls").get<ClsHeadConfig>();
  using Config = std::decay_t<decltype(std::declval<const Backbone&>().config())>;
  auto backbone = std::make_unique<Backbone>(ck.meta.at("model").get<Config>());
  restore_params(ck, backbone->params());
  FinetuneModel<Backbone> m(std::move(backbone), parse_task(f.at("task").get<std::string>()), seg, cls, 0);
  restore_params<T>(ck, m.head_params);
  return m;
}

template <class Backbone>
std::unique_ptr<Backbone> load_backbone(const Checkpoint& ck) {
  using T = typename Backbone::scalar_type;
  if constexpr (std::string_view(Backbone::kKind) == "multimae")
    return load_multimae<T>(ck);
  else
    return load_baseline<T>(ck);
}

/// Backbone per regime: scratch initializes from `config`, frozen and full
/// start from a pretraining checkpoint of the same kind.
template <class Backbone, class Config>
FinetuneModel<Backbone> make_finetune_model(const FinetuneConfig& cfg, const Config& config,
                                            const std::optional<std::filesystem::path>& pretrained) {
  std::unique_ptr<Backbone> backbone;
  if (cfg.regime == Regime::scratch) {
    if (pretrained) throw ConfigError("finetune.regime 'scratch' does not take a pretrained checkpoint");
    backbone = std::make_unique<Backbone>(config);
  } else {
    if (!pretrained)
      throw ConfigError(std::string("finetune.regime '") + std::string(regime_name(cfg.regime)) +
                        "' needs a pretrained checkpoint");
    backbone = load_backbone<Backbone>(load_checkpoint(*pretrained));
  }
  return FinetuneModel<Backbone>(std::move(backbone), cfg.task, cfg.seg, cfg.cls, cfg.seed + 1);
}

/// Finetunes the head (and the backbone unless frozen) with AdamW, per-step
/// warmup-cosine rates and global-norm clipping. Writes a JSON-lines ledger
/// and the final checkpoint into out_dir.
template <class Backbone, class T = typename Backbone::scalar_type>
FinetuneResult finetune(FinetuneModel<Backbone>& m, const FinetuneConfig& cfg, const std::vector<MultiModalStudy>& train,
                        const FinetuneRunOptions& opts) {
  cfg.validate();
  if (train.empty()) throw ValidationError("finetuning needs at least one training study");
  if (cfg.task != m.task) throw ConfigError("finetune.task does not match the model's head");
  std::vector<int> labels;
  for (const auto& s : train) {
    if (cfg.task == Task::segmentation && !s.labelmap)
      throw ValidationError("study '" + s.id + "' has no labelmap for segmentation finetuning");
    if (cfg.task == Task::classification) {
      if (!s.class_label) throw ValidationError("study '" + s.id + "' has no class label for classification finetuning");
      labels.push_back(static_cast<int>(*s.class_label));
    }
  }
  m.freeze_backbone(cfg.regime == Regime::frozen);
  AdamW<T> opt(m.trainable(), {0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(cfg.seed);
  std::optional<Oversampler> sampler;
  if (cfg.task == Task::classification && cfg.oversample) sampler.emplace(labels, m.cls.config().classes);

  namespace fs = std::filesystem;
  fs::create_directories(opts.out_dir);
  FinetuneResult res;
  res.checkpoint = opts.out_dir / "finetuned.mmv";
  res.ledger = opts.out_dir / "ledger.jsonl";
  std::ofstream ledger(res.ledger, std::ios::trunc);
  if (!ledger) throw IoError("cannot write ledger " + res.ledger.string());
  ledger << nlohmann::json{{"config", opts.run_config}}.dump() << '\n';

  const auto bs = static_cast<std::size_t>(cfg.effective_batch());
  const std::size_t steps_per_epoch = (train.size() + bs - 1) / bs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order;
    if (sampler) {
      order = sampler->stream(rng, train.size());
    } else {
      order.resize(train.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
    }
    FinetuneEpoch rec;
    rec.epoch = epoch;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t end = std::min(order.size(), b + bs);
      // rate at the middle of this step on the fractional-epoch axis
      const double t = (static_cast<double>(step % static_cast<std::int64_t>(steps_per_epoch)) + 0.5) /
                           static_cast<double>(steps_per_epoch) + epoch;
      const double lr = warmup_cosine_lr(t, cfg.lr, cfg.warmup_epochs, cfg.epochs);
      opt.zero_grad();
      double loss_sum = 0;
      if (cfg.task == Task::segmentation) {
        const T inv = T(1) / static_cast<T>(end - b);
        for (std::size_t i = b; i < end; ++i) {
          const auto crop = random_crop(train[order[i]], m.seg.config().crop, rng);
          auto loss = ag::scale(ag::soft_dice_loss(seg_forward(m, crop), label_classes(*crop.labelmap)), inv);
          loss_sum += loss.item();
          loss.backward();
        }
      } else {
        std::vector<Tensor<T>> logits;
        std::vector<int> y;
        for (std::size_t i = b; i < end; ++i) {
          logits.push_back(cls_forward(m, train[order[i]]));
          y.push_back(labels[order[i]]);
        }
        auto loss = ag::cross_entropy(ag::concat_rows(logits), y);
        loss_sum = loss.item();
        loss.backward();
      }
      if (!std::isfinite(loss_sum))
        throw NumericError("non-finite finetuning loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      const auto clip = clip_grad_norm(opt.params(), cfg.clip_norm);
      opt.step(lr);
      rec.loss += loss_sum;
      rec.grad_norm += clip.pre_norm;
      rec.lr = lr;
      ++step;
    }
    const auto nb = static_cast<double>(steps_per_epoch);
    rec.loss /= nb;
    rec.grad_norm /= nb;
    ledger << nlohmann::json{{"epoch", rec.epoch}, {"loss", rec.loss}, {"lr", rec.lr}, {"grad_norm", rec.grad_norm}}.dump()
           << '\n';
    ledger.flush();
    res.history.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  save_checkpoint(res.checkpoint, make_finetune_checkpoint(m, cfg, opts.run_config));
  return res;
}

// ---------------------------------------------------------------- evaluation and export

template <class Backbone>
metrics::RegionDice evaluate_segmentation(const FinetuneModel<Backbone>& m, const MultiModalStudy& s,
                                          LabelMap* prediction = nullptr) {
  if (!s.labelmap) throw ValidationError("study '" + s.id + "' has no labelmap to evaluate against");
  auto pred = argmax_labels(segment_study(m, s));
  const auto d = metrics::region_dice(pred, *s.labelmap);
  if (prediction) *prediction = std::move(pred);
  return d;
}

template <class Backbone>
std::vector<double> class_logits(const FinetuneModel<Backbone>& m, const MultiModalStudy& s) {
  ag::NoGradGuard guard;
  const auto l = cls_forward(m, s);
  return std::vector<double>(l.data().begin(), l.data().end());
}

inline int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// study_id, one logit column per class, predicted class name.
inline void write_class_predictions(const std::filesystem::path& csv,
                                    const std::vector<std::pair<std::string, std::vector<double>>>& rows) {
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw IoError("cannot write " + csv.string());
  out << "study_id";
  for (int c = 0; c < kClassCount; ++c) out << ",logit_" << class_name(static_cast<TumorClass>(c));
  out << ",predicted\n";
  for (const auto& [id, logits] : rows) {
    out << id;
    for (double v : logits) out << ',' << nlohmann::json(v).dump();
    out << ',' << class_name(static_cast<TumorClass>(argmax(logits))) << '\n';
  }
}

}  // namespace mmv
