#pragma once
// Channel-stacked ViT baseline: the four modalities form one 4-channel volume,
// tokenized on a single grid and pretrained as a plain masked autoencoder with
// one decoder. Absent modalities are filled with the background value 0.

#include "mmv/pretraining.hpp"

namespace mmv {

struct BaselineConfig {
  std::int64_t patch = 16;
  EncoderConfig encoder;
  DecoderConfig decoder{8, 384, 12, 4.0};
  double mask_ratio = 0.75;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (patch < 1) throw ConfigError("patch must be >= 1");
    encoder.validate();
    decoder.validate();
    if (!(mask_ratio >= 0 && mask_ratio < 1)) throw ConfigError("mask.ratio must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const BaselineConfig& c) {
  j = {{"patch", c.patch},
       {"encoder", c.encoder},
       {"decoder", c.decoder},
       {"mask", {{"ratio", c.mask_ratio}}},
       {"init_seed", c.init_seed}};
}
inline void from_json(const nlohmann::json& j, BaselineConfig& c) {
  c.patch = j.at("patch");
  c.encoder = j.at("encoder").get<EncoderConfig>();
  c.decoder = j.at("decoder").get<DecoderConfig>();
  c.mask_ratio = j.at("mask").at("ratio");
  c.init_seed = j.value("init_seed", std::uint64_t{0});
}

/// Registry-ordered channels sharing one spatial grid.
struct StackedVolume {
  Dims dims;
  std::array<Volume, kModalityCount> channels;
  std::array<bool, kModalityCount> present{};
};

inline StackedVolume stack_study(const MultiModalStudy& s) {
  const auto mods = s.present();
  if (mods.empty()) throw ValidationError("study '" + s.id + "' has no modality to stack");
  StackedVolume out;
  out.dims = s.dims();
  for (auto m : kRegistry) {
    const auto i = index_of(m);
    if (s.has(m)) {
      out.channels[i] = s.volume(m);
      out.present[i] = true;
    } else {
      out.channels[i] = Volume(out.dims);  // background fill
      out.channels[i].spacing = s.volume(mods.front()).spacing;
    }
  }
  return out;
}

/// Rows of 4*p^3 values: channel-major, then (dz, dy, dx) within each channel.
inline PatchArray stacked_patches(const StackedVolume& v, std::int64_t patch) {
  std::array<PatchArray, kModalityCount> per;
  for (std::size_t c = 0; c < kModalityCount; ++c) per[c] = patchify(v.channels[c], patch);
  PatchArray out{per[0].spec, per[0].coords, {}};
  const auto pv = static_cast<std::size_t>(out.spec.patch_voxels());
  out.data.resize(per[0].data.size() * kModalityCount);
  for (std::int64_t r = 0; r < out.spec.count(); ++r)
    for (std::size_t c = 0; c < kModalityCount; ++c) {
      const auto src = per[c].row(r);
      std::copy(src.begin(), src.end(), out.data.begin() + static_cast<std::ptrdiff_t>((r * kModalityCount + c) * pv));
    }
  return out;
}

/// Uniform random mask over the joint grid: round((1 - ratio) * n) tokens stay visible.
struct UniformMask {
  std::vector<std::int64_t> visible, masked;
  std::int64_t capacity() const { return static_cast<std::int64_t>(visible.size() + masked.size()); }
};

inline std::int64_t baseline_visible_count(std::int64_t n, double ratio) {
  return std::llround((1.0 - ratio) * static_cast<double>(n));
}

inline UniformMask sample_uniform_mask(Rng& rng, std::int64_t n, double ratio) {
  UniformMask m;
  sample_partition(rng, n, baseline_visible_count(n, ratio), m.visible, m.masked);
  return m;
}

inline UniformMask no_mask(std::int64_t n) {
  UniformMask m;
  m.visible.resize(static_cast<std::size_t>(n));
  std::iota(m.visible.begin(), m.visible.end(), 0);
  return m;
}

template <class T>
class BaselineVit {
 public:
  using scalar_type = T;
  static constexpr const char* kKind = "baseline";

  explicit BaselineVit(const BaselineConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    nn::Rng rng(cfg.init_seed);
    const auto pv = cfg.patch * cfg.patch * cfg.patch;
    patch_embed = nn::Linear<T>(params_, "patch_embed", kModalityCount * pv, cfg.encoder.dim, rng);
    encoder_ = Encoder<T>(params_, "encoder", cfg.encoder, rng);
    dec_embed_ = nn::Linear<T>(params_, "decoder.embed", cfg.encoder.dim, cfg.decoder.dim, rng);
    mask_token_ = params_.add("decoder.mask_token", {cfg.decoder.dim}, nn::init::trunc_normal<T>(0.02, cfg.decoder.dim, rng));
    for (int l = 0; l < cfg.decoder.layers; ++l)
      dec_blocks_.emplace_back(params_, "decoder.blocks." + std::to_string(l), cfg.decoder.dim, cfg.decoder.heads,
                               cfg.decoder.mlp_ratio, rng);
    dec_norm_ = nn::LayerNorm<T>(params_, "decoder.norm", cfg.decoder.dim);
    dec_head_ = nn::Linear<T>(params_, "decoder.head", cfg.decoder.dim, kModalityCount * pv, rng);
  }
  BaselineVit(const BaselineVit&) = delete;
  BaselineVit& operator=(const BaselineVit&) = delete;

  const BaselineConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  const Encoder<T>& encoder() const { return encoder_; }

  PatchGridSpec grid_for(const MultiModalStudy& s) const { return PatchGridSpec::for_volume(s.dims(), cfg_.patch); }

  /// Encodes the visible joint tokens. Origins carry grid coordinates; the
  /// modality field is meaningless for joint tokens and left at its default.
  EncodedSequence<T> encode(const StackedVolume& v, const UniformMask& mask) const {
    const auto patches = stacked_patches(v, cfg_.patch);
    if (mask.capacity() != patches.spec.count()) throw ValidationError("mask capacity does not match the patch grid");
    const auto width = patches.spec.patch_voxels() * static_cast<std::int64_t>(kModalityCount);
    ag::Buffer<T> rows;
    rows.reserve(mask.visible.size() * static_cast<std::size_t>(width));
    EncoderInput<T> in;
    for (auto i : mask.visible) {
      const auto first = patches.data.begin() + i * width;
      rows.insert(rows.end(), first, first + width);
      in.origin.push_back({Modality::t1, patches.coords[static_cast<std::size_t>(i)]});
    }
    auto x = patch_embed(Tensor<T>::constant({static_cast<std::int64_t>(mask.visible.size()), width}, std::move(rows)));
    x = ag::add(x, ag::gather_rows(enc_pos_.get(patches.spec.grid, cfg_.encoder.dim), mask.visible));
    in.sequence = ag::concat_rows<T>({ag::reshape(encoder_.cls_token, {1, cfg_.encoder.dim}), x});
    return encoder_.encode(in);
  }

  /// Predicted joint patches [n, 4 p^3] for every grid position.
  Tensor<T> decode(const EncodedSequence<T>& enc, const UniformMask& mask, const PatchGridSpec& spec) const {
    auto ctx = dec_embed_(enc.tokens);
    const std::int64_t n = spec.count(), mask_row = ctx.dim(0);
    std::vector<std::int64_t> src(static_cast<std::size_t>(n), mask_row);
    for (std::size_t r = 0; r < mask.visible.size(); ++r) src[static_cast<std::size_t>(mask.visible[r])] = static_cast<std::int64_t>(r) + 1;
    auto pool = ag::concat_rows<T>({ctx, ag::reshape(mask_token_, {1, cfg_.decoder.dim})});
    auto x = ag::add(ag::gather_rows(pool, src), dec_pos_.get(spec.grid, cfg_.decoder.dim));
    x = ag::concat_rows<T>({ag::gather_rows(ctx, {0}), x});  // CLS joins decoder self-attention
    for (const auto& b : dec_blocks_) x = b(x);
    std::vector<std::int64_t> drop_cls(static_cast<std::size_t>(n));
    std::iota(drop_cls.begin(), drop_cls.end(), 1);
    return dec_head_(dec_norm_(ag::gather_rows(x, drop_cls)));
  }

  Tensor<T> forward(const StackedVolume& v, const UniformMask& mask) const {
    const auto spec = PatchGridSpec::for_volume(v.dims, cfg_.patch);
    return decode(encode(v, mask), mask, spec);
  }

  nn::Linear<T> patch_embed;

 private:
  BaselineConfig cfg_;
  nn::ParamStore<T> params_;
  Encoder<T> encoder_;
  nn::Linear<T> dec_embed_;
  Tensor<T> mask_token_;
  std::vector<nn::TransformerBlock<T>> dec_blocks_;
  nn::LayerNorm<T> dec_norm_;
  nn::Linear<T> dec_head_;
  SharedPosCache<T> enc_pos_, dec_pos_;
};

/// Pooled MSE over the present channels only, the same pooling as the multi-modal loss.
template <class T>
Tensor<T> baseline_reconstruction_loss(const Tensor<T>& pred, const StackedVolume& v, std::int64_t patch) {
  const auto target = stacked_patches(v, patch);
  const std::int64_t n = target.spec.count(), pv = target.spec.patch_voxels();
  auto per_channel = ag::reshape(pred, {n * static_cast<std::int64_t>(kModalityCount), pv});
  std::vector<std::int64_t> rows;
  ag::Buffer<T> tgt;
  for (std::int64_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < kModalityCount; ++c) {
      if (!v.present[c]) continue;
      const auto row = r * static_cast<std::int64_t>(kModalityCount) + static_cast<std::int64_t>(c);
      rows.push_back(row);
      const auto first = target.data.begin() + row * pv;
      tgt.insert(tgt.end(), first, first + pv);
    }
  if (rows.empty()) throw ValidationError("baseline loss: no present channel");
  auto sse = ag::sum_squared_error(ag::gather_rows(per_channel, rows), std::span<const T>(tgt));
  return ag::scale(sse, T(1) / static_cast<T>(tgt.size()));
}

template <class T>
Tensor<T> pretrain_loss(const BaselineVit<T>& model, const MultiModalStudy& s, Rng& rng) {
  const auto v = stack_study(s);
  const auto mask = sample_uniform_mask(rng, model.grid_for(s).count(), model.config().mask_ratio);
  return baseline_reconstruction_loss(model.forward(v, mask), v, model.config().patch);
}

template <class T>
Volume channel_volume(const Tensor<T>& pred, const PatchGridSpec& spec, std::size_t channel) {
  const auto pv = spec.patch_voxels();
  PatchArray a{spec, {}, {}};
  a.data.resize(static_cast<std::size_t>(spec.count() * pv));
  const auto d = pred.data();
  for (std::int64_t i = 0; i < spec.count(); ++i) {
    a.coords.push_back(spec.coord(i));
    const auto off = (i * static_cast<std::int64_t>(kModalityCount) + static_cast<std::int64_t>(channel)) * pv;
    std::copy(d.begin() + off, d.begin() + off + pv, a.data.begin() + i * pv);
  }
  return unpatchify(a);
}

template <class T>
std::vector<std::pair<Modality, Volume>> reconstruct_study(const BaselineVit<T>& model, const MultiModalStudy& s, Rng& rng) {
  const auto v = stack_study(s);
  const auto spec = model.grid_for(s);
  const auto pred = model.forward(v, sample_uniform_mask(rng, spec.count(), model.config().mask_ratio));
  std::vector<std::pair<Modality, Volume>> r;
  for (auto m : s.present()) r.emplace_back(m, channel_volume(pred, spec, index_of(m)));
  return r;
}

template <class T>
nlohmann::json model_config_json(const BaselineVit<T>& model) {
  return model.config();
}

/// Baseline generation of `target`: its channel is background-filled and every
/// joint token is visible; the decoder's output for that channel is returned.
template <class T>
Volume synthesize_modality(const MultiModalStudy& s, Modality target, const BaselineVit<T>& model) {
  MultiModalStudy ctx = s;
  ctx.volumes[index_of(target)].reset();
  if (ctx.present().empty())
    throw ValidationError("cannot synthesize " + std::string(modality_name(target)) + ": no other modality present");
  ag::NoGradGuard guard;
  const auto spec = model.grid_for(s);
  const auto v = stack_study(ctx);
  auto out = channel_volume(model.forward(v, no_mask(spec.count())), spec, index_of(target));
  out.spacing = v.channels[index_of(ctx.present().front())].spacing;
  return out;
}

template <class T>
std::unique_ptr<BaselineVit<T>> load_baseline(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != BaselineVit<T>::kKind)
    throw ValidationError("checkpoint does not hold a baseline model (kind '" + ck.meta.value("kind", "") + "')");
  auto model = std::make_unique<BaselineVit<T>>(ck.meta.at("model").get<BaselineConfig>());
  restore_params(ck, model->params());
  return model;
}

}  // namespace mmv
