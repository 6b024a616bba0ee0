#pragma once
// The multi-modal masked autoencoder: per-modality adapters, a shared encoder
// and one cross-attention decoder per modality.

#include "mmv/decoders.hpp"

#include <mutex>

namespace mmv {

struct MultiMaeConfig {
  std::int64_t patch = 16;
  EncoderConfig encoder;
  DecoderConfig decoder;
  MaskConfig mask;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (patch < 1) throw ConfigError("patch must be >= 1");
    encoder.validate();
    decoder.validate();
    mask.validate();
  }
};

inline void to_json(nlohmann::json& j, const MultiMaeConfig& c) {
  j = {{"patch", c.patch},
       {"encoder", c.encoder},
       {"decoder", c.decoder},
       {"mask", {{"ratio", c.mask.global_ratio}, {"alpha", c.mask.alpha}}},
       {"init_seed", c.init_seed}};
}
inline void from_json(const nlohmann::json& j, MultiMaeConfig& c) {
  c.patch = j.at("patch");
  c.encoder = j.at("encoder").get<EncoderConfig>();
  c.decoder = j.at("decoder").get<DecoderConfig>();
  c.mask.global_ratio = j.at("mask").at("ratio");
  c.mask.alpha = j.at("mask").at("alpha");
  c.init_seed = j.value("init_seed", std::uint64_t{0});
}

/// Thread-safe wrapper around PosEmbedCache.
template <class T>
class SharedPosCache {
 public:
  Tensor<T> get(const Dims& grid, std::int64_t dim) const {
    std::lock_guard lock(mu_);
    return cache_.get(grid, dim);
  }

 private:
  mutable std::mutex mu_;
  mutable PosEmbedCache<T> cache_;
};

template <class T>
struct MaeOutput {
  EncodedSequence<T> encoded;
  PatchGridSpec spec;
  std::vector<Modality> modalities;   // decoded modalities
  std::vector<Tensor<T>> predictions;  // [n, p^3] per decoded modality
  std::vector<PatchArray> targets;     // ground-truth patches, aligned with predictions
};

template <class T>
class MultiMae {
 public:
  using scalar_type = T;
  static constexpr const char* kKind = "multimae";

  explicit MultiMae(const MultiMaeConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    nn::Rng rng(cfg.init_seed);
    adapters_ = Adapters<T>(params_, "adapters", cfg.patch, cfg.encoder.dim, rng);
    encoder_ = Encoder<T>(params_, "encoder", cfg.encoder, rng);
    for (auto m : kRegistry)
      decoders_[index_of(m)] = ModalityDecoder<T>(params_, "decoders." + std::string(modality_name(m)), cfg.encoder.dim,
                                                  cfg.patch * cfg.patch * cfg.patch, cfg.decoder, rng);
  }
  MultiMae(const MultiMae&) = delete;
  MultiMae& operator=(const MultiMae&) = delete;

  const MultiMaeConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  const Adapters<T>& adapters() const { return adapters_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const ModalityDecoder<T>& decoder(Modality m) const { return decoders_[index_of(m)]; }

  PatchGridSpec grid_for(const MultiModalStudy& s) const { return PatchGridSpec::for_volume(s.dims(), cfg_.patch); }
  Tensor<T> encoder_pos(const PatchGridSpec& spec) const { return enc_pos_.get(spec.grid, cfg_.encoder.dim); }
  Tensor<T> decoder_pos(const PatchGridSpec& spec) const { return dec_pos_.get(spec.grid, cfg_.decoder.dim); }

  /// Full token sets (all patches) for every present modality.
  std::vector<TokenSet<T>> tokenize(const MultiModalStudy& s) const {
    std::vector<TokenSet<T>> out;
    const auto spec = grid_for(s);
    for (auto m : s.present()) out.push_back(project_tokens(patchify(s.volume(m), cfg_.patch), m, adapters_, encoder_pos(spec)));
    return out;
  }

  /// Encodes the plan's visible tokens. Only visible patches go through the adapters.
  EncodedSequence<T> encode(const MultiModalStudy& s, const MaskPlan& plan) const {
    const auto spec = grid_for(s);
    std::vector<TokenSet<T>> sets;
    MaskPlan dense;
    for (const auto& e : plan.entries) {
      if (e.capacity() != spec.count()) throw ValidationError("mask plan capacity does not match the patch grid");
      ModalityMask d;
      d.modality = e.modality;
      d.visible.resize(e.visible.size());
      std::iota(d.visible.begin(), d.visible.end(), 0);
      dense.entries.push_back(d);
      if (e.visible.empty()) continue;
      if (!s.has(e.modality))
        throw ValidationError("mask plan has visible tokens for absent modality " + std::string(modality_name(e.modality)));
      auto patches = patchify(s.volume(e.modality), cfg_.patch).select(e.visible);
      sets.push_back(project_tokens(patches, e.modality, adapters_, encoder_pos(spec)));
    }
    return encoder_.encode(assemble_input(sets, dense, encoder_.cls_token));
  }

  /// Predicted patches [n, p^3] for modality m.
  Tensor<T> decode(Modality m, const MaskPlan& plan, const EncodedSequence<T>& enc, const PatchGridSpec& spec) const {
    const auto& dec = decoders_[index_of(m)];
    auto ctx = dec.project_context(enc);
    auto q = build_queries(m, plan, enc, ctx, dec, spec, decoder_pos(spec), adapters_.modality_embed[index_of(m)]);
    return dec.decode(q, ctx);
  }

  /// Encode visible tokens, then reconstruct every planned modality that has ground truth in `s`.
  MaeOutput<T> forward(const MultiModalStudy& s, const MaskPlan& plan) const {
    MaeOutput<T> out;
    out.spec = grid_for(s);
    out.encoded = encode(s, plan);
    for (const auto& e : plan.entries) {
      if (!s.has(e.modality)) continue;
      out.modalities.push_back(e.modality);
      out.predictions.push_back(decode(e.modality, plan, out.encoded, out.spec));
      out.targets.push_back(patchify(s.volume(e.modality), cfg_.patch));
    }
    return out;
  }

  /// Pretraining mask for the modalities present in `s`.
  MaskPlan sample_plan(Rng& rng, const MultiModalStudy& s) const {
    const auto present = s.present();
    const std::vector<std::int64_t> capacity(present.size(), grid_for(s).count());
    return sample_multimodal_plan(rng, present, capacity, cfg_.mask);
  }

 private:
  MultiMaeConfig cfg_;
  nn::ParamStore<T> params_;
  Adapters<T> adapters_;
  Encoder<T> encoder_;
  std::array<ModalityDecoder<T>, kModalityCount> decoders_;
  SharedPosCache<T> enc_pos_, dec_pos_;
};

/// Mean squared error pooled uniformly over every voxel of every modality.
template <class T>
Tensor<T> reconstruction_loss(const std::vector<Tensor<T>>& predictions, const std::vector<PatchArray>& targets) {
  if (predictions.size() != targets.size() || predictions.empty())
    throw ValidationError("reconstruction_loss: one target per prediction required");
  std::vector<Tensor<T>> terms;
  std::size_t count = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].size() != targets[i].data.size())
      throw ValidationError("reconstruction_loss: prediction/target shape mismatch");
    const std::vector<T> tgt(targets[i].data.begin(), targets[i].data.end());
    terms.push_back(ag::sum_squared_error(predictions[i], std::span<const T>(tgt)));
    count += tgt.size();
  }
  return ag::scale(ag::add_n(terms), T(1) / static_cast<T>(count));
}

/// MAE loss of one study: reconstruct every present modality under `plan`.
template <class T>
Tensor<T> mae_loss(const MultiMae<T>& model, const MultiModalStudy& s, const MaskPlan& plan) {
  auto out = model.forward(s, plan);
  return reconstruction_loss(out.predictions, out.targets);
}

template <class T>
Volume predictions_to_volume(const Tensor<T>& pred, const PatchGridSpec& spec) {
  PatchArray a{spec, {}, {}};
  for (std::int64_t i = 0; i < spec.count(); ++i) a.coords.push_back(spec.coord(i));
  a.data.assign(pred.data().begin(), pred.data().end());
  return unpatchify(a);
}

/// Generates `target` from the other present modalities by treating it as fully masked.
template <class T>
Volume synthesize_modality(const MultiModalStudy& s, Modality target, const MultiMae<T>& model) {
  std::vector<Modality> context;
  for (auto m : s.present())
    if (m != target) context.push_back(m);
  if (context.empty())
    throw ValidationError("cannot synthesize " + std::string(modality_name(target)) + ": no other modality present");
  ag::NoGradGuard guard;
  const auto spec = model.grid_for(s);
  const auto plan = full_mask_plan(context, target, spec.count());
  MultiModalStudy ctx = s;
  ctx.volumes[index_of(target)].reset();
  const auto enc = model.encode(ctx, plan);
  auto v = predictions_to_volume(model.decode(target, plan, enc, spec), spec);
  v.spacing = s.volume(context.front()).spacing;
  return v;
}

}  // namespace mmv
