#pragma once
// Per-modality cross-attention decoders. Each rebuilds every patch of its
// modality from the shared encoded context.

#include "mmv/encoder.hpp"

namespace mmv {

struct DecoderConfig {
  int layers = 3;  // one cross-attention block followed by layers-1 self-attention blocks
  std::int64_t dim = 384;
  int heads = 12;
  double mlp_ratio = 4.0;

  void validate() const {
    if (layers < 1) throw ConfigError("decoder.layers must be >= 1");
    if (heads < 1 || dim % heads != 0) throw ConfigError("decoder.dim must be divisible by decoder.heads");
    if (dim < 6) throw ConfigError("decoder.dim must be at least 6 for 3-D positional embeddings");
  }
};

inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"layers", c.layers}, {"dim", c.dim}, {"heads", c.heads}, {"mlp_ratio", c.mlp_ratio}};
}
inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  c.layers = j.at("layers");
  c.dim = j.at("dim");
  c.heads = j.at("heads");
  c.mlp_ratio = j.at("mlp_ratio");
}

template <class T>
struct QuerySequence {
  Tensor<T> queries;           // [full patch count, decoder dim], canonical order
  std::vector<bool> from_mask;  // true where the query is the mask token

  std::int64_t size() const { return static_cast<std::int64_t>(from_mask.size()); }
};

template <class T>
class ModalityDecoder {
 public:
  ModalityDecoder() = default;
  ModalityDecoder(nn::ParamStore<T>& ps, const std::string& name, std::int64_t encoder_dim, std::int64_t patch_voxels,
                  const DecoderConfig& cfg, nn::Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    in_proj = nn::Linear<T>(ps, name + ".in_proj", encoder_dim, cfg.dim, rng);
    mask_token = ps.add(name + ".mask_token", {cfg.dim}, nn::init::trunc_normal<T>(0.02, cfg.dim, rng));
    cross_ = nn::CrossAttentionBlock<T>(ps, name + ".cross", cfg.dim, cfg.heads, cfg.mlp_ratio, rng);
    for (int l = 1; l < cfg.layers; ++l)
      blocks_.emplace_back(ps, name + ".blocks." + std::to_string(l - 1), cfg.dim, cfg.heads, cfg.mlp_ratio, rng);
    norm_ = nn::LayerNorm<T>(ps, name + ".norm", cfg.dim);
    head = nn::Linear<T>(ps, name + ".head", cfg.dim, patch_voxels, rng);
  }

  const DecoderConfig& config() const { return cfg_; }

  /// Context projected into the decoder width (all encoded rows, CLS included).
  Tensor<T> project_context(const EncodedSequence<T>& enc) const { return in_proj(enc.tokens); }

  /// Cross-attention to the context, self-attention among queries, linear head to p^3 per query.
  Tensor<T> decode(const QuerySequence<T>& q, const Tensor<T>& context) const {
    ag::require(context.defined() && context.dim(0) > 0, "decode: empty context");
    auto x = cross_(q.queries, context);
    for (const auto& b : blocks_) x = b(x);
    return head(norm_(x));
  }

  nn::Linear<T> in_proj;
  Tensor<T> mask_token;
  nn::Linear<T> head;

 private:
  DecoderConfig cfg_;
  nn::CrossAttentionBlock<T> cross_;
  std::vector<nn::TransformerBlock<T>> blocks_;
  nn::LayerNorm<T> norm_;
};

/// Query sequence for one modality: projected encoded tokens at visible
/// positions, the mask token at masked positions, plus decoder-width
/// positional codes and the projected modality embedding everywhere.
/// `context` must be decoder.project_context(enc).
template <class T>
QuerySequence<T> build_queries(Modality m, const MaskPlan& plan, const EncodedSequence<T>& enc,
                               const Tensor<T>& context, const ModalityDecoder<T>& decoder,
                               const PatchGridSpec& spec, const Tensor<T>& dec_pos, const Tensor<T>& modality_embed) {
  const ModalityMask* entry = plan.find(m);
  if (!entry) throw ValidationError("mask plan has no entry for " + std::string(modality_name(m)));
  const std::int64_t n = spec.count();
  if (entry->capacity() != n) throw ValidationError("mask plan capacity does not match the patch grid");
  const std::int64_t mask_row = context.dim(0);
  std::vector<std::int64_t> src(static_cast<std::size_t>(n), mask_row);
  QuerySequence<T> q;
  q.from_mask.assign(static_cast<std::size_t>(n), true);
  std::int64_t found = 0;
  for (std::size_t r = 0; r < enc.origin.size(); ++r) {
    if (enc.origin[r].modality != m) continue;
    const auto idx = spec.linear(enc.origin[r].coord);
    src[static_cast<std::size_t>(idx)] = static_cast<std::int64_t>(r) + 1;  // row 0 is CLS
    q.from_mask[static_cast<std::size_t>(idx)] = false;
    ++found;
  }
  if (found != static_cast<std::int64_t>(entry->visible.size()))
    throw ValidationError("encoded origins for " + std::string(modality_name(m)) + " do not match the mask plan");
  const auto dim = decoder.config().dim;
  auto pool = ag::concat_rows<T>({context, ag::reshape(decoder.mask_token, {1, dim})});
  auto x = ag::gather_rows(pool, src);
  x = ag::add(x, dec_pos);
  auto emb = ag::matmul(ag::reshape(modality_embed, {1, static_cast<std::int64_t>(modality_embed.size())}),
                        ag::transpose(decoder.in_proj.weight));
  q.queries = ag::add_rowvec(x, emb);
  return q;
}

}  // namespace mmv
