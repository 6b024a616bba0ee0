#pragma once
// Shared ViT encoder over the concatenated visible tokens of all modalities.

#include "mmv/masking.hpp"
#include "mmv/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <map>

namespace mmv {

struct EncoderConfig {
  int layers = 12;
  std::int64_t dim = 768;
  int heads = 12;
  double mlp_ratio = 4.0;
  std::vector<int> taps{3, 6, 9, 12};  // 1-based block indices whose outputs are kept

  void validate() const {
    if (layers < 1) throw ConfigError("encoder.layers must be >= 1");
    if (heads < 1 || dim % heads != 0) throw ConfigError("encoder.dim must be divisible by encoder.heads");
    if (dim < 6) throw ConfigError("encoder.dim must be at least 6 for 3-D positional embeddings");
    if (!(mlp_ratio > 0)) throw ConfigError("encoder.mlp_ratio must be positive");
    for (int t : taps)
      if (t < 1 || t > layers) throw ConfigError("encoder.taps entry " + std::to_string(t) + " outside [1, layers]");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"layers", c.layers}, {"dim", c.dim}, {"heads", c.heads}, {"mlp_ratio", c.mlp_ratio}, {"taps", c.taps}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.layers = j.at("layers");
  c.dim = j.at("dim");
  c.heads = j.at("heads");
  c.mlp_ratio = j.at("mlp_ratio");
  c.taps = j.at("taps").get<std::vector<int>>();
}

/// Where an encoder row came from.
struct TokenOrigin {
  Modality modality = Modality::t1;
  Coord coord;
};

template <class T>
struct EncoderInput {
  Tensor<T> sequence;                                      // [1 + N, dim], row 0 is CLS
  std::vector<TokenOrigin> origin;                         // rows 1..N
  std::vector<std::pair<Modality, std::int64_t>> segments;  // visible count per planned modality, registry order

  std::int64_t length() const { return sequence.dim(0); }
};

template <class T>
struct EncodedSequence {
  Tensor<T> tokens;  // [1 + N, dim] after the final norm; row 0 is CLS
  std::vector<TokenOrigin> origin;
  std::map<int, Tensor<T>> taps;  // block index -> [1 + N, dim]

  std::int64_t length() const { return tokens.dim(0); }
  Tensor<T> cls() const { return ag::gather_rows(tokens, {0}); }
};

/// [CLS] ++ visible tokens of each planned modality in registry order, each in canonical order.
template <class T>
EncoderInput<T> assemble_input(const std::vector<TokenSet<T>>& token_sets, const MaskPlan& plan, const Tensor<T>& cls) {
  EncoderInput<T> in;
  std::vector<Tensor<T>> parts{ag::reshape(cls, {1, static_cast<std::int64_t>(cls.size())})};
  for (const auto& entry : plan.entries) {
    in.segments.emplace_back(entry.modality, static_cast<std::int64_t>(entry.visible.size()));
    if (entry.visible.empty()) continue;
    const TokenSet<T>* ts = nullptr;
    for (const auto& t : token_sets)
      if (t.modality == entry.modality) ts = &t;
    if (!ts)
      throw ValidationError("mask plan references " + std::string(modality_name(entry.modality)) +
                            " but no tokens were provided for it");
    if (ts->size() != entry.capacity())
      throw ValidationError("mask plan capacity does not match the token count of " +
                            std::string(modality_name(entry.modality)));
    std::vector<std::int64_t> rows;
    for (auto idx : entry.visible) {
      if (idx < 0 || idx >= ts->size()) throw ValidationError("mask plan index out of range");
      rows.push_back(idx);
      in.origin.push_back({entry.modality, ts->coords[static_cast<std::size_t>(idx)]});
    }
    parts.push_back(ag::gather_rows(ts->tokens, rows));
  }
  for (const auto& t : token_sets)
    if (!plan.find(t.modality))
      throw ValidationError("tokens for " + std::string(modality_name(t.modality)) + " are not covered by the mask plan");
  in.sequence = ag::concat_rows(parts);
  return in;
}

template <class T>
void check_finite(const Tensor<T>& t, const std::string& where) {
  for (T v : t.data())
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite values in " + where);
}

template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(nn::ParamStore<T>& ps, const std::string& name, const EncoderConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
    cfg.validate();
    cls_token = ps.add(name + ".cls_token", {cfg.dim}, nn::init::trunc_normal<T>(0.02, cfg.dim, rng));
    for (int l = 0; l < cfg.layers; ++l)
      blocks_.emplace_back(ps, name + ".blocks." + std::to_string(l), cfg.dim, cfg.heads, cfg.mlp_ratio, rng);
    norm_ = nn::LayerNorm<T>(ps, name + ".norm", cfg.dim);
  }

  const EncoderConfig& config() const { return cfg_; }

  EncodedSequence<T> encode(const EncoderInput<T>& in) const {
    ag::require(in.sequence.dim(0) >= 2, "encode: sequence must hold CLS and at least one token");
    EncodedSequence<T> out;
    out.origin = in.origin;
    Tensor<T> x = in.sequence;
    for (int l = 0; l < cfg_.layers; ++l) {
      x = blocks_[static_cast<std::size_t>(l)](x);
      if (std::find(cfg_.taps.begin(), cfg_.taps.end(), l + 1) != cfg_.taps.end()) out.taps[l + 1] = x;
    }
    out.tokens = norm_(x);
    check_finite(out.tokens, "encoder output");
    return out;
  }

  Tensor<T> cls_token;

 private:
  EncoderConfig cfg_;
  std::vector<nn::TransformerBlock<T>> blocks_;
  nn::LayerNorm<T> norm_;
};

}  // namespace mmv
