#pragma once
// Parameter registry and the transformer building blocks shared by the
// encoder, the decoders, the baseline and the downstream heads.

#include "mmv/tensor.hpp"

#include <map>
#include <random>
#include <string>
#include <vector>

namespace mmv::nn {

using ag::Shape;
using ag::Tensor;
using Rng = std::mt19937_64;

/// Ordered, named collection of trainable leaves.
template <class T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto t = Tensor<T>::parameter(std::move(shape), std::move(init));
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  /// Toggles gradient tracking for every parameter whose name starts with prefix.
  void set_trainable(const std::string& prefix, bool on) {
    for (auto& [name, t] : entries_)
      if (name.rfind(prefix, 0) == 0) t.set_requires_grad(on);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace init {

template <class T>
std::vector<T> xavier_uniform(std::int64_t fan_in, std::int64_t fan_out, std::size_t count, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<T> v(count);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

/// Normal draws truncated to two standard deviations.
template <class T>
std::vector<T> trunc_normal(double stddev, std::size_t count, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<T> v(count);
  for (auto& x : v) {
    double z;
    do z = n(rng);
    while (std::abs(z) > 2.0);
    x = static_cast<T>(z * stddev);
  }
  return v;
}

template <class T>
std::vector<T> constant(std::size_t count, T value) {
  return std::vector<T>(count, value);
}

}  // namespace init

template <class T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out], may be undefined

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
         bool with_bias = true) {
    weight = ps.add(name + ".weight", {out, in}, init::xavier_uniform<T>(in, out, in * out, rng));
    if (with_bias) bias = ps.add(name + ".bias", {out}, init::constant<T>(out, T(0)));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ag::linear(x, weight, bias); }
  std::int64_t in_features() const { return weight.dim(1); }
  std::int64_t out_features() const { return weight.dim(0); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, std::int64_t dim) {
    gamma = ps.add(name + ".weight", {dim}, init::constant<T>(dim, T(1)));
    beta = ps.add(name + ".bias", {dim}, init::constant<T>(dim, T(0)));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ag::layer_norm(x, gamma, beta); }
};

template <class T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& name, std::int64_t dim, std::int64_t hidden, Rng& rng)
      : fc1(ps, name + ".fc1", dim, hidden, rng), fc2(ps, name + ".fc2", hidden, dim, rng) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(ag::gelu(fc1(x))); }
};

/// Multi-head attention with separate query and key/value sources.
template <class T>
struct Attention {
  Linear<T> q, k, v, proj;
  int heads = 1;

  Attention() = default;
  Attention(ParamStore<T>& ps, const std::string& name, std::int64_t dim, int heads_, Rng& rng)
      : q(ps, name + ".q", dim, dim, rng),
        k(ps, name + ".k", dim, dim, rng),
        v(ps, name + ".v", dim, dim, rng),
        proj(ps, name + ".proj", dim, dim, rng),
        heads(heads_) {
    ag::require(dim % heads_ == 0, "attention width " + std::to_string(dim) + " not divisible by " +
                                       std::to_string(heads_) + " heads");
  }
  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& context) const {
    return proj(ag::multi_head_attention(q(queries), k(context), v(context), heads));
  }
};

/// Pre-norm self-attention block: x + attn(ln(x)), then x + mlp(ln(x)).
template <class T>
struct TransformerBlock {
  LayerNorm<T> norm1, norm2;
  Attention<T> attn;
  Mlp<T> mlp;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& ps, const std::string& name, std::int64_t dim, int heads, double mlp_ratio,
                   Rng& rng)
      : norm1(ps, name + ".norm1", dim),
        norm2(ps, name + ".norm2", dim),
        attn(ps, name + ".attn", dim, heads, rng),
        mlp(ps, name + ".mlp", dim, static_cast<std::int64_t>(dim * mlp_ratio), rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto h = norm1(x);
    auto y = ag::add(x, attn(h, h));
    return ag::add(y, mlp(norm2(y)));
  }
};

/// Pre-norm cross-attention block: queries attend to an external context.
template <class T>
struct CrossAttentionBlock {
  LayerNorm<T> norm_q, norm_ctx, norm2;
  Attention<T> attn;
  Mlp<T> mlp;

  CrossAttentionBlock() = default;
  CrossAttentionBlock(ParamStore<T>& ps, const std::string& name, std::int64_t dim, int heads, double mlp_ratio,
                      Rng& rng)
      : norm_q(ps, name + ".norm_q", dim),
        norm_ctx(ps, name + ".norm_ctx", dim),
        norm2(ps, name + ".norm2", dim),
        attn(ps, name + ".attn", dim, heads, rng),
        mlp(ps, name + ".mlp", dim, static_cast<std::int64_t>(dim * mlp_ratio), rng) {}

  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& context) const {
    auto y = ag::add(queries, attn(norm_q(queries), norm_ctx(context)));
    return ag::add(y, mlp(norm2(y)));
  }
};

}  // namespace mmv::nn
