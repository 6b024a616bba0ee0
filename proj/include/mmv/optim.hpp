#pragma once
// AdamW, global-norm gradient clipping and the two learning-rate schedules.

#include "mmv/tensor.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

namespace mmv {

using ag::Tensor;

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Weight decay applies to matrices and kernels only; biases, norms, tokens and embeddings are exempt.
template <class T>
bool decays(const Tensor<T>& p) {
  return p.rank() >= 2;
}

template <class T>
class AdamW {
 public:
  struct Moments {
    std::vector<T> m, v;
  };

  AdamW(NamedParams<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {}

  /// One decoupled-weight-decay Adam update. Parameters without a gradient are skipped.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params_) {
      if (!p.requires_grad() || !p.has_grad()) continue;
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(p.size(), T(0));
        st.v.assign(p.size(), T(0));
      }
      auto w = p.mutable_data();
      const auto g = p.grad();
      const double wd = decays(p) ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        const double m = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        st.m[i] = static_cast<T>(m);
        st.v[i] = static_cast<T>(v);
        double wi = w[i];
        if (wd != 0.0) wi -= lr * wd * wi;
        wi -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        w[i] = static_cast<T>(wi);
      }
    }
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  const std::map<std::string, Moments>& state() const { return state_; }
  std::map<std::string, Moments>& state() { return state_; }
  const NamedParams<T>& params() const { return params_; }

 private:
  NamedParams<T> params_;
  AdamWConfig cfg_;
  std::map<std::string, Moments> state_;
  std::int64_t t_ = 0;
};

template <class T>
double global_grad_norm(const NamedParams<T>& params) {
  double sq = 0;
  for (const auto& [_, p] : params)
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

struct ClipResult {
  double pre_norm = 0;
  double post_norm = 0;
  bool clipped = false;
};

/// Rescales all gradients so their global L2 norm is at most max_norm.
template <class T>
ClipResult clip_grad_norm(const NamedParams<T>& params, double max_norm) {
  ClipResult r;
  r.pre_norm = r.post_norm = global_grad_norm(params);
  if (r.pre_norm > max_norm) {
    const double coef = max_norm / (r.pre_norm + 1e-6);
    for (const auto& [_, p] : params) {
      if (!p.has_grad()) continue;
      for (T& g : p.node()->grad) g = static_cast<T>(g * coef);
    }
    r.post_norm = global_grad_norm(params);
    r.clipped = true;
  }
  return r;
}

/// Multiplies the rate by `factor` after `patience` consecutive epochs without a
/// strict improvement larger than `threshold`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.1, int patience = 50, double threshold = 1e-6)
      : lr_(lr), factor_(factor), patience_(patience), threshold_(threshold) {}

  double step(double metric) {
    if (metric < best_ - threshold_) {
      best_ = metric;
      bad_ = 0;
    } else if (++bad_ >= patience_) {
      lr_ *= factor_;
      bad_ = 0;
    }
    return lr_;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  int bad_epochs() const { return bad_; }
  void restore(double lr, double best, int bad) {
    lr_ = lr;
    best_ = best;
    bad_ = bad;
  }

 private:
  double lr_, factor_;
  int patience_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

/// Linear warmup from 0 to `base` over `warmup` epochs, then cosine decay to 0 at `total`.
/// `epoch` may be fractional.
inline double warmup_cosine_lr(double epoch, double base, double warmup, double total) {
  if (epoch <= 0) return 0.0;
  if (epoch < warmup) return base * epoch / warmup;
  if (epoch >= total) return 0.0;
  const double progress = (epoch - warmup) / (total - warmup);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mmv
