#pragma once
// Shared helpers for the test suites: central finite differences and small
// deterministic fixtures.

#include "mmv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <unistd.h>

namespace mmv::testing {

using ag::Tensor;

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline Tensor<double> random_param(ag::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  const auto n = static_cast<std::size_t>(ag::numel(shape));
  return Tensor<double>::parameter(std::move(shape), random_values(n, seed, lo, hi));
}

/// Relative error with a floor on the denominator for gradients that are numerically zero.
inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Fourth-order central difference of `loss` w.r.t. element i of leaf `p`.
/// The five-point stencil lets h stay large enough that cancellation noise
/// (~eps/h) is far below the truncation error of the two-point rule.
inline double central_difference(Tensor<double>& p, std::size_t i, const std::function<double()>& loss,
                                 double h = 1e-4) {
  auto w = p.mutable_data();
  const double orig = w[i];
  auto at = [&](double d) {
    w[i] = orig + d;
    return loss();
  };
  const double r = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
  w[i] = orig;
  return r;
}

/// Backpropagates `build()` once, then compares every element of every leaf
/// against central differences. Returns the worst relative error.
inline double max_gradient_error(std::vector<Tensor<double>> leaves, const std::function<Tensor<double>()>& build,
                                 double h = 1e-4) {
  for (auto& l : leaves) l.zero_grad();
  build().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    std::vector<double> g(l.size(), 0.0);
    if (l.has_grad()) std::copy(l.grad().begin(), l.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }
  auto value = [&] {
    ag::NoGradGuard guard;
    return build().item();
  };
  double worst = 0;
  for (std::size_t k = 0; k < leaves.size(); ++k)
    for (std::size_t i = 0; i < leaves[k].size(); ++i)
      worst = std::max(worst, rel_error(analytic[k][i], central_difference(leaves[k], i, value, h)));
  return worst;
}

struct SampledGradientCheck {
  std::size_t checked = 0;
  double worst = 0;
};

/// Like max_gradient_error, but over `count` distinct scalars drawn uniformly
/// from all leaf elements.
inline SampledGradientCheck sampled_gradient_error(std::vector<Tensor<double>> leaves,
                                                   const std::function<Tensor<double>()>& build, std::size_t count,
                                                   std::uint64_t seed, double h = 1e-4) {
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t k = 0; k < leaves.size(); ++k)
    for (std::size_t i = 0; i < leaves[k].size(); ++i) all.emplace_back(k, i);
  std::shuffle(all.begin(), all.end(), std::mt19937_64(seed));
  all.resize(std::min(count, all.size()));
  for (auto& l : leaves) l.zero_grad();
  build().backward();
  auto value = [&] {
    ag::NoGradGuard guard;
    return build().item();
  };
  SampledGradientCheck r;
  for (const auto& [k, i] : all) {
    const double a = leaves[k].has_grad() ? leaves[k].grad()[i] : 0.0;
    r.worst = std::max(r.worst, rel_error(a, central_difference(leaves[k], i, value, h)));
    ++r.checked;
  }
  return r;
}

}  // namespace mmv::testing

#include <filesystem>
#include <string>

namespace mmv::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mmv-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace mmv::testing
