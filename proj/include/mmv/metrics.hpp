#pragma once
// Reconstruction fidelity (PSNR, SSIM), tumor region overlap (Dice on
// ET/TC/WT) and classification scores (accuracy, macro F1, multi-class MCC).

#include "mmv/errors.hpp"
#include "mmv/volume.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace mmv::metrics {

inline void require_same_dims(const Dims& a, const Dims& b, const char* what) {
  if (!(a == b)) throw ValidationError(std::string(what) + ": dims differ " + a.str() + " vs " + b.str());
}

/// 10·log10(peak² / MSE). Identical inputs return +infinity.
inline double psnr(std::span<const float> reference, std::span<const float> candidate, double peak = 1.0) {
  if (reference.size() != candidate.size()) throw ValidationError("psnr: size mismatch");
  if (reference.empty()) throw ValidationError("psnr: empty input");
  if (!(peak > 0)) throw ValidationError("psnr: peak must be positive");
  double se = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = static_cast<double>(reference[i]) - static_cast<double>(candidate[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(reference.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

inline double psnr(const Volume& reference, const Volume& candidate, double peak = 1.0) {
  require_same_dims(reference.dims, candidate.dims, "psnr");
  return psnr(reference.data, candidate.data, peak);
}

struct SsimOptions {
  int window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

namespace detail {

// Sums of a cubic window at every valid position, computed one axis at a time.
inline std::vector<double> box_sums(const std::vector<double>& v, Dims d, int win, Dims& out_dims) {
  std::vector<double> cur = v;
  Dims cd = d;
  for (int axis = 2; axis >= 0; --axis) {
    Dims nd = cd;
    nd[axis] = cd[axis] - win + 1;
    std::vector<double> next(static_cast<std::size_t>(nd.voxels()));
    const std::int64_t stride = axis == 2 ? 1 : axis == 1 ? cd.w : cd.h * cd.w;
    for (std::int64_t z = 0; z < nd.d; ++z)
      for (std::int64_t y = 0; y < nd.h; ++y)
        for (std::int64_t x = 0; x < nd.w; ++x) {
          const std::int64_t base = (z * cd.h + y) * cd.w + x;
          double s = 0;
          for (int k = 0; k < win; ++k) s += cur[static_cast<std::size_t>(base + k * stride)];
          next[static_cast<std::size_t>((z * nd.h + y) * nd.w + x)] = s;
        }
    cur = std::move(next);
    cd = nd;
  }
  out_dims = cd;
  return cur;
}

}  // namespace detail

/// Mean structural similarity over all positions where a uniform cubic window
/// fits entirely inside the volume. Moments use population (1/n) normalization.
inline double ssim(const Volume& a, const Volume& b, const SsimOptions& opt = {}) {
  require_same_dims(a.dims, b.dims, "ssim");
  const Dims d = a.dims;
  if (d.d < opt.window || d.h < opt.window || d.w < opt.window)
    throw ValidationError("ssim: volume " + d.str() + " smaller than the " + std::to_string(opt.window) +
                          "-voxel window");
  const std::size_t n = a.data.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a.data[i];
    y[i] = b.data[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  Dims od;
  const auto sx = detail::box_sums(x, d, opt.window, od);
  const auto sy = detail::box_sums(y, d, opt.window, od);
  const auto sxx = detail::box_sums(xx, d, opt.window, od);
  const auto syy = detail::box_sums(yy, d, opt.window, od);
  const auto sxy = detail::box_sums(xy, d, opt.window, od);
  const double inv = 1.0 / std::pow(static_cast<double>(opt.window), 3);
  const double c1 = std::pow(opt.k1 * opt.data_range, 2), c2 = std::pow(opt.k2 * opt.data_range, 2);
  double total = 0;
  for (std::size_t i = 0; i < sx.size(); ++i) {
    const double mx = sx[i] * inv, my = sy[i] * inv;
    const double vx = sxx[i] * inv - mx * mx, vy = syy[i] * inv - my * my, cxy = sxy[i] * inv - mx * my;
    total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(sx.size());
}

/// Copies of both volumes mapped to [0,1] with the reference's min and max. The
/// candidate is clamped so out-of-range synthesis cannot inflate the scores.
struct MetricPair {
  Volume reference, candidate;
};

inline MetricPair unit_range_pair(const Volume& reference, const Volume& candidate) {
  require_same_dims(reference.dims, candidate.dims, "unit_range_pair");
  const auto [lo_it, hi_it] = std::minmax_element(reference.data.begin(), reference.data.end());
  const double lo = *lo_it, span = static_cast<double>(*hi_it) - lo;
  MetricPair p{reference, candidate};
  auto map = [&](float v) {
    if (span <= 0) return 0.0f;
    return static_cast<float>(std::clamp((static_cast<double>(v) - lo) / span, 0.0, 1.0));
  };
  for (auto& v : p.reference.data) v = map(v);
  for (auto& v : p.candidate.data) v = map(v);
  return p;
}

struct Fidelity {
  double psnr = 0;
  double ssim = 0;
};

inline Fidelity fidelity(const Volume& truth, const Volume& synthesized) {
  const auto p = unit_range_pair(truth, synthesized);
  return {psnr(p.reference, p.candidate, 1.0), ssim(p.reference, p.candidate)};
}

// ---------------------------------------------------------------- regions

using Mask = std::vector<std::uint8_t>;

struct RegionMasks {
  Dims dims;
  Mask et, tc, wt;
};

inline RegionMasks compose_regions(const LabelMap& lm) {
  RegionMasks r{lm.dims, Mask(lm.data.size()), Mask(lm.data.size()), Mask(lm.data.size())};
  for (std::size_t i = 0; i < lm.data.size(); ++i) {
    const int v = lm.data[i];
    if (!LabelMap::valid_code(v)) throw ValidationError("compose_regions: unknown label value " + std::to_string(v));
    r.et[i] = v == 4;
    r.tc[i] = v == 1 || v == 4;
    r.wt[i] = v != 0;
  }
  return r;
}

/// 2|A∩B| / (|A|+|B|); two empty masks score 1.
inline double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw ValidationError("dice: size mismatch");
  std::int64_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > 1 || b[i] > 1) throw ValidationError("dice: non-binary mask value");
    na += a[i];
    nb += b[i];
    both += a[i] & b[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

struct RegionDice {
  double et = 0, tc = 0, wt = 0;
};

inline RegionDice region_dice(const LabelMap& prediction, const LabelMap& truth) {
  require_same_dims(prediction.dims, truth.dims, "region_dice");
  const auto p = compose_regions(prediction), t = compose_regions(truth);
  return {dice(p.et, t.et), dice(p.tc, t.tc), dice(p.wt, t.wt)};
}

// ---------------------------------------------------------- classification

struct ClassificationReport {
  std::vector<std::vector<std::int64_t>> confusion;  // [truth][prediction]
  double accuracy = 0;
  double macro_f1 = 0;
  double mcc = 0;
};

/// Multi-class Matthews correlation (Gorodkin's R_K) from a confusion matrix.
inline double mcc_from_confusion(const std::vector<std::vector<std::int64_t>>& c) {
  const std::size_t k = c.size();
  double s = 0, correct = 0;
  std::vector<double> t(k, 0.0), p(k, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double v = static_cast<double>(c[i][j]);
      s += v;
      t[i] += v;
      p[j] += v;
      if (i == j) correct += v;
    }
  double pt = 0, pp = 0, tt = 0;
  for (std::size_t i = 0; i < k; ++i) {
    pt += p[i] * t[i];
    pp += p[i] * p[i];
    tt += t[i] * t[i];
  }
  const double den = std::sqrt((s * s - pp) * (s * s - tt));
  if (den == 0.0) return 0.0;
  return (correct * s - pt) / den;
}

inline ClassificationReport classification_report(std::span<const int> predictions, std::span<const int> labels,
                                                   int classes = kClassCount) {
  if (predictions.size() != labels.size()) throw ValidationError("classification_report: length mismatch");
  if (labels.empty()) throw ValidationError("classification_report: empty input");
  ClassificationReport r;
  r.confusion.assign(static_cast<std::size_t>(classes), std::vector<std::int64_t>(static_cast<std::size_t>(classes), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes || predictions[i] < 0 || predictions[i] >= classes)
      throw ValidationError("classification_report: class index out of range");
    ++r.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  std::int64_t correct = 0;
  double f1_sum = 0;
  for (int c = 0; c < classes; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    const std::int64_t tp = r.confusion[cu][cu];
    std::int64_t fp = 0, fn = 0;
    for (int o = 0; o < classes; ++o) {
      if (o == c) continue;
      fp += r.confusion[static_cast<std::size_t>(o)][cu];
      fn += r.confusion[cu][static_cast<std::size_t>(o)];
    }
    correct += tp;
    const std::int64_t den = 2 * tp + fp + fn;
    f1_sum += den == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(den);
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  r.macro_f1 = f1_sum / classes;
  r.mcc = mcc_from_confusion(r.confusion);
  return r;
}

}  // namespace mmv::metrics
