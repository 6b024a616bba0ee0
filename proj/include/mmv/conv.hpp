#pragma once
// Channels-first 3-D operators on single volumes laid out as [C, D, H, W].

#include "mmv/tensor.hpp"

namespace mmv::ag {

namespace detail {

template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

struct VolGeom {
  std::int64_t c, d, h, w;
  std::int64_t plane() const { return h * w; }
  std::int64_t voxels() const { return d * h * w; }
};

inline VolGeom geom(const Shape& s) {
  require(s.size() == 4, "expected a [C,D,H,W] tensor, got " + shape_str(s));
  return {s[0], s[1], s[2], s[3]};
}

/// Fills col[(ci*k^3 + kz*k^2 + ky*k + kx), y*W + x] for output slice z.
template <class T>
void im2col_slice(const T* in, const VolGeom& g, std::int64_t k, std::int64_t z, T* col) {
  const std::int64_t pad = k / 2, hw = g.plane();
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < g.c; ++ci)
    for (std::int64_t kz = 0; kz < k; ++kz)
      for (std::int64_t ky = 0; ky < k; ++ky)
        for (std::int64_t kx = 0; kx < k; ++kx, ++r) {
          T* dst = col + r * hw;
          const std::int64_t zz = z + kz - pad;
          if (zz < 0 || zz >= g.d) {
            std::fill(dst, dst + hw, T(0));
            continue;
          }
          const T* src = in + (ci * g.d + zz) * hw;
          const std::int64_t x0 = std::max<std::int64_t>(0, pad - kx);
          const std::int64_t x1 = std::min<std::int64_t>(g.w, g.w + pad - kx);
          for (std::int64_t y = 0; y < g.h; ++y) {
            T* drow = dst + y * g.w;
            const std::int64_t yy = y + ky - pad;
            if (yy < 0 || yy >= g.h) {
              std::fill(drow, drow + g.w, T(0));
              continue;
            }
            std::fill(drow, drow + x0, T(0));
            const T* srow = src + yy * g.w + (kx - pad);
            for (std::int64_t x = x0; x < x1; ++x) drow[x] = srow[x];
            std::fill(drow + x1, drow + g.w, T(0));
          }
        }
}

template <class T>
void col2im_slice(const T* col, const VolGeom& g, std::int64_t k, std::int64_t z, T* in_grad) {
  const std::int64_t pad = k / 2, hw = g.plane();
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < g.c; ++ci)
    for (std::int64_t kz = 0; kz < k; ++kz)
      for (std::int64_t ky = 0; ky < k; ++ky)
        for (std::int64_t kx = 0; kx < k; ++kx, ++r) {
          const std::int64_t zz = z + kz - pad;
          if (zz < 0 || zz >= g.d) continue;
          const T* src = col + r * hw;
          T* dst = in_grad + (ci * g.d + zz) * hw;
          const std::int64_t x0 = std::max<std::int64_t>(0, pad - kx);
          const std::int64_t x1 = std::min<std::int64_t>(g.w, g.w + pad - kx);
          for (std::int64_t y = 0; y < g.h; ++y) {
            const std::int64_t yy = y + ky - pad;
            if (yy < 0 || yy >= g.h) continue;
            const T* srow = src + y * g.w;
            T* drow = dst + yy * g.w + (kx - pad);
            for (std::int64_t x = x0; x < x1; ++x) drow[x] += srow[x];
          }
        }
}

}  // namespace detail

/// Stride-1 "same" convolution with an odd cubic kernel.
/// x[Ci,D,H,W], w[Co,Ci,k,k,k], b[Co] -> [Co,D,H,W]
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const auto g = detail::geom(x.shape());
  require(w.rank() == 5 && w.dim(1) == g.c && w.dim(2) == w.dim(3) && w.dim(3) == w.dim(4) && w.dim(2) % 2 == 1,
          "conv3d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  const auto co = w.dim(0), k = w.dim(2), kk = g.c * k * k * k, hw = g.plane(), vox = g.voxels();
  require(static_cast<std::int64_t>(b.size()) == co, "conv3d: bias size mismatch");
  ag::Buffer<T> out(static_cast<std::size_t>(co * vox));
  ag::Buffer<T> col(static_cast<std::size_t>(kk * hw));
  auto W = detail::cmat(w.values(), co, kk);
  for (std::int64_t z = 0; z < g.d; ++z) {
    detail::im2col_slice(x.data().data(), g, k, z, col.data());
    detail::StridedMap<T> o(out.data() + z * hw, co, hw, Eigen::OuterStride<>(vox));
    o.noalias() = W * detail::cmat(col, kk, hw);
  }
  for (std::int64_t c = 0; c < co; ++c)
    for (std::int64_t i = 0; i < vox; ++i) out[c * vox + i] += b.data()[c];
  return detail::make_result<T>(
      {co, g.d, g.h, g.w}, std::move(out), {x.ptr(), w.ptr(), b.ptr()}, [g, co, k, kk, hw, vox](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        auto& pb = self.parents[2];
        if (pb->requires_grad) {
          auto& gb = pb->ensure_grad();
          for (std::int64_t c = 0; c < co; ++c) {
            T acc = 0;
            for (std::int64_t i = 0; i < vox; ++i) acc += self.grad[c * vox + i];
            gb[c] += acc;
          }
        }
        if (!px->requires_grad && !pw->requires_grad) return;
        ag::Buffer<T> col(static_cast<std::size_t>(kk * hw));
        ag::Buffer<T> dcol(px->requires_grad ? col.size() : 0);
        auto W = detail::cmat(pw->value, co, kk);
        for (std::int64_t z = 0; z < g.d; ++z) {
          detail::CStridedMap<T> dy(self.grad.data() + z * hw, co, hw, Eigen::OuterStride<>(vox));
          if (pw->requires_grad) {
            detail::im2col_slice(px->value.data(), g, k, z, col.data());
            detail::mat(pw->ensure_grad(), co, kk).noalias() += dy * detail::cmat(col, kk, hw).transpose();
          }
          if (px->requires_grad) {
            detail::mat(dcol, kk, hw).noalias() = W.transpose() * dy;
            detail::col2im_slice(dcol.data(), g, k, z, px->ensure_grad().data());
          }
        }
      });
}

/// Transposed convolution with kernel 2 and stride 2 (doubles each spatial axis).
/// x[Ci,D,H,W], w[Ci,Co,2,2,2], b[Co] -> [Co,2D,2H,2W]
template <class T>
Tensor<T> conv_transpose3d_k2s2(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const auto g = detail::geom(x.shape());
  require(w.rank() == 5 && w.dim(0) == g.c && w.dim(2) == 2 && w.dim(3) == 2 && w.dim(4) == 2,
          "conv_transpose3d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  const auto ci = g.c, co = w.dim(1), n = g.voxels();
  require(static_cast<std::int64_t>(b.size()) == co, "conv_transpose3d: bias size mismatch");
  const std::int64_t od = 2 * g.d, oh = 2 * g.h, ow = 2 * g.w, ovox = od * oh * ow;
  detail::RowMat<T> Y = detail::cmat(w.values(), ci, co * 8).transpose() * detail::cmat(x.values(), ci, n);
  ag::Buffer<T> out(static_cast<std::size_t>(co * ovox));
  auto out_index = [=](std::int64_t c, std::int64_t tap, std::int64_t vox) {
    const std::int64_t a = tap >> 2, bb = (tap >> 1) & 1, cc = tap & 1;
    const std::int64_t z = vox / (g.h * g.w), y = (vox / g.w) % g.h, xx = vox % g.w;
    return c * ovox + ((2 * z + a) * oh + (2 * y + bb)) * ow + (2 * xx + cc);
  };
  for (std::int64_t c = 0; c < co; ++c)
    for (std::int64_t tap = 0; tap < 8; ++tap)
      for (std::int64_t v = 0; v < n; ++v) out[out_index(c, tap, v)] = Y(c * 8 + tap, v) + b.data()[c];
  return detail::make_result<T>(
      {co, od, oh, ow}, std::move(out), {x.ptr(), w.ptr(), b.ptr()}, [=](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        auto& pb = self.parents[2];
        detail::RowMat<T> dY(co * 8, n);
        for (std::int64_t c = 0; c < co; ++c)
          for (std::int64_t tap = 0; tap < 8; ++tap)
            for (std::int64_t v = 0; v < n; ++v) dY(c * 8 + tap, v) = self.grad[out_index(c, tap, v)];
        if (pb->requires_grad) {
          auto& gb = pb->ensure_grad();
          for (std::int64_t c = 0; c < co; ++c) gb[c] += dY.middleRows(c * 8, 8).sum();
        }
        if (pw->requires_grad)
          detail::mat(pw->ensure_grad(), ci, co * 8).noalias() +=
              detail::cmat(px->value, ci, n) * dY.transpose();
        if (px->requires_grad)
          detail::mat(px->ensure_grad(), ci, n).noalias() += detail::cmat(pw->value, ci, co * 8) * dY;
      });
}

/// Per-channel normalization over the spatial extent with affine gamma/beta[C].
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const auto c = x.dim(0);
  const auto v = static_cast<std::int64_t>(x.size()) / c;
  require(static_cast<std::int64_t>(gamma.size()) == c && static_cast<std::int64_t>(beta.size()) == c,
          "instance_norm: affine size mismatch");
  ag::Buffer<T> out(x.size()), xhat(x.size()), inv_std(static_cast<std::size_t>(c));
  for (std::int64_t r = 0; r < c; ++r) {
    const T* row = x.data().data() + r * v;
    T mu = 0;
    for (std::int64_t i = 0; i < v; ++i) mu += row[i];
    mu /= static_cast<T>(v);
    T var = 0;
    for (std::int64_t i = 0; i < v; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(v);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < v; ++i) {
      xhat[r * v + i] = (row[i] - mu) * inv_std[r];
      out[r * v + i] = xhat[r * v + i] * gamma.data()[r] + beta.data()[r];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.ptr(), gamma.ptr(), beta.ptr()},
      [c, v, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const auto& dy = self.grad;
        for (std::int64_t r = 0; r < c; ++r) {
          T sdy = 0, sdyx = 0;
          for (std::int64_t i = 0; i < v; ++i) {
            sdy += dy[r * v + i];
            sdyx += dy[r * v + i] * xhat[r * v + i];
          }
          if (pg->requires_grad) pg->ensure_grad()[r] += sdyx;
          if (pb->requires_grad) pb->ensure_grad()[r] += sdy;
          if (px->requires_grad) {
            auto& g = px->ensure_grad();
            const T gm = pg->value[r];
            const T m1 = gm * sdy / static_cast<T>(v), m2 = gm * sdyx / static_cast<T>(v);
            for (std::int64_t i = 0; i < v; ++i)
              g[r * v + i] += inv_std[r] * (gm * dy[r * v + i] - m1 - xhat[r * v + i] * m2);
          }
        }
      });
}

/// Concatenates [Ci,D,H,W] tensors of equal spatial extent along channels.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  require(!xs.empty(), "concat_channels: empty list");
  const auto g0 = detail::geom(xs.front().shape());
  std::vector<Tensor<T>> flat;
  std::int64_t channels = 0;
  for (const auto& x : xs) {
    const auto g = detail::geom(x.shape());
    require(g.d == g0.d && g.h == g0.h && g.w == g0.w, "concat_channels: spatial mismatch");
    channels += g.c;
    flat.push_back(reshape(x, {g.c, g.voxels()}));
  }
  return reshape(concat_rows(flat), {channels, g0.d, g0.h, g0.w});
}

/// Soft Dice loss on channel logits [C,...] against integer labels in [0,C).
/// Loss = 1 - mean over foreground classes c>=1 of (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps),
/// with p the per-voxel channel softmax.
template <class T>
Tensor<T> soft_dice_loss(const Tensor<T>& logits, const std::vector<int>& labels, T eps = T(1e-5)) {
  const auto c = logits.dim(0);
  const auto v = static_cast<std::int64_t>(logits.size()) / c;
  require(c >= 2, "soft_dice_loss: at least two classes required");
  require(static_cast<std::int64_t>(labels.size()) == v, "soft_dice_loss: label count mismatch");
  ag::Buffer<T> p(logits.size());
  for (std::int64_t i = 0; i < v; ++i) {
    T mx = logits.data()[i];
    for (std::int64_t k = 1; k < c; ++k) mx = std::max(mx, logits.data()[k * v + i]);
    T den = 0;
    for (std::int64_t k = 0; k < c; ++k) den += (p[k * v + i] = std::exp(logits.data()[k * v + i] - mx));
    for (std::int64_t k = 0; k < c; ++k) p[k * v + i] /= den;
  }
  ag::Buffer<T> inter(static_cast<std::size_t>(c), T(0)), denom(static_cast<std::size_t>(c), T(0));
  for (std::int64_t k = 1; k < c; ++k) {
    T sp = 0, sg = 0, spg = 0;
    for (std::int64_t i = 0; i < v; ++i) {
      const T gi = labels[i] == k ? T(1) : T(0);
      sp += p[k * v + i];
      sg += gi;
      spg += p[k * v + i] * gi;
    }
    inter[k] = T(2) * spg + eps;
    denom[k] = sp + sg + eps;
  }
  T score = 0;
  for (std::int64_t k = 1; k < c; ++k) score += inter[k] / denom[k];
  const T loss = T(1) - score / static_cast<T>(c - 1);
  return detail::make_result<T>(
      {1}, {loss}, {logits.ptr()},
      [c, v, labels, p = std::move(p), inter = std::move(inter), denom = std::move(denom)](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const T s = -self.grad[0] / static_cast<T>(c - 1);
        ag::Buffer<T> dp(static_cast<std::size_t>(c));
        for (std::int64_t i = 0; i < v; ++i) {
          dp[0] = 0;
          for (std::int64_t k = 1; k < c; ++k) {
            const T gi = labels[i] == k ? T(1) : T(0);
            dp[k] = s * (T(2) * gi * denom[k] - inter[k]) / (denom[k] * denom[k]);
          }
          T dot = 0;
          for (std::int64_t k = 0; k < c; ++k) dot += dp[k] * p[k * v + i];
          for (std::int64_t k = 0; k < c; ++k) g[k * v + i] += p[k * v + i] * (dp[k] - dot);
        }
      });
}

}  // namespace mmv::ag
