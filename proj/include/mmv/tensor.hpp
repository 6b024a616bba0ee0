#pragma once
// Minimal reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tensor is a shared handle to a graph node. Operations record a backward
// closure when any input requires a gradient and gradient recording is on.
// Calling backward() on a scalar walks the graph in reverse topological order,
// accumulates into every reachable node's grad and then releases the graph.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mmv::ag {

using Shape = std::vector<std::int64_t>;

/// Storage aligned to the widest SIMD packet. Vectorized reductions peel a
/// prefix that depends on the start address, so aligned storage is what
/// keeps results bit-identical between runs.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::int64_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

/// Thread-local switch for graph recording.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using Scalar = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, const std::vector<T>& values) {
    return constant(std::move(shape), Buffer<T>(values.begin(), values.end()));
  }
  static Tensor constant(Shape shape, std::initializer_list<T> values) {
    return constant(std::move(shape), Buffer<T>(values));
  }
  static Tensor constant(Shape shape, Buffer<T> values) {
    require(numel(shape) == static_cast<std::int64_t>(values.size()),
            "tensor value count does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape) {
    const auto count = static_cast<std::size_t>(numel(shape));
    return constant(std::move(shape), Buffer<T>(count, T(0)));
  }
  static Tensor full(Shape shape, T v) {
    const auto count = static_cast<std::size_t>(numel(shape));
    return constant(std::move(shape), Buffer<T>(count, v));
  }
  static Tensor parameter(Shape shape, const std::vector<T>& values) {
    return parameter(std::move(shape), Buffer<T>(values.begin(), values.end()));
  }
  static Tensor parameter(Shape shape, std::initializer_list<T> values) {
    return parameter(std::move(shape), Buffer<T>(values));
  }
  static Tensor parameter(Shape shape, Buffer<T> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }
  static Tensor scalar(T v) { return constant({1}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->value; }
  const Buffer<T>& values() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  T item() const {
    require(size() == 1, "item() on a tensor with " + std::to_string(size()) + " elements");
    return node_->value[0];
  }
  T at(std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.clear(); }

  Node<T>* node() const { return node_.get(); }
  const NodePtr& ptr() const { return node_; }

  /// Backpropagate from this scalar. The recorded graph is released afterwards.
  void backward() const {
    require(size() == 1, "backward() requires a scalar");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    for (Node<T>* n : order) {
      if (n->backward_fn) {
        n->backward_fn = nullptr;
        n->parents.clear();
      }
    }
  }

 private:
  NodePtr node_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <class T, class A>
CMap<T> cmat(const std::vector<T, A>& v, std::int64_t rows, std::int64_t cols) {
  return CMap<T>(v.data(), rows, cols);
}
template <class T, class A>
Map<T> mat(std::vector<T, A>& v, std::int64_t rows, std::int64_t cols) {
  return Map<T>(v.data(), rows, cols);
}

/// Creates an op result; attaches parents and the backward closure only when
/// recording is on and some parent needs a gradient.
template <class T, class Fn>
Tensor<T> make_result(Shape shape, Buffer<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (any && GradMode::enabled()) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
void check_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

inline std::int64_t rows_of(const Shape& s) { return s.size() == 1 ? 1 : s[0]; }
inline std::int64_t cols_of(const Shape& s) { return s.back(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a, b, "add");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a, b, "sub");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    const T sign[2] = {T(1), T(-1)};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a, b, "mul");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return detail::make_result<T>(a.shape(), std::move(out), {a.ptr()}, [s](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

/// x[n,d] + v[d] broadcast over rows.
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  const auto d = detail::cols_of(x.shape());
  require(static_cast<std::int64_t>(v.size()) == d, "add_rowvec: width mismatch");
  const auto n = static_cast<std::int64_t>(x.size()) / d;
  Buffer<T> out(x.values());
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < d; ++c) out[r * d + c] += v.data()[c];
  return detail::make_result<T>(x.shape(), std::move(out), {x.ptr(), v.ptr()},
                                [n, d](Node<T>& self) {
                                  auto& px = self.parents[0];
                                  auto& pv = self.parents[1];
                                  if (px->requires_grad) {
                                    auto& g = px->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (pv->requires_grad) {
                                    auto& g = pv->ensure_grad();
                                    for (std::int64_t r = 0; r < n; ++r)
                                      for (std::int64_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
                                  }
                                });
}

/// Per-row bias: x[c, v] + b[c] broadcast along columns.
template <class T>
Tensor<T> add_colvec(const Tensor<T>& x, const Tensor<T>& b) {
  const auto c = x.dim(0);
  require(static_cast<std::int64_t>(b.size()) == c, "add_colvec: channel mismatch");
  const auto v = static_cast<std::int64_t>(x.size()) / c;
  Buffer<T> out(x.values());
  for (std::int64_t r = 0; r < c; ++r)
    for (std::int64_t k = 0; k < v; ++k) out[r * v + k] += b.data()[r];
  return detail::make_result<T>(x.shape(), std::move(out), {x.ptr(), b.ptr()},
                                [c, v](Node<T>& self) {
                                  auto& px = self.parents[0];
                                  auto& pb = self.parents[1];
                                  if (px->requires_grad) {
                                    auto& g = px->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (pb->requires_grad) {
                                    auto& g = pb->ensure_grad();
                                    for (std::int64_t r = 0; r < c; ++r) {
                                      T acc = 0;
                                      for (std::int64_t k = 0; k < v; ++k) acc += self.grad[r * v + k];
                                      g[r] += acc;
                                    }
                                  }
                                });
}

/// GELU with the exact erf form.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Buffer<T> out(x.size());
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x.ptr()}, [inv_sqrt2](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = p->ensure_grad();
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = p->value[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01)) {
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = v > T(0) ? v : slope * v;
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x.ptr()}, [slope](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (p->value[i] > T(0) ? T(1) : slope);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return detail::make_result<T>({1}, {acc}, {x.ptr()}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Sum of a list of scalars.
template <class T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
  require(!xs.empty(), "add_n: empty list");
  Tensor<T> acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

/// Mean over rows: x[n,d] -> [1,d].
template <class T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  const auto n = x.dim(0), d = x.dim(1);
  Buffer<T> out(d, T(0));
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < d; ++c) out[c] += x.data()[r * d + c];
  for (auto& v : out) v /= static_cast<T>(n);
  return detail::make_result<T>({1, d}, std::move(out), {x.ptr()}, [n, d](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const T inv = T(1) / static_cast<T>(n);
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t c = 0; c < d; ++c) g[r * d + c] += self.grad[c] * inv;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m,k] @ b[k,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(static_cast<std::size_t>(m * n));
  detail::mat(out, m, n).noalias() = detail::cmat(a.values(), m, k) * detail::cmat(b.values(), k, n);
  return detail::make_result<T>({m, n}, std::move(out), {a.ptr(), b.ptr()}, [m, k, n](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    auto dy = detail::cmat(self.grad, m, n);
    if (pa->requires_grad)
      detail::mat(pa->ensure_grad(), m, k).noalias() += dy * detail::cmat(pb->value, k, n).transpose();
    if (pb->requires_grad)
      detail::mat(pb->ensure_grad(), k, n).noalias() += detail::cmat(pa->value, m, k).transpose() * dy;
  });
}

/// x[n,in] W[out,in]^T + b[out]; bias may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
          "linear: incompatible shapes " + shape_str(x.shape()) + " with weight " + shape_str(w.shape()));
  const auto n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  Buffer<T> out(static_cast<std::size_t>(n * out_dim));
  auto y = detail::mat(out, n, out_dim);
  y.noalias() = detail::cmat(x.values(), n, in) * detail::cmat(w.values(), out_dim, in).transpose();
  std::vector<std::shared_ptr<Node<T>>> parents{x.ptr(), w.ptr()};
  if (b.defined()) {
    require(static_cast<std::int64_t>(b.size()) == out_dim, "linear: bias size mismatch");
    y.rowwise() += detail::CVecMap<T>(b.data().data(), out_dim).transpose();
    parents.push_back(b.ptr());
  }
  return detail::make_result<T>({n, out_dim}, std::move(out), std::move(parents),
                                [n, in, out_dim](Node<T>& self) {
                                  auto& px = self.parents[0];
                                  auto& pw = self.parents[1];
                                  auto dy = detail::cmat(self.grad, n, out_dim);
                                  if (px->requires_grad)
                                    detail::mat(px->ensure_grad(), n, in).noalias() +=
                                        dy * detail::cmat(pw->value, out_dim, in);
                                  if (pw->requires_grad)
                                    detail::mat(pw->ensure_grad(), out_dim, in).noalias() +=
                                        dy.transpose() * detail::cmat(px->value, n, in);
                                  if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                                    auto gb = detail::VecMap<T>(self.parents[2]->ensure_grad().data(), out_dim);
                                    gb += dy.colwise().sum().transpose();
                                  }
                                });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  require(x.rank() == 2, "transpose: rank-2 input required");
  const auto r = x.dim(0), c = x.dim(1);
  Buffer<T> out(x.size());
  detail::mat(out, c, r) = detail::cmat(x.values(), r, c).transpose();
  return detail::make_result<T>({c, r}, std::move(out), {x.ptr()}, [r, c](Node<T>& self) {
    detail::mat(self.parents[0]->ensure_grad(), r, c) += detail::cmat(self.grad, c, r).transpose();
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == static_cast<std::int64_t>(x.size()),
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return detail::make_result<T>(std::move(shape), x.values(), {x.ptr()}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Row bookkeeping

/// Concatenates 2-D tensors of equal width along rows.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& xs) {
  require(!xs.empty(), "concat_rows: empty list");
  const auto d = xs.front().dim(1);
  std::int64_t n = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& x : xs) {
    require(x.rank() == 2 && x.dim(1) == d, "concat_rows: width mismatch");
    n += x.dim(0);
    parents.push_back(x.ptr());
  }
  Buffer<T> out;
  out.reserve(static_cast<std::size_t>(n * d));
  for (const auto& x : xs) out.insert(out.end(), x.data().begin(), x.data().end());
  return detail::make_result<T>({n, d}, std::move(out), std::move(parents), [](Node<T>& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  });
}

/// out[i] = x[idx[i]]; repeated indices accumulate in the backward pass.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::int64_t> idx) {
  require(x.rank() == 2, "gather_rows: rank-2 input required");
  const auto n = x.dim(0), d = x.dim(1);
  const auto m = static_cast<std::int64_t>(idx.size());
  Buffer<T> out(static_cast<std::size_t>(m * d));
  for (std::int64_t i = 0; i < m; ++i) {
    require(idx[i] >= 0 && idx[i] < n, "gather_rows: index out of range");
    std::copy_n(x.data().begin() + idx[i] * d, d, out.begin() + i * d);
  }
  return detail::make_result<T>({m, d}, std::move(out), {x.ptr()},
                                [idx = std::move(idx), d](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (std::int64_t c = 0; c < d; ++c)
                                      g[idx[i] * d + c] += self.grad[i * d + c];
                                });
}

/// Mean of the rows sharing a segment id: out[s] = mean{x[i] : seg[i] == s}.
/// Empty segments are rejected.
template <class T>
Tensor<T> segment_mean(const Tensor<T>& x, const std::vector<std::int64_t>& seg, std::int64_t segments) {
  require(x.rank() == 2 && static_cast<std::int64_t>(seg.size()) == x.dim(0),
          "segment_mean: one segment id per row required");
  const auto d = x.dim(1);
  std::vector<std::int64_t> count(static_cast<std::size_t>(segments), 0);
  for (auto s : seg) {
    require(s >= 0 && s < segments, "segment_mean: segment id out of range");
    ++count[s];
  }
  for (std::int64_t s = 0; s < segments; ++s)
    require(count[s] > 0, "segment_mean: segment " + std::to_string(s) + " has no rows");
  Buffer<T> out(static_cast<std::size_t>(segments * d), T(0));
  for (std::size_t i = 0; i < seg.size(); ++i)
    for (std::int64_t c = 0; c < d; ++c) out[seg[i] * d + c] += x.data()[i * d + c];
  for (std::int64_t s = 0; s < segments; ++s)
    for (std::int64_t c = 0; c < d; ++c) out[s * d + c] /= static_cast<T>(count[s]);
  return detail::make_result<T>({segments, d}, std::move(out), {x.ptr()},
                                [seg, count, d](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < seg.size(); ++i) {
                                    const T inv = T(1) / static_cast<T>(count[seg[i]]);
                                    for (std::int64_t c = 0; c < d; ++c)
                                      g[i * d + c] += self.grad[seg[i] * d + c] * inv;
                                  }
                                });
}

/// Repeats a [d] or [1,d] vector into n rows.
template <class T>
Tensor<T> repeat_rows(const Tensor<T>& v, std::int64_t n) {
  const auto d = static_cast<std::int64_t>(v.size());
  return gather_rows(reshape(v, {1, d}), std::vector<std::int64_t>(static_cast<std::size_t>(n), 0));
}

// ---------------------------------------------------------------------------
// Normalization

/// Layer normalization over the last axis of x[n,d] with affine gamma/beta[d].
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
  const auto d = detail::cols_of(x.shape());
  const auto n = static_cast<std::int64_t>(x.size()) / d;
  require(static_cast<std::int64_t>(gamma.size()) == d && static_cast<std::int64_t>(beta.size()) == d,
          "layer_norm: affine size mismatch");
  Buffer<T> out(x.size()), xhat(x.size()), inv_std(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < n; ++r) {
    const T* row = x.data().data() + r * d;
    T mu = 0;
    for (std::int64_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::int64_t c = 0; c < d; ++c) {
      const T h = (row[c] - mu) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gamma.data()[c] + beta.data()[c];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.ptr(), gamma.ptr(), beta.ptr()},
      [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const auto& dy = self.grad;
        if (pg->requires_grad) {
          auto& g = pg->ensure_grad();
          for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < d; ++c) g[c] += dy[r * d + c] * xhat[r * d + c];
        }
        if (pb->requires_grad) {
          auto& g = pb->ensure_grad();
          for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < d; ++c) g[c] += dy[r * d + c];
        }
        if (px->requires_grad) {
          auto& g = px->ensure_grad();
          for (std::int64_t r = 0; r < n; ++r) {
            T m1 = 0, m2 = 0;
            for (std::int64_t c = 0; c < d; ++c) {
              const T dh = dy[r * d + c] * pg->value[c];
              m1 += dh;
              m2 += dh * xhat[r * d + c];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::int64_t c = 0; c < d; ++c) {
              const T dh = dy[r * d + c] * pg->value[c];
              g[r * d + c] += inv_std[r] * (dh - m1 - xhat[r * d + c] * m2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Attention

/// Scaled dot-product attention with `heads` heads over the column blocks of
/// q[nq,d], k[nk,d], v[nk,d]. No causal mask.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: rank-2 inputs required");
  const auto nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
  require(k.dim(1) == d && v.dim(1) == d && v.dim(0) == nk, "attention: shape mismatch");
  require(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
  require(nk > 0, "attention: empty key set");
  const auto dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  auto Q = detail::cmat(q.values(), nq, d);
  auto K = detail::cmat(k.values(), nk, d);
  auto V = detail::cmat(v.values(), nk, d);
  Buffer<T> out(static_cast<std::size_t>(nq * d));
  auto O = detail::mat(out, nq, d);
  Buffer<T> probs(static_cast<std::size_t>(heads * nq * nk));
  for (int h = 0; h < heads; ++h) {
    auto P = detail::Map<T>(probs.data() + h * nq * nk, nq, nk);
    P.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
    P *= sc;
    for (std::int64_t r = 0; r < nq; ++r) {
      auto row = P.row(r);
      const T mx = row.maxCoeff();
      row = (row.array() - mx).exp();
      row /= row.sum();
    }
    O.middleCols(h * dh, dh).noalias() = P * V.middleCols(h * dh, dh);
  }
  return detail::make_result<T>(
      {nq, d}, std::move(out), {q.ptr(), k.ptr(), v.ptr()},
      [nq, nk, d, dh, heads, sc, probs = std::move(probs)](Node<T>& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        auto dO = detail::cmat(self.grad, nq, d);
        auto Q = detail::cmat(pq->value, nq, d);
        auto K = detail::cmat(pk->value, nk, d);
        auto V = detail::cmat(pv->value, nk, d);
        detail::RowMat<T> dP(nq, nk);
        for (int h = 0; h < heads; ++h) {
          auto P = detail::CMap<T>(probs.data() + h * nq * nk, nq, nk);
          auto dOh = dO.middleCols(h * dh, dh);
          if (pv->requires_grad)
            detail::mat(pv->ensure_grad(), nk, d).middleCols(h * dh, dh).noalias() += P.transpose() * dOh;
          if (!pq->requires_grad && !pk->requires_grad) continue;
          dP.noalias() = dOh * V.middleCols(h * dh, dh).transpose();
          // softmax backward: dS = P * (dP - rowsum(dP * P))
          for (std::int64_t r = 0; r < nq; ++r) {
            const T dot = dP.row(r).dot(P.row(r));
            dP.row(r) = (P.row(r).array() * (dP.row(r).array() - dot)).matrix();
          }
          dP *= sc;
          if (pq->requires_grad)
            detail::mat(pq->ensure_grad(), nq, d).middleCols(h * dh, dh).noalias() +=
                dP * K.middleCols(h * dh, dh);
          if (pk->requires_grad)
            detail::mat(pk->ensure_grad(), nk, d).middleCols(h * dh, dh).noalias() +=
                dP.transpose() * Q.middleCols(h * dh, dh);
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

/// Sum of squared differences against a constant target.
template <class T>
Tensor<T> sum_squared_error(const Tensor<T>& pred, std::span<const T> target) {
  require(pred.size() == target.size(), "sum_squared_error: size mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T e = pred.data()[i] - target[i];
    acc += e * e;
  }
  Buffer<T> tgt(target.begin(), target.end());
  return detail::make_result<T>({1}, {acc}, {pred.ptr()}, [tgt = std::move(tgt)](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = p->ensure_grad();
    const T s = T(2) * self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (p->value[i] - tgt[i]);
  });
}

/// Mean softmax cross-entropy of logits[n,C] against integer labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  require(logits.rank() == 2 && static_cast<std::int64_t>(labels.size()) == logits.dim(0),
          "cross_entropy: one label per row required");
  const auto n = logits.dim(0), c = logits.dim(1);
  Buffer<T> probs(logits.size());
  T loss = 0;
  for (std::int64_t r = 0; r < n; ++r) {
    require(labels[r] >= 0 && labels[r] < c, "cross_entropy: label out of range");
    const T* z = logits.data().data() + r * c;
    const T mx = *std::max_element(z, z + c);
    T denom = 0;
    for (std::int64_t k = 0; k < c; ++k) denom += std::exp(z[k] - mx);
    for (std::int64_t k = 0; k < c; ++k) probs[r * c + k] = std::exp(z[k] - mx) / denom;
    loss += -(z[labels[r]] - mx - std::log(denom));
  }
  loss /= static_cast<T>(n);
  return detail::make_result<T>({1}, {loss}, {logits.ptr()},
                                [n, c, labels, probs = std::move(probs)](Node<T>& self) {
                                  auto& g = self.parents[0]->ensure_grad();
                                  const T s = self.grad[0] / static_cast<T>(n);
                                  for (std::int64_t r = 0; r < n; ++r)
                                    for (std::int64_t k = 0; k < c; ++k)
                                      g[r * c + k] += s * (probs[r * c + k] - (k == labels[r] ? T(1) : T(0)));
                                });
}

}  // namespace mmv::ag
