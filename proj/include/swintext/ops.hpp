#pragma once

// Differentiable operator set. Every op validates shapes, computes its forward
// value eagerly and registers a backward rule through make_result().

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "swintext/errors.hpp"
#include "swintext/tensor.hpp"

namespace swintext {

// ---------------------------------------------------------------------------
// MAC instrumentation

namespace detail {
inline thread_local std::uint64_t* mac_sink = nullptr;
}

/// Routes the multiply-accumulate count of every forward matmul issued during
/// its lifetime into `sink`.
class MacScope {
 public:
  explicit MacScope(std::uint64_t& sink) : previous_(detail::mac_sink) { detail::mac_sink = &sink; }
  ~MacScope() { detail::mac_sink = previous_; }
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;

 private:
  std::uint64_t* previous_;
};

/// Suspends MAC accounting (nested matmuls that are not part of the tally).
class MacPause {
 public:
  MacPause() : previous_(detail::mac_sink) { detail::mac_sink = nullptr; }
  ~MacPause() { detail::mac_sink = previous_; }
  MacPause(const MacPause&) = delete;
  MacPause& operator=(const MacPause&) = delete;

 private:
  std::uint64_t* previous_;
};

namespace detail {

// c[m,n] += a[m,k] * b[k,n]; row-major, fixed summation order.
template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
std::vector<T> transpose2d(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

inline std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank, const Shape& shape) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(shape));
  return static_cast<std::size_t>(axis);
}

// Maps each flat index of `big` to the flat index of `small` under
// right-aligned broadcasting. Empty result means the fast modulo path applies.
inline std::vector<std::size_t> broadcast_map(const Shape& big, const Shape& small, bool& modulo) {
  if (small.size() > big.size()) {
    throw ShapeError("cannot broadcast " + shape_str(small) + " onto " + shape_str(big));
  }
  const std::size_t offset = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] != 1 && small[i] != big[offset + i]) {
      throw ShapeError("cannot broadcast " + shape_str(small) + " onto " + shape_str(big));
    }
  }
  // Fast path: after dropping leading 1s, small is a suffix of big.
  std::size_t lead = 0;
  while (lead < small.size() && small[lead] == 1) ++lead;
  modulo = true;
  for (std::size_t i = lead; i < small.size(); ++i) modulo = modulo && small[i] == big[offset + i];
  if (modulo) return {};

  std::vector<std::size_t> small_stride(big.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = small.size(); i-- > 0;) {
    small_stride[offset + i] = small[i] == 1 ? 0 : stride;
    stride *= small[i];
  }
  const std::size_t n = shape_numel(big);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(big.size(), 0);
  std::size_t pos = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = pos;
    for (std::size_t d = big.size(); d-- > 0;) {
      ++idx[d];
      pos += small_stride[d];
      if (idx[d] < big[d]) break;
      pos -= small_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

inline bool broadcastable(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  const std::size_t offset = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i)
    if (small[i] != 1 && small[i] != big[offset + i]) return false;
  return true;
}

// Elementwise binary op with `b` broadcast onto `a`'s shape.
template <class T, class F, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, F f, DA dfa, DB dfb) {
  bool modulo = false;
  auto map = std::make_shared<const std::vector<std::size_t>>(broadcast_map(a.shape(), b.shape(), modulo));
  const std::size_t n = a.numel();
  const std::size_t nb = b.numel();
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(n);
  if (modulo) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i % nb]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[(*map)[i]]);
  }
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b, map, modulo, dfa, dfb](const Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = a.values();
    const auto& bv = b.values();
    const std::size_t nb = bv.size();
    auto bidx = [&](std::size_t i) { return modulo ? i % nb : (*map)[i]; };
    if (a.requires_grad()) {
      auto& ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfa(av[i], bv[bidx(i)]);
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[bidx(i)] += g[i] * dfb(av[i], bv[bidx(i)]);
    }
  });
}

template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& x, F f, D dfdx) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, [x, dfdx](const Node<T>& self) {
    const auto& xv = x.values();
    auto& gx = x.node()->grad_buffer();
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * dfdx(xv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, with b broadcast onto a (or a onto b).
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() && !detail::broadcastable(a.shape(), b.shape()) &&
      detail::broadcastable(b.shape(), a.shape())) {
    return add(b, a);
  }
  return detail::binary(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() && !detail::broadcastable(a.shape(), b.shape()) &&
      detail::broadcastable(b.shape(), a.shape())) {
    return mul(b, a);
  }
  return detail::binary(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T) { return T(1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

namespace detail {
template <class T>
constexpr T kGeluScale = T(0.7978845608);
template <class T>
constexpr T kGeluCubic = T(0.044715);
}  // namespace detail

/// Tanh approximation: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3))).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  using detail::kGeluCubic;
  using detail::kGeluScale;
  return detail::unary(
      x,
      [](T v) {
        const T u = kGeluScale<T> * (v + kGeluCubic<T> * v * v * v);
        return T(0.5) * v * (T(1) + std::tanh(u));
      },
      [](T v) {
        const T u = kGeluScale<T> * (v + kGeluCubic<T> * v * v * v);
        const T th = std::tanh(u);
        const T du = kGeluScale<T> * (T(1) + T(3) * kGeluCubic<T> * v * v);
        return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto sig = [](T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  };
  return detail::unary(x, sig, [sig](T v) {
    const T s = sig(v);
    return s * (T(1) - s);
  });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](T v) { return (v < lo || v > hi) ? T(0) : T(1); });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.values()) total += v;
  return make_result<T>(Shape{}, {total}, {x}, [x](const Node<T>& self) {
    auto& gx = x.node()->grad_buffer();
    const T g = self.grad[0];
    for (auto& v : gx) v += g;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Layout

/// Copy with a new shape of equal element count.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  return make_result<T>(std::move(shape), x.values(), {x}, [x](const Node<T>& self) {
    auto& gx = x.node()->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

using IndexMap = std::shared_ptr<const std::vector<std::size_t>>;

/// out[i] = x[index[i]]. Backward scatter-adds. The workhorse behind every
/// rearrangement (permute, roll, window partition, patch merge/expand).
template <class T>
Tensor<T> gather(const Tensor<T>& x, IndexMap index, Shape shape) {
  if (shape_numel(shape) != index->size()) {
    throw ShapeError("gather index length " + std::to_string(index->size()) + " does not fill shape " +
                     shape_str(shape));
  }
  const auto& xv = x.values();
  std::vector<T> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto src = (*index)[i];
    if (src >= xv.size()) throw ShapeError("gather index out of range for shape " + shape_str(x.shape()));
    out[i] = xv[src];
  }
  return make_result<T>(std::move(shape), std::move(out), {x}, [x, index](const Node<T>& self) {
    auto& gx = x.node()->grad_buffer();
    for (std::size_t i = 0; i < index->size(); ++i) gx[(*index)[i]] += self.grad[i];
  });
}

template <class T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::size_t> index, Shape shape) {
  return gather(x, std::make_shared<const std::vector<std::size_t>>(std::move(index)), std::move(shape));
}

/// Index map of a dimension permutation: out dim i is input dim perm[i].
inline std::vector<std::size_t> permute_index(const Shape& shape, const std::vector<std::size_t>& perm, Shape& out_shape) {
  const std::size_t r = shape.size();
  if (perm.size() != r) throw ShapeError("permutation rank mismatch for shape " + shape_str(shape));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw ShapeError("invalid permutation for shape " + shape_str(shape));
    used[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * shape[i];
  out_shape.assign(r, 0);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = shape[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t pos = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = pos;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      pos += stride[d];
      if (idx[d] < out_shape[d]) break;
      pos -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return index;
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  Shape out_shape;
  auto index = permute_index(x.shape(), perm, out_shape);
  return gather(x, std::move(index), std::move(out_shape));
}

/// Swap the last two dims.
template <class T>
Tensor<T> transpose_last(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

/// Concatenate along `axis`; all other dims must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  const std::size_t ax = detail::normalize_axis(axis, ref.size(), ref);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= ref[i];
  for (std::size_t i = ax + 1; i < ref.size(); ++i) inner *= ref[i];
  Shape out_shape = ref;
  out_shape[ax] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == ax) || s[i] == ref[i];
    if (!ok) throw ShapeError("concat shape mismatch: " + shape_str(ref) + " vs " + shape_str(s));
    out_shape[ax] += s[ax];
    widths.push_back(s[ax] * inner);
  }
  const std::size_t row = out_shape[ax] * inner;
  std::vector<T> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    offset += widths[k];
  }
  return make_result<T>(out_shape, std::move(out), parts, [parts, widths, outer, row](const Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (parts[k].requires_grad()) {
        auto& gp = parts[k].node()->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[k]; ++i) gp[o * widths[k] + i] += self.grad[o * row + offset + i];
      }
      offset += widths[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product a[..,m,k] x b[..,k,n]. Batch dims must match, or one
/// side may be a plain matrix shared across the other's batch.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto mismatch = [&] {
    return ShapeError("matmul shape mismatch: " + shape_str(as) + " x " + shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const std::size_t k = as.back();
  if (bs[bs.size() - 2] != k) throw mismatch();
  const std::size_t n = bs.back();

  Shape out_shape;
  std::size_t batch = 1, m = 0;
  bool share_b = false, share_a = false;
  if (bs.size() == 2) {
    share_b = true;
    m = a.numel() / k;
    out_shape.assign(as.begin(), as.end() - 1);
    out_shape.push_back(n);
  } else if (as.size() == 2) {
    share_a = true;
    m = as[0];
    batch = b.numel() / (k * n);
    out_shape.assign(bs.begin(), bs.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
  } else {
    if (!std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2)) throw mismatch();
    m = as[as.size() - 2];
    batch = a.numel() / (m * k);
    out_shape.assign(as.begin(), as.end() - 1);
    out_shape.push_back(n);
  }

  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(batch * m * n, T(0));
  for (std::size_t t = 0; t < batch; ++t) {
    const T* ap = av.data() + (share_a ? 0 : t * m * k);
    const T* bp = bv.data() + (share_b ? 0 : t * k * n);
    detail::gemm_acc(ap, bp, out.data() + t * m * n, m, k, n);
  }
  if (detail::mac_sink) *detail::mac_sink += static_cast<std::uint64_t>(batch) * m * k * n;

  return make_result<T>(std::move(out_shape), std::move(out), {a, b},
                        [a, b, batch, m, k, n, share_a, share_b](const Node<T>& self) {
    const auto& av = a.values();
    const auto& bv = b.values();
    const auto& g = self.grad;
    for (std::size_t t = 0; t < batch; ++t) {
      const T* ap = av.data() + (share_a ? 0 : t * m * k);
      const T* bp = bv.data() + (share_b ? 0 : t * k * n);
      const T* gp = g.data() + t * m * n;
      if (a.requires_grad()) {
        auto& ga = a.node()->grad_buffer();
        const auto bt = detail::transpose2d(bp, k, n);
        detail::gemm_acc(gp, bt.data(), ga.data() + (share_a ? 0 : t * m * k), m, n, k);
      }
      if (b.requires_grad()) {
        auto& gb = b.node()->grad_buffer();
        const auto at = detail::transpose2d(ap, m, k);
        detail::gemm_acc(at.data(), gp, gb.data() + (share_b ? 0 : t * k * n), k, m, n);
      }
    }
  });
}

/// x[.., in] * w[in, out] (+ bias[out]).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  auto y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Softmax along `axis` with the row max subtracted first. Slices whose
/// entries are all -inf produce zeros.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), x.shape());
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.shape()[ax];
  for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      if (mx == -std::numeric_limits<T>::infinity()) {
        for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = T(0);
        continue;
      }
      T total = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, outer, inner, len](const Node<T>& self) {
    auto& gx = x.node()->grad_buffer();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = T(0);
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t p = base + j * inner;
          gx[p] += y[p] * (g[p] - dot);
        }
      }
    }
  });
}

/// Normalize over the last dim, then scale by gamma and shift by beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm eps must be positive");
  const std::size_t c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("layer_norm affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match feature dim of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = static_cast<T>(rs);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = static_cast<T>((row[j] - mu) * rs);
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, rstd, rows, c](const Node<T>& self) {
    const auto& g = self.grad;
    const auto& gv = gamma.values();
    if (gamma.requires_grad()) {
      auto& gg = gamma.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gg[j] += g[r * c + j] * (*xhat)[r * c + j];
    }
    if (beta.requires_grad()) {
      auto& gb = beta.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
    }
    if (x.requires_grad()) {
      auto& gx = x.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = static_cast<double>(g[r * c + j]) * gv[j];
          m1 += d;
          m2 += d * (*xhat)[r * c + j];
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          const double d = static_cast<double>(g[r * c + j]) * gv[j];
          gx[r * c + j] += static_cast<T>((*rstd)[r] * (d - m1 - (*xhat)[r * c + j] * m2));
        }
      }
    }
  });
}

/// Group normalization of x[B,C,H,W] with per-channel affine parameters.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5) {
  if (x.rank() != 4) throw ShapeError("group_norm expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || ch % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(ch) +
                      " channels");
  }
  if (gamma.numel() != ch || beta.numel() != ch) throw ShapeError("group_norm affine params do not match channels");
  const std::size_t cpg = ch / groups;
  const std::size_t span = cpg * hw;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(batch * groups);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (b * ch + gi * cpg) * hw;
      double mu = 0.0;
      for (std::size_t i = 0; i < span; ++i) mu += xv[base + i];
      mu /= static_cast<double>(span);
      double var = 0.0;
      for (std::size_t i = 0; i < span; ++i) var += (xv[base + i] - mu) * (xv[base + i] - mu);
      var /= static_cast<double>(span);
      const double rs = 1.0 / std::sqrt(var + eps);
      (*rstd)[b * groups + gi] = static_cast<T>(rs);
      for (std::size_t i = 0; i < span; ++i) {
        const std::size_t c = gi * cpg + i / hw;
        const T h = static_cast<T>((xv[base + i] - mu) * rs);
        (*xhat)[base + i] = h;
        out[base + i] = h * gv[c] + bv[c];
      }
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, rstd, batch, ch, hw, groups, cpg, span](const Node<T>& self) {
    const auto& g = self.grad;
    const auto& gv = gamma.values();
    if (gamma.requires_grad() || beta.requires_grad()) {
      auto* gg = gamma.requires_grad() ? &gamma.node()->grad_buffer() : nullptr;
      auto* gb = beta.requires_grad() ? &beta.node()->grad_buffer() : nullptr;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t p = (b * ch + c) * hw + i;
            if (gg) (*gg)[c] += g[p] * (*xhat)[p];
            if (gb) (*gb)[c] += g[p];
          }
    }
    if (x.requires_grad()) {
      auto& gx = x.node()->grad_buffer();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const std::size_t base = (b * ch + gi * cpg) * hw;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t i = 0; i < span; ++i) {
            const double d = static_cast<double>(g[base + i]) * gv[gi * cpg + i / hw];
            m1 += d;
            m2 += d * (*xhat)[base + i];
          }
          m1 /= static_cast<double>(span);
          m2 /= static_cast<double>(span);
          const double rs = (*rstd)[b * groups + gi];
          for (std::size_t i = 0; i < span; ++i) {
            const double d = static_cast<double>(g[base + i]) * gv[gi * cpg + i / hw];
            gx[base + i] += static_cast<T>(rs * (d - m1 - (*xhat)[base + i] * m2));
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial

namespace detail {
// cols[(ci*k + ky)*k + kx][y*W + x] = x[ci][y+ky-p][x+kx-p], zero outside.
template <class T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k, std::size_t pad, T* cols) {
  const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = cols + ((ci * k + ky) * k + kx) * h * w;
        for (std::ptrdiff_t y = 0; y < sh; ++y) {
          const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
          for (std::ptrdiff_t xx = 0; xx < sw; ++xx) {
            const std::ptrdiff_t sx = xx + static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
            dst[y * sw + xx] = (sy < 0 || sy >= sh || sx < 0 || sx >= sw) ? T(0) : x[(ci * h + sy) * w + sx];
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t k, std::size_t pad, T* x) {
  const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = cols + ((ci * k + ky) * k + kx) * h * w;
        for (std::ptrdiff_t y = 0; y < sh; ++y) {
          const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
          if (sy < 0 || sy >= sh) continue;
          for (std::ptrdiff_t xx = 0; xx < sw; ++xx) {
            const std::ptrdiff_t sx = xx + static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
            if (sx < 0 || sx >= sw) continue;
            x[(ci * h + sy) * w + sx] += src[y * sw + xx];
          }
        }
      }
}
}  // namespace detail

/// 2-D cross-correlation, stride 1, "same" output size. Supported kernels are
/// 1x1 (padding 0) and 3x3 (padding 1). `bias` may be undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d expects x[B,Cin,H,W] and w[Cout,Cin,k,k], got " + shape_str(x.shape()) + " and " +
                     shape_str(weight.shape()));
  }
  const std::size_t k = weight.dim(2);
  if (weight.dim(3) != k || (k != 1 && k != 3)) {
    throw ConfigError("conv2d supports 1x1 and 3x3 kernels only, got " + shape_str(weight.shape()));
  }
  if (padding != k / 2) {
    throw ConfigError("conv2d with a " + std::to_string(k) + "x" + std::to_string(k) + " kernel needs padding " +
                      std::to_string(k / 2));
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3), cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d channel mismatch: " + shape_str(x.shape()) + " vs " + shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != cout) throw ShapeError("conv2d bias does not match output channels");
  const std::size_t kk = cin * k * k, hw = h * w;
  const auto& xv = x.values();
  const auto& wv = weight.values();
  std::vector<T> out(batch * cout * hw, T(0));
  std::vector<T> cols(k == 1 ? 0 : kk * hw);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = xv.data() + b * cin * hw;
    const T* cb = xb;
    if (k != 1) {
      detail::im2col(xb, cin, h, w, k, padding, cols.data());
      cb = cols.data();
    }
    T* ob = out.data() + b * cout * hw;
    if (bias.defined()) {
      for (std::size_t co = 0; co < cout; ++co) std::fill_n(ob + co * hw, hw, bias.values()[co]);
    }
    detail::gemm_acc(wv.data(), cb, ob, cout, kk, hw);
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(Shape{batch, cout, h, w}, std::move(out), inputs,
                        [x, weight, bias, batch, cin, cout, h, w, k, padding, kk, hw](const Node<T>& self) {
    const auto& xv = x.values();
    const auto& wv = weight.values();
    const auto& g = self.grad;
    std::vector<T> cols(k == 1 ? 0 : kk * hw);
    const auto wt = x.requires_grad() ? detail::transpose2d(wv.data(), cout, kk) : std::vector<T>{};
    std::vector<T> dcols;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* gb = g.data() + b * cout * hw;
      if (bias.defined() && bias.requires_grad()) {
        auto& gbias = bias.node()->grad_buffer();
        for (std::size_t co = 0; co < cout; ++co) {
          T s = T(0);
          for (std::size_t i = 0; i < hw; ++i) s += gb[co * hw + i];
          gbias[co] += s;
        }
      }
      const T* xb = xv.data() + b * cin * hw;
      if (weight.requires_grad()) {
        const T* cb = xb;
        if (k != 1) {
          detail::im2col(xb, cin, h, w, k, padding, cols.data());
          cb = cols.data();
        }
        const auto ct = detail::transpose2d(cb, kk, hw);
        detail::gemm_acc(gb, ct.data(), weight.node()->grad_buffer().data(), cout, hw, kk);
      }
      if (x.requires_grad()) {
        auto& gx = x.node()->grad_buffer();
        if (k == 1) {
          detail::gemm_acc(wt.data(), gb, gx.data() + b * cin * hw, kk, cout, hw);
        } else {
          dcols.assign(kk * hw, T(0));
          detail::gemm_acc(wt.data(), gb, dcols.data(), kk, cout, hw);
          detail::col2im_add(dcols.data(), cin, h, w, k, padding, gx.data() + b * cin * hw);
        }
      }
    }
  });
}

namespace detail {
struct LerpTap {
  std::size_t i0, i1;
  double w0, w1;
};

// Half-pixel (align_corners = false) source taps for a x2 upsample.
inline std::vector<LerpTap> upsample_taps(std::size_t n) {
  std::vector<LerpTap> taps(2 * n);
  for (std::size_t o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > n - 1) i0 = n - 1;
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    const double l = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - l, l};
  }
  return taps;
}
}  // namespace detail

/// Bilinear x2 upsampling of x[B,C,H,W] (half-pixel centers, edge clamped).
template <class T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = detail::upsample_taps(h);
  const auto tx = detail::upsample_taps(w);
  const auto& xv = x.values();
  std::vector<T> out(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * 4 * h * w;
    for (std::size_t oy = 0; oy < 2 * h; ++oy)
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        const auto& a = ty[oy];
        const auto& b = tx[ox];
        const double v = a.w0 * (b.w0 * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1]) +
                         a.w1 * (b.w0 * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1]);
        dst[oy * 2 * w + ox] = static_cast<T>(v);
      }
  }
  Shape shape{x.dim(0), x.dim(1), 2 * h, 2 * w};
  return make_result<T>(std::move(shape), std::move(out), {x}, [x, ty, tx, planes, h, w](const Node<T>& self) {
    auto& gx = x.node()->grad_buffer();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* g = self.grad.data() + p * 4 * h * w;
      T* dst = gx.data() + p * h * w;
      for (std::size_t oy = 0; oy < 2 * h; ++oy)
        for (std::size_t ox = 0; ox < 2 * w; ++ox) {
          const double gv = g[oy * 2 * w + ox];
          const auto& a = ty[oy];
          const auto& b = tx[ox];
          dst[a.i0 * w + b.i0] += static_cast<T>(gv * a.w0 * b.w0);
          dst[a.i0 * w + b.i1] += static_cast<T>(gv * a.w0 * b.w1);
          dst[a.i1 * w + b.i0] += static_cast<T>(gv * a.w1 * b.w0);
          dst[a.i1 * w + b.i1] += static_cast<T>(gv * a.w1 * b.w1);
        }
    }
  });
}

}  // namespace swintext
