#pragma once

// Differentiable tensor operations. No broadcasting: all shape mismatches
// are argument errors. Accumulation order per output element is fixed, so
// results are bitwise reproducible.

#include <algorithm>
#include <cmath>
#include <cstring>

#include "brg/tensor.hpp"

namespace brg {

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b[static_cast<int64_t>(i)];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& n) {
    for (size_t i = 0; i < n.grad.size(); ++i) {
      if (n.parents[0]->requires_grad) n.parents[0]->grad[i] += n.grad[i];
      if (n.parents[1]->requires_grad) n.parents[1]->grad[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b[static_cast<int64_t>(i)];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& n) {
    for (size_t i = 0; i < n.grad.size(); ++i) {
      if (n.parents[0]->requires_grad) n.parents[0]->grad[i] += n.grad[i];
      if (n.parents[1]->requires_grad) n.parents[1]->grad[i] -= n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b[static_cast<int64_t>(i)];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    for (size_t i = 0; i < n.grad.size(); ++i) {
      if (n.parents[0]->requires_grad) n.parents[0]->grad[i] += n.grad[i] * bv[i];
      if (n.parents[1]->requires_grad) n.parents[1]->grad[i] += n.grad[i] * av[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] /= b[static_cast<int64_t>(i)];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    for (size_t i = 0; i < n.grad.size(); ++i) {
      if (n.parents[0]->requires_grad) n.parents[0]->grad[i] += n.grad[i] / bv[i];
      if (n.parents[1]->requires_grad)
        n.parents[1]->grad[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= s;
  return make_op(a.shape(), std::move(out), {a}, [s](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (size_t i = 0; i < n.grad.size(); ++i) n.parents[0]->grad[i] += s * n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// elementwise unary

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_op(a.shape(), std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const auto& xv = n.parents[0]->value;
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (xv[i] > 0.0) n.parents[0]->grad[i] += n.grad[i];
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
  auto r = make_op(a.shape(), std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (size_t i = 0; i < n.grad.size(); ++i) {
      double s = n.value[i];
      n.parents[0]->grad[i] += n.grad[i] * s * (1.0 - s);
    }
  });
  return r;
}

// Exact Gaussian-CDF GELU: x * Phi(x).
inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = gelu_scalar(v);
  return make_op(a.shape(), std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const auto& xv = n.parents[0]->value;
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * 3.14159265358979323846);
    for (size_t i = 0; i < n.grad.size(); ++i) {
      double x = xv[i];
      double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      n.parents[0]->grad[i] += n.grad[i] * (phi + x * pdf);
    }
  });
}

// log with probabilities clamped to [1e-12, 1-1e-12]; gradient is zero in
// the clamped region (the function is locally constant there).
inline Tensor log_clamped(const Tensor& a) {
  static constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
  std::vector<double> out(a.values());
  for (double& v : out) v = std::log(std::clamp(v, lo, hi));
  return make_op(a.shape(), std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const auto& xv = n.parents[0]->value;
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (xv[i] > lo && xv[i] < hi) n.parents[0]->grad[i] += n.grad[i] / xv[i];
  });
}

// ---------------------------------------------------------------------------
// softmax / max along an axis

inline Tensor softmax_along(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw std::invalid_argument("softmax_along: axis out of range");
  const Shape& s = x.shape();
  int64_t extent = s[static_cast<size_t>(axis)];
  int64_t inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  int64_t outer = x.numel() / (extent * inner);

  std::vector<double> out(x.values());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      double* base = out.data() + o * extent * inner + in;
      double mx = base[0];
      for (int64_t k = 1; k < extent; ++k) mx = std::max(mx, base[k * inner]);
      double sum = 0.0;
      for (int64_t k = 0; k < extent; ++k) {
        double e = std::exp(base[k * inner] - mx);
        base[k * inner] = e;
        sum += e;
      }
      double inv = 1.0 / sum;
      for (int64_t k = 0; k < extent; ++k) base[k * inner] *= inv;
    }
  }
  return make_op(s, std::move(out), {x}, [extent, inner, outer](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        int64_t off = o * extent * inner + in;
        double dot = 0.0;
        for (int64_t k = 0; k < extent; ++k)
          dot += n.grad[off + k * inner] * n.value[off + k * inner];
        for (int64_t k = 0; k < extent; ++k) {
          double p = n.value[off + k * inner];
          n.parents[0]->grad[off + k * inner] += p * (n.grad[off + k * inner] - dot);
        }
      }
    }
  });
}

// Maximum along an axis; ties route the gradient to the first index.
inline Tensor max_along(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw std::invalid_argument("max_along: axis out of range");
  const Shape& s = x.shape();
  int64_t extent = s[static_cast<size_t>(axis)];
  int64_t inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  int64_t outer = x.numel() / (extent * inner);

  Shape os;
  for (size_t i = 0; i < s.size(); ++i)
    if (i != static_cast<size_t>(axis)) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);

  std::vector<double> out(static_cast<size_t>(outer * inner));
  std::vector<int64_t> arg(out.size());
  const double* xd = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t off = o * extent * inner + in;
      double best = xd[off];
      int64_t bi = 0;
      for (int64_t k = 1; k < extent; ++k)
        if (xd[off + k * inner] > best) { best = xd[off + k * inner]; bi = k; }
      out[static_cast<size_t>(o * inner + in)] = best;
      arg[static_cast<size_t>(o * inner + in)] = bi;
    }
  }
  return make_op(os, std::move(out), {x}, [extent, inner, outer, arg](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        int64_t oi = o * inner + in;
        n.parents[0]->grad[o * extent * inner + arg[static_cast<size_t>(oi)] * inner + in] +=
            n.grad[static_cast<size_t>(oi)];
      }
  });
}

// ---------------------------------------------------------------------------
// matmul / transpose (rank 2)

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 inputs required");
  int64_t n = a.extent(0), k = a.extent(1), m = b.extent(1);
  if (b.extent(0) != k)
    throw std::invalid_argument("matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(n * m), 0.0);
  const double* ad = a.data();
  const double* bd = b.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int64_t t = 0; t < k; ++t) acc += ad[i * k + t] * bd[t * m + j];
      out[static_cast<size_t>(i * m + j)] = acc;
    }
  return make_op({n, m}, std::move(out), {a, b}, [n, k, m](Node& nd) {
    const auto& av = nd.parents[0]->value;
    const auto& bv = nd.parents[1]->value;
    if (nd.parents[0]->requires_grad)
      for (int64_t i = 0; i < n; ++i)
        for (int64_t t = 0; t < k; ++t) {
          double acc = 0.0;
          for (int64_t j = 0; j < m; ++j) acc += nd.grad[i * m + j] * bv[t * m + j];
          nd.parents[0]->grad[i * k + t] += acc;
        }
    if (nd.parents[1]->requires_grad)
      for (int64_t t = 0; t < k; ++t)
        for (int64_t j = 0; j < m; ++j) {
          double acc = 0.0;
          for (int64_t i = 0; i < n; ++i) acc += av[i * k + t] * nd.grad[i * m + j];
          nd.parents[1]->grad[t * m + j] += acc;
        }
  });
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d: rank-2 input required");
  int64_t n = a.extent(0), m = a.extent(1);
  std::vector<double> out(static_cast<size_t>(n * m));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) out[static_cast<size_t>(j * n + i)] = a[i * m + j];
  return make_op({m, n}, std::move(out), {a}, [n, m](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) nd.parents[0]->grad[i * m + j] += nd.grad[j * n + i];
  });
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, const Shape& s) {
  if (shape_numel(s) != a.numel()) throw std::invalid_argument("reshape: element count differs");
  std::vector<double> out(a.values());
  return make_op(s, std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (size_t i = 0; i < n.grad.size(); ++i) n.parents[0]->grad[i] += n.grad[i];
  });
}

inline Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw std::invalid_argument("permute: rank mismatch");
  const Shape& s = a.shape();
  Shape os(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) os[static_cast<size_t>(i)] = s[static_cast<size_t>(perm[i])];
  std::vector<int64_t> in_stride(static_cast<size_t>(r), 1), out_stride(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * s[i + 1];
  for (int i = r - 2; i >= 0; --i) out_stride[i] = out_stride[i + 1] * os[i + 1];
  int64_t n = a.numel();
  // map[i] = source index for output position i
  std::vector<int64_t> src(static_cast<size_t>(n));
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  for (int64_t i = 0; i < n; ++i) {
    int64_t off = 0;
    for (int d = 0; d < r; ++d) off += idx[static_cast<size_t>(d)] * in_stride[static_cast<size_t>(perm[d])];
    src[static_cast<size_t>(i)] = off;
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = a[src[static_cast<size_t>(i)]];
  return make_op(os, std::move(out), {a}, [src](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    for (size_t i = 0; i < nd.grad.size(); ++i) nd.parents[0]->grad[src[i]] += nd.grad[i];
  });
}

inline Tensor concat_first_axis(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int64_t total0 = 0;
  for (const Tensor& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) throw std::invalid_argument("concat: trailing extents differ");
    total0 += p.extent(0);
  }
  Shape os = parts[0].shape();
  os[0] = total0;
  std::vector<double> out;
  out.reserve(static_cast<size_t>(shape_numel(os)));
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<size_t> sizes;
  for (const Tensor& p : parts) sizes.push_back(p.values().size());
  return make_op(os, std::move(out), parts, [sizes](Node& n) {
    size_t off = 0;
    for (size_t pi = 0; pi < sizes.size(); ++pi) {
      if (n.parents[pi]->requires_grad)
        for (size_t i = 0; i < sizes[pi]; ++i) n.parents[pi]->grad[i] += n.grad[off + i];
      off += sizes[pi];
    }
  });
}

inline std::vector<Tensor> split_first_axis(const Tensor& x, const std::vector<int64_t>& groups) {
  int64_t sum = 0;
  for (int64_t g : groups) {
    if (g <= 0) throw std::invalid_argument("split: group sizes must be positive");
    sum += g;
  }
  if (sum != x.extent(0))
    throw std::invalid_argument("split: group sizes do not partition the first extent");
  int64_t inner = x.numel() / x.extent(0);
  std::vector<Tensor> parts;
  int64_t start = 0;
  for (int64_t g : groups) {
    Shape os = x.shape();
    os[0] = g;
    std::vector<double> out(x.values().begin() + start * inner,
                            x.values().begin() + (start + g) * inner);
    int64_t s0 = start;
    parts.push_back(make_op(os, std::move(out), {x}, [s0, inner](Node& n) {
      if (!n.parents[0]->requires_grad) return;
      for (size_t i = 0; i < n.grad.size(); ++i)
        n.parents[0]->grad[static_cast<size_t>(s0 * inner) + i] += n.grad[i];
    }));
    start += g;
  }
  return parts;
}

// ---------------------------------------------------------------------------
// reductions and scaling along the first axis

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x[i];
  return make_op({1}, {acc}, {x}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (size_t i = 0; i < n.parents[0]->grad.size(); ++i) n.parents[0]->grad[i] += n.grad[0];
  });
}

// Mean over every axis except the first: C x ... -> C.
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() < 2) throw std::invalid_argument("global_avg_pool: rank >= 2 required");
  int64_t c = x.extent(0);
  int64_t inner = x.numel() / c;
  std::vector<double> out(static_cast<size_t>(c), 0.0);
  for (int64_t ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    for (int64_t i = 0; i < inner; ++i) acc += x[ci * inner + i];
    out[static_cast<size_t>(ci)] = acc / static_cast<double>(inner);
  }
  return make_op({c}, std::move(out), {x}, [c, inner](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    double w = 1.0 / static_cast<double>(inner);
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t i = 0; i < inner; ++i)
        n.parents[0]->grad[ci * inner + i] += n.grad[static_cast<size_t>(ci)] * w;
  });
}

// out[i, ...] = g[i] * x[i, ...]; g is rank-1 of length x.extent(0).
// Covers per-channel camera scaling, SE recalibration and per-token gating.
inline Tensor scale_first_axis(const Tensor& x, const Tensor& g) {
  if (g.rank() != 1 || g.extent(0) != x.extent(0))
    throw std::invalid_argument("scale_first_axis: gate length must equal first extent");
  int64_t c = x.extent(0);
  int64_t inner = x.numel() / c;
  std::vector<double> out(x.values());
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < inner; ++i) out[static_cast<size_t>(ci * inner + i)] *= g[ci];
  return make_op(x.shape(), std::move(out), {x, g}, [c, inner](Node& n) {
    const auto& xv = n.parents[0]->value;
    const auto& gv = n.parents[1]->value;
    for (int64_t ci = 0; ci < c; ++ci) {
      double gacc = 0.0;
      for (int64_t i = 0; i < inner; ++i) {
        size_t off = static_cast<size_t>(ci * inner + i);
        if (n.parents[0]->requires_grad) n.parents[0]->grad[off] += n.grad[off] * gv[static_cast<size_t>(ci)];
        gacc += n.grad[off] * xv[off];
      }
      if (n.parents[1]->requires_grad) n.parents[1]->grad[static_cast<size_t>(ci)] += gacc;
    }
  });
}

// out[i, ...] = x[i, ...] + b[i]
inline Tensor add_first_axis(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || b.extent(0) != x.extent(0))
    throw std::invalid_argument("add_first_axis: bias length must equal first extent");
  int64_t c = x.extent(0);
  int64_t inner = x.numel() / c;
  std::vector<double> out(x.values());
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < inner; ++i) out[static_cast<size_t>(ci * inner + i)] += b[ci];
  return make_op(x.shape(), std::move(out), {x, b}, [c, inner](Node& n) {
    for (int64_t ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      for (int64_t i = 0; i < inner; ++i) {
        size_t off = static_cast<size_t>(ci * inner + i);
        if (n.parents[0]->requires_grad) n.parents[0]->grad[off] += n.grad[off];
        acc += n.grad[off];
      }
      if (n.parents[1]->requires_grad) n.parents[1]->grad[static_cast<size_t>(ci)] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// normalization

// Group normalization over [C, ...]: channels are partitioned into `groups`
// equal groups; each group is normalized to zero mean / unit variance over
// its channels and all trailing axes. No affine parameters.
inline Tensor group_norm(const Tensor& x, int64_t groups, double eps = 1e-5) {
  int64_t c = x.extent(0);
  if (groups <= 0 || c % groups != 0)
    throw std::invalid_argument("group_norm: groups must divide the channel extent");
  int64_t inner = x.numel() / c;
  int64_t gsz = (c / groups) * inner;  // elements per group
  std::vector<double> out(x.values());
  std::vector<double> means(static_cast<size_t>(groups)), istds(static_cast<size_t>(groups));
  for (int64_t g = 0; g < groups; ++g) {
    double* base = out.data() + g * gsz;
    double mean = 0.0;
    for (int64_t i = 0; i < gsz; ++i) mean += base[i];
    mean /= static_cast<double>(gsz);
    double var = 0.0;
    for (int64_t i = 0; i < gsz; ++i) var += (base[i] - mean) * (base[i] - mean);
    var /= static_cast<double>(gsz);
    double istd = 1.0 / std::sqrt(var + eps);
    for (int64_t i = 0; i < gsz; ++i) base[i] = (base[i] - mean) * istd;
    means[static_cast<size_t>(g)] = mean;
    istds[static_cast<size_t>(g)] = istd;
  }
  return make_op(x.shape(), std::move(out), {x}, [groups, gsz, istds](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (int64_t g = 0; g < groups; ++g) {
      const double* y = n.value.data() + g * gsz;
      const double* gy = n.grad.data() + g * gsz;
      double* gx = n.parents[0]->grad.data() + g * gsz;
      double sum_gy = 0.0, sum_gyy = 0.0;
      for (int64_t i = 0; i < gsz; ++i) {
        sum_gy += gy[i];
        sum_gyy += gy[i] * y[i];
      }
      double inv_n = 1.0 / static_cast<double>(gsz);
      double istd = istds[static_cast<size_t>(g)];
      for (int64_t i = 0; i < gsz; ++i)
        gx[i] += istd * (gy[i] - inv_n * sum_gy - y[i] * inv_n * sum_gyy);
    }
  });
}

// ---------------------------------------------------------------------------
// lift (outer product of context and depth distribution, Lift-Splat style)

// F[c,d,h,w] = ctx[c,h,w] * depth[d,h,w]
inline Tensor outer_lift(const Tensor& ctx, const Tensor& depth) {
  if (ctx.rank() != 3 || depth.rank() != 3)
    throw std::invalid_argument("outer_lift: rank-3 inputs required");
  if (ctx.extent(1) != depth.extent(1) || ctx.extent(2) != depth.extent(2))
    throw std::invalid_argument("outer_lift: spatial extents differ");
  int64_t c = ctx.extent(0), d = depth.extent(0), h = ctx.extent(1), w = ctx.extent(2);
  int64_t hw = h * w;
  std::vector<double> out(static_cast<size_t>(c * d * hw));
  const double* cd = ctx.data();
  const double* dd = depth.data();
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t di = 0; di < d; ++di)
      for (int64_t p = 0; p < hw; ++p)
        out[static_cast<size_t>((ci * d + di) * hw + p)] = cd[ci * hw + p] * dd[di * hw + p];
  return make_op({c, d, h, w}, std::move(out), {ctx, depth}, [c, d, hw](Node& n) {
    const auto& cv = n.parents[0]->value;
    const auto& dv = n.parents[1]->value;
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t di = 0; di < d; ++di)
        for (int64_t p = 0; p < hw; ++p) {
          size_t off = static_cast<size_t>((ci * d + di) * hw + p);
          if (n.parents[0]->requires_grad)
            n.parents[0]->grad[ci * hw + p] += n.grad[off] * dv[di * hw + p];
          if (n.parents[1]->requires_grad)
            n.parents[1]->grad[di * hw + p] += n.grad[off] * cv[ci * hw + p];
        }
  });
}

// ---------------------------------------------------------------------------
// 2x average pooling over the trailing three axes of a C x D x H x W tensor

inline Tensor avg_pool3d_2x(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("avg_pool3d_2x: rank-4 input required");
  int64_t c = x.extent(0), d = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (d % 2 || h % 2 || w % 2)
    throw std::invalid_argument("avg_pool3d_2x: extents must be even");
  int64_t od = d / 2, oh = h / 2, ow = w / 2;
  std::vector<double> out(static_cast<size_t>(c * od * oh * ow));
  const double* xd = x.data();
  auto xin = [&](int64_t ci, int64_t zi, int64_t yi, int64_t xi) {
    return xd[((ci * d + zi) * h + yi) * w + xi];
  };
  size_t o = 0;
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t zi = 0; zi < od; ++zi)
      for (int64_t yi = 0; yi < oh; ++yi)
        for (int64_t xi = 0; xi < ow; ++xi) {
          double acc = 0.0;
          for (int64_t a = 0; a < 2; ++a)
            for (int64_t b = 0; b < 2; ++b)
              for (int64_t e = 0; e < 2; ++e)
                acc += xin(ci, 2 * zi + a, 2 * yi + b, 2 * xi + e);
          out[o++] = acc * 0.125;
        }
  return make_op({c, od, oh, ow}, std::move(out), {x}, [c, d, h, w, od, oh, ow](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    size_t o = 0;
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t zi = 0; zi < od; ++zi)
        for (int64_t yi = 0; yi < oh; ++yi)
          for (int64_t xi = 0; xi < ow; ++xi) {
            double g = n.grad[o++] * 0.125;
            for (int64_t a = 0; a < 2; ++a)
              for (int64_t b = 0; b < 2; ++b)
                for (int64_t e = 0; e < 2; ++e)
                  n.parents[0]->grad[((ci * d + 2 * zi + a) * h + 2 * yi + b) * w + 2 * xi + e] += g;
          }
  });
}

}  // namespace brg
