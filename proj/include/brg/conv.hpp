#pragma once

// 3D (and wrapped 2D) convolution, transposed convolution and their
// gradients. One raw engine serves forward, grad-input and grad-weight;
// every output element accumulates in a fixed loop order.

#include <algorithm>

#include "brg/tensor.hpp"

namespace brg {

namespace convdet {

struct Geom {
  int64_t sd = 1, sh = 1, sw = 1;  // stride
  int64_t pd = 0, ph = 0, pw = 0;  // zero padding
  int64_t dd = 1, dh = 1, dw = 1;  // dilation
};

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t s, int64_t p, int64_t d) {
  return (in + 2 * p - d * (k - 1) - 1) / s + 1;
}

// Reused scratch for the patch matrices; the tiny spatial extents make the
// convolutions loop-overhead bound otherwise.
inline std::vector<double>& col_scratch(size_t n, int which) {
  thread_local std::vector<double> bufs[4];
  auto& b = bufs[which];
  if (b.size() < n) b.resize(n);
  return b;
}

// Row-strided copy into scratch. The slabs are laid out with a row stride a
// few doubles past the column count: power-of-two strides land every row in
// the same cache set and the tiled kernels touch 8+ rows at once.
inline void pack_rows(const double* src, int64_t ld_src, int64_t rows, int64_t cols, double* dst,
                      int64_t ld_dst) {
  for (int64_t r = 0; r < rows; ++r)
    std::copy(src + r * ld_src, src + r * ld_src + cols, dst + r * ld_dst);
}

// Patch matrix for one channel block and one run of output depth slices:
// col[r, n] with r = (((c - c0)*KD + kd)*KH + kh)*KW + kw and
// n = ((od - od0)*Ho + oh)*Wo + ow; out-of-frame taps are zero. Blocking in
// both directions keeps the slab cache-resident.
inline void im2col(const double* x, int64_t D, int64_t H, int64_t W, int64_t c0, int64_t cb,
                   int64_t KD, int64_t KH, int64_t KW, const Geom& g, int64_t od0, int64_t Do,
                   int64_t Ho, int64_t Wo, double* col, int64_t ldcol) {
  int64_t n_out = ldcol;
  int64_t r = 0;
  for (int64_t c = c0; c < c0 + cb; ++c)
    for (int64_t kd = 0; kd < KD; ++kd)
      for (int64_t kh = 0; kh < KH; ++kh)
        for (int64_t kw = 0; kw < KW; ++kw, ++r) {
          double* crow = col + r * n_out;
          int64_t base = kw * g.dw - g.pw;  // iw = ow*sw + base
          int64_t lo = base < 0 ? (-base + g.sw - 1) / g.sw : 0;
          int64_t hi = (W - base + g.sw - 1) / g.sw;
          if (hi > Wo) hi = Wo;
          if (lo > Wo) lo = Wo;
          if (hi < lo) hi = lo;
          for (int64_t od = 0; od < Do; ++od) {
            int64_t id = (od0 + od) * g.sd - g.pd + kd * g.dd;
            bool d_ok = id >= 0 && id < D;
            for (int64_t oh = 0; oh < Ho; ++oh) {
              double* dst = crow + (od * Ho + oh) * Wo;
              int64_t ih = oh * g.sh - g.ph + kh * g.dh;
              if (!d_ok || ih < 0 || ih >= H) {
                std::fill(dst, dst + Wo, 0.0);
                continue;
              }
              const double* xr = x + ((c * D + id) * H + ih) * W + base;
              std::fill(dst, dst + lo, 0.0);
              if (g.sw == 1) {
                std::copy(xr + lo, xr + hi, dst + lo);
              } else {
                for (int64_t ow = lo; ow < hi; ++ow) dst[ow] = xr[ow * g.sw];
              }
              std::fill(dst + hi, dst + Wo, 0.0);
            }
          }
        }
}

// Scatter-add one channel/depth block of the patch matrix back into input
// layout.
inline void col2im(const double* col, int64_t D, int64_t H, int64_t W, int64_t c0, int64_t cb,
                   int64_t KD, int64_t KH, int64_t KW, const Geom& g, int64_t od0, int64_t Do,
                   int64_t Ho, int64_t Wo, double* x, int64_t ldcol) {
  int64_t n_out = ldcol;
  int64_t r = 0;
  for (int64_t c = c0; c < c0 + cb; ++c)
    for (int64_t kd = 0; kd < KD; ++kd)
      for (int64_t kh = 0; kh < KH; ++kh)
        for (int64_t kw = 0; kw < KW; ++kw, ++r) {
          const double* crow = col + r * n_out;
          int64_t base = kw * g.dw - g.pw;
          int64_t lo = base < 0 ? (-base + g.sw - 1) / g.sw : 0;
          int64_t hi = (W - base + g.sw - 1) / g.sw;
          if (hi > Wo) hi = Wo;
          for (int64_t od = 0; od < Do; ++od) {
            int64_t id = (od0 + od) * g.sd - g.pd + kd * g.dd;
            if (id < 0 || id >= D) continue;
            for (int64_t oh = 0; oh < Ho; ++oh) {
              int64_t ih = oh * g.sh - g.ph + kh * g.dh;
              if (ih < 0 || ih >= H) continue;
              const double* src = crow + (od * Ho + oh) * Wo;
              double* xr = x + ((c * D + id) * H + ih) * W + base;
              if (g.sw == 1) {
                for (int64_t ow = lo; ow < hi; ++ow) xr[ow] += src[ow];
              } else {
                for (int64_t ow = lo; ow < hi; ++ow) xr[ow * g.sw] += src[ow];
              }
            }
          }
        }
}

// How many output depth slices go into one slab so the patch matrix stays
// well under the cache cliff (the GEMM streams it once per 8 output rows).
inline int64_t depth_chunk(int64_t hw, int64_t dout) {
  int64_t dc = 512 / hw;
  if (dc < 1) dc = 1;
  if (dc > dout) dc = dout;
  return dc;
}

// Channels per block so one patch slab stays near ~0.75 MB; the per-chunk
// output rows are small enough to stay cached across channel blocks.
inline int64_t channel_block(int64_t k3, int64_t n, int64_t c) {
  int64_t cb = 98304 / (k3 * n);
  if (cb < 1) cb = 1;
  if (cb > c) cb = c;
  return cb;
}

#if defined(__GNUC__) || defined(__clang__)
typedef double v8d __attribute__((vector_size(64)));
#define BRG_CONV_VEC 1
#endif

// Register-tiled inner kernel: OB output rows x 16 columns of y held in
// accumulators while one pass streams the slab rows. Per output element the
// accumulation stays sequential in r. b has row stride ldb, y row stride ldy.
// ACC=false overwrites y instead of accumulating into it.
template <int OB, bool ACC = true>
inline void mm_tile(const double* a, int64_t lda, const double* b, int64_t ldb, int64_t R,
                    int64_t o0, int64_t n0, double* y, int64_t ldy) {
#ifdef BRG_CONV_VEC
  // explicit vector lanes: the compiler otherwise vectorizes across the
  // row dimension and fills the loop with cross-lane shuffles
  v8d acc[OB][2];
  if (ACC) {
    for (int j = 0; j < OB; ++j)
      for (int h = 0; h < 2; ++h)
        for (int v = 0; v < 8; ++v) acc[j][h][v] = y[(o0 + j) * ldy + n0 + 8 * h + v];
  } else {
    for (int j = 0; j < OB; ++j)
      for (int h = 0; h < 2; ++h) acc[j][h] = v8d{};
  }
  for (int64_t r = 0; r < R; ++r) {
    const double* bt = b + r * ldb + n0;
    v8d b0, b1;
    for (int v = 0; v < 8; ++v) {
      b0[v] = bt[v];
      b1[v] = bt[8 + v];
    }
    for (int j = 0; j < OB; ++j) {
      double av = a[(o0 + j) * lda + r];
      acc[j][0] += av * b0;
      acc[j][1] += av * b1;
    }
  }
  for (int j = 0; j < OB; ++j)
    for (int h = 0; h < 2; ++h)
      for (int v = 0; v < 8; ++v) y[(o0 + j) * ldy + n0 + 8 * h + v] = acc[j][h][v];
#else
  double acc[OB][16];
  for (int j = 0; j < OB; ++j)
    for (int v = 0; v < 16; ++v) acc[j][v] = ACC ? y[(o0 + j) * ldy + n0 + v] : 0.0;
  for (int64_t r = 0; r < R; ++r) {
    const double* bt = b + r * ldb + n0;
    for (int j = 0; j < OB; ++j) {
      double av = a[(o0 + j) * lda + r];
      for (int v = 0; v < 16; ++v) acc[j][v] += av * bt[v];
    }
  }
  for (int j = 0; j < OB; ++j)
    for (int v = 0; v < 16; ++v) y[(o0 + j) * ldy + n0 + v] = acc[j][v];
#endif
}

#ifdef BRG_CONV_STATS
inline std::map<std::array<int64_t, 3>, int64_t>& conv_stats() {
  static std::map<std::array<int64_t, 3>, int64_t> m;
  return m;
}
#endif

// y[o, n] += sum_r a[o*lda + r] * b[r*ldb + n] for n in [0, N); with
// ACC=false y is overwritten by the sum instead.
template <bool ACC = true>
inline void matmul_acc(const double* a, int64_t lda, const double* b, int64_t ldb, int64_t O,
                       int64_t R, int64_t N, double* y, int64_t ldy) {
#ifdef BRG_CONV_STATS
  conv_stats()[{O, R, N}]++;
#endif
  int64_t n0 = 0;
  for (; n0 + 16 <= N; n0 += 16) {
    int64_t o = 0;
    for (; o + 8 <= O; o += 8) mm_tile<8, ACC>(a, lda, b, ldb, R, o, n0, y, ldy);
    for (; o + 4 <= O; o += 4) mm_tile<4, ACC>(a, lda, b, ldb, R, o, n0, y, ldy);
    for (; o + 2 <= O; o += 2) mm_tile<2, ACC>(a, lda, b, ldb, R, o, n0, y, ldy);
    for (; o < O; ++o) mm_tile<1, ACC>(a, lda, b, ldb, R, o, n0, y, ldy);
  }
  for (; n0 < N; ++n0)
    for (int64_t o = 0; o < O; ++o) {
      double s = ACC ? y[o * ldy + n0] : 0.0;
      for (int64_t r = 0; r < R; ++r) s += a[o * lda + r] * b[r * ldb + n0];
      y[o * ldy + n0] = s;
    }
}

// x: [C, D, H, W], k: [O, C, KD, KH, KW], y: [O, Do, Ho, Wo]; y is
// overwritten unless ACC, in which case the result is added into it.
template <bool ACC = false>
inline void conv_fwd_raw(const double* x, int64_t C, int64_t D, int64_t H, int64_t W,
                         const double* k, int64_t O, int64_t KD, int64_t KH, int64_t KW,
                         const Geom& g, double* y, int64_t Do, int64_t Ho, int64_t Wo) {
  int64_t K3 = KD * KH * KW, N = Do * Ho * Wo, R = C * K3, HW = Ho * Wo;
  int64_t dc = depth_chunk(HW, Do);
  int64_t ld = dc * HW + 8;
  int64_t cb = channel_block(K3, dc * HW, C);
  double* col = col_scratch(static_cast<size_t>(cb * K3 * ld), 0).data();
  for (int64_t od0 = 0; od0 < Do; od0 += dc) {
    int64_t nc = (od0 + dc < Do ? dc : Do - od0) * HW;
    for (int64_t cs = 0; cs < C; cs += cb) {
      int64_t cc = cs + cb < C ? cb : C - cs;
      im2col(x, D, H, W, cs, cc, KD, KH, KW, g, od0, nc / HW, Ho, Wo, col, ld);
      if (!ACC && cs == 0)
        matmul_acc<false>(k, R, col, ld, O, cc * K3, nc, y + od0 * HW, N);
      else
        matmul_acc(k + cs * K3, R, col, ld, O, cc * K3, nc, y + od0 * HW, N);
    }
  }
}

// Outer-product tile: OB gradient rows x RB col rows reduced over the n
// chunk with eight-lane accumulators and a fixed-order lane reduction, so
// the result stays deterministic while the n loop vectorizes.
template <int OB, int RB>
inline void gradw_block(const double* col, int64_t ldc, const double* gy, int64_t ldg, int64_t o0,
                        int64_t r0, int64_t lda, int64_t n1, double* gk) {
#ifdef BRG_CONV_VEC
  v8d acc[OB][RB] = {};
  int64_t n = 0;
  for (; n + 8 <= n1; n += 8) {
    v8d cv[RB];
    for (int i = 0; i < RB; ++i)
      for (int v = 0; v < 8; ++v) cv[i][v] = col[(r0 + i) * ldc + n + v];
    // full unroll so the accumulators stay in registers instead of being
    // reloaded from the stack on every row
#pragma GCC unroll 8
    for (int j = 0; j < OB; ++j) {
      const double* gt = gy + (o0 + j) * ldg + n;
      v8d gv;
      for (int v = 0; v < 8; ++v) gv[v] = gt[v];
      for (int i = 0; i < RB; ++i) acc[j][i] += gv * cv[i];
    }
  }
  for (int j = 0; j < OB; ++j)
    for (int i = 0; i < RB; ++i) {
      v8d& a = acc[j][i];
      double s = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
      for (int64_t t = n; t < n1; ++t) s += gy[(o0 + j) * ldg + t] * col[(r0 + i) * ldc + t];
      gk[(o0 + j) * lda + r0 + i] += s;
    }
#else
  double acc[OB][RB][8] = {};
  int64_t n = 0;
  for (; n + 8 <= n1; n += 8)
    for (int j = 0; j < OB; ++j)
      for (int i = 0; i < RB; ++i)
        for (int v = 0; v < 8; ++v)
          acc[j][i][v] += gy[(o0 + j) * ldg + n + v] * col[(r0 + i) * ldc + n + v];
  for (int j = 0; j < OB; ++j)
    for (int i = 0; i < RB; ++i) {
      const double* a = acc[j][i];
      double s = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
      for (int64_t t = n; t < n1; ++t) s += gy[(o0 + j) * ldg + t] * col[(r0 + i) * ldc + t];
      gk[(o0 + j) * lda + r0 + i] += s;
    }
#endif
}

template <int OB>
inline void gradw_rows(const double* col, int64_t ldc, const double* gy, int64_t ldg, int64_t o0,
                       int64_t Rb, int64_t lda, int64_t n1, double* gk) {
  int64_t r = 0;
  for (; r + 3 <= Rb; r += 3) gradw_block<OB, 3>(col, ldc, gy, ldg, o0, r, lda, n1, gk);
  for (; r + 2 <= Rb; r += 2) gradw_block<OB, 2>(col, ldc, gy, ldg, o0, r, lda, n1, gk);
  for (; r < Rb; ++r) gradw_block<OB, 1>(col, ldc, gy, ldg, o0, r, lda, n1, gk);
}

// gk accumulated (pre-zeroed): gk[o,c,kd,kh,kw] += sum over output positions.
inline void conv_gradw_raw(const double* x, int64_t C, int64_t D, int64_t H, int64_t W,
                           const double* gy, int64_t O, int64_t Do, int64_t Ho, int64_t Wo,
                           const Geom& g, double* gk, int64_t KD, int64_t KH, int64_t KW) {
  int64_t K3 = KD * KH * KW, N = Do * Ho * Wo, R = C * K3, HW = Ho * Wo;
  int64_t dc = depth_chunk(HW, Do);
  int64_t ld = dc * HW + 8;
  int64_t cb = channel_block(K3, dc * HW, C);
  double* col = col_scratch(static_cast<size_t>(cb * K3 * ld), 0).data();
  double* gyp = col_scratch(static_cast<size_t>(O * ld), 3).data();
  for (int64_t od0 = 0; od0 < Do; od0 += dc) {
    int64_t nc = (od0 + dc < Do ? dc : Do - od0) * HW;
    pack_rows(gy + od0 * HW, N, O, nc, gyp, ld);
    for (int64_t cs = 0; cs < C; cs += cb) {
      int64_t cc = cs + cb < C ? cb : C - cs;
      im2col(x, D, H, W, cs, cc, KD, KH, KW, g, od0, nc / HW, Ho, Wo, col, ld);
      double* gkb = gk + cs * K3;
      int64_t o = 0;
      for (; o + 8 <= O; o += 8) gradw_rows<8>(col, ld, gyp, ld, o, cc * K3, R, nc, gkb);
      for (; o + 4 <= O; o += 4) gradw_rows<4>(col, ld, gyp, ld, o, cc * K3, R, nc, gkb);
      for (; o + 2 <= O; o += 2) gradw_rows<2>(col, ld, gyp, ld, o, cc * K3, R, nc, gkb);
      for (; o < O; ++o) gradw_rows<1>(col, ld, gyp, ld, o, cc * K3, R, nc, gkb);
    }
  }
}

// Transposed convolution: gcol = k^T · a per channel block, then scatter the
// patches back. Also the grad-input of conv_fwd_raw. out accumulated
// (pre-zeroed).
inline void tconv_raw(const double* a, int64_t O, int64_t Do, int64_t Ho, int64_t Wo,
                      const double* k, int64_t C, int64_t KD, int64_t KH, int64_t KW,
                      const Geom& g, double* out, int64_t D, int64_t H, int64_t W) {
  int64_t K3 = KD * KH * KW, N = Do * Ho * Wo, R = C * K3, HW = Ho * Wo;
  if (g.sd == 1 && g.sh == 1 && g.sw == 1) {
    // unit stride: equal to a convolution of a with the kernel transposed in
    // its channel axes and flipped in its spatial axes, which skips the
    // patch-matrix scatter entirely
    double* kf = col_scratch(static_cast<size_t>(C * O * K3), 2).data();
    for (int64_t o = 0; o < O; ++o)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t q = 0; q < K3; ++q) kf[(c * O + o) * K3 + (K3 - 1 - q)] = k[(o * C + c) * K3 + q];
    Geom gf{1, 1, 1, g.dd * (KD - 1) - g.pd, g.dh * (KH - 1) - g.ph, g.dw * (KW - 1) - g.pw,
            g.dd, g.dh, g.dw};
    conv_fwd_raw<true>(a, O, Do, Ho, Wo, kf, C, KD, KH, KW, gf, out, D, H, W);
    return;
  }
  int64_t dc = depth_chunk(HW, Do);
  int64_t ld = dc * HW + 8;
  int64_t cb = channel_block(K3, dc * HW, C);
  double* gcol = col_scratch(static_cast<size_t>(cb * K3 * ld), 1).data();
  double* kt = col_scratch(static_cast<size_t>(cb * K3 * O), 2).data();
  double* ap = col_scratch(static_cast<size_t>(O * ld), 3).data();
  for (int64_t od0 = 0; od0 < Do; od0 += dc) {
    int64_t nc = (od0 + dc < Do ? dc : Do - od0) * HW;
    pack_rows(a + od0 * HW, N, O, nc, ap, ld);
    for (int64_t cs = 0; cs < C; cs += cb) {
      int64_t cc = cs + cb < C ? cb : C - cs;
      int64_t rb = cc * K3;
      for (int64_t o = 0; o < O; ++o)
        for (int64_t r = 0; r < rb; ++r) kt[r * O + o] = k[o * R + cs * K3 + r];
      matmul_acc<false>(kt, O, ap, ld, rb, O, nc, gcol, ld);
      col2im(gcol, D, H, W, cs, cc, KD, KH, KW, g, od0, nc / HW, Ho, Wo, out, ld);
    }
  }
}

}  // namespace convdet

// ---------------------------------------------------------------------------
// differentiable ops

// x: [C, D, H, W]; kernel: [O, C, k, k, k] with odd k.
inline Tensor conv3d(const Tensor& x, const Tensor& k, int64_t stride, int64_t pad,
                     int64_t dilation = 1) {
  if (x.rank() != 4 || k.rank() != 5)
    throw std::invalid_argument("conv3d: expected rank-4 input and rank-5 kernel");
  if (k.extent(2) != k.extent(3) || k.extent(2) != k.extent(4) || k.extent(2) % 2 == 0)
    throw std::invalid_argument("conv3d: kernel must be cubic with odd extent");
  if (x.extent(0) != k.extent(1))
    throw std::invalid_argument("conv3d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(k.shape()));
  int64_t C = x.extent(0), D = x.extent(1), H = x.extent(2), W = x.extent(3);
  int64_t O = k.extent(0), K = k.extent(2);
  convdet::Geom g{stride, stride, stride, pad, pad, pad, dilation, dilation, dilation};
  int64_t Do = convdet::conv_out_extent(D, K, stride, pad, dilation);
  int64_t Ho = convdet::conv_out_extent(H, K, stride, pad, dilation);
  int64_t Wo = convdet::conv_out_extent(W, K, stride, pad, dilation);
  if (Do < 1 || Ho < 1 || Wo < 1) throw std::invalid_argument("conv3d: nonpositive output extent");
  std::vector<double> y(static_cast<size_t>(O * Do * Ho * Wo), 0.0);
  convdet::conv_fwd_raw(x.data(), C, D, H, W, k.data(), O, K, K, K, g, y.data(), Do, Ho, Wo);
  return make_op({O, Do, Ho, Wo}, std::move(y), {x, k},
                 [C, D, H, W, O, K, g, Do, Ho, Wo](Node& n) {
                   if (n.parents[0]->requires_grad)
                     convdet::tconv_raw(n.grad.data(), O, Do, Ho, Wo, n.parents[1]->value.data(),
                                        C, K, K, K, g, n.parents[0]->grad.data(), D, H, W);
                   if (n.parents[1]->requires_grad)
                     convdet::conv_gradw_raw(n.parents[0]->value.data(), C, D, H, W, n.grad.data(),
                                             O, Do, Ho, Wo, g, n.parents[1]->grad.data(), K, K, K);
                 });
}

// Adjoint of conv3d under the same [O, C, k, k, k] kernel: maps O channels
// back to C. out_pad (< stride) disambiguates the output extent, matching
// (in-1)*stride - 2*pad + k + out_pad.
inline Tensor conv_transpose3d(const Tensor& x, const Tensor& k, int64_t stride, int64_t pad,
                               int64_t out_pad = 0) {
  if (x.rank() != 4 || k.rank() != 5)
    throw std::invalid_argument("conv_transpose3d: expected rank-4 input and rank-5 kernel");
  if (x.extent(0) != k.extent(0))
    throw std::invalid_argument("conv_transpose3d: channel mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(k.shape()));
  if (out_pad < 0 || out_pad >= stride)
    throw std::invalid_argument("conv_transpose3d: out_pad must be in [0, stride)");
  int64_t O = x.extent(0), Do = x.extent(1), Ho = x.extent(2), Wo = x.extent(3);
  int64_t C = k.extent(1), K = k.extent(2);
  convdet::Geom g{stride, stride, stride, pad, pad, pad, 1, 1, 1};
  int64_t D = (Do - 1) * stride - 2 * pad + K + out_pad;
  int64_t H = (Ho - 1) * stride - 2 * pad + K + out_pad;
  int64_t W = (Wo - 1) * stride - 2 * pad + K + out_pad;
  if (D < 1 || H < 1 || W < 1)
    throw std::invalid_argument("conv_transpose3d: nonpositive output extent");
  std::vector<double> y(static_cast<size_t>(C * D * H * W), 0.0);
  convdet::tconv_raw(x.data(), O, Do, Ho, Wo, k.data(), C, K, K, K, g, y.data(), D, H, W);
  return make_op({C, D, H, W}, std::move(y), {x, k},
                 [C, D, H, W, O, K, g, Do, Ho, Wo](Node& n) {
                   if (n.parents[0]->requires_grad)
                     convdet::conv_fwd_raw(n.grad.data(), C, D, H, W, n.parents[1]->value.data(),
                                           O, K, K, K, g, n.parents[0]->grad.data(), Do, Ho, Wo);
                   if (n.parents[1]->requires_grad)
                     convdet::conv_gradw_raw(n.grad.data(), C, D, H, W,
                                             n.parents[0]->value.data(), O, Do, Ho, Wo, g,
                                             n.parents[1]->grad.data(), K, K, K);
                 });
}

// x: [C, H, W]; kernel: [O, C, k, k] with odd k. Runs through the 3D engine
// with a singleton depth axis.
inline Tensor conv2d(const Tensor& x, const Tensor& k, int64_t stride, int64_t pad,
                     int64_t dilation = 1) {
  if (x.rank() != 3 || k.rank() != 4)
    throw std::invalid_argument("conv2d: expected rank-3 input and rank-4 kernel");
  if (k.extent(2) != k.extent(3) || k.extent(2) % 2 == 0)
    throw std::invalid_argument("conv2d: kernel must be square with odd extent");
  if (x.extent(0) != k.extent(1)) throw std::invalid_argument("conv2d: channel mismatch");
  int64_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
  int64_t O = k.extent(0), K = k.extent(2);
  convdet::Geom g{1, stride, stride, 0, pad, pad, 1, dilation, dilation};
  int64_t Ho = convdet::conv_out_extent(H, K, stride, pad, dilation);
  int64_t Wo = convdet::conv_out_extent(W, K, stride, pad, dilation);
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: nonpositive output extent");
  std::vector<double> y(static_cast<size_t>(O * Ho * Wo), 0.0);
  convdet::conv_fwd_raw(x.data(), C, 1, H, W, k.data(), O, 1, K, K, g, y.data(), 1, Ho, Wo);
  return make_op({O, Ho, Wo}, std::move(y), {x, k}, [C, H, W, O, K, g, Ho, Wo](Node& n) {
    if (n.parents[0]->requires_grad)
      convdet::tconv_raw(n.grad.data(), O, 1, Ho, Wo, n.parents[1]->value.data(), C, 1, K, K, g,
                         n.parents[0]->grad.data(), 1, H, W);
    if (n.parents[1]->requires_grad)
      convdet::conv_gradw_raw(n.parents[0]->value.data(), C, 1, H, W, n.grad.data(), O, 1, Ho, Wo,
                              g, n.parents[1]->grad.data(), 1, K, K);
  });
}

}  // namespace brg
