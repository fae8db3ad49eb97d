#pragma once

// Stereo geometric volume constructor: shared-weight unary features,
// group-wise correlation, disparity-to-depth resampling and the stacked
// 3D hourglass regularizer.

#include <cmath>

#include "brg/camera.hpp"
#include "brg/conv.hpp"
#include "brg/ops.hpp"
#include "brg/params.hpp"

namespace brg {

struct UnaryFeatures {
  Tensor left;   // [N_c, H_f, W_f]
  Tensor right;  // same shape, same weights
};

struct GwcConfig {
  int64_t num_groups = 4;
  int64_t max_disparity = 16;  // feature-resolution pixels

  void validate(int64_t channels) const {
    if (num_groups < 1 || channels % num_groups != 0)
      throw std::invalid_argument("gwc: num_groups must divide the channel count");
    if (max_disparity < 1) throw std::invalid_argument("gwc: max_disparity must be >= 1");
  }
};

struct StereoVolume {
  Tensor data;  // [D_max, H_f, W_f] pre-softmax logits
};

// ---------------------------------------------------------------------------
// shared-weight 2D encoder (replaces the pretrained backbone): three strided
// convolutions, overall downscale 4

struct EncoderWeights {
  Tensor k1, b1;  // 1   -> mid, stride 2
  Tensor k2, b2;  // mid -> N_c, stride 2
  Tensor k3, b3;  // N_c -> N_c, stride 1
  int64_t downscale = 4;

  static EncoderWeights create(ParamStore& ps, const std::string& prefix, int64_t n_c) {
    int64_t mid = n_c / 2 > 0 ? n_c / 2 : 1;
    EncoderWeights w;
    w.k1 = ps.add(prefix + ".k1", {mid, 1, 3, 3}, 9);
    w.b1 = ps.add(prefix + ".b1", {mid}, 0);
    w.k2 = ps.add(prefix + ".k2", {n_c, mid, 3, 3}, mid * 9);
    w.b2 = ps.add(prefix + ".b2", {n_c}, 0);
    w.k3 = ps.add(prefix + ".k3", {n_c, n_c, 3, 3}, n_c * 9);
    w.b3 = ps.add(prefix + ".b3", {n_c}, 0);
    return w;
  }
};

inline Tensor encode_image(const Tensor& img, const EncoderWeights& w) {
  Tensor h = relu(add_first_axis(conv2d(img, w.k1, 2, 1), w.b1));
  h = relu(add_first_axis(conv2d(h, w.k2, 2, 1), w.b2));
  return add_first_axis(conv2d(h, w.k3, 1, 1), w.b3);
}

inline UnaryFeatures extract_unary(const Tensor& left, const Tensor& right,
                                   const EncoderWeights& w) {
  if (left.shape() != right.shape())
    throw std::invalid_argument("extract_unary: stereo pair extents differ");
  if (left.extent(1) % w.downscale || left.extent(2) % w.downscale)
    throw std::invalid_argument("extract_unary: extents not divisible by the downscale factor");
  return {encode_image(left, w), encode_image(right, w)};
}

// ---------------------------------------------------------------------------
// group-wise correlation:
// out[g,d,y,x] = (1/(N_c/N_g)) <f_l^g(x,y), f_r^g(x-d,y)>, zero when x-d < 0

inline Tensor gwc_correlation(const UnaryFeatures& f, const GwcConfig& cfg) {
  if (f.left.shape() != f.right.shape())
    throw std::invalid_argument("gwc_correlation: feature shapes differ");
  int64_t n_c = f.left.extent(0), h = f.left.extent(1), w = f.left.extent(2);
  cfg.validate(n_c);
  int64_t n_g = cfg.num_groups, dmax = cfg.max_disparity;
  int64_t gch = n_c / n_g;
  double inv = 1.0 / static_cast<double>(gch);

  std::vector<double> out(static_cast<size_t>(n_g * dmax * h * w), 0.0);
  const double* l = f.left.data();
  const double* r = f.right.data();
  for (int64_t g = 0; g < n_g; ++g)
    for (int64_t d = 0; d < dmax; ++d)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = d; x < w; ++x) {
          double acc = 0.0;
          for (int64_t c = g * gch; c < (g + 1) * gch; ++c)
            acc += l[(c * h + y) * w + x] * r[(c * h + y) * w + x - d];
          out[static_cast<size_t>(((g * dmax + d) * h + y) * w + x)] = acc * inv;
        }
  return make_op({n_g, dmax, h, w}, std::move(out), {f.left, f.right},
                 [n_g, dmax, h, w, gch, inv](Node& n) {
                   const auto& lv = n.parents[0]->value;
                   const auto& rv = n.parents[1]->value;
                   for (int64_t g = 0; g < n_g; ++g)
                     for (int64_t d = 0; d < dmax; ++d)
                       for (int64_t y = 0; y < h; ++y)
                         for (int64_t x = d; x < w; ++x) {
                           double go = n.grad[((g * dmax + d) * h + y) * w + x] * inv;
                           for (int64_t c = g * gch; c < (g + 1) * gch; ++c) {
                             size_t li = static_cast<size_t>((c * h + y) * w + x);
                             size_t ri = li - static_cast<size_t>(d);
                             if (n.parents[0]->requires_grad) n.parents[0]->grad[li] += go * rv[ri];
                             if (n.parents[1]->requires_grad) n.parents[1]->grad[ri] += go * lv[li];
                           }
                         }
                 });
}

// ---------------------------------------------------------------------------
// disparity volume -> depth volume (Pseudo-LiDAR style resampling)
//
// For each depth bin center z, sample the disparity axis at
// d = f_u * b / (z * downscale) (feature-resolution pixels) by linear
// interpolation between adjacent integer-disparity slices, clamped to the
// edge slices; then average over correlation groups.

inline Tensor disparity_to_depth_volume(const Tensor& cost, const DepthBins& bins,
                                        const CameraRig& rig, int64_t downscale) {
  if (cost.rank() != 4) throw std::invalid_argument("disparity_to_depth_volume: rank-4 cost required");
  bins.validate();
  int64_t n_g = cost.extent(0), dd = cost.extent(1), h = cost.extent(2), w = cost.extent(3);
  int64_t dz = bins.count;
  // per depth bin: lower slice index and interpolation weights
  std::vector<int64_t> i0(static_cast<size_t>(dz));
  std::vector<double> w0(static_cast<size_t>(dz)), w1(static_cast<size_t>(dz));
  for (int64_t z = 0; z < dz; ++z) {
    double disp = depth_to_disparity(bins.center(z), rig) / static_cast<double>(downscale);
    if (disp <= 0.0) disp = 0.0;
    if (disp >= static_cast<double>(dd - 1)) disp = static_cast<double>(dd - 1);
    int64_t lo = static_cast<int64_t>(std::floor(disp));
    if (lo >= dd - 1) lo = dd - 1;
    double frac = disp - static_cast<double>(lo);
    i0[static_cast<size_t>(z)] = lo;
    w0[static_cast<size_t>(z)] = 1.0 - frac;
    w1[static_cast<size_t>(z)] = frac;
  }
  int64_t hw = h * w;
  double ginv = 1.0 / static_cast<double>(n_g);
  std::vector<double> out(static_cast<size_t>(dz * hw), 0.0);
  const double* cd = cost.data();
  for (int64_t z = 0; z < dz; ++z) {
    int64_t lo = i0[static_cast<size_t>(z)];
    int64_t hi = lo + 1 < dd ? lo + 1 : lo;
    for (int64_t g = 0; g < n_g; ++g) {
      const double* s0 = cd + (g * dd + lo) * hw;
      const double* s1 = cd + (g * dd + hi) * hw;
      for (int64_t p = 0; p < hw; ++p)
        out[static_cast<size_t>(z * hw + p)] +=
            ginv * (w0[static_cast<size_t>(z)] * s0[p] + w1[static_cast<size_t>(z)] * s1[p]);
    }
  }
  return make_op({dz, h, w}, std::move(out), {cost}, [n_g, dd, hw, dz, i0, w0, w1, ginv](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    for (int64_t z = 0; z < dz; ++z) {
      int64_t lo = i0[static_cast<size_t>(z)];
      int64_t hi = lo + 1 < dd ? lo + 1 : lo;
      for (int64_t g = 0; g < n_g; ++g)
        for (int64_t p = 0; p < hw; ++p) {
          double gv = n.grad[z * hw + p] * ginv;
          n.parents[0]->grad[(g * dd + lo) * hw + p] += gv * w0[static_cast<size_t>(z)];
          n.parents[0]->grad[(g * dd + hi) * hw + p] += gv * w1[static_cast<size_t>(z)];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// 3D hourglass (encoder-decoder with two residual shortcuts)

struct HourglassWeights {
  Tensor k1, b1;  // 3x3x3, stride 2, 32 -> 64
  Tensor k2, b2;  // 3x3x3, stride 1, 64 -> 64
  Tensor k3, b3;  // 3x3x3, stride 2, 64 -> 128
  Tensor k4, b4;  // 3x3x3, stride 1, 128 -> 128
  Tensor k5, b5;  // deconv 3x3x3, stride 2, 128 -> 64
  Tensor k6, b6;  // 1x1x1, 64 -> 64 (on Conv2)
  Tensor k7, b7;  // deconv 3x3x3, stride 2, 64 -> 32
  Tensor k8, b8;  // 1x1x1, 32 -> 32 (on input)

  static HourglassWeights create(ParamStore& ps, const std::string& prefix, int64_t c = 32) {
    HourglassWeights w;
    int64_t c2 = 2 * c, c4 = 4 * c;
    w.k1 = ps.add(prefix + ".k1", {c2, c, 3, 3, 3}, c * 27);
    w.b1 = ps.add(prefix + ".b1", {c2}, 0);
    w.k2 = ps.add(prefix + ".k2", {c2, c2, 3, 3, 3}, c2 * 27);
    w.b2 = ps.add(prefix + ".b2", {c2}, 0);
    w.k3 = ps.add(prefix + ".k3", {c4, c2, 3, 3, 3}, c2 * 27);
    w.b3 = ps.add(prefix + ".b3", {c4}, 0);
    w.k4 = ps.add(prefix + ".k4", {c4, c4, 3, 3, 3}, c4 * 27);
    w.b4 = ps.add(prefix + ".b4", {c4}, 0);
    w.k5 = ps.add(prefix + ".k5", {c4, c2, 3, 3, 3}, c4 * 27);  // tconv: 128 -> 64
    w.b5 = ps.add(prefix + ".b5", {c2}, 0);
    w.k6 = ps.add(prefix + ".k6", {c2, c2, 1, 1, 1}, c2);
    w.b6 = ps.add(prefix + ".b6", {c2}, 0);
    w.k7 = ps.add(prefix + ".k7", {c2, c, 3, 3, 3}, c2 * 27);  // tconv: 64 -> 32
    w.b7 = ps.add(prefix + ".b7", {c}, 0);
    w.k8 = ps.add(prefix + ".k8", {c, c, 1, 1, 1}, c);
    w.b8 = ps.add(prefix + ".b8", {c}, 0);
    return w;
  }
};

// Layer chain exactly as in the hourglass table; output shape equals input
// shape, which needs D, H, W divisible by 4 (two stride-2 stages).
inline Tensor hourglass_regularize(const Tensor& x, const HourglassWeights& w) {
  if (x.rank() != 4) throw std::invalid_argument("hourglass: rank-4 input required");
  if (x.extent(1) % 4 || x.extent(2) % 4 || x.extent(3) % 4)
    throw std::invalid_argument("hourglass: D, H, W must be divisible by 4");
  Tensor c1 = relu(add_first_axis(conv3d(x, w.k1, 2, 1), w.b1));
  Tensor c2 = relu(add_first_axis(conv3d(c1, w.k2, 1, 1), w.b2));
  Tensor c3 = relu(add_first_axis(conv3d(c2, w.k3, 2, 1), w.b3));
  Tensor c4 = relu(add_first_axis(conv3d(c3, w.k4, 1, 1), w.b4));
  Tensor d5 = add_first_axis(conv_transpose3d(c4, w.k5, 2, 1, 1), w.b5);
  Tensor c6 = add_first_axis(conv3d(c2, w.k6, 1, 0), w.b6);
  Tensor sc = relu(add(d5, c6));
  Tensor d7 = add_first_axis(conv_transpose3d(sc, w.k7, 2, 1, 1), w.b7);
  Tensor c8 = add_first_axis(conv3d(x, w.k8, 1, 0), w.b8);
  return relu(add(d7, c8));
}

// ---------------------------------------------------------------------------
// full constructor

struct StereoWeights {
  EncoderWeights encoder;
  Tensor pre1_k, pre1_b;  // 1 -> 32
  Tensor pre2_k, pre2_b;  // 32 -> 32
  std::vector<HourglassWeights> hourglasses;
  Tensor post1_k, post1_b;  // 32 -> 32
  Tensor post2_k, post2_b;  // 32 -> 1
  GwcConfig gwc;
  int64_t reg_channels = 32;

  static StereoWeights create(ParamStore& ps, const std::string& prefix, int64_t n_c,
                              const GwcConfig& gwc, int64_t num_hourglasses = 3,
                              int64_t c = 32) {
    StereoWeights w;
    w.encoder = EncoderWeights::create(ps, prefix + ".enc", n_c);
    w.gwc = gwc;
    w.reg_channels = c;
    w.pre1_k = ps.add(prefix + ".pre1_k", {c, 1, 3, 3, 3}, 27);
    w.pre1_b = ps.add(prefix + ".pre1_b", {c}, 0);
    w.pre2_k = ps.add(prefix + ".pre2_k", {c, c, 3, 3, 3}, c * 27);
    w.pre2_b = ps.add(prefix + ".pre2_b", {c}, 0);
    for (int64_t i = 0; i < num_hourglasses; ++i)
      w.hourglasses.push_back(
          HourglassWeights::create(ps, prefix + ".hg" + std::to_string(i), c));
    w.post1_k = ps.add(prefix + ".post1_k", {c, c, 3, 3, 3}, c * 27);
    w.post1_b = ps.add(prefix + ".post1_b", {c}, 0);
    w.post2_k = ps.add(prefix + ".post2_k", {1, c, 3, 3, 3}, c * 27);
    w.post2_b = ps.add(prefix + ".post2_b", {1}, 0);
    return w;
  }
};

// Regularizes a single-channel depth volume: two pre-convolutions, the
// hourglass stack, two convolutions down to one channel, squeeze.
inline StereoVolume regularize_depth_volume(const Tensor& depth_volume, const StereoWeights& w) {
  int64_t d = depth_volume.extent(0), h = depth_volume.extent(1), wd = depth_volume.extent(2);
  Tensor x = reshape(depth_volume, {1, d, h, wd});
  x = relu(add_first_axis(conv3d(x, w.pre1_k, 1, 1), w.pre1_b));
  x = relu(add_first_axis(conv3d(x, w.pre2_k, 1, 1), w.pre2_b));
  for (const auto& hg : w.hourglasses) x = hourglass_regularize(x, hg);
  x = relu(add_first_axis(conv3d(x, w.post1_k, 1, 1), w.post1_b));
  x = add_first_axis(conv3d(x, w.post2_k, 1, 1), w.post2_b);
  return {reshape(x, {d, h, wd})};
}

inline StereoVolume build_stereo_volume(const UnaryFeatures& f, const CameraRig& rig,
                                        const DepthBins& bins, const StereoWeights& w) {
  Tensor cost = gwc_correlation(f, w.gwc);
  Tensor depth_volume = disparity_to_depth_volume(cost, bins, rig, w.encoder.downscale);
  return regularize_depth_volume(depth_volume, w);
}

}  // namespace brg
