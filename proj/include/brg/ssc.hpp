#pragma once

// Semantic scene completion head: outer-product lift, 3D UNet, the
// four-term composite loss, IoU/mIoU metrics and the AdamW training step.

#include <cmath>
#include <cstdint>
#include <functional>

#include "brg/camera.hpp"
#include "brg/conv.hpp"
#include "brg/ops.hpp"
#include "brg/params.hpp"

namespace brg {

// ---------------------------------------------------------------------------
// voxel grid

struct VoxelGrid {
  int64_t h = 0, w = 0, z = 0;
  int64_t class_count = 0;            // M+1: free = 0, semantics 1..M
  std::vector<uint16_t> labels;       // row-major [h][w][z]
  std::vector<uint8_t> invalid_mask;  // 1 = unknown, excluded from scoring

  static VoxelGrid make(int64_t h, int64_t w, int64_t z, int64_t class_count) {
    VoxelGrid g;
    g.h = h;
    g.w = w;
    g.z = z;
    g.class_count = class_count;
    g.labels.assign(static_cast<size_t>(h * w * z), 0);
    g.invalid_mask.assign(static_cast<size_t>(h * w * z), 0);
    return g;
  }

  int64_t numel() const { return h * w * z; }

  void validate() const {
    for (size_t i = 0; i < labels.size(); ++i)
      if (!invalid_mask[i] && labels[i] >= class_count)
        throw std::invalid_argument("voxel grid: label exceeds class count");
  }
};

// ---------------------------------------------------------------------------
// lift (Eq. outer product): softmax over depth, then splat context along it

// c_bev: [C_b, H, W]; v_ens: [D, H, W] logits -> F_vox [C_b, D, H, W]
inline Tensor lift(const Tensor& c_bev, const Tensor& v_ens_logits) {
  if (c_bev.extent(1) != v_ens_logits.extent(1) || c_bev.extent(2) != v_ens_logits.extent(2))
    throw std::invalid_argument("lift: spatial extents differ");
  return outer_lift(c_bev, softmax_along(v_ens_logits, 0));
}

// ---------------------------------------------------------------------------
// 3D UNet completion head

struct Unet3dWeights {
  Tensor e0_k, e0_b;              // C_in -> B
  Tensor d1_k, d1_b, c1_k, c1_b;  // B -> 2B stride 2; 2B -> 2B
  Tensor d2_k, d2_b, c2_k, c2_b;  // 2B -> 4B stride 2; 4B -> 4B
  Tensor u1_k, u1_b, m1_k, m1_b;  // 4B -> 2B tconv; 2B -> 2B after skip
  Tensor u2_k, u2_b, m2_k, m2_b;  // 2B -> B tconv; B -> B after skip
  Tensor up_k, up_b;              // final x2 deconvolution, B -> B
  Tensor head_k, head_b;          // 1x1x1 to M+1 classes

  static Unet3dWeights create(ParamStore& ps, const std::string& prefix, int64_t c_in,
                              int64_t base, int64_t classes) {
    Unet3dWeights w;
    int64_t b2 = 2 * base, b4 = 4 * base;
    w.e0_k = ps.add(prefix + ".e0_k", {base, c_in, 3, 3, 3}, c_in * 27);
    w.e0_b = ps.add(prefix + ".e0_b", {base}, 0);
    w.d1_k = ps.add(prefix + ".d1_k", {b2, base, 3, 3, 3}, base * 27);
    w.d1_b = ps.add(prefix + ".d1_b", {b2}, 0);
    w.c1_k = ps.add(prefix + ".c1_k", {b2, b2, 3, 3, 3}, b2 * 27);
    w.c1_b = ps.add(prefix + ".c1_b", {b2}, 0);
    w.d2_k = ps.add(prefix + ".d2_k", {b4, b2, 3, 3, 3}, b2 * 27);
    w.d2_b = ps.add(prefix + ".d2_b", {b4}, 0);
    w.c2_k = ps.add(prefix + ".c2_k", {b4, b4, 3, 3, 3}, b4 * 27);
    w.c2_b = ps.add(prefix + ".c2_b", {b4}, 0);
    w.u1_k = ps.add(prefix + ".u1_k", {b4, b2, 3, 3, 3}, b4 * 27);
    w.u1_b = ps.add(prefix + ".u1_b", {b2}, 0);
    w.m1_k = ps.add(prefix + ".m1_k", {b2, b2, 3, 3, 3}, b2 * 27);
    w.m1_b = ps.add(prefix + ".m1_b", {b2}, 0);
    w.u2_k = ps.add(prefix + ".u2_k", {b2, base, 3, 3, 3}, b2 * 27);
    w.u2_b = ps.add(prefix + ".u2_b", {base}, 0);
    w.m2_k = ps.add(prefix + ".m2_k", {base, base, 3, 3, 3}, base * 27);
    w.m2_b = ps.add(prefix + ".m2_b", {base}, 0);
    w.up_k = ps.add(prefix + ".up_k", {base, base, 3, 3, 3}, base * 27);
    w.up_b = ps.add(prefix + ".up_b", {base}, 0);
    w.head_k = ps.add(prefix + ".head_k", {classes, base, 1, 1, 1}, base);
    w.head_b = ps.add(prefix + ".head_b", {classes}, 0);
    return w;
  }
};

// Two-level encoder/decoder with skips, then a final x2 deconvolution, so
// output spatial extents are twice the input's; channels become M+1.
inline Tensor unet3d_head(const Tensor& f_vox, const Unet3dWeights& w) {
  if (f_vox.rank() != 4) throw std::invalid_argument("unet3d_head: rank-4 input required");
  if (f_vox.extent(1) % 4 || f_vox.extent(2) % 4 || f_vox.extent(3) % 4)
    throw std::invalid_argument("unet3d_head: extents must be divisible by 2 per level");
  Tensor e0 = relu(add_first_axis(conv3d(f_vox, w.e0_k, 1, 1), w.e0_b));
  Tensor e1 = relu(add_first_axis(conv3d(e0, w.d1_k, 2, 1), w.d1_b));
  e1 = relu(add_first_axis(conv3d(e1, w.c1_k, 1, 1), w.c1_b));
  Tensor e2 = relu(add_first_axis(conv3d(e1, w.d2_k, 2, 1), w.d2_b));
  e2 = relu(add_first_axis(conv3d(e2, w.c2_k, 1, 1), w.c2_b));
  Tensor u1 = add(add_first_axis(conv_transpose3d(e2, w.u1_k, 2, 1, 1), w.u1_b), e1);
  u1 = relu(add_first_axis(conv3d(relu(u1), w.m1_k, 1, 1), w.m1_b));
  Tensor u2 = add(add_first_axis(conv_transpose3d(u1, w.u2_k, 2, 1, 1), w.u2_b), e0);
  u2 = relu(add_first_axis(conv3d(relu(u2), w.m2_k, 1, 1), w.m2_b));
  Tensor up = relu(add_first_axis(conv_transpose3d(u2, w.up_k, 2, 1, 1), w.up_b));
  return add_first_axis(conv3d(up, w.head_k, 1, 0), w.head_b);
}

// ---------------------------------------------------------------------------
// losses

struct LossWeights {
  double ce = 1.0, sem = 1.0, geo = 1.0;

  void validate() const {
    if (ce < 0 || sem < 0 || geo < 0)
      throw std::invalid_argument("loss weights must be nonnegative");
  }
};

struct DepthTarget {
  std::vector<double> depth;   // [H_f * W_f], meters
  std::vector<uint8_t> valid;  // same length
};

// Mean over valid pixels of per-bin BCE between the softmaxed depth profile
// and the one-hot nearest-bin target. No valid pixels -> 0 with a flag.
inline Tensor depth_loss(const Tensor& v_ens_logits, const DepthTarget& target,
                         const DepthBins& bins, bool* no_valid_warning = nullptr) {
  int64_t d = v_ens_logits.extent(0);
  int64_t hw = v_ens_logits.extent(1) * v_ens_logits.extent(2);
  if (static_cast<int64_t>(target.depth.size()) != hw)
    throw std::invalid_argument("depth_loss: target size mismatch");
  int64_t n_valid = 0;
  std::vector<double> onehot(static_cast<size_t>(d * hw), 0.0);
  std::vector<double> mask(static_cast<size_t>(d * hw), 0.0);
  for (int64_t p = 0; p < hw; ++p) {
    if (!target.valid[static_cast<size_t>(p)]) continue;
    ++n_valid;
    int64_t bin = bins.nearest_bin(target.depth[static_cast<size_t>(p)]);
    onehot[static_cast<size_t>(bin * hw + p)] = 1.0;
    for (int64_t k = 0; k < d; ++k) mask[static_cast<size_t>(k * hw + p)] = 1.0;
  }
  if (no_valid_warning) *no_valid_warning = n_valid == 0;
  if (n_valid == 0) return Tensor::scalar(0.0);
  Tensor p = softmax_along(v_ens_logits, 0);
  Tensor t = Tensor::from(p.shape(), std::move(onehot));
  Tensor m = Tensor::from(p.shape(), std::move(mask));
  Tensor one = Tensor::full(p.shape(), 1.0);
  Tensor bce = add(mul(t, log_clamped(p)), mul(sub(one, t), log_clamped(sub(one, p))));
  Tensor masked = mul(m, bce);
  double norm = -1.0 / (static_cast<double>(n_valid) * static_cast<double>(d));
  return scale(sum_all(masked), norm);
}

// Inverse log-frequency class weights from label frequencies of a data split.
inline std::vector<double> inverse_log_frequency_weights(const std::vector<VoxelGrid>& grids,
                                                         int64_t class_count) {
  std::vector<double> counts(static_cast<size_t>(class_count), 0.0);
  double total = 0.0;
  for (const auto& g : grids)
    for (size_t i = 0; i < g.labels.size(); ++i)
      if (!g.invalid_mask[i]) {
        counts[g.labels[i]] += 1.0;
        total += 1.0;
      }
  std::vector<double> wts(static_cast<size_t>(class_count));
  for (size_t c = 0; c < wts.size(); ++c) {
    double freq = total > 0.0 ? counts[c] / total : 0.0;
    wts[c] = 1.0 / std::log(1.02 + freq);
  }
  return wts;
}

// class_logits: [M+1, H, W, Z]. Weighted cross-entropy over valid voxels,
// normalized by the summed weights of the counted voxels.
inline Tensor class_weighted_ce(const Tensor& class_logits, const VoxelGrid& gt,
                                const std::vector<double>& class_weights,
                                bool* all_invalid_warning = nullptr) {
  int64_t classes = class_logits.extent(0);
  int64_t n = gt.numel();
  if (class_logits.numel() != classes * n || classes != gt.class_count)
    throw std::invalid_argument("class_weighted_ce: logits do not match the grid");
  std::vector<double> pick(static_cast<size_t>(classes * n), 0.0);
  double weight_sum = 0.0;
  for (int64_t v = 0; v < n; ++v) {
    if (gt.invalid_mask[static_cast<size_t>(v)]) continue;
    int64_t y = gt.labels[static_cast<size_t>(v)];
    double wt = class_weights[static_cast<size_t>(y)];
    pick[static_cast<size_t>(y * n + v)] = wt;
    weight_sum += wt;
  }
  if (all_invalid_warning) *all_invalid_warning = weight_sum == 0.0;
  if (weight_sum == 0.0) return Tensor::scalar(0.0);
  Tensor p = softmax_along(class_logits, 0);
  Tensor w = Tensor::from(p.shape(), std::move(pick));
  return scale(sum_all(mul(w, log_clamped(p))), -1.0 / weight_sum);
}

// Documented surrogate for the semantic/geometry affinity losses: per-class
// soft precision, recall and specificity terms, -log each, averaged over
// non-degenerate classes. L_sem runs over the semantic classes; L_geo over
// the binary occupied/free split.
namespace lossdet {

// soft_mass[c] must give Tensor of per-voxel probability for "class" c.
inline Tensor affinity_loss(const std::vector<Tensor>& class_probs, const VoxelGrid& gt,
                            const std::function<bool(int64_t label, size_t cls)>& is_cls) {
  int64_t n = gt.numel();
  Tensor acc = Tensor::scalar(0.0);
  int64_t terms = 0;
  for (size_t c = 0; c < class_probs.size(); ++c) {
    std::vector<double> in_mask(static_cast<size_t>(n), 0.0), out_mask(static_cast<size_t>(n), 0.0);
    double gt_count = 0.0, out_count = 0.0;
    for (int64_t v = 0; v < n; ++v) {
      if (gt.invalid_mask[static_cast<size_t>(v)]) continue;
      if (is_cls(gt.labels[static_cast<size_t>(v)], c)) {
        in_mask[static_cast<size_t>(v)] = 1.0;
        gt_count += 1.0;
      } else {
        out_mask[static_cast<size_t>(v)] = 1.0;
        out_count += 1.0;
      }
    }
    const Tensor& p = class_probs[c];
    Tensor in_m = Tensor::from(p.shape(), std::move(in_mask));
    Tensor out_m = Tensor::from(p.shape(), std::move(out_mask));
    Tensor tp = sum_all(mul(in_m, p));                      // soft true positives
    Tensor pred_mass = add(tp, sum_all(mul(out_m, p)));     // total predicted mass (valid voxels)
    bool pred_any = pred_mass.item() > 0.0;
    if (gt_count == 0.0 && !pred_any) continue;  // degenerate: absent on both sides
    Tensor zero = Tensor::scalar(0.0);
    Tensor term = zero;
    if (pred_any) term = sub(term, log_clamped(div(tp, pred_mass)));  // precision
    if (gt_count > 0.0)
      term = sub(term, log_clamped(scale(tp, 1.0 / gt_count)));  // recall
    if (out_count > 0.0) {
      Tensor one = Tensor::full(p.shape(), 1.0);
      Tensor tn = sum_all(mul(out_m, sub(one, p)));
      term = sub(term, log_clamped(scale(tn, 1.0 / out_count)));  // specificity
    }
    acc = add(acc, term);
    ++terms;
  }
  return terms > 0 ? scale(acc, 1.0 / static_cast<double>(terms)) : acc;
}

}  // namespace lossdet

struct SemGeoLoss {
  Tensor sem;
  Tensor geo;
};

inline SemGeoLoss sem_geo_losses(const Tensor& class_logits, const VoxelGrid& gt) {
  int64_t classes = class_logits.extent(0);
  Tensor p = softmax_along(class_logits, 0);
  auto slices = split_first_axis(p, std::vector<int64_t>(static_cast<size_t>(classes), 1));
  // semantic: one term per semantic class (free excluded)
  std::vector<Tensor> sem_probs;
  for (int64_t c = 1; c < classes; ++c) sem_probs.push_back(slices[static_cast<size_t>(c)]);
  Tensor l_sem = lossdet::affinity_loss(
      sem_probs, gt, [](int64_t label, size_t cls) { return label == static_cast<int64_t>(cls) + 1; });
  // geometry: binary occupancy (any semantic class vs free)
  Tensor occupied = slices[1];
  for (int64_t c = 2; c < classes; ++c) occupied = add(occupied, slices[static_cast<size_t>(c)]);
  Tensor l_geo = lossdet::affinity_loss({occupied}, gt,
                                        [](int64_t label, size_t) { return label > 0; });
  return {l_sem, l_geo};
}

inline Tensor total_loss(const Tensor& l_depth, const Tensor& l_ce, const Tensor& l_sem,
                         const Tensor& l_geo, const LossWeights& lw) {
  lw.validate();
  Tensor t = l_depth;
  t = add(t, scale(l_ce, lw.ce));
  t = add(t, scale(l_sem, lw.sem));
  t = add(t, scale(l_geo, lw.geo));
  return t;
}

// ---------------------------------------------------------------------------
// metrics

struct IouReport {
  double iou = 0.0;                 // scene completion, binary occupancy
  std::vector<double> per_class;    // semantic classes 1..M; -1 = absent everywhere
  double miou = 0.0;                // unweighted mean over non-absent classes
};

// Classes absent from both prediction and ground truth are excluded from the
// mean; classes present in GT but never predicted score 0.
inline double aggregate_miou(const std::vector<double>& per_class) {
  double sum = 0.0;
  int64_t n = 0;
  for (double v : per_class)
    if (v >= 0.0) {
      sum += v;
      ++n;
    }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

inline IouReport compute_iou(const VoxelGrid& pred, const VoxelGrid& gt) {
  if (pred.h != gt.h || pred.w != gt.w || pred.z != gt.z || pred.class_count != gt.class_count)
    throw std::invalid_argument("compute_iou: grid shapes differ");
  int64_t m = gt.class_count - 1;
  std::vector<int64_t> tp(static_cast<size_t>(m), 0), fp(static_cast<size_t>(m), 0),
      fn(static_cast<size_t>(m), 0);
  int64_t occ_tp = 0, occ_fp = 0, occ_fn = 0;
  for (int64_t v = 0; v < gt.numel(); ++v) {
    if (gt.invalid_mask[static_cast<size_t>(v)]) continue;
    int64_t p = pred.labels[static_cast<size_t>(v)];
    int64_t y = gt.labels[static_cast<size_t>(v)];
    bool po = p > 0, yo = y > 0;
    if (po && yo) ++occ_tp;
    if (po && !yo) ++occ_fp;
    if (!po && yo) ++occ_fn;
    for (int64_t c = 1; c <= m; ++c) {
      if (p == c && y == c) ++tp[static_cast<size_t>(c - 1)];
      if (p == c && y != c) ++fp[static_cast<size_t>(c - 1)];
      if (p != c && y == c) ++fn[static_cast<size_t>(c - 1)];
    }
  }
  IouReport r;
  int64_t occ_union = occ_tp + occ_fp + occ_fn;
  r.iou = occ_union > 0 ? static_cast<double>(occ_tp) / static_cast<double>(occ_union) : 1.0;
  for (int64_t c = 0; c < m; ++c) {
    int64_t u = tp[static_cast<size_t>(c)] + fp[static_cast<size_t>(c)] + fn[static_cast<size_t>(c)];
    r.per_class.push_back(u > 0 ? static_cast<double>(tp[static_cast<size_t>(c)]) / static_cast<double>(u)
                                : -1.0);
  }
  r.miou = aggregate_miou(r.per_class);
  return r;
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  AdamW(ParamStore& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
    for (auto& [n, t] : params.all()) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }

  // Consumes the gradients: every used grad buffer is cleared in the same
  // pass, so a separate zero_grads() sweep per step is unnecessary.
  void step() {
    ++t_;
    double inv_bc1 = 1.0 / (1.0 - std::pow(cfg_.beta1, t_));
    double inv_bc2 = 1.0 / (1.0 - std::pow(cfg_.beta2, t_));
    size_t pi = 0;
    for (auto& [name, p] : params_->all()) {
      auto& m = m_[pi];
      auto& v = v_[pi];
      ++pi;
      if (!p.has_grad()) continue;
      auto& g = p.grad();
      double* mp = m.data();
      double* vp = v.data();
      double* gp = g.data();
      for (int64_t i = 0; i < p.numel(); ++i) {
        size_t ii = static_cast<size_t>(i);
        m[ii] = cfg_.beta1 * mp[ii] + (1.0 - cfg_.beta1) * gp[ii];
        v[ii] = cfg_.beta2 * vp[ii] + (1.0 - cfg_.beta2) * gp[ii] * gp[ii];
        gp[ii] = 0.0;
        double mhat = mp[ii] * inv_bc1;
        double vhat = vp[ii] * inv_bc2;
        p[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  ParamStore* params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace brg
