#pragma once

// Mutual Interactive Ensemble: bi-directional reliable interaction (linear
// cross-attention with depth-confidence gating) followed by the dual volume
// ensemble (residual fusion, channel recalibration, multi-group voting).

#include "brg/bev.hpp"
#include "brg/conv.hpp"
#include "brg/ops.hpp"
#include "brg/params.hpp"
#include "brg/stereo.hpp"

namespace brg {

// One token per pixel; the token feature is the depth profile, so a
// [D, H, W] volume becomes [H*W, D]. detokenize(tokenize(v)) == v exactly.
inline Tensor tokenize(const Tensor& v) {
  if (v.rank() != 3) throw std::invalid_argument("tokenize: rank-3 volume required");
  int64_t d = v.extent(0), h = v.extent(1), w = v.extent(2);
  return reshape(permute(v, {1, 2, 0}), {h * w, d});
}

inline Tensor detokenize(const Tensor& tokens, int64_t d, int64_t h, int64_t w) {
  if (tokens.rank() != 2 || tokens.extent(0) != h * w || tokens.extent(1) != d)
    throw std::invalid_argument("detokenize: token shape does not match volume extents");
  return permute(reshape(tokens, {h, w, d}), {2, 0, 1});
}

// out = phi_q(Q) (phi_k(K)^T V): phi_q is softmax along each row, phi_k
// softmax along each column. The d x d global context is formed first, so
// the N x M token-pair matrix is never materialized.
inline Tensor linear_cross_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw std::invalid_argument("linear_cross_attention: rank-2 token matrices required");
  if (q.extent(1) != k.extent(1) || k.extent(0) != v.extent(0) || k.extent(1) != v.extent(1))
    throw std::invalid_argument("linear_cross_attention: token feature widths differ");
  Tensor phi_q = softmax_along(q, 1);
  Tensor phi_k = softmax_along(k, 0);
  Tensor g = matmul(transpose2d(phi_k), v);  // [d, d]
  return matmul(phi_q, g);
}

struct ConfidenceMap {
  Tensor values;  // [H_f, W_f], each in [1/D_max, 1]
};

// C_S = WTA(softmax over depth): per pixel, the maximum depth probability.
inline ConfidenceMap wta_confidence(const StereoVolume& v) {
  if (v.data.rank() != 3) throw std::invalid_argument("wta_confidence: rank-3 volume required");
  return {max_along(softmax_along(v.data, 0), 0)};
}

// Per-query-token scalar gating of the attention output. C has no feature
// axis, so gating the output and gating the phi_q rows are the same map.
inline Tensor filtered_cross_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                       const Tensor& c_flat) {
  if (c_flat.rank() != 1 || c_flat.extent(0) != q.extent(0))
    throw std::invalid_argument("filtered_cross_attention: confidence token count mismatch");
  return scale_first_axis(linear_cross_attention(q, k, v), c_flat);
}

struct BriWeights {
  Tensor q_s, k_s, v_s;  // stereo-side projections, [D, D], no bias
  Tensor q_b, k_b, v_b;  // BEV-side projections

  static BriWeights create(ParamStore& ps, const std::string& prefix, int64_t d) {
    BriWeights w;
    w.q_s = ps.add(prefix + ".q_s", {d, d}, d);
    w.k_s = ps.add(prefix + ".k_s", {d, d}, d);
    w.v_s = ps.add(prefix + ".v_s", {d, d}, d);
    w.q_b = ps.add(prefix + ".q_b", {d, d}, d);
    w.k_b = ps.add(prefix + ".k_b", {d, d}, d);
    w.v_b = ps.add(prefix + ".v_b", {d, d}, d);
    return w;
  }
};

struct BriOutput {
  Tensor stereo;  // V_Stereo' = CrossAtt(Q_B, K_S, V_S)
  Tensor bev;     // V_BEV'    = CrossAtt(Q_S, K_B, V_B), gated by C_S
};

// The stereo-volume confidence gates only the BEV-query direction; the
// stereo' direction is left ungated.
inline BriOutput bri_exchange(const StereoVolume& v_stereo, const Tensor& v_bev,
                              const BriWeights& w) {
  if (v_stereo.data.shape() != v_bev.shape())
    throw std::invalid_argument("bri_exchange: volume shapes differ");
  int64_t d = v_stereo.data.extent(0), h = v_stereo.data.extent(1), wd = v_stereo.data.extent(2);
  Tensor tok_s = tokenize(v_stereo.data);
  Tensor tok_b = tokenize(v_bev);
  Tensor qs = matmul(tok_s, w.q_s), ks = matmul(tok_s, w.k_s), vs = matmul(tok_s, w.v_s);
  Tensor qb = matmul(tok_b, w.q_b), kb = matmul(tok_b, w.k_b), vb = matmul(tok_b, w.v_b);
  Tensor c_s = reshape(wta_confidence(v_stereo).values, {h * wd});
  Tensor bev_out = detokenize(filtered_cross_attention(qs, kb, vb, c_s), d, h, wd);
  Tensor stereo_out = detokenize(linear_cross_attention(qb, ks, vs), d, h, wd);
  return {stereo_out, bev_out};
}

// ---------------------------------------------------------------------------
// dual volume ensemble

// Squeeze-and-excitation: gate = sigmoid(W2 gelu(W1 z)) with z the global
// average channel descriptor; out[c] = gate[c] * x[c].
inline Tensor channel_recalibrate(const Tensor& v_f, const Tensor& w1, const Tensor& w2) {
  int64_t c = v_f.extent(0);
  if (w1.rank() != 2 || w1.extent(1) != c || w2.rank() != 2 || w2.extent(0) != c ||
      w2.extent(1) != w1.extent(0))
    throw std::invalid_argument("channel_recalibrate: bottleneck shapes inconsistent");
  if (c % w1.extent(0) != 0)
    throw std::invalid_argument("channel_recalibrate: reduction must divide the channel count");
  Tensor z = reshape(global_avg_pool(v_f), {c, 1});
  Tensor gate = sigmoid(matmul(w2, gelu(matmul(w1, z))));
  return scale_first_axis(v_f, reshape(gate, {c}));
}

struct VoteWeights {
  std::vector<Tensor> ks, bs;  // four 3x3x3 atrous kernels, one per group
  Tensor point_k, point_b;     // pointwise fusion to 1 channel
  std::vector<int64_t> dilations = {1, 2, 3, 4};
  int64_t norm_groups = 1;

  static VoteWeights create(ParamStore& ps, const std::string& prefix, int64_t c_f,
                            std::vector<int64_t> dilations = {1, 2, 3, 4}) {
    if (c_f % 4 != 0) throw std::invalid_argument("multigroup_vote: C_f must be divisible by 4");
    VoteWeights w;
    w.dilations = std::move(dilations);
    int64_t gc = c_f / 4;
    for (int i = 0; i < 4; ++i) {
      w.ks.push_back(ps.add(prefix + ".g" + std::to_string(i) + "_k", {gc, gc, 3, 3, 3}, gc * 27));
      w.bs.push_back(ps.add(prefix + ".g" + std::to_string(i) + "_b", {gc}, 0));
    }
    w.point_k = ps.add(prefix + ".point_k", {1, c_f, 1, 1, 1}, c_f);
    w.point_b = ps.add(prefix + ".point_b", {1}, 0);
    return w;
  }
};

// Split into four channel groups, 3x3x3 atrous conv per group (pad equal to
// the dilation), concat, then pointwise conv + GELU + group normalization.
inline Tensor multigroup_vote(const Tensor& v_f, const VoteWeights& w) {
  int64_t c = v_f.extent(0);
  if (c % 4 != 0) throw std::invalid_argument("multigroup_vote: channels must be divisible by 4");
  int64_t gc = c / 4;
  auto groups = split_first_axis(v_f, {gc, gc, gc, gc});
  std::vector<Tensor> voted;
  for (int i = 0; i < 4; ++i) {
    int64_t dil = w.dilations[static_cast<size_t>(i)];
    voted.push_back(add_first_axis(conv3d(groups[static_cast<size_t>(i)], w.ks[static_cast<size_t>(i)], 1, dil, dil),
                                   w.bs[static_cast<size_t>(i)]));
  }
  Tensor cat = concat_first_axis(voted);
  Tensor fused = add_first_axis(conv3d(cat, w.point_k, 1, 0), w.point_b);
  return group_norm(gelu(fused), w.norm_groups);
}

struct MieWeights {
  BriWeights bri;
  Tensor fuse_k, fuse_b;  // 3x3x3, 2 -> C_f
  Tensor res_k1, res_b1, res_k2, res_b2;
  Tensor se_w1, se_w2;  // [C_f/r, C_f], [C_f, C_f/r]
  VoteWeights vote;

  static MieWeights create(ParamStore& ps, const std::string& prefix, int64_t d_max, int64_t c_f,
                           int64_t reduction) {
    if (c_f % reduction != 0 || c_f % 4 != 0)
      throw std::invalid_argument("mie: C_f must be divisible by 4 and by the reduction");
    MieWeights w;
    w.bri = BriWeights::create(ps, prefix + ".bri", d_max);
    w.fuse_k = ps.add(prefix + ".fuse_k", {c_f, 2, 3, 3, 3}, 2 * 27);
    w.fuse_b = ps.add(prefix + ".fuse_b", {c_f}, 0);
    w.res_k1 = ps.add(prefix + ".res_k1", {c_f, c_f, 3, 3, 3}, c_f * 27);
    w.res_b1 = ps.add(prefix + ".res_b1", {c_f}, 0);
    w.res_k2 = ps.add(prefix + ".res_k2", {c_f, c_f, 3, 3, 3}, c_f * 27);
    w.res_b2 = ps.add(prefix + ".res_b2", {c_f}, 0);
    w.se_w1 = ps.add(prefix + ".se_w1", {c_f / reduction, c_f}, c_f);
    w.se_w2 = ps.add(prefix + ".se_w2", {c_f, c_f / reduction}, c_f / reduction);
    w.vote = VoteWeights::create(ps, prefix + ".vote", c_f);
    return w;
  }
};

// Full block: BRI exchange, 2-channel concat, residual 3D convs to C_f,
// channel recalibration, multi-group vote; output squeezed to logits.
inline Tensor mie_forward(const StereoVolume& v_stereo, const Tensor& v_bev,
                          const MieWeights& w) {
  BriOutput bri = bri_exchange(v_stereo, v_bev, w.bri);
  int64_t d = v_stereo.data.extent(0), h = v_stereo.data.extent(1), wd = v_stereo.data.extent(2);
  Tensor cat = concat_first_axis({reshape(bri.stereo, {1, d, h, wd}),
                                  reshape(bri.bev, {1, d, h, wd})});
  Tensor v_f = relu(add_first_axis(conv3d(cat, w.fuse_k, 1, 1), w.fuse_b));
  Tensor r = relu(add_first_axis(conv3d(v_f, w.res_k1, 1, 1), w.res_b1));
  r = add_first_axis(conv3d(r, w.res_k2, 1, 1), w.res_b2);
  v_f = add(v_f, r);
  Tensor recal = channel_recalibrate(v_f, w.se_w1, w.se_w2);
  Tensor ens = multigroup_vote(recal, w.vote);
  return reshape(ens, {d, h, wd});
}

// Ablation stand-in used by the mechanism-sanity check: plain averaging of
// the two volumes in place of the MIE block.
inline Tensor naive_volume_average(const StereoVolume& v_stereo, const Tensor& v_bev) {
  return scale(add(v_stereo.data, v_bev), 0.5);
}

}  // namespace brg
