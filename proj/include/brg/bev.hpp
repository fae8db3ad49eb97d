#pragma once

// BEV latent volume constructor: camera-parameter encoding, camera-aware
// features, and the two-branch head (3x3 context branch; residual blocks +
// ASPP latent-depth branch).

#include "brg/camera.hpp"
#include "brg/conv.hpp"
#include "brg/ops.hpp"
#include "brg/params.hpp"

namespace brg {

struct BevVolume {
  Tensor latent;   // [D_max, H_f, W_f] pre-softmax depth logits
  Tensor context;  // [C_b, H_f, W_f]
};

struct ParamEncoderWeights {
  Tensor fc;    // [E, 21]
  Tensor conv;  // [N_c, E, 1, 1]

  static ParamEncoderWeights create(ParamStore& ps, const std::string& prefix, int64_t e,
                                    int64_t n_c) {
    ParamEncoderWeights w;
    w.fc = ps.add(prefix + ".fc", {e, 21}, 21);
    w.conv = ps.add(prefix + ".conv", {n_c, e, 1, 1}, e);
    return w;
  }
};

// P_e = sigmoid(conv(reshape(fc(P_i)))); every entry lands in (0, 1).
inline Tensor encode_params(const Tensor& p_i, const ParamEncoderWeights& w) {
  if (p_i.rank() != 1 || p_i.extent(0) != 21)
    throw std::invalid_argument("encode_params: expected a length-21 parameter vector");
  int64_t e = w.fc.extent(0), n_c = w.conv.extent(0);
  Tensor h = matmul(w.fc, reshape(p_i, {21, 1}));       // [E, 1]
  Tensor c = conv2d(reshape(h, {e, 1, 1}), w.conv, 1, 0);  // [N_c, 1, 1]
  return sigmoid(reshape(c, {n_c}));
}

// out[c,.,.] = P_e[c] * F_l[c,.,.]
inline Tensor camera_aware_features(const Tensor& features, const Tensor& p_e) {
  if (p_e.rank() != 1 || p_e.extent(0) != features.extent(0))
    throw std::invalid_argument("camera_aware_features: channel counts differ");
  return scale_first_axis(features, p_e);
}

struct ResBlock2dWeights {
  Tensor k1, b1, k2, b2;

  static ResBlock2dWeights create(ParamStore& ps, const std::string& prefix, int64_t c) {
    ResBlock2dWeights w;
    w.k1 = ps.add(prefix + ".k1", {c, c, 3, 3}, c * 9);
    w.b1 = ps.add(prefix + ".b1", {c}, 0);
    w.k2 = ps.add(prefix + ".k2", {c, c, 3, 3}, c * 9);
    w.b2 = ps.add(prefix + ".b2", {c}, 0);
    return w;
  }
};

// conv3x3 - ReLU - conv3x3 + skip
inline Tensor res_block2d(const Tensor& x, const ResBlock2dWeights& w) {
  Tensor h = relu(add_first_axis(conv2d(x, w.k1, 1, 1), w.b1));
  h = add_first_axis(conv2d(h, w.k2, 1, 1), w.b2);
  return add(h, x);
}

struct AsppWeights {
  std::vector<Tensor> ks, bs;       // parallel 3x3 convs, one per dilation
  Tensor k1x1, b1x1;                // the 1x1 path
  Tensor fuse_k, fuse_b;            // fused 1x1 to the output channel count
  std::vector<int64_t> dilations;

  static AsppWeights create(ParamStore& ps, const std::string& prefix, int64_t c_in,
                            int64_t c_out, std::vector<int64_t> dilations) {
    AsppWeights w;
    w.dilations = std::move(dilations);
    for (size_t i = 0; i < w.dilations.size(); ++i) {
      w.ks.push_back(ps.add(prefix + ".d" + std::to_string(w.dilations[i]) + "_k",
                            {c_in, c_in, 3, 3}, c_in * 9));
      w.bs.push_back(ps.add(prefix + ".d" + std::to_string(w.dilations[i]) + "_b", {c_in}, 0));
    }
    w.k1x1 = ps.add(prefix + ".p1_k", {c_in, c_in, 1, 1}, c_in);
    w.b1x1 = ps.add(prefix + ".p1_b", {c_in}, 0);
    w.fuse_k = ps.add(prefix + ".fuse_k",
                      {c_out, static_cast<int64_t>(w.dilations.size() + 1) * c_in, 1, 1},
                      static_cast<int64_t>(w.dilations.size() + 1) * c_in);
    w.fuse_b = ps.add(prefix + ".fuse_b", {c_out}, 0);
    return w;
  }
};

// Parallel dilated 3x3 convs plus a 1x1 path, concatenated and fused 1x1.
inline Tensor aspp(const Tensor& x, const AsppWeights& w) {
  std::vector<Tensor> paths;
  for (size_t i = 0; i < w.dilations.size(); ++i) {
    int64_t d = w.dilations[i];
    paths.push_back(relu(add_first_axis(conv2d(x, w.ks[i], 1, d, d), w.bs[i])));
  }
  paths.push_back(relu(add_first_axis(conv2d(x, w.k1x1, 1, 0), w.b1x1)));
  Tensor cat = concat_first_axis(paths);
  return add_first_axis(conv2d(cat, w.fuse_k, 1, 0), w.fuse_b);
}

struct BevWeights {
  ParamEncoderWeights param_enc;
  Tensor ctx_k, ctx_b;  // context branch: one 3x3 conv, N_c -> C_b
  ResBlock2dWeights res1, res2;
  AsppWeights aspp;

  static BevWeights create(ParamStore& ps, const std::string& prefix, int64_t n_c, int64_t c_b,
                           int64_t d_max, int64_t e,
                           std::vector<int64_t> aspp_dilations = {1, 6, 12}) {
    BevWeights w;
    w.param_enc = ParamEncoderWeights::create(ps, prefix + ".penc", e, n_c);
    w.ctx_k = ps.add(prefix + ".ctx_k", {c_b, n_c, 3, 3}, n_c * 9);
    w.ctx_b = ps.add(prefix + ".ctx_b", {c_b}, 0);
    w.res1 = ResBlock2dWeights::create(ps, prefix + ".res1", n_c);
    w.res2 = ResBlock2dWeights::create(ps, prefix + ".res2", n_c);
    w.aspp = AsppWeights::create(ps, prefix + ".aspp", n_c, d_max, std::move(aspp_dilations));
    return w;
  }
};

inline Tensor context_branch(const Tensor& x, const BevWeights& w) {
  return add_first_axis(conv2d(x, w.ctx_k, 1, 1), w.ctx_b);
}

// Two stacked residual blocks followed by ASPP; outputs depth logits.
inline Tensor latent_branch(const Tensor& x, const BevWeights& w) {
  Tensor h = res_block2d(x, w.res1);
  h = res_block2d(h, w.res2);
  return aspp(h, w.aspp);
}

// Latent logits are kept un-normalized; softmax over depth happens exactly
// once in the consumers.
inline BevVolume build_bev_volume(const Tensor& left_features, const CameraRig& rig,
                                  const BevWeights& w) {
  Tensor p_e = encode_params(assemble_params(rig), w.param_enc);
  Tensor aware = camera_aware_features(left_features, p_e);
  return {latent_branch(aware, w), context_branch(aware, w)};
}

}  // namespace brg
