#pragma once

// End-to-end pipeline: model assembly, forward pass, loss composition and
// the training loop with a CSV step log.

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "brg/bev.hpp"
#include "brg/camera.hpp"
#include "brg/config.hpp"
#include "brg/mie.hpp"
#include "brg/params.hpp"
#include "brg/scene.hpp"
#include "brg/ssc.hpp"
#include "brg/stereo.hpp"

namespace brg {

struct PipelineConfig {
  int64_t image_h = 64, image_w = 64;
  int64_t downscale = 4;
  int64_t n_c = 16;              // unary feature channels
  int64_t n_g = 4;               // correlation groups
  int64_t max_disparity = 16;    // feature px
  int64_t d_max = 8;             // depth bins
  double depth_min = 1.0, depth_max = 5.0;
  int64_t grid_h = 16, grid_w = 16, grid_z = 8;
  int64_t class_count = 5;       // M+1
  int64_t c_b = 16;              // BEV context channels
  int64_t c_f = 16;              // MIE fused channels
  int64_t se_reduction = 4;
  int64_t e_embed = 32;          // camera-parameter embedding width
  int64_t num_hourglasses = 3;
  int64_t unet_base = 16;
  bool use_mie = true;           // false = naive-average ablation arm
  // camera
  double fu = 64.0, fv = 64.0, cu = 32.0, cv = 32.0, baseline = 0.5;
  // training
  double lr = 1e-4;
  double weight_decay = 0.01;
  LossWeights loss_weights;
  uint64_t seed = 1;

  static PipelineConfig from_config(const Config& c) {
    PipelineConfig p;
    p.image_h = c.get_int("image_h", p.image_h);
    p.image_w = c.get_int("image_w", p.image_w);
    p.downscale = c.get_int("downscale", p.downscale);
    p.n_c = c.get_int("n_c", p.n_c);
    p.n_g = c.get_int("n_g", p.n_g);
    p.max_disparity = c.get_int("max_disparity", p.max_disparity);
    p.d_max = c.get_int("d_max", p.d_max);
    p.depth_min = c.get_double("depth_min", p.depth_min);
    p.depth_max = c.get_double("depth_max", p.depth_max);
    p.grid_h = c.get_int("grid_h", p.grid_h);
    p.grid_w = c.get_int("grid_w", p.grid_w);
    p.grid_z = c.get_int("grid_z", p.grid_z);
    p.class_count = c.get_int("class_count", p.class_count);
    p.c_b = c.get_int("c_b", p.c_b);
    p.c_f = c.get_int("c_f", p.c_f);
    p.se_reduction = c.get_int("se_reduction", p.se_reduction);
    p.e_embed = c.get_int("e_embed", p.e_embed);
    p.num_hourglasses = c.get_int("num_hourglasses", p.num_hourglasses);
    p.unet_base = c.get_int("unet_base", p.unet_base);
    p.use_mie = c.get_int("use_mie", 1) != 0;
    p.fu = c.get_double("fu", p.fu);
    p.fv = c.get_double("fv", p.fv);
    p.cu = c.get_double("cu", p.cu);
    p.cv = c.get_double("cv", p.cv);
    p.baseline = c.get_double("baseline", p.baseline);
    p.lr = c.get_double("lr", p.lr);
    p.weight_decay = c.get_double("weight_decay", p.weight_decay);
    p.loss_weights.ce = c.get_double("lambda_ce", 1.0);
    p.loss_weights.sem = c.get_double("lambda_sem", 1.0);
    p.loss_weights.geo = c.get_double("lambda_geo", 1.0);
    p.seed = static_cast<uint64_t>(c.get_int("seed", 1));
    return p;
  }

  CameraRig rig() const {
    CameraRig r;
    r.left.fu = r.right.fu = fu;
    r.left.fv = r.right.fv = fv;
    r.left.cu = r.right.cu = cu;
    r.left.cv = r.right.cv = cv;
    r.baseline = baseline;
    r.validate();
    return r;
  }

  DepthBins bins() const { return {depth_min, depth_max, d_max}; }

  void validate() const {
    if (image_h % downscale || image_w % downscale)
      throw std::invalid_argument("pipeline: image extents must be divisible by the downscale");
    if (image_h / downscale != grid_h || image_w / downscale != grid_w)
      throw std::invalid_argument("pipeline: feature extents must match the grid footprint");
    if (grid_z != d_max)
      throw std::invalid_argument("pipeline: grid_z must equal the depth bin count");
    if (d_max % 2 || grid_h % 4 || grid_w % 4)
      throw std::invalid_argument("pipeline: grid extents incompatible with the completion head");
    if (class_count < 2) throw std::invalid_argument("pipeline: need at least one semantic class");
    loss_weights.validate();
  }
};

struct Model {
  PipelineConfig cfg;
  ParamStore params;
  StereoWeights stereo;
  BevWeights bev;
  MieWeights mie;
  Unet3dWeights unet;

  explicit Model(const PipelineConfig& c) : cfg(c), params(c.seed) {
    cfg.validate();
    GwcConfig gwc{cfg.n_g, cfg.max_disparity};
    stereo = StereoWeights::create(params, "stereo", cfg.n_c, gwc, cfg.num_hourglasses);
    bev = BevWeights::create(params, "bev", cfg.n_c, cfg.c_b, cfg.d_max, cfg.e_embed);
    mie = MieWeights::create(params, "mie", cfg.d_max, cfg.c_f, cfg.se_reduction);
    unet = Unet3dWeights::create(params, "unet", cfg.c_b, cfg.unet_base, cfg.class_count);
  }
};

struct ForwardOutput {
  StereoVolume stereo;     // [D, H_f, W_f] logits
  BevVolume bev;           // latent logits + context
  Tensor v_ens;            // fused depth logits [D, H_f, W_f]
  Tensor class_logits;     // [M+1, grid_h, grid_w, grid_z]
  ConfidenceMap confidence;
};

inline Tensor image_tensor(const std::vector<double>& img, int64_t h, int64_t w) {
  return Tensor::from({1, h, w}, img);
}

inline ForwardOutput forward(const Model& m, const std::vector<double>& left,
                             const std::vector<double>& right) {
  const PipelineConfig& cfg = m.cfg;
  CameraRig rig = cfg.rig();
  DepthBins bins = cfg.bins();
  Tensor li = image_tensor(left, cfg.image_h, cfg.image_w);
  Tensor ri = image_tensor(right, cfg.image_h, cfg.image_w);
  UnaryFeatures f = extract_unary(li, ri, m.stereo.encoder);
  ForwardOutput out;
  out.stereo = build_stereo_volume(f, rig, bins, m.stereo);
  out.bev = build_bev_volume(f.left, rig, m.bev);
  out.confidence = wta_confidence(out.stereo);
  out.v_ens = cfg.use_mie ? mie_forward(out.stereo, out.bev.latent, m.mie)
                          : naive_volume_average(out.stereo, out.bev.latent);
  Tensor f_vox = lift(out.bev.context, out.v_ens);
  Tensor pooled = avg_pool3d_2x(f_vox);
  Tensor head = unet3d_head(pooled, m.unet);  // [M+1, z, h, w] at grid scale
  out.class_logits = permute(head, {0, 2, 3, 1});  // -> [M+1, h, w, z]
  return out;
}

// Nearest-depth target at feature resolution: sample the rendered depth map
// at the center pixel of each downscale x downscale block.
inline DepthTarget depth_target_from_sample(const SceneSample& s, const PipelineConfig& cfg) {
  DepthTarget t;
  int64_t hf = cfg.image_h / cfg.downscale, wf = cfg.image_w / cfg.downscale;
  t.depth.resize(static_cast<size_t>(hf * wf));
  t.valid.resize(static_cast<size_t>(hf * wf));
  for (int64_t y = 0; y < hf; ++y)
    for (int64_t x = 0; x < wf; ++x) {
      int64_t sy = y * cfg.downscale + cfg.downscale / 2;
      int64_t sx = x * cfg.downscale + cfg.downscale / 2;
      double d = s.depth[static_cast<size_t>(sy * cfg.image_w + sx)];
      size_t i = static_cast<size_t>(y * wf + x);
      t.depth[i] = d;
      t.valid[i] = d > 0.0 && d >= cfg.depth_min && d <= cfg.depth_max;
    }
  return t;
}

struct LossBreakdown {
  Tensor total, depth, ce, sem, geo;
};

inline LossBreakdown compute_losses(const ForwardOutput& out, const SceneSample& sample,
                                    const Model& m, const std::vector<double>& class_weights) {
  LossBreakdown lb;
  DepthTarget dt = depth_target_from_sample(sample, m.cfg);
  lb.depth = depth_loss(out.v_ens, dt, m.cfg.bins());
  lb.ce = class_weighted_ce(out.class_logits, sample.gt_grid, class_weights);
  SemGeoLoss sg = sem_geo_losses(out.class_logits, sample.gt_grid);
  lb.sem = sg.sem;
  lb.geo = sg.geo;
  lb.total = total_loss(lb.depth, lb.ce, lb.sem, lb.geo, m.cfg.loss_weights);
  return lb;
}

inline VoxelGrid predict_grid(const Tensor& class_logits, const PipelineConfig& cfg) {
  VoxelGrid g = VoxelGrid::make(cfg.grid_h, cfg.grid_w, cfg.grid_z, cfg.class_count);
  int64_t n = g.numel();
  for (int64_t v = 0; v < n; ++v) {
    int64_t best = 0;
    double bv = class_logits[v];
    for (int64_t c = 1; c < cfg.class_count; ++c)
      if (class_logits[c * n + v] > bv) {
        bv = class_logits[c * n + v];
        best = c;
      }
    g.labels[static_cast<size_t>(v)] = static_cast<uint16_t>(best);
  }
  return g;
}

// One optimization step. A non-finite loss aborts with a diagnostic dump of
// the intermediate volume norms. Zero learning rate leaves weights bitwise
// unchanged (AdamW multiplies every update term, including weight decay, by
// the learning rate).
inline double train_step(Model& m, AdamW& opt, const SceneSample& sample,
                         const std::vector<double>& class_weights,
                         LossBreakdown* breakdown = nullptr) {
  // no zero_grads here: AdamW::step clears the param grads it consumes, and
  // activation nodes are fresh every step
  ForwardOutput out = forward(m, sample.left, sample.right);
  LossBreakdown lb = compute_losses(out, sample, m, class_weights);
  double loss = lb.total.item();
  if (!std::isfinite(loss)) {
    auto norm = [](const Tensor& t) {
      double s = 0.0;
      for (int64_t i = 0; i < t.numel(); ++i) s += t[i] * t[i];
      return std::sqrt(s);
    };
    std::ostringstream msg;
    msg << "non-finite loss " << loss << "; volume norms: stereo=" << norm(out.stereo.data)
        << " bev_latent=" << norm(out.bev.latent) << " bev_context=" << norm(out.bev.context)
        << " v_ens=" << norm(out.v_ens) << " class_logits=" << norm(out.class_logits);
    throw std::runtime_error(msg.str());
  }
  backward(lb.total);
  opt.step();
  if (breakdown) *breakdown = lb;
  return loss;
}

struct TrainResult {
  std::vector<double> losses;
  double final_loss = 0.0;
};

inline TrainResult train(Model& m, const std::vector<SceneSample>& samples, int64_t steps,
                         const std::string& csv_log_path = "") {
  std::vector<VoxelGrid> grids;
  for (const auto& s : samples) grids.push_back(s.gt_grid);
  std::vector<double> cw = inverse_log_frequency_weights(grids, m.cfg.class_count);
  AdamWConfig oc;
  oc.lr = m.cfg.lr;
  oc.weight_decay = m.cfg.weight_decay;
  AdamW opt(m.params, oc);
  std::ofstream csv;
  if (!csv_log_path.empty()) {
    csv.open(csv_log_path);
    if (!csv) throw std::runtime_error("cannot open CSV log: " + csv_log_path);
    csv << "step,loss,l_depth,l_ce,l_sem,l_geo\n";
  }
  TrainResult r;
  for (int64_t step = 0; step < steps; ++step) {
    const SceneSample& s = samples[static_cast<size_t>(step) % samples.size()];
    LossBreakdown lb;
    double loss = train_step(m, opt, s, cw, &lb);
    r.losses.push_back(loss);
    if (csv.is_open())
      csv << step << "," << std::setprecision(17) << loss << "," << lb.depth.item() << ","
          << lb.ce.item() << "," << lb.sem.item() << "," << lb.geo.item() << "\n";
  }
  r.final_loss = r.losses.empty() ? 0.0 : r.losses.back();
  return r;
}

}  // namespace brg
