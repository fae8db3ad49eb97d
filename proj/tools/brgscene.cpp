// brgscene: command-line front end for the scene-completion pipeline.
// Subcommands: synth, forward, train, eval, selftest.
// Exit codes: 0 success, 1 failure, 2 usage error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "brg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace brg;

namespace {

PipelineConfig load_pipeline_config(const std::string& path) {
  if (path.empty()) return PipelineConfig{};
  PipelineConfig p = PipelineConfig::from_config(Config::load(path));
  p.validate();
  return p;
}

std::string sample_prefix(const std::string& dir, int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%06lld", static_cast<long long>(index));
  return (fs::path(dir) / buf).string();
}

std::map<uint16_t, uint16_t> identity_remap(int64_t class_count) {
  std::map<uint16_t, uint16_t> remap;
  for (int64_t c = 0; c < class_count; ++c)
    remap[static_cast<uint16_t>(c)] = static_cast<uint16_t>(c);
  return remap;
}

SceneSpec scene_spec_for(const PipelineConfig& cfg, uint64_t seed) {
  SceneSpec spec = make_scene_spec(seed, cfg.class_count);
  spec.image_h = cfg.image_h;
  spec.image_w = cfg.image_w;
  spec.grid_h = cfg.grid_h;
  spec.grid_w = cfg.grid_w;
  spec.grid_z = cfg.grid_z;
  return spec;
}

void write_sample(const std::string& prefix, const SceneSample& s, const PipelineConfig& cfg) {
  vol_write(prefix + "_left.vol", Tensor::from({cfg.image_h, cfg.image_w}, s.left));
  vol_write(prefix + "_right.vol", Tensor::from({cfg.image_h, cfg.image_w}, s.right));
  vol_write(prefix + "_depth.vol", Tensor::from({cfg.image_h, cfg.image_w}, s.depth));
  write_voxel_labels(prefix + ".label", s.gt_grid);
  write_invalid_mask(prefix + ".invalid", s.gt_grid);
}

SceneSample read_sample(const std::string& prefix, const PipelineConfig& cfg) {
  SceneSample s;
  Tensor left = vol_read(prefix + "_left.vol");
  Tensor right = vol_read(prefix + "_right.vol");
  Tensor depth = vol_read(prefix + "_depth.vol");
  if (left.shape() != Shape{cfg.image_h, cfg.image_w} || left.shape() != right.shape() ||
      left.shape() != depth.shape())
    throw std::runtime_error("sample " + prefix + ": image extents do not match the config");
  s.left = left.values();
  s.right = right.values();
  s.depth = depth.values();
  s.gt_grid = read_voxel_labels(prefix + ".label", cfg.grid_h, cfg.grid_w, cfg.grid_z,
                                cfg.class_count, identity_remap(cfg.class_count),
                                prefix + ".invalid");
  return s;
}

std::vector<std::string> find_sample_prefixes(const std::string& dir) {
  std::vector<std::string> prefixes;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string name = e.path().filename().string();
    const std::string tail = "_left.vol";
    if (name.size() > tail.size() && name.compare(name.size() - tail.size(), tail.size(), tail) == 0)
      prefixes.push_back((e.path().parent_path() / name.substr(0, name.size() - tail.size())).string());
  }
  std::sort(prefixes.begin(), prefixes.end());
  if (prefixes.empty()) throw std::runtime_error("no *_left.vol samples found in " + dir);
  return prefixes;
}

int cmd_synth(const std::string& config, const std::string& out, int64_t count, uint64_t seed) {
  PipelineConfig cfg = load_pipeline_config(config);
  fs::create_directories(out);
  CameraRig rig = cfg.rig();
  for (int64_t i = 0; i < count; ++i) {
    uint64_t s = seed + static_cast<uint64_t>(i);
    SceneSample sample = render_scene(scene_spec_for(cfg, s), rig, s);
    write_sample(sample_prefix(out, i), sample, cfg);
  }
  std::cout << "wrote " << count << " samples to " << out << "\n";
  return 0;
}

int cmd_forward(const std::string& config, const std::string& weights, const std::string& sample,
                const std::string& dump) {
  PipelineConfig cfg = load_pipeline_config(config);
  Model m(cfg);
  if (!weights.empty()) m.params.load(weights);
  SceneSample s = read_sample(sample, cfg);
  ForwardOutput out = forward(m, s.left, s.right);
  fs::create_directories(dump);
  fs::path d(dump);
  // every dump is keyed by the sample name so one directory can hold the
  // outputs for a whole sample set (and feed eval --pred directly)
  std::string base = fs::path(sample).filename().string();
  auto at = [&](const std::string& suffix) { return (d / (base + suffix)).string(); };
  vol_write(at("_v_stereo.vol"), out.stereo.data);
  vol_write(at("_v_bev_latent.vol"), out.bev.latent);
  vol_write(at("_v_bev_context.vol"), out.bev.context);
  vol_write(at("_c_s.vol"), out.confidence.values);
  vol_write(at("_v_ens.vol"), out.v_ens);
  vol_write(at("_class_logits.vol"), out.class_logits);
  write_voxel_labels(at(".label"), predict_grid(out.class_logits, cfg));

  // PGM slices: expected depth under the fused distribution (normalized to
  // the bin range) and the stereo confidence map
  DepthBins bins = cfg.bins();
  Tensor prob = softmax_along(out.v_ens, 0);
  int64_t hf = cfg.grid_h, wf = cfg.grid_w;
  std::vector<double> depth_img(static_cast<size_t>(hf * wf), 0.0);
  for (int64_t p = 0; p < hf * wf; ++p) {
    double z = 0.0;
    for (int64_t k = 0; k < cfg.d_max; ++k) z += prob[k * hf * wf + p] * bins.center(k);
    depth_img[static_cast<size_t>(p)] = (z - bins.d_min) / (bins.d_max - bins.d_min);
  }
  write_pgm(at("_depth.pgm"), depth_img, hf, wf);
  write_pgm(at("_confidence.pgm"), out.confidence.values.values(), hf, wf);
  std::cout << "dumped forward volumes to " << dump << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, int64_t steps,
              const std::string& out) {
  PipelineConfig cfg = load_pipeline_config(config);
  std::vector<SceneSample> samples;
  for (const auto& p : find_sample_prefixes(data)) samples.push_back(read_sample(p, cfg));
  Model m(cfg);
  fs::create_directories(out);
  TrainResult r = train(m, samples, steps, (fs::path(out) / "train_log.csv").string());
  m.params.save(out);
  std::cout << "trained " << steps << " steps on " << samples.size()
            << " samples; final loss " << r.final_loss << "\n";
  return 0;
}

int cmd_eval(const std::string& config, const std::string& pred_dir, const std::string& gt_dir,
             const std::string& report) {
  PipelineConfig cfg = load_pipeline_config(config);
  auto remap = identity_remap(cfg.class_count);

  std::vector<fs::path> gt_files;
  for (const auto& e : fs::directory_iterator(gt_dir))
    if (e.path().extension() == ".label") gt_files.push_back(e.path());
  std::sort(gt_files.begin(), gt_files.end());
  if (gt_files.empty()) throw std::runtime_error("no .label files found in " + gt_dir);

  // pool the confusion counts over all scenes by stacking the grids
  int64_t n_scenes = static_cast<int64_t>(gt_files.size());
  VoxelGrid gt_all = VoxelGrid::make(cfg.grid_h * n_scenes, cfg.grid_w, cfg.grid_z,
                                     cfg.class_count);
  VoxelGrid pr_all = VoxelGrid::make(cfg.grid_h * n_scenes, cfg.grid_w, cfg.grid_z,
                                     cfg.class_count);
  int64_t per = cfg.grid_h * cfg.grid_w * cfg.grid_z;
  for (int64_t i = 0; i < n_scenes; ++i) {
    const fs::path& gp = gt_files[static_cast<size_t>(i)];
    fs::path pp = fs::path(pred_dir) / gp.filename();
    if (!fs::exists(pp)) throw std::runtime_error("missing prediction file: " + pp.string());
    std::string gi = gp.string();
    gi.replace(gi.size() - 6, 6, ".invalid");
    VoxelGrid g = read_voxel_labels(gp.string(), cfg.grid_h, cfg.grid_w, cfg.grid_z,
                                    cfg.class_count, remap, fs::exists(gi) ? gi : "");
    VoxelGrid p = read_voxel_labels(pp.string(), cfg.grid_h, cfg.grid_w, cfg.grid_z,
                                    cfg.class_count, remap);
    std::copy(g.labels.begin(), g.labels.end(), gt_all.labels.begin() + i * per);
    std::copy(g.invalid_mask.begin(), g.invalid_mask.end(), gt_all.invalid_mask.begin() + i * per);
    std::copy(p.labels.begin(), p.labels.end(), pr_all.labels.begin() + i * per);
  }
  IouReport r = compute_iou(pr_all, gt_all);

  std::ofstream csv(report + ".csv");
  if (!csv) throw std::runtime_error("cannot open report: " + report + ".csv");
  csv << "class,iou\n";
  for (size_t c = 0; c < r.per_class.size(); ++c)
    csv << (c + 1) << "," << r.per_class[c] << "\n";

  std::ofstream json(report + ".json");
  if (!json) throw std::runtime_error("cannot open report: " + report + ".json");
  json << "{\"iou\": " << r.iou << ", \"miou\": " << r.miou << "}\n";
  std::cout << "iou " << r.iou << " miou " << r.miou << " over " << n_scenes << " scenes\n";
  return 0;
}

// Fast invariant battery: oracles that must hold on any correct build.
int cmd_selftest() {
  int failures = 0;
  auto check = [&](bool ok, const char* what) {
    std::cout << (ok ? "pass" : "FAIL") << ": " << what << "\n";
    if (!ok) ++failures;
  };
  Rng rng(1234);

  {  // linear attention equals the quadratic form
    double worst = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
      int64_t n = 2 + static_cast<int64_t>(rng.next_u64() % 15);
      int64_t mm = 2 + static_cast<int64_t>(rng.next_u64() % 15);
      int64_t d = 2 + static_cast<int64_t>(rng.next_u64() % 15);
      Tensor q = random_uniform({n, d}, -2.0, 2.0, rng);
      Tensor k = random_uniform({mm, d}, -2.0, 2.0, rng);
      Tensor v = random_uniform({mm, d}, -2.0, 2.0, rng);
      Tensor out = linear_cross_attention(q, k, v);
      Tensor pq = softmax_along(q, 1);
      Tensor pk = softmax_along(k, 0);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < d; ++c) {
          double acc = 0.0;
          for (int64_t j = 0; j < mm; ++j) {
            double a = 0.0;
            for (int64_t t = 0; t < d; ++t) a += pq[i * d + t] * pk[j * d + t];
            acc += a * v[j * d + c];
          }
          worst = std::max(worst, std::abs(acc - out[i * d + c]));
        }
    }
    check(worst <= 1e-10, "linear cross-attention matches the quadratic oracle");
  }

  {  // disparity/depth round trip
    CameraRig rig;
    rig.left = rig.right = CameraIntrinsics{64.0, 64.0, 32.0, 32.0};
    rig.baseline = 0.5;
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      double d = 0.1 + 20.0 * rng.next_unit();
      worst = std::max(worst, std::abs(depth_to_disparity(disparity_to_depth(d, rig), rig) - d));
    }
    check(worst <= 1e-12, "disparity-depth round trip");
  }

  {  // confidence bounds and gating
    Tensor vol = random_uniform({8, 4, 4}, -4.0, 4.0, rng);
    ConfidenceMap c = wta_confidence({vol});
    bool ok = true;
    for (int64_t i = 0; i < 16; ++i) ok = ok && c.values[i] >= 1.0 / 8.0 && c.values[i] <= 1.0;
    Tensor q = random_uniform({6, 4}, -1.0, 1.0, rng);
    Tensor k = random_uniform({5, 4}, -1.0, 1.0, rng);
    Tensor v = random_uniform({5, 4}, -1.0, 1.0, rng);
    Tensor ones = Tensor::full({6}, 1.0);
    Tensor halves = Tensor::full({6}, 0.5);
    Tensor plain = linear_cross_attention(q, k, v);
    Tensor g1 = filtered_cross_attention(q, k, v, ones);
    Tensor gh = filtered_cross_attention(q, k, v, halves);
    for (int64_t i = 0; i < plain.numel(); ++i) {
      ok = ok && std::abs(g1[i] - plain[i]) <= 1e-12;
      ok = ok && std::abs(gh[i] - 0.5 * plain[i]) <= 1e-12;
    }
    check(ok, "confidence bounds and attention gating");
  }

  {  // lift conservation: summing F_vox over depth recovers the context
    Tensor ctx = random_uniform({5, 3, 4}, -1.0, 1.0, rng);
    Tensor logits = random_uniform({6, 3, 4}, -2.0, 2.0, rng);
    Tensor f = lift(ctx, logits);
    double worst = 0.0;
    for (int64_t c = 0; c < 5; ++c)
      for (int64_t p = 0; p < 12; ++p) {
        double s = 0.0;
        for (int64_t d = 0; d < 6; ++d) s += f[(c * 6 + d) * 12 + p];
        worst = std::max(worst, std::abs(s - ctx[c * 12 + p]));
      }
    check(worst <= 1e-12, "outer-product lift conserves the context");
  }

  {  // forward determinism on a reduced scene
    PipelineConfig cfg;
    cfg.image_h = cfg.image_w = 32;
    cfg.grid_h = cfg.grid_w = 8;
    cfg.grid_z = cfg.d_max = 8;
    cfg.max_disparity = 8;
    cfg.n_c = 8;
    cfg.n_g = 2;
    cfg.c_b = 8;
    cfg.c_f = 8;
    cfg.se_reduction = 2;
    cfg.e_embed = 8;
    cfg.num_hourglasses = 1;
    cfg.unet_base = 4;
    cfg.fu = cfg.fv = 32.0;
    cfg.cu = cfg.cv = 16.0;
    SceneSample s = render_scene(scene_spec_for(cfg, 7), cfg.rig(), 7);
    Model a(cfg), b(cfg);
    ForwardOutput oa = forward(a, s.left, s.right);
    ForwardOutput ob = forward(b, s.left, s.right);
    check(oa.class_logits.values() == ob.class_logits.values() &&
              oa.v_ens.values() == ob.v_ens.values(),
          "bitwise-deterministic forward pass");
  }

  {  // file round trips
    Tensor t = random_uniform({3, 4}, -5.0, 5.0, rng);
    Tensor back = vol_decode(vol_encode(t));
    bool ok = back.shape() == t.shape();
    for (int64_t i = 0; ok && i < t.numel(); ++i)
      ok = back[i] == static_cast<double>(static_cast<float>(t[i]));
    check(ok, "VOL1 encode/decode round trip");
  }

  std::cout << (failures == 0 ? "selftest passed" : "selftest FAILED") << "\n";
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BRGScene dual-volume semantic scene completion"};
  app.require_subcommand(1);

  std::string config, out_dir, weights, sample, dump, data, pred_dir, gt_dir, report;
  int64_t count = 2, steps = 100;
  uint64_t seed = 1;

  auto* synth = app.add_subcommand("synth", "generate synthetic scene samples");
  synth->add_option("--config", config, "pipeline config file");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--count", count, "number of scenes");
  synth->add_option("--seed", seed, "base seed (scene i uses seed + i)");

  auto* fwd = app.add_subcommand("forward", "run the pipeline on one sample and dump volumes");
  fwd->add_option("--config", config, "pipeline config file");
  fwd->add_option("--weights", weights, "weights directory (fresh init when omitted)");
  fwd->add_option("--sample", sample, "sample prefix (as written by synth)")->required();
  fwd->add_option("--dump", dump, "dump directory")->required();

  auto* tr = app.add_subcommand("train", "train on a sample directory");
  tr->add_option("--config", config, "pipeline config file");
  tr->add_option("--data", data, "sample directory")->required();
  tr->add_option("--steps", steps, "optimization steps");
  tr->add_option("--out", weights, "output weights directory")->required();

  auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
  ev->add_option("--config", config, "pipeline config file");
  ev->add_option("--pred", pred_dir, "prediction label directory")->required();
  ev->add_option("--gt", gt_dir, "ground-truth label directory")->required();
  ev->add_option("--report", report, "report base path (writes .csv and .json)")->required();

  app.add_subcommand("selftest", "run the built-in invariant battery");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(config, out_dir, count, seed);
    if (fwd->parsed()) return cmd_forward(config, weights, sample, dump);
    if (tr->parsed()) return cmd_train(config, data, steps, weights);
    if (ev->parsed()) return cmd_eval(config, pred_dir, gt_dir, report);
    return cmd_selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
