#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "brg/pipeline.hpp"
#include "test_support.hpp"

using namespace brg;

// Reduced geometry so the end-to-end cases stay cheap: 32x32 images over an
// 8x8x8 grid. All divisibility links of the full-size default still hold.
static PipelineConfig small_cfg() {
  PipelineConfig c;
  c.image_h = c.image_w = 32;
  c.grid_h = c.grid_w = 8;
  c.grid_z = c.d_max = 8;
  c.max_disparity = 8;
  c.n_c = 8;
  c.n_g = 2;
  c.c_b = 8;
  c.c_f = 8;
  c.se_reduction = 2;
  c.e_embed = 8;
  c.num_hourglasses = 1;
  c.unet_base = 4;
  c.class_count = 3;
  c.fu = c.fv = 32.0;
  c.cu = c.cv = 16.0;
  return c;
}

static SceneSample small_sample(uint64_t seed, const PipelineConfig& cfg) {
  SceneSpec spec = make_scene_spec(seed, cfg.class_count);
  spec.image_h = cfg.image_h;
  spec.image_w = cfg.image_w;
  spec.grid_h = cfg.grid_h;
  spec.grid_w = cfg.grid_w;
  spec.grid_z = cfg.grid_z;
  return render_scene(spec, cfg.rig(), seed);
}

TEST_CASE("config validation enforces the geometric linkage") {
  PipelineConfig c = small_cfg();
  c.validate();
  c.grid_h = 4;  // image_h / downscale != grid_h
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_cfg();
  c.grid_z = 4;  // != d_max
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_cfg();
  c.image_h = 30;  // not divisible by the downscale
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_cfg();
  c.class_count = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("config file overrides reach the pipeline config") {
  Config file = Config::parse(
      "image_h = 32\nimage_w = 32\ngrid_h = 8\ngrid_w = 8\ngrid_z = 8\nd_max = 8\n"
      "n_c = 8\nlr = 0.002\nlambda_geo = 0.5\nuse_mie = 0\nseed = 9\n");
  PipelineConfig p = PipelineConfig::from_config(file);
  CHECK(p.image_h == 32);
  CHECK(p.grid_h == 8);
  CHECK(p.n_c == 8);
  CHECK(p.lr == 0.002);
  CHECK(p.loss_weights.geo == 0.5);
  CHECK(p.use_mie == false);
  CHECK(p.seed == 9);
  CHECK(p.downscale == 4);  // untouched default
}

TEST_CASE("forward pass produces every advertised volume shape") {
  PipelineConfig cfg = small_cfg();
  Model m(cfg);
  SceneSample s = small_sample(5, cfg);
  ForwardOutput out = forward(m, s.left, s.right);
  CHECK(out.stereo.data.shape() == Shape{8, 8, 8});
  CHECK(out.bev.latent.shape() == Shape{8, 8, 8});
  CHECK(out.bev.context.shape() == Shape{8, 8, 8});
  CHECK(out.v_ens.shape() == Shape{8, 8, 8});
  CHECK(out.confidence.values.shape() == Shape{8, 8});
  CHECK(out.class_logits.shape() == Shape{3, 8, 8, 8});
}

TEST_CASE("forward pass is bitwise deterministic across model rebuilds") {
  PipelineConfig cfg = small_cfg();
  SceneSample s = small_sample(5, cfg);
  Model a(cfg), b(cfg);
  ForwardOutput oa = forward(a, s.left, s.right);
  ForwardOutput ob = forward(b, s.left, s.right);
  CHECK(oa.v_ens.values() == ob.v_ens.values());
  CHECK(oa.class_logits.values() == ob.class_logits.values());
}

TEST_CASE("ablation arm swaps the MIE block for plain averaging") {
  PipelineConfig cfg = small_cfg();
  cfg.use_mie = false;
  Model m(cfg);
  SceneSample s = small_sample(5, cfg);
  ForwardOutput out = forward(m, s.left, s.right);
  for (int64_t i = 0; i < out.v_ens.numel(); ++i)
    CHECK(out.v_ens[i] ==
          doctest::Approx(0.5 * (out.stereo.data[i] + out.bev.latent[i])).epsilon(1e-15));
}

TEST_CASE("depth targets sample block centers and respect the bin range") {
  PipelineConfig cfg = small_cfg();
  SceneSample s = small_sample(5, cfg);
  DepthTarget t = depth_target_from_sample(s, cfg);
  REQUIRE(t.depth.size() == 64u);
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t x = 0; x < 8; ++x) {
      double d = s.depth[(y * 4 + 2) * cfg.image_w + (x * 4 + 2)];
      CHECK(t.depth[y * 8 + x] == d);
      bool expect_valid = d > 0.0 && d >= cfg.depth_min && d <= cfg.depth_max;
      CHECK(static_cast<bool>(t.valid[y * 8 + x]) == expect_valid);
    }
}

TEST_CASE("predicted grid is the per-voxel argmax over class logits") {
  PipelineConfig cfg = small_cfg();
  cfg.class_count = 3;
  Tensor logits = Tensor::zeros({3, 8, 8, 8});
  int64_t n = 8 * 8 * 8;
  logits.values()[0 * n + 0] = 1.0;   // voxel 0 -> class 0
  logits.values()[2 * n + 1] = 3.0;   // voxel 1 -> class 2
  logits.values()[1 * n + 2] = 0.5;   // voxel 2 -> class 1
  VoxelGrid g = predict_grid(logits, cfg);
  CHECK(g.labels[0] == 0);
  CHECK(g.labels[1] == 2);
  CHECK(g.labels[2] == 1);
  CHECK(g.labels[3] == 0);  // all-zero logits tie-break to class 0
}

TEST_CASE("zero learning rate leaves every weight bitwise unchanged") {
  PipelineConfig cfg = small_cfg();
  cfg.lr = 0.0;
  Model m(cfg);
  SceneSample s = small_sample(5, cfg);
  std::vector<std::vector<double>> before;
  for (auto& [name, t] : m.params.all()) before.push_back(t.values());
  train(m, {s}, 2);
  size_t i = 0;
  for (auto& [name, t] : m.params.all()) CHECK(t.values() == before[i++]);
}

TEST_CASE("short training run: finite losses, csv log, deterministic replay") {
  PipelineConfig cfg = small_cfg();
  cfg.lr = 1e-3;
  SceneSample s = small_sample(5, cfg);
  auto dir = std::filesystem::temp_directory_path() / "brg_pipeline_test";
  std::filesystem::create_directories(dir);
  std::string csv = (dir / "log.csv").string();

  Model a(cfg);
  TrainResult ra = train(a, {s}, 6, csv);
  REQUIRE(ra.losses.size() == 6u);
  for (double l : ra.losses) CHECK(std::isfinite(l));
  CHECK(ra.final_loss == ra.losses.back());

  std::ifstream f(csv);
  std::string line;
  int64_t rows = 0;
  std::getline(f, line);
  CHECK(line == "step,loss,l_depth,l_ce,l_sem,l_geo");
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 6);

  Model b(cfg);
  TrainResult rb = train(b, {s}, 6);
  CHECK(ra.losses == rb.losses);  // bitwise-identical trajectory
  std::filesystem::remove_all(dir);
}

TEST_CASE("training reduces the loss on a single scene") {
  PipelineConfig cfg = small_cfg();
  cfg.lr = 1e-3;
  Model m(cfg);
  SceneSample s = small_sample(5, cfg);
  TrainResult r = train(m, {s}, 12);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 4; ++i) head += r.losses[static_cast<size_t>(i)] / 4.0;
  for (int i = 8; i < 12; ++i) tail += r.losses[static_cast<size_t>(i)] / 4.0;
  CHECK(tail < head);
}
