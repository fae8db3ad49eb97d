#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "brg/stereo.hpp"
#include "test_support.hpp"

using namespace brg;

// Independent reference for the group-wise correlation formula.
static std::vector<double> gwc_oracle(const std::vector<double>& l, const std::vector<double>& r,
                                      int64_t n_c, int64_t h, int64_t w, int64_t n_g,
                                      int64_t dmax) {
  int64_t gch = n_c / n_g;
  std::vector<double> out(static_cast<size_t>(n_g * dmax * h * w), 0.0);
  for (int64_t g = 0; g < n_g; ++g)
    for (int64_t d = 0; d < dmax; ++d)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          if (x - d < 0) continue;  // out-of-image shift stays zero
          double acc = 0.0;
          for (int64_t c = 0; c < gch; ++c) {
            int64_t cc = g * gch + c;
            acc += l[static_cast<size_t>((cc * h + y) * w + x)] *
                   r[static_cast<size_t>((cc * h + y) * w + x - d)];
          }
          out[static_cast<size_t>(((g * dmax + d) * h + y) * w + x)] =
              acc / static_cast<double>(gch);
        }
  return out;
}

TEST_CASE("gwc matches the brute-force oracle") {
  Rng rng(21);
  UnaryFeatures f{random_uniform({8, 3, 6}, -1.0, 1.0, rng),
                  random_uniform({8, 3, 6}, -1.0, 1.0, rng)};
  GwcConfig cfg{2, 4};
  Tensor cost = gwc_correlation(f, cfg);
  REQUIRE(cost.shape() == Shape{2, 4, 3, 6});
  auto ref = gwc_oracle(f.left.values(), f.right.values(), 8, 3, 6, 2, 4);
  CHECK(testsup::max_abs_diff(cost.values(), ref) < 1e-14);
}

TEST_CASE("gwc gradients pass finite differences") {
  Rng rng(22);
  Tensor l = random_uniform({4, 3, 5}, -1.0, 1.0, rng, true);
  Tensor r = random_uniform({4, 3, 5}, -1.0, 1.0, rng, true);
  GwcConfig cfg{2, 3};
  Rng wr(1);
  Tensor weight = random_uniform({2, 3, 3, 5}, -1.0, 1.0, wr);
  auto loss_fn = [&]() {
    return sum_all(mul(gwc_correlation({l, r}, cfg), weight)).item();
  };
  Tensor loss = sum_all(mul(gwc_correlation({l, r}, cfg), weight));
  backward(loss);
  CHECK(testsup::fd_check_leaf(loss_fn, l, l.grad(), rng) < 1e-6);
  CHECK(testsup::fd_check_leaf(loss_fn, r, r.grad(), rng) < 1e-6);
}

TEST_CASE("gwc recovers the feature energy at the true constant disparity") {
  // right image is the left image slid by d0 columns, so at d = d0 the
  // correlation reads the per-pixel mean of squared left features exactly.
  Rng rng(23);
  const int64_t n_c = 6, h = 4, w = 10, d0 = 3;
  Tensor l = random_uniform({n_c, h, w}, 0.25, 1.0, rng);
  Tensor r = Tensor::zeros({n_c, h, w});
  for (int64_t c = 0; c < n_c; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x + d0 < w; ++x)
        r.values()[(c * h + y) * w + x] = l[(c * h + y) * w + x + d0];
  GwcConfig cfg{1, 6};
  Tensor cost = gwc_correlation({l, r}, cfg);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = d0; x < w; ++x) {
      double energy = 0.0;
      for (int64_t c = 0; c < n_c; ++c) {
        double v = l[(c * h + y) * w + x];
        energy += v * v;
      }
      energy /= static_cast<double>(n_c);
      CHECK(cost[(d0 * h + y) * w + x] == doctest::Approx(energy).epsilon(1e-14));
    }
}

TEST_CASE("gwc config validation") {
  Rng rng(24);
  UnaryFeatures f{random_uniform({6, 2, 4}, -1.0, 1.0, rng),
                  random_uniform({6, 2, 4}, -1.0, 1.0, rng)};
  CHECK_THROWS_AS(gwc_correlation(f, GwcConfig{4, 4}), std::invalid_argument);  // 4 !| 6
  CHECK_THROWS_AS(gwc_correlation(f, GwcConfig{2, 0}), std::invalid_argument);
  UnaryFeatures bad{f.left, random_uniform({6, 2, 5}, -1.0, 1.0, rng)};
  CHECK_THROWS_AS(gwc_correlation(bad, GwcConfig{2, 4}), std::invalid_argument);
}

TEST_CASE("disparity-to-depth resampling interpolates the right slices") {
  // Cost slice d holds the constant value d, so the resampled volume must
  // read back the (clamped) fractional disparity of each depth bin.
  CameraRig rig;
  rig.left.fu = rig.right.fu = 64.0;
  rig.left.fv = rig.right.fv = 64.0;
  rig.left.cu = rig.right.cu = 32.0;
  rig.left.cv = rig.right.cv = 32.0;
  rig.baseline = 0.5;
  const int64_t n_g = 2, dd = 8, h = 2, w = 3, downscale = 4;
  Tensor cost = Tensor::zeros({n_g, dd, h, w});
  for (int64_t g = 0; g < n_g; ++g)
    for (int64_t d = 0; d < dd; ++d)
      for (int64_t p = 0; p < h * w; ++p)
        cost.values()[(g * dd + d) * h * w + p] = static_cast<double>(d);
  DepthBins bins{1.0, 8.0, 8};
  Tensor dv = disparity_to_depth_volume(cost, bins, rig, downscale);
  REQUIRE(dv.shape() == Shape{8, 2, 3});
  for (int64_t z = 0; z < 8; ++z) {
    double disp = depth_to_disparity(bins.center(z), rig) / downscale;
    double expect = std::min(std::max(disp, 0.0), static_cast<double>(dd - 1));
    for (int64_t p = 0; p < h * w; ++p)
      CHECK(dv[z * h * w + p] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("disparity-to-depth resampling gradient passes finite differences") {
  CameraRig rig;
  rig.left.fu = rig.right.fu = 32.0;
  rig.left.fv = rig.right.fv = 32.0;
  rig.left.cu = rig.right.cu = 16.0;
  rig.left.cv = rig.right.cv = 16.0;
  rig.baseline = 0.5;
  Rng rng(31);
  Tensor cost = random_uniform({2, 6, 2, 3}, -1.0, 1.0, rng, true);
  DepthBins bins{1.0, 6.0, 5};
  Rng wr(2);
  Tensor weight = random_uniform({5, 2, 3}, -1.0, 1.0, wr);
  auto loss_fn = [&]() {
    return sum_all(mul(disparity_to_depth_volume(cost, bins, rig, 2), weight)).item();
  };
  Tensor loss = sum_all(mul(disparity_to_depth_volume(cost, bins, rig, 2), weight));
  backward(loss);
  CHECK(testsup::fd_check_leaf(loss_fn, cost, cost.grad(), rng) < 1e-6);
}

TEST_CASE("encoder downscales by 4 and rejects ragged extents") {
  ParamStore ps(41);
  EncoderWeights enc = EncoderWeights::create(ps, "enc", 8);
  Rng rng(42);
  Tensor left = random_uniform({1, 16, 24}, 0.0, 1.0, rng);
  Tensor right = random_uniform({1, 16, 24}, 0.0, 1.0, rng);
  UnaryFeatures f = extract_unary(left, right, enc);
  CHECK(f.left.shape() == Shape{8, 4, 6});
  CHECK(f.right.shape() == Shape{8, 4, 6});
  Tensor ragged = random_uniform({1, 18, 24}, 0.0, 1.0, rng);
  CHECK_THROWS_AS(extract_unary(ragged, ragged, enc), std::invalid_argument);
  CHECK_THROWS_AS(extract_unary(left, ragged, enc), std::invalid_argument);
}

TEST_CASE("shared encoder weights give identical features on identical views") {
  ParamStore ps(43);
  EncoderWeights enc = EncoderWeights::create(ps, "enc", 8);
  Rng rng(44);
  Tensor img = random_uniform({1, 16, 16}, 0.0, 1.0, rng);
  UnaryFeatures f = extract_unary(img, img, enc);
  CHECK(f.left.values() == f.right.values());
}

TEST_CASE("hourglass preserves shape and validates extents") {
  ParamStore ps(51);
  HourglassWeights hg = HourglassWeights::create(ps, "hg", 4);
  Rng rng(52);
  Tensor x = random_uniform({4, 4, 4, 8}, -1.0, 1.0, rng);
  Tensor y = hourglass_regularize(x, hg);
  CHECK(y.shape() == x.shape());
  Tensor ragged = random_uniform({4, 6, 4, 8}, -1.0, 1.0, rng);
  CHECK_THROWS_AS(hourglass_regularize(ragged, hg), std::invalid_argument);
}

TEST_CASE("hourglass outer shortcut is wired to the input") {
  // All weights zero except the 1x1x1 input shortcut set to identity:
  // the block must reduce to relu(x).
  ParamStore ps(53);
  HourglassWeights hg = HourglassWeights::create(ps, "hg", 4);
  for (auto& [name, t] : ps.all()) std::fill(t.values().begin(), t.values().end(), 0.0);
  for (int64_t c = 0; c < 4; ++c) hg.k8.values()[c * 4 + c] = 1.0;
  Rng rng(54);
  Tensor x = random_uniform({4, 4, 4, 4}, -1.0, 1.0, rng);
  Tensor y = hourglass_regularize(x, hg);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y[i] == doctest::Approx(std::max(x[i], 0.0)).epsilon(1e-15));
}

TEST_CASE("full stereo constructor produces depth-binned logits") {
  ParamStore ps(61);
  GwcConfig gwc{2, 8};
  StereoWeights w = StereoWeights::create(ps, "stereo", 8, gwc, 1, 4);
  CameraRig rig;
  rig.left.fu = rig.right.fu = 32.0;
  rig.left.fv = rig.right.fv = 32.0;
  rig.left.cu = rig.right.cu = 16.0;
  rig.left.cv = rig.right.cv = 16.0;
  rig.baseline = 0.5;
  DepthBins bins{1.0, 6.0, 4};
  Rng rng(62);
  Tensor left = random_uniform({1, 32, 32}, 0.0, 1.0, rng);
  Tensor right = random_uniform({1, 32, 32}, 0.0, 1.0, rng);
  UnaryFeatures f = extract_unary(left, right, w.encoder);
  StereoVolume vol = build_stereo_volume(f, rig, bins, w);
  CHECK(vol.data.shape() == Shape{4, 8, 8});

  // bitwise determinism: rebuilding from an identically seeded store matches
  ParamStore ps2(61);
  StereoWeights w2 = StereoWeights::create(ps2, "stereo", 8, gwc, 1, 4);
  UnaryFeatures f2 = extract_unary(left, right, w2.encoder);
  StereoVolume vol2 = build_stereo_volume(f2, rig, bins, w2);
  CHECK(vol.data.values() == vol2.data.values());
}
