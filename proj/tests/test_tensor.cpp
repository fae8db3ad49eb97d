#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "brg/conv.hpp"
#include "brg/ops.hpp"
#include "brg/tensor.hpp"
#include "test_support.hpp"

using namespace brg;

TEST_CASE("softmax: uniform logits") {
  Tensor x = Tensor::from({4}, {0, 0, 0, 0});
  Tensor y = softmax_along(x, 0);
  for (int i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("softmax: exact ratio") {
  Tensor x = Tensor::from({2}, {std::log(1.0), std::log(3.0)});
  Tensor y = softmax_along(x, 0);
  CHECK(std::abs(y[0] - 0.25) < 1e-12);
  CHECK(std::abs(y[1] - 0.75) < 1e-12);
}

TEST_CASE("softmax: rows sum to 1 and match naive oracle") {
  Rng rng(42);
  Tensor x = random_uniform({3, 4}, -5.0, 5.0, rng);
  Tensor y = softmax_along(x, 1);
  for (int r = 0; r < 3; ++r) {
    double s = 0.0;
    for (int c = 0; c < 4; ++c) s += y[r * 4 + c];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  auto oracle = testsup::softmax_oracle(x.values(), 3, 4, 1);
  CHECK(testsup::max_abs_diff(y.values(), oracle) < 1e-12);
}

TEST_CASE("softmax: invariant under constant shift") {
  Rng rng(7);
  Tensor x = random_uniform({5, 6}, -3.0, 3.0, rng);
  Tensor xs = Tensor::from(x.shape(), x.values());
  for (int64_t i = 0; i < xs.numel(); ++i) xs[i] += 17.5;
  Tensor a = softmax_along(x, 0);
  Tensor b = softmax_along(xs, 0);
  CHECK(testsup::max_abs_diff(a.values(), b.values()) < 1e-12);
}

TEST_CASE("softmax: axis out of range is an error") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(softmax_along(x, 2), std::invalid_argument);
}

TEST_CASE("matmul: identity") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = matmul(eye, m);
  CHECK(y.values() == m.values());
}

TEST_CASE("matmul: hand arithmetic") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {1, 1});
  Tensor y = matmul(a, b);
  CHECK(y[0] == 3.0);
  CHECK(y[1] == 7.0);
}

TEST_CASE("matmul: triple-loop oracle and shape errors") {
  Rng rng(3);
  Tensor a = random_uniform({5, 7}, -1, 1, rng);
  Tensor b = random_uniform({7, 3}, -1, 1, rng);
  Tensor y = matmul(a, b);
  auto oracle = testsup::matmul_oracle(a.values(), b.values(), 5, 7, 3);
  CHECK(testsup::max_abs_diff(y.values(), oracle) < 1e-12);
  Tensor bad = random_uniform({6, 3}, -1, 1, rng);
  CHECK_THROWS_AS(matmul(a, bad), std::invalid_argument);
}

TEST_CASE("conv3d: all-ones center tap count") {
  Tensor x = Tensor::full({1, 3, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3, 3}, 1.0);
  Tensor y = conv3d(x, k, 1, 1);
  // center output voxel sees all 27 taps
  CHECK(y[(1 * 3 + 1) * 3 + 1] == 27.0);
}

TEST_CASE("conv3d: Dirac kernel is identity on the interior for any dilation") {
  Rng rng(11);
  for (int64_t dil : {1, 2}) {
    Tensor x = random_uniform({1, 7, 7, 7}, -1, 1, rng);
    Tensor k = Tensor::zeros({1, 1, 3, 3, 3});
    k[(1 * 3 + 1) * 3 + 1] = 1.0;  // center tap
    Tensor y = conv3d(x, k, 1, dil, dil);  // pad = dilation*(k-1)/2
    CHECK(y.shape() == x.shape());
    CHECK(testsup::max_abs_diff(y.values(), x.values()) == 0.0);
  }
}

TEST_CASE("conv3d: random case vs 6-loop oracle (with stride and dilation)") {
  Rng rng(19);
  struct Case { int64_t C, D, H, W, O, K, s, p, d; };
  for (Case c : {Case{2, 5, 6, 7, 3, 3, 1, 1, 1}, Case{3, 6, 6, 8, 2, 3, 2, 1, 1},
                 Case{1, 9, 9, 9, 2, 3, 1, 2, 2}}) {
    Tensor x = random_uniform({c.C, c.D, c.H, c.W}, -1, 1, rng);
    Tensor k = random_uniform({c.O, c.C, c.K, c.K, c.K}, -1, 1, rng);
    Tensor y = conv3d(x, k, c.s, c.p, c.d);
    int64_t Do = y.extent(1), Ho = y.extent(2), Wo = y.extent(3);
    auto oracle = testsup::conv3d_oracle(x.values(), c.C, c.D, c.H, c.W, k.values(), c.O, c.K,
                                         c.s, c.p, c.d, Do, Ho, Wo);
    CHECK(testsup::max_abs_diff(y.values(), oracle) <= 1e-12);
  }
}

TEST_CASE("conv3d: nonpositive output extent is an error") {
  Tensor x = Tensor::full({1, 1, 1, 1}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3, 3}, 1.0);
  CHECK_THROWS_AS(conv3d(x, k, 1, 0), std::invalid_argument);
}

TEST_CASE("conv_transpose3d: Dirac kernel at stride 1 is identity") {
  Rng rng(23);
  Tensor x = random_uniform({1, 4, 4, 4}, -1, 1, rng);
  Tensor k = Tensor::zeros({1, 1, 3, 3, 3});
  k[(1 * 3 + 1) * 3 + 1] = 1.0;
  Tensor y = conv_transpose3d(x, k, 1, 1);
  CHECK(y.shape() == x.shape());
  CHECK(testsup::max_abs_diff(y.values(), x.values()) == 0.0);
}

TEST_CASE("conv_transpose3d: stride-2 extent doubling") {
  Tensor x = Tensor::full({1, 2, 2, 2}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3, 3}, 1.0);
  Tensor y = conv_transpose3d(x, k, 2, 1, 1);
  CHECK(y.shape() == Shape{1, 4, 4, 4});
}

TEST_CASE("conv_transpose3d: adjoint identity <conv(x,K),y> == <x,tconv(y,K)>") {
  Rng rng(29);
  for (int64_t stride : {1, 2}) {
    Tensor x = random_uniform({2, 4, 4, 4}, -1, 1, rng);
    Tensor k = random_uniform({3, 2, 3, 3, 3}, -1, 1, rng);
    Tensor cx = conv3d(x, k, stride, 1);
    Tensor y = random_uniform(cx.shape(), -1, 1, rng);
    int64_t out_pad = stride == 2 ? 1 : 0;
    Tensor ty = conv_transpose3d(y, k, stride, 1, out_pad);
    REQUIRE(ty.shape() == x.shape());
    double lhs = 0.0, rhs = 0.0;
    for (int64_t i = 0; i < cx.numel(); ++i) lhs += cx[i] * y[i];
    for (int64_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty[i];
    CHECK(std::abs(lhs - rhs) < 1e-10);
  }
}

TEST_CASE("global_avg_pool: constant, hand mean, linearity") {
  Tensor c5 = Tensor::full({1, 2, 2, 2}, 5.0);
  CHECK(global_avg_pool(c5)[0] == 5.0);
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(global_avg_pool(x)[0] == doctest::Approx(2.5).epsilon(1e-15));
  Tensor sx = scale(x, 3.0);
  CHECK(global_avg_pool(sx)[0] == doctest::Approx(3.0 * 2.5).epsilon(1e-15));
}

TEST_CASE("elementwise: sigmoid(0), gelu grid vs exact formula, ranges") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  for (double v = -4.0; v <= 4.0; v += 0.25) {
    double got = gelu(Tensor::scalar(v)).item();
    double want = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    CHECK(std::abs(got - want) <= 1e-9);
    double s = sigmoid(Tensor::scalar(v)).item();
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
}

TEST_CASE("split/concat: partition round trip and partition errors") {
  Rng rng(31);
  Tensor x = random_uniform({8, 3, 2}, -1, 1, rng);
  auto parts = split_first_axis(x, {2, 2, 2, 2});
  Tensor back = concat_first_axis(parts);
  CHECK(back.shape() == x.shape());
  CHECK(back.values() == x.values());
  CHECK_THROWS_AS(split_first_axis(x, {3, 3}), std::invalid_argument);
}

TEST_CASE("backward: sum gives ones, quadratic gives 2x") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor loss = sum_all(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));

  Tensor y = Tensor::from({3}, {5, 6, 7}, true);
  backward(sum_all(y));
  for (double g : y.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward: non-scalar loss is an error") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(x), std::invalid_argument);
}

// Randomized finite-difference checks for every differentiable op.
TEST_CASE("gradient suite: per-op central finite differences") {
  Rng rng(1234);

  auto check = [&](const char* name, Tensor leaf, const std::function<Tensor()>& forward) {
    leaf.zero_grad();
    Tensor loss = forward();
    backward(loss);
    auto ad = leaf.grad();
    auto loss_fn = [&]() { return forward().item(); };
    double err = testsup::fd_check_leaf(loss_fn, leaf, ad, rng);
    INFO("op: " << std::string(name) << " rel err " << err);
    CHECK(err <= 1e-4);
  };

  {
    Tensor x = random_uniform({3, 4}, -1, 1, rng, true);
    Tensor w = random_uniform({3, 4}, 0.5, 1.5, rng);
    check("add", x, [&] { return sum_all(mul(w, add(x, w))); });
    check("sub", x, [&] { return sum_all(mul(w, sub(x, w))); });
    check("mul", x, [&] { return sum_all(mul(x, w)); });
    check("div", x, [&] { return sum_all(div(x, w)); });
    check("div-denominator", x, [&] { return sum_all(div(w, add(x, Tensor::full(x.shape(), 3.0)))); });
    check("scale", x, [&] { return sum_all(scale(x, 2.5)); });
    check("relu", x, [&] { return sum_all(mul(w, relu(x))); });
    check("sigmoid", x, [&] { return sum_all(mul(w, sigmoid(x))); });
    check("gelu", x, [&] { return sum_all(mul(w, gelu(x))); });
    check("softmax", x, [&] { return sum_all(mul(w, softmax_along(x, 1))); });
    check("max_along", x, [&] { return sum_all(max_along(x, 1)); });
    check("reshape", x, [&] { return sum_all(mul(reshape(x, {4, 3}), reshape(w, {4, 3}))); });
    check("transpose2d", x, [&] { return sum_all(mul(transpose2d(x), transpose2d(w))); });
    check("permute", x, [&] { return sum_all(mul(permute(x, {1, 0}), transpose2d(w))); });
  }
  {
    Tensor p = random_uniform({3, 4}, 0.05, 0.95, rng, true);
    Tensor w = random_uniform({3, 4}, 0.5, 1.5, rng);
    check("log_clamped", p, [&] { return sum_all(mul(w, log_clamped(p))); });
  }
  {
    Tensor a = random_uniform({3, 4}, -1, 1, rng, true);
    Tensor b = random_uniform({4, 2}, -1, 1, rng);
    check("matmul-lhs", a, [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); });
    Tensor a2 = random_uniform({3, 4}, -1, 1, rng);
    Tensor b2 = random_uniform({4, 2}, -1, 1, rng, true);
    check("matmul-rhs", b2, [&] { return sum_all(mul(matmul(a2, b2), matmul(a2, b2))); });
  }
  {
    Tensor x = random_uniform({2, 4, 4, 4}, -1, 1, rng, true);
    Tensor k = random_uniform({3, 2, 3, 3, 3}, -0.5, 0.5, rng, true);
    Tensor wy = random_uniform({3, 4, 4, 4}, -1, 1, rng);
    check("conv3d-input", x, [&] { return sum_all(mul(wy, conv3d(x, k, 1, 1))); });
    check("conv3d-kernel", k, [&] { return sum_all(mul(wy, conv3d(x, k, 1, 1))); });
    Tensor wy2 = random_uniform({3, 2, 2, 2}, -1, 1, rng);
    check("conv3d-strided-dilated", x, [&] { return sum_all(mul(wy2, conv3d(x, k, 2, 2, 2))); });
    Tensor tx = random_uniform({3, 2, 2, 2}, -1, 1, rng, true);
    Tensor wty = random_uniform({2, 4, 4, 4}, -1, 1, rng);
    check("tconv-input", tx, [&] { return sum_all(mul(wty, conv_transpose3d(tx, k, 2, 1, 1))); });
    check("tconv-kernel", k, [&] { return sum_all(mul(wty, conv_transpose3d(tx, k, 2, 1, 1))); });
    Tensor wpool = random_uniform({2, 2, 2, 2}, -1, 1, rng);
    check("avg_pool3d_2x", x, [&] { return sum_all(mul(wpool, avg_pool3d_2x(x))); });
    check("global_avg_pool", x, [&] {
      return sum_all(mul(global_avg_pool(x), Tensor::from({2}, {1.5, -0.5})));
    });
    check("group_norm", x, [&] { return sum_all(mul(wy.numel() == x.numel() ? wy : x, group_norm(x, 2))); });
  }
  {
    Tensor x = random_uniform({2, 3, 3}, -1, 1, rng, true);
    Tensor k2 = random_uniform({2, 2, 3, 3}, -0.5, 0.5, rng, true);
    Tensor wy = random_uniform({2, 3, 3}, -1, 1, rng);
    check("conv2d-input", x, [&] { return sum_all(mul(wy, conv2d(x, k2, 1, 1))); });
    check("conv2d-kernel", k2, [&] { return sum_all(mul(wy, conv2d(x, k2, 1, 1))); });
    Tensor g = random_uniform({2}, 0.2, 1.0, rng, true);
    check("scale_first_axis-x", x, [&] { return sum_all(mul(wy, scale_first_axis(x, g))); });
    check("scale_first_axis-g", g, [&] { return sum_all(mul(wy, scale_first_axis(x, g))); });
    check("add_first_axis", g, [&] { return sum_all(mul(wy, add_first_axis(x, g))); });
  }
  {
    Tensor ctx = random_uniform({2, 3, 3}, -1, 1, rng, true);
    Tensor dep = random_uniform({4, 3, 3}, 0.0, 1.0, rng, true);
    Tensor wy = random_uniform({2, 4, 3, 3}, -1, 1, rng);
    check("outer_lift-ctx", ctx, [&] { return sum_all(mul(wy, outer_lift(ctx, dep))); });
    check("outer_lift-depth", dep, [&] { return sum_all(mul(wy, outer_lift(ctx, dep))); });
  }
  {
    Tensor x = random_uniform({6, 2}, -1, 1, rng, true);
    check("split+concat", x, [&] {
      auto parts = split_first_axis(x, {2, 2, 2});
      Tensor w = Tensor::from({2, 2}, {0.5, -1.0, 2.0, 1.0});
      Tensor acc = sum_all(mul(parts[0], w));
      acc = add(acc, sum_all(mul(parts[1], parts[2])));
      acc = add(acc, sum_all(concat_first_axis(parts)));
      return acc;
    });
  }
}

TEST_CASE("group_norm: zero mean / unit variance per group") {
  Rng rng(55);
  Tensor x = random_uniform({4, 2, 2, 2}, -3, 3, rng);
  Tensor y = group_norm(x, 2);
  int64_t gsz = y.numel() / 2;
  for (int g = 0; g < 2; ++g) {
    double mean = 0.0, var = 0.0;
    for (int64_t i = 0; i < gsz; ++i) mean += y[g * gsz + i];
    mean /= static_cast<double>(gsz);
    for (int64_t i = 0; i < gsz; ++i) var += (y[g * gsz + i] - mean) * (y[g * gsz + i] - mean);
    var /= static_cast<double>(gsz);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-4);  // eps-regularized
  }
}

TEST_CASE("determinism: repeated evaluation is bitwise identical") {
  auto run = [] {
    Rng rng(99);
    Tensor x = random_uniform({2, 4, 4, 4}, -1, 1, rng);
    Tensor k = random_uniform({3, 2, 3, 3, 3}, -1, 1, rng);
    return conv3d(x, k, 1, 1).values();
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);
}
