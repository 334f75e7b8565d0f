#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "stylevox/autodiff.hpp"
#include "stylevox/gradcheck.hpp"
#include "stylevox/ops.hpp"
#include "stylevox/rng.hpp"
#include "stylevox/tensor.hpp"

using namespace sv;
namespace op = sv::ops;

namespace {

Tensor randn(std::vector<int64_t> shape, uint64_t seed, DType dt = DType::F64) {
  CounterRng rng(seed, Stream::Test);
  Tensor t(std::move(shape), dt);
  fill_normal(t, rng);
  return t;
}

bool bitwise_equal_f64(const Tensor& a, const std::vector<double>& b) {
  auto d = a.data<double>();
  if (d.size() != b.size()) return false;
  return std::memcmp(d.data(), b.data(), b.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("conv3d: identity 1x1x1 kernel") {
  Tensor x = randn({1, 1, 4, 4, 4}, 11);
  Tensor w = Tensor::full({1, 1, 1, 1, 1}, 1.0, DType::F64);
  Tensor y = op::conv3d(x, w, 1, 0);
  CHECK(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("conv3d: all-ones 3x3x3 kernel over constant input") {
  Tensor x = Tensor::full({1, 1, 5, 5, 5}, 2.0, DType::F64);
  Tensor w = Tensor::full({1, 1, 3, 3, 3}, 1.0, DType::F64);
  Tensor y = op::conv3d(x, w, 1, 1);
  // center voxel sees all 27 taps, corner only a 2x2x2 block
  const int64_t center = (2 * 5 + 2) * 5 + 2;
  CHECK(y.at(center) == doctest::Approx(54.0));
  CHECK(y.at(0) == doctest::Approx(16.0));
}

TEST_CASE("conv3d: strided output shape") {
  Tensor x = randn({2, 3, 8, 8, 8}, 3);
  Tensor w = randn({4, 3, 3, 3, 3}, 4);
  Tensor y = op::conv3d(x, w, 2, 1);
  CHECK(y.shape() == std::vector<int64_t>{2, 4, 4, 4, 4});
}

TEST_CASE("conv3d: errors") {
  Tensor x = randn({1, 2, 4, 4, 4}, 5);
  CHECK_THROWS_AS(op::conv3d(x, randn({1, 3, 3, 3, 3}, 6), 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(op::conv3d(x, randn({1, 2, 2, 2, 2}, 7), 1, 0), std::invalid_argument);
  Tensor empty = Tensor::zeros({1, 1, 0, 4, 4}, DType::F64);
  CHECK_THROWS_AS(op::conv3d(empty, randn({1, 1, 3, 3, 3}, 8), 1, 1), std::invalid_argument);
}

TEST_CASE("conv3d matches the nested-loop reference bitwise in f64") {
  for (uint64_t seed = 0; seed < 30; ++seed) {
    CounterRng rng(seed, Stream::Test, 77);
    const int64_t N = 1 + static_cast<int64_t>(rng.uniform_int(2));
    const int64_t C = 1 + static_cast<int64_t>(rng.uniform_int(3));
    const int64_t K = 1 + static_cast<int64_t>(rng.uniform_int(3));
    const int64_t D = 2 + static_cast<int64_t>(rng.uniform_int(5));
    const int64_t H = 2 + static_cast<int64_t>(rng.uniform_int(5));
    const int64_t W = 2 + static_cast<int64_t>(rng.uniform_int(5));
    const int64_t k = 1 + 2 * static_cast<int64_t>(rng.uniform_int(2));  // 1 or 3
    const int64_t pad = (k - 1) / 2;
    const int64_t stride = 1 + static_cast<int64_t>(rng.uniform_int(2));
    Tensor x = randn({N, C, D, H, W}, seed * 13 + 1);
    Tensor w = randn({K, C, k, k, k}, seed * 13 + 2);
    Tensor b = randn({K}, seed * 13 + 3);
    Tensor y = op::conv3d(x, w, b, static_cast<int>(stride), static_cast<int>(pad));
    std::vector<double> bias(b.data<double>().begin(), b.data<double>().end());
    auto ref = oracle::conv3d_loops({x.data<double>().begin(), x.data<double>().end()}, N, C, D,
                                    H, W, {w.data<double>().begin(), w.data<double>().end()}, K,
                                    k, k, k, &bias, stride, pad);
    CHECK(bitwise_equal_f64(y, ref));
  }
}

TEST_CASE("conv3d f32 path agrees with f64 path") {
  Tensor x = randn({2, 3, 6, 5, 7}, 21);
  Tensor w = randn({4, 3, 3, 3, 3}, 22);
  Tensor y64 = op::conv3d(x, w, 1, 1);
  Tensor y32 = op::conv3d(x.astype(DType::F32), w.astype(DType::F32), 1, 1);
  for (int64_t i = 0; i < y64.numel(); ++i)
    CHECK(y32.at(i) == doctest::Approx(y64.at(i)).epsilon(1e-4));
}

TEST_CASE("conv3d forward is deterministic") {
  Tensor x = randn({1, 2, 5, 5, 5}, 31, DType::F32);
  Tensor w = randn({2, 2, 3, 3, 3}, 32, DType::F32);
  Tensor y1 = op::conv3d(x, w, 1, 1);
  Tensor y2 = op::conv3d(x, w, 1, 1);
  auto a = y1.data<float>();
  auto b = y2.data<float>();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("conv3d_grad_check contract examples") {
  SUBCASE("conv [1,2,4,4,4] x [3,2,3,3,3], seed 7") {
    Tensor x = randn({1, 2, 4, 4, 4}, 7);
    Tensor w = randn({3, 2, 3, 3, 3}, 8);
    Tensor b = randn({3}, 9);
    double err = grad_check(
        [](const std::vector<Tensor>& in) {
          return op::sum_all(op::conv3d(in[0], in[1], in[2], 1, 1));
        },
        {x, w, b});
    CHECK(err < 1e-6);
  }
  SUBCASE("leaky_relu away from the kink") {
    Tensor x = randn({4, 7}, 10);
    for (int64_t i = 0; i < x.numel(); ++i) {
      double v = x.at(i);
      if (std::abs(v) < 1e-3) x.set(i, v < 0 ? v - 0.5 : v + 0.5);
    }
    Tensor wfix = randn({4, 7}, 11);
    double err = grad_check(
        [wfix](const std::vector<Tensor>& in) {
          return op::sum_all(op::mul(op::leaky_relu(in[0], 0.2), wfix));
        },
        {x});
    CHECK(err < 1e-7);
  }
  SUBCASE("dense 10 -> 5") {
    Tensor x = randn({3, 10}, 12);
    Tensor w = randn({5, 10}, 13);
    Tensor b = randn({5}, 14);
    double err = grad_check(
        [](const std::vector<Tensor>& in) {
          return op::sum_all(op::square(op::dense(in[0], in[1], in[2], 1.0)));
        },
        {x, w, b});
    CHECK(err < 1e-7);
  }
}

TEST_CASE("every differentiable op passes randomized finite-difference checks") {
  // weighted scalar heads make the gradients non-uniform
  auto head = [](const Tensor& t, uint64_t seed) {
    Tensor w = randn(t.shape(), seed ^ 0xabcdef);
    return op::sum_all(op::mul(t, w));
  };
  for (uint64_t seed = 0; seed < 20; ++seed) {
    CounterRng rng(seed, Stream::Test, 5);
    const int64_t n = 2 + static_cast<int64_t>(rng.uniform_int(3));
    const int64_t m = 2 + static_cast<int64_t>(rng.uniform_int(3));
    Tensor a = randn({n, m}, seed * 31 + 1);
    Tensor b = randn({n, m}, seed * 31 + 2);
    // keep b away from zero for div
    for (int64_t i = 0; i < b.numel(); ++i)
      b.set(i, b.at(i) >= 0 ? b.at(i) + 0.5 : b.at(i) - 0.5);
    Tensor pos = a.clone();
    for (int64_t i = 0; i < pos.numel(); ++i) pos.set(i, std::abs(pos.at(i)) + 0.5);

    auto chk = [&](const char* name, auto fn, std::vector<Tensor> ins, double tol = 1e-5) {
      INFO(std::string(name) << " seed " << seed);
      CHECK(grad_check(fn, ins) < tol);
    };
    chk("add", [&](const std::vector<Tensor>& in) { return head(op::add(in[0], in[1]), seed); },
        {a, b});
    chk("sub", [&](const std::vector<Tensor>& in) { return head(op::sub(in[0], in[1]), seed); },
        {a, b});
    chk("mul", [&](const std::vector<Tensor>& in) { return head(op::mul(in[0], in[1]), seed); },
        {a, b});
    chk("div", [&](const std::vector<Tensor>& in) { return head(op::div(in[0], in[1]), seed); },
        {a, b});
    chk("square", [&](const std::vector<Tensor>& in) { return head(op::square(in[0]), seed); },
        {a});
    chk("sqrt", [&](const std::vector<Tensor>& in) { return head(op::sqrt(in[0]), seed); }, {pos});
    chk("exp", [&](const std::vector<Tensor>& in) { return head(op::exp(in[0]), seed); }, {a});
    chk("log", [&](const std::vector<Tensor>& in) { return head(op::log(in[0]), seed); }, {pos});
    chk("softplus",
        [&](const std::vector<Tensor>& in) { return head(op::softplus(in[0]), seed); }, {a});
    chk("sigmoid", [&](const std::vector<Tensor>& in) { return head(op::sigmoid(in[0]), seed); },
        {a});
    chk("sum_axes",
        [&](const std::vector<Tensor>& in) {
          return op::sum_all(op::square(op::sum_axes(in[0], {1})));
        },
        {a});
    chk("broadcast_axes",
        [&](const std::vector<Tensor>& in) {
          Tensor col = op::sum_axes(in[0], {1});
          return op::sum_all(op::square(op::broadcast_axes(col, in[0].shape())));
        },
        {a});
    chk("matmul",
        [&](const std::vector<Tensor>& in) {
          return op::sum_all(op::square(op::matmul(in[0], op::transpose01(in[1]))));
        },
        {a, b});
    chk("concat+slice",
        [&](const std::vector<Tensor>& in) {
          Tensor c = op::concat(in[0], in[1], 1);
          return op::sum_all(op::square(op::slice(c, 1, 1, m)));
        },
        {a, b});
    chk("pixel_norm",
        [&](const std::vector<Tensor>& in) { return head(op::pixel_norm(in[0]), seed); }, {a});

    Tensor vol = randn({1, 2, 4, 4, 4}, seed * 31 + 3);
    chk("upsample",
        [&](const std::vector<Tensor>& in) {
          return head(op::upsample_nearest3d(in[0], 2), seed);
        },
        {vol});
    chk("avgpool",
        [&](const std::vector<Tensor>& in) { return head(op::avgpool3d(in[0], 2), seed); },
        {vol});
    chk("dilate+crop+pad",
        [&](const std::vector<Tensor>& in) {
          Tensor d = op::dilate3d(in[0], 2);
          Tensor c = op::crop3d(d, {1, 0, 1}, {5, 6, 5});
          return head(op::pad3d(c, {1, 1, 1}, {0, 0, 0}), seed);
        },
        {vol});
    Tensor w2 = randn({3, 2, 3, 3, 3}, seed * 31 + 4);
    chk("conv3d stride 2",
        [&](const std::vector<Tensor>& in) {
          return head(op::conv3d(in[0], in[1], 2, 1), seed);
        },
        {vol, w2});
  }
}

TEST_CASE("second derivative through the tape is exact for a quadratic") {
  // f(x) = sum(x^2); h = sum((df/dx)^2) = 4*sum(x^2); dh/dx = 8x
  Tensor x = ad::make_leaf(randn({3, 2}, 42));
  Tensor f = op::sum_all(op::square(x));
  std::vector<Tensor> g = ad::gradient(f, {&x, 1}, /*create_graph=*/true);
  Tensor h = op::sum_all(op::square(g[0]));
  std::vector<Tensor> hg = ad::gradient(h, {&x, 1});
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(hg[0].at(i) == doctest::Approx(8.0 * x.at(i)).epsilon(1e-12));
}

TEST_CASE("second derivative through conv3d matches finite differences") {
  Tensor x = randn({1, 1, 3, 3, 3}, 50);
  Tensor w = randn({1, 1, 3, 3, 3}, 51);
  Tensor probe = randn({1, 1, 3, 3, 3}, 52);
  // h(w) = || d/dx sum(conv(x, w) * probe) ||^2, checked against FD in w
  double err = grad_check(
      [probe, x](const std::vector<Tensor>& in) {
        Tensor xl = ad::make_leaf(x);
        Tensor s = op::sum_all(op::mul(op::conv3d(xl, in[0], 1, 1), probe));
        std::vector<Tensor> gx = ad::gradient(s, {&xl, 1}, /*create_graph=*/true);
        return op::sum_all(op::square(gx[0]));
      },
      {w}, 1e-4);
  CHECK(err < 1e-5);
}

TEST_CASE("upsample_nearest3d semantics") {
  Tensor x = randn({1, 1, 2, 3, 2}, 60);
  CHECK(op::upsample_nearest3d(x, 1).shape() == x.shape());
  std::vector<double> vals(8);
  for (int i = 0; i < 8; ++i) vals[static_cast<size_t>(i)] = i + 1;
  Tensor cube = Tensor::from_f64({1, 1, 2, 2, 2}, vals);
  Tensor up = op::upsample_nearest3d(cube, 2);
  CHECK(up.shape() == std::vector<int64_t>{1, 1, 4, 4, 4});
  for (int64_t z = 0; z < 4; ++z)
    for (int64_t y = 0; y < 4; ++y)
      for (int64_t x2 = 0; x2 < 4; ++x2)
        CHECK(up.at((z * 4 + y) * 4 + x2) ==
              cube.at(((z / 2) * 2 + y / 2) * 2 + x2 / 2));
  CHECK_THROWS_AS(op::upsample_nearest3d(cube, 0), std::invalid_argument);
}

TEST_CASE("upsample then avgpool is the identity") {
  Tensor x = randn({2, 3, 2, 3, 4}, 61);
  Tensor round = op::avgpool3d(op::upsample_nearest3d(x, 2), 2);
  CHECK(bitwise_equal_f64(round, {x.data<double>().begin(), x.data<double>().end()}));
}

TEST_CASE("avgpool3d semantics") {
  Tensor c = Tensor::full({1, 1, 4, 4, 4}, 3.25, DType::F64);
  Tensor p = op::avgpool3d(c, 2);
  for (int64_t i = 0; i < p.numel(); ++i) CHECK(p.at(i) == doctest::Approx(3.25));

  std::vector<double> vals(8);
  for (int i = 0; i < 8; ++i) vals[static_cast<size_t>(i)] = i;
  Tensor cube = Tensor::from_f64({1, 1, 2, 2, 2}, vals);
  CHECK(op::avgpool3d(cube, 2).item() == doctest::Approx(3.5));

  Tensor big = Tensor::zeros({1, 1, 80, 96, 112}, DType::F32);
  CHECK(op::avgpool3d(big, 8).shape() == std::vector<int64_t>{1, 1, 10, 12, 14});
  CHECK_THROWS_AS(op::avgpool3d(cube, 3), std::invalid_argument);
}

TEST_CASE("leaky_relu semantics") {
  Tensor x = Tensor::from_f64({3}, {-1.0, 0.0, 2.0});
  Tensor y = op::leaky_relu(x, 0.2);
  CHECK(y.at(0) == doctest::Approx(-0.2));
  CHECK(y.at(1) == 0.0);
  CHECK(y.at(2) == doctest::Approx(2.0));

  Tensor nn = Tensor::from_f64({3}, {0.5, 1.0, 7.0});
  Tensor idn = op::leaky_relu(nn, 0.2);
  for (int64_t i = 0; i < 3; ++i) CHECK(idn.at(i) == nn.at(i));

  Tensor pt = ad::make_leaf(Tensor::from_f64({1}, {-3.0}));
  Tensor out = op::leaky_relu(pt, 0.2);
  auto g = ad::gradient(out, {&pt, 1});
  CHECK(g[0].at(0) == doctest::Approx(0.2));
}

TEST_CASE("dense semantics") {
  SUBCASE("identity map when weight cancels the runtime scale") {
    const int64_t f = 4;
    const double scale = std::sqrt(2.0 / f);
    Tensor w = Tensor::zeros({f, f}, DType::F64);
    for (int64_t i = 0; i < f; ++i) w.set(i * f + i, 1.0 / scale);
    Tensor b = Tensor::zeros({f}, DType::F64);
    Tensor x = randn({2, f}, 70);
    Tensor y = op::dense(x, w, b, 1.0);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)));
  }
  SUBCASE("all-ones weight and input scales by fan-in") {
    Tensor w = Tensor::full({3, 4}, 1.0, DType::F64);
    Tensor b = Tensor::zeros({3}, DType::F64);
    Tensor x = Tensor::full({1, 4}, 1.0, DType::F64);
    Tensor y = op::dense(x, w, b, 1.0);
    for (int64_t i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(2.0 * std::sqrt(2.0)));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(op::dense(randn({1, 3}, 1), randn({2, 4}, 2), randn({2}, 3), 1.0),
                    std::invalid_argument);
  }
}

TEST_CASE("reductions and elementwise examples") {
  CHECK(op::softplus(Tensor::scalar(0.0, DType::F64)).item() == doctest::Approx(std::log(2.0)));
  CHECK(std::abs(op::softplus(Tensor::scalar(50.0, DType::F64)).item() - 50.0) < 1e-12);
  CHECK(op::l2_norm_all(Tensor::from_f64({2}, {3.0, 4.0})).item() == doctest::Approx(5.0));
  CHECK_THROWS_AS(op::div(Tensor::scalar(1.0, DType::F64), Tensor::scalar(0.0, DType::F64)),
                  std::domain_error);
  CHECK_THROWS_AS(op::sqrt(Tensor::scalar(-1.0, DType::F64)), std::domain_error);
}

TEST_CASE("debug finite check surfaces NaN propagation") {
  set_debug_check_finite(true);
  Tensor x = Tensor::scalar(1e308, DType::F64);
  CHECK_THROWS_AS(op::mul(x, x), NonFiniteError);
  set_debug_check_finite(false);
  CHECK_NOTHROW(op::mul(x, x));
}

TEST_CASE("gradient bookkeeping") {
  SUBCASE("wrt tensor the output does not depend on gets zeros") {
    Tensor a = ad::make_leaf(randn({2, 2}, 80));
    Tensor b = ad::make_leaf(randn({2, 2}, 81));
    Tensor out = op::sum_all(op::square(a));
    std::vector<Tensor> wrt{a, b};
    auto g = ad::gradient(out, wrt);
    for (int64_t i = 0; i < b.numel(); ++i) CHECK(g[1].at(i) == 0.0);
    for (int64_t i = 0; i < a.numel(); ++i)
      CHECK(g[0].at(i) == doctest::Approx(2.0 * a.at(i)));
  }
  SUBCASE("fan-out accumulates") {
    Tensor a = ad::make_leaf(Tensor::from_f64({1}, {3.0}));
    Tensor out = op::add(op::mul(a, a), op::mul_scalar(a, 4.0));  // x^2 + 4x
    auto g = ad::gradient(out, {&a, 1});
    CHECK(g[0].at(0) == doctest::Approx(10.0));
  }
  SUBCASE("no recording under NoGrad") {
    Tensor a = ad::make_leaf(randn({2, 2}, 82));
    ad::NoGrad ng;
    Tensor out = op::sum_all(op::square(a));
    CHECK(out.node == nullptr);
  }
}
