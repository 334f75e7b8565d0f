#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "stylevox/autodiff.hpp"
#include "stylevox/gradcheck.hpp"
#include "stylevox/nets.hpp"
#include "stylevox/ops.hpp"
#include "stylevox/rng.hpp"

using namespace sv;
namespace op = sv::ops;

namespace {

Tensor randn(std::vector<int64_t> shape, uint64_t seed, DType dt = DType::F32) {
  CounterRng rng(seed, Stream::Test);
  Tensor t(std::move(shape), dt);
  fill_normal(t, rng);
  return t;
}

ModelConfig tiny_config(int levels, int depth, int latent = 4) {
  ModelConfig c;
  c.base_shape = {5, 6, 7};
  c.levels = levels;
  c.fmap_depth = depth;
  c.latent_size = latent;
  c.mapping_layers = 2;
  c.mapping_fmaps = latent;
  c.minibatch_schedule.assign(static_cast<size_t>(levels), 2);
  return c;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  if (a.dtype() == DType::F32) {
    auto x = a.data<float>();
    auto y = b.data<float>();
    return std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0;
  }
  auto x = a.data<double>();
  auto y = b.data<double>();
  return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

void zero_all(nets::ParamStore& p, const std::string& prefix) {
  for (auto& [name, t] : p)
    if (name.rfind(prefix, 0) == 0)
      for (int64_t i = 0; i < t.numel(); ++i) t.set(i, 0.0);
}

}  // namespace

TEST_CASE("pixel_norm") {
  SUBCASE("constant vector normalizes to ones") {
    Tensor z = Tensor::full({1, 64}, 3.7, DType::F64);
    Tensor n = op::pixel_norm(z);
    for (int64_t i = 0; i < n.numel(); ++i) CHECK(n.at(i) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("scale invariance") {
    Tensor z = randn({2, 16}, 1, DType::F64);
    Tensor zc = op::mul_scalar(z, 37.5);
    Tensor a = op::pixel_norm(z);
    Tensor b = op::pixel_norm(zc);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) < 1e-6);
  }
  SUBCASE("standard basis vector in dim 4") {
    Tensor z = Tensor::from_f64({1, 4}, {1.0, 0.0, 0.0, 0.0});
    Tensor n = op::pixel_norm(z);
    CHECK(n.at(0) == doctest::Approx(2.0).epsilon(1e-6));
    for (int64_t i = 1; i < 4; ++i) CHECK(n.at(i) == 0.0);
  }
}

TEST_CASE("num_style_layers") {
  CHECK(nets::num_style_layers(5) == 9);
  CHECK(nets::num_style_layers(1) == 1);
  CHECK(nets::num_style_layers(3) == 5);
  // the published 9-block numbering splits low/high at 4 vs 5..9
  CHECK(nets::num_style_layers(5) - 4 == 5);
}

TEST_CASE("mapping_forward") {
  ModelConfig cfg = tiny_config(2, 4);
  CounterRng rng(7, Stream::Test);
  auto params = nets::init_generator(cfg, rng);
  Tensor z = randn({3, 4}, 2);

  SUBCASE("deterministic") {
    Tensor a = nets::mapping_forward(cfg, params, z);
    Tensor b = nets::mapping_forward(cfg, params, z);
    CHECK(bitwise_equal(a, b));
  }
  SUBCASE("zero weights and biases produce zero w") {
    auto zp = params;
    for (auto& [name, t] : zp) {
      Tensor c = t.clone();
      zp[name] = c;
    }
    zero_all(zp, "g.mapping.");
    Tensor w = nets::mapping_forward(cfg, zp, z);
    for (int64_t i = 0; i < w.numel(); ++i) CHECK(w.at(i) == 0.0);
  }
  SUBCASE("size mismatch") {
    CHECK_THROWS_AS(nets::mapping_forward(cfg, params, randn({1, 5}, 3)), std::invalid_argument);
  }
  SUBCASE("gradient check through the full mapping") {
    CounterRng r64(9, Stream::Test);
    auto p64 = nets::init_generator(cfg, r64, DType::F64);
    Tensor z64 = randn({2, 4}, 10, DType::F64);
    Tensor probe = randn({2, 4}, 11, DType::F64);
    std::vector<Tensor> wrt{z64};
    std::vector<std::string> names;
    for (auto& [name, t] : p64)
      if (name.rfind("g.mapping.", 0) == 0) {
        wrt.push_back(t);
        names.push_back(name);
      }
    double err = grad_check(
        [&](const std::vector<Tensor>& in) {
          auto pp = p64;
          for (size_t i = 1; i < in.size(); ++i) pp[names[i - 1]] = in[i];
          return op::sum_all(op::mul(nets::mapping_forward(cfg, pp, in[0]), probe));
        },
        wrt);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("modulate_demodulate") {
  SUBCASE("unit style and unit-norm rows pass through") {
    Tensor w = randn({3, 2, 3, 3, 3}, 20, DType::F64);
    for (int64_t k = 0; k < 3; ++k) {
      double ss = 0;
      for (int64_t j = 0; j < 54; ++j) ss += w.at(k * 54 + j) * w.at(k * 54 + j);
      for (int64_t j = 0; j < 54; ++j) w.set(k * 54 + j, w.at(k * 54 + j) / std::sqrt(ss));
    }
    Tensor s = Tensor::full({2}, 1.0, DType::F64);
    Tensor out = nets::modulate_demodulate(w, s, true);
    for (int64_t i = 0; i < w.numel(); ++i)
      CHECK(out.at(i) == doctest::Approx(w.at(i)).epsilon(1e-6));
  }
  SUBCASE("positive-scale invariance of the demodulated weight") {
    Tensor w = randn({4, 3, 3, 3, 3}, 21, DType::F64);
    Tensor s = randn({3}, 22, DType::F64);
    for (int64_t i = 0; i < 3; ++i) s.set(i, std::abs(s.at(i)) + 0.1);
    Tensor sc = op::mul_scalar(s, 13.0);
    Tensor a = nets::modulate_demodulate(w, s, true);
    Tensor b = nets::modulate_demodulate(w, sc, true);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) < 1e-5);
  }
  SUBCASE("demodulated per-channel norm is 1") {
    Tensor w = randn({1, 2, 3, 3, 3}, 23, DType::F64);
    Tensor s = Tensor::from_f64({2}, {2.0, 1.0});
    Tensor out = nets::modulate_demodulate(w, s, true);
    double ss = 0;
    for (int64_t i = 0; i < out.numel(); ++i) ss += out.at(i) * out.at(i);
    CHECK(std::sqrt(ss) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("style length mismatch") {
    CHECK_THROWS_AS(nets::modulate_demodulate(randn({2, 3, 3, 3, 3}, 24), randn({4}, 25), true),
                    std::invalid_argument);
  }
}

TEST_CASE("style layer behavior via a depth-1 synthesis") {
  ModelConfig cfg = tiny_config(1, 1, 4);
  CounterRng rng(30, Stream::Test);
  auto params = nets::init_generator(cfg, rng);
  // make the output conv the identity on the single channel
  const double out_scale = 1.0;  // conv_scale(1, gain 1) == 1
  params["g.out.conv.weight"].set(0, 1.0 / out_scale);
  zero_all(params, "g.out.affine.weight");
  Tensor z = randn({1, 4}, 31);

  SUBCASE("zero noise strength makes output independent of the noise map") {
    CounterRng n1(1, Stream::Test), n2(2, Stream::Test);
    auto a = nets::generator_forward(cfg, params, z, Tensor(), -1, nets::NoiseMode::Random, &n1);
    auto b = nets::generator_forward(cfg, params, z, Tensor(), -1, nets::NoiseMode::Random, &n2);
    CHECK(bitwise_equal(a, b));
  }
  SUBCASE("zero conv weights leave scaled, activated noise") {
    zero_all(params, "g.layer0.conv.weight");
    params["g.layer0.noise_strength"].set(0, 0.8);
    auto noise = nets::make_noise(cfg, rng, 1);
    Tensor out = nets::generator_forward(cfg, params, z, Tensor(), -1, nets::NoiseMode::Fixed,
                                         nullptr, &noise);
    for (int64_t i = 0; i < out.numel(); ++i) {
      const double n = noise[0].at(i);
      const double expect = std::sqrt(2.0) * (0.8 * n >= 0 ? 0.8 * n : 0.2 * 0.8 * n);
      CHECK(out.at(i) == doctest::Approx(expect).epsilon(1e-5));
    }
  }
}

TEST_CASE("demodulated stack keeps activation variance in band") {
  // Nine stacked style convolutions with orthonormal rows and unit styles.
  // Statistics are taken on the interior voxels whose receptive field never
  // touches the zero padding; the boundary ring loses variance by
  // construction, which is what the per-layer noise and biases absorb in a
  // trained network.
  const int64_t C = 16, S = 26;
  CounterRng rng(0, Stream::Test);
  Tensor x({1, C, S, S, S}, DType::F32);
  fill_normal(x, rng);
  const double var_in = 1.0;
  Tensor s = Tensor::full({C}, 1.0, DType::F32);
  Tensor cur = x;
  ad::NoGrad ng;
  for (int layer = 0; layer < 9; ++layer) {
    // Gram-Schmidt over rows of [C, C*27]
    Tensor w({C, C, 3, 3, 3}, DType::F32);
    fill_normal(w, rng);
    const int64_t rowlen = C * 27;
    for (int64_t r = 0; r < C; ++r) {
      for (int64_t p = 0; p < r; ++p) {
        double dot = 0;
        for (int64_t j = 0; j < rowlen; ++j) dot += w.at(r * rowlen + j) * w.at(p * rowlen + j);
        for (int64_t j = 0; j < rowlen; ++j)
          w.set(r * rowlen + j, w.at(r * rowlen + j) - dot * w.at(p * rowlen + j));
      }
      double ss = 0;
      for (int64_t j = 0; j < rowlen; ++j) ss += w.at(r * rowlen + j) * w.at(r * rowlen + j);
      for (int64_t j = 0; j < rowlen; ++j) w.set(r * rowlen + j, w.at(r * rowlen + j) / std::sqrt(ss));
    }
    Tensor wmod = nets::modulate_demodulate(w, s, true);
    cur = op::mul_scalar(op::leaky_relu(op::conv3d(cur, wmod, 1, 1), 0.2), std::sqrt(2.0));
  }
  const int64_t mar = 9;
  double mean = 0, m2 = 0;
  int64_t cnt = 0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t z = mar; z < S - mar; ++z)
      for (int64_t y = mar; y < S - mar; ++y)
        for (int64_t xx = mar; xx < S - mar; ++xx) {
          const double v = cur.at(((c * S + z) * S + y) * S + xx);
          mean += v;
          m2 += v * v;
          ++cnt;
        }
  mean /= static_cast<double>(cnt);
  const double var = m2 / static_cast<double>(cnt) - mean * mean;
  CHECK(var > 0.25 * var_in);
  CHECK(var < 4.0 * var_in);
}

TEST_CASE("synthesis output shapes follow the doubling rule") {
  SUBCASE("paper shapes via config arithmetic") {
    ModelConfig c5 = preset_config("2mm-fd96");
    CHECK(c5.output_shape() == std::array<int64_t, 3>{80, 96, 112});
    ModelConfig c6 = preset_config("1mm-fd16");
    CHECK(c6.output_shape() == std::array<int64_t, 3>{160, 192, 224});
    ModelConfig desk = preset_config("desk-fd16-l3");
    CHECK(desk.output_shape() == std::array<int64_t, 3>{20, 24, 28});
    for (int L = 1; L <= 6; ++L) {
      ModelConfig c = tiny_config(L, 2);
      const int64_t f = int64_t{1} << (L - 1);
      CHECK(c.output_shape() == std::array<int64_t, 3>{5 * f, 6 * f, 7 * f});
    }
  }
  SUBCASE("actual forward at L=3") {
    ModelConfig cfg = tiny_config(3, 2);
    CounterRng rng(50, Stream::Test);
    auto params = nets::init_generator(cfg, rng);
    ad::NoGrad ng;
    Tensor out = nets::generator_forward(cfg, params, randn({1, 4}, 51), Tensor(), -1,
                                         nets::NoiseMode::Zero, nullptr);
    CHECK(out.shape() == std::vector<int64_t>{1, 1, 20, 24, 28});
  }
  SUBCASE("wrong style count") {
    ModelConfig cfg = tiny_config(2, 2);
    CounterRng rng(52, Stream::Test);
    auto params = nets::init_generator(cfg, rng);
    std::vector<Tensor> w(3, randn({1, 4}, 53));  // needs 2L-1+1 = 4
    CHECK_THROWS_AS(nets::synthesis_forward(cfg, params, w, {}), std::invalid_argument);
  }
}

TEST_CASE("generator mixing identities and determinism") {
  ModelConfig cfg = tiny_config(2, 4);
  CounterRng rng(60, Stream::Test);
  auto params = nets::init_generator(cfg, rng);
  Tensor za = randn({1, 4}, 61);
  Tensor zb = randn({1, 4}, 62);
  auto noise = nets::make_noise(cfg, rng, 1);
  ad::NoGrad ng;
  auto gen = [&](const Tensor& a, const Tensor& b, int cutoff) {
    return nets::generator_forward(cfg, params, a, b, cutoff, nets::NoiseMode::Fixed, nullptr,
                                   &noise);
  };
  const int top = cfg.num_style_layers();

  CHECK(bitwise_equal(gen(za, zb, top), gen(za, Tensor(), -1)));
  CHECK(bitwise_equal(gen(za, zb, 0), gen(zb, Tensor(), -1)));
  CHECK(bitwise_equal(gen(za, zb, 1), gen(za, zb, 1)));
  CHECK_THROWS_AS(gen(za, zb, top + 1), std::invalid_argument);
  CHECK_THROWS_AS(gen(za, zb, -2), std::invalid_argument);
}

TEST_CASE("mixing locality: layers at or below the cutoff are untouched") {
  ModelConfig cfg = tiny_config(3, 4);
  CounterRng rng(70, Stream::Test);
  auto params = nets::init_generator(cfg, rng);
  Tensor wa = nets::mapping_forward(cfg, params, op::pixel_norm(randn({1, 4}, 71)));
  Tensor wb = nets::mapping_forward(cfg, params, op::pixel_norm(randn({1, 4}, 72)));
  Tensor wc = nets::mapping_forward(cfg, params, op::pixel_norm(randn({1, 4}, 73)));
  auto noise = nets::make_noise(cfg, rng, 1);
  const int layers = cfg.num_style_layers();
  const int k = 3;
  auto wl = [&](const Tensor& hi) {
    std::vector<Tensor> w;
    for (int i = 0; i <= layers; ++i) w.push_back(i < k ? wa : hi);
    return w;
  };
  ad::NoGrad ng;
  std::vector<Tensor> taps_b, taps_c;
  nets::synthesis_forward(cfg, params, wl(wb), noise, &taps_b);
  nets::synthesis_forward(cfg, params, wl(wc), noise, &taps_c);
  REQUIRE(taps_b.size() == static_cast<size_t>(layers));
  for (int i = 0; i < k; ++i)
    CHECK(bitwise_equal(taps_b[static_cast<size_t>(i)], taps_c[static_cast<size_t>(i)]));
  CHECK_FALSE(bitwise_equal(taps_b[static_cast<size_t>(k)], taps_c[static_cast<size_t>(k)]));
}

TEST_CASE("discriminator") {
  ModelConfig cfg = tiny_config(2, 4);
  CounterRng rng(80, Stream::Test);
  auto params = nets::init_discriminator(cfg, rng);
  Tensor x = randn({3, 1, 10, 12, 14}, 81);

  SUBCASE("output shape and zero head") {
    zero_all(params, "d.final.dense1");
    Tensor logits = nets::discriminator_forward(cfg, params, x);
    CHECK(logits.shape() == std::vector<int64_t>{3, 1});
    for (int64_t i = 0; i < 3; ++i) CHECK(logits.at(i) == 0.0);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(nets::discriminator_forward(cfg, params, randn({1, 1, 5, 6, 7}, 82)),
                    std::invalid_argument);
  }
  SUBCASE("gradient check w.r.t. the input volume") {
    CounterRng r64(83, Stream::Test);
    auto p64 = nets::init_discriminator(cfg, r64, DType::F64);
    Tensor v = randn({1, 1, 10, 12, 14}, 84, DType::F64);
    double err = grad_check(
        [&](const std::vector<Tensor>& in) {
          return op::sum_all(nets::discriminator_forward(cfg, p64, in[0]));
        },
        {v});
    CHECK(err < 1e-5);
  }
}

TEST_CASE("count_params reproduces the published table") {
  const int64_t fd96 = nets::count_params(preset_config("2mm-fd96"));
  const int64_t fd64 = nets::count_params(preset_config("2mm-fd64"));
  const int64_t fd32 = nets::count_params(preset_config("2mm-fd32"));
  const int64_t fd16 = nets::count_params(preset_config("2mm-fd16"));
  CHECK(std::abs(fd96 - 6.6e6) / 6.6e6 < 0.20);
  CHECK(std::abs(fd64 - 3.0e6) / 3.0e6 < 0.20);
  CHECK(std::abs(fd32 - 0.9e6) / 0.9e6 < 0.20);
  CHECK(std::abs(fd16 - 0.2e6) / 0.2e6 < 0.30);
  MESSAGE("params: fd96=" << fd96 << " fd64=" << fd64 << " fd32=" << fd32 << " fd16=" << fd16);
}

TEST_CASE("config presets and key=value round trip") {
  ModelConfig c = preset_config("desk-fd16-l3");
  ModelConfig back = parse_config_text(config_to_text(c));
  CHECK(back == c);
  CHECK_THROWS_AS(preset_config("nope"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("bogus_key=3\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("levels=2\nminibatch_schedule=1\n"), std::invalid_argument);
  // schedule selection uses the final-resolution entry
  CHECK(preset_config("2mm-fd96").minibatch() == 16);
  CHECK(preset_config("2mm-fd96").minibatch_schedule.size() == 5);
  CHECK(preset_config("1mm-fd16").minibatch_schedule.size() == 6);
}
