#include "stylevox/nets.hpp"

#include <cmath>

#include "stylevox/autodiff.hpp"
#include "stylevox/ops.hpp"
#include "stylevox/rng.hpp"

namespace sv::nets {

namespace op = sv::ops;

namespace {

constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kMappingLrMul = 0.01;

double conv_scale(int64_t fan_in, double gain) { return gain / std::sqrt(static_cast<double>(fan_in)); }

std::string layer_key(int i, const char* field) {
  return "g.layer" + std::to_string(i) + "." + field;
}

std::string block_key(int b, const char* field) {
  return "d.block" + std::to_string(b) + "." + field;
}

// appends mapping layer shapes; layer i maps width in -> out
void mapping_shapes(const ModelConfig& cfg, ShapeSpec& s) {
  for (int i = 0; i < cfg.mapping_layers; ++i) {
    const int64_t in = i == 0 ? cfg.latent_size : cfg.mapping_fmaps;
    const int64_t out = i == cfg.mapping_layers - 1 ? cfg.latent_size : cfg.mapping_fmaps;
    const std::string base = "g.mapping.fc" + std::to_string(i);
    s[base + ".weight"] = {out, in};
    s[base + ".bias"] = {out};
  }
}

Tensor broadcast_style(const Tensor& s, const std::vector<int64_t>& wshape) {
  return op::broadcast_axes(op::reshape(s, {1, wshape[1], 1, 1, 1}), wshape);
}

// [N,C,D,H,W] + noise [1 or N, 1, D,H,W] * strength
Tensor add_noise(const Tensor& x, const Tensor& noise, const Tensor& strength) {
  Tensor n = noise;
  if (n.extent(0) != x.extent(0))
    n = op::broadcast_axes(n, {x.extent(0), 1, n.extent(2), n.extent(3), n.extent(4)});
  n = op::broadcast_axes(n, x.shape());
  Tensor sc = op::broadcast_axes(op::reshape(strength, {1, 1, 1, 1, 1}), x.shape());
  return op::add(x, op::mul(sc, n));
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  return op::add(x, op::broadcast_axes(op::reshape(bias, {1, bias.extent(0), 1, 1, 1}), x.shape()));
}

}  // namespace

int num_style_layers(int levels) {
  if (levels < 1) throw std::invalid_argument("num_style_layers: levels must be >= 1");
  return 2 * levels - 1;
}

ShapeSpec generator_param_shapes(const ModelConfig& cfg) {
  cfg.validate();
  ShapeSpec s;
  mapping_shapes(cfg, s);
  const int64_t fd = cfg.fmap_depth;
  const int64_t lat = cfg.latent_size;
  s["g.const"] = {1, fd, cfg.base_shape[0], cfg.base_shape[1], cfg.base_shape[2]};
  for (int i = 0; i < cfg.num_style_layers(); ++i) {
    s[layer_key(i, "conv.weight")] = {fd, fd, 3, 3, 3};
    s[layer_key(i, "affine.weight")] = {fd, lat};
    s[layer_key(i, "affine.bias")] = {fd};
    s[layer_key(i, "noise_strength")] = {1};
    s[layer_key(i, "bias")] = {fd};
  }
  s["g.out.conv.weight"] = {1, fd, 1, 1, 1};
  s["g.out.affine.weight"] = {fd, lat};
  s["g.out.affine.bias"] = {fd};
  s["g.out.bias"] = {1};
  return s;
}

ShapeSpec discriminator_param_shapes(const ModelConfig& cfg) {
  cfg.validate();
  ShapeSpec s;
  const int64_t fd = cfg.fmap_depth;
  s["d.from.weight"] = {fd, 1, 1, 1, 1};
  s["d.from.bias"] = {fd};
  for (int b = 0; b < cfg.levels - 1; ++b) {
    s[block_key(b, "conv0.weight")] = {fd, fd, 3, 3, 3};
    s[block_key(b, "conv0.bias")] = {fd};
    s[block_key(b, "conv1.weight")] = {fd, fd, 3, 3, 3};
    s[block_key(b, "conv1.bias")] = {fd};
    s[block_key(b, "skip.weight")] = {fd, fd, 1, 1, 1};
  }
  s["d.final.conv.weight"] = {fd, fd + 1, 3, 3, 3};  // +1: minibatch-stddev feature
  s["d.final.conv.bias"] = {fd};
  const int64_t base_voxels = cfg.base_shape[0] * cfg.base_shape[1] * cfg.base_shape[2];
  s["d.final.dense0.weight"] = {fd, fd * base_voxels};
  s["d.final.dense0.bias"] = {fd};
  s["d.final.dense1.weight"] = {1, fd};
  s["d.final.dense1.bias"] = {1};
  return s;
}

int64_t count_params(const ModelConfig& cfg) {
  int64_t n = 0;
  for (const auto& [name, shape] : generator_param_shapes(cfg)) n += shape_numel(shape);
  for (const auto& [name, shape] : discriminator_param_shapes(cfg)) n += shape_numel(shape);
  return n;
}

namespace {

ParamStore init_params(const ShapeSpec& shapes, CounterRng& rng, DType dt) {
  ParamStore store;
  for (const auto& [name, shape] : shapes) {
    Tensor t(shape, dt);
    const bool is_mapping = name.rfind("g.mapping.", 0) == 0;
    const bool is_weight = name.size() > 7 && name.rfind(".weight") == name.size() - 7;
    const bool is_affine_bias = name.find("affine.bias") != std::string::npos;
    if (name == "g.const") {
      fill_normal(t, rng);
    } else if (is_weight) {
      fill_normal(t, rng, 0.0, is_mapping ? 1.0 / kMappingLrMul : 1.0);
    } else if (is_affine_bias) {
      for (int64_t i = 0; i < t.numel(); ++i) t.set(i, 1.0);
    }
    // remaining biases and noise strengths start at zero
    store[name] = ad::make_leaf(t);
  }
  return store;
}

}  // namespace

ParamStore init_generator(const ModelConfig& cfg, CounterRng& rng, DType dt) {
  return init_params(generator_param_shapes(cfg), rng, dt);
}

ParamStore init_discriminator(const ModelConfig& cfg, CounterRng& rng, DType dt) {
  return init_params(discriminator_param_shapes(cfg), rng, dt);
}

Tensor modulate_demodulate(const Tensor& weight, const Tensor& style, bool demod, double eps) {
  if (weight.rank() != 5) throw std::invalid_argument("modulate_demodulate: rank-5 weight expected");
  if (style.rank() != 1 || style.extent(0) != weight.extent(1))
    throw std::invalid_argument("modulate_demodulate: style length " +
                                std::to_string(style.numel()) + " does not match " +
                                std::to_string(weight.extent(1)) + " input channels");
  if (eps <= 0.0) throw std::invalid_argument("modulate_demodulate: eps must be positive");
  Tensor w = op::mul(weight, broadcast_style(style, weight.shape()));
  if (!demod) return w;
  Tensor norm = op::sqrt(op::add_scalar(op::sum_axes(op::square(w), {1, 2, 3, 4}), eps));
  return op::div(w, op::broadcast_axes(norm, w.shape()));
}

Tensor mapping_forward(const ModelConfig& cfg, const ParamStore& params, const Tensor& z) {
  if (z.rank() != 2 || z.extent(1) != cfg.latent_size)
    throw std::invalid_argument("mapping_forward: z must be [N," +
                                std::to_string(cfg.latent_size) + "]");
  Tensor x = z;
  for (int i = 0; i < cfg.mapping_layers; ++i) {
    const std::string base = "g.mapping.fc" + std::to_string(i);
    x = op::dense(x, params.at(base + ".weight"), params.at(base + ".bias"), kMappingLrMul);
    x = op::leaky_relu(x, cfg.lrelu_alpha);
  }
  return x;
}

std::vector<Tensor> make_noise(const ModelConfig& cfg, CounterRng& rng, int64_t batch, DType dt) {
  std::vector<Tensor> maps;
  for (int i = 0; i < cfg.num_style_layers(); ++i) {
    const int level = (i + 1) / 2;
    auto sp = cfg.level_shape(level);
    Tensor t({batch, 1, sp[0], sp[1], sp[2]}, dt);
    fill_normal(t, rng);
    maps.push_back(std::move(t));
  }
  return maps;
}

std::vector<Tensor> zero_noise(const ModelConfig& cfg, DType dt) {
  std::vector<Tensor> maps;
  for (int i = 0; i < cfg.num_style_layers(); ++i) {
    const int level = (i + 1) / 2;
    auto sp = cfg.level_shape(level);
    maps.push_back(Tensor::zeros({1, 1, sp[0], sp[1], sp[2]}, dt));
  }
  return maps;
}

namespace {

// one modulated conv + noise + bias + activation for a single sample
Tensor style_layer(const ModelConfig& cfg, const ParamStore& params, int layer, const Tensor& x,
                   const Tensor& w_row, const Tensor& noise_row) {
  const Tensor& cw = params.at(layer_key(layer, "conv.weight"));
  Tensor s2 = op::dense(w_row, params.at(layer_key(layer, "affine.weight")),
                        params.at(layer_key(layer, "affine.bias")), 1.0);
  Tensor style = op::reshape(s2, {s2.extent(1)});
  const double scale = conv_scale(cw.extent(1) * 27, kSqrt2);
  Tensor wmod = modulate_demodulate(op::mul_scalar(cw, scale), style, /*demod=*/true);
  Tensor y = op::conv3d(x, wmod, 1, 1);
  if (noise_row.defined()) y = add_noise(y, noise_row, params.at(layer_key(layer, "noise_strength")));
  y = add_channel_bias(y, params.at(layer_key(layer, "bias")));
  // LReLU with the sqrt(2) gain the demodulation would otherwise cancel
  return op::mul_scalar(op::leaky_relu(y, cfg.lrelu_alpha), kSqrt2);
}

Tensor noise_row_for(const std::vector<Tensor>& noise, int layer, int64_t n) {
  if (noise.empty()) return {};
  const Tensor& m = noise[static_cast<size_t>(layer)];
  if (!m.defined()) return {};
  return m.extent(0) == 1 ? m : op::slice(m, 0, n, 1);
}

}  // namespace

Tensor synthesis_forward(const ModelConfig& cfg, const ParamStore& params,
                         const std::vector<Tensor>& w_layers, const std::vector<Tensor>& noise,
                         std::vector<Tensor>* taps) {
  const int layers = cfg.num_style_layers();
  if (static_cast<int>(w_layers.size()) != layers + 1)
    throw std::invalid_argument("synthesis_forward: expected " + std::to_string(layers + 1) +
                                " per-layer w tensors, got " + std::to_string(w_layers.size()));
  if (!noise.empty() && static_cast<int>(noise.size()) != layers)
    throw std::invalid_argument("synthesis_forward: expected " + std::to_string(layers) +
                                " noise maps");
  for (const auto& w : w_layers)
    if (w.rank() != 2 || w.extent(1) != cfg.latent_size)
      throw std::invalid_argument("synthesis_forward: w tensors must be [N,latent]");
  const int64_t batch = w_layers[0].extent(0);
  if (taps && batch != 1)
    throw std::invalid_argument("synthesis_forward: taps require batch 1");
  const Tensor& cst = params.at("g.const");
  const Tensor& ow = params.at("g.out.conv.weight");

  Tensor out;
  for (int64_t n = 0; n < batch; ++n) {
    Tensor x = cst;
    int layer = 0;
    x = style_layer(cfg, params, layer, x, op::slice(w_layers[0], 0, n, 1),
                    noise_row_for(noise, 0, n));
    if (taps) taps->push_back(x);
    ++layer;
    for (int level = 1; level < cfg.levels; ++level) {
      x = op::upsample_nearest3d(x, 2);
      for (int rep = 0; rep < 2; ++rep, ++layer) {
        x = style_layer(cfg, params, layer, x,
                        op::slice(w_layers[static_cast<size_t>(layer)], 0, n, 1),
                        noise_row_for(noise, layer, n));
        if (taps) taps->push_back(x);
      }
    }
    // modulated (not demodulated) 1x1x1 output conv, gain 1, no activation
    Tensor s2 = op::dense(op::slice(w_layers[static_cast<size_t>(layers)], 0, n, 1),
                          params.at("g.out.affine.weight"), params.at("g.out.affine.bias"), 1.0);
    Tensor wmod = modulate_demodulate(op::mul_scalar(ow, conv_scale(ow.extent(1), 1.0)),
                                      op::reshape(s2, {s2.extent(1)}), /*demod=*/false);
    Tensor img = add_channel_bias(op::conv3d(x, wmod, 1, 0), params.at("g.out.bias"));
    out = out.defined() ? op::concat(out, img, 0) : img;
  }
  return out;
}

Tensor generator_forward(const ModelConfig& cfg, const ParamStore& params, const Tensor& z_a,
                         const Tensor& z_b, int mixing_cutoff, NoiseMode mode,
                         CounterRng* noise_rng, const std::vector<Tensor>* fixed_noise) {
  const int layers = cfg.num_style_layers();
  if (mixing_cutoff != -1 && (mixing_cutoff < 0 || mixing_cutoff > layers))
    throw std::invalid_argument("generator_forward: mixing cutoff out of [0," +
                                std::to_string(layers) + "]");
  Tensor w_a = mapping_forward(cfg, params, op::pixel_norm(z_a));
  Tensor w_b = z_b.defined() ? mapping_forward(cfg, params, op::pixel_norm(z_b)) : Tensor();

  std::vector<Tensor> w_layers;
  for (int i = 0; i <= layers; ++i) {
    if (!w_b.defined() || mixing_cutoff < 0) {
      w_layers.push_back(w_a);
    } else {
      // the output conv (index layers) follows the last style layer's source
      const int idx = i == layers ? layers - 1 : i;
      w_layers.push_back(idx < mixing_cutoff ? w_a : w_b);
    }
  }

  std::vector<Tensor> noise;
  switch (mode) {
    case NoiseMode::Zero:
      break;
    case NoiseMode::Random:
      if (!noise_rng) throw std::invalid_argument("generator_forward: random noise needs an rng");
      noise = make_noise(cfg, *noise_rng, z_a.extent(0),
                         z_a.dtype());
      break;
    case NoiseMode::Fixed:
      if (!fixed_noise) throw std::invalid_argument("generator_forward: fixed noise maps missing");
      noise = *fixed_noise;
      break;
  }
  if (!cfg.noise_per_layer) noise.clear();
  return synthesis_forward(cfg, params, w_layers, noise);
}

Tensor mix_styles(const ModelConfig& cfg, const ParamStore& params, const Tensor& w_low,
                  const Tensor& w_high, int cutoff, const std::vector<Tensor>& noise) {
  const int layers = cfg.num_style_layers();
  if (cutoff < 0 || cutoff > layers)
    throw std::invalid_argument("mix_styles: cutoff out of [0," + std::to_string(layers) + "]");
  std::vector<Tensor> w_layers;
  for (int i = 0; i <= layers; ++i) {
    const int idx = i == layers ? layers - 1 : i;
    w_layers.push_back(idx < cutoff ? w_low : w_high);
  }
  return synthesis_forward(cfg, params, w_layers, noise);
}

namespace {

Tensor minibatch_stddev(const Tensor& x) {
  const int64_t N = x.extent(0), C = x.extent(1), D = x.extent(2), H = x.extent(3),
                W = x.extent(4);
  int64_t g = std::min<int64_t>(4, N);
  while (N % g != 0) --g;
  const int64_t m = N / g;
  Tensor xr = op::reshape(x, {g, m, C, D, H, W});
  Tensor mu = op::mean_axes(xr, {0});
  Tensor dev = op::sub(xr, op::broadcast_axes(mu, xr.shape()));
  Tensor var = op::mean_axes(op::square(dev), {0});
  Tensor sd = op::sqrt(op::add_scalar(var, 1e-8));
  Tensor feat = op::mean_axes(sd, {2, 3, 4, 5});             // [1,m,1,1,1,1]
  Tensor full = op::broadcast_axes(feat, {g, m, 1, D, H, W});
  return op::concat(x, op::reshape(full, {N, 1, D, H, W}), 1);
}

}  // namespace

Tensor discriminator_forward(const ModelConfig& cfg, const ParamStore& params,
                             const Tensor& volume) {
  const auto want = cfg.output_shape();
  if (volume.rank() != 5 || volume.extent(1) != 1 || volume.extent(2) != want[0] ||
      volume.extent(3) != want[1] || volume.extent(4) != want[2])
    throw std::invalid_argument("discriminator_forward: volume shape " + shape_str(volume.shape()) +
                                " does not match config output " +
                                shape_str({want[0], want[1], want[2]}));
  const int64_t fd = cfg.fmap_depth;
  auto scaled = [&](const std::string& name, int64_t fan, double gain) {
    return op::mul_scalar(params.at(name), conv_scale(fan, gain));
  };

  Tensor y = op::leaky_relu(
      op::conv3d(volume, scaled("d.from.weight", 1, kSqrt2), params.at("d.from.bias"), 1, 0),
      cfg.lrelu_alpha);
  for (int b = 0; b < cfg.levels - 1; ++b) {
    Tensor t = op::leaky_relu(op::conv3d(y, scaled(block_key(b, "conv0.weight"), fd * 27, kSqrt2),
                                         params.at(block_key(b, "conv0.bias")), 1, 1),
                              cfg.lrelu_alpha);
    t = op::leaky_relu(op::conv3d(t, scaled(block_key(b, "conv1.weight"), fd * 27, kSqrt2),
                                  params.at(block_key(b, "conv1.bias")), 1, 1),
                       cfg.lrelu_alpha);
    t = op::avgpool3d(t, 2);
    Tensor skip = op::avgpool3d(op::conv3d(y, scaled(block_key(b, "skip.weight"), fd, 1.0), 1, 0), 2);
    y = op::mul_scalar(op::add(t, skip), 1.0 / kSqrt2);
  }
  y = minibatch_stddev(y);
  y = op::leaky_relu(op::conv3d(y, scaled("d.final.conv.weight", (fd + 1) * 27, kSqrt2),
                                params.at("d.final.conv.bias"), 1, 1),
                     cfg.lrelu_alpha);
  const int64_t flat = fd * cfg.base_shape[0] * cfg.base_shape[1] * cfg.base_shape[2];
  y = op::reshape(y, {y.extent(0), flat});
  y = op::leaky_relu(op::dense(y, params.at("d.final.dense0.weight"),
                               params.at("d.final.dense0.bias")),
                     cfg.lrelu_alpha);
  return op::dense(y, params.at("d.final.dense1.weight"), params.at("d.final.dense1.bias"));
}

std::vector<Tensor> param_tensors(const ParamStore& store) {
  std::vector<Tensor> out;
  out.reserve(store.size());
  for (const auto& [name, t] : store) out.push_back(t);
  return out;
}

std::vector<std::string> param_names(const ParamStore& store) {
  std::vector<std::string> out;
  out.reserve(store.size());
  for (const auto& [name, t] : store) out.push_back(name);
  return out;
}

}  // namespace sv::nets
