#include "stylevox/projection.hpp"

#include <cmath>

#include "stylevox/autodiff.hpp"
#include "stylevox/ops.hpp"
#include "stylevox/rng.hpp"
#include "stylevox/training.hpp"

namespace sv::projection {

namespace op = sv::ops;

int downsample_factor_for(const std::array<int64_t, 3>& dims) {
  int f = 8;
  while (f > 1 && (dims[0] % f || dims[1] % f || dims[2] % f)) f /= 2;
  return f;
}

std::tuple<Tensor, Tensor, Tensor> projection_loss(const Tensor& target, const Tensor& generated,
                                                   double lambda_down, int factor) {
  if (!same_shape(target, generated))
    throw std::invalid_argument("projection_loss: shape mismatch " + shape_str(target.shape()) +
                                " vs " + shape_str(generated.shape()));
  Tensor diff = op::sub(generated, target);
  Tensor mse_full = op::mean_all(op::square(diff));
  Tensor mse_down =
      factor > 1
          ? op::mean_all(op::square(op::sub(op::avgpool3d(generated, factor),
                                            op::avgpool3d(target, factor))))
          : mse_full;
  Tensor total = op::add(mse_full, op::mul_scalar(mse_down, lambda_down));
  return {total, mse_full, mse_down};
}

Tensor w_avg(const ModelConfig& cfg, const nets::ParamStore& params, uint64_t seed,
             int64_t samples) {
  if (samples < 1) throw std::invalid_argument("w_avg: samples must be >= 1");
  ad::NoGrad ng;
  CounterRng rng(seed, Stream::WAvg);
  Tensor acc = Tensor::zeros({1, cfg.latent_size}, DType::F64);
  const int64_t chunk = 512;
  for (int64_t done = 0; done < samples;) {
    const int64_t n = std::min(chunk, samples - done);
    Tensor z({n, cfg.latent_size}, DType::F32);
    fill_normal(z, rng);
    Tensor w = nets::mapping_forward(cfg, params, op::pixel_norm(z));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < cfg.latent_size; ++j)
        acc.set(j, acc.at(j) + w.at(i * cfg.latent_size + j));
    done += n;
  }
  Tensor out({1, cfg.latent_size}, DType::F32);
  for (int64_t j = 0; j < cfg.latent_size; ++j)
    out.set(j, acc.at(j) / static_cast<double>(samples));
  return out;
}

namespace {

// mild penalty against spatially correlated noise, off by default
Tensor noise_decorrelation(const std::vector<Tensor>& noise) {
  Tensor total = Tensor::scalar(0.0, DType::F32);
  for (const auto& n : noise) {
    const auto& s = n.shape();
    for (int axis = 2; axis < 5; ++axis) {
      if (s[static_cast<size_t>(axis)] < 2) continue;
      Tensor a = op::slice(n, axis, 0, s[static_cast<size_t>(axis)] - 1);
      Tensor b = op::slice(n, axis, 1, s[static_cast<size_t>(axis)] - 1);
      total = op::add(total, op::square(op::mean_all(op::mul(a, b))));
    }
    total = op::add(total, op::square(op::mean_all(n)));
  }
  return total;
}

}  // namespace

ProjectionResult project(const ModelConfig& cfg, const nets::ParamStore& params,
                         const Volume& target, const ProjectionOptions& opts) {
  cfg.validate();
  if (opts.steps < 1) throw std::invalid_argument("project: steps must be >= 1");
  const auto want = cfg.output_shape();
  if (target.dx != want[0] || target.dy != want[1] || target.dz != want[2])
    throw std::invalid_argument("project: target shape " +
                                shape_str({target.dx, target.dy, target.dz}) +
                                " does not match generator output " +
                                shape_str({want[0], want[1], want[2]}));

  const int layers = cfg.num_style_layers();
  const int factor = downsample_factor_for(want);
  Tensor target_t = volume_to_tensor(target);

  Tensor w0 = w_avg(cfg, params, opts.seed, opts.w_avg_samples);
  Tensor w;
  if (opts.extended_w) {
    Tensor rows = w0;
    for (int i = 1; i <= layers; ++i) rows = op::concat(rows, w0, 0);
    w = ad::make_leaf(rows.detached().clone());
  } else {
    w = ad::make_leaf(w0.clone());
  }
  CounterRng nrng(opts.seed, Stream::ProjNoise);
  std::vector<Tensor> noise;
  for (Tensor& t : nets::make_noise(cfg, nrng, 1)) noise.push_back(ad::make_leaf(t));

  std::vector<Tensor> vars{w};
  for (const auto& n : noise) vars.push_back(n);
  training::AdamState adam;
  adam.cfg.lr = opts.lr;
  adam.cfg.beta1 = 0.9;
  adam.cfg.beta2 = 0.999;
  training::adam_init(adam, vars);

  ProjectionResult res;
  res.downsample_factor = factor;
  res.best_total = std::numeric_limits<double>::infinity();
  Tensor best_w, best_out;
  std::vector<Tensor> best_noise;

  for (int64_t step = 0; step < opts.steps; ++step) {
    std::vector<Tensor> w_layers;
    for (int i = 0; i <= layers; ++i)
      w_layers.push_back(opts.extended_w ? op::slice(w, 0, i, 1) : w);
    Tensor out = nets::synthesis_forward(cfg, params, w_layers, noise);
    auto [total, mse_full, mse_down] = projection_loss(target_t, out, opts.lambda_down, factor);
    if (opts.noise_reg_weight > 0.0)
      total = op::add(total, op::mul_scalar(noise_decorrelation(noise), opts.noise_reg_weight));

    const double total_v = total.item();
    if (!std::isfinite(total_v))
      throw training::TrainingError("projection loss diverged at step " + std::to_string(step));
    res.trace.push_back({step, mse_full.item(), mse_down.item(), total_v});
    if (total_v < res.best_total) {
      res.best_total = total_v;
      res.best_step = step;
      best_w = w.detached().clone();
      best_out = out.detached().clone();
      best_noise.clear();
      for (const auto& n : noise) best_noise.push_back(n.detached().clone());
    }

    const double lr_t =
        opts.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                        static_cast<double>(opts.steps)));
    std::vector<Tensor> grads = ad::gradient(total, vars);
    training::adam_step(vars, grads, adam, lr_t);
  }

  res.w = best_w;
  res.noise = best_noise;
  res.final_volume = tensor_to_volume(best_out);
  return res;
}

}  // namespace sv::projection
