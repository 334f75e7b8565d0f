#pragma once

#include <array>
#include <tuple>
#include <vector>

#include "stylevox/config.hpp"
#include "stylevox/nets.hpp"
#include "stylevox/tensor.hpp"
#include "stylevox/volume.hpp"

namespace sv::projection {

struct ProjectionOptions {
  int64_t steps = 1000;
  uint64_t seed = 0;
  double lr = 0.1;             // Adam, cosine-decayed
  double lambda_down = 1.0;    // weight of the downsampled MSE term
  bool extended_w = false;     // optimize one w per style layer
  double noise_reg_weight = 0.0;  // optional noise decorrelation penalty
  int64_t w_avg_samples = 10000;
};

struct TraceRow {
  int64_t step;
  double mse_full, mse_down, total;
};

struct ProjectionResult {
  Tensor w;                    // [1,latent], or [num_style_layers+1, latent] in extended mode
  std::vector<Tensor> noise;   // optimized per-layer maps
  std::vector<TraceRow> trace;
  Volume final_volume;         // reconstruction at the best-loss iterate
  double best_total = 0.0;
  int64_t best_step = -1;
  int downsample_factor = 8;
};

// largest power-of-two factor (capped at 8) dividing every extent
int downsample_factor_for(const std::array<int64_t, 3>& dims);

// (total, mse_full, mse_down); both inputs [1,1,D,H,W] with equal shapes
std::tuple<Tensor, Tensor, Tensor> projection_loss(const Tensor& target, const Tensor& generated,
                                                   double lambda_down, int factor);

// mean mapped latent over seeded z samples
Tensor w_avg(const ModelConfig& cfg, const nets::ParamStore& params, uint64_t seed,
             int64_t samples = 10000);

ProjectionResult project(const ModelConfig& cfg, const nets::ParamStore& params,
                         const Volume& target, const ProjectionOptions& opts);

}  // namespace sv::projection
