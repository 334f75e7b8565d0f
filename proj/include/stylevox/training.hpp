#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stylevox/config.hpp"
#include "stylevox/nets.hpp"
#include "stylevox/rng.hpp"
#include "stylevox/tensor.hpp"
#include "stylevox/volume.hpp"

namespace sv::training {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- losses ----------------------------------------------------------------

// non-saturating generator loss: mean softplus(-logit)
Tensor g_loss_nonsat(const Tensor& fake_logits);
// mean softplus(-real) + mean softplus(fake); no regularizer
Tensor d_loss_logistic(const Tensor& real_logits, const Tensor& fake_logits);

// true iff the (lazy) regularizer runs this step; the applied penalty is
// scaled by `interval` to keep its expectation unchanged
bool lazy_regularize(int64_t step, int interval);

// ---- path-length regularization --------------------------------------------

struct PathLengthState {
  double pl_mean = 0.0;   // running exponential average a
  double decay = 0.01;
  double weight = 2.0;
  int interval = 16;
};

struct PathLengthResult {
  Tensor penalty;          // scalar, on the tape (differentiable once more)
  double mean_p = 0.0;     // batch mean of ||grad_w (g(w).y)||
  std::vector<double> p;   // per-sample norms
};

// synth maps a [N,latent] w batch to a generated batch [N,1,D,H,W]; w_batch
// must be on the tape. Updates state.pl_mean after building the penalty.
PathLengthResult path_length_penalty(const std::function<Tensor(const Tensor&)>& synth,
                                     const Tensor& w_batch, CounterRng& rng,
                                     PathLengthState& state);

// ---- optimizer / EMA --------------------------------------------------------

struct AdamConfig {
  double lr = 2e-3;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  int64_t step = 0;
  std::vector<Tensor> m, v;  // aligned with the parameter order
};

void adam_init(AdamState& state, const std::vector<Tensor>& params);
// bias-corrected update, mutates params in place; lr_override < 0 uses cfg.lr
void adam_step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               AdamState& state, double lr_override = -1.0);

// beta = 0.5^(batch/halflife); ema <- beta*ema + (1-beta)*params
void ema_update(nets::ParamStore& ema, const nets::ParamStore& params, double halflife_images,
                int64_t batch);

// ---- training loop ----------------------------------------------------------

struct TrainSchedule {
  int64_t total_steps = 1;
  int minibatch = 0;  // 0: take the config's final-resolution entry
  double ema_halflife_images = 10000.0;
  uint64_t seed = 0;
  int64_t checkpoint_every = 0;  // 0: final checkpoint only
  double lr = 2e-3;
  double r1_gamma = 0.0;  // 0: discriminator unregularized
  int pl_interval = 16;
  double pl_decay = 0.01;
  double pl_weight = 2.0;
  bool enable_path_length = true;
  bool style_mixing = true;
};

struct LossRow {
  int64_t step;
  double g_loss, d_loss, pl_penalty, pl_mean, seconds;
};

struct TrainResult {
  std::vector<LossRow> rows;
  // lazy-regularization bookkeeping
  double sum_scaled_penalty = 0.0;
  double sum_raw_penalty = 0.0;
  int64_t n_applications = 0;
  std::string final_checkpoint_path;
};

// Alternating D/G steps over a fixed dataset; deterministic given (seed, step).
// resume_from: path of a checkpoint to continue from (empty: fresh run).
TrainResult train(const ModelConfig& cfg, const TrainSchedule& sched,
                  const std::vector<Volume>& dataset, const std::string& out_dir,
                  const std::string& resume_from = "");

}  // namespace sv::training
