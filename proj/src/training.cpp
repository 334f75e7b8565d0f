#include "stylevox/training.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "stylevox/autodiff.hpp"
#include "stylevox/io.hpp"
#include "stylevox/ops.hpp"

namespace sv::training {

namespace op = sv::ops;

Tensor g_loss_nonsat(const Tensor& fake_logits) {
  return op::mean_all(op::softplus(op::neg(fake_logits)));
}

Tensor d_loss_logistic(const Tensor& real_logits, const Tensor& fake_logits) {
  return op::add(op::mean_all(op::softplus(op::neg(real_logits))),
                 op::mean_all(op::softplus(fake_logits)));
}

bool lazy_regularize(int64_t step, int interval) {
  if (interval < 1) throw std::invalid_argument("lazy_regularize: interval must be >= 1");
  return step % interval == 0;
}

PathLengthResult path_length_penalty(const std::function<Tensor(const Tensor&)>& synth,
                                     const Tensor& w_batch, CounterRng& rng,
                                     PathLengthState& state) {
  if (!w_batch.node)
    throw std::invalid_argument("path_length_penalty: w_batch must be on the tape");
  Tensor out = synth(w_batch);
  const int64_t batch = out.extent(0);
  const int64_t voxels = out.numel() / batch;
  Tensor y(out.shape(), out.dtype());
  fill_normal(y, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(voxels)));
  Tensor s = op::sum_all(op::mul(out, y));
  Tensor w_only = w_batch;
  std::vector<Tensor> gw = ad::gradient(s, {&w_only, 1}, /*create_graph=*/true);
  // per-sample norm of the w gradient
  Tensor p = op::sqrt(op::sum_axes(op::square(gw[0]), {1}));  // [N,1]
  PathLengthResult res;
  res.p.resize(static_cast<size_t>(batch));
  double mean_p = 0.0;
  {
    Tensor pd = p.detached();
    for (int64_t i = 0; i < batch; ++i) {
      res.p[static_cast<size_t>(i)] = pd.at(i);
      mean_p += pd.at(i);
    }
    mean_p /= static_cast<double>(batch);
  }
  res.mean_p = mean_p;
  Tensor dev = op::add_scalar(p, -state.pl_mean);
  res.penalty = op::mul_scalar(op::mean_all(op::square(dev)), state.weight);
  if (!res.penalty.defined() || !std::isfinite(res.penalty.item()) || !std::isfinite(mean_p))
    throw TrainingError("path length penalty is not finite");
  state.pl_mean += state.decay * (mean_p - state.pl_mean);
  return res;
}

void adam_init(AdamState& state, const std::vector<Tensor>& params) {
  state.m.clear();
  state.v.clear();
  state.step = 0;
  for (const auto& p : params) {
    state.m.push_back(Tensor::zeros(p.shape(), p.dtype()));
    state.v.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
}

void adam_step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               AdamState& state, double lr_override) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: parameter/gradient/state count mismatch");
  const double lr = lr_override >= 0 ? lr_override : state.cfg.lr;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    const Tensor& g = grads[i];
    if (!same_shape(p, g)) throw std::invalid_argument("adam_step: gradient shape mismatch");
    if (!g.all_finite()) throw NonFiniteError("adam_step: non-finite gradient");
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (int64_t j = 0; j < p.numel(); ++j) {
      const double gj = g.at(j);
      const double mj = state.cfg.beta1 * m.at(j) + (1.0 - state.cfg.beta1) * gj;
      const double vj = state.cfg.beta2 * v.at(j) + (1.0 - state.cfg.beta2) * gj * gj;
      m.set(j, mj);
      v.set(j, vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      p.set(j, p.at(j) - lr * mhat / (std::sqrt(vhat) + state.cfg.eps));
    }
  }
}

void ema_update(nets::ParamStore& ema, const nets::ParamStore& params, double halflife_images,
                int64_t batch) {
  if (halflife_images <= 0.0) throw std::invalid_argument("ema_update: halflife must be positive");
  const double beta = std::pow(0.5, static_cast<double>(batch) / halflife_images);
  for (auto& [name, e] : ema) {
    const Tensor& p = params.at(name);
    for (int64_t j = 0; j < e.numel(); ++j) e.set(j, beta * e.at(j) + (1.0 - beta) * p.at(j));
  }
}

namespace {

// per-layer w rows for a minibatch with per-sample style mixing
std::vector<Tensor> mixed_w_layers(const ModelConfig& cfg, const Tensor& w_main,
                                   const Tensor& w_alt, const std::vector<int>& cutoffs) {
  const int layers = cfg.num_style_layers();
  const int64_t batch = w_main.extent(0);
  std::vector<Tensor> w_layers;
  for (int i = 0; i <= layers; ++i) {
    const int idx = i == layers ? layers - 1 : i;
    Tensor rows;
    for (int64_t n = 0; n < batch; ++n) {
      const int k = cutoffs[static_cast<size_t>(n)];
      const bool use_main = k < 0 || idx < k;
      Tensor row = op::slice(use_main ? w_main : w_alt, 0, n, 1);
      rows = rows.defined() ? op::concat(rows, row, 0) : row;
    }
    w_layers.push_back(rows);
  }
  return w_layers;
}

Tensor stack_volumes(const std::vector<Volume>& dataset, const std::vector<size_t>& idx) {
  const Volume& first = dataset.at(idx.at(0));
  Tensor t({static_cast<int64_t>(idx.size()), 1, first.dx, first.dy, first.dz}, DType::F32);
  auto dst = t.data<float>();
  const size_t vox = first.data.size();
  for (size_t i = 0; i < idx.size(); ++i) {
    const Volume& v = dataset.at(idx[i]);
    if (v.dx != first.dx || v.dy != first.dy || v.dz != first.dz)
      throw TrainingError("dataset volumes have inconsistent shapes");
    std::memcpy(dst.data() + i * vox, v.data.data(), vox * sizeof(float));
  }
  return t;
}

struct TrainingRun {
  const ModelConfig& cfg;
  const TrainSchedule& sched;
  io::Checkpoint ck;
  int batch;

  // generated fake batch for a phase (0: D step, 1: G step)
  Tensor fakes(int64_t step, int phase) {
    const uint64_t sub = static_cast<uint64_t>(2 * step + phase);
    CounterRng zrng(ck.seed, Stream::TrainLatent, sub);
    Tensor z({2 * batch, cfg.latent_size}, DType::F32);
    fill_normal(z, zrng);
    Tensor w_all = nets::mapping_forward(cfg, ck.g, op::pixel_norm(z));
    Tensor w_main = op::slice(w_all, 0, 0, batch);
    Tensor w_alt = op::slice(w_all, 0, batch, batch);

    std::vector<int> cutoffs(static_cast<size_t>(batch), -1);
    if (sched.style_mixing && cfg.num_style_layers() >= 3) {
      CounterRng mrng(ck.seed, Stream::TrainMixing, sub);
      for (int n = 0; n < batch; ++n)
        if (mrng.uniform() < cfg.mixing_prob)
          cutoffs[static_cast<size_t>(n)] =
              1 + static_cast<int>(mrng.uniform_int(static_cast<uint64_t>(cfg.num_style_layers() - 2)));
    }
    CounterRng nrng(ck.seed, Stream::TrainNoise, sub);
    std::vector<Tensor> noise = nets::make_noise(cfg, nrng, batch);
    return nets::synthesis_forward(cfg, ck.g, mixed_w_layers(cfg, w_main, w_alt, cutoffs), noise);
  }
};

void write_loss_rows(const std::string& path, const std::vector<LossRow>& rows, bool append) {
  std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
  if (!f) throw TrainingError("cannot write loss log " + path);
  if (!append) f << "step,g_loss,d_loss,pl_penalty,pl_mean,seconds\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.3f\n",
                  static_cast<long long>(r.step), r.g_loss, r.d_loss, r.pl_penalty, r.pl_mean,
                  r.seconds);
    f << buf;
  }
}

}  // namespace

TrainResult train(const ModelConfig& cfg, const TrainSchedule& sched,
                  const std::vector<Volume>& dataset, const std::string& out_dir,
                  const std::string& resume_from) {
  cfg.validate();
  if (sched.total_steps < 1) throw std::invalid_argument("train: steps must be >= 1");
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  const auto want = cfg.output_shape();
  for (const auto& v : dataset)
    if (v.dx != want[0] || v.dy != want[1] || v.dz != want[2])
      throw std::invalid_argument("train: dataset volume " + shape_str({v.dx, v.dy, v.dz}) +
                                  " does not match config output " +
                                  shape_str({want[0], want[1], want[2]}));
  std::filesystem::create_directories(out_dir);

  TrainingRun run{cfg, sched,
                  resume_from.empty() ? io::init_checkpoint(cfg, sched.seed)
                                      : io::load_checkpoint(resume_from, cfg),
                  sched.minibatch > 0 ? sched.minibatch : cfg.minibatch()};
  io::Checkpoint& ck = run.ck;
  if (resume_from.empty()) {
    ck.opt_g.cfg.lr = sched.lr;
    ck.opt_d.cfg.lr = sched.lr;
    ck.pl.decay = sched.pl_decay;
    ck.pl.weight = sched.pl_weight;
    ck.pl.interval = sched.pl_interval;
  }
  const int64_t first_step = static_cast<int64_t>(ck.step);
  if (first_step >= sched.total_steps)
    throw std::invalid_argument("train: checkpoint is already at step " +
                                std::to_string(first_step));

  std::vector<Tensor> g_params = nets::param_tensors(ck.g);
  std::vector<Tensor> d_params = nets::param_tensors(ck.d);
  TrainResult result;
  const std::string loss_path = out_dir + "/loss.csv";
  if (resume_from.empty() && std::filesystem::exists(loss_path))
    std::filesystem::remove(loss_path);

  auto dump_diagnostic = [&](int64_t step) {
    ck.step = static_cast<uint64_t>(step);
    io::save_checkpoint(ck, out_dir + "/ckpt_diagnostic.sck");
  };

  for (int64_t step = first_step; step < sched.total_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    LossRow row{};
    row.step = step;

    // ---- discriminator step ----
    {
      CounterRng brng(ck.seed, Stream::TrainBatch, static_cast<uint64_t>(step));
      std::vector<size_t> idx;
      for (int i = 0; i < run.batch; ++i)
        idx.push_back(static_cast<size_t>(brng.uniform_int(dataset.size())));
      Tensor real = stack_volumes(dataset, idx);
      Tensor fake;
      {
        ad::NoGrad ng;
        fake = run.fakes(step, 0);
      }
      Tensor d_loss;
      if (sched.r1_gamma > 0.0) {
        Tensor real_leaf = ad::make_leaf(real);
        Tensor real_logits = nets::discriminator_forward(cfg, ck.d, real_leaf);
        Tensor fake_logits = nets::discriminator_forward(cfg, ck.d, fake);
        d_loss = d_loss_logistic(real_logits, fake_logits);
        std::vector<Tensor> gx =
            ad::gradient(op::sum_all(real_logits), {&real_leaf, 1}, /*create_graph=*/true);
        Tensor r1 = op::mean_all(op::sum_axes(
            op::reshape(op::square(gx[0]), {real.extent(0), real.numel() / real.extent(0)}), {1}));
        d_loss = op::add(d_loss, op::mul_scalar(r1, 0.5 * sched.r1_gamma));
      } else {
        d_loss = d_loss_logistic(nets::discriminator_forward(cfg, ck.d, real),
                                 nets::discriminator_forward(cfg, ck.d, fake));
      }
      row.d_loss = d_loss.item();
      if (!std::isfinite(row.d_loss)) {
        dump_diagnostic(step);
        throw TrainingError("non-finite d_loss at step " + std::to_string(step) +
                            " (diagnostic checkpoint written)");
      }
      std::vector<Tensor> grads = ad::gradient(d_loss, d_params);
      adam_step(d_params, grads, ck.opt_d);
    }

    // ---- generator step ----
    {
      Tensor fake = run.fakes(step, 1);
      Tensor g_total = g_loss_nonsat(nets::discriminator_forward(cfg, ck.d, fake));
      row.g_loss = g_total.item();
      row.pl_penalty = 0.0;
      if (sched.enable_path_length && lazy_regularize(step, ck.pl.interval)) {
        CounterRng plrng(ck.seed, Stream::PathLength, static_cast<uint64_t>(step));
        Tensor zpl({run.batch, cfg.latent_size}, DType::F32);
        fill_normal(zpl, plrng);
        Tensor w = nets::mapping_forward(cfg, ck.g, op::pixel_norm(zpl));
        auto synth = [&](const Tensor& wb) {
          std::vector<Tensor> w_layers(static_cast<size_t>(cfg.num_style_layers() + 1), wb);
          std::vector<Tensor> noise = nets::make_noise(cfg, plrng, run.batch);
          return nets::synthesis_forward(cfg, ck.g, w_layers, noise);
        };
        PathLengthResult pl = path_length_penalty(synth, w, plrng, ck.pl);
        row.pl_penalty = pl.penalty.item();
        g_total = op::add(g_total, op::mul_scalar(pl.penalty, ck.pl.interval));
        result.sum_raw_penalty += row.pl_penalty;
        result.sum_scaled_penalty += row.pl_penalty * ck.pl.interval;
        result.n_applications += 1;
      }
      row.pl_mean = ck.pl.pl_mean;
      if (!std::isfinite(row.g_loss)) {
        dump_diagnostic(step);
        throw TrainingError("non-finite g_loss at step " + std::to_string(step) +
                            " (diagnostic checkpoint written)");
      }
      std::vector<Tensor> grads = ad::gradient(g_total, g_params);
      adam_step(g_params, grads, ck.opt_g);
      ema_update(ck.g_ema, ck.g, sched.ema_halflife_images, run.batch);
    }

    ck.step = static_cast<uint64_t>(step + 1);
    row.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_loss_rows(loss_path, {row}, /*append=*/step != 0 || !resume_from.empty());
    result.rows.push_back(row);

    if (sched.checkpoint_every > 0 && (step + 1) % sched.checkpoint_every == 0 &&
        step + 1 < sched.total_steps) {
      char name[64];
      std::snprintf(name, sizeof(name), "/ckpt_%06lld.sck", static_cast<long long>(step + 1));
      io::save_checkpoint(ck, out_dir + name);
    }
  }

  result.final_checkpoint_path = out_dir + "/ckpt_final.sck";
  io::save_checkpoint(ck, result.final_checkpoint_path);
  return result;
}

}  // namespace sv::training
