// stylevox: style-based generative modeling of volumetric images.
// Subcommands: phantom, train, generate, project, mix, eval.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "stylevox/autodiff.hpp"
#include "stylevox/io.hpp"
#include "stylevox/metrics.hpp"
#include "stylevox/nets.hpp"
#include "stylevox/ops.hpp"
#include "stylevox/phantom.hpp"
#include "stylevox/projection.hpp"
#include "stylevox/rng.hpp"
#include "stylevox/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sv;

namespace {

struct RunLog {
  std::string command;
  uint64_t seed = 0;
  json extra = json::object();
  std::vector<std::string> artifacts;

  void add(const std::string& path) { artifacts.push_back(path); }
  void write(const std::string& out_dir) const {
    json j;
    j["command"] = command;
    j["seed"] = seed;
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    json arts = json::array();
    for (const auto& p : artifacts) {
      char hex[32];
      std::snprintf(hex, sizeof(hex), "%016llx",
                    static_cast<unsigned long long>(io::file_hash(p)));
      arts.push_back({{"path", p}, {"fnv1a64", hex}});
    }
    j["artifacts"] = arts;
    std::ofstream f(out_dir + "/run.json", std::ios::trunc);
    f << j.dump(2) << "\n";
  }
};

json config_json(const ModelConfig& c) {
  return json{{"base_shape", {c.base_shape[0], c.base_shape[1], c.base_shape[2]}},
              {"levels", c.levels},
              {"fmap_depth", c.fmap_depth},
              {"latent_size", c.latent_size},
              {"mapping_layers", c.mapping_layers},
              {"mapping_fmaps", c.mapping_fmaps},
              {"minibatch_schedule", c.minibatch_schedule},
              {"lrelu_alpha", c.lrelu_alpha},
              {"mixing_prob", c.mixing_prob},
              {"noise_per_layer", c.noise_per_layer}};
}

std::array<int64_t, 3> parse_dims(const std::string& s) {
  std::array<int64_t, 3> d{};
  char sep1 = 0, sep2 = 0;
  std::istringstream in(s);
  if (!(in >> d[0] >> sep1 >> d[1] >> sep2 >> d[2]) || sep1 != 'x' || sep2 != 'x' || !in.eof())
    throw std::invalid_argument("dims must look like 20x24x28");
  return d;
}

ModelConfig resolve_config(const std::string& name_or_path) {
  if (is_preset(name_or_path)) return preset_config(name_or_path);
  if (fs::exists(name_or_path)) return load_config_file(name_or_path);
  throw std::invalid_argument("unknown config preset or missing file: " + name_or_path +
                              " (presets: 2mm-fd96 2mm-fd64 2mm-fd32 2mm-fd16 1mm-fd16 desk-fd16-l3)");
}

std::vector<Volume> load_dataset(const std::string& dir, bool allow_nifti) {
  std::vector<Volume> out;
  for (const auto& f : io::list_volume_files(dir, allow_nifti)) {
    if (f.size() > 4 && f.substr(f.size() - 4) == ".nii")
      out.push_back(io::read_nifti(f));
    else
      out.push_back(io::read_volume(f));
  }
  if (out.empty()) throw std::invalid_argument("no volumes found in " + dir);
  return out;
}

void write_volume_with_slices(const Volume& v, const std::string& stem, RunLog& log) {
  io::write_volume(v, stem + ".svl");
  log.add(stem + ".svl");
  for (Plane p : {Plane::Sagittal, Plane::Axial, Plane::Coronal}) {
    const std::string path = stem + "_" + plane_name(p) + ".pgm";
    io::export_slice_image(v, p, path);
    log.add(path);
  }
}

// ---- subcommands -----------------------------------------------------------

int cmd_phantom(uint64_t seed, int count, const std::string& dims_s, const std::string& out) {
  io::PhantomSpec spec;
  spec.seed = seed;
  spec.count = count;
  spec.dims = parse_dims(dims_s);
  fs::create_directories(out);
  RunLog log{"phantom", seed};
  log.extra["dims"] = {spec.dims[0], spec.dims[1], spec.dims[2]};
  log.extra["count"] = count;
  std::vector<io::PhantomFactors> factors;
  auto vols = io::phantom_generate(spec, &factors);
  json meta = json::array();
  for (size_t i = 0; i < vols.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "/phantom_%04zu.svl", i);
    io::write_volume(vols[i], out + name);
    log.add(out + name);
    meta.push_back({{"index", factors[i].index},
                    {"head_radii", factors[i].head_radii},
                    {"cortex_thickness", factors[i].cortex_thickness},
                    {"ventricle_radius_frac", factors[i].ventricle_radius_frac}});
  }
  {
    std::ofstream f(out + "/phantoms.json", std::ios::trunc);
    f << meta.dump(2) << "\n";
  }
  log.add(out + "/phantoms.json");
  log.write(out);
  std::cout << "wrote " << vols.size() << " phantoms to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, int64_t steps, uint64_t seed,
              const std::string& out, int batch, double lr, double r1, int pl_interval,
              double ema_halflife, int64_t checkpoint_every, const std::string& resume,
              bool no_mixing, bool no_pl, bool allow_nifti) {
  ModelConfig cfg = resolve_config(config);
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  training::TrainSchedule sched;
  sched.total_steps = steps;
  sched.seed = seed;
  sched.minibatch = batch;
  sched.lr = lr;
  sched.r1_gamma = r1;
  sched.pl_interval = pl_interval;
  sched.ema_halflife_images = ema_halflife;
  sched.checkpoint_every = checkpoint_every;
  sched.style_mixing = !no_mixing;
  sched.enable_path_length = !no_pl;
  auto dataset = load_dataset(data, allow_nifti);
  fs::create_directories(out);
  auto res = training::train(cfg, sched, dataset, out, resume);
  RunLog log{"train", seed};
  log.extra["config"] = config_json(cfg);
  log.extra["steps"] = steps;
  log.extra["minibatch"] = batch > 0 ? batch : cfg.minibatch();
  log.add(res.final_checkpoint_path);
  log.add(out + "/loss.csv");
  log.write(out);
  const auto& last = res.rows.back();
  std::cout << "trained to step " << last.step + 1 << "  g_loss=" << last.g_loss
            << "  d_loss=" << last.d_loss << "\n";
  return 0;
}

int cmd_generate(const std::string& ckpt_path, int count, uint64_t seed, const std::string& out,
                 bool use_ema, const std::string& noise_mode) {
  if (count < 1) throw std::invalid_argument("count must be >= 1");
  io::Checkpoint ck = io::load_checkpoint(ckpt_path);
  const nets::ParamStore& params = use_ema ? ck.g_ema : ck.g;
  fs::create_directories(out);
  RunLog log{"generate", seed};
  log.extra["config"] = config_json(ck.config);
  log.extra["use_ema"] = use_ema;
  ad::NoGrad ng;
  for (int i = 0; i < count; ++i) {
    CounterRng zrng(seed, Stream::Generate, static_cast<uint64_t>(i));
    Tensor z({1, ck.config.latent_size}, DType::F32);
    fill_normal(z, zrng);
    CounterRng nrng(seed, Stream::GenerateNoise, static_cast<uint64_t>(i));
    Tensor volume = nets::generator_forward(
        ck.config, params, z, Tensor(), -1,
        noise_mode == "zero" ? nets::NoiseMode::Zero : nets::NoiseMode::Random, &nrng);
    char stem[64];
    std::snprintf(stem, sizeof(stem), "/gen_%04d", i);
    write_volume_with_slices(tensor_to_volume(volume), out + stem, log);
  }
  log.write(out);
  std::cout << "generated " << count << " volumes in " << out << "\n";
  return 0;
}

int cmd_project(const std::string& ckpt_path, const std::string& target_path, int64_t steps,
                uint64_t seed, const std::string& out, double lambda, double lr, bool extended,
                bool use_ema) {
  io::Checkpoint ck = io::load_checkpoint(ckpt_path);
  const nets::ParamStore& params = use_ema ? ck.g_ema : ck.g;
  Volume target = io::read_volume(target_path);
  projection::ProjectionOptions opts;
  opts.steps = steps;
  opts.seed = seed;
  opts.lambda_down = lambda;
  opts.lr = lr;
  opts.extended_w = extended;
  fs::create_directories(out);
  auto res = projection::project(ck.config, params, target, opts);
  RunLog log{"project", seed};
  log.extra["config"] = config_json(ck.config);
  log.extra["best_total"] = res.best_total;
  log.extra["best_step"] = res.best_step;
  log.extra["downsample_factor"] = res.downsample_factor;
  write_volume_with_slices(res.final_volume, out + "/recon", log);
  {
    std::ofstream f(out + "/trace.csv", std::ios::trunc);
    f << "step,mse_full,mse_down,total\n";
    for (const auto& row : res.trace)
      f << row.step << "," << row.mse_full << "," << row.mse_down << "," << row.total << "\n";
  }
  log.add(out + "/trace.csv");
  io::write_latent_record(res.w, res.noise, out + "/latent.slr");
  log.add(out + "/latent.slr");
  log.write(out);
  std::cout << "projected: best total MSE " << res.best_total << " at step " << res.best_step
            << "\n";
  return 0;
}

int cmd_mix(const std::string& ckpt_path, uint64_t seed_a, uint64_t seed_b, int cutoff,
            const std::string& out, bool use_ema) {
  io::Checkpoint ck = io::load_checkpoint(ckpt_path);
  const nets::ParamStore& params = use_ema ? ck.g_ema : ck.g;
  fs::create_directories(out);
  RunLog log{"mix", seed_a};
  log.extra["seed_a"] = seed_a;
  log.extra["seed_b"] = seed_b;
  log.extra["cutoff"] = cutoff;
  ad::NoGrad ng;
  auto draw_w = [&](uint64_t seed) {
    CounterRng rng(seed, Stream::Generate, 0);
    Tensor z({1, ck.config.latent_size}, DType::F32);
    fill_normal(z, rng);
    return nets::mapping_forward(ck.config, params, ops::pixel_norm(z));
  };
  Tensor w_low = draw_w(seed_a);
  Tensor w_high = draw_w(seed_b);
  // structure noise follows the fine-detail source, seed-b
  CounterRng nrng(seed_b, Stream::GenerateNoise, 0);
  std::vector<Tensor> noise = nets::make_noise(ck.config, nrng, 1);
  Tensor volume = nets::mix_styles(ck.config, params, w_low, w_high, cutoff, noise);
  write_volume_with_slices(tensor_to_volume(volume), out + "/mix", log);
  log.write(out);
  std::cout << "mixed seeds " << seed_a << "/" << seed_b << " at cutoff " << cutoff << "\n";
  return 0;
}

int cmd_eval(const std::string& gen_dir, const std::string& ckpt_path, int count,
             const std::string& real_dir, const std::string& metrics_list,
             const std::string& plane, uint64_t seed, const std::string& out, int bmmd_batch,
             int bmmd_repeats, int pairs, bool allow_nifti) {
  metrics::MetricsOptions opts;
  opts.seed = seed;
  opts.bmmd_batch = bmmd_batch;
  opts.bmmd_repeats = bmmd_repeats;
  opts.msssim_pairs = pairs;
  opts.run_bmmd = opts.run_msssim = opts.run_fd = false;
  {
    std::istringstream in(metrics_list);
    std::string tok;
    while (std::getline(in, tok, ',')) {
      if (tok == "bmmd2")
        opts.run_bmmd = true;
      else if (tok == "msssim")
        opts.run_msssim = true;
      else if (tok == "fid" || tok == "fd")
        opts.run_fd = true;
      else
        throw std::invalid_argument("unknown metric name '" + tok +
                                    "' (expected bmmd2,msssim,fid)");
    }
  }
  if (plane != "all") (void)plane_from_string(plane);

  std::vector<Volume> real = load_dataset(real_dir, allow_nifti);
  std::vector<Volume> gen;
  if (!gen_dir.empty()) {
    gen = load_dataset(gen_dir, allow_nifti);
  } else {
    io::Checkpoint ck = io::load_checkpoint(ckpt_path);
    ad::NoGrad ng;
    for (int i = 0; i < count; ++i) {
      CounterRng zrng(seed, Stream::Generate, static_cast<uint64_t>(i));
      Tensor z({1, ck.config.latent_size}, DType::F32);
      fill_normal(z, zrng);
      CounterRng nrng(seed, Stream::GenerateNoise, static_cast<uint64_t>(i));
      gen.push_back(tensor_to_volume(nets::generator_forward(
          ck.config, ck.g_ema, z, Tensor(), -1, nets::NoiseMode::Random, &nrng)));
    }
  }
  metrics::MetricsReport report = metrics::evaluate(gen, real, opts);
  if (plane != "all") {
    // recompute only the requested plane; zero the others
    const Plane p = plane_from_string(plane);
    const double keep = p == Plane::Sagittal   ? report.fd_sagittal
                        : p == Plane::Axial    ? report.fd_axial
                                               : report.fd_coronal;
    report.fd_sagittal = report.fd_axial = report.fd_coronal = 0.0;
    (p == Plane::Sagittal ? report.fd_sagittal
     : p == Plane::Axial  ? report.fd_axial
                          : report.fd_coronal) = keep;
  }
  fs::create_directories(out);
  {
    std::ofstream f(out + "/metrics.json", std::ios::trunc);
    f << metrics::report_to_json(report) << "\n";
  }
  RunLog log{"eval", seed};
  log.extra["metrics"] = metrics_list;
  log.extra["plane"] = plane;
  log.add(out + "/metrics.json");
  log.write(out);
  std::cout << metrics::report_to_json(report) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stylevox: style-based generative modeling of volumetric images"};
  app.require_subcommand(1);

  // phantom
  auto* ph = app.add_subcommand("phantom", "synthesize a procedural phantom dataset");
  uint64_t ph_seed = 0;
  int ph_count = 8;
  std::string ph_dims = "20x24x28", ph_out = "phantoms";
  ph->add_option("--seed", ph_seed);
  ph->add_option("--count", ph_count);
  ph->add_option("--dims", ph_dims, "volume extents DxHxW");
  ph->add_option("--out", ph_out)->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model on a volume directory");
  std::string tr_config = "desk-fd16-l3", tr_data, tr_out = "run", tr_resume;
  int64_t tr_steps = 500, tr_ckpt_every = 0;
  uint64_t tr_seed = 0;
  int tr_batch = 0, tr_pl_interval = 16;
  double tr_lr = 2e-3, tr_r1 = 0.0, tr_ema = 10000.0;
  bool tr_no_mix = false, tr_no_pl = false, tr_nifti = false;
  tr->add_option("--config", tr_config, "preset name or key=value file");
  tr->add_option("--data", tr_data)->required();
  tr->add_option("--steps", tr_steps);
  tr->add_option("--seed", tr_seed);
  tr->add_option("--out", tr_out)->required();
  tr->add_option("--batch", tr_batch, "override the config minibatch entry");
  tr->add_option("--lr", tr_lr);
  tr->add_option("--r1", tr_r1, "R1 gradient penalty gamma (0 = off)");
  tr->add_option("--pl-interval", tr_pl_interval);
  tr->add_option("--ema-halflife", tr_ema, "EMA halflife in images");
  tr->add_option("--checkpoint-every", tr_ckpt_every);
  tr->add_option("--resume", tr_resume, "checkpoint to continue from");
  tr->add_flag("--no-mixing", tr_no_mix);
  tr->add_flag("--no-pl", tr_no_pl);
  tr->add_flag("--nifti", tr_nifti, "also read .nii volumes from --data");

  // generate
  auto* ge = app.add_subcommand("generate", "sample volumes from a checkpoint");
  std::string ge_ckpt, ge_out = "samples", ge_noise = "random";
  int ge_count = 5;
  uint64_t ge_seed = 0;
  bool ge_no_ema = false;
  ge->add_option("--ckpt", ge_ckpt)->required();
  ge->add_option("--count", ge_count);
  ge->add_option("--seed", ge_seed);
  ge->add_option("--out", ge_out)->required();
  ge->add_option("--noise", ge_noise, "random|zero");
  ge->add_flag("--no-ema", ge_no_ema, "sample the raw generator instead of the EMA weights");

  // project
  auto* pr = app.add_subcommand("project", "invert a volume into latent space");
  std::string pr_ckpt, pr_target, pr_out = "projection";
  int64_t pr_steps = 1000;
  uint64_t pr_seed = 0;
  double pr_lambda = 1.0, pr_lr = 0.1;
  bool pr_ext = false, pr_no_ema = false;
  pr->add_option("--ckpt", pr_ckpt)->required();
  pr->add_option("--target", pr_target)->required();
  pr->add_option("--steps", pr_steps);
  pr->add_option("--seed", pr_seed);
  pr->add_option("--out", pr_out)->required();
  pr->add_option("--lambda", pr_lambda, "weight of the downsampled MSE term");
  pr->add_option("--lr", pr_lr);
  pr->add_flag("--extended-w", pr_ext, "optimize one w per style layer");
  pr->add_flag("--no-ema", pr_no_ema);

  // mix
  auto* mx = app.add_subcommand("mix", "style-mix two seeds at a cutoff");
  std::string mx_ckpt, mx_out = "mixed";
  uint64_t mx_a = 0, mx_b = 1;
  int mx_cutoff = 4;
  bool mx_no_ema = false;
  mx->add_option("--ckpt", mx_ckpt)->required();
  mx->add_option("--seed-a", mx_a, "source of coarse (low-resolution) styles");
  mx->add_option("--seed-b", mx_b, "source of fine (high-resolution) styles and noise");
  mx->add_option("--cutoff", mx_cutoff);
  mx->add_option("--out", mx_out)->required();
  mx->add_flag("--no-ema", mx_no_ema);

  // eval
  auto* ev = app.add_subcommand("eval", "compute metrics between volume sets");
  std::string ev_gen, ev_ckpt, ev_real, ev_metrics = "bmmd2,msssim,fid", ev_plane = "all",
              ev_out = "evaluation";
  int ev_count = 16, ev_bb = 8, ev_br = 10, ev_pairs = 32;
  uint64_t ev_seed = 0;
  bool ev_nifti = false;
  ev->add_option("--gen-dir", ev_gen, "directory of generated volumes");
  ev->add_option("--ckpt", ev_ckpt, "checkpoint to sample from when --gen-dir is absent");
  ev->add_option("--count", ev_count, "samples to draw with --ckpt");
  ev->add_option("--real-dir", ev_real)->required();
  ev->add_option("--metrics", ev_metrics);
  ev->add_option("--plane", ev_plane, "sagittal|axial|coronal|all");
  ev->add_option("--seed", ev_seed);
  ev->add_option("--out", ev_out)->required();
  ev->add_option("--bmmd-batch", ev_bb);
  ev->add_option("--bmmd-repeats", ev_br);
  ev->add_option("--pairs", ev_pairs);
  ev->add_flag("--nifti", ev_nifti);

  try {
    app.parse(argc, argv);
    if (*ph) return cmd_phantom(ph_seed, ph_count, ph_dims, ph_out);
    if (*tr)
      return cmd_train(tr_config, tr_data, tr_steps, tr_seed, tr_out, tr_batch, tr_lr, tr_r1,
                       tr_pl_interval, tr_ema, tr_ckpt_every, tr_resume, tr_no_mix, tr_no_pl,
                       tr_nifti);
    if (*ge) return cmd_generate(ge_ckpt, ge_count, ge_seed, ge_out, !ge_no_ema, ge_noise);
    if (*pr)
      return cmd_project(pr_ckpt, pr_target, pr_steps, pr_seed, pr_out, pr_lambda, pr_lr, pr_ext,
                         !pr_no_ema);
    if (*mx) return cmd_mix(mx_ckpt, mx_a, mx_b, mx_cutoff, mx_out, !mx_no_ema);
    if (*ev)
      return cmd_eval(ev_gen, ev_ckpt, ev_count, ev_real, ev_metrics, ev_plane, ev_seed, ev_out,
                      ev_bb, ev_br, ev_pairs, ev_nifti);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return 0;  // --help
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const io::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
