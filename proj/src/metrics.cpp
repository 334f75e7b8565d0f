#include "stylevox/metrics.hpp"

#include <cmath>
#include <iostream>
#include <json.hpp>

#include "stylevox/rng.hpp"

namespace sv::metrics {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_same_dims(const Volume& a, const Volume& b, const char* op) {
  require(a.dx == b.dx && a.dy == b.dy && a.dz == b.dz,
          std::string(op) + ": volume shape mismatch");
}

double dot(const Volume& a, const Volume& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    acc += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
  return acc;
}

}  // namespace

double bmmd2(const std::vector<Volume>& x, const std::vector<Volume>& y) {
  require(!x.empty() && !y.empty(), "bmmd2: batches must be non-empty");
  for (const auto& v : x) require_same_dims(v, x[0], "bmmd2");
  for (const auto& v : y) require_same_dims(v, x[0], "bmmd2");
  const double n = static_cast<double>(x.size());
  const double m = static_cast<double>(y.size());
  double kxx = 0, kyy = 0, kxy = 0;
  for (const auto& a : x)
    for (const auto& b : x) kxx += dot(a, b);
  for (const auto& a : y)
    for (const auto& b : y) kyy += dot(a, b);
  for (const auto& a : x)
    for (const auto& b : y) kxy += dot(a, b);
  return kxx / (n * n) + kyy / (m * m) - 2.0 * kxy / (n * m);
}

// ---------------------------------------------------------------------------
// SSIM / MS-SSIM
// ---------------------------------------------------------------------------

namespace {

struct Field {
  std::array<int64_t, 3> dims;
  std::vector<double> data;
  double at(int64_t x, int64_t y, int64_t z) const {
    return data[static_cast<size_t>((x * dims[1] + y) * dims[2] + z)];
  }
};

Field to_field(const Volume& v) {
  Field f;
  f.dims = {v.dx, v.dy, v.dz};
  f.data.assign(v.data.begin(), v.data.end());
  return f;
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<size_t>(size));
  const int h = size / 2;
  double sum = 0;
  for (int i = 0; i < size; ++i) {
    k[static_cast<size_t>(i)] = std::exp(-0.5 * (i - h) * (i - h) / (sigma * sigma));
    sum += k[static_cast<size_t>(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// separable valid-mode filtering along each axis in turn
Field filter_valid(const Field& in, const std::vector<double>& k) {
  const int64_t ks = static_cast<int64_t>(k.size());
  Field a = in;
  for (int axis = 0; axis < 3; ++axis) {
    Field b;
    b.dims = a.dims;
    b.dims[static_cast<size_t>(axis)] = a.dims[static_cast<size_t>(axis)] - ks + 1;
    b.data.assign(static_cast<size_t>(b.dims[0] * b.dims[1] * b.dims[2]), 0.0);
    for (int64_t x = 0; x < b.dims[0]; ++x)
      for (int64_t y = 0; y < b.dims[1]; ++y)
        for (int64_t z = 0; z < b.dims[2]; ++z) {
          double acc = 0;
          for (int64_t t = 0; t < ks; ++t) {
            const int64_t xx = axis == 0 ? x + t : x;
            const int64_t yy = axis == 1 ? y + t : y;
            const int64_t zz = axis == 2 ? z + t : z;
            acc += k[static_cast<size_t>(t)] * a.at(xx, yy, zz);
          }
          b.data[static_cast<size_t>((x * b.dims[1] + y) * b.dims[2] + z)] = acc;
        }
    a = std::move(b);
  }
  return a;
}

Field multiply(const Field& a, const Field& b) {
  Field out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

int window_size_for(const std::array<int64_t, 3>& dims) {
  const int64_t m = std::min({dims[0], dims[1], dims[2]});
  int64_t w = std::min<int64_t>(11, m);
  if (w % 2 == 0) --w;
  return static_cast<int>(w);
}

struct SsimTerms {
  double luminance_mean = 0;  // clamped at 0
  double cs_mean = 0;         // clamped at 0
  double full_mean = 0;       // plain SSIM mean (unclamped product)
};

SsimTerms ssim_terms(const Field& x, const Field& y, double dynamic_range) {
  const int w = window_size_for(x.dims);
  if (w < 3)
    throw std::invalid_argument("ssim3d: volume smaller than the minimum 3^3 window");
  const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
  const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
  auto k = gaussian_kernel(w, 1.5);
  Field mx = filter_valid(x, k);
  Field my = filter_valid(y, k);
  Field mxx = filter_valid(multiply(x, x), k);
  Field myy = filter_valid(multiply(y, y), k);
  Field mxy = filter_valid(multiply(x, y), k);
  SsimTerms t;
  double lsum = 0, cssum = 0, fsum = 0;
  const size_t n = mx.data.size();
  for (size_t i = 0; i < n; ++i) {
    const double ux = mx.data[i], uy = my.data[i];
    const double vx = mxx.data[i] - ux * ux;
    const double vy = myy.data[i] - uy * uy;
    const double cxy = mxy.data[i] - ux * uy;
    const double l = (2 * ux * uy + c1) / (ux * ux + uy * uy + c1);
    const double cs = (2 * cxy + c2) / (vx + vy + c2);
    lsum += l;
    cssum += cs;
    fsum += l * cs;
  }
  t.luminance_mean = std::max(0.0, lsum / static_cast<double>(n));
  t.cs_mean = std::max(0.0, cssum / static_cast<double>(n));
  t.full_mean = fsum / static_cast<double>(n);
  return t;
}

// crop odd tails so every extent is even, then 2x mean-pool
Field halve(const Field& in) {
  Field out;
  out.dims = {in.dims[0] / 2, in.dims[1] / 2, in.dims[2] / 2};
  out.data.assign(static_cast<size_t>(out.dims[0] * out.dims[1] * out.dims[2]), 0.0);
  for (int64_t x = 0; x < out.dims[0]; ++x)
    for (int64_t y = 0; y < out.dims[1]; ++y)
      for (int64_t z = 0; z < out.dims[2]; ++z) {
        double acc = 0;
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) acc += in.at(2 * x + dx, 2 * y + dy, 2 * z + dz);
        out.data[static_cast<size_t>((x * out.dims[1] + y) * out.dims[2] + z)] = acc / 8.0;
      }
  return out;
}

constexpr std::array<double, 5> kMsWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

}  // namespace

int ms_ssim_scales(const std::array<int64_t, 3>& dims) {
  // halve while the coarsest scale keeps a workable window (min extent >= 8)
  int s = 1;
  int64_t m = std::min({dims[0], dims[1], dims[2]});
  while (s < 5 && m / 2 >= 8) {
    m /= 2;
    ++s;
  }
  return s;
}

double ssim3d(const Volume& x, const Volume& y, double dynamic_range) {
  require_same_dims(x, y, "ssim3d");
  require(dynamic_range > 0, "ssim3d: dynamic range must be positive");
  return ssim_terms(to_field(x), to_field(y), dynamic_range).full_mean;
}

double ssim3d_cs(const Volume& x, const Volume& y, double dynamic_range) {
  require_same_dims(x, y, "ssim3d_cs");
  require(dynamic_range > 0, "ssim3d_cs: dynamic range must be positive");
  return ssim_terms(to_field(x), to_field(y), dynamic_range).cs_mean;
}

double ms_ssim3d(const Volume& x, const Volume& y, double dynamic_range) {
  require_same_dims(x, y, "ms_ssim3d");
  require(dynamic_range > 0, "ms_ssim3d: dynamic range must be positive");
  const int scales = ms_ssim_scales({x.dx, x.dy, x.dz});
  if (window_size_for({x.dx, x.dy, x.dz}) < 3)
    throw std::invalid_argument("ms_ssim3d: volume too small for even one scale");
  double wsum = 0;
  for (int s = 0; s < scales; ++s) wsum += kMsWeights[static_cast<size_t>(s)];
  Field fx = to_field(x), fy = to_field(y);
  double result = 1.0;
  for (int s = 0; s < scales; ++s) {
    const double w = kMsWeights[static_cast<size_t>(s)] / wsum;
    SsimTerms t = ssim_terms(fx, fy, dynamic_range);
    if (s == scales - 1)
      result *= std::pow(t.luminance_mean, w) * std::pow(t.cs_mean, w);
    else
      result *= std::pow(t.cs_mean, w);
    if (s + 1 < scales) {
      fx = halve(fx);
      fy = halve(fy);
    }
  }
  return result;
}

std::pair<double, double> diversity_msssim(const std::vector<Volume>& batch, int num_pairs,
                                           uint64_t seed) {
  require(batch.size() >= 2, "diversity_msssim: batch must contain at least 2 volumes");
  require(num_pairs >= 1, "diversity_msssim: num_pairs must be >= 1");
  CounterRng rng(seed, Stream::EvalDraw, 0x4d53);
  double sum = 0, sum2 = 0;
  for (int p = 0; p < num_pairs; ++p) {
    const uint64_t i = rng.uniform_int(batch.size());
    uint64_t j = rng.uniform_int(batch.size());
    while (j == i) j = rng.uniform_int(batch.size());
    const double v = ms_ssim3d(batch[static_cast<size_t>(i)], batch[static_cast<size_t>(j)]);
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / num_pairs;
  const double var = std::max(0.0, sum2 / num_pairs - mean * mean);
  return {mean, std::sqrt(var)};
}

// ---------------------------------------------------------------------------
// slice-wise Frechet distance
// ---------------------------------------------------------------------------

Eigen::VectorXd RandProjExtractor::extract(const Slice2D& slice) const {
  const int64_t len = slice.rows * slice.cols;
  require(len > 0, "randproj-v1: empty slice");
  auto it = cache_.find(len);
  if (it == cache_.end()) {
    // fixed seed keyed by input length; independent of call order
    CounterRng rng(0x52504a31 /* RPJ1 */, Stream::RandProj, static_cast<uint64_t>(len));
    Eigen::MatrixXd p(dim(), len);
    const double scale = 1.0 / std::sqrt(static_cast<double>(len));
    for (int r = 0; r < dim(); ++r)
      for (int64_t c = 0; c < len; ++c) p(r, c) = rng.normal() * scale;
    it = cache_.emplace(len, std::move(p)).first;
  }
  Eigen::VectorXd v(len);
  for (int64_t i = 0; i < len; ++i) v(i) = slice.data[static_cast<size_t>(i)];
  return (it->second * v).array().tanh().matrix();
}

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name) {
  if (name == "randproj-v1") return std::make_unique<RandProjExtractor>();
  throw std::invalid_argument("unknown feature extractor '" + name + "'");
}

namespace {

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd s = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  if (es.info() != Eigen::Success) throw std::runtime_error("frechet_distance: eigensolver failed");
  Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1,
                        const Eigen::VectorXd& mu2, const Eigen::MatrixXd& s2) {
  require(mu1.size() == mu2.size() && s1.rows() == s1.cols() && s2.rows() == s2.cols() &&
              s1.rows() == mu1.size() && s2.rows() == mu2.size(),
          "frechet_distance: dimension mismatch");
  Eigen::MatrixXd root1 = sym_sqrt(s1);
  Eigen::MatrixXd inner = sym_sqrt(root1 * (0.5 * (s2 + s2.transpose())) * root1);
  const double value =
      (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * inner.trace();
  return std::max(0.0, value);
}

double slice_fd(const std::vector<Volume>& set_a, const std::vector<Volume>& set_b, Plane plane,
                const FeatureExtractor& extractor) {
  require(!set_a.empty() && !set_b.empty(), "slice_fd: empty set");
  const int f = extractor.dim();
  if (static_cast<int>(set_a.size()) <= f || static_cast<int>(set_b.size()) <= f)
    std::cerr << "slice_fd: warning: set sizes (" << set_a.size() << ", " << set_b.size()
              << ") <= feature dim " << f << "; covariance is rank-deficient\n";
  auto fit = [&](const std::vector<Volume>& set) {
    Eigen::MatrixXd feats(static_cast<int64_t>(set.size()), f);
    for (size_t i = 0; i < set.size(); ++i)
      feats.row(static_cast<int64_t>(i)) = extractor.extract(extract_middle_slice(set[i], plane));
    Eigen::VectorXd mu = feats.colwise().mean();
    Eigen::MatrixXd centered = feats.rowwise() - mu.transpose();
    const double denom = std::max<double>(1.0, static_cast<double>(set.size()) - 1.0);
    Eigen::MatrixXd cov = centered.transpose() * centered / denom;
    return std::make_pair(mu, cov);
  };
  auto [mu_a, cov_a] = fit(set_a);
  auto [mu_b, cov_b] = fit(set_b);
  return frechet_distance(mu_a, cov_a, mu_b, cov_b);
}

MetricsReport evaluate(const std::vector<Volume>& gen, const std::vector<Volume>& real,
                       const MetricsOptions& opts) {
  require(!gen.empty() && !real.empty(), "evaluate: empty volume sets");
  MetricsReport r;
  r.extractor = opts.extractor;
  r.seed = opts.seed;
  r.n_gen = static_cast<int>(gen.size());
  r.n_real = static_cast<int>(real.size());
  if (opts.run_bmmd) {
    r.has_bmmd = true;
    r.bmmd_batch = opts.bmmd_batch;
    r.bmmd_repeats = opts.bmmd_repeats;
    double sum = 0, sum2 = 0;
    for (int rep = 0; rep < opts.bmmd_repeats; ++rep) {
      CounterRng rng(opts.seed, Stream::EvalDraw, static_cast<uint64_t>(rep));
      std::vector<Volume> bx, by;
      for (int i = 0; i < opts.bmmd_batch; ++i) {
        // one underlying draw per slot so identical sets give identical batches
        const uint64_t u = rng.next_u64();
        bx.push_back(gen[static_cast<size_t>(u % gen.size())]);
        by.push_back(real[static_cast<size_t>(u % real.size())]);
      }
      const double v = bmmd2(bx, by);
      sum += v;
      sum2 += v * v;
    }
    r.bmmd2_mean = sum / opts.bmmd_repeats;
    r.bmmd2_std = std::sqrt(std::max(0.0, sum2 / opts.bmmd_repeats - r.bmmd2_mean * r.bmmd2_mean));
  }
  if (opts.run_msssim) {
    r.has_msssim = true;
    r.msssim_pairs = opts.msssim_pairs;
    auto [mean, sd] = diversity_msssim(gen, opts.msssim_pairs, opts.seed);
    r.msssim_mean = mean;
    r.msssim_std = sd;
  }
  if (opts.run_fd) {
    r.has_fd = true;
    auto ex = make_extractor(opts.extractor);
    r.fd_sagittal = slice_fd(gen, real, Plane::Sagittal, *ex);
    r.fd_axial = slice_fd(gen, real, Plane::Axial, *ex);
    r.fd_coronal = slice_fd(gen, real, Plane::Coronal, *ex);
  }
  return r;
}

std::string report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["bmmd2_mean"] = r.bmmd2_mean;
  j["bmmd2_std"] = r.bmmd2_std;
  j["msssim_mean"] = r.msssim_mean;
  j["msssim_std"] = r.msssim_std;
  j["fd_sagittal"] = r.fd_sagittal;
  j["fd_axial"] = r.fd_axial;
  j["fd_coronal"] = r.fd_coronal;
  j["extractor"] = r.extractor;
  j["seed"] = r.seed;
  j["n_gen"] = r.n_gen;
  j["n_real"] = r.n_real;
  j["bmmd_batch"] = r.bmmd_batch;
  j["bmmd_repeats"] = r.bmmd_repeats;
  j["msssim_pairs"] = r.msssim_pairs;
  return j.dump(2);
}

}  // namespace sv::metrics
