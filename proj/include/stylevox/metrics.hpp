#pragma once

#include <Eigen/Dense>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stylevox/volume.hpp"

namespace sv::metrics {

// batch-wise squared MMD with the dot-product kernel, V-statistic form:
// (1/n^2) sum k(xi,xj) + (1/m^2) sum k(yi,yj) - (2/nm) sum k(xi,yj)
double bmmd2(const std::vector<Volume>& x, const std::vector<Volume>& y);

// single-scale SSIM with a 3D Gaussian window (11^3, sigma 1.5, truncated to
// fit), valid-mode filtering, C1=(0.01 D)^2, C2=(0.03 D)^2
double ssim3d(const Volume& x, const Volume& y, double dynamic_range = 2.0);
// mean contrast-structure term alone (shift-invariant up to C2)
double ssim3d_cs(const Volume& x, const Volume& y, double dynamic_range = 2.0);

// multi-scale SSIM over avgpool-by-2 scales; contrast-structure and luminance
// terms are clamped at 0 before exponentiation, truncated weights renormalized
double ms_ssim3d(const Volume& x, const Volume& y, double dynamic_range = 2.0);
int ms_ssim_scales(const std::array<int64_t, 3>& dims);

// mean/std of ms_ssim3d over seeded random distinct-index pairs
std::pair<double, double> diversity_msssim(const std::vector<Volume>& batch, int num_pairs,
                                           uint64_t seed);

// 2D slice -> fixed-length feature vector; deterministic per version
struct FeatureExtractor {
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  virtual int dim() const = 0;
  virtual Eigen::VectorXd extract(const Slice2D& slice) const = 0;
};

// "randproj-v1": seeded Gaussian random projection of the flattened slice to
// F=64 features, then tanh
class RandProjExtractor : public FeatureExtractor {
 public:
  std::string name() const override { return "randproj-v1"; }
  int dim() const override { return 64; }
  Eigen::VectorXd extract(const Slice2D& slice) const override;

 private:
  mutable std::map<int64_t, Eigen::MatrixXd> cache_;
};

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name);

// ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), clamped at 0
double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& s1,
                        const Eigen::VectorXd& mu2, const Eigen::MatrixXd& s2);

double slice_fd(const std::vector<Volume>& set_a, const std::vector<Volume>& set_b, Plane plane,
                const FeatureExtractor& extractor);

struct MetricsOptions {
  uint64_t seed = 0;
  int bmmd_batch = 8;
  int bmmd_repeats = 10;
  int msssim_pairs = 32;
  std::string extractor = "randproj-v1";
  bool run_bmmd = true;
  bool run_msssim = true;
  bool run_fd = true;
};

struct MetricsReport {
  double bmmd2_mean = 0, bmmd2_std = 0;
  double msssim_mean = 0, msssim_std = 0;
  double fd_sagittal = 0, fd_axial = 0, fd_coronal = 0;
  std::string extractor;
  uint64_t seed = 0;
  int n_gen = 0, n_real = 0;
  int bmmd_batch = 0, bmmd_repeats = 0, msssim_pairs = 0;
  bool has_bmmd = false, has_msssim = false, has_fd = false;
};

MetricsReport evaluate(const std::vector<Volume>& gen, const std::vector<Volume>& real,
                       const MetricsOptions& opts);
std::string report_to_json(const MetricsReport& r);

}  // namespace sv::metrics
