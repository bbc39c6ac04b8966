#pragma once

#include <Eigen/Core>
#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "af/imaging.hpp"
#include "af/tensor.hpp"

namespace af {

// ---- optimal transport ------------------------------------------------------

struct W1Result {
  double value = 0.0;
  bool exact = true;
  std::string method = "assignment";
};

// Exact empirical Wasserstein-1 between equal-size sets (mean matched l2
// cost, shortest-augmenting-path assignment).  Above the exact-size cap the
// result is a flagged entropic approximation, never a silent substitute.
W1Result w1_empirical(const Tensor& x, const Tensor& y, std::int64_t exact_cap = 512);

// Exact assignment cost of an arbitrary square cost matrix (test oracle uses
// this against brute-force permutations).
double assignment_cost(const Eigen::MatrixXd& cost);

struct ProjectionLemmaReport {
  double w1 = 0.0;
  double mean_projection_distance = 0.0;
  bool equal = false;  // |w1 - mean| <= 1e-9
};

// Identity-transform sparsity models only: top-k is then the exact
// nearest-point projection onto S_k, which the lemma requires.
ProjectionLemmaReport check_projection_lemma(const Tensor& samples, const SparsityModel& sparsity);

// ---- restricted isometry -------------------------------------------------------

struct RicLevel {
  std::int64_t s = 0;
  double delta = 0.0;
  double lambda_min = 0.0;  // extreme restricted eigenvalues of H^T H
  double lambda_max = 0.0;
  std::int64_t supports_examined = 0;
  bool exhaustive = true;
  double coverage = 1.0;
};

// Exhaustive RIC over all s-sized transform-domain supports.  Throws a
// ConfigError advising the sampled fallback when C(l, s) exceeds the budget.
RicLevel ric_level(const Eigen::MatrixXd& h, const Eigen::MatrixXd& phi, std::int64_t s,
                   std::int64_t budget = 1000000);
double ric_estimate(const Eigen::MatrixXd& h, const Eigen::MatrixXd& phi, std::int64_t s,
                    std::int64_t budget = 1000000);
// Sampled-support lower bound with reported coverage.
RicLevel ric_level_sampled(const Eigen::MatrixXd& h, const Eigen::MatrixXd& phi, std::int64_t s,
                           std::int64_t samples, const Rng& rng, const std::string& stream);

struct RicReport {
  std::int64_t k = 0;
  std::vector<RicLevel> levels;  // s = k, 2k, 3k
  bool rip_satisfied = false;    // delta_k + delta_2k + delta_3k < 1
};

RicReport ric_report(const Eigen::MatrixXd& h, const Eigen::MatrixXd& phi, std::int64_t k,
                     std::int64_t budget = 1000000,
                     std::optional<std::int64_t> fallback_samples = std::nullopt,
                     const Rng* rng = nullptr);

// W1(p_theta_hat, q_f) <= (1 + ||H||_2 / sqrt(1 - delta_k)) (eps + eps').
double thm2_bound(double delta_k, double h_norm, double eps, double eps_prime);

// ---- densities on the 2-D grid ---------------------------------------------------

struct GaussianMixture2d {
  std::vector<std::array<double, 2>> centers;
  double sigma = 0.15;

  static GaussianMixture2d octagon(double radius, double sigma);
  double log_density(double x, double y) const;
  double mass_in_rect(double lo, double hi) const;
};

struct GridKlResult {
  double kl = 0.0;
  double tail_mass = 0.0;  // analytic mixture mass outside the grid
};

// Riemann-sum KL(q || p) of the analytic mixture against a model log-density
// evaluated on midpoints of a [lo,hi]^2 grid.
using BatchLogDensity = std::function<Eigen::ArrayXd(const Eigen::ArrayXd& xy_pairs)>;
GridKlResult kl_grid_2d(const BatchLogDensity& model_log_density, const GaussianMixture2d& q,
                        int grid = 400, double lo = -4.0, double hi = 4.0);
// Histogram variant when only samples of p are available.
GridKlResult kl_grid_2d_from_samples(const Tensor& samples, const GaussianMixture2d& q,
                                     int grid = 400, double lo = -4.0, double hi = 4.0);

// ---- mode statistics -----------------------------------------------------------

struct ModeReport {
  std::vector<double> shares;        // nearest-center share per mode
  std::vector<double> per_mode_std;  // per-coordinate RMS spread about each center
  double capture = 0.0;              // fraction within `radius` of some center
};

ModeReport mode_report(const Tensor& samples, const std::vector<std::array<double, 2>>& centers,
                       double radius);

// ---- image metrics -----------------------------------------------------------------

double rmse(const Tensor& a, const Tensor& b);
// Uniform-window SSIM; constants (k1 L)^2, (k2 L)^2 with L the reference range.
double ssim(const Tensor& a, const Tensor& b, std::int64_t window = 7, double k1 = 0.01,
            double k2 = 0.03, std::optional<double> data_range = std::nullopt);

}  // namespace af
