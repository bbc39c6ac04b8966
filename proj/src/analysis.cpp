#include "af/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "af/error.hpp"

namespace af {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::MatrixXd pairwise_l2(const Tensor& x, const Tensor& y) {
  const std::int64_t n = x.dim(0), d = x.dim(1);
  Eigen::MatrixXd cost(n, n);
  for (std::int64_t i = 0; i < n; ++i) {
    Eigen::Map<const Eigen::ArrayXd> xi(x.array().data() + i * d, d);
    for (std::int64_t j = 0; j < n; ++j) {
      Eigen::Map<const Eigen::ArrayXd> yj(y.array().data() + j * d, d);
      cost(i, j) = std::sqrt((xi - yj).square().sum());
    }
  }
  return cost;
}

}  // namespace

double assignment_cost(const Eigen::MatrixXd& cost) {
  // Jonker-Volgenant style shortest augmenting paths with potentials.
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw UsageError("assignment needs a square cost matrix");
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int> match(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = match[static_cast<size_t>(j0)];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(match[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      match[static_cast<size_t>(j0)] = match[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j) total += cost(match[static_cast<size_t>(j)] - 1, j - 1);
  return total;
}

namespace {

double sinkhorn_cost(const Eigen::MatrixXd& cost, double reg, int iters) {
  const Eigen::Index n = cost.rows();
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n), g = Eigen::VectorXd::Zero(n);
  const double logw = -std::log(static_cast<double>(n));
  auto soft_min_rows = [&](const Eigen::VectorXd& other, bool rows) {
    Eigen::VectorXd out(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double m = kInf;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double c = rows ? cost(i, j) : cost(j, i);
        m = std::min(m, c - other[j]);
      }
      double acc = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double c = rows ? cost(i, j) : cost(j, i);
        acc += std::exp(-(c - other[j] - m) / reg + logw);
      }
      out[i] = m - reg * std::log(acc);
    }
    return out;
  };
  for (int it = 0; it < iters; ++it) {
    f = soft_min_rows(g, true);
    g = soft_min_rows(f, false);
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j)
      total += std::exp(-(cost(i, j) - f[i] - g[j]) / reg + 2 * logw) * cost(i, j);
  }
  return total * static_cast<double>(n);
}

}  // namespace

W1Result w1_empirical(const Tensor& x, const Tensor& y, std::int64_t exact_cap) {
  if (x.rank() != 2 || y.rank() != 2) throw UsageError("w1_empirical expects [N, d] sample sets");
  if (x.dim(0) != y.dim(0) || x.dim(1) != y.dim(1))
    throw UsageError("w1_empirical needs equal-size, equal-dim sets");
  const std::int64_t n = x.dim(0);
  Eigen::MatrixXd cost = pairwise_l2(x, y);
  W1Result out;
  if (n <= exact_cap) {
    out.value = assignment_cost(cost) / static_cast<double>(n);
    out.exact = true;
    out.method = "assignment";
  } else {
    const double reg = 0.002 * cost.maxCoeff() + 1e-12;
    out.value = sinkhorn_cost(cost, reg, 400) / static_cast<double>(n);
    out.exact = false;
    out.method = "sinkhorn";
  }
  return out;
}

ProjectionLemmaReport check_projection_lemma(const Tensor& samples, const SparsityModel& sparsity) {
  if (sparsity.kind() != SparsityModel::Kind::Identity)
    throw UsageError(
        "projection lemma check requires the identity transform (top-k is then the exact "
        "nearest-point projection)");
  if (samples.rank() != 2) throw UsageError("samples must be [N, n]");
  const std::int64_t n = samples.dim(0), d = samples.dim(1);
  Eigen::ArrayXd proj(n * d);
  double mean_dist = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    Eigen::ArrayXd row = samples.array().segment(i * d, d);
    Eigen::ArrayXd p = SparsityModel::project_topk(row, sparsity.k());
    proj.segment(i * d, d) = p;
    mean_dist += std::sqrt((row - p).square().sum());
  }
  mean_dist /= static_cast<double>(n);
  Tensor proj_t = Tensor::from_array({n, d}, std::move(proj));
  W1Result w1 = w1_empirical(samples, proj_t);
  if (!w1.exact) throw UsageError("projection lemma check needs the exact assignment solver");
  ProjectionLemmaReport rep;
  rep.w1 = w1.value;
  rep.mean_projection_distance = mean_dist;
  rep.equal = std::abs(rep.w1 - rep.mean_projection_distance) <= 1e-9;
  return rep;
}

// ---- RIC -------------------------------------------------------------------------

namespace {

double binomial_or_inf(std::int64_t n, std::int64_t k) {
  double acc = 1.0;
  for (std::int64_t i = 0; i < k; ++i) {
    acc *= static_cast<double>(n - i) / static_cast<double>(i + 1);
    if (acc > 1e15) return 1e15;
  }
  return acc;
}

struct SubspaceCache {
  const Eigen::MatrixXd& h;
  const Eigen::MatrixXd& phi;
  std::vector<std::int64_t> nonzero_rows;  // rows of phi with any support
  std::map<std::uint64_t, std::pair<double, double>> extremes;  // key: excluded nonzero rows

  explicit SubspaceCache(const Eigen::MatrixXd& h_in, const Eigen::MatrixXd& phi_in)
      : h(h_in), phi(phi_in) {
    for (Eigen::Index r = 0; r < phi.rows(); ++r)
      if (phi.row(r).cwiseAbs().maxCoeff() > 0.0) nonzero_rows.push_back(r);
    if (nonzero_rows.size() > 64)
      throw ConfigError("exhaustive RIC supports at most 64 active transform rows");
  }

  // Extreme eigenvalues of B^T H^T H B, B an orthonormal basis of
  // {v : Phi v supported inside T}.  Returns nullopt when the subspace is {0}.
  std::optional<std::pair<double, double>> restricted_extremes(
      const std::vector<std::int64_t>& support) {
    std::uint64_t key = 0;
    std::vector<char> in_support(static_cast<size_t>(phi.rows()), 0);
    for (auto r : support) in_support[static_cast<size_t>(r)] = 1;
    for (size_t i = 0; i < nonzero_rows.size(); ++i)
      if (in_support[static_cast<size_t>(nonzero_rows[i])]) key |= (1ULL << i);
    auto it = extremes.find(key);
    if (it != extremes.end()) {
      if (std::isnan(it->second.first)) return std::nullopt;
      return it->second;
    }

    std::vector<std::int64_t> constraints;
    for (auto r : nonzero_rows)
      if (!in_support[static_cast<size_t>(r)]) constraints.push_back(r);

    const Eigen::Index n = phi.cols();
    Eigen::MatrixXd basis;
    if (constraints.empty()) {
      basis = Eigen::MatrixXd::Identity(n, n);
    } else {
      Eigen::MatrixXd a(static_cast<Eigen::Index>(constraints.size()), n);
      for (size_t i = 0; i < constraints.size(); ++i) a.row(static_cast<Eigen::Index>(i)) = phi.row(constraints[i]);
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
      const auto& sv = svd.singularValues();
      const double tol = 1e-10 * std::max(1.0, sv.size() ? sv[0] : 0.0);
      Eigen::Index rank = 0;
      for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv[i] > tol) ++rank;
      if (rank == n) {
        extremes[key] = {std::nan(""), std::nan("")};
        return std::nullopt;
      }
      basis = svd.matrixV().rightCols(n - rank);
    }
    Eigen::MatrixXd hb = h * basis;
    Eigen::MatrixXd m = hb.transpose() * hb;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
    std::pair<double, double> ext{eig.eigenvalues().minCoeff(), eig.eigenvalues().maxCoeff()};
    extremes[key] = ext;
    return ext;
  }
};

template <typename Visit>
void for_each_combination(std::int64_t l, std::int64_t s, Visit&& visit) {
  std::vector<std::int64_t> comb(static_cast<size_t>(s));
  std::iota(comb.begin(), comb.end(), 0);
  while (true) {
    visit(comb);
    std::int64_t i = s - 1;
    while (i >= 0 && comb[static_cast<size_t>(i)] == l - s + i) --i;
    if (i < 0) break;
    ++comb[static_cast<size_t>(i)];
    for (std::int64_t j = i + 1; j < s; ++j) comb[static_cast<size_t>(j)] = comb[static_cast<size_t>(j - 1)] + 1;
  }
}

void validate_ric_inputs(const Eigen::MatrixXd& h, const Eigen::MatrixXd& phi, std::int64_t s) {
  if (h.cols() != phi.cols()) throw ConfigError("H and Phi act on different signal dims");
  if (s < 1 || s > phi.rows()) throw ConfigError("RIC sparsity level out of range");
}

}  // namespace

RicLevel ric_level(const Eigen::MatrixXd& h, const Eigen::MatrixXd& phi, std::int64_t s,
                   std::int64_t budget) {
  validate_ric_inputs(h, phi, s);
  const std::int64_t l = phi.rows();
  if (binomial_or_inf(l, s) > static_cast<double>(budget))
    throw ConfigError("RIC enumeration budget exceeded: C(" + std::to_string(l) + "," +
                      std::to_string(s) +
                      ") supports; use the randomized fallback (sampled supports with reported "
                      "coverage)");
  SubspaceCache cache(h, phi);
  RicLevel out;
  out.s = s;
  out.lambda_min = kInf;
  out.lambda_max = -kInf;
  for_each_combination(l, s, [&](const std::vector<std::int64_t>& comb) {
    ++out.supports_examined;
    auto ext = cache.restricted_extremes(comb);
    if (!ext) return;
    out.lambda_min = std::min(out.lambda_min, ext->first);
    out.lambda_max = std::max(out.lambda_max, ext->second);
  });
  if (out.lambda_max < out.lambda_min)
    throw ConfigError("no support yields a nontrivial subspace at s = " + std::to_string(s));
  out.delta = std::max(1.0 - out.lambda_min, out.lambda_max - 1.0);
  out.exhaustive = true;
  out.coverage = 1.0;
  return out;
}

double ric_estimate(const Eigen::MatrixXd& h, const Eigen::MatrixXd& phi, std::int64_t s,
                    std::int64_t budget) {
  return ric_level(h, phi, s, budget).delta;
}

RicLevel ric_level_sampled(const Eigen::MatrixXd& h, const Eigen::MatrixXd& phi, std::int64_t s,
                           std::int64_t samples, const Rng& rng, const std::string& stream) {
  validate_ric_inputs(h, phi, s);
  if (samples < 1) throw ConfigError("sampled RIC needs samples >= 1");
  const std::int64_t l = phi.rows();
  SubspaceCache cache(h, phi);
  RicLevel out;
  out.s = s;
  out.lambda_min = kInf;
  out.lambda_max = -kInf;
  const auto sid = Rng::hash_name(stream);
  std::uint64_t counter = 0;
  std::vector<std::int64_t> pool(static_cast<size_t>(l));
  for (std::int64_t trial = 0; trial < samples; ++trial) {
    std::iota(pool.begin(), pool.end(), 0);
    for (std::int64_t t = 0; t < s; ++t) {
      const std::uint64_t r = rng.uniform_index(sid, counter++, static_cast<std::uint64_t>(l - t));
      std::swap(pool[static_cast<size_t>(t)], pool[static_cast<size_t>(t + static_cast<std::int64_t>(r))]);
    }
    std::vector<std::int64_t> comb(pool.begin(), pool.begin() + s);
    ++out.supports_examined;
    auto ext = cache.restricted_extremes(comb);
    if (!ext) continue;
    out.lambda_min = std::min(out.lambda_min, ext->first);
    out.lambda_max = std::max(out.lambda_max, ext->second);
  }
  if (out.lambda_max < out.lambda_min)
    throw ConfigError("no sampled support yields a nontrivial subspace");
  out.delta = std::max(1.0 - out.lambda_min, out.lambda_max - 1.0);
  out.exhaustive = false;
  out.coverage = static_cast<double>(samples) / binomial_or_inf(l, s);
  return out;
}

RicReport ric_report(const Eigen::MatrixXd& h, const Eigen::MatrixXd& phi, std::int64_t k,
                     std::int64_t budget, std::optional<std::int64_t> fallback_samples,
                     const Rng* rng) {
  RicReport rep;
  rep.k = k;
  for (std::int64_t s : {k, 2 * k, 3 * k}) {
    try {
      rep.levels.push_back(ric_level(h, phi, s, budget));
    } catch (const ConfigError&) {
      if (!fallback_samples || !rng) throw;
      rep.levels.push_back(ric_level_sampled(h, phi, s, *fallback_samples, *rng,
                                             "ric.fallback.s" + std::to_string(s)));
    }
  }
  rep.rip_satisfied =
      rep.levels[0].delta + rep.levels[1].delta + rep.levels[2].delta < 1.0;
  return rep;
}

double thm2_bound(double delta_k, double h_norm, double eps, double eps_prime) {
  if (delta_k >= 1.0 || delta_k < 0.0)
    throw ConfigError("thm2_bound requires 0 <= delta_k < 1");
  if (h_norm < 0 || eps < 0 || eps_prime < 0)
    throw ConfigError("thm2_bound requires nonnegative norm and epsilons");
  return (1.0 + h_norm / std::sqrt(1.0 - delta_k)) * (eps + eps_prime);
}

// ---- mixtures and KL grids ----------------------------------------------------------

GaussianMixture2d GaussianMixture2d::octagon(double radius, double sigma) {
  GaussianMixture2d m;
  m.sigma = sigma;
  for (int i = 0; i < 8; ++i) {
    const double ang = 2.0 * M_PI * i / 8.0;
    m.centers.push_back({radius * std::cos(ang), radius * std::sin(ang)});
  }
  return m;
}

double GaussianMixture2d::log_density(double x, double y) const {
  const double inv2s2 = 0.5 / (sigma * sigma);
  double best = -kInf;
  std::vector<double> expo(centers.size());
  for (size_t i = 0; i < centers.size(); ++i) {
    const double dx = x - centers[i][0], dy = y - centers[i][1];
    expo[i] = -(dx * dx + dy * dy) * inv2s2;
    best = std::max(best, expo[i]);
  }
  double acc = 0.0;
  for (double e : expo) acc += std::exp(e - best);
  return best + std::log(acc / static_cast<double>(centers.size())) -
         std::log(2.0 * M_PI * sigma * sigma);
}

double GaussianMixture2d::mass_in_rect(double lo, double hi) const {
  auto cdf = [&](double z) { return 0.5 * (1.0 + std::erf(z / std::sqrt(2.0))); };
  double mass = 0.0;
  for (const auto& c : centers) {
    const double px = cdf((hi - c[0]) / sigma) - cdf((lo - c[0]) / sigma);
    const double py = cdf((hi - c[1]) / sigma) - cdf((lo - c[1]) / sigma);
    mass += px * py;
  }
  return mass / static_cast<double>(centers.size());
}

GridKlResult kl_grid_2d(const BatchLogDensity& model_log_density, const GaussianMixture2d& q,
                        int grid, double lo, double hi) {
  if (grid < 2) throw UsageError("kl grid too small");
  const double step = (hi - lo) / grid;
  double kl = 0.0;
  Eigen::ArrayXd pts(grid * 2);
  for (int i = 0; i < grid; ++i) {
    const double x = lo + (i + 0.5) * step;
    for (int j = 0; j < grid; ++j) {
      pts[2 * j] = x;
      pts[2 * j + 1] = lo + (j + 0.5) * step;
    }
    Eigen::ArrayXd logp = model_log_density(pts);
    if (logp.size() != grid) throw UsageError("model log-density returned wrong batch size");
    for (int j = 0; j < grid; ++j) {
      const double logq = q.log_density(x, lo + (j + 0.5) * step);
      const double qv = std::exp(logq);
      kl += qv * (logq - logp[j]) * step * step;
    }
  }
  GridKlResult out;
  out.kl = kl;
  out.tail_mass = 1.0 - q.mass_in_rect(lo, hi);
  return out;
}

GridKlResult kl_grid_2d_from_samples(const Tensor& samples, const GaussianMixture2d& q, int grid,
                                     double lo, double hi) {
  if (samples.rank() != 2 || samples.dim(1) != 2) throw UsageError("samples must be [N, 2]");
  const std::int64_t n = samples.dim(0);
  const double step = (hi - lo) / grid;
  Eigen::ArrayXd counts = Eigen::ArrayXd::Zero(static_cast<std::int64_t>(grid) * grid);
  std::int64_t inside = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double x = samples[2 * i], y = samples[2 * i + 1];
    const auto gi = static_cast<std::int64_t>(std::floor((x - lo) / step));
    const auto gj = static_cast<std::int64_t>(std::floor((y - lo) / step));
    if (gi < 0 || gj < 0 || gi >= grid || gj >= grid) continue;
    counts[gi * grid + gj] += 1.0;
    ++inside;
  }
  if (inside == 0) throw NumericError("no samples fall inside the KL grid");
  // half-count floor keeps empty cells finite
  const double floor_density = 0.5 / (static_cast<double>(n) * step * step);
  double kl = 0.0;
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) {
      const double x = lo + (i + 0.5) * step, y = lo + (j + 0.5) * step;
      const double logq = q.log_density(x, y);
      const double qv = std::exp(logq);
      const double p =
          std::max(floor_density, counts[static_cast<std::int64_t>(i) * grid + j] /
                                      (static_cast<double>(n) * step * step));
      kl += qv * (logq - std::log(p)) * step * step;
    }
  GridKlResult out;
  out.kl = kl;
  out.tail_mass = 1.0 - q.mass_in_rect(lo, hi);
  return out;
}

// ---- mode statistics -------------------------------------------------------------

ModeReport mode_report(const Tensor& samples, const std::vector<std::array<double, 2>>& centers,
                       double radius) {
  if (samples.rank() != 2 || samples.dim(1) != 2) throw UsageError("samples must be [N, 2]");
  if (centers.empty()) throw UsageError("mode_report needs centers");
  const std::int64_t n = samples.dim(0);
  const size_t modes = centers.size();
  std::vector<std::int64_t> count(modes, 0);
  std::vector<double> sq(modes, 0.0);
  std::int64_t captured = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double x = samples[2 * i], y = samples[2 * i + 1];
    size_t best = 0;
    double best_d2 = kInf;
    for (size_t m = 0; m < modes; ++m) {
      const double dx = x - centers[m][0], dy = y - centers[m][1];
      const double d2 = dx * dx + dy * dy;
      if (d2 < best_d2) {
        best_d2 = d2;
        best = m;
      }
    }
    ++count[best];
    sq[best] += best_d2;
    if (best_d2 <= radius * radius) ++captured;
  }
  ModeReport rep;
  rep.capture = static_cast<double>(captured) / static_cast<double>(n);
  for (size_t m = 0; m < modes; ++m) {
    rep.shares.push_back(static_cast<double>(count[m]) / static_cast<double>(n));
    rep.per_mode_std.push_back(count[m] ? std::sqrt(sq[m] / (2.0 * static_cast<double>(count[m])))
                                        : 0.0);
  }
  return rep;
}

// ---- image metrics ------------------------------------------------------------------

double rmse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw UsageError("rmse shape mismatch");
  return std::sqrt((a.array() - b.array()).square().mean());
}

double ssim(const Tensor& a, const Tensor& b, std::int64_t window, double k1, double k2,
            std::optional<double> data_range) {
  if (a.shape() != b.shape()) throw UsageError("ssim shape mismatch");
  if (a.rank() != 2) throw UsageError("ssim expects [h, w] images");
  const std::int64_t h = a.dim(0), w = a.dim(1);
  if (window > h || window > w) throw UsageError("ssim window larger than image");
  const double range =
      data_range.value_or(std::max(1e-12, a.array().maxCoeff() - a.array().minCoeff()));
  const double c1 = (k1 * range) * (k1 * range);
  const double c2 = (k2 * range) * (k2 * range);
  const double wn = static_cast<double>(window * window);

  double acc = 0.0;
  std::int64_t windows = 0;
  for (std::int64_t i = 0; i + window <= h; ++i)
    for (std::int64_t j = 0; j + window <= w; ++j) {
      double ma = 0, mb = 0, va = 0, vb = 0, cab = 0;
      for (std::int64_t u = 0; u < window; ++u)
        for (std::int64_t v = 0; v < window; ++v) {
          ma += a[(i + u) * w + j + v];
          mb += b[(i + u) * w + j + v];
        }
      ma /= wn;
      mb /= wn;
      for (std::int64_t u = 0; u < window; ++u)
        for (std::int64_t v = 0; v < window; ++v) {
          const double da = a[(i + u) * w + j + v] - ma;
          const double db = b[(i + u) * w + j + v] - mb;
          va += da * da;
          vb += db * db;
          cab += da * db;
        }
      va /= wn - 1;
      vb /= wn - 1;
      cab /= wn - 1;
      acc += ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  return acc / static_cast<double>(windows);
}

}  // namespace af
