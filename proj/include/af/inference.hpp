#pragma once

#include <optional>
#include <string>
#include <vector>

#include "af/flow.hpp"
#include "af/imaging.hpp"
#include "af/training.hpp"

namespace af {

struct MapConfig {
  double map_lambda = 0.01;  // Eq. 10 latent weight (distinct from the training lambda)
  std::int64_t steps = 600;
  double lr = 0.05;
  std::int64_t restarts = 3;  // additional random starts besides z0 = 0
  std::uint64_t seed = 1;
  std::string stream = "map";
};

struct MapResult {
  Tensor f_hat;                    // [n]
  Tensor z_hat;                    // [n]
  double objective = 0.0;          // final best ||g - HG(z)||^2 + lambda ||z||^2
  double residual_norm = 0.0;      // ||g - H f_hat||_2
  std::vector<double> best_trace;  // best-so-far objective per step
};

MapResult map_csgm(const FlowModel& prior, const MeasurementModel& meas, const Tensor& g,
                   const MapConfig& cfg);

struct AldConfig {
  std::int64_t levels = 10;
  double sigma_max = 1.0;  // callers scale by the data std
  double sigma_min = 0.01;
  std::int64_t steps_per_level = 50;
  double step_scale = 0.05;  // eta_t = step_scale * sigma_t^2
  std::int64_t chains = 40;
  std::uint64_t seed = 1;
  std::string stream = "ald";
  std::string init = "prior";  // prior | adjoint

  nlohmann::json to_json() const;
};

struct PosteriorEnsemble {
  Tensor samples;  // [N, n]
  std::string provenance;
  nlohmann::json schedule;
};

// Approximate draws from p(f|g) ~ q_n(g - Hf) p_theta(f) via annealed
// (step-size laddered) unadjusted Langevin dynamics; the score runs through
// the differentiation engine.
PosteriorEnsemble ald_sample(const FlowModel& prior, const MeasurementModel& meas, const Tensor& g,
                             const AldConfig& cfg);

struct MmseResult {
  Tensor mmse;     // [n] per-pixel mean
  Tensor std_map;  // [n] per-pixel std, N-1 denominator
};

MmseResult mmse_and_std(const PosteriorEnsemble& ensemble);

PosteriorEnsemble posterior_net_sample(const ConditionalFlowModel& h, const Tensor& g,
                                       std::int64_t count, RngStream& stream);

struct ScatterPoint {
  std::int64_t g_index;
  double log_posterior;       // log p_phi(f | g)
  double log_joint;           // log q_n(g - Hf) + log p_theta(f)
};

struct ConsistencyReport {
  std::vector<ScatterPoint> points;
  std::vector<double> slopes;  // least-squares slope per g
};

// Appendix-B style check: scatter of posterior-network log-scores against the
// induced-posterior log-scores, one slope per measurement.
ConsistencyReport posterior_consistency_scatter(const FlowModel& g_model,
                                                const ConditionalFlowModel& h_model,
                                                const MeasurementModel& meas, const Tensor& g_list,
                                                std::int64_t samples_per_g, RngStream& stream);

}  // namespace af
