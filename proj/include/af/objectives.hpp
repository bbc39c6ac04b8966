#pragma once

#include <optional>
#include <span>

#include "af/flow.hpp"
#include "af/imaging.hpp"

namespace af {

struct ObjectiveConfig {
  std::int64_t importance_samples = 4;  // M
  double lambda = 1.0;                  // noise-likelihood weight
  double mu = 0.0;                      // sparsity weight

  nlohmann::json to_json() const;
  static ObjectiveConfig from_json(const nlohmann::json& j);
};

// log[(1/M) sum_i exp(x_i)] via max-shift.
double logavgexp(std::span<const double> values);
// Row-wise over [B, M]; the shift is detached so gradients stay exact.
Tensor logavgexp_rows(const Tensor& rows);

// Mean negative log-likelihood of a batch under the flow (to minimize).
Tensor nll(const FlowModel& flow, const Tensor& batch);

struct BoundResult {
  Tensor objective;  // scalar, to maximize
  // Detached per-batch diagnostics.
  double mean_log_prior = 0.0;
  double mean_log_noise = 0.0;
  double mean_log_posterior = 0.0;
  double mean_penalty = 0.0;  // epsilon-hat constraint monitor
};

// Variational bound L_M: mean over g of logavgexp_i of
// [ log p_theta(h(zeta_i; g)) + log q_n(g - H h(zeta_i; g)) - log p_phi(...) ].
BoundResult ambient_bound(const FlowModel& g_model, const ConditionalFlowModel& h_model,
                          const MeasurementModel& meas, const Tensor& g_batch, std::int64_t M,
                          RngStream& zeta_stream);

// Practical objective: lambda weights the noise term inside the logavgexp and
// mu scales the mean l1 sparsity penalty of the (unthresholded) posterior
// samples.  sparsity may be null when mu == 0.
BoundResult practical_objective(const FlowModel& g_model, const ConditionalFlowModel& h_model,
                                const MeasurementModel& meas, const SparsityModel* sparsity,
                                const Tensor& g_batch, const ObjectiveConfig& cfg,
                                RngStream& zeta_stream);

}  // namespace af
