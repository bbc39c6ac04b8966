#include "af/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "af/error.hpp"
#include "af/tensor_random.hpp"

namespace af {

nlohmann::json ObjectiveConfig::to_json() const {
  return {{"importance_samples", importance_samples}, {"lambda", lambda}, {"mu", mu}};
}

ObjectiveConfig ObjectiveConfig::from_json(const nlohmann::json& j) {
  ObjectiveConfig c;
  c.importance_samples = j.at("importance_samples").get<std::int64_t>();
  c.lambda = j.at("lambda").get<double>();
  c.mu = j.at("mu").get<double>();
  if (c.importance_samples < 1) throw ConfigError("importance_samples must be >= 1");
  if (!(std::isfinite(c.lambda) && std::isfinite(c.mu))) throw ConfigError("lambda/mu must be finite");
  if (c.lambda < 0 || c.mu < 0) throw ConfigError("lambda/mu must be >= 0");
  return c;
}

double logavgexp(std::span<const double> values) {
  if (values.empty()) throw UsageError("logavgexp of an empty list");
  double m = *std::max_element(values.begin(), values.end());
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - m);
  return m + std::log(acc / static_cast<double>(values.size()));
}

Tensor logavgexp_rows(const Tensor& rows) {
  if (rows.rank() != 2) throw UsageError("logavgexp_rows expects [B, M]");
  const std::int64_t b = rows.dim(0), m = rows.dim(1);
  Tensor shift = reshape(max_axis_detached(rows, 1), {b, 1});
  Tensor shifted = sub(rows, broadcast_to(shift, {b, m}));
  Tensor lse = add(log(sum_axis(exp(shifted), 1)), reshape(shift, {b}));
  return affine(lse, 1.0, -std::log(static_cast<double>(m)));
}

Tensor nll(const FlowModel& flow, const Tensor& batch) {
  return neg(mean(flow.log_prob_rows(batch)));
}

BoundResult practical_objective(const FlowModel& g_model, const ConditionalFlowModel& h_model,
                                const MeasurementModel& meas, const SparsityModel* sparsity,
                                const Tensor& g_batch, const ObjectiveConfig& cfg,
                                RngStream& zeta_stream) {
  if (cfg.importance_samples < 1) throw ConfigError("importance_samples must be >= 1");
  if (cfg.mu != 0.0 && sparsity == nullptr)
    throw ConfigError("mu > 0 requires a sparsity model");
  Tensor g_rows = g_batch.rank() == 1 ? reshape(g_batch, {1, g_batch.dim(0)}) : g_batch;
  const std::int64_t b = g_rows.dim(0);
  const std::int64_t m_samp = cfg.importance_samples;
  const std::int64_t n = h_model.dim();

  Tensor g_rep = repeat_rows(g_rows, m_samp);
  Tensor zeta = randn_tensor({b * m_samp, n}, zeta_stream);

  FlowResult hf = h_model.forward(zeta, g_rep);
  const Tensor& f = hf.value;

  // log p_phi(f | g) from the same forward pass
  Tensor log_posterior = sub(std_normal_logpdf_rows(zeta), hf.logdet);
  Tensor log_prior = g_model.log_prob_rows(f);
  Tensor resid = sub(g_rep, meas.apply_rows(f));
  Tensor log_noise = meas.noise_log_density_rows(resid);

  Tensor terms = sub(add(log_prior, affine(log_noise, cfg.lambda, 0.0)), log_posterior);
  Tensor bound = mean(logavgexp_rows(reshape(terms, {b, m_samp})));

  BoundResult out;
  out.mean_log_prior = log_prior.array().mean();
  out.mean_log_noise = log_noise.array().mean();
  out.mean_log_posterior = log_posterior.array().mean();
  if (sparsity != nullptr) {
    Tensor pen = sparsity->penalty_rows(f);
    out.mean_penalty = pen.array().mean();
    if (cfg.mu != 0.0) {
      out.objective = sub(bound, affine(mean(pen), cfg.mu, 0.0));
      return out;
    }
  }
  out.objective = bound;
  return out;
}

BoundResult ambient_bound(const FlowModel& g_model, const ConditionalFlowModel& h_model,
                          const MeasurementModel& meas, const Tensor& g_batch, std::int64_t M,
                          RngStream& zeta_stream) {
  ObjectiveConfig cfg;
  cfg.importance_samples = M;
  cfg.lambda = 1.0;
  cfg.mu = 0.0;
  return practical_objective(g_model, h_model, meas, nullptr, g_batch, cfg, zeta_stream);
}

}  // namespace af
