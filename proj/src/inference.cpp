#include "af/inference.hpp"

#include <cmath>

#include "af/error.hpp"
#include "af/tensor_random.hpp"

namespace af {

namespace {

Tensor as_row(const Tensor& g) {
  if (g.rank() == 1) return reshape(g, {1, g.dim(0)});
  if (g.rank() == 2 && g.dim(0) == 1) return g;
  throw ConfigError("expected a single measurement vector");
}

}  // namespace

MapResult map_csgm(const FlowModel& prior, const MeasurementModel& meas, const Tensor& g,
                   const MapConfig& cfg) {
  if (cfg.map_lambda < 0) throw ConfigError("map_lambda must be >= 0");
  if (cfg.steps < 1 || cfg.restarts < 0) throw ConfigError("invalid MAP solver budget");
  const std::int64_t n = prior.dim();
  Tensor g_row = as_row(g);
  if (g_row.dim(1) != meas.output_dim()) throw ConfigError("measurement dim mismatch");

  const std::int64_t rows = cfg.restarts + 1;
  Rng rng(cfg.seed);
  RngStream starts(rng, cfg.stream + ".init");
  Tensor z = Tensor::zeros({rows, n});
  for (std::int64_t r = 1; r < rows; ++r)
    for (std::int64_t j = 0; j < n; ++j) z.mutable_array()[r * n + j] = starts.normal();
  z.set_requires_grad(true);

  Tensor g_rep = repeat_rows(g_row, rows);
  AdamConfig opt;
  opt.lr = cfg.lr;
  opt.clip_norm = 0.0;  // raw Adam descent on the latent
  Eigen::ArrayXd m = Eigen::ArrayXd::Zero(rows * n), v = Eigen::ArrayXd::Zero(rows * n);

  auto objective_rows = [&](const Tensor& zz) {
    Tensor x = prior.forward(zz).value;
    Tensor resid = sub(g_rep, meas.apply_rows(x));
    return add(sum_axis(square(resid), 1), affine(sum_axis(square(zz), 1), cfg.map_lambda, 0.0));
  };

  std::vector<double> best_trace;
  best_trace.reserve(static_cast<size_t>(cfg.steps));
  double best = std::numeric_limits<double>::infinity();
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    Tensor per_row = objective_rows(z);
    best = std::min(best, per_row.array().minCoeff());
    best_trace.push_back(best);
    Tensor loss = sum(per_row);
    if (!std::isfinite(loss.scalar_value()))
      throw NumericError("MAP objective diverged at step " + std::to_string(step));
    z.zero_grad();
    loss.backward();
    adam_step(z, z.grad(), m, v, step + 1, opt);
  }

  Tensor final_rows = objective_rows(z);
  std::int64_t best_row = 0;
  for (std::int64_t r = 1; r < rows; ++r)
    if (final_rows[r] < final_rows[best_row]) best_row = r;

  MapResult out;
  Tensor z_best = slice(z, 0, best_row, 1).detach();
  Tensor x_best = prior.forward(z_best).value.detach();
  Tensor resid = sub(g_row, meas.apply_rows(x_best));
  out.z_hat = reshape(z_best, {n});
  out.f_hat = reshape(x_best, {n});
  out.objective = std::min(best, final_rows[best_row]);
  out.residual_norm = std::sqrt(resid.array().square().sum());
  out.best_trace = std::move(best_trace);
  return out;
}

nlohmann::json AldConfig::to_json() const {
  return {{"levels", levels},
          {"sigma_max", sigma_max},
          {"sigma_min", sigma_min},
          {"steps_per_level", steps_per_level},
          {"step_scale", step_scale},
          {"chains", chains},
          {"seed", seed},
          {"init", init}};
}

PosteriorEnsemble ald_sample(const FlowModel& prior, const MeasurementModel& meas, const Tensor& g,
                             const AldConfig& cfg) {
  if (cfg.levels < 1 || cfg.steps_per_level < 1 || cfg.chains < 1)
    throw ConfigError("invalid ALD schedule");
  if (!(cfg.sigma_max > cfg.sigma_min && cfg.sigma_min > 0))
    throw ConfigError("ALD ladder must decrease to a positive sigma_min");
  const std::int64_t n = prior.dim();
  const std::int64_t chains = cfg.chains;
  Tensor g_row = as_row(g);
  Tensor g_rep = repeat_rows(g_row, chains);

  Rng rng(cfg.seed);
  RngStream init_stream(rng, cfg.stream + ".init");
  Tensor f = cfg.init == "adjoint"
                 ? repeat_rows(meas.adjoint_rows(g_row), chains).detach()
                 : prior.sample(chains, init_stream);
  f.set_requires_grad(true);

  const double ratio = std::pow(cfg.sigma_min / cfg.sigma_max,
                                1.0 / static_cast<double>(std::max<std::int64_t>(1, cfg.levels - 1)));
  const auto s_noise = Rng::hash_name(cfg.stream + ".noise");

  std::uint64_t counter = 0;
  for (std::int64_t level = 0; level < cfg.levels; ++level) {
    const double sigma_t = cfg.sigma_max * std::pow(ratio, static_cast<double>(level));
    const double eta = cfg.step_scale * sigma_t * sigma_t;
    for (std::int64_t it = 0; it < cfg.steps_per_level; ++it) {
      Tensor score_sum;
      try {
        Tensor log_prior = prior.log_prob_rows(f);
        Tensor log_noise = meas.noise_log_density_rows(sub(g_rep, meas.apply_rows(f)));
        score_sum = add(sum(log_prior), sum(log_noise));
      } catch (const NumericError& e) {
        throw NumericError("ALD score failed at ladder level " + std::to_string(level) + ": " +
                           e.what());
      }
      f.zero_grad();
      score_sum.backward();
      Eigen::ArrayXd grad = f.grad();
      if (!grad.allFinite())
        throw NumericError("non-finite ALD score at ladder level " + std::to_string(level));
      Eigen::ArrayXd noise(chains * n);
      for (std::int64_t i = 0; i < chains * n; ++i)
        noise[i] = rng.normal(s_noise, counter++);
      f.mutable_array() += 0.5 * eta * grad + std::sqrt(eta) * noise;
    }
  }

  PosteriorEnsemble out;
  out.samples = f.detach();
  out.provenance = "ALD";
  out.schedule = cfg.to_json();
  return out;
}

MmseResult mmse_and_std(const PosteriorEnsemble& ensemble) {
  const Tensor& s = ensemble.samples;
  if (s.rank() != 2) throw UsageError("ensemble samples must be [N, n]");
  const std::int64_t count = s.dim(0), n = s.dim(1);
  if (count < 2) throw UsageError("std maps need at least 2 samples");
  Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(n), var = Eigen::ArrayXd::Zero(n);
  for (std::int64_t i = 0; i < count; ++i)
    mean += Eigen::Map<const Eigen::ArrayXd>(s.array().data() + i * n, n);
  mean /= static_cast<double>(count);
  for (std::int64_t i = 0; i < count; ++i) {
    Eigen::ArrayXd d = Eigen::Map<const Eigen::ArrayXd>(s.array().data() + i * n, n) - mean;
    var += d * d;
  }
  var /= static_cast<double>(count - 1);
  MmseResult out;
  out.mmse = Tensor::from_array({n}, std::move(mean));
  out.std_map = Tensor::from_array({n}, var.sqrt());
  return out;
}

PosteriorEnsemble posterior_net_sample(const ConditionalFlowModel& h, const Tensor& g,
                                       std::int64_t count, RngStream& stream) {
  if (count < 1) throw UsageError("posterior sample count must be >= 1");
  PosteriorEnsemble out;
  out.samples = h.sample(as_row(g), count, stream);
  out.provenance = "posterior-network";
  out.schedule = nlohmann::json::object();
  return out;
}

ConsistencyReport posterior_consistency_scatter(const FlowModel& g_model,
                                                const ConditionalFlowModel& h_model,
                                                const MeasurementModel& meas, const Tensor& g_list,
                                                std::int64_t samples_per_g, RngStream& stream) {
  if (samples_per_g < 2) throw UsageError("consistency scatter needs at least 2 samples per g");
  Tensor rows = g_list.rank() == 1 ? reshape(g_list, {1, g_list.dim(0)}) : g_list;
  ConsistencyReport report;
  for (std::int64_t gi = 0; gi < rows.dim(0); ++gi) {
    Tensor g = slice(rows, 0, gi, 1).detach();
    Tensor g_rep = repeat_rows(g, samples_per_g);
    Tensor zeta = randn_tensor({samples_per_g, h_model.dim()}, stream);
    FlowResult hf = h_model.forward(zeta, g_rep);
    Tensor f = hf.value;
    Eigen::ArrayXd log_post = sub(std_normal_logpdf_rows(zeta), hf.logdet).array();
    Eigen::ArrayXd log_joint =
        add(g_model.log_prob_rows(f),
            meas.noise_log_density_rows(sub(g_rep, meas.apply_rows(f))))
            .array();

    const double mx = log_post.mean(), my = log_joint.mean();
    double sxx = 0.0, sxy = 0.0;
    for (std::int64_t i = 0; i < samples_per_g; ++i) {
      sxx += (log_post[i] - mx) * (log_post[i] - mx);
      sxy += (log_post[i] - mx) * (log_joint[i] - my);
    }
    report.slopes.push_back(sxy / sxx);
    for (std::int64_t i = 0; i < samples_per_g; ++i)
      report.points.push_back({gi, log_post[i], log_joint[i]});
  }
  return report;
}

}  // namespace af
