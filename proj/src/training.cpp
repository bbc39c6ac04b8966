#include "af/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "af/aftn.hpp"
#include "af/error.hpp"
#include "af/tensor_random.hpp"

namespace af {

namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// ---- ToyMixtureSpec ---------------------------------------------------------

std::vector<std::array<double, 2>> ToyMixtureSpec::centers() const {
  std::vector<std::array<double, 2>> c;
  for (int i = 0; i < 8; ++i) {
    const double ang = 2.0 * M_PI * i / 8.0;
    c.push_back({radius * std::cos(ang), radius * std::sin(ang)});
  }
  return c;
}

// ---- Dataset -----------------------------------------------------------------

Dataset Dataset::toy2d(const ToyMixtureSpec& spec, std::int64_t count, const Rng& rng) {
  if (count < 1) throw ConfigError("toy2d dataset needs count >= 1");
  Dataset d;
  d.count_ = count;
  d.object_dim_ = 2;
  d.objects_.resize(count * 2);
  auto centers = spec.centers();
  const auto s_center = Rng::hash_name("toy.center");
  const auto s_obj = Rng::hash_name("toy.object");
  for (std::int64_t i = 0; i < count; ++i) {
    const auto c = centers[rng.uniform_index(s_center, static_cast<std::uint64_t>(i), 8)];
    d.objects_[2 * i] = c[0] + spec.sigma_f * rng.normal(s_obj, 2 * static_cast<std::uint64_t>(i));
    d.objects_[2 * i + 1] =
        c[1] + spec.sigma_f * rng.normal(s_obj, 2 * static_cast<std::uint64_t>(i) + 1);
  }
  d.attach_measurements_identity_noise(spec.sigma_n, rng);
  return d;
}

Dataset Dataset::piecewise(std::int64_t height, std::int64_t width, std::int64_t jumps,
                           std::int64_t count, const Rng& rng) {
  if (height < 1 || width < 1 || count < 1) throw ConfigError("piecewise dataset dims invalid");
  if (jumps < 1) throw ConfigError("piecewise dataset needs jumps >= 1");
  Dataset d;
  d.count_ = count;
  d.object_dim_ = height * width;
  d.objects_.resize(count * d.object_dim_);
  const auto s_cuty = Rng::hash_name("piecewise.cut_y");
  const auto s_cutx = Rng::hash_name("piecewise.cut_x");
  const auto s_level = Rng::hash_name("piecewise.level");

  const std::int64_t jy = std::min(jumps, height), jx = std::min(jumps, width);
  auto pick_cuts = [&](std::uint64_t stream, std::int64_t img, std::int64_t n, std::int64_t c) {
    // partial Fisher-Yates: exactly c distinct positions, fixed draw count
    std::vector<std::int64_t> pos(static_cast<size_t>(n));
    std::iota(pos.begin(), pos.end(), 0);
    for (std::int64_t t = 0; t < c; ++t) {
      std::uint64_t u = rng.uniform_index(
          stream, static_cast<std::uint64_t>(img * jumps + t), static_cast<std::uint64_t>(n - t));
      std::swap(pos[static_cast<size_t>(t)], pos[static_cast<size_t>(t + static_cast<std::int64_t>(u))]);
    }
    std::vector<std::int64_t> cuts(pos.begin(), pos.begin() + c);
    std::sort(cuts.begin(), cuts.end());
    return cuts;
  };
  auto arc_of = [](const std::vector<std::int64_t>& cuts, std::int64_t p) {
    // cuts are arc start positions on the periodic axis
    std::int64_t arc = static_cast<std::int64_t>(cuts.size()) - 1;
    for (size_t t = 0; t < cuts.size(); ++t) {
      if (p >= cuts[t]) arc = static_cast<std::int64_t>(t);
      else break;
    }
    return arc;
  };

  for (std::int64_t img = 0; img < count; ++img) {
    auto cy = pick_cuts(s_cuty, img, height, jy);
    auto cx = pick_cuts(s_cutx, img, width, jx);
    for (std::int64_t y = 0; y < height; ++y) {
      const std::int64_t ay = arc_of(cy, y);
      for (std::int64_t x = 0; x < width; ++x) {
        const std::int64_t ax = arc_of(cx, x);
        const double level = rng.uniform(
            s_level, static_cast<std::uint64_t>((img * jumps + ay) * jumps + ax));
        d.objects_[img * d.object_dim_ + y * width + x] = level;
      }
    }
  }
  return d;
}

Dataset Dataset::from_objects(Tensor objects) {
  if (objects.rank() != 2) throw ConfigError("from_objects expects [count, dim]");
  Dataset d;
  d.count_ = objects.dim(0);
  d.object_dim_ = objects.dim(1);
  d.objects_ = objects.array();
  return d;
}

Dataset Dataset::ingest_directory(const std::filesystem::path& dir,
                                  const std::vector<std::int64_t>& shape) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".aftn") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no AFTN tensors found in " + dir.string());
  const std::int64_t dim = shape_size(Shape(shape.begin(), shape.end()));
  Dataset d;
  d.count_ = static_cast<std::int64_t>(files.size());
  d.object_dim_ = dim;
  d.objects_.resize(d.count_ * dim);
  for (std::int64_t i = 0; i < d.count_; ++i) {
    Tensor t = read_aftn(files[static_cast<size_t>(i)]);
    if (Shape(shape.begin(), shape.end()) != t.shape())
      throw IoError("tensor " + files[static_cast<size_t>(i)].string() + " has shape " +
                    shape_str(t.shape()) + ", expected " +
                    shape_str(Shape(shape.begin(), shape.end())));
    d.objects_.segment(i * dim, dim) = t.array();
  }
  return d;
}

void Dataset::attach_measurements(const MeasurementModel& meas, const Rng& rng) {
  if (meas.input_dim() != object_dim_) throw ConfigError("measurement operator dim mismatch");
  measurement_dim_ = meas.output_dim();
  measurements_.resize(count_ * measurement_dim_);
  const auto stream = Rng::hash_name("dataset.measure");
  const std::int64_t chunk = 4096;
  for (std::int64_t start = 0; start < count_; start += chunk) {
    const std::int64_t rows = std::min(chunk, count_ - start);
    Tensor f = Tensor::from_array({rows, object_dim_},
                                  objects_.segment(start * object_dim_, rows * object_dim_));
    Tensor g = meas.measure_rows(f, rng, stream, static_cast<std::uint64_t>(start));
    measurements_.segment(start * measurement_dim_, rows * measurement_dim_) = g.array();
  }
}

void Dataset::attach_measurements_identity_noise(double sigma_n, const Rng& rng) {
  NoiseModel noise{sigma_n, false};
  attach_measurements(MeasurementModel::identity(object_dim_, noise), rng);
}

Tensor Dataset::measurement_batch(const std::vector<std::int64_t>& idx) const {
  if (!has_measurements()) throw UsageError("dataset has no measurements attached");
  const std::int64_t b = static_cast<std::int64_t>(idx.size());
  Eigen::ArrayXd out(b * measurement_dim_);
  for (std::int64_t i = 0; i < b; ++i) {
    if (idx[static_cast<size_t>(i)] < 0 || idx[static_cast<size_t>(i)] >= count_)
      throw UsageError("batch index out of range");
    out.segment(i * measurement_dim_, measurement_dim_) =
        measurements_.segment(idx[static_cast<size_t>(i)] * measurement_dim_, measurement_dim_);
  }
  return Tensor::from_array({b, measurement_dim_}, std::move(out));
}

Tensor Dataset::object_batch(const std::vector<std::int64_t>& idx) const {
  ++object_reads_;
  const std::int64_t b = static_cast<std::int64_t>(idx.size());
  Eigen::ArrayXd out(b * object_dim_);
  for (std::int64_t i = 0; i < b; ++i) {
    if (idx[static_cast<size_t>(i)] < 0 || idx[static_cast<size_t>(i)] >= count_)
      throw UsageError("batch index out of range");
    out.segment(i * object_dim_, object_dim_) =
        objects_.segment(idx[static_cast<size_t>(i)] * object_dim_, object_dim_);
  }
  return Tensor::from_array({b, object_dim_}, std::move(out));
}

// ---- Adam ----------------------------------------------------------------------

nlohmann::json AdamConfig::to_json() const {
  return {{"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"clip_norm", clip_norm}};
}

AdamConfig AdamConfig::from_json(const nlohmann::json& j) {
  check_keys(j, {"lr", "beta1", "beta2", "eps", "clip_norm"}, "optimizer");
  AdamConfig c;
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  return c;
}

Adam::Adam(std::vector<ParameterStore*> stores, AdamConfig cfg)
    : stores_(std::move(stores)), cfg_(cfg) {
  for (auto* s : stores_)
    for (const auto& name : s->names()) {
      m_.push_back(Eigen::ArrayXd::Zero(s->get(name).size()));
      v_.push_back(Eigen::ArrayXd::Zero(s->get(name).size()));
    }
}

void adam_step(Tensor& param, const Eigen::ArrayXd& grad, Eigen::ArrayXd& m, Eigen::ArrayXd& v,
               std::int64_t t, const AdamConfig& cfg) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.square();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  param.mutable_array() -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
}

void Adam::step() {
  ++t_;
  double norm_sq = 0.0;
  for (auto* s : stores_)
    for (const auto& name : s->names()) norm_sq += s->get(name).grad().square().sum();
  const double norm = std::sqrt(norm_sq);
  const double scale = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

  size_t slot = 0;
  for (auto* s : stores_)
    for (const auto& name : s->names()) {
      Tensor& p = s->get(name);
      Eigen::ArrayXd g = p.grad() * scale;
      adam_step(p, g, m_[slot], v_[slot], t_, cfg_);
      ++slot;
    }
}

void Adam::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  size_t slot = 0;
  for (auto* s : stores_)
    for (const auto& name : s->names()) {
      write_aftn(dir / (name + ".m.aftn"), Tensor::from_array({m_[slot].size()}, m_[slot]));
      write_aftn(dir / (name + ".v.aftn"), Tensor::from_array({v_[slot].size()}, v_[slot]));
      ++slot;
    }
  std::ofstream os(dir / "optimizer.json");
  os << nlohmann::json{{"t", t_}, {"config", cfg_.to_json()}}.dump(2) << "\n";
}

void Adam::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "optimizer.json");
  if (!is) throw IoError("missing optimizer.json in " + dir.string());
  nlohmann::json j = nlohmann::json::parse(is);
  t_ = j.at("t").get<std::int64_t>();
  size_t slot = 0;
  for (auto* s : stores_)
    for (const auto& name : s->names()) {
      m_[slot] = read_aftn(dir / (name + ".m.aftn")).array();
      v_[slot] = read_aftn(dir / (name + ".v.aftn")).array();
      ++slot;
    }
}

// ---- ExperimentConfig ------------------------------------------------------------

namespace {

FlowSpec parse_flow_spec(const nlohmann::json& j, const std::string& where) {
  check_keys(j,
             {"n", "couplings", "hidden", "mix", "actnorm", "cond_width", "cond_affine", "image",
              "squeeze_stages", "init_seed", "scale_clamp"},
             where);
  FlowSpec s;
  s.n = j.at("n").get<std::int64_t>();
  s.couplings = j.value("couplings", s.couplings);
  s.hidden = j.value("hidden", s.hidden);
  s.mix = j.value("mix", s.mix);
  s.actnorm = j.value("actnorm", s.actnorm);
  s.cond_width = j.value("cond_width", s.cond_width);
  s.cond_affine = j.value("cond_affine", s.cond_affine);
  s.image = j.value("image", s.image);
  s.squeeze_stages = j.value("squeeze_stages", s.squeeze_stages);
  s.init_seed = j.value("init_seed", s.init_seed);
  s.scale_clamp = j.value("scale_clamp", s.scale_clamp);
  return s;
}

ConditionalFlowSpec parse_cond_spec(const nlohmann::json& j) {
  check_keys(j, {"flow", "measurement_dim", "cond_hidden", "measurement_image", "cond_identity"},
             "posterior");
  ConditionalFlowSpec s;
  s.flow = parse_flow_spec(j.at("flow"), "posterior.flow");
  s.measurement_dim = j.at("measurement_dim").get<std::int64_t>();
  s.cond_hidden = j.value("cond_hidden", s.cond_hidden);
  s.measurement_image = j.value("measurement_image", s.measurement_image);
  s.cond_identity = j.value("cond_identity", s.cond_identity);
  return s;
}

ObjectiveConfig parse_objective(const nlohmann::json& j) {
  check_keys(j, {"importance_samples", "lambda", "mu"}, "objective");
  ObjectiveConfig c;
  c.importance_samples = j.value("importance_samples", c.importance_samples);
  c.lambda = j.value("lambda", c.lambda);
  c.mu = j.value("mu", c.mu);
  return c;
}

}  // namespace

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j{{"mode", mode},
                   {"dataset", dataset},
                   {"generator", generator.to_json()},
                   {"objective", objective.to_json()},
                   {"optimizer", optimizer.to_json()},
                   {"steps", steps},
                   {"batch", batch},
                   {"log_every", log_every},
                   {"seed", seed}};
  if (measurement) j["measurement"] = *measurement;
  if (sparsity) j["sparsity"] = *sparsity;
  if (posterior) j["posterior"] = posterior->to_json();
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  check_keys(j,
             {"mode", "dataset", "measurement", "sparsity", "generator", "posterior", "objective",
              "optimizer", "steps", "batch", "log_every", "seed"},
             "experiment config");
  ExperimentConfig c;
  c.mode = j.at("mode").get<std::string>();
  c.dataset = j.at("dataset");
  if (j.contains("measurement")) c.measurement = j.at("measurement");
  if (j.contains("sparsity")) c.sparsity = j.at("sparsity");
  c.generator = parse_flow_spec(j.at("generator"), "generator");
  if (j.contains("posterior")) c.posterior = parse_cond_spec(j.at("posterior"));
  if (j.contains("objective")) c.objective = parse_objective(j.at("objective"));
  if (j.contains("optimizer")) c.optimizer = AdamConfig::from_json(j.at("optimizer"));
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.log_every = j.value("log_every", c.log_every);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  if (mode != "conventional" && mode != "ambient")
    throw ConfigError("mode must be 'conventional' or 'ambient', got '" + mode + "'");
  if (!dataset.is_object() || !dataset.contains("kind"))
    throw ConfigError("dataset spec needs a 'kind'");
  if (mode == "ambient") {
    if (!posterior) throw ConfigError("ambient mode requires a posterior network spec");
    if (posterior->flow.n != generator.n)
      throw ConfigError("posterior and generator dims differ");
  }
  if (steps < 0 || batch < 1 || log_every < 1) throw ConfigError("invalid steps/batch/log_every");
  if (objective.importance_samples < 1) throw ConfigError("importance_samples must be >= 1");
}

Dataset build_dataset(const ExperimentConfig& cfg, const Rng& rng) {
  const auto& j = cfg.dataset;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "toy2d-octagon") {
    check_keys(j, {"kind", "count", "radius", "sigma_f", "sigma_n"}, "dataset");
    ToyMixtureSpec spec;
    spec.radius = j.value("radius", spec.radius);
    spec.sigma_f = j.value("sigma_f", spec.sigma_f);
    spec.sigma_n = j.value("sigma_n", spec.sigma_n);
    return Dataset::toy2d(spec, j.value("count", static_cast<std::int64_t>(1000000)), rng);
  }
  if (kind == "piecewise") {
    check_keys(j, {"kind", "count", "height", "width", "jumps"}, "dataset");
    Dataset d = Dataset::piecewise(j.at("height").get<std::int64_t>(),
                                   j.at("width").get<std::int64_t>(),
                                   j.value("jumps", static_cast<std::int64_t>(2)),
                                   j.value("count", static_cast<std::int64_t>(10000)), rng);
    if (cfg.measurement) d.attach_measurements(MeasurementModel::from_json(*cfg.measurement), rng);
    return d;
  }
  if (kind == "tensor-directory") {
    check_keys(j, {"kind", "path", "shape"}, "dataset");
    Dataset d = Dataset::ingest_directory(j.at("path").get<std::string>(),
                                          j.at("shape").get<std::vector<std::int64_t>>());
    if (cfg.measurement) d.attach_measurements(MeasurementModel::from_json(*cfg.measurement), rng);
    return d;
  }
  throw ConfigError("unknown dataset kind: " + kind);
}

std::optional<MeasurementModel> build_measurement(const ExperimentConfig& cfg) {
  if (!cfg.measurement) return std::nullopt;
  return MeasurementModel::from_json(*cfg.measurement);
}

// ---- training loop -------------------------------------------------------------

namespace {

struct Snapshot {
  std::vector<Eigen::ArrayXd> params;
  std::int64_t step = 0;
};

Snapshot take_snapshot(const std::vector<ParameterStore*>& stores, std::int64_t step) {
  Snapshot s;
  s.step = step;
  for (auto* st : stores)
    for (const auto& name : st->names()) s.params.push_back(st->get(name).array());
  return s;
}

void restore_snapshot(const std::vector<ParameterStore*>& stores, const Snapshot& s) {
  size_t slot = 0;
  for (auto* st : stores)
    for (const auto& name : st->names()) st->get(name).mutable_array() = s.params[slot++];
}

void write_checkpoint(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                      const FlowModel& g, const ConditionalFlowModel* h, const Adam& adam,
                      std::int64_t next_step, const std::vector<MetricRow>& history) {
  std::filesystem::create_directories(dir);
  nlohmann::json arch{{"mode", cfg.mode}, {"generator", g.architecture()}};
  if (h) arch["posterior"] = h->architecture();
  if (cfg.measurement) arch["measurement"] = *cfg.measurement;
  if (cfg.sparsity) arch["sparsity"] = *cfg.sparsity;
  {
    std::ofstream os(dir / "architecture.json");
    os << arch.dump(2) << "\n";
  }
  {
    std::ofstream os(dir / "config.json");
    os << cfg.to_json().dump(2) << "\n";
  }
  save_params(dir / "params", g.params());
  if (h) save_params(dir / "params", h->params());
  adam.save(dir / "optimizer");
  {
    std::ofstream os(dir / "rng.json");
    os << nlohmann::json{{"next_step", next_step}}.dump(2) << "\n";
  }
  write_metrics_csv(dir / "metrics.csv", history);
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write metrics csv: " + path.string());
  os << "step,objective,log_prior,log_noise,log_posterior,penalty,grad_norm\r\n";
  for (const auto& r : rows)
    os << r.step << "," << fmt_double(r.objective) << "," << fmt_double(r.log_prior) << ","
       << fmt_double(r.log_noise) << "," << fmt_double(r.log_posterior) << ","
       << fmt_double(r.penalty) << "," << fmt_double(r.grad_norm) << "\r\n";
}

TrainResult train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                  std::optional<std::filesystem::path> resume_from) {
  cfg.validate();
  Rng rng(cfg.seed);
  Dataset data = build_dataset(cfg, rng);
  auto meas = build_measurement(cfg);
  if (cfg.mode == "ambient") {
    if (!data.has_measurements()) throw ConfigError("ambient mode needs measurements in the dataset");
    if (!meas) {
      // toy datasets carry their own identity+noise simulation
      const auto& j = cfg.dataset;
      if (j.at("kind").get<std::string>() == "toy2d-octagon") {
        NoiseModel noise{j.value("sigma_n", 0.45), false};
        meas = MeasurementModel::identity(2, noise);
      } else {
        throw ConfigError("ambient mode requires a measurement model");
      }
    }
  }
  std::optional<SparsityModel> sparsity;
  if (cfg.sparsity) sparsity = SparsityModel::from_json(*cfg.sparsity);
  if (cfg.objective.mu != 0.0 && !sparsity)
    throw ConfigError("objective.mu > 0 requires a sparsity model");

  FlowModel g_model(cfg.generator, "g");
  std::optional<ConditionalFlowModel> h_model;
  if (cfg.mode == "ambient") h_model.emplace(*cfg.posterior, "h");

  std::vector<ParameterStore*> stores{&g_model.params()};
  if (h_model) stores.push_back(&h_model->params());
  Adam adam(stores, cfg.optimizer);

  std::int64_t start_step = 0;
  std::vector<MetricRow> history;
  const std::filesystem::path ckpt = out_dir / "checkpoint";
  if (resume_from) {
    load_params(*resume_from / "params", g_model.params());
    if (h_model) load_params(*resume_from / "params", h_model->params());
    adam.load(*resume_from / "optimizer");
    std::ifstream is(*resume_from / "rng.json");
    if (!is) throw IoError("missing rng.json in checkpoint");
    start_step = nlohmann::json::parse(is).at("next_step").get<std::int64_t>();
  }

  const auto s_batch = Rng::hash_name("train.batch");
  const std::uint64_t zeta_stride = static_cast<std::uint64_t>(
      cfg.batch * cfg.objective.importance_samples * cfg.generator.n);

  Snapshot last_good = take_snapshot(stores, start_step);
  TrainResult result;
  result.checkpoint_dir = ckpt;

  auto batch_indices = [&](std::int64_t step) {
    std::vector<std::int64_t> idx(static_cast<size_t>(cfg.batch));
    for (std::int64_t j = 0; j < cfg.batch; ++j)
      idx[static_cast<size_t>(j)] = static_cast<std::int64_t>(rng.uniform_index(
          s_batch, static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch) +
                       static_cast<std::uint64_t>(j),
          static_cast<std::uint64_t>(data.size())));
    return idx;
  };

  for (std::int64_t step = start_step; step < cfg.steps; ++step) {
    auto idx = batch_indices(step);
    try {
      double objective_value = 0.0;
      MetricRow row{};
      row.step = step;

      if (cfg.mode == "conventional") {
        Tensor x = data.object_batch(idx);
        if (step == 0 && start_step == 0 && g_model.needs_data_init())
          g_model.data_init_from_data(x);
        Tensor loss = nll(g_model, x);
        objective_value = -loss.scalar_value();
        for (auto* s : stores) s->zero_grads();
        loss.backward();
      } else {
        Tensor g_batch = data.measurement_batch(idx);
        if (step == 0 && start_step == 0 &&
            (h_model->needs_data_init() || g_model.needs_data_init())) {
          RngStream init_stream(rng, "train.init");
          Tensor zeta0 = randn_tensor({cfg.batch, cfg.generator.n}, init_stream);
          h_model->data_init_from_draws(zeta0, g_batch);
          Tensor f0 = h_model->forward(zeta0, g_batch).value.detach();
          g_model.data_init_from_data(f0);
        }
        RngStream zeta(rng, "train.zeta", static_cast<std::uint64_t>(step) * zeta_stride);
        BoundResult bound = practical_objective(g_model, *h_model, *meas,
                                                sparsity ? &*sparsity : nullptr, g_batch,
                                                cfg.objective, zeta);
        objective_value = bound.objective.scalar_value();
        row.log_prior = bound.mean_log_prior;
        row.log_noise = bound.mean_log_noise;
        row.log_posterior = bound.mean_log_posterior;
        row.penalty = bound.mean_penalty;
        Tensor loss = neg(bound.objective);
        for (auto* s : stores) s->zero_grads();
        loss.backward();
      }

      if (!std::isfinite(objective_value)) throw NumericError("objective is not finite");

      double norm_sq = 0.0;
      for (auto* s : stores)
        for (const auto& name : s->names()) norm_sq += s->get(name).grad().square().sum();
      row.objective = objective_value;
      row.grad_norm = std::sqrt(norm_sq);
      adam.step();

      if (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
        history.push_back(row);
        last_good = take_snapshot(stores, step + 1);
      }
      result.final_objective = objective_value;
      result.steps_done = step + 1;
    } catch (const NumericError& e) {
      restore_snapshot(stores, last_good);
      write_checkpoint(ckpt, cfg, g_model, h_model ? &*h_model : nullptr, adam, last_good.step,
                       history);
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what() +
                         " (last good checkpoint written to " + ckpt.string() + ")");
    }
  }

  write_checkpoint(ckpt, cfg, g_model, h_model ? &*h_model : nullptr, adam, cfg.steps, history);
  result.history = std::move(history);
  result.object_reads = data.object_access_count();
  return result;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "config.json");
  if (!is) throw IoError("missing config.json in " + dir.string());
  ExperimentConfig cfg = ExperimentConfig::from_json(nlohmann::json::parse(is));

  LoadedCheckpoint out{cfg, FlowModel(cfg.generator, "g"), std::nullopt, std::nullopt, std::nullopt,
                       0};
  load_params(dir / "params", out.generator.params());
  if (cfg.mode == "ambient" && cfg.posterior) {
    out.posterior.emplace(*cfg.posterior, "h");
    load_params(dir / "params", out.posterior->params());
  }
  if (cfg.measurement) out.measurement = MeasurementModel::from_json(*cfg.measurement);
  else if (cfg.dataset.value("kind", "") == "toy2d-octagon" && cfg.mode == "ambient") {
    NoiseModel noise{cfg.dataset.value("sigma_n", 0.45), false};
    out.measurement = MeasurementModel::identity(2, noise);
  }
  if (cfg.sparsity) out.sparsity = SparsityModel::from_json(*cfg.sparsity);
  std::ifstream rs(dir / "rng.json");
  if (rs) out.step = nlohmann::json::parse(rs).at("next_step").get<std::int64_t>();
  return out;
}

}  // namespace af
