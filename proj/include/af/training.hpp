#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "af/flow.hpp"
#include "af/imaging.hpp"
#include "af/objectives.hpp"

namespace af {

// Eight Gaussian blobs on a regular octagon (paper toy study).
struct ToyMixtureSpec {
  double radius = 1.0;
  double sigma_f = 0.15;
  double sigma_n = 0.45;

  std::vector<std::array<double, 2>> centers() const;
};

// Training data.  In ambient mode the trainer touches only measurements; the
// object tensors are quarantined behind a counting accessor so tests can
// prove no optimization path reads them.
class Dataset {
 public:
  static Dataset toy2d(const ToyMixtureSpec& spec, std::int64_t count, const Rng& rng);
  // Random axis-aligned piecewise-constant images: `jumps` periodic cuts per
  // axis, iid uniform [0,1] cell levels.
  static Dataset piecewise(std::int64_t height, std::int64_t width, std::int64_t jumps,
                           std::int64_t count, const Rng& rng);
  static Dataset from_objects(Tensor objects);
  static Dataset ingest_directory(const std::filesystem::path& dir,
                                  const std::vector<std::int64_t>& shape);

  // Simulate g = H f + n for every object (deterministic per rng stream).
  void attach_measurements(const MeasurementModel& meas, const Rng& rng);
  void attach_measurements_identity_noise(double sigma_n, const Rng& rng);

  std::int64_t size() const { return count_; }
  std::int64_t object_dim() const { return object_dim_; }
  std::int64_t measurement_dim() const { return measurement_dim_; }
  bool has_measurements() const { return measurement_dim_ > 0; }

  Tensor measurement_batch(const std::vector<std::int64_t>& idx) const;
  // Quarantined: every call is counted.
  Tensor object_batch(const std::vector<std::int64_t>& idx) const;
  std::int64_t object_access_count() const { return object_reads_; }

 private:
  Dataset() = default;
  std::int64_t count_ = 0, object_dim_ = 0, measurement_dim_ = 0;
  Eigen::ArrayXd objects_;       // row-major [count, object_dim]
  Eigen::ArrayXd measurements_;  // row-major [count, measurement_dim]
  mutable std::int64_t object_reads_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 50.0;

  nlohmann::json to_json() const;
  static AdamConfig from_json(const nlohmann::json& j);
};

// Adam with global gradient-norm clipping over every store it owns.
class Adam {
 public:
  Adam(std::vector<ParameterStore*> stores, AdamConfig cfg);

  void step();
  std::int64_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  std::vector<ParameterStore*> stores_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<Eigen::ArrayXd> m_, v_;  // one per parameter, store-major order
};

// One Adam update outside the class, for single-tensor descent loops.
void adam_step(Tensor& param, const Eigen::ArrayXd& grad, Eigen::ArrayXd& m, Eigen::ArrayXd& v,
               std::int64_t t, const AdamConfig& cfg);

// Declarative experiment description (JSON-backed, strict keys).
struct ExperimentConfig {
  std::string mode = "ambient";  // conventional | ambient
  nlohmann::json dataset;        // {"kind": "toy2d-octagon" | "piecewise" | "tensor-directory", ...}
  std::optional<nlohmann::json> measurement;  // MeasurementModel::to_json shape
  std::optional<nlohmann::json> sparsity;     // SparsityModel::to_json shape
  FlowSpec generator;
  std::optional<ConditionalFlowSpec> posterior;  // required in ambient mode
  ObjectiveConfig objective;
  AdamConfig optimizer;
  std::int64_t steps = 1000;
  std::int64_t batch = 256;
  std::int64_t log_every = 50;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct MetricRow {
  std::int64_t step;
  double objective;
  double log_prior, log_noise, log_posterior, penalty;
  double grad_norm;
};

struct TrainResult {
  std::filesystem::path checkpoint_dir;
  std::vector<MetricRow> history;
  double final_objective = 0.0;
  std::int64_t steps_done = 0;
  // object-tensor reads during optimization; stays 0 in ambient mode
  std::int64_t object_reads = 0;
};

// Trains per config and writes a resumable checkpoint under out_dir.
// On divergence the last good state is checkpointed before the error.
TrainResult train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                  std::optional<std::filesystem::path> resume_from = std::nullopt);

// Builds the dataset named by the config (shared with evaluation tooling).
Dataset build_dataset(const ExperimentConfig& cfg, const Rng& rng);
std::optional<MeasurementModel> build_measurement(const ExperimentConfig& cfg);

struct LoadedCheckpoint {
  ExperimentConfig config;
  FlowModel generator;
  std::optional<ConditionalFlowModel> posterior;
  std::optional<MeasurementModel> measurement;
  std::optional<SparsityModel> sparsity;
  std::int64_t step = 0;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);

}  // namespace af
