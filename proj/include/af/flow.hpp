#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "af/param_store.hpp"
#include "af/rng.hpp"
#include "af/tensor.hpp"

namespace af {

// Per-row log N(0, I_n) of a [B, n] tensor; returns [B].
Tensor std_normal_logpdf_rows(const Tensor& x);

struct FlowResult {
  Tensor value;   // [B, n]
  Tensor logdet;  // [B], log |det Jacobian| of the applied direction
};

// One bijective stage.  Batched row convention: tensors are [B, n].
class InvertibleBlock {
 public:
  virtual ~InvertibleBlock() = default;
  virtual const char* kind() const = 0;
  virtual FlowResult forward(const Tensor& x, const Tensor* cond) const = 0;
  virtual FlowResult inverse(const Tensor& y, const Tensor* cond) const = 0;
  virtual nlohmann::json describe() const = 0;

  virtual bool wants_data_init() const { return false; }
  // Called once with the activations seen at this block in the named
  // direction before the first optimizer step.
  virtual void data_init_inverse(const Tensor&) {}
  virtual void data_init_forward(const Tensor&) {}
};

struct FlowSpec {
  std::int64_t n = 2;
  std::int64_t couplings = 8;
  std::int64_t hidden = 64;
  std::string mix = "permutation";  // permutation | lu | none
  bool actnorm = true;
  std::int64_t cond_width = 0;  // coupling nets also see this many features
  // conditional-affine stages (global shift/scale, shift linear in the
  // conditioning features); realizes exact conjugate posteriors
  std::int64_t cond_affine = 0;
  std::vector<std::int64_t> image;  // [h, w] when squeeze stages are used
  std::int64_t squeeze_stages = 0;
  std::uint64_t init_seed = 1;
  double scale_clamp = 1.9;  // tanh bound on coupling log-scales

  nlohmann::json to_json() const;
  static FlowSpec from_json(const nlohmann::json& j);
};

// Unconditional invertible model G: z ~ N(0, I_n) -> x.
class FlowModel {
 public:
  FlowModel(FlowSpec spec, std::string param_prefix = "g");

  std::int64_t dim() const { return spec_.n; }
  const FlowSpec& spec() const { return spec_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  FlowResult forward(const Tensor& z) const;
  FlowResult inverse(const Tensor& x) const;
  Tensor log_prob_rows(const Tensor& x) const;
  Tensor log_prob(const Tensor& x) const;  // scalar, x is [n] or [1,n]
  Tensor sample(std::int64_t count, RngStream& stream) const;

  bool needs_data_init() const;
  // Initialize actnorm stats from a data batch flowing in the inverse
  // (density) direction.
  void data_init_from_data(const Tensor& x_batch);

  nlohmann::json architecture() const;

 private:
  friend class ConditionalFlowModel;
  FlowSpec spec_;
  ParameterStore store_;
  std::vector<std::unique_ptr<InvertibleBlock>> blocks_;
};

struct ConditionalFlowSpec {
  FlowSpec flow;                 // flow.cond_width > 0
  std::int64_t measurement_dim = 0;
  std::int64_t cond_hidden = 64;
  // [h,w] or [c,h,w]: conditioner becomes a two-scale pooled feature stack
  std::vector<std::int64_t> measurement_image;
  // feed g through unchanged (needs cond_width == measurement_dim)
  bool cond_identity = false;

  nlohmann::json to_json() const;
  static ConditionalFlowSpec from_json(const nlohmann::json& j);
};

// Posterior network h(zeta; g): for fixed g a bijection in zeta.
class ConditionalFlowModel {
 public:
  ConditionalFlowModel(ConditionalFlowSpec spec, std::string param_prefix = "h");

  std::int64_t dim() const { return spec_.flow.n; }
  std::int64_t measurement_dim() const { return spec_.measurement_dim; }
  const ConditionalFlowSpec& spec() const { return spec_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  // g is [B, m] (or [m]); broadcasting of a single g across the batch of
  // zeta rows is the caller's job (repeat_rows helper below).
  Tensor features(const Tensor& g) const;
  FlowResult forward(const Tensor& zeta, const Tensor& g) const;
  FlowResult inverse(const Tensor& f, const Tensor& g) const;
  Tensor log_prob_rows(const Tensor& f, const Tensor& g) const;
  Tensor sample(const Tensor& g, std::int64_t count, RngStream& stream) const;

  bool needs_data_init() const;
  // Initialize actnorms from a (zeta, g) batch flowing forward.
  void data_init_from_draws(const Tensor& zeta, const Tensor& g);

  nlohmann::json architecture() const;

 private:
  ConditionalFlowSpec spec_;
  ParameterStore store_;
  std::vector<std::unique_ptr<InvertibleBlock>> blocks_;
  // conditioner parameter names live in store_ under "<prefix>.cond.*"
  std::string prefix_;
  Tensor pool1_t_, pool2_t_;  // constant pooling matrices for image conditioners
};

// Repeat each row of t `times` times (for pairing M zeta draws per g).
Tensor repeat_rows(const Tensor& t, std::int64_t times);

// ---- checkpoint serialization ------------------------------------------------
// Directory layout: architecture.json + params/<name>.aftn blobs; reload
// reconstructs a bit-identical model.
void save_flow(const std::filesystem::path& dir, const FlowModel& model);
FlowModel load_flow(const std::filesystem::path& dir);
void save_conditional_flow(const std::filesystem::path& dir, const ConditionalFlowModel& model);
ConditionalFlowModel load_conditional_flow(const std::filesystem::path& dir);

void save_params(const std::filesystem::path& dir, const ParameterStore& store);
void load_params(const std::filesystem::path& dir, ParameterStore& store);

}  // namespace af
