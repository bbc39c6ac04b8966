#pragma once

#include <Eigen/Core>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "af/rng.hpp"
#include "af/tensor.hpp"

namespace af {

// Isotropic Gaussian measurement noise.  For complex (Fourier) measurements
// the two channels are independent reals with the same sigma.
struct NoiseModel {
  double sigma = 1.0;
  bool complex_channels = false;

  // [B, m] residual rows -> [B] exact log densities; differentiable.
  Tensor log_density_rows(const Tensor& residual_rows) const;
  double log_density(const Eigen::ArrayXd& residual) const;

  nlohmann::json to_json() const;
  static NoiseModel from_json(const nlohmann::json& j);
};

// Linear forward operator g = H f plus the noise model.  Rows are flattened
// signals: apply/adjoint map [B, n] <-> [B, m].
class MeasurementModel {
 public:
  enum class Kind { Identity, GaussianBlur, SubsampledFourier, DenseMatrix };

  static MeasurementModel identity(std::int64_t n, NoiseModel noise);
  static MeasurementModel gaussian_blur(std::vector<std::int64_t> image, double sigma_b,
                                        NoiseModel noise);
  static MeasurementModel subsampled_fourier(std::vector<std::int64_t> image, std::int64_t ratio,
                                             NoiseModel noise);
  static MeasurementModel dense(Eigen::MatrixXd h, NoiseModel noise);

  Kind kind() const { return kind_; }
  std::int64_t input_dim() const { return n_; }
  std::int64_t output_dim() const { return m_; }
  const NoiseModel& noise() const { return noise_; }
  NoiseModel& noise() { return noise_; }

  Tensor apply_rows(const Tensor& f_rows) const;
  Tensor adjoint_rows(const Tensor& g_rows) const;
  // apply + noise; the draw for (row b, entry j) uses counter
  // counter_base + (index_base + b) * m + j, so datasets replay exactly.
  Tensor measure_rows(const Tensor& f_rows, const Rng& rng, std::uint64_t stream,
                      std::uint64_t index_base = 0) const;
  Tensor noise_log_density_rows(const Tensor& residual_rows) const {
    return noise_.log_density_rows(residual_rows);
  }

  // Dense assembly (columns = H e_i); used by theory tooling and baselines.
  Eigen::MatrixXd dense_matrix() const;
  double operator_norm() const;

  // Inspection exports.
  Tensor kernel() const;           // blur kernel (GaussianBlur only)
  Tensor fourier_mask() const;     // kept-row indicator over the h axis
  const std::vector<std::int64_t>& image_shape() const { return image_; }
  std::vector<std::int64_t> measurement_image_shape() const;  // [2,hk,w] for Fourier

  nlohmann::json to_json() const;
  static MeasurementModel from_json(const nlohmann::json& j);

 private:
  MeasurementModel() = default;

  Kind kind_ = Kind::Identity;
  std::int64_t n_ = 0, m_ = 0;
  NoiseModel noise_;
  std::vector<std::int64_t> image_;       // [h, w] for blur / fourier
  double sigma_b_ = 0.0;                  // blur width
  Tensor kernel_;                         // blur kernel, constant
  std::int64_t ratio_ = 1;                // fourier undersampling ratio
  std::vector<std::int64_t> kept_rows_;   // fourier mask rows
  Tensor dense_t_;                        // [n, m] = H^T as constant tensor
  Eigen::MatrixXd dense_;                 // H for dense kind
};

// Sparsifying transform Phi, sparsity level k, top-k projection and the l1
// residual penalty.  Phi is globally rescaled so ||pinv(Phi)||_2 <= 1.
class SparsityModel {
 public:
  enum class Kind { Identity, DiscreteGradient2d };

  static SparsityModel identity(std::int64_t n, std::int64_t k);
  static SparsityModel discrete_gradient(std::vector<std::int64_t> image, std::int64_t k);

  Kind kind() const { return kind_; }
  std::int64_t k() const { return k_; }
  std::int64_t signal_dim() const { return n_; }
  std::int64_t transform_dim() const { return l_; }
  const Eigen::MatrixXd& phi() const { return phi_; }

  // c = Phi f for row batches; differentiable.
  Tensor sparsify_rows(const Tensor& f_rows) const;
  // Keep the k largest-magnitude entries (ties to the lowest index).
  static Eigen::ArrayXd project_topk(const Eigen::ArrayXd& c, std::int64_t k);
  // ||Phi f - proj_topk(Phi f)||_1 per row; the projection target is held
  // constant so the subgradient flows only through the untresholded path.
  Tensor penalty_rows(const Tensor& f_rows) const;
  double penalty(const Eigen::ArrayXd& f) const;

  nlohmann::json to_json() const;
  static SparsityModel from_json(const nlohmann::json& j);

 private:
  SparsityModel() = default;
  Kind kind_ = Kind::Identity;
  std::int64_t n_ = 0, l_ = 0, k_ = 0;
  std::vector<std::int64_t> image_;
  Eigen::MatrixXd phi_;
  Tensor phi_t_;  // [n, l] = Phi^T as constant tensor
};

}  // namespace af
