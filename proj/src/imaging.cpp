#include "af/imaging.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "af/error.hpp"

namespace af {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Tensor as_rows(const Tensor& t) {
  if (t.rank() == 1) return reshape(t, {1, t.dim(0)});
  if (t.rank() == 2) return t;
  throw ConfigError("expected [n] or [B,n] tensor, got " + shape_str(t.shape()));
}

Tensor matrix_to_tensor(const Eigen::MatrixXd& m) {
  Eigen::ArrayXd flat(m.rows() * m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) flat[i * m.cols() + j] = m(i, j);
  return Tensor::from_array({m.rows(), m.cols()}, std::move(flat));
}

}  // namespace

// ---- NoiseModel ------------------------------------------------------------

Tensor NoiseModel::log_density_rows(const Tensor& residual_rows) const {
  if (sigma <= 0.0) throw ConfigError("noise sigma must be > 0 for densities");
  Tensor rows = as_rows(residual_rows);
  const double m = static_cast<double>(rows.dim(1));
  const double inv2s2 = -0.5 / (sigma * sigma);
  const double norm = -0.5 * m * (kLog2Pi + 2.0 * std::log(sigma));
  return affine(sum_axis(square(rows), 1), inv2s2, norm);
}

double NoiseModel::log_density(const Eigen::ArrayXd& residual) const {
  if (sigma <= 0.0) throw ConfigError("noise sigma must be > 0 for densities");
  const double m = static_cast<double>(residual.size());
  return -0.5 * residual.square().sum() / (sigma * sigma) -
         0.5 * m * (kLog2Pi + 2.0 * std::log(sigma));
}

nlohmann::json NoiseModel::to_json() const {
  return {{"sigma", sigma}, {"complex_channels", complex_channels}};
}

NoiseModel NoiseModel::from_json(const nlohmann::json& j) {
  NoiseModel n;
  n.sigma = j.at("sigma").get<double>();
  n.complex_channels = j.at("complex_channels").get<bool>();
  return n;
}

// ---- MeasurementModel ---------------------------------------------------------

MeasurementModel MeasurementModel::identity(std::int64_t n, NoiseModel noise) {
  if (n <= 0) throw ConfigError("identity operator needs n > 0");
  MeasurementModel m;
  m.kind_ = Kind::Identity;
  m.n_ = m.m_ = n;
  m.noise_ = noise;
  return m;
}

MeasurementModel MeasurementModel::gaussian_blur(std::vector<std::int64_t> image, double sigma_b,
                                                 NoiseModel noise) {
  if (image.size() != 2) throw ConfigError("blur operator needs [h,w] image shape");
  if (sigma_b <= 0) throw ConfigError("blur sigma_b must be > 0");
  MeasurementModel m;
  m.kind_ = Kind::GaussianBlur;
  m.image_ = std::move(image);
  m.n_ = m.m_ = m.image_[0] * m.image_[1];
  m.noise_ = noise;
  m.sigma_b_ = sigma_b;
  // kernel truncated at 4 sigma and renormalized to unit sum
  const std::int64_t r = static_cast<std::int64_t>(std::ceil(4.0 * sigma_b));
  const std::int64_t k = 2 * r + 1;
  if (k > m.image_[0] || k > m.image_[1])
    throw ConfigError("blur kernel larger than image; reduce sigma_b");
  Eigen::ArrayXd kern(k * k);
  double total = 0.0;
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t j = 0; j < k; ++j) {
      const double di = static_cast<double>(i - r), dj = static_cast<double>(j - r);
      const double v = std::exp(-0.5 * (di * di + dj * dj) / (sigma_b * sigma_b));
      kern[i * k + j] = v;
      total += v;
    }
  kern /= total;
  m.kernel_ = Tensor::from_array({k, k}, std::move(kern));
  return m;
}

MeasurementModel MeasurementModel::subsampled_fourier(std::vector<std::int64_t> image,
                                                      std::int64_t ratio, NoiseModel noise) {
  if (image.size() != 2) throw ConfigError("fourier operator needs [h,w] image shape");
  if (ratio < 1 || image[0] % ratio != 0)
    throw ConfigError("undersampling ratio must divide the row count");
  MeasurementModel m;
  m.kind_ = Kind::SubsampledFourier;
  m.image_ = std::move(image);
  m.ratio_ = ratio;
  m.n_ = m.image_[0] * m.image_[1];
  // DC row plus equispaced rows; complex output stored as two real channels
  for (std::int64_t row = 0; row < m.image_[0]; row += ratio) m.kept_rows_.push_back(row);
  m.m_ = 2 * static_cast<std::int64_t>(m.kept_rows_.size()) * m.image_[1];
  m.noise_ = noise;
  m.noise_.complex_channels = true;
  return m;
}

MeasurementModel MeasurementModel::dense(Eigen::MatrixXd h, NoiseModel noise) {
  if (h.rows() <= 0 || h.cols() <= 0) throw ConfigError("dense operator needs a real matrix");
  MeasurementModel m;
  m.kind_ = Kind::DenseMatrix;
  m.n_ = h.cols();
  m.m_ = h.rows();
  m.noise_ = noise;
  m.dense_ = std::move(h);
  m.dense_t_ = matrix_to_tensor(m.dense_.transpose());
  return m;
}

Tensor MeasurementModel::apply_rows(const Tensor& f_rows) const {
  Tensor rows = as_rows(f_rows);
  if (rows.dim(1) != n_)
    throw ConfigError("operator input has " + std::to_string(rows.dim(1)) + " columns, expected " +
                      std::to_string(n_));
  const std::int64_t b = rows.dim(0);
  switch (kind_) {
    case Kind::Identity:
      return rows;
    case Kind::GaussianBlur: {
      Tensor img = reshape(rows, {b, image_[0], image_[1]});
      return reshape(circconv2(img, kernel_), {b, n_});
    }
    case Kind::SubsampledFourier: {
      Tensor img = reshape(rows, {b, 1, image_[0], image_[1]});
      Tensor zeros = Tensor::zeros({b, 1, image_[0], image_[1]});
      Tensor pair = concat({img, zeros}, 1);
      Tensor spec = fft2(pair);
      Tensor kept = gather(spec, 2, kept_rows_);
      return reshape(kept, {b, m_});
    }
    case Kind::DenseMatrix:
      return matmul(rows, dense_t_);
  }
  throw ConfigError("unreachable operator kind");
}

Tensor MeasurementModel::adjoint_rows(const Tensor& g_rows) const {
  Tensor rows = as_rows(g_rows);
  if (rows.dim(1) != m_)
    throw ConfigError("adjoint input has " + std::to_string(rows.dim(1)) + " columns, expected " +
                      std::to_string(m_));
  const std::int64_t b = rows.dim(0);
  switch (kind_) {
    case Kind::Identity:
      return rows;
    case Kind::GaussianBlur: {
      // symmetric kernel: the adjoint is the same circular convolution
      Tensor img = reshape(rows, {b, image_[0], image_[1]});
      return reshape(circconv2(img, kernel_), {b, n_});
    }
    case Kind::SubsampledFourier: {
      const std::int64_t hk = static_cast<std::int64_t>(kept_rows_.size());
      Tensor kept = reshape(rows, {b, 2, hk, image_[1]});
      Tensor full = scatter(kept, 2, kept_rows_, image_[0]);
      Tensor back = fft2(full, /*inverse=*/true);
      Tensor real_part = slice(back, 1, 0, 1);
      return reshape(real_part, {b, n_});
    }
    case Kind::DenseMatrix:
      return matmul(rows, transpose(dense_t_));
  }
  throw ConfigError("unreachable operator kind");
}

Tensor MeasurementModel::measure_rows(const Tensor& f_rows, const Rng& rng, std::uint64_t stream,
                                      std::uint64_t index_base) const {
  Tensor clean = apply_rows(f_rows).detach();
  if (noise_.sigma == 0.0) return clean;
  const std::int64_t b = clean.dim(0);
  Eigen::ArrayXd out = clean.array();
  for (std::int64_t row = 0; row < b; ++row)
    for (std::int64_t j = 0; j < m_; ++j)
      out[row * m_ + j] += noise_.sigma * rng.normal(
          stream, (index_base + static_cast<std::uint64_t>(row)) * static_cast<std::uint64_t>(m_) +
                      static_cast<std::uint64_t>(j));
  return Tensor::from_array({b, m_}, std::move(out));
}

Eigen::MatrixXd MeasurementModel::dense_matrix() const {
  if (kind_ == Kind::DenseMatrix) return dense_;
  Eigen::MatrixXd h(m_, n_);
  for (std::int64_t j = 0; j < n_; ++j) {
    Tensor e = Tensor::zeros({1, n_});
    e.mutable_array()[j] = 1.0;
    Tensor col = apply_rows(e);
    for (std::int64_t i = 0; i < m_; ++i) h(i, j) = col[i];
  }
  return h;
}

double MeasurementModel::operator_norm() const {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(dense_matrix());
  return svd.singularValues()[0];
}

Tensor MeasurementModel::kernel() const {
  if (kind_ != Kind::GaussianBlur) throw UsageError("kernel() only valid for blur operators");
  return kernel_;
}

Tensor MeasurementModel::fourier_mask() const {
  if (kind_ != Kind::SubsampledFourier) throw UsageError("fourier_mask() only valid for fourier");
  Tensor mask = Tensor::zeros({image_[0]});
  for (auto r : kept_rows_) mask.mutable_array()[r] = 1.0;
  return mask;
}

std::vector<std::int64_t> MeasurementModel::measurement_image_shape() const {
  if (kind_ == Kind::SubsampledFourier)
    return {2, static_cast<std::int64_t>(kept_rows_.size()), image_[1]};
  if (kind_ == Kind::GaussianBlur || (kind_ == Kind::Identity && image_.size() == 2)) return image_;
  return {};
}

nlohmann::json MeasurementModel::to_json() const {
  nlohmann::json j{{"noise", noise_.to_json()}};
  switch (kind_) {
    case Kind::Identity:
      j["kind"] = "identity";
      j["n"] = n_;
      break;
    case Kind::GaussianBlur:
      j["kind"] = "gaussian-blur";
      j["image"] = image_;
      j["sigma_b"] = sigma_b_;
      break;
    case Kind::SubsampledFourier:
      j["kind"] = "subsampled-fourier";
      j["image"] = image_;
      j["ratio"] = ratio_;
      break;
    case Kind::DenseMatrix: {
      j["kind"] = "dense";
      j["rows"] = m_;
      j["cols"] = n_;
      std::vector<double> flat(static_cast<size_t>(m_ * n_));
      for (std::int64_t i = 0; i < m_; ++i)
        for (std::int64_t jj = 0; jj < n_; ++jj)
          flat[static_cast<size_t>(i * n_ + jj)] = dense_(i, jj);
      j["data"] = flat;
      break;
    }
  }
  return j;
}

MeasurementModel MeasurementModel::from_json(const nlohmann::json& j) {
  NoiseModel noise = NoiseModel::from_json(j.at("noise"));
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "identity") return identity(j.at("n").get<std::int64_t>(), noise);
  if (kind == "gaussian-blur")
    return gaussian_blur(j.at("image").get<std::vector<std::int64_t>>(),
                         j.at("sigma_b").get<double>(), noise);
  if (kind == "subsampled-fourier")
    return subsampled_fourier(j.at("image").get<std::vector<std::int64_t>>(),
                              j.at("ratio").get<std::int64_t>(), noise);
  if (kind == "dense") {
    const std::int64_t rows = j.at("rows").get<std::int64_t>();
    const std::int64_t cols = j.at("cols").get<std::int64_t>();
    auto flat = j.at("data").get<std::vector<double>>();
    Eigen::MatrixXd h(rows, cols);
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t jj = 0; jj < cols; ++jj) h(i, jj) = flat[static_cast<size_t>(i * cols + jj)];
    return dense(std::move(h), noise);
  }
  throw ConfigError("unknown measurement kind: " + kind);
}

// ---- SparsityModel ----------------------------------------------------------

namespace {

// rescale so the smallest nonzero singular value is 1, i.e. ||pinv||_2 = 1
Eigen::MatrixXd normalize_pinv(Eigen::MatrixXd phi) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(phi);
  const auto& sv = svd.singularValues();
  double smallest = 0.0;
  for (Eigen::Index i = sv.size() - 1; i >= 0; --i)
    if (sv[i] > 1e-12 * sv[0]) {
      smallest = sv[i];
      break;
    }
  if (smallest <= 0.0) throw ConfigError("sparsifying transform is zero");
  return phi / smallest;
}

}  // namespace

SparsityModel SparsityModel::identity(std::int64_t n, std::int64_t k) {
  if (k <= 0) throw ConfigError("sparsity level k must be positive");
  if (k > n) throw ConfigError("sparsity level k exceeds dimension");
  SparsityModel s;
  s.kind_ = Kind::Identity;
  s.n_ = s.l_ = n;
  s.k_ = k;
  s.phi_ = Eigen::MatrixXd::Identity(n, n);
  s.phi_t_ = matrix_to_tensor(s.phi_.transpose());
  return s;
}

SparsityModel SparsityModel::discrete_gradient(std::vector<std::int64_t> image, std::int64_t k) {
  if (image.size() != 2) throw ConfigError("discrete gradient needs [h,w] image shape");
  if (k <= 0) throw ConfigError("sparsity level k must be positive");
  SparsityModel s;
  s.kind_ = Kind::DiscreteGradient2d;
  s.image_ = image;
  const std::int64_t h = image[0], w = image[1];
  s.n_ = h * w;
  s.l_ = 2 * s.n_;
  s.k_ = k;
  if (k > s.l_) throw ConfigError("sparsity level k exceeds transform dimension");
  // forward differences with periodic wrap, x-direction rows then y-direction
  Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(s.l_, s.n_);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j) {
      const std::int64_t p = i * w + j;
      phi(p, i * w + (j + 1) % w) += 1.0;
      phi(p, p) -= 1.0;
      phi(s.n_ + p, ((i + 1) % h) * w + j) += 1.0;
      phi(s.n_ + p, p) -= 1.0;
    }
  s.phi_ = normalize_pinv(std::move(phi));
  s.phi_t_ = matrix_to_tensor(s.phi_.transpose());
  return s;
}

Tensor SparsityModel::sparsify_rows(const Tensor& f_rows) const {
  Tensor rows = as_rows(f_rows);
  if (rows.dim(1) != n_) throw ConfigError("sparsify input dim mismatch");
  return matmul(rows, phi_t_);
}

Eigen::ArrayXd SparsityModel::project_topk(const Eigen::ArrayXd& c, std::int64_t k) {
  if (k <= 0) throw ConfigError("top-k projection needs k > 0");
  if (k > c.size()) throw ConfigError("top-k projection needs k <= length");
  std::vector<std::int64_t> idx(static_cast<size_t>(c.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
    const double fa = std::abs(c[a]), fb = std::abs(c[b]);
    if (fa != fb) return fa > fb;
    return a < b;  // ties to the lowest index
  });
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(c.size());
  for (std::int64_t i = 0; i < k; ++i) out[idx[static_cast<size_t>(i)]] = c[idx[static_cast<size_t>(i)]];
  return out;
}

Tensor SparsityModel::penalty_rows(const Tensor& f_rows) const {
  Tensor c = sparsify_rows(f_rows);
  const std::int64_t b = c.dim(0);
  Eigen::ArrayXd target(b * l_);
  for (std::int64_t row = 0; row < b; ++row) {
    Eigen::ArrayXd crow = c.array().segment(row * l_, l_);
    target.segment(row * l_, l_) = project_topk(crow, k_);
  }
  Tensor target_t = Tensor::from_array({b, l_}, std::move(target));
  return sum_axis(abs(sub(c, target_t)), 1);
}

double SparsityModel::penalty(const Eigen::ArrayXd& f) const {
  if (f.size() != n_) throw ConfigError("penalty input dim mismatch");
  Eigen::ArrayXd c(l_);
  Eigen::VectorXd cv = phi_ * f.matrix();
  c = cv.array();
  return (c - project_topk(c, k_)).abs().sum();
}

nlohmann::json SparsityModel::to_json() const {
  nlohmann::json j{{"k", k_}};
  if (kind_ == Kind::Identity) {
    j["kind"] = "identity";
    j["n"] = n_;
  } else {
    j["kind"] = "discrete-gradient-2d";
    j["image"] = image_;
  }
  return j;
}

SparsityModel SparsityModel::from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "identity")
    return identity(j.at("n").get<std::int64_t>(), j.at("k").get<std::int64_t>());
  if (kind == "discrete-gradient-2d")
    return discrete_gradient(j.at("image").get<std::vector<std::int64_t>>(),
                             j.at("k").get<std::int64_t>());
  throw ConfigError("unknown sparsity kind: " + kind);
}

}  // namespace af
