#include "doctest.h"

#include <cmath>

#include "af/imaging.hpp"
#include "af/tensor_random.hpp"
#include "test_util.hpp"

using namespace af;

namespace {

void check_linear_and_adjoint(const MeasurementModel& m, std::uint64_t seed) {
  Rng rng(seed);
  RngStream s(rng, "probe");
  for (int trial = 0; trial < 100; ++trial) {
    Tensor f1 = randn_tensor({1, m.input_dim()}, s);
    Tensor f2 = randn_tensor({1, m.input_dim()}, s);
    Tensor g = randn_tensor({1, m.output_dim()}, s);
    const double a = 0.7, b = -1.3;

    Tensor lhs = m.apply_rows(add(affine(f1, a, 0.0), affine(f2, b, 0.0)));
    Tensor rhs = add(affine(m.apply_rows(f1), a, 0.0), affine(m.apply_rows(f2), b, 0.0));
    CHECK((lhs.array() - rhs.array()).abs().maxCoeff() < 1e-10);

    double hf_g = (m.apply_rows(f1).array() * g.array()).sum();
    double f_htg = (f1.array() * m.adjoint_rows(g).array()).sum();
    CHECK(hf_g == doctest::Approx(f_htg).epsilon(1e-9));
  }
}

}  // namespace

TEST_CASE("identity operator") {
  auto m = MeasurementModel::identity(6, {0.5, false});
  Rng rng(1);
  RngStream s(rng, "f");
  Tensor f = randn_tensor({3, 6}, s);
  Tensor g = m.apply_rows(f);
  for (std::int64_t i = 0; i < f.size(); ++i) CHECK(g[i] == f[i]);
  Tensor back = m.adjoint_rows(g);
  for (std::int64_t i = 0; i < f.size(); ++i) CHECK(back[i] == f[i]);
  check_linear_and_adjoint(m, 11);
}

TEST_CASE("gaussian blur: impulse response is the wrapped kernel with unit sum") {
  auto m = MeasurementModel::gaussian_blur({16, 16}, 1.5, {0.3, false});
  Tensor impulse = Tensor::zeros({1, 256});
  impulse.mutable_array()[0] = 1.0;
  Tensor out = m.apply_rows(impulse);
  CHECK(out.array().sum() == doctest::Approx(1.0).epsilon(1e-12));
  Tensor kern = m.kernel();
  CHECK(kern.array().sum() == doctest::Approx(1.0).epsilon(1e-12));
  // center of the wrapped kernel sits at the impulse
  CHECK(out[0] == doctest::Approx(kern[(kern.dim(0) / 2) * kern.dim(1) + kern.dim(1) / 2]));
  check_linear_and_adjoint(m, 12);

  // symmetric kernel: adjoint equals apply
  Rng rng(2);
  RngStream s(rng, "f");
  Tensor f = randn_tensor({1, 256}, s);
  CHECK((m.apply_rows(f).array() - m.adjoint_rows(f).array()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("subsampled fourier keeps 25% of rows at ratio 4 and is unitary unmasked") {
  auto m4 = MeasurementModel::subsampled_fourier({8, 8}, 4, {0.1, true});
  CHECK(m4.output_dim() == 2 * 2 * 8);  // 2 of 8 rows, two channels
  Tensor mask = m4.fourier_mask();
  CHECK(mask[0] == 1.0);  // DC kept
  CHECK(mask.array().sum() == doctest::Approx(2.0));

  auto m1 = MeasurementModel::subsampled_fourier({8, 8}, 1, {0.1, true});
  Rng rng(3);
  RngStream s(rng, "f");
  Tensor f = randn_tensor({1, 64}, s);
  Tensor g = m1.apply_rows(f);
  CHECK(std::sqrt(g.array().square().sum()) ==
        doctest::Approx(std::sqrt(f.array().square().sum())).epsilon(1e-9));
  check_linear_and_adjoint(m4, 13);
  check_linear_and_adjoint(m1, 14);
}

TEST_CASE("dense operator applies H and its transpose") {
  Eigen::MatrixXd h(2, 3);
  h << 1, 2, 3, 4, 5, 6;
  auto m = MeasurementModel::dense(h, {1.0, false});
  Tensor f = Tensor::from_vector({1, 3}, {1, 1, 1});
  Tensor g = m.apply_rows(f);
  CHECK(g[0] == doctest::Approx(6));
  CHECK(g[1] == doctest::Approx(15));
  check_linear_and_adjoint(m, 15);
  Eigen::MatrixXd back = m.dense_matrix();
  CHECK((back - h).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("measure adds reproducible noise of the right scale") {
  auto m = MeasurementModel::identity(4, {0.0, false});
  Rng rng(77);
  Tensor f = Tensor::from_vector({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor g0 = m.measure_rows(f, rng, Rng::hash_name("meas"));
  for (std::int64_t i = 0; i < f.size(); ++i) CHECK(g0[i] == f[i]);  // sigma 0

  m.noise().sigma = 0.45;
  Tensor g1 = m.measure_rows(f, rng, Rng::hash_name("meas"));
  Tensor g2 = m.measure_rows(f, rng, Rng::hash_name("meas"));
  for (std::int64_t i = 0; i < f.size(); ++i) CHECK(g1[i] == g2[i]);  // same counters
  Tensor g3 = m.measure_rows(f, rng, Rng::hash_name("meas"), /*index_base=*/2);
  bool differs = false;
  for (std::int64_t i = 0; i < f.size(); ++i) differs |= (g3[i] != g1[i]);
  CHECK(differs);

  // empirical std over 1e5 draws within 1%
  const std::int64_t rows = 25000;
  Tensor big = Tensor::zeros({rows, 4});
  Tensor noisy = m.measure_rows(big, rng, Rng::hash_name("mc"));
  double var = noisy.array().square().mean();
  CHECK(std::sqrt(var) == doctest::Approx(0.45).epsilon(0.01));
}

TEST_CASE("noise log density matches the analytic iso-Gaussian formula") {
  NoiseModel n1{1.0, false};
  Tensor zero = Tensor::zeros({1, 1});
  CHECK(n1.log_density_rows(zero)[0] == doctest::Approx(-0.5 * std::log(2 * M_PI)).epsilon(1e-14));

  NoiseModel n{0.7, false};
  Rng rng(5);
  RngStream s(rng, "r");
  Tensor r = randn_tensor({1, 6}, s);
  double expect = -r.array().square().sum() / (2 * 0.49) - 3.0 * std::log(2 * M_PI * 0.49);
  CHECK(n.log_density_rows(r)[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(n.log_density(r.array()) == doctest::Approx(expect).epsilon(1e-12));

  // gradient w.r.t. residual is -r / sigma^2
  auto fn = [&](const Tensor& t) { return reshape(n.log_density_rows(t), {}); };
  CHECK(finite_diff_check(fn, r, 1e-6) < 1e-8);
  Tensor rr = r.detach();
  rr.set_requires_grad(true);
  reshape(n.log_density_rows(rr), {}).backward();
  for (int i = 0; i < 6; ++i)
    CHECK(rr.grad()[i] == doctest::Approx(-r[i] / 0.49).epsilon(1e-12));
}

TEST_CASE("top-k projection: definition, ties, idempotence") {
  Eigen::ArrayXd c(4);
  c << 3, 1, 0.5, 0.2;
  Eigen::ArrayXd p = SparsityModel::project_topk(c, 2);
  CHECK(p[0] == 3.0);
  CHECK(p[1] == 1.0);
  CHECK(p[2] == 0.0);
  CHECK((c - p).abs().sum() == doctest::Approx(0.7));

  // ties broken by lowest index
  Eigen::ArrayXd t(4);
  t << 1.0, -1.0, 1.0, 1.0;
  Eigen::ArrayXd pt = SparsityModel::project_topk(t, 2);
  CHECK(pt[0] == 1.0);
  CHECK(pt[1] == -1.0);
  CHECK(pt[2] == 0.0);
  CHECK(pt[3] == 0.0);

  // idempotent
  Eigen::ArrayXd again = SparsityModel::project_topk(p, 2);
  CHECK((again - p).abs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(SparsityModel::project_topk(c, 0), ConfigError);
}

TEST_CASE("top-k residual equals exhaustive minimum over supports") {
  Rng rng(6);
  RngStream s(rng, "c");
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::ArrayXd c(10);
    for (int i = 0; i < 10; ++i) c[i] = s.normal();
    const std::int64_t k = 3;
    double topk_resid = (c - SparsityModel::project_topk(c, k)).abs().sum();
    double best = 1e300;
    for (int a = 0; a < 10; ++a)
      for (int b = a + 1; b < 10; ++b)
        for (int d = b + 1; d < 10; ++d) {
          Eigen::ArrayXd keep = Eigen::ArrayXd::Zero(10);
          keep[a] = c[a];
          keep[b] = c[b];
          keep[d] = c[d];
          best = std::min(best, (c - keep).abs().sum());
        }
    CHECK(topk_resid == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("sparsity penalty on images") {
  auto sp = SparsityModel::discrete_gradient({4, 4}, 8);

  // constant image has zero discrete gradient
  Tensor flat = Tensor::full({16}, 2.5);
  CHECK(sp.penalty(flat.array()) == doctest::Approx(0.0));

  // piecewise-constant with one vertical band: 2 jump columns * 4 rows = 8 nonzeros
  Eigen::ArrayXd band(16);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) band[i * 4 + j] = (j < 2) ? 1.0 : 0.0;
  CHECK(sp.penalty(band) == doctest::Approx(0.0));

  // penalty is 1-homogeneous for a fixed support pattern
  Rng rng(7);
  RngStream s(rng, "f");
  Eigen::ArrayXd f(16);
  for (int i = 0; i < 16; ++i) f[i] = s.normal();
  double p1 = sp.penalty(f);
  double p3 = sp.penalty(Eigen::ArrayXd(3.0 * f));
  CHECK(p3 == doctest::Approx(3.0 * p1).epsilon(1e-12));
  CHECK(p1 >= 0.0);

  // matches an independent sort-based recomputation
  Eigen::VectorXd c = sp.phi() * f.matrix();
  std::vector<double> mags(static_cast<size_t>(c.size()));
  for (Eigen::Index i = 0; i < c.size(); ++i) mags[static_cast<size_t>(i)] = std::abs(c[i]);
  std::sort(mags.begin(), mags.end(), std::greater<>());
  double oracle = 0.0;
  for (size_t i = 8; i < mags.size(); ++i) oracle += mags[i];
  CHECK(p1 == doctest::Approx(oracle).epsilon(1e-12));

  // batched penalty_rows agrees with the scalar path
  Tensor batch = Tensor::from_array({2, 16}, [&] {
    Eigen::ArrayXd both(32);
    both.segment(0, 16) = f;
    both.segment(16, 16) = band;
    return both;
  }());
  Tensor rows = sp.penalty_rows(batch);
  CHECK(rows[0] == doctest::Approx(p1).epsilon(1e-12));
  CHECK(rows[1] == doctest::Approx(0.0));
}

TEST_CASE("phi normalization keeps the pseudo-inverse norm at one") {
  auto sp = SparsityModel::discrete_gradient({4, 4}, 4);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(sp.phi());
  const auto& sv = svd.singularValues();
  double smallest = 0.0;
  for (Eigen::Index i = sv.size() - 1; i >= 0; --i)
    if (sv[i] > 1e-9) {
      smallest = sv[i];
      break;
    }
  CHECK(smallest == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("sparsity penalty gradient flows through the unthresholded path") {
  auto sp = SparsityModel::identity(6, 2);
  Rng rng(8);
  RngStream s(rng, "f");
  Tensor f = randn_tensor({1, 6}, s);
  // away from ties, d/df ||f - topk(f)||_1 = sign(f) off the kept support
  Tensor ff = f.detach();
  ff.set_requires_grad(true);
  reshape(sp.penalty_rows(ff), {}).backward();
  Eigen::ArrayXd kept = SparsityModel::project_topk(f.array(), 2);
  for (int i = 0; i < 6; ++i) {
    double expect = (kept[i] != 0.0) ? 0.0 : (f[i] > 0 ? 1.0 : -1.0);
    CHECK(ff.grad()[i] == doctest::Approx(expect));
  }
}
