#include "af/flow.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "af/aftn.hpp"
#include "af/error.hpp"
#include "af/tensor_random.hpp"

namespace af {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Tensor as_rows(const Tensor& t) {
  if (t.rank() == 1) return reshape(t, {1, t.dim(0)});
  if (t.rank() == 2) return t;
  throw ConfigError("expected [n] or [B,n] tensor, got " + shape_str(t.shape()));
}

Tensor glorot_init(Shape shape, RngStream& stream) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(shape[0]));
  Eigen::ArrayXd v(shape_size(shape));
  for (std::int64_t i = 0; i < v.size(); ++i) v[i] = scale * stream.normal();
  return Tensor::from_array(std::move(shape), std::move(v));
}

Eigen::ArrayXd col_mean(const Tensor& x) {
  const std::int64_t b = x.dim(0), n = x.dim(1);
  Eigen::ArrayXd m = Eigen::ArrayXd::Zero(n);
  for (std::int64_t i = 0; i < b; ++i)
    m += Eigen::Map<const Eigen::ArrayXd>(x.array().data() + i * n, n);
  return m / static_cast<double>(b);
}

Eigen::ArrayXd col_std(const Tensor& x, const Eigen::ArrayXd& mean) {
  const std::int64_t b = x.dim(0), n = x.dim(1);
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(n);
  for (std::int64_t i = 0; i < b; ++i) {
    Eigen::ArrayXd d = Eigen::Map<const Eigen::ArrayXd>(x.array().data() + i * n, n) - mean;
    v += d * d;
  }
  v = (v / static_cast<double>(std::max<std::int64_t>(1, b - 1))).sqrt();
  // guard collapsed channels
  return v.max(1e-6);
}

// ---- blocks -----------------------------------------------------------------

class ActNorm final : public InvertibleBlock {
 public:
  ActNorm(ParameterStore& store, const std::string& prefix, std::int64_t n)
      : n_(n),
        log_s_(store.create(prefix + ".log_s", Tensor::zeros({n}))),
        bias_(store.create(prefix + ".bias", Tensor::zeros({n}))) {}

  const char* kind() const override { return "actnorm"; }

  FlowResult forward(const Tensor& x, const Tensor*) const override {
    auto y = add(mul(x, broadcast_to(exp(log_s_), x.shape())), broadcast_to(bias_, x.shape()));
    auto ld = broadcast_to(sum(log_s_), Shape{x.dim(0)});
    return {y, ld};
  }

  FlowResult inverse(const Tensor& y, const Tensor*) const override {
    auto x = mul(sub(y, broadcast_to(bias_, y.shape())), broadcast_to(exp(neg(log_s_)), y.shape()));
    auto ld = broadcast_to(sum(neg(log_s_)), Shape{y.dim(0)});
    return {x, ld};
  }

  nlohmann::json describe() const override { return {{"kind", "actnorm"}, {"n", n_}}; }

  bool wants_data_init() const override { return !initialized_; }

  void data_init_inverse(const Tensor& y) override {
    // normalize the inverse-direction output: x = (y - b) / s
    Eigen::ArrayXd m = col_mean(y);
    Eigen::ArrayXd s = col_std(y, m);
    bias_.mutable_array() = m;
    log_s_.mutable_array() = s.log();
    initialized_ = true;
  }

  void data_init_forward(const Tensor& x) override {
    // normalize the forward-direction output: y = x * exp(log_s) + b
    Eigen::ArrayXd m = col_mean(x);
    Eigen::ArrayXd s = col_std(x, m);
    log_s_.mutable_array() = -s.log();
    bias_.mutable_array() = -m / s;
    initialized_ = true;
  }

 private:
  std::int64_t n_;
  Tensor& log_s_;
  Tensor& bias_;
  bool initialized_ = false;
};

class Permutation final : public InvertibleBlock {
 public:
  Permutation(std::int64_t n, std::vector<std::int64_t> perm, const char* kind = "channel-permutation")
      : n_(n), perm_(std::move(perm)), inv_(static_cast<size_t>(n)), kind_(kind) {
    for (std::int64_t i = 0; i < n; ++i)
      inv_[static_cast<size_t>(perm_[static_cast<size_t>(i)])] = i;
  }

  const char* kind() const override { return kind_; }

  FlowResult forward(const Tensor& x, const Tensor*) const override {
    return {gather(x, 1, perm_), Tensor::zeros({x.dim(0)})};
  }
  FlowResult inverse(const Tensor& y, const Tensor*) const override {
    return {gather(y, 1, inv_), Tensor::zeros({y.dim(0)})};
  }

  nlohmann::json describe() const override {
    return {{"kind", kind_}, {"n", n_}, {"perm", perm_}};
  }

 private:
  std::int64_t n_;
  std::vector<std::int64_t> perm_, inv_;
  const char* kind_;
};

std::vector<std::int64_t> shuffled_indices(std::int64_t n, RngStream& stream) {
  std::vector<std::int64_t> p(static_cast<size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  if (n == 2) {  // always swap so successive couplings alternate halves
    std::swap(p[0], p[1]);
    return p;
  }
  for (std::int64_t i = n - 1; i > 0; --i)
    std::swap(p[static_cast<size_t>(i)],
              p[static_cast<size_t>(stream.index(static_cast<std::uint64_t>(i + 1)))]);
  return p;
}

// Space-to-channel packing of an even [h,w] grid, expressed as a fixed
// permutation of the flattened vector.
std::vector<std::int64_t> squeeze_indices(std::int64_t h, std::int64_t w) {
  if (h % 2 || w % 2) throw ConfigError("squeeze needs even image dims");
  std::vector<std::int64_t> src(static_cast<size_t>(h * w));
  std::int64_t k = 0;
  for (std::int64_t ci = 0; ci < h / 2; ++ci)
    for (std::int64_t cj = 0; cj < w / 2; ++cj)
      for (std::int64_t si = 0; si < 2; ++si)
        for (std::int64_t sj = 0; sj < 2; ++sj)
          src[static_cast<size_t>(k++)] = (2 * ci + si) * w + (2 * cj + sj);
  return src;
}

// Affine coupling; a 2-hidden-layer perceptron on the passive half (plus
// conditioning features) emits shift and tanh-clamped log-scale.
class AffineCoupling final : public InvertibleBlock {
 public:
  AffineCoupling(ParameterStore& store, const std::string& prefix, std::int64_t n,
                 std::int64_t hidden, std::int64_t cond_width, double clamp, RngStream& stream)
      : n_(n),
        d_(n / 2),
        cond_width_(cond_width),
        clamp_(clamp),
        w1_(store.create(prefix + ".w1", glorot_init({d_ + cond_width, hidden}, stream))),
        b1_(store.create(prefix + ".b1", Tensor::zeros({hidden}))),
        w2_(store.create(prefix + ".w2", glorot_init({hidden, hidden}, stream))),
        b2_(store.create(prefix + ".b2", Tensor::zeros({hidden}))),
        w3_(store.create(prefix + ".w3", Tensor::zeros({hidden, 2 * (n - d_)}))),
        b3_(store.create(prefix + ".b3", Tensor::zeros({2 * (n - d_)}))) {
    if (n < 2) throw ConfigError("coupling needs dim >= 2");
  }

  const char* kind() const override { return "affine-coupling"; }

  FlowResult forward(const Tensor& x, const Tensor* cond) const override {
    auto xa = slice(x, 1, 0, d_);
    auto xb = slice(x, 1, d_, n_ - d_);
    auto [log_s, shift] = net(xa, cond);
    auto yb = add(mul(xb, exp(log_s)), shift);
    return {concat({xa, yb}, 1), sum_axis(log_s, 1)};
  }

  FlowResult inverse(const Tensor& y, const Tensor* cond) const override {
    auto ya = slice(y, 1, 0, d_);
    auto yb = slice(y, 1, d_, n_ - d_);
    auto [log_s, shift] = net(ya, cond);
    auto xb = mul(sub(yb, shift), exp(neg(log_s)));
    return {concat({ya, xb}, 1), neg(sum_axis(log_s, 1))};
  }

  nlohmann::json describe() const override {
    return {{"kind", "affine-coupling"}, {"n", n_}, {"split", d_}, {"cond_width", cond_width_}};
  }

 private:
  std::pair<Tensor, Tensor> net(const Tensor& xa, const Tensor* cond) const {
    if ((cond_width_ > 0) != (cond != nullptr))
      throw ConfigError("coupling conditioning-width mismatch");
    Tensor in = xa;
    if (cond) {
      if (cond->dim(1) != cond_width_ || cond->dim(0) != xa.dim(0))
        throw ConfigError("conditioning features have shape " + shape_str(cond->shape()) +
                          ", expected [" + std::to_string(xa.dim(0)) + "," +
                          std::to_string(cond_width_) + "]");
      in = concat({xa, *cond}, 1);
    }
    auto h1 = tanh(add(matmul(in, w1_), broadcast_to(b1_, {in.dim(0), w1_.dim(1)})));
    auto h2 = tanh(add(matmul(h1, w2_), broadcast_to(b2_, {in.dim(0), w2_.dim(1)})));
    auto out = add(matmul(h2, w3_), broadcast_to(b3_, {in.dim(0), w3_.dim(1)}));
    auto raw_s = slice(out, 1, 0, n_ - d_);
    auto shift = slice(out, 1, n_ - d_, n_ - d_);
    auto log_s = affine(tanh(raw_s), clamp_, 0.0);
    return {log_s, shift};
  }

  std::int64_t n_, d_, cond_width_;
  double clamp_;
  Tensor &w1_, &b1_, &w2_, &b2_, &w3_, &b3_;
};

// Global shift/scale whose shift is linear in the conditioning features.
// With an identity conditioner this represents conjugate Gaussian
// posteriors exactly.
class CondAffine final : public InvertibleBlock {
 public:
  CondAffine(ParameterStore& store, const std::string& prefix, std::int64_t n,
             std::int64_t cond_width)
      : n_(n),
        log_s_(store.create(prefix + ".log_s", Tensor::zeros({n}))),
        bias_(store.create(prefix + ".bias", Tensor::zeros({n}))),
        w_(store.create(prefix + ".w", Tensor::zeros({cond_width, n}))) {}

  const char* kind() const override { return "cond-affine"; }

  FlowResult forward(const Tensor& x, const Tensor* cond) const override {
    if (!cond) throw ConfigError("cond-affine block needs conditioning features");
    auto shift = add(broadcast_to(bias_, x.shape()), matmul(*cond, w_));
    auto y = add(mul(x, broadcast_to(exp(log_s_), x.shape())), shift);
    return {y, broadcast_to(sum(log_s_), Shape{x.dim(0)})};
  }

  FlowResult inverse(const Tensor& y, const Tensor* cond) const override {
    if (!cond) throw ConfigError("cond-affine block needs conditioning features");
    auto shift = add(broadcast_to(bias_, y.shape()), matmul(*cond, w_));
    auto x = mul(sub(y, shift), broadcast_to(exp(neg(log_s_)), y.shape()));
    return {x, broadcast_to(sum(neg(log_s_)), Shape{y.dim(0)})};
  }

  nlohmann::json describe() const override { return {{"kind", "cond-affine"}, {"n", n_}}; }

 private:
  std::int64_t n_;
  Tensor &log_s_, &bias_, &w_;
};

// LU-parameterized invertible linear mix so the log-det is just the sum of
// the parameterized log-diagonal.
class LuMix final : public InvertibleBlock {
 public:
  LuMix(ParameterStore& store, const std::string& prefix, std::int64_t n)
      : n_(n),
        l_raw_(store.create(prefix + ".l", Tensor::zeros({n, n}))),
        u_raw_(store.create(prefix + ".u", Tensor::zeros({n, n}))),
        log_diag_(store.create(prefix + ".log_diag", Tensor::zeros({n}))) {
    Eigen::ArrayXd low = Eigen::ArrayXd::Zero(n * n), up = Eigen::ArrayXd::Zero(n * n),
                  eye = Eigen::ArrayXd::Zero(n * n);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        if (j < i) low[i * n + j] = 1.0;
        if (j > i) up[i * n + j] = 1.0;
        if (i == j) eye[i * n + j] = 1.0;
      }
    mask_low_ = Tensor::from_array({n, n}, low);
    mask_up_ = Tensor::from_array({n, n}, up);
    eye_ = Tensor::from_array({n, n}, eye);
  }

  const char* kind() const override { return "invertible-1x1-mix"; }

  FlowResult forward(const Tensor& x, const Tensor*) const override {
    auto y = matmul(x, transpose(weight()));
    return {y, broadcast_to(sum(log_diag_), Shape{x.dim(0)})};
  }

  FlowResult inverse(const Tensor& y, const Tensor*) const override {
    auto x = matmul(y, transpose(matinv(weight())));
    return {x, broadcast_to(sum(neg(log_diag_)), Shape{y.dim(0)})};
  }

  nlohmann::json describe() const override { return {{"kind", "invertible-1x1-mix"}, {"n", n_}}; }

 private:
  Tensor weight() const {
    auto lower = add(mul(l_raw_, mask_low_), eye_);
    auto upper = add(mul(u_raw_, mask_up_), diag_embed(exp(log_diag_)));
    return matmul(lower, upper);
  }

  std::int64_t n_;
  Tensor &l_raw_, &u_raw_, &log_diag_;
  Tensor mask_low_, mask_up_, eye_;
};

void build_blocks(const FlowSpec& spec, ParameterStore& store, const std::string& prefix,
                  std::vector<std::unique_ptr<InvertibleBlock>>& blocks) {
  Rng rng(spec.init_seed);
  RngStream init(rng, prefix + ".init");
  std::int64_t h = 0, w = 0;
  if (!spec.image.empty()) {
    if (spec.image.size() != 2) throw ConfigError("flow image spec must be [h,w]");
    h = spec.image[0];
    w = spec.image[1];
    if (h * w != spec.n) throw ConfigError("image dims do not match flow dim");
  }
  if (spec.squeeze_stages > 0 && h == 0)
    throw ConfigError("squeeze stages need an image shape");
  if (spec.cond_affine > 0 && spec.cond_width <= 0)
    throw ConfigError("cond-affine stages need cond_width > 0");
  for (std::int64_t i = 0; i < spec.cond_affine; ++i)
    blocks.push_back(std::make_unique<CondAffine>(
        store, prefix + ".ca" + std::to_string(i), spec.n, spec.cond_width));
  std::int64_t squeezes_left = spec.squeeze_stages;
  for (std::int64_t i = 0; i < spec.couplings; ++i) {
    if (squeezes_left > 0) {
      blocks.push_back(std::make_unique<Permutation>(spec.n, squeeze_indices(h, w), "squeeze"));
      --squeezes_left;
    }
    const std::string stage = prefix + "." + std::to_string(i);
    if (spec.actnorm) blocks.push_back(std::make_unique<ActNorm>(store, stage + ".actnorm", spec.n));
    if (spec.mix == "permutation") {
      blocks.push_back(std::make_unique<Permutation>(spec.n, shuffled_indices(spec.n, init)));
    } else if (spec.mix == "lu") {
      blocks.push_back(std::make_unique<LuMix>(store, stage + ".mix", spec.n));
    } else if (spec.mix != "none") {
      throw ConfigError("unknown mix kind: " + spec.mix);
    }
    blocks.push_back(std::make_unique<AffineCoupling>(store, stage + ".coupling", spec.n,
                                                      spec.hidden, spec.cond_width,
                                                      spec.scale_clamp, init));
  }
}

template <typename Fn>
FlowResult run_blocks(const std::vector<std::unique_ptr<InvertibleBlock>>& blocks, const Tensor& in,
                      bool forward_dir, Fn&& apply) {
  Tensor cur = in;
  Tensor logdet = Tensor::zeros({in.dim(0)});
  const std::int64_t count = static_cast<std::int64_t>(blocks.size());
  for (std::int64_t step = 0; step < count; ++step) {
    const std::int64_t i = forward_dir ? step : count - 1 - step;
    try {
      FlowResult r = apply(*blocks[static_cast<size_t>(i)], cur);
      cur = r.value;
      logdet = add(logdet, r.logdet);
    } catch (const NumericError& e) {
      throw NumericError("block " + std::to_string(i) + " (" +
                         blocks[static_cast<size_t>(i)]->kind() + "): " + e.what());
    }
  }
  return {cur, logdet};
}

}  // namespace

Tensor std_normal_logpdf_rows(const Tensor& x) {
  const double n = static_cast<double>(x.dim(1));
  return affine(sum_axis(square(x), 1), -0.5, -0.5 * n * kLog2Pi);
}

Tensor repeat_rows(const Tensor& t, std::int64_t times) {
  std::vector<std::int64_t> idx(static_cast<size_t>(t.dim(0) * times));
  for (std::int64_t b = 0; b < t.dim(0); ++b)
    for (std::int64_t j = 0; j < times; ++j) idx[static_cast<size_t>(b * times + j)] = b;
  return gather(t, 0, idx);
}

// ---- FlowSpec ------------------------------------------------------------

nlohmann::json FlowSpec::to_json() const {
  return {{"n", n},
          {"couplings", couplings},
          {"hidden", hidden},
          {"mix", mix},
          {"actnorm", actnorm},
          {"cond_width", cond_width},
          {"cond_affine", cond_affine},
          {"image", image},
          {"squeeze_stages", squeeze_stages},
          {"init_seed", init_seed},
          {"scale_clamp", scale_clamp}};
}

FlowSpec FlowSpec::from_json(const nlohmann::json& j) {
  FlowSpec s;
  s.n = j.at("n").get<std::int64_t>();
  s.couplings = j.at("couplings").get<std::int64_t>();
  s.hidden = j.at("hidden").get<std::int64_t>();
  s.mix = j.at("mix").get<std::string>();
  s.actnorm = j.at("actnorm").get<bool>();
  s.cond_width = j.at("cond_width").get<std::int64_t>();
  s.cond_affine = j.value("cond_affine", static_cast<std::int64_t>(0));
  s.image = j.at("image").get<std::vector<std::int64_t>>();
  s.squeeze_stages = j.at("squeeze_stages").get<std::int64_t>();
  s.init_seed = j.at("init_seed").get<std::uint64_t>();
  s.scale_clamp = j.at("scale_clamp").get<double>();
  return s;
}

// ---- FlowModel -------------------------------------------------------------

FlowModel::FlowModel(FlowSpec spec, std::string param_prefix) : spec_(std::move(spec)) {
  if (spec_.cond_width != 0) throw ConfigError("unconditional flow cannot take conditioning");
  build_blocks(spec_, store_, param_prefix, blocks_);
  store_.set_rng_seed(spec_.init_seed);
}

FlowResult FlowModel::forward(const Tensor& z) const {
  Tensor in = as_rows(z);
  if (in.dim(1) != spec_.n) throw ConfigError("forward input dim mismatch");
  return run_blocks(blocks_, in, true,
                    [](const InvertibleBlock& b, const Tensor& t) { return b.forward(t, nullptr); });
}

FlowResult FlowModel::inverse(const Tensor& x) const {
  Tensor in = as_rows(x);
  if (in.dim(1) != spec_.n) throw ConfigError("inverse input dim mismatch");
  return run_blocks(blocks_, in, false,
                    [](const InvertibleBlock& b, const Tensor& t) { return b.inverse(t, nullptr); });
}

Tensor FlowModel::log_prob_rows(const Tensor& x) const {
  FlowResult inv = inverse(x);
  return add(std_normal_logpdf_rows(inv.value), inv.logdet);
}

Tensor FlowModel::log_prob(const Tensor& x) const {
  return reshape(log_prob_rows(as_rows(x)), {});
}

Tensor FlowModel::sample(std::int64_t count, RngStream& stream) const {
  if (count < 1) throw UsageError("sample count must be >= 1");
  Tensor z = randn_tensor({count, spec_.n}, stream);
  return forward(z).value.detach();
}

bool FlowModel::needs_data_init() const {
  for (const auto& b : blocks_)
    if (b->wants_data_init()) return true;
  return false;
}

void FlowModel::data_init_from_data(const Tensor& x_batch) {
  Tensor cur = as_rows(x_batch).detach();
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    if ((*it)->wants_data_init()) (*it)->data_init_inverse(cur);
    cur = (*it)->inverse(cur, nullptr).value.detach();
  }
}

nlohmann::json FlowModel::architecture() const {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : blocks_) blocks.push_back(b->describe());
  return {{"model", "flow"}, {"spec", spec_.to_json()}, {"blocks", blocks}};
}

// ---- ConditionalFlowModel -----------------------------------------------------

nlohmann::json ConditionalFlowSpec::to_json() const {
  return {{"flow", flow.to_json()},
          {"measurement_dim", measurement_dim},
          {"cond_hidden", cond_hidden},
          {"measurement_image", measurement_image},
          {"cond_identity", cond_identity}};
}

ConditionalFlowSpec ConditionalFlowSpec::from_json(const nlohmann::json& j) {
  ConditionalFlowSpec s;
  s.flow = FlowSpec::from_json(j.at("flow"));
  s.measurement_dim = j.at("measurement_dim").get<std::int64_t>();
  s.cond_hidden = j.at("cond_hidden").get<std::int64_t>();
  s.measurement_image = j.at("measurement_image").get<std::vector<std::int64_t>>();
  s.cond_identity = j.value("cond_identity", false);
  return s;
}

namespace {

// Constant 2x2 mean-pool matrix on a flattened (channels, h, w) layout.
Tensor pool_matrix(std::int64_t channels, std::int64_t h, std::int64_t w) {
  if (h % 2 || w % 2) throw ConfigError("conditioner pooling needs even dims");
  const std::int64_t m = channels * h * w;
  const std::int64_t mo = channels * (h / 2) * (w / 2);
  Eigen::ArrayXd mat = Eigen::ArrayXd::Zero(m * mo);
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t i = 0; i < h / 2; ++i)
      for (std::int64_t j = 0; j < w / 2; ++j) {
        std::int64_t out = (c * (h / 2) + i) * (w / 2) + j;
        for (std::int64_t si = 0; si < 2; ++si)
          for (std::int64_t sj = 0; sj < 2; ++sj) {
            std::int64_t in = (c * h + 2 * i + si) * w + 2 * j + sj;
            mat[in * mo + out] = 0.25;
          }
      }
  return Tensor::from_array({m, mo}, std::move(mat));
}

}  // namespace

ConditionalFlowModel::ConditionalFlowModel(ConditionalFlowSpec spec, std::string param_prefix)
    : spec_(std::move(spec)), prefix_(std::move(param_prefix)) {
  if (spec_.flow.cond_width <= 0) throw ConfigError("conditional flow requires cond_width > 0");
  if (spec_.measurement_dim <= 0) throw ConfigError("conditional flow requires measurement_dim");

  Rng rng(spec_.flow.init_seed);
  RngStream init(rng, prefix_ + ".cond.init");

  if (spec_.cond_identity) {
    if (!spec_.measurement_image.empty())
      throw ConfigError("cond_identity excludes pooled image conditioning");
    if (spec_.flow.cond_width != spec_.measurement_dim)
      throw ConfigError("cond_identity needs cond_width == measurement_dim");
    build_blocks(spec_.flow, store_, prefix_, blocks_);
    store_.set_rng_seed(spec_.flow.init_seed);
    return;
  }

  std::int64_t in_dim = spec_.measurement_dim;
  if (!spec_.measurement_image.empty()) {
    auto img = spec_.measurement_image;
    std::int64_t channels = 1, h = 0, w = 0;
    if (img.size() == 3) {
      channels = img[0];
      h = img[1];
      w = img[2];
    } else if (img.size() == 2) {
      h = img[0];
      w = img[1];
    } else {
      throw ConfigError("measurement_image must be [h,w] or [c,h,w]");
    }
    if (channels * h * w != spec_.measurement_dim)
      throw ConfigError("measurement_image does not match measurement_dim");
    // two-scale downsampling feature stack
    pool1_t_ = pool_matrix(channels, h, w);
    pool2_t_ = pool_matrix(channels, h / 2, w / 2);
    in_dim = pool1_t_.dim(1) + pool2_t_.dim(1);
  }
  store_.create(prefix_ + ".cond.w1", glorot_init({in_dim, spec_.cond_hidden}, init));
  store_.create(prefix_ + ".cond.b1", Tensor::zeros({spec_.cond_hidden}));
  store_.create(prefix_ + ".cond.w2", glorot_init({spec_.cond_hidden, spec_.flow.cond_width}, init));
  store_.create(prefix_ + ".cond.b2", Tensor::zeros({spec_.flow.cond_width}));

  build_blocks(spec_.flow, store_, prefix_, blocks_);
  store_.set_rng_seed(spec_.flow.init_seed);
}

Tensor ConditionalFlowModel::features(const Tensor& g) const {
  Tensor rows = as_rows(g);
  if (rows.dim(1) != spec_.measurement_dim)
    throw ConfigError("measurement dim mismatch: got " + shape_str(rows.shape()) + ", expected " +
                      std::to_string(spec_.measurement_dim) + " columns");
  if (spec_.cond_identity) return rows;
  Tensor in = rows;
  if (pool1_t_.defined()) {
    Tensor p1 = matmul(rows, pool1_t_);
    Tensor p2 = matmul(p1, pool2_t_);
    in = concat({p1, p2}, 1);
  }
  const auto& w1 = store_.get(prefix_ + ".cond.w1");
  const auto& b1 = store_.get(prefix_ + ".cond.b1");
  const auto& w2 = store_.get(prefix_ + ".cond.w2");
  const auto& b2 = store_.get(prefix_ + ".cond.b2");
  auto h1 = tanh(add(matmul(in, w1), broadcast_to(b1, {in.dim(0), w1.dim(1)})));
  return tanh(add(matmul(h1, w2), broadcast_to(b2, {in.dim(0), w2.dim(1)})));
}

FlowResult ConditionalFlowModel::forward(const Tensor& zeta, const Tensor& g) const {
  Tensor in = as_rows(zeta);
  if (in.dim(1) != spec_.flow.n) throw ConfigError("zeta dim mismatch");
  Tensor feats = features(g);
  if (feats.dim(0) != in.dim(0)) throw ConfigError("zeta batch and g batch sizes differ");
  return run_blocks(blocks_, in, true, [&feats](const InvertibleBlock& b, const Tensor& t) {
    return b.forward(t, &feats);
  });
}

FlowResult ConditionalFlowModel::inverse(const Tensor& f, const Tensor& g) const {
  Tensor in = as_rows(f);
  if (in.dim(1) != spec_.flow.n) throw ConfigError("f dim mismatch");
  Tensor feats = features(g);
  if (feats.dim(0) != in.dim(0)) throw ConfigError("f batch and g batch sizes differ");
  return run_blocks(blocks_, in, false, [&feats](const InvertibleBlock& b, const Tensor& t) {
    return b.inverse(t, &feats);
  });
}

Tensor ConditionalFlowModel::log_prob_rows(const Tensor& f, const Tensor& g) const {
  FlowResult inv = inverse(f, g);
  return add(std_normal_logpdf_rows(inv.value), inv.logdet);
}

Tensor ConditionalFlowModel::sample(const Tensor& g, std::int64_t count, RngStream& stream) const {
  Tensor rows = as_rows(g);
  if (rows.dim(0) == 1 && count > 1) rows = repeat_rows(rows, count);
  if (rows.dim(0) != count) throw ConfigError("sample count does not match g batch");
  Tensor zeta = randn_tensor({count, spec_.flow.n}, stream);
  return forward(zeta, rows).value.detach();
}

bool ConditionalFlowModel::needs_data_init() const {
  for (const auto& b : blocks_)
    if (b->wants_data_init()) return true;
  return false;
}

void ConditionalFlowModel::data_init_from_draws(const Tensor& zeta, const Tensor& g) {
  Tensor feats = features(g).detach();
  Tensor cur = as_rows(zeta).detach();
  for (auto& b : blocks_) {
    if (b->wants_data_init()) b->data_init_forward(cur);
    cur = b->forward(cur, &feats).value.detach();
  }
}

nlohmann::json ConditionalFlowModel::architecture() const {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : blocks_) blocks.push_back(b->describe());
  return {{"model", "conditional-flow"}, {"spec", spec_.to_json()}, {"blocks", blocks}};
}

// ---- serialization ------------------------------------------------------------

void save_params(const std::filesystem::path& dir, const ParameterStore& store) {
  std::filesystem::create_directories(dir);
  for (const auto& name : store.names()) write_aftn(dir / (name + ".aftn"), store.get(name));
}

void load_params(const std::filesystem::path& dir, ParameterStore& store) {
  for (const auto& name : store.names()) {
    Tensor t = read_aftn(dir / (name + ".aftn"));
    Tensor& p = store.get(name);
    if (t.shape() != p.shape())
      throw IoError("parameter " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                    shape_str(p.shape()));
    p.mutable_array() = t.array();
  }
}

void save_flow(const std::filesystem::path& dir, const FlowModel& model) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "architecture.json");
  os << model.architecture().dump(2) << "\n";
  if (!os) throw IoError("cannot write architecture.json in " + dir.string());
  save_params(dir / "params", model.params());
}

FlowModel load_flow(const std::filesystem::path& dir) {
  std::ifstream is(dir / "architecture.json");
  if (!is) throw IoError("missing architecture.json in " + dir.string());
  nlohmann::json j = nlohmann::json::parse(is);
  FlowModel model(FlowSpec::from_json(j.at("spec")));
  load_params(dir / "params", model.params());
  return model;
}

void save_conditional_flow(const std::filesystem::path& dir, const ConditionalFlowModel& model) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "architecture.json");
  os << model.architecture().dump(2) << "\n";
  if (!os) throw IoError("cannot write architecture.json in " + dir.string());
  save_params(dir / "params", model.params());
}

ConditionalFlowModel load_conditional_flow(const std::filesystem::path& dir) {
  std::ifstream is(dir / "architecture.json");
  if (!is) throw IoError("missing architecture.json in " + dir.string());
  nlohmann::json j = nlohmann::json::parse(is);
  ConditionalFlowModel model(ConditionalFlowSpec::from_json(j.at("spec")));
  load_params(dir / "params", model.params());
  return model;
}

}  // namespace af
