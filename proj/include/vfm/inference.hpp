#pragma once

// MAP estimation and stochastic gradient variational Bayes (mean-field normal
// posterior, reparameterized gradients, analytic KL) trained with Adam and
// early stopping.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vfm/errors.hpp"
#include "vfm/model.hpp"
#include "vfm/random.hpp"

namespace vfm {

inline double softplus(double r) { return std::max(r, 0.0) + std::log1p(std::exp(-std::abs(r))); }

inline double softplus_inverse(double s) {
  detail::require_config(s > 0.0, "softplus inverse needs a positive argument");
  return s > 30.0 ? s + std::log(-std::expm1(-s)) : std::log(std::expm1(s));
}

inline double sigmoid(double r) {
  if (r >= 0.0) return 1.0 / (1.0 + std::exp(-r));
  const double e = std::exp(r);
  return e / (1.0 + e);
}

// Mean-field normal q(theta) = prod N(mu_i, softplus(rho_i)^2).
struct VariationalParams {
  Vector mu;
  Vector rho;

  std::size_t size() const { return static_cast<std::size_t>(mu.size()); }
  Vector sigma() const { return rho.unaryExpr([](double r) { return softplus(r); }); }

  void validate() const {
    detail::require_dims(mu.size() == rho.size(), "variational mu/rho length mismatch");
    detail::require_config(mu.size() > 0, "variational parameters are empty");
    if (!mu.allFinite() || !rho.allFinite()) throw NumericalError("non-finite variational parameters");
  }
};

namespace detail {

// KL with sigma = softplus(rho) precomputed. Subtracts dKL/dmu and dKL/drho
// from the buffers when they are non-null (dsigma = sigmoid(rho)).
inline double kl_from_sigma(const VariationalParams& q, const Vector& sigma, const PriorSpec& prior,
                            const Vector* dsigma = nullptr, Vector* grad_mu = nullptr, Vector* grad_rho = nullptr) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < q.mu.size(); ++i) {
    const double s = sigma[i];
    const double b = prior.stddev[i];
    const double ratio = s / b;
    const double m = (q.mu[i] - prior.mean[i]) / b;
    kl += -1.0 - 2.0 * std::log(ratio) + m * m + ratio * ratio;
    if (grad_mu != nullptr) {
      (*grad_mu)[i] -= m / b;
      (*grad_rho)[i] -= (-1.0 / s + s / (b * b)) * (*dsigma)[i];
    }
  }
  return 0.5 * kl;
}

}  // namespace detail

// KL(q || prior) in closed form for two mean-field normals.
inline double kl_mean_field(const VariationalParams& q, const PriorSpec& prior) {
  q.validate();
  prior.validate();
  detail::require_dims(q.size() == prior.size(), "posterior and prior lengths differ");
  return detail::kl_from_sigma(q, q.sigma(), prior);
}

// Adds dKL/dmu and dKL/drho to the given buffers.
inline void kl_mean_field_gradient(const VariationalParams& q, const PriorSpec& prior, Vector& grad_mu,
                                   Vector& grad_rho) {
  const Vector dsigma = q.rho.unaryExpr([](double r) { return sigmoid(r); });
  Vector gm = Vector::Zero(q.mu.size());
  Vector gr = Vector::Zero(q.mu.size());
  detail::kl_from_sigma(q, q.sigma(), prior, &dsigma, &gm, &gr);
  grad_mu -= gm;
  grad_rho -= gr;
}

// theta = mu + softplus(rho) * zeta.
inline Vector reparameterize(const VariationalParams& q, const Vector& zeta) {
  detail::require_dims(zeta.size() == q.mu.size() && q.rho.size() == q.mu.size(), "reparameterize: length mismatch");
  Vector theta(q.mu.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = q.mu[i] + softplus(q.rho[i]) * zeta[i];
  return theta;
}

inline std::span<const double> as_span(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
inline std::span<double> as_span(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

// Reparameterized ELBO estimate for explicit noise draws:
//   (N_total / B) (1/M) sum_m log p(batch | mu + sigma * zeta_m) - KL(q || prior).
// When the gradient buffers are non-null they receive dELBO/dmu, dELBO/drho.
inline double elbo_with_draws(const RegressionData& batch, const VariationalParams& q, const PriorSpec& prior,
                              const FlowModel& model, const std::vector<Vector>& zetas, std::size_t n_total,
                              Vector* grad_mu = nullptr, Vector* grad_rho = nullptr) {
  detail::require_config(!zetas.empty(), "ELBO needs at least one Monte-Carlo sample");
  detail::require_config(batch.size() > 0 && n_total >= batch.size(), "ELBO batch must be non-empty and <= N");
  detail::require_dims(q.size() == model.parameter_count(), "posterior size does not match model");
  const double scale = static_cast<double>(n_total) / static_cast<double>(batch.size()) /
                       static_cast<double>(zetas.size());
  const bool want_grad = grad_mu != nullptr && grad_rho != nullptr;
  q.validate();
  prior.validate();
  detail::require_dims(q.size() == prior.size(), "posterior and prior lengths differ");
  const Vector sigma = q.sigma();
  Vector g_theta;
  Vector dsigma;
  if (want_grad) {
    grad_mu->setZero(q.mu.size());
    grad_rho->setZero(q.mu.size());
    g_theta.resize(q.mu.size());
    dsigma = q.rho.unaryExpr([](double r) { return sigmoid(r); });
  }
  double expected_ll = 0.0;
  Vector theta(q.mu.size());
  for (const Vector& zeta : zetas) {
    detail::require_dims(zeta.size() == q.mu.size(), "reparameterize: length mismatch");
    theta = q.mu + sigma.cwiseProduct(zeta);
    if (want_grad) {
      expected_ll += log_likelihood(batch, as_span(theta), model, as_span(g_theta));
      *grad_mu += scale * g_theta;
      grad_rho->array() += scale * g_theta.array() * zeta.array() * dsigma.array();
    } else {
      expected_ll += log_likelihood(batch, as_span(theta), model);
    }
  }
  const double kl = want_grad ? detail::kl_from_sigma(q, sigma, prior, &dsigma, grad_mu, grad_rho)
                              : detail::kl_from_sigma(q, sigma, prior);
  return scale * expected_ll - kl;
}

inline std::vector<Vector> draw_zetas(std::size_t m, Eigen::Index k, Rng& rng) {
  std::vector<Vector> out;
  out.reserve(m);
  for (std::size_t i = 0; i < m; ++i) out.push_back(standard_normal(k, rng));
  return out;
}

inline double elbo_estimate(const RegressionData& batch, const VariationalParams& q, const PriorSpec& prior,
                            const FlowModel& model, std::size_t mc_samples, std::size_t n_total, Rng& rng) {
  const auto zetas = draw_zetas(mc_samples, q.mu.size(), rng);
  return elbo_with_draws(batch, q, prior, model, zetas, n_total);
}

// (1/(2 sigma_n^2)) sum (y - f)^2 + sum (theta - mu_bar)^2 / (2 sigma_bar^2)
// scaled so the data term counts n_total points. Fixed noise only.
inline double map_objective(const RegressionData& batch, const Vector& theta, const PriorSpec& prior,
                            const FlowModel& model, std::size_t n_total, Vector* grad = nullptr) {
  detail::require_config(model.noise.kind == NoiseKind::FixedHomoscedastic,
                         "MAP estimation requires the fixed homoscedastic noise model");
  detail::require_dims(static_cast<std::size_t>(theta.size()) == model.parameter_count() &&
                           prior.size() == model.parameter_count(),
                       "MAP: parameter/prior length mismatch");
  const double scale = static_cast<double>(n_total) / static_cast<double>(batch.size());
  const double inv_var = 1.0 / (model.noise.sigma_n * model.noise.sigma_n);
  const auto trace = detail::forward_trace(batch.x, as_span(theta), model.arch);
  const Vector residual = batch.y - trace.h.back().col(0);
  double value = 0.5 * scale * inv_var * residual.squaredNorm();
  const Vector centered = theta - prior.mean;
  const Vector prec = prior.stddev.array().square().inverse();
  value += 0.5 * (centered.array().square() * prec.array()).sum();
  if (!std::isfinite(value)) throw NumericalError("MAP objective is not finite");
  if (grad != nullptr) {
    grad->setZero(theta.size());
    const Vector dz = -scale * inv_var * residual;
    detail::backward(trace, dz, as_span(theta), model.arch, as_span(*grad));
    *grad += (centered.array() * prec.array()).matrix();
  }
  return value;
}

// Bias-corrected Adam (descent direction).
struct AdamState {
  Vector m;
  Vector v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  explicit AdamState(Eigen::Index n = 0) : m(Vector::Zero(n)), v(Vector::Zero(n)) {}
};

inline void adam_update(Vector& params, const Vector& grad, AdamState& state, double learning_rate) {
  detail::require_dims(params.size() == grad.size() && state.m.size() == params.size(), "adam: shape mismatch");
  ++state.step;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= learning_rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.epsilon);
}

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t mc_samples = 1;
  std::size_t max_epochs = 5000;
  std::size_t patience = 200;
  double validation_fraction = 0.2;
  // Fixed noise draws used to score the validation ELBO every epoch.
  std::size_t validation_mc_samples = 8;
  // Initial posterior std as a fraction of the prior std (VI only).
  double initial_sigma_scale = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require_config(std::isfinite(learning_rate) && learning_rate > 0.0, "learning rate must be > 0");
    detail::require_config(batch_size >= 1, "batch size must be >= 1");
    detail::require_config(mc_samples >= 1 && validation_mc_samples >= 1, "Monte-Carlo sample count must be >= 1");
    detail::require_config(max_epochs >= 1, "max epochs must be >= 1");
    detail::require_config(initial_sigma_scale > 0.0 && initial_sigma_scale <= 1.0,
                           "initial sigma scale must lie in (0, 1]");
    detail::require_config(validation_fraction > 0.0 && validation_fraction < 1.0,
                           "validation fraction must lie in (0, 1)");
  }
};

template <typename Params>
struct TrainResult {
  Params best;
  std::vector<double> train_loss;       // per epoch, per fit point
  std::vector<double> validation_loss;  // per epoch, per validation point
  std::size_t best_epoch = 0;           // 0-based
  std::size_t stopped_epoch = 0;        // epochs run

  double best_validation_loss() const { return validation_loss.at(best_epoch); }
};

namespace detail {

inline std::string divergence_message(const char* method, std::size_t epoch, std::size_t step, const Error& e) {
  std::ostringstream os;
  os << method << " diverged at epoch " << epoch << ", step " << step << ": " << e.what();
  return os.str();
}

// Shuffled mini-batches covering every index once; the last may be short.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch)));
  }
  return out;
}

// Tracks the best validation score and decides when to stop.
template <typename Params>
class EarlyStopping {
 public:
  EarlyStopping(TrainResult<Params>& result, std::size_t patience) : result_(result), patience_(patience) {}

  // Returns true when training should stop.
  bool record(std::size_t epoch, double train_loss, double val_loss, const Params& params) {
    result_.train_loss.push_back(train_loss);
    result_.validation_loss.push_back(val_loss);
    result_.stopped_epoch = epoch + 1;
    if (epoch == 0 || val_loss < best_) {
      best_ = val_loss;
      result_.best = params;
      result_.best_epoch = epoch;
    }
    return epoch - result_.best_epoch >= patience_;
  }

 private:
  TrainResult<Params>& result_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
};

inline RegressionData subset(const RegressionData& d, const std::vector<std::size_t>& idx) { return d.rows(idx); }

}  // namespace detail

// He-initialized weights, biases at zero, noise parameters at their prior means.
inline Vector initial_map_parameters(const PriorSpec& prior, const FlowModel& model, Rng& rng) {
  const auto k = static_cast<Eigen::Index>(model.parameter_count());
  const auto kphi = static_cast<Eigen::Index>(model.phi_size());
  detail::require_dims(prior.size() == model.parameter_count(), "prior length does not match model");
  Vector theta(k);
  theta.head(kphi) = he_prior(model.arch).stddev.cwiseProduct(standard_normal(kphi, rng));
  for (std::size_t l = 0; l < model.arch.layers(); ++l) {
    theta.segment(static_cast<Eigen::Index>(model.arch.bias_offset(l)), static_cast<Eigen::Index>(model.arch.outputs(l)))
        .setZero();
  }
  theta.tail(k - kphi) = prior.mean.tail(k - kphi);
  return theta;
}

// SGVB with Adam on (mu, rho). Returns the posterior with the best validation
// ELBO per point. The validation score uses a fixed set of noise draws so
// epochs are compared with common random numbers.
inline TrainResult<VariationalParams> vi_fit(const RegressionData& fit, const RegressionData& validation,
                                             const PriorSpec& prior, const FlowModel& model,
                                             const TrainConfig& config) {
  config.validate();
  prior.validate();
  model.noise.validate();
  detail::require_dims(prior.size() == model.parameter_count(), "prior length does not match model");
  detail::require_config(fit.size() > 0 && validation.size() > 0, "vi_fit needs non-empty fit and validation sets");

  const auto k = static_cast<Eigen::Index>(model.parameter_count());
  Rng rng(config.seed);
  Rng val_rng(derive_seed(config.seed, 1));

  VariationalParams q;
  q.mu = initial_map_parameters(prior, model, rng);
  q.rho = (config.initial_sigma_scale * prior.stddev).unaryExpr([](double s) { return softplus_inverse(s); });

  const auto val_zetas = draw_zetas(config.validation_mc_samples, k, val_rng);
  const std::size_t n = fit.size();
  const std::size_t batch = std::min(config.batch_size, n);

  Vector lambda(2 * k);
  Vector grad(2 * k);
  Vector g_mu;
  Vector g_rho;
  AdamState adam(2 * k);

  TrainResult<VariationalParams> result;
  detail::EarlyStopping<VariationalParams> stopper(result, config.patience);
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    double train_loss = 0.0;
    std::size_t step = 0;
    for (const auto& idx : detail::epoch_batches(n, batch, rng)) {
      const RegressionData b = detail::subset(fit, idx);
      const auto zetas = draw_zetas(config.mc_samples, k, rng);
      double elbo = 0.0;
      try {
        elbo = elbo_with_draws(b, q, prior, model, zetas, n, &g_mu, &g_rho);
      } catch (const NumericalError& e) {
        throw NumericalError(detail::divergence_message("vi_fit", epoch, step, e));
      }
      if (!std::isfinite(elbo) || !g_mu.allFinite() || !g_rho.allFinite()) {
        throw NumericalError(detail::divergence_message("vi_fit", epoch, step, NumericalError("non-finite ELBO")));
      }
      train_loss += -elbo * static_cast<double>(idx.size()) / static_cast<double>(n);
      lambda << q.mu, q.rho;
      grad << -g_mu, -g_rho;
      adam_update(lambda, grad, adam, config.learning_rate);
      q.mu = lambda.head(k);
      q.rho = lambda.tail(k);
      ++step;
    }
    double val_loss = 0.0;
    try {
      // Per-point negative ELBO on held-out data: -E_q[log p(y_val)]/N_val + KL/N_fit.
      const double kl = kl_mean_field(q, prior);
      const double elbo_val = elbo_with_draws(validation, q, prior, model, val_zetas, validation.size());
      val_loss = -(elbo_val + kl) / static_cast<double>(validation.size()) + kl / static_cast<double>(n);
    } catch (const NumericalError& e) {
      throw NumericalError(detail::divergence_message("vi_fit validation", epoch, step, e));
    }
    if (stopper.record(epoch, train_loss / static_cast<double>(n), val_loss, q)) break;
  }
  return result;
}

inline TrainResult<VariationalParams> vi_fit(const RegressionData& train, const PriorSpec& prior,
                                             const FlowModel& model, const TrainConfig& config) {
  config.validate();
  auto [fit_idx, val_idx] = random_holdout(train.size(), config.validation_fraction, derive_seed(config.seed, 7));
  return vi_fit(train.rows(fit_idx), train.rows(val_idx), prior, model, config);
}


// MAP point estimate with Adam, started from initial_map_parameters(). The
// validation score is the per-point data term
// (y - f)^2 / (2 sigma_n^2).
inline TrainResult<Vector> map_fit(const RegressionData& fit, const RegressionData& validation, const PriorSpec& prior,
                                   const FlowModel& model, const TrainConfig& config) {
  config.validate();
  prior.validate();
  detail::require_config(model.noise.kind == NoiseKind::FixedHomoscedastic,
                         "MAP estimation requires the fixed homoscedastic noise model");
  detail::require_dims(prior.size() == model.parameter_count(), "prior length does not match model");
  detail::require_config(fit.size() > 0 && validation.size() > 0, "map_fit needs non-empty fit and validation sets");

  const auto k = static_cast<Eigen::Index>(model.parameter_count());
  Rng rng(config.seed);
  Vector theta = initial_map_parameters(prior, model, rng);

  const std::size_t n = fit.size();
  const std::size_t batch = std::min(config.batch_size, n);
  const double inv_two_var = 0.5 / (model.noise.sigma_n * model.noise.sigma_n);
  Vector grad;
  AdamState adam(k);
  TrainResult<Vector> result;
  detail::EarlyStopping<Vector> stopper(result, config.patience);
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    double train_loss = 0.0;
    std::size_t step = 0;
    for (const auto& idx : detail::epoch_batches(n, batch, rng)) {
      const RegressionData b = detail::subset(fit, idx);
      double obj = 0.0;
      try {
        obj = map_objective(b, theta, prior, model, n, &grad);
      } catch (const NumericalError& e) {
        throw NumericalError(detail::divergence_message("map_fit", epoch, step, e));
      }
      if (!grad.allFinite()) {
        throw NumericalError(detail::divergence_message("map_fit", epoch, step, NumericalError("non-finite gradient")));
      }
      train_loss += obj * static_cast<double>(idx.size()) / static_cast<double>(n);
      adam_update(theta, grad, adam, config.learning_rate);
      ++step;
    }
    const Vector pred = forward_mean(validation.x, as_span(theta), model.arch);
    const double val_loss = inv_two_var * (validation.y - pred).squaredNorm() / static_cast<double>(validation.size());
    if (!std::isfinite(val_loss)) {
      throw NumericalError(detail::divergence_message("map_fit validation", epoch, step, NumericalError("non-finite loss")));
    }
    if (stopper.record(epoch, train_loss / static_cast<double>(n), val_loss, theta)) break;
  }
  return result;
}

inline TrainResult<Vector> map_fit(const RegressionData& train, const PriorSpec& prior, const FlowModel& model,
                                   const TrainConfig& config) {
  config.validate();
  auto [fit_idx, val_idx] = random_holdout(train.size(), config.validation_fraction, derive_seed(config.seed, 7));
  return map_fit(train.rows(fit_idx), train.rows(val_idx), prior, model, config);
}

}  // namespace vfm
