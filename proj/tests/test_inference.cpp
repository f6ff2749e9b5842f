#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "test_util.hpp"
#include "vfm/inference.hpp"
#include "vfm/predict.hpp"

namespace vfm {
namespace {

using testing::finite_difference;
using testing::max_relative_error;

VariationalParams make_q(std::vector<double> mu, std::vector<double> sigma) {
  VariationalParams q;
  q.mu = Eigen::Map<Vector>(mu.data(), static_cast<Eigen::Index>(mu.size()));
  q.rho.resize(q.mu.size());
  for (std::size_t i = 0; i < sigma.size(); ++i) q.rho[static_cast<Eigen::Index>(i)] = softplus_inverse(sigma[i]);
  return q;
}

PriorSpec make_prior(std::vector<double> mean, std::vector<double> sd) {
  PriorSpec p;
  p.mean = Eigen::Map<Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  p.stddev = Eigen::Map<Vector>(sd.data(), static_cast<Eigen::Index>(sd.size()));
  return p;
}

double log_normal_pdf(double x, double m, double s) {
  const double u = (x - m) / s;
  return -0.5 * std::log(2.0 * std::numbers::pi) - std::log(s) - 0.5 * u * u;
}

TEST(Softplus, InverseAndStability) {
  for (double s : {1e-8, 0.01, 0.5, 1.0, 10.0, 50.0}) EXPECT_NEAR(softplus(softplus_inverse(s)), s, 1e-12 * std::max(1.0, s));
  EXPECT_DOUBLE_EQ(softplus(0.0), std::log(2.0));
  EXPECT_GT(softplus(-700.0), 0.0);
  EXPECT_DOUBLE_EQ(softplus(800.0), 800.0);
}

TEST(KlMeanField, Examples) {
  const auto prior = make_prior({0.3, -1.0}, {0.5, 2.0});
  EXPECT_NEAR(kl_mean_field(make_q({0.3, -1.0}, {0.5, 2.0}), prior), 0.0, 1e-14);
  EXPECT_NEAR(kl_mean_field(make_q({1.0}, {1.0}), make_prior({0.0}, {1.0})), 0.5, 1e-12);
  EXPECT_NEAR(kl_mean_field(make_q({0.0}, {2.0}), make_prior({0.0}, {1.0})), 0.806852819440054691, 1e-12);
}

TEST(KlMeanField, MatchesMonteCarlo) {
  const auto q = make_q({0.0}, {2.0});
  const auto p = make_prior({0.0}, {1.0});
  Rng rng(1);
  std::normal_distribution<double> nd(0.0, 2.0);
  double sum = 0.0;
  const int n = 1'000'000;
  for (int i = 0; i < n; ++i) {
    const double t = nd(rng);
    sum += log_normal_pdf(t, 0.0, 2.0) - log_normal_pdf(t, 0.0, 1.0);
  }
  EXPECT_NEAR(sum / n / kl_mean_field(q, p), 1.0, 0.01);
}

TEST(KlMeanField, NonNegativeAndZeroOnlyAtPrior) {
  Rng rng(8);
  std::uniform_real_distribution<double> u(-2.0, 2.0), s(0.05, 3.0);
  for (int t = 0; t < 2000; ++t) {
    const auto q = make_q({u(rng), u(rng), u(rng)}, {s(rng), s(rng), s(rng)});
    const auto p = make_prior({u(rng), u(rng), u(rng)}, {s(rng), s(rng), s(rng)});
    EXPECT_GT(kl_mean_field(q, p), 0.0);
  }
}

TEST(KlMeanField, RejectsBadInput) {
  EXPECT_THROW(kl_mean_field(make_q({0.0, 1.0}, {1.0, 1.0}), make_prior({0.0}, {1.0})), DimensionError);
  auto q = make_q({0.0}, {1.0});
  q.mu[0] = std::nan("");
  EXPECT_THROW(kl_mean_field(q, make_prior({0.0}, {1.0})), NumericalError);
}

TEST(KlMeanField, GradientMatchesFiniteDifferences) {
  auto q = make_q({0.3, -0.7, 1.1}, {0.4, 1.3, 0.2});
  const auto p = make_prior({0.0, 0.5, 1.0}, {1.0, 0.7, 0.3});
  Vector gm = Vector::Zero(3), gr = Vector::Zero(3);
  kl_mean_field_gradient(q, p, gm, gr);
  const auto fd_mu = finite_difference([&](const Vector& m) { return kl_mean_field({m, q.rho}, p); }, q.mu);
  const auto fd_rho = finite_difference([&](const Vector& r) { return kl_mean_field({q.mu, r}, p); }, q.rho);
  EXPECT_LT(max_relative_error(gm, fd_mu), 1e-6);
  EXPECT_LT(max_relative_error(gr, fd_rho), 1e-6);
}

TEST(Reparameterize, Examples) {
  VariationalParams q{Vector::Constant(2, 1.5), Vector::Constant(2, 0.3)};
  EXPECT_TRUE(reparameterize(q, Vector::Zero(2)).isApprox(q.mu));
  VariationalParams z{Vector::Zero(1), Vector::Zero(1)};
  EXPECT_NEAR(reparameterize(z, Vector::Ones(1))[0], 0.693147180559945309, 1e-15);
  EXPECT_THROW(reparameterize(q, Vector::Zero(3)), DimensionError);
}

TEST(Reparameterize, EmpiricalStdMatchesSoftplus) {
  VariationalParams q{Vector::Zero(3), Vector(3)};
  q.rho << -2.0, 0.0, 1.5;
  Rng rng(4);
  const int n = 100'000;
  Vector sum = Vector::Zero(3), sq = Vector::Zero(3);
  for (int i = 0; i < n; ++i) {
    const Vector t = reparameterize(q, standard_normal(3, rng));
    sum += t;
    sq += t.cwiseProduct(t);
  }
  for (Eigen::Index i = 0; i < 3; ++i) {
    const double mean = sum[i] / n;
    const double sd = std::sqrt(sq[i] / n - mean * mean);
    EXPECT_NEAR(sd / softplus(q.rho[i]), 1.0, 0.02);
  }
}

// f(x) = bias when every feature is zero: a one-parameter likelihood.
struct BiasOnlyToy {
  FlowModel model{Architecture({7, 1}), NoiseSpec::fixed(0.5)};
  RegressionData data;
  PriorSpec prior;
  Eigen::Index bias = 7;

  explicit BiasOnlyToy(std::size_t n = 20) {
    Rng rng(21);
    data.x = Matrix::Zero(static_cast<Eigen::Index>(n), 7);
    data.y = Vector::Constant(static_cast<Eigen::Index>(n), 1.2) + 0.5 * standard_normal(static_cast<Eigen::Index>(n), rng);
    prior = he_prior(model.arch, 1.0);
  }

  double loglik_at(double b) const {
    double s = 0.0;
    for (Eigen::Index i = 0; i < data.y.size(); ++i) s += log_normal_pdf(data.y[i], b, 0.5);
    return s;
  }
};

// Trapezoid rule for E_{b ~ N(m, s^2)} [g(b)] on m +- 12 s.
template <typename G>
double gauss_expectation(G g, double m, double s, int nodes = 20001) {
  const double lo = m - 12.0 * s, hi = m + 12.0 * s, h = (hi - lo) / (nodes - 1);
  double acc = 0.0;
  for (int i = 0; i < nodes; ++i) {
    const double b = lo + h * i;
    const double w = (i == 0 || i == nodes - 1) ? 0.5 : 1.0;
    acc += w * std::exp(log_normal_pdf(b, m, s)) * g(b);
  }
  return acc * h;
}

TEST(ElboEstimate, DegeneratePosteriorReducesToLikelihoodMinusKl) {
  BiasOnlyToy toy;
  Rng rng(3);
  VariationalParams q{0.2 * standard_normal(8, rng), Vector::Constant(8, -40.0)};
  const double ll = log_likelihood(toy.data, as_span(q.mu), toy.model);
  const double elbo = elbo_estimate(toy.data, q, toy.prior, toy.model, 3, toy.data.size(), rng);
  EXPECT_NEAR(elbo, ll - kl_mean_field(q, toy.prior), 1e-9);
}

TEST(ElboEstimate, MonteCarloMatchesQuadrature) {
  BiasOnlyToy toy;
  VariationalParams q{Vector::Zero(8), Vector::Constant(8, softplus_inverse(0.3))};
  q.mu[toy.bias] = 0.9;
  Rng rng(10);
  const double elbo = elbo_estimate(toy.data, q, toy.prior, toy.model, 100'000, toy.data.size(), rng);
  const double expected_ll = elbo + kl_mean_field(q, toy.prior);
  const double quad = gauss_expectation([&](double b) { return toy.loglik_at(b); }, 0.9, 0.3);
  EXPECT_NEAR(expected_ll / quad, 1.0, 0.005);
}

TEST(ElboEstimate, BoundedByImportanceSampledEvidence) {
  BiasOnlyToy toy;
  // log p(D) by importance sampling with the prior of the bias as proposal;
  // the other parameters do not touch the likelihood (x = 0).
  Rng rng(12);
  const double prior_sd = toy.prior.stddev[toy.bias];
  std::normal_distribution<double> proposal(0.0, prior_sd);
  const int n = 200'000;
  std::vector<double> logw(n);
  double mx = -1e300;
  for (int i = 0; i < n; ++i) {
    logw[i] = toy.loglik_at(proposal(rng));
    mx = std::max(mx, logw[i]);
  }
  double acc = 0.0;
  for (double lw : logw) acc += std::exp(lw - mx);
  const double log_evidence = mx + std::log(acc / n);

  // Exact conjugate posterior of the bias, prior on every other parameter.
  const double prec = 1.0 / (prior_sd * prior_sd) + static_cast<double>(toy.data.size()) / 0.25;
  const double post_mean = (toy.data.y.sum() / 0.25) / prec;
  VariationalParams best{toy.prior.mean, toy.prior.stddev.unaryExpr([](double s) { return softplus_inverse(s); })};
  best.mu[toy.bias] = post_mean;
  best.rho[toy.bias] = softplus_inverse(1.0 / std::sqrt(prec));
  const double elbo_best =
      elbo_estimate(toy.data, best, toy.prior, toy.model, 20'000, toy.data.size(), rng);
  EXPECT_NEAR(elbo_best, log_evidence, 0.02);

  for (double m : {-0.5, 0.5, 1.0, 2.0}) {
    for (double s : {0.05, 0.2, 1.0}) {
      VariationalParams q = best;
      q.mu[toy.bias] = m;
      q.rho[toy.bias] = softplus_inverse(s);
      const double elbo = elbo_estimate(toy.data, q, toy.prior, toy.model, 4000, toy.data.size(), rng);
      EXPECT_LE(elbo, log_evidence + 0.02) << "m=" << m << " s=" << s;
    }
  }
}

TEST(ElboGradient, MatchesFiniteDifferencesWithCommonRandomNumbers) {
  FlowModel m{Architecture::with_hidden({5}), NoiseSpec::learned_heteroscedastic(2.0)};
  Rng rng(31);
  const auto data = testing::random_data(25, rng);
  const auto k = static_cast<Eigen::Index>(m.parameter_count());
  const PriorSpec prior{Vector::Zero(k), Vector::Constant(k, 0.8)};
  VariationalParams q{0.4 * standard_normal(k, rng), Vector::Constant(k, -1.5)};
  q.mu.tail(2).setConstant(-0.7);
  const auto zetas = draw_zetas(4, k, rng);
  Vector gm, gr;
  elbo_with_draws(data, q, prior, m, zetas, data.size(), &gm, &gr);
  const auto fd_mu =
      finite_difference([&](const Vector& mu) { return elbo_with_draws(data, {mu, q.rho}, prior, m, zetas, data.size()); }, q.mu);
  const auto fd_rho =
      finite_difference([&](const Vector& r) { return elbo_with_draws(data, {q.mu, r}, prior, m, zetas, data.size()); }, q.rho);
  EXPECT_LT(max_relative_error(gm, fd_mu), 1e-4);
  EXPECT_LT(max_relative_error(gr, fd_rho), 1e-4);
}

// Linear model f = w x_0 + b with fixed noise: E_q[log p(D | theta)] is
// available in closed form, so its gradient is exact.
TEST(ElboGradient, MiniBatchEstimatorIsUnbiased) {
  const double sn = 0.7;
  FlowModel m{Architecture({7, 1}), NoiseSpec::fixed(sn)};
  const std::size_t n = 6, batch = 2;
  RegressionData data;
  data.x = Matrix::Zero(n, 7);
  data.y.resize(n);
  const double xs[] = {-1.0, -0.4, 0.1, 0.5, 0.9, 1.6};
  const double ys[] = {-1.5, -0.2, 0.4, 1.4, 1.5, 3.3};
  for (std::size_t i = 0; i < n; ++i) {
    data.x(static_cast<Eigen::Index>(i), 0) = xs[i];
    data.y[static_cast<Eigen::Index>(i)] = ys[i];
  }
  const Eigen::Index kw = 0, kb = 7;
  const PriorSpec prior{Vector::Zero(8), Vector::Ones(8)};
  VariationalParams q{Vector::Zero(8), Vector::Constant(8, softplus_inverse(0.5))};
  q.mu[kw] = 1.3;
  q.mu[kb] = 0.2;
  q.rho[kw] = softplus_inverse(0.3);
  q.rho[kb] = softplus_inverse(0.4);

  // Exact gradient of E_q[log p] - KL.
  const double mw = q.mu[kw], mb = q.mu[kb], sw = softplus(q.rho[kw]), sb = softplus(q.rho[kb]);
  double d_mw = 0, d_mb = 0, d_sw = 0, d_sb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ys[i] - mw * xs[i] - mb;
    d_mw += r * xs[i] / (sn * sn);
    d_mb += r / (sn * sn);
    d_sw += -sw * xs[i] * xs[i] / (sn * sn);
    d_sb += -sb / (sn * sn);
  }
  Vector kl_mu = Vector::Zero(8), kl_rho = Vector::Zero(8);
  kl_mean_field_gradient(q, prior, kl_mu, kl_rho);
  // Compared without the KL part, which is exact and nearly cancels the data
  // term in the sigma_w component.
  const double exact[] = {d_mw, d_mb, d_sw * sigmoid(q.rho[kw]), d_sb * sigmoid(q.rho[kb])};
  const Eigen::Vector4d kl_part(kl_mu[kw], kl_mu[kb], kl_rho[kw], kl_rho[kb]);

  std::vector<std::vector<std::size_t>> subsets;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) subsets.push_back({a, b});
  ASSERT_EQ(subsets.size(), 15u);

  Rng rng(5);
  const int draws = 100'005;  // multiple of the subset count
  Vector acc = Vector::Zero(4), gm, gr;
  for (int d = 0; d < draws; ++d) {
    const auto b = data.rows(subsets[static_cast<std::size_t>(d) % subsets.size()]);
    const std::vector<Vector> z{standard_normal(8, rng)};
    elbo_with_draws(b, q, prior, m, z, n, &gm, &gr);
    acc += Eigen::Vector4d(gm[kw], gm[kb], gr[kw], gr[kb]);
  }
  acc /= draws;
  acc += kl_part;
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(acc[i] / exact[i], 1.0, 0.02) << "component " << i;
  ASSERT_EQ(batch, subsets.front().size());
}

TEST(MapObjective, DiffersFromNegativeLogPosteriorByAConstant) {
  FlowModel m{Architecture::with_hidden({4}), NoiseSpec::fixed(0.3)};
  Rng rng(6);
  const auto data = testing::random_data(40, rng);
  const auto prior = he_prior(m.arch, 0.1);
  std::vector<double> diffs;
  for (int t = 0; t < 50; ++t) {
    const Vector theta = standard_normal(static_cast<Eigen::Index>(m.parameter_count()), rng);
    double log_prior = 0.0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) log_prior += log_normal_pdf(theta[i], prior.mean[i], prior.stddev[i]);
    const double neg_log_post = -log_likelihood(data, as_span(theta), m) - log_prior;
    diffs.push_back(neg_log_post - map_objective(data, theta, prior, m, data.size()));
  }
  double mean = 0.0;
  for (double d : diffs) mean += d;
  mean /= static_cast<double>(diffs.size());
  double var = 0.0;
  for (double d : diffs) var += (d - mean) * (d - mean);
  EXPECT_LT(var / static_cast<double>(diffs.size()), 1e-9);
}

TEST(MapObjective, GradientMatchesFiniteDifferences) {
  FlowModel m{Architecture::with_hidden({6, 3}), NoiseSpec::fixed(0.4)};
  Rng rng(16);
  const auto data = testing::random_data(30, rng);
  const auto prior = he_prior(m.arch, 0.2);
  const Vector theta = 0.6 * standard_normal(static_cast<Eigen::Index>(m.parameter_count()), rng);
  Vector grad;
  map_objective(data, theta, prior, m, 90, &grad);
  const auto fd = finite_difference([&](const Vector& t) { return map_objective(data, t, prior, m, 90); }, theta);
  EXPECT_LT(max_relative_error(grad, fd), 1e-4);
}

TEST(MapObjective, RejectsLearnedNoise) {
  FlowModel m{Architecture::with_hidden({2}), NoiseSpec::learned_homoscedastic()};
  Rng rng(1);
  const auto data = testing::random_data(5, rng);
  const PriorSpec prior{Vector::Zero(static_cast<Eigen::Index>(m.parameter_count())),
                        Vector::Ones(static_cast<Eigen::Index>(m.parameter_count()))};
  EXPECT_THROW(map_objective(data, prior.mean, prior, m, 5), ConfigError);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Vector p(3);
  p << 1.0, -2.0, 0.5;
  const Vector before = p;
  AdamState s(3);
  for (int i = 0; i < 10; ++i) adam_update(p, Vector::Zero(3), s, 0.1);
  EXPECT_EQ(p, before);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
  Vector p = Vector::Zero(2);
  AdamState s(2);
  Vector g(2);
  g << 3.0, -0.01;
  Vector prev = p;
  for (int i = 0; i < 2000; ++i) {
    prev = p;
    adam_update(p, g, s, 0.001);
  }
  // m_hat = g and v_hat = g^2 exactly, so each step is alpha * |g| / (|g| + eps).
  EXPECT_NEAR(prev[0] - p[0], 0.001 * 3.0 / (3.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p[1] - prev[1], 0.001 * 0.01 / (0.01 + 1e-8), 1e-15);
}

// Scalar reference of Adam, written from the textbook update.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double p, double g, double lr) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t));
    const double vh = v / (1 - std::pow(0.999, t));
    return p - lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

TEST(Adam, AgreesWithScalarReference) {
  Rng rng(2);
  Vector p = standard_normal(5, rng);
  std::vector<double> ref(p.data(), p.data() + 5);
  std::vector<ScalarAdam> refs(5);
  AdamState s(5);
  for (int it = 0; it < 100; ++it) {
    // Gradient of a quadratic with a drifting target.
    Vector g(5);
    for (int i = 0; i < 5; ++i) g[i] = 2.0 * (p[i] - std::sin(0.1 * it + i));
    adam_update(p, g, s, 0.01);
    for (int i = 0; i < 5; ++i) ref[i] = refs[i].step(ref[i], 2.0 * (ref[i] - std::sin(0.1 * it + i)), 0.01);
  }
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(p[i], ref[i], 1e-12);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.validation_fraction = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.mc_samples = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

// y = 2 x + eps on the first feature; every other feature is zero so the
// posterior factorizes over (w_0, b) and mean-field VI is exact.
struct LinearToy {
  FlowModel model{Architecture({7, 1}), NoiseSpec::fixed(0.5)};
  RegressionData fit, val;
  PriorSpec prior = he_prior(Architecture({7, 1}), 1.0);

  LinearToy() {
    Rng rng(99);
    auto make = [&](std::size_t n) {
      RegressionData d;
      d.x = Matrix::Zero(static_cast<Eigen::Index>(n), 7);
      d.x.col(0) = standard_normal(static_cast<Eigen::Index>(n), rng);
      d.x.col(0).array() -= d.x.col(0).mean();
      d.y = 2.0 * d.x.col(0) + 0.5 * standard_normal(static_cast<Eigen::Index>(n), rng);
      return d;
    };
    fit = make(200);
    val = make(50);
  }
};

TEST(ViFit, RecoversConjugateLinearRegressionPosterior) {
  LinearToy toy;
  // Exact posterior of the slope (x centred, so slope and bias decouple).
  const double sn2 = 0.25, prior_var = toy.prior.stddev[0] * toy.prior.stddev[0];
  const double prec = 1.0 / prior_var + toy.fit.x.col(0).squaredNorm() / sn2;
  const double post_mean = toy.fit.x.col(0).dot(toy.fit.y) / sn2 / prec;
  const double post_sd = 1.0 / std::sqrt(prec);

  TrainConfig cfg;
  cfg.learning_rate = 0.005;
  cfg.batch_size = 200;
  cfg.mc_samples = 8;
  cfg.max_epochs = 4000;
  cfg.patience = 4000;
  cfg.validation_mc_samples = 64;
  cfg.seed = 5;
  // Scoring on the fit set makes checkpoint selection follow the ELBO itself.
  const auto r = vi_fit(toy.fit, toy.fit, toy.prior, toy.model, cfg);
  const double mu = r.best.mu[0];
  const double sd = softplus(r.best.rho[0]);
  EXPECT_LT(std::abs(mu - 2.0), 3.0 * post_sd);
  EXPECT_NEAR(mu, post_mean, 0.5 * post_sd);
  EXPECT_NEAR(sd / post_sd, 1.0, 0.3);
}

TEST(ViFit, EpistemicUncertaintyExplainedAwayAtTheData) {
  // 1000 observations at x = 0 with known noise 0.1.
  FlowModel model{Architecture::with_hidden({50, 50}), NoiseSpec::fixed(0.1)};
  Rng rng(7);
  RegressionData data;
  data.x = Matrix::Zero(1000, 7);
  data.y = 0.1 * standard_normal(1000, rng);
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.batch_size = 200;
  cfg.max_epochs = 600;
  cfg.patience = 600;
  cfg.seed = 3;
  const auto prior = he_prior(model.arch, 0.1);
  const auto r = vi_fit(data, data, prior, model, cfg);

  StandardizationStats unit;
  unit.feature_std.fill(1.0);
  const auto dist = ParameterDistribution::from(r.best);
  const auto draws = predictive_draws(Matrix::Zero(1, 7), dist, model, unit, 2000, 1);
  const auto summary = summarize_draws(draws, 0, {});
  EXPECT_LT(summary.std_epistemic, 0.05);

  const auto prior_draws =
      predictive_draws(Matrix::Zero(1, 7), ParameterDistribution{prior.mean, prior.stddev}, model, unit, 2000, 1);
  EXPECT_LT(summary.std_epistemic, summarize_draws(prior_draws, 0, {}).std_epistemic);
}

TEST(ViFit, DeterministicGivenSeed) {
  FlowModel model{Architecture::with_hidden({8}), NoiseSpec::learned_heteroscedastic(3.0)};
  Rng rng(1);
  const auto data = testing::random_data(60, rng);
  const auto k = static_cast<Eigen::Index>(model.parameter_count());
  PriorSpec prior = PriorSpec::concat(he_prior(model.arch, 0.1), {Vector::Constant(2, -2.0), Vector::Constant(2, 0.5)});
  ASSERT_EQ(prior.size(), static_cast<std::size_t>(k));
  TrainConfig cfg;
  cfg.max_epochs = 30;
  cfg.seed = 17;
  const auto a = vi_fit(data, prior, model, cfg);
  const auto b = vi_fit(data, prior, model, cfg);
  EXPECT_EQ(a.train_loss, b.train_loss);
  EXPECT_EQ(a.validation_loss, b.validation_loss);
  EXPECT_EQ(a.best.mu, b.best.mu);
  cfg.seed = 18;
  EXPECT_NE(vi_fit(data, prior, model, cfg).train_loss, a.train_loss);
}

TEST(ViFit, EarlyStoppingKeepsBestValidationEpoch) {
  FlowModel model{Architecture::with_hidden({8}), NoiseSpec::fixed(0.5)};
  Rng rng(2);
  const auto data = testing::random_data(80, rng);
  TrainConfig cfg;
  cfg.max_epochs = 200;
  cfg.patience = 10;
  const auto r = vi_fit(data, he_prior(model.arch), model, cfg);
  ASSERT_EQ(r.train_loss.size(), r.validation_loss.size());
  ASSERT_EQ(r.validation_loss.size(), r.stopped_epoch);
  EXPECT_EQ(r.best_validation_loss(), *std::min_element(r.validation_loss.begin(), r.validation_loss.end()));
  EXPECT_LE(r.best_validation_loss(), r.validation_loss.back());
}

TEST(ViFit, DivergenceAbortsWithDiagnostics) {
  FlowModel model{Architecture::with_hidden({4}), NoiseSpec::fixed(1.0)};
  Rng rng(2);
  auto data = testing::random_data(20, rng);
  data.y[3] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.max_epochs = 5;
  try {
    vi_fit(data, data, he_prior(model.arch), model, cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
  }
}

TEST(MapFit, WeakPriorRecoversOrdinaryLeastSquares) {
  // Linear network [7, 1] on seven informative features.
  FlowModel model{Architecture({7, 1}), NoiseSpec::fixed(1.0)};
  Rng rng(13);
  auto data = testing::random_data(100, rng);
  Vector beta(7);
  beta << 1.0, -2.0, 0.5, 0.0, 3.0, -1.0, 0.25;
  data.y = data.x * beta + Vector::Constant(100, 0.7) + 0.3 * standard_normal(100, rng);

  // Normal equations with an intercept column.
  Matrix design(100, 8);
  design << data.x, Vector::Ones(100);
  const Vector ols = (design.transpose() * design).ldlt().solve(design.transpose() * data.y);

  PriorSpec prior{Vector::Zero(8), Vector::Constant(8, 1e6)};
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.batch_size = 100;
  cfg.max_epochs = 6000;
  cfg.patience = 6000;
  const auto r = map_fit(data, data, prior, model, cfg);
  for (Eigen::Index i = 0; i < 8; ++i) EXPECT_NEAR(r.best[i], ols[i], 1e-3) << "coefficient " << i;
}

TEST(MapFit, StrongPriorShrinksToZero) {
  FlowModel model{Architecture::with_hidden({5}), NoiseSpec::fixed(1.0)};
  Rng rng(14);
  auto data = testing::random_data(50, rng);
  data.y.array() += 3.0;
  // Validation targets at zero so checkpoint selection agrees with the prior.
  auto val = data;
  val.y.setZero();
  const auto k = static_cast<Eigen::Index>(model.parameter_count());
  PriorSpec prior{Vector::Zero(k), Vector::Constant(k, 1e-4)};
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 50;
  cfg.max_epochs = 3000;
  cfg.patience = 3000;
  const auto r = map_fit(data, val, prior, model, cfg);
  EXPECT_LT(r.best.cwiseAbs().maxCoeff(), 5e-3);
  EXPECT_LT(forward_mean(data.x, as_span(r.best), model.arch).cwiseAbs().maxCoeff(), 5e-3);
}

TEST(MapFit, DescendsAndRestoresBestValidation) {
  FlowModel model{Architecture::with_hidden({10, 10}), NoiseSpec::fixed(0.5)};
  Rng rng(15);
  auto fit = testing::random_data(120, rng);
  fit.y = fit.x.col(0).array().sin().matrix() + 0.2 * standard_normal(120, rng);
  auto val = testing::random_data(40, rng);
  val.y = val.x.col(0).array().sin().matrix() + 0.2 * standard_normal(40, rng);
  const auto prior = he_prior(model.arch);
  TrainConfig cfg;
  cfg.max_epochs = 300;
  cfg.patience = 20;
  cfg.seed = 4;
  const auto r = map_fit(fit, val, prior, model, cfg);

  Rng init_rng(cfg.seed);
  const Vector theta0 = initial_map_parameters(prior, model, init_rng);
  EXPECT_LE(map_objective(fit, r.best, prior, model, fit.size()), map_objective(fit, theta0, prior, model, fit.size()));

  const Vector pred = forward_mean(val.x, as_span(r.best), model.arch);
  const double val_loss = 0.5 / 0.25 * (val.y - pred).squaredNorm() / 40.0;
  EXPECT_DOUBLE_EQ(val_loss, *std::min_element(r.validation_loss.begin(), r.validation_loss.end()));
}

TEST(MapFit, RequiresFixedNoise) {
  FlowModel model{Architecture::with_hidden({3}), NoiseSpec::learned_heteroscedastic()};
  Rng rng(1);
  const auto data = testing::random_data(20, rng);
  const auto k = static_cast<Eigen::Index>(model.parameter_count());
  EXPECT_THROW(map_fit(data, PriorSpec{Vector::Zero(k), Vector::Ones(k)}, model, TrainConfig{}), ConfigError);
}

}  // namespace
}  // namespace vfm
