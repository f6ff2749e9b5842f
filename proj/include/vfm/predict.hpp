#pragma once

// Monte-Carlo predictive posterior: theta_s ~ q, z_s = f(x, phi_s),
// s_s = g(z_s, psi_s), y_s ~ N(z_s, s_s^2), reported in physical units.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <vector>

#include "vfm/data.hpp"
#include "vfm/inference.hpp"
#include "vfm/model.hpp"
#include "vfm/random.hpp"
#include "vfm/stats.hpp"

namespace vfm {

inline constexpr std::array<double, 5> kReportedQuantiles = {0.05, 0.25, 0.50, 0.75, 0.95};

struct PredictConfig {
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
  std::vector<double> levels = {0.5, 0.9, 0.95};
};

struct PredictiveSummary {
  double mean = 0.0;
  double std_epistemic = 0.0;  // std of f over posterior draws
  double std_aleatoric = 0.0;  // RMS of the sampled noise std
  double std_total = 0.0;      // std of the y draws
  std::array<double, 5> quantiles{};  // at kReportedQuantiles
  std::vector<double> levels;
  std::vector<Interval> intervals;  // centred, aligned with levels
  std::size_t samples = 0;
};

// Parameter distribution to sample from: N(mean, stddev^2) elementwise. A
// zero stddev gives a point mass (MAP estimate).
struct ParameterDistribution {
  Vector mean;
  Vector stddev;

  static ParameterDistribution from(const VariationalParams& q) {
    q.validate();
    return {q.mu, q.sigma()};
  }
  static ParameterDistribution point(const Vector& theta) {
    if (!theta.allFinite()) throw NumericalError("non-finite parameter vector");
    return {theta, Vector::Zero(theta.size())};
  }
};

// Draws in physical units; row s holds sample s for every input column.
struct PredictiveDraws {
  Matrix z;      // S x N network outputs
  Matrix noise;  // S x N noise std
  Matrix y;      // S x N measurements
};

inline PredictiveDraws predictive_draws(const Matrix& x_std, const ParameterDistribution& dist, const FlowModel& model,
                                        const StandardizationStats& stats, std::size_t samples, std::uint64_t seed) {
  detail::require_config(samples >= 2, "predictive sampling needs at least two samples");
  detail::require_dims(static_cast<std::size_t>(dist.mean.size()) == model.parameter_count() &&
                           dist.stddev.size() == dist.mean.size(),
                       "parameter distribution does not match model");
  const auto s_count = static_cast<Eigen::Index>(samples);
  const Eigen::Index n = x_std.rows();
  PredictiveDraws d{Matrix(s_count, n), Matrix(s_count, n), Matrix(s_count, n)};
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index s = 0; s < s_count; ++s) {
    const Vector theta = dist.mean + dist.stddev.cwiseProduct(standard_normal(dist.mean.size(), rng));
    const auto th = as_span(theta);
    const Vector z = forward_mean(x_std, model.phi(th), model.arch);
    const auto psi = model.psi(th);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sd = noise_std(z[i], psi, model.noise);
      const double y = z[i] + sd * normal(rng);
      d.z(s, i) = stats.destandardize_target(z[i]);
      d.noise(s, i) = sd * stats.target_std;
      d.y(s, i) = stats.destandardize_target(y);
    }
  }
  if (!d.y.allFinite()) throw NumericalError("predictive draws are not finite");
  return d;
}

inline PredictiveSummary summarize_draws(const PredictiveDraws& d, Eigen::Index column, const std::vector<double>& levels) {
  PredictiveSummary out;
  const auto S = static_cast<std::size_t>(d.y.rows());
  std::vector<double> z(S), y(S);
  double noise_sq = 0.0;
  for (std::size_t s = 0; s < S; ++s) {
    const auto r = static_cast<Eigen::Index>(s);
    z[s] = d.z(r, column);
    y[s] = d.y(r, column);
    noise_sq += d.noise(r, column) * d.noise(r, column);
  }
  out.samples = S;
  out.mean = mean_of(y);
  out.std_epistemic = stddev_of(z);
  out.std_aleatoric = std::sqrt(noise_sq / static_cast<double>(S));
  out.std_total = stddev_of(y);
  std::sort(y.begin(), y.end());
  for (std::size_t k = 0; k < kReportedQuantiles.size(); ++k) out.quantiles[k] = quantile_sorted(y, kReportedQuantiles[k]);
  out.levels = levels;
  for (double c : levels) out.intervals.push_back(centered_interval(y, c));
  return out;
}

inline PredictiveSummary posterior_predictive(const FlowFeatures& x, const VariationalParams& q, const FlowModel& model,
                                              const StandardizationStats& stats, const PredictConfig& cfg = {}) {
  q.validate();
  detail::require_dims(q.size() == model.parameter_count(), "posterior does not match model");
  const auto v = stats.standardize(x);
  Matrix row(1, static_cast<Eigen::Index>(kFeatureCount));
  for (std::size_t j = 0; j < kFeatureCount; ++j) row(0, static_cast<Eigen::Index>(j)) = v[j];
  return summarize_draws(predictive_draws(row, ParameterDistribution::from(q), model, stats, cfg.samples, cfg.seed), 0,
                         cfg.levels);
}

// De-standardized network output f(x, phi).
inline double map_predict(const FlowFeatures& x, const Vector& theta, const FlowModel& model,
                          const StandardizationStats& stats) {
  const auto v = stats.standardize(x);
  return stats.destandardize_target(forward_mean(v, model.phi(as_span(theta)), model.arch));
}

inline constexpr std::string_view kPredictionHeader =
    "u,p1,p2,T1,T2,eta_oil,eta_gas,mean,std_epistemic,std_aleatoric,std_total,q05,q25,q50,q75,q95";

inline void write_prediction_row(std::ostream& os, const FlowFeatures& x, const PredictiveSummary& s) {
  bool first = true;
  for (double v : x.to_array()) {
    os << (first ? "" : ",") << format_double(v);
    first = false;
  }
  for (double v : {s.mean, s.std_epistemic, s.std_aleatoric, s.std_total}) os << ',' << format_double(v);
  for (double v : s.quantiles) os << ',' << format_double(v);
  os << '\n';
}

}  // namespace vfm
