#pragma once

// Error metrics, cross-well percentiles, cumulative performance, calibration
// and coverage of predictive intervals, and relative errors for the
// training-set-size study.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vfm/data.hpp"
#include "vfm/errors.hpp"
#include "vfm/model.hpp"
#include "vfm/stats.hpp"

namespace vfm {

namespace detail {

inline void require_same_length(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("true/predicted vectors differ in length (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
  }
  require_config(!a.empty(), "metric of an empty vector");
}

inline std::vector<double> abs_percentage_errors(std::span<const double> y_true, std::span<const double> y_pred) {
  require_same_length(y_true, y_pred);
  std::vector<double> out(y_true.size());
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] == 0.0) throw ConfigError("true value is zero at index " + std::to_string(i));
    out[i] = 100.0 * std::abs(y_true[i] - y_pred[i]) / std::abs(y_true[i]);
  }
  return out;
}

}  // namespace detail

// Mean absolute percentage error, in percent.
inline double mape(std::span<const double> y_true, std::span<const double> y_pred) {
  return mean_of(detail::abs_percentage_errors(y_true, y_pred));
}

inline double rmse(std::span<const double> y_true, std::span<const double> y_pred) {
  detail::require_same_length(y_true, y_pred);
  double ss = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) ss += (y_true[i] - y_pred[i]) * (y_true[i] - y_pred[i]);
  return std::sqrt(ss / static_cast<double>(y_true.size()));
}

inline const std::vector<double>& default_percentile_levels() {
  static const std::vector<double> levels{10, 25, 50, 75, 90};
  return levels;
}

// Percentiles (levels in percent) by linear interpolation between closest ranks.
inline std::vector<double> percentiles(std::span<const double> values,
                                       std::span<const double> levels = default_percentile_levels()) {
  detail::require_config(!values.empty(), "percentiles of an empty vector");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out;
  out.reserve(levels.size());
  for (double p : levels) out.push_back(quantile_sorted(sorted, p / 100.0));
  return out;
}

// Fraction of points whose absolute percentage deviation is <= each threshold (percent).
inline std::vector<double> cumulative_performance(std::span<const double> y_true, std::span<const double> y_pred,
                                                  std::span<const double> thresholds) {
  detail::require_config(std::is_sorted(thresholds.begin(), thresholds.end()), "thresholds must be sorted ascending");
  auto dev = detail::abs_percentage_errors(y_true, y_pred);
  std::sort(dev.begin(), dev.end());
  std::vector<double> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    const auto within = std::upper_bound(dev.begin(), dev.end(), t) - dev.begin();
    out.push_back(static_cast<double>(within) / static_cast<double>(dev.size()));
  }
  return out;
}

inline std::vector<double> default_deviation_thresholds() {
  std::vector<double> t;
  for (int k = 0; k <= 50; ++k) t.push_back(static_cast<double>(k));
  return t;
}

// Nominal levels 0.05, 0.10, ..., 0.95.
inline std::vector<double> calibration_levels() {
  std::vector<double> out;
  for (int k = 1; k <= 19; ++k) out.push_back(0.05 * k);
  return out;
}

// Predictive interval of test point i at nominal level c.
using IntervalFn = std::function<Interval(std::size_t point, double level)>;

// Intervals from per-point Monte-Carlo draws (one column per test point).
class SampleIntervals {
 public:
  explicit SampleIntervals(const Matrix& draws) : sorted_(static_cast<std::size_t>(draws.cols())) {
    for (Eigen::Index j = 0; j < draws.cols(); ++j) {
      auto& col = sorted_[static_cast<std::size_t>(j)];
      col.assign(draws.col(j).data(), draws.col(j).data() + draws.rows());
      std::sort(col.begin(), col.end());
    }
  }

  Interval operator()(std::size_t point, double level) const { return centered_interval(sorted_.at(point), level); }
  std::size_t points() const { return sorted_.size(); }

 private:
  std::vector<std::vector<double>> sorted_;
};

// Fraction of measurements inside the centred predictive interval, per level.
inline std::vector<double> calibration_curve(std::span<const double> y_true, const IntervalFn& interval,
                                             std::span<const double> levels) {
  detail::require_config(!y_true.empty(), "calibration needs at least one test point");
  std::vector<double> out;
  out.reserve(levels.size());
  for (double c : levels) {
    std::size_t inside = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) inside += interval(i, c).contains(y_true[i]) ? 1 : 0;
    out.push_back(static_cast<double>(inside) / static_cast<double>(y_true.size()));
  }
  return out;
}

inline double coverage_probability(std::span<const double> y_true, const IntervalFn& interval, double level = 0.95) {
  const double levels[] = {level};
  return calibration_curve(y_true, interval, levels).front();
}

// Point-wise P25 / P50 / P75 of several wells' calibration curves.
struct CalibrationBands {
  std::vector<double> levels;
  std::vector<double> p25;
  std::vector<double> median;
  std::vector<double> p75;
};

inline CalibrationBands calibration_bands(const std::vector<std::vector<double>>& curves, std::span<const double> levels) {
  detail::require_config(!curves.empty(), "calibration bands need at least one curve");
  CalibrationBands b;
  b.levels.assign(levels.begin(), levels.end());
  const double q[] = {25.0, 50.0, 75.0};
  for (std::size_t k = 0; k < levels.size(); ++k) {
    std::vector<double> at;
    for (const auto& c : curves) {
      detail::require_dims(c.size() == levels.size(), "calibration curve length does not match levels");
      at.push_back(c[k]);
    }
    const auto p = percentiles(at, q);
    b.p25.push_back(p[0]);
    b.median.push_back(p[1]);
    b.p75.push_back(p[2]);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Training-set-size study.

inline const std::vector<int>& size_study_sizes() {
  static const std::vector<int> sizes{150, 200, 300, 400, 500, 600, 700, 800, 900, 1000, 1100};
  return sizes;
}

// R_k = E_k / E_150.
inline std::map<int, double> relative_mape_series(const std::map<int, double>& errors) {
  const auto base = errors.find(150);
  detail::require_config(base != errors.end(), "relative MAPE needs the k = 150 baseline");
  detail::require_config(base->second > 0.0, "baseline MAPE must be > 0");
  std::map<int, double> out;
  for (const auto& [k, e] : errors) out[k] = k == 150 ? 1.0 : e / base->second;
  return out;
}

struct SizeStudySummary {
  std::vector<int> sizes;
  std::vector<double> p25;
  std::vector<double> median;
  std::vector<double> p75;
  std::size_t trials = 0;
};

// Median and 50% band of R_k over trials.
inline SizeStudySummary summarize_size_study(const std::vector<std::map<int, double>>& relative) {
  detail::require_config(!relative.empty(), "size study has no trials");
  SizeStudySummary s;
  s.trials = relative.size();
  for (const auto& [k, v] : relative.front()) {
    std::vector<double> at;
    for (const auto& r : relative) {
      const auto it = r.find(k);
      detail::require_config(it != r.end(), "trial is missing training size " + std::to_string(k));
      at.push_back(it->second);
    }
    const double q[] = {25.0, 50.0, 75.0};
    const auto p = percentiles(at, q);
    s.sizes.push_back(k);
    s.p25.push_back(p[0]);
    s.median.push_back(p[1]);
    s.p75.push_back(p[2]);
  }
  return s;
}

// Spearman rank correlation (average ranks for ties).
inline double spearman(std::span<const double> a, std::span<const double> b) {
  detail::require_same_length(a, b);
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double ma = mean_of(ra), mb = mean_of(rb);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Report over a set of wells.

struct WellEvaluation {
  std::string well;
  MeterType meter = MeterType::MPFM;
  std::vector<double> y_true;
  std::vector<double> y_pred;
  double mape = 0.0;
  double rmse = 0.0;
  // Present for models with a predictive distribution.
  std::vector<double> calibration;  // at calibration_levels()
  double coverage95 = std::numeric_limits<double>::quiet_NaN();
};

inline WellEvaluation evaluate_well(std::string name, MeterType meter, std::vector<double> y_true,
                                    std::vector<double> y_pred, const IntervalFn* interval = nullptr) {
  WellEvaluation w;
  w.well = std::move(name);
  w.meter = meter;
  w.mape = mape(y_true, y_pred);
  w.rmse = rmse(y_true, y_pred);
  if (interval != nullptr) {
    w.calibration = calibration_curve(y_true, *interval, calibration_levels());
    w.coverage95 = coverage_probability(y_true, *interval, 0.95);
  }
  w.y_true = std::move(y_true);
  w.y_pred = std::move(y_pred);
  return w;
}

struct EvaluationReport {
  std::string group;
  std::vector<WellEvaluation> wells;
  std::vector<double> percentile_levels;
  std::vector<double> mape_percentiles;
  std::vector<double> rmse_percentiles;
  std::vector<double> thresholds;
  std::vector<double> cumulative;  // pooled over every test point
  bool has_calibration = false;
  CalibrationBands calibration;
  double coverage95 = std::numeric_limits<double>::quiet_NaN();  // median over wells

  void check_invariants() const {
    auto monotone = [](const std::vector<double>& v, const char* what) {
      for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] < v[i - 1]) throw NumericalError(std::string(what) + " is not monotone");
      }
    };
    monotone(mape_percentiles, "MAPE percentiles");
    monotone(rmse_percentiles, "RMSE percentiles");
    monotone(cumulative, "cumulative performance curve");
    for (double f : cumulative) {
      if (f < 0.0 || f > 1.0) throw NumericalError("cumulative performance outside [0, 1]");
    }
    if (has_calibration) {
      monotone(calibration.p25, "calibration P25 band");
      monotone(calibration.median, "calibration curve");
      monotone(calibration.p75, "calibration P75 band");
    }
  }
};

inline EvaluationReport build_report(std::string group, std::vector<WellEvaluation> wells,
                                     std::vector<double> thresholds = default_deviation_thresholds()) {
  detail::require_config(!wells.empty(), "report needs at least one well");
  std::sort(wells.begin(), wells.end(), [](const auto& a, const auto& b) { return a.well < b.well; });
  EvaluationReport r;
  r.group = std::move(group);
  r.percentile_levels = default_percentile_levels();
  std::vector<double> mapes, rmses, all_true, all_pred;
  std::vector<std::vector<double>> curves;
  std::vector<double> coverages;
  for (const auto& w : wells) {
    mapes.push_back(w.mape);
    rmses.push_back(w.rmse);
    all_true.insert(all_true.end(), w.y_true.begin(), w.y_true.end());
    all_pred.insert(all_pred.end(), w.y_pred.begin(), w.y_pred.end());
    if (!w.calibration.empty()) {
      curves.push_back(w.calibration);
      coverages.push_back(w.coverage95);
    }
  }
  r.mape_percentiles = percentiles(mapes);
  r.rmse_percentiles = percentiles(rmses);
  r.thresholds = std::move(thresholds);
  r.cumulative = cumulative_performance(all_true, all_pred, r.thresholds);
  if (!curves.empty()) {
    r.has_calibration = true;
    r.calibration = calibration_bands(curves, calibration_levels());
    const double mid[] = {50.0};
    r.coverage95 = percentiles(coverages, mid).front();
  }
  r.wells = std::move(wells);
  r.check_invariants();
  return r;
}

}  // namespace vfm
