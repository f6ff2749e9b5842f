#pragma once

// Well datasets, CSV I/O, standardization, chronological splits and a
// synthetic production-well generator.

#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vfm/errors.hpp"
#include "vfm/model.hpp"
#include "vfm/random.hpp"

namespace vfm {

enum class MeterType { TestSeparator, MPFM };

inline std::string_view to_string(MeterType m) { return m == MeterType::MPFM ? "MPFM" : "TestSeparator"; }

inline MeterType meter_from_string(std::string_view s) {
  if (s == "MPFM") return MeterType::MPFM;
  if (s == "TestSeparator") return MeterType::TestSeparator;
  throw ConfigError("unknown meter type '" + std::string(s) + "' (expected MPFM|TestSeparator)");
}

// Seconds since 1970-01-01T00:00:00Z.
using Timestamp = std::int64_t;
inline constexpr Timestamp kSecondsPerDay = 86400;

inline std::string format_timestamp(Timestamp t) {
  using namespace std::chrono;
  const auto day = floor<days>(sys_seconds{seconds{t}});
  const year_month_day ymd{day};
  const auto tod = t - duration_cast<seconds>(day.time_since_epoch()).count();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02lld:%02lld:%02lldZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<long long>(tod / 3600), static_cast<long long>(tod / 60 % 60),
                static_cast<long long>(tod % 60));
  return buf;
}

inline Timestamp parse_timestamp(std::string_view s) {
  int y = 0;
  unsigned mo = 0, d = 0, h = 0, mi = 0, se = 0;
  char tail = 0;
  const std::string str(s);
  if (std::sscanf(str.c_str(), "%4d-%2u-%2uT%2u:%2u:%2u%c", &y, &mo, &d, &h, &mi, &se, &tail) != 7 || tail != 'Z' ||
      str.size() != 20) {
    throw ConfigError("timestamp '" + str + "' is not ISO-8601 UTC (YYYY-MM-DDTHH:MM:SSZ)");
  }
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{mo}, day{d}};
  if (!ymd.ok() || h > 23 || mi > 59 || se > 59) throw ConfigError("invalid timestamp '" + str + "'");
  return duration_cast<seconds>(sys_days{ymd}.time_since_epoch()).count() + h * 3600 + mi * 60 + se;
}

struct WellRecord {
  Timestamp timestamp = 0;
  FlowFeatures x;
  double y = 0.0;  // total volumetric flow rate, Sm3/h
  MeterType meter = MeterType::MPFM;
};

struct WellDataset {
  std::vector<WellRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  void validate() const {
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (i > 0 && r.timestamp <= records[i - 1].timestamp) {
        throw ConfigError("timestamps must be strictly increasing (record " + std::to_string(i) + ")");
      }
      if (!std::isfinite(r.y)) throw NumericalError("non-finite flow rate at record " + std::to_string(i));
      detail::require_config(r.y > 0.0, "flow rate must be > 0 (record " + std::to_string(i) + ")");
      r.x.validate();
    }
  }

  double mean_flow() const {
    detail::require_config(!records.empty(), "mean flow of an empty dataset");
    double s = 0.0;
    for (const auto& r : records) s += r.y;
    return s / static_cast<double>(records.size());
  }

  WellDataset select(const std::vector<std::size_t>& idx) const {
    WellDataset out;
    out.records.reserve(idx.size());
    for (std::size_t i : idx) out.records.push_back(records.at(i));
    return out;
  }

  WellDataset slice(std::size_t begin, std::size_t end) const {
    WellDataset out;
    out.records.assign(records.begin() + static_cast<std::ptrdiff_t>(begin),
                       records.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
  }
};

inline constexpr std::string_view kDatasetHeader = "timestamp,u,p1,p2,T1,T2,eta_oil,eta_gas,y,meter";

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ConfigError("cannot parse number '" + std::string(s) + "' at " + where);
  }
  return v;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline void write_dataset_csv(std::ostream& os, const WellDataset& d) {
  os << kDatasetHeader << '\n';
  for (const auto& r : d.records) {
    os << format_timestamp(r.timestamp);
    for (double v : r.x.to_array()) os << ',' << format_double(v);
    os << ',' << format_double(r.y) << ',' << to_string(r.meter) << '\n';
  }
}

inline WellDataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("dataset file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kDatasetHeader) throw ConfigError("dataset header must be '" + std::string(kDatasetHeader) + "'");
  WellDataset d;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = "line " + std::to_string(lineno);
    if (f.size() != 10) throw ConfigError("expected 10 columns at " + where);
    WellRecord r;
    r.timestamp = parse_timestamp(f[0]);
    std::array<double, kFeatureCount> v{};
    for (std::size_t j = 0; j < kFeatureCount; ++j) v[j] = parse_double(f[j + 1], where);
    r.x = FlowFeatures::from_array(v);
    r.y = parse_double(f[8], where);
    r.meter = meter_from_string(f[9]);
    d.records.push_back(r);
  }
  d.validate();
  return d;
}

inline WellDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset '" + path + "'");
  try {
    return read_dataset_csv(in);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void save_dataset(const std::string& path, const WellDataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write dataset '" + path + "'");
  write_dataset_csv(out, d);
}

// Affine maps between physical units and zero-mean / unit-variance units,
// fitted on a training split.
struct StandardizationStats {
  std::array<double, kFeatureCount> feature_mean{};
  std::array<double, kFeatureCount> feature_std{};
  double target_mean = 0.0;
  double target_std = 1.0;

  static StandardizationStats fit(const WellDataset& train) {
    detail::require_config(train.size() >= 2, "standardization needs at least two records");
    StandardizationStats s;
    const auto n = static_cast<double>(train.size());
    auto moments = [&](auto get, double& mean, double& sd, std::string_view name) {
      double sum = 0.0;
      for (const auto& r : train.records) sum += get(r);
      mean = sum / n;
      double ss = 0.0;
      for (const auto& r : train.records) ss += (get(r) - mean) * (get(r) - mean);
      sd = std::sqrt(ss / n);
      if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
        throw ConfigError("feature '" + std::string(name) + "' has zero variance in the training data");
      }
    };
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
      moments([j](const WellRecord& r) { return r.x.to_array()[j]; }, s.feature_mean[j], s.feature_std[j],
              kFeatureNames[j]);
    }
    moments([](const WellRecord& r) { return r.y; }, s.target_mean, s.target_std, "y");
    return s;
  }

  void validate() const {
    for (double v : feature_std) detail::require_config(v > 0.0, "standardization std must be > 0");
    detail::require_config(target_std > 0.0, "target std must be > 0");
  }

  std::array<double, kFeatureCount> standardize(const FlowFeatures& x) const {
    auto v = x.to_array();
    for (std::size_t j = 0; j < kFeatureCount; ++j) v[j] = (v[j] - feature_mean[j]) / feature_std[j];
    return v;
  }

  FlowFeatures destandardize(std::span<const double> v) const {
    detail::require_dims(v.size() == kFeatureCount, "standardized feature vector needs 7 values");
    std::array<double, kFeatureCount> out{};
    for (std::size_t j = 0; j < kFeatureCount; ++j) out[j] = v[j] * feature_std[j] + feature_mean[j];
    return FlowFeatures::from_array(out);
  }

  double standardize_target(double y) const { return (y - target_mean) / target_std; }
  double destandardize_target(double z) const { return z * target_std + target_mean; }

  RegressionData standardize(const WellDataset& d) const {
    RegressionData out;
    out.x.resize(static_cast<Eigen::Index>(d.size()), static_cast<Eigen::Index>(kFeatureCount));
    out.y.resize(static_cast<Eigen::Index>(d.size()));
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto v = standardize(d.records[i].x);
      for (std::size_t j = 0; j < kFeatureCount; ++j) {
        out.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
      }
      out.y[static_cast<Eigen::Index>(i)] = standardize_target(d.records[i].y);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Chronological splits. Windows are measured in days on the timestamps.

inline std::pair<WellDataset, WellDataset> split_by_window(const WellDataset& d, Timestamp begin, Timestamp end) {
  WellDataset train, test;
  for (const auto& r : d.records) {
    (r.timestamp >= begin && r.timestamp < end ? test : train).records.push_back(r);
  }
  detail::require_config(!train.empty() && !test.empty(), "split leaves an empty partition");
  return {std::move(train), std::move(test)};
}

inline Timestamp window_seconds(double window_days) {
  detail::require_config(window_days > 0.0, "split window must be positive");
  return static_cast<Timestamp>(std::llround(window_days * static_cast<double>(kSecondsPerDay)));
}

// Test = the contiguous window centred on the middle of the time span.
inline std::pair<WellDataset, WellDataset> split_historical(const WellDataset& d, double window_days = 90.0) {
  const Timestamp w = window_seconds(window_days);
  detail::require_config(d.size() >= 2, "dataset too short to split");
  const Timestamp t0 = d.records.front().timestamp;
  const Timestamp span = d.records.back().timestamp - t0;
  detail::require_config(span > 3 * w, "dataset spans less than three split windows");
  const Timestamp begin = t0 + span / 2 - w / 2;
  return split_by_window(d, begin, begin + w);
}

// Test = the final window (records later than t_last - window).
inline std::pair<WellDataset, WellDataset> split_future(const WellDataset& d, double window_days = 90.0) {
  const Timestamp w = window_seconds(window_days);
  detail::require_config(d.size() >= 2, "dataset too short to split");
  const Timestamp t_last = d.records.back().timestamp;
  detail::require_config(t_last - d.records.front().timestamp > 3 * w, "dataset spans less than three split windows");
  return split_by_window(d, t_last - w + 1, t_last + 1);
}

// Uniform random (fit, validation) split without replacement; order kept.
inline std::pair<WellDataset, WellDataset> validation_split(const WellDataset& train, double fraction,
                                                            std::uint64_t seed) {
  auto [fit, val] = random_holdout(train.size(), fraction, seed);
  return {train.select(fit), train.select(val)};
}

// ---------------------------------------------------------------------------
// Synthetic wells.
//
// Ground truth z_t = C_t * u_t^kappa * sqrt(p1_t - p2_t) * h(eta_t), where
//   h(eta) = sqrt(rho_ref / rho_mix), 1/rho_mix = eta_o/rho_o + eta_g/rho_g + eta_w/rho_w
// with rho_o = 800, rho_g = 80, rho_w = 1000, rho_ref = 1000 kg/m3, and
// C_t = C (1 + wear_rate * years since start). Measurements are
// y_t = z_t + eps_t, eps_t ~ N(0, (sqrt(pi/2) E_r z_t)^2), so that
// E|y - z| / z = E_r.

struct SyntheticWellConfig {
  double choke_coefficient = 12.0;  // C
  double choke_exponent = 1.0;      // kappa
  double choke_wear_per_year = 0.0;  // relative drift of C (unmeasured, concept drift)

  std::size_t records = 1500;
  double cadence_hours = 24.0;
  Timestamp start = 1514764800;  // 2018-01-01T00:00:00Z

  double p1_initial = 120.0;       // bar
  double pressure_drift = 0.0;     // bar per day decline of the upstream pressure
  double p1_jitter = 3.0;          // bar
  double p2_mean = 30.0;
  double p2_jitter = 2.0;
  double T1_mean = 360.0;          // K
  double temperature_jitter = 1.0;
  double joule_thomson = 0.05;     // K per bar of choke pressure drop

  // Operator policy: hold the choke, open it stepwise as pressure falls,
  // and occasionally move to a new setpoint around the policy opening.
  double choke_initial = 0.45;
  double choke_reopen_drop = 10.0;   // bar of p1 decline per opening step
  double choke_reopen_step = 0.05;
  double choke_change_probability = 0.08;  // per record
  double choke_change_std = 0.10;
  double choke_min = 0.1;
  double choke_max = 1.0;

  double eta_oil_initial = 0.60;
  double eta_gas_initial = 0.25;
  double eta_oil_drift_per_year = 0.0;  // water breakthrough when negative
  double eta_gas_drift_per_year = 0.0;
  double fraction_jitter = 0.02;

  MeterType meter = MeterType::MPFM;
  double relative_error = 0.10;  // E_r

  static SyntheticWellConfig mpfm() { return {}; }

  // Declining production: falling pressure, gradual choke opening, choke
  // wear and water breakthrough.
  static SyntheticWellConfig drifting() {
    SyntheticWellConfig c;
    c.records = 1000;
    c.pressure_drift = 0.05;
    c.choke_reopen_step = 0.03;
    c.choke_wear_per_year = 0.1;
    c.eta_oil_drift_per_year = -0.05;
    return c;
  }

  static SyntheticWellConfig test_separator() {
    SyntheticWellConfig c;
    c.meter = MeterType::TestSeparator;
    c.relative_error = 0.025;
    c.cadence_hours = 24.0 * 7.0;
    c.records = 250;
    return c;
  }

  void validate() const {
    detail::require_config(choke_coefficient > 0.0, "choke coefficient C must be > 0");
    detail::require_config(relative_error >= 0.0 && std::isfinite(relative_error), "E_r must be finite and >= 0");
    detail::require_config(std::isfinite(pressure_drift) && std::isfinite(choke_wear_per_year) &&
                               std::isfinite(eta_oil_drift_per_year) && std::isfinite(eta_gas_drift_per_year),
                           "drift rates must be finite");
    detail::require_config(cadence_hours > 0.0, "cadence must be > 0");
    detail::require_config(records >= 1, "record count must be >= 1");
    detail::require_config(choke_min > 0.0 && choke_min <= choke_max && choke_max <= 1.0, "invalid choke bounds");
    detail::require_config(p2_mean > 0.0, "downstream pressure must be > 0");
    detail::require_config(eta_oil_initial >= 0.0 && eta_gas_initial >= 0.0 && eta_oil_initial + eta_gas_initial <= 1.0,
                           "invalid initial mass fractions");
  }
};

inline double mixture_density_factor(double eta_oil, double eta_gas) {
  constexpr double rho_oil = 800.0, rho_gas = 80.0, rho_water = 1000.0, rho_ref = 1000.0;
  const double eta_water = 1.0 - eta_oil - eta_gas;
  const double inv_rho = eta_oil / rho_oil + eta_gas / rho_gas + eta_water / rho_water;
  return std::sqrt(rho_ref * inv_rho);
}

inline double choke_flow(const SyntheticWellConfig& c, const FlowFeatures& x, double years) {
  const double coeff = c.choke_coefficient * (1.0 + c.choke_wear_per_year * years);
  return coeff * std::pow(x.u, c.choke_exponent) * std::sqrt(x.p1 - x.p2) * mixture_density_factor(x.eta_oil, x.eta_gas);
}

struct SyntheticWell {
  WellDataset data;
  std::vector<double> true_flow;  // z_t, aligned with data.records
  std::optional<std::string> warning;
};

inline SyntheticWell generate_synthetic_well(const SyntheticWellConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto clamp01 = [](double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); };

  SyntheticWell out;
  out.data.records.reserve(c.records);
  out.true_flow.reserve(c.records);
  const double step_seconds = c.cadence_hours * 3600.0;
  const double noise_scale = std::sqrt(std::numbers::pi / 2.0) * c.relative_error;

  double u_policy = c.choke_initial;
  double u_offset = 0.0;
  double p1_at_last_opening = c.p1_initial;
  for (std::size_t t = 0; t < c.records; ++t) {
    const double elapsed = step_seconds * static_cast<double>(t);
    const double days = elapsed / static_cast<double>(kSecondsPerDay);
    const double years = days / 365.25;
    const double p1_trend = c.p1_initial - c.pressure_drift * days;

    if (p1_at_last_opening - p1_trend >= c.choke_reopen_drop && c.choke_reopen_drop > 0.0) {
      u_policy = clamp01(u_policy + c.choke_reopen_step, c.choke_min, c.choke_max);
      p1_at_last_opening = p1_trend;
    }
    if (c.choke_change_probability > 0.0 && unif(rng) < c.choke_change_probability) {
      u_offset = c.choke_change_std * normal(rng);
    }
    const double u = clamp01(u_policy + u_offset, c.choke_min, c.choke_max);

    FlowFeatures x;
    x.u = u;
    x.p1 = p1_trend + c.p1_jitter * normal(rng);
    x.p2 = c.p2_mean + c.p2_jitter * normal(rng);
    if (x.p2 <= 0.0 || x.p1 <= x.p2) {
      out.warning = "upstream pressure fell to the downstream pressure at record " + std::to_string(t) +
                    "; series truncated";
      break;
    }
    x.T1 = c.T1_mean + c.temperature_jitter * normal(rng);
    x.T2 = x.T1 - c.joule_thomson * (x.p1 - x.p2) + c.temperature_jitter * normal(rng);
    const double oil = c.eta_oil_initial + c.eta_oil_drift_per_year * years + c.fraction_jitter * normal(rng);
    const double gas = c.eta_gas_initial + c.eta_gas_drift_per_year * years + c.fraction_jitter * normal(rng);
    x.eta_oil = clamp01(oil, 0.0, 1.0);
    x.eta_gas = clamp01(gas, 0.0, 1.0 - x.eta_oil);

    const double z = choke_flow(c, x, years);
    double y = z;
    if (noise_scale > 0.0) {
      do {
        y = z + noise_scale * z * normal(rng);
      } while (y <= 0.0);
    }
    WellRecord r;
    r.timestamp = c.start + static_cast<Timestamp>(std::llround(elapsed));
    r.x = x;
    r.y = y;
    r.meter = c.meter;
    out.data.records.push_back(r);
    out.true_flow.push_back(z);
  }
  return out;
}

}  // namespace vfm
