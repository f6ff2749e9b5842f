#pragma once

// JSON serialization of checkpoints and evaluation reports. Doubles are
// written in shortest round-trip form, so a save/load cycle is bit-exact.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vfm/data.hpp"
#include "vfm/evaluation.hpp"
#include "vfm/inference.hpp"
#include "vfm/model.hpp"
#include "vfm/predict.hpp"

namespace vfm {

using Json = nlohmann::ordered_json;

inline Json to_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Vector vector_from_json(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// NaN has no JSON spelling; write null.
inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

enum class Method { MAP, VI };

inline std::string_view to_string(Method m) { return m == Method::MAP ? "map" : "vi"; }

inline Method method_from_string(std::string_view s) {
  if (s == "map") return Method::MAP;
  if (s == "vi") return Method::VI;
  throw ConfigError("unknown method '" + std::string(s) + "' (expected map|vi)");
}

// Everything needed to predict with a trained model.
struct Checkpoint {
  Method method = Method::MAP;
  FlowModel model{Architecture::standard(), NoiseSpec{}};
  PriorSpec prior;
  Vector theta;         // MAP estimate
  VariationalParams q;  // VI posterior
  StandardizationStats stats;
  std::uint64_t seed = 0;
  std::string well;
  MeterType meter = MeterType::MPFM;
  std::string test_file;  // relative to the checkpoint's directory
  std::vector<double> train_loss;
  std::vector<double> validation_loss;
  std::size_t best_epoch = 0;
  std::size_t stopped_epoch = 0;

  ParameterDistribution distribution() const {
    return method == Method::MAP ? ParameterDistribution::point(theta) : ParameterDistribution::from(q);
  }
};

inline Json to_json(const StandardizationStats& s) {
  return Json{{"feature_mean", s.feature_mean},
              {"feature_std", s.feature_std},
              {"target_mean", s.target_mean},
              {"target_std", s.target_std}};
}

inline StandardizationStats stats_from_json(const Json& j) {
  StandardizationStats s;
  s.feature_mean = j.at("feature_mean").get<std::array<double, kFeatureCount>>();
  s.feature_std = j.at("feature_std").get<std::array<double, kFeatureCount>>();
  s.target_mean = j.at("target_mean").get<double>();
  s.target_std = j.at("target_std").get<double>();
  s.validate();
  return s;
}

inline Json to_json(const Checkpoint& c) {
  Json j;
  j["format"] = "vfm-checkpoint/1";
  j["method"] = to_string(c.method);
  j["well"] = c.well;
  j["meter"] = to_string(c.meter);
  j["seed"] = c.seed;
  j["test_file"] = c.test_file;
  j["architecture"] = c.model.arch.widths();
  j["noise"] = Json{{"kind", to_string(c.model.noise.kind)},
                    {"sigma_n", c.model.noise.sigma_n},
                    {"flow_offset", c.model.noise.flow_offset}};
  j["standardization"] = to_json(c.stats);
  j["prior"] = Json{{"mean", to_json(c.prior.mean)}, {"std", to_json(c.prior.stddev)}};
  if (c.method == Method::MAP) {
    j["theta"] = to_json(c.theta);
  } else {
    j["mu"] = to_json(c.q.mu);
    j["rho"] = to_json(c.q.rho);
  }
  j["training"] = Json{{"best_epoch", c.best_epoch},
                       {"stopped_epoch", c.stopped_epoch},
                       {"train_loss", c.train_loss},
                       {"validation_loss", c.validation_loss}};
  return j;
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  try {
    if (j.at("format") != "vfm-checkpoint/1") throw ConfigError("unsupported checkpoint format");
    Checkpoint c;
    c.method = method_from_string(j.at("method").get<std::string>());
    c.well = j.at("well").get<std::string>();
    c.meter = meter_from_string(j.at("meter").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.test_file = j.at("test_file").get<std::string>();
    NoiseSpec noise;
    noise.kind = noise_kind_from_string(j.at("noise").at("kind").get<std::string>());
    noise.sigma_n = j.at("noise").at("sigma_n").get<double>();
    noise.flow_offset = j.at("noise").at("flow_offset").get<double>();
    noise.validate();
    c.model = FlowModel{Architecture(j.at("architecture").get<std::vector<std::size_t>>()), noise};
    c.stats = stats_from_json(j.at("standardization"));
    c.prior.mean = vector_from_json(j.at("prior").at("mean"));
    c.prior.stddev = vector_from_json(j.at("prior").at("std"));
    const auto k = static_cast<Eigen::Index>(c.model.parameter_count());
    if (c.method == Method::MAP) {
      c.theta = vector_from_json(j.at("theta"));
      detail::require_dims(c.theta.size() == k, "checkpoint theta does not match architecture");
    } else {
      c.q.mu = vector_from_json(j.at("mu"));
      c.q.rho = vector_from_json(j.at("rho"));
      detail::require_dims(c.q.mu.size() == k && c.q.rho.size() == k, "checkpoint posterior does not match architecture");
    }
    const auto& t = j.at("training");
    c.best_epoch = t.at("best_epoch").get<std::size_t>();
    c.stopped_epoch = t.at("stopped_epoch").get<std::size_t>();
    c.train_loss = t.at("train_loss").get<std::vector<double>>();
    c.validation_loss = t.at("validation_loss").get<std::vector<double>>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_json(read_json_file(path)); }

inline void save_checkpoint(const std::string& path, const Checkpoint& c) { write_json_file(path, to_json(c)); }

inline Json to_json(const EvaluationReport& r) {
  Json j;
  j["group"] = r.group;
  j["wells"] = r.wells.size();
  j["percentile_levels"] = r.percentile_levels;
  j["mape_percentiles"] = r.mape_percentiles;
  j["rmse_percentiles"] = r.rmse_percentiles;
  Json per_well = Json::array();
  for (const auto& w : r.wells) {
    Json e{{"well", w.well}, {"meter", to_string(w.meter)}, {"points", w.y_true.size()}, {"mape", w.mape}, {"rmse", w.rmse}};
    if (!w.calibration.empty()) {
      e["coverage95"] = w.coverage95;
      e["calibration"] = w.calibration;
    }
    per_well.push_back(std::move(e));
  }
  j["per_well"] = std::move(per_well);
  j["cumulative"] = Json{{"thresholds_percent", r.thresholds}, {"fraction", r.cumulative}};
  if (r.has_calibration) {
    j["calibration"] = Json{{"levels", r.calibration.levels},
                            {"p25", r.calibration.p25},
                            {"median", r.calibration.median},
                            {"p75", r.calibration.p75}};
  }
  j["coverage95"] = number_or_null(r.coverage95);
  return j;
}

}  // namespace vfm
