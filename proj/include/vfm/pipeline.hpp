#pragma once

// End-to-end helpers shared by the CLI and the acceptance suite: train one
// well, evaluate a checkpoint on test data, and run one size-study trial.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "vfm/data.hpp"
#include "vfm/evaluation.hpp"
#include "vfm/inference.hpp"
#include "vfm/io.hpp"
#include "vfm/model.hpp"
#include "vfm/predict.hpp"

namespace vfm {

inline double default_relative_error(MeterType m) { return m == MeterType::MPFM ? 0.10 : 0.025; }

struct ModelConfig {
  Method method = Method::MAP;
  NoiseKind noise = NoiseKind::FixedHomoscedastic;
  std::vector<std::size_t> hidden{50, 50, 50};
  double bias_std = 0.1;
  // Instrument MAPE; defaults by meter type when unset.
  std::optional<double> relative_error;
  double noise_log_std = 0.5;
  double floor_relative_error = 0.01;
  double floor_log_std = 0.5;
  // Fixed noise std in physical units; defaults to sqrt(pi/2) E_r z-bar.
  std::optional<double> sigma_n;
  TrainConfig train;

  void validate() const {
    detail::require_config(method == Method::VI || noise == NoiseKind::FixedHomoscedastic,
                           "method=map requires noise=fixed");
    train.validate();
    if (relative_error) detail::require_config(*relative_error > 0.0, "E_r must be > 0");
    if (sigma_n) detail::require_config(*sigma_n > 0.0, "sigma_n must be > 0");
  }
};

struct PreparedModel {
  FlowModel model;
  PriorSpec prior;
  StandardizationStats stats;
};

// Standardization, noise model and prior for a training split.
inline PreparedModel prepare_model(const WellDataset& train, const ModelConfig& cfg) {
  cfg.validate();
  train.validate();
  detail::require_config(!train.empty(), "empty training set");
  const auto stats = StandardizationStats::fit(train);
  const MeterType meter = train.records.front().meter;
  const double er = cfg.relative_error.value_or(default_relative_error(meter));
  const double zbar = train.mean_flow();

  NoiseSpec noise;
  switch (cfg.noise) {
    case NoiseKind::FixedHomoscedastic: {
      const double phys = cfg.sigma_n.value_or(std::sqrt(std::numbers::pi / 2.0) * er * zbar);
      noise = NoiseSpec::fixed(phys / stats.target_std);
      break;
    }
    case NoiseKind::LearnedHomoscedastic: noise = NoiseSpec::learned_homoscedastic(); break;
    case NoiseKind::LearnedHeteroscedastic:
      noise = NoiseSpec::learned_heteroscedastic(stats.target_mean / stats.target_std);
      break;
  }
  FlowModel model{Architecture::with_hidden(cfg.hidden), noise};
  NoisePriorConfig npc;
  npc.relative_error = er;
  npc.log_std = cfg.noise_log_std;
  npc.mean_flow = zbar;
  npc.floor_relative_error = cfg.floor_relative_error;
  npc.floor_log_std = cfg.floor_log_std;
  npc.flow_scale = stats.target_std;
  return {model, build_prior(model, cfg.bias_std, npc), stats};
}

namespace detail {

template <typename Params>
void copy_history(Checkpoint& c, const TrainResult<Params>& r) {
  c.train_loss = r.train_loss;
  c.validation_loss = r.validation_loss;
  c.best_epoch = r.best_epoch;
  c.stopped_epoch = r.stopped_epoch;
}

inline Checkpoint fit_prepared(const PreparedModel& pm, const RegressionData& fit, const RegressionData& val,
                               const ModelConfig& cfg) {
  Checkpoint c;
  c.method = cfg.method;
  c.model = pm.model;
  c.prior = pm.prior;
  c.stats = pm.stats;
  c.seed = cfg.train.seed;
  if (cfg.method == Method::MAP) {
    auto r = map_fit(fit, val, pm.prior, pm.model, cfg.train);
    c.theta = r.best;
    copy_history(c, r);
  } else {
    auto r = vi_fit(fit, val, pm.prior, pm.model, cfg.train);
    c.q = r.best;
    copy_history(c, r);
  }
  return c;
}

}  // namespace detail

// Trains on `train`, holding out a random validation fraction.
inline Checkpoint train_well(const WellDataset& train, const ModelConfig& cfg, std::string well = {}) {
  const auto pm = prepare_model(train, cfg);
  const auto all = pm.stats.standardize(train);
  auto [fit_idx, val_idx] =
      random_holdout(train.size(), cfg.train.validation_fraction, derive_seed(cfg.train.seed, 7));
  auto c = detail::fit_prepared(pm, all.rows(fit_idx), all.rows(val_idx), cfg);
  c.well = std::move(well);
  c.meter = train.records.front().meter;
  return c;
}

// Trains on `fit` with an explicit validation set; standardization uses both.
inline Checkpoint train_well(const WellDataset& fit, const WellDataset& validation, const ModelConfig& cfg,
                             std::string well = {}) {
  WellDataset joint = fit;
  joint.records.insert(joint.records.end(), validation.records.begin(), validation.records.end());
  std::sort(joint.records.begin(), joint.records.end(),
            [](const WellRecord& a, const WellRecord& b) { return a.timestamp < b.timestamp; });
  const auto pm = prepare_model(joint, cfg);
  auto c = detail::fit_prepared(pm, pm.stats.standardize(fit), pm.stats.standardize(validation), cfg);
  c.well = std::move(well);
  c.meter = fit.records.front().meter;
  return c;
}

inline Matrix standardized_features(const WellDataset& d, const StandardizationStats& stats) {
  return stats.standardize(d).x;
}

// Point predictions (physical units) and, for VI, the y draws (S x N).
struct TestPredictions {
  std::vector<double> y_true;
  std::vector<double> y_pred;
  std::optional<Matrix> draws;
};

inline TestPredictions predict_test(const Checkpoint& c, const WellDataset& test, std::size_t samples,
                                    std::uint64_t seed) {
  detail::require_config(!test.empty(), "empty test set");
  TestPredictions out;
  const Matrix x = standardized_features(test, c.stats);
  for (const auto& r : test.records) out.y_true.push_back(r.y);
  if (c.method == Method::MAP) {
    const Vector z = forward_mean(x, c.model.phi(as_span(c.theta)), c.model.arch);
    for (Eigen::Index i = 0; i < z.size(); ++i) out.y_pred.push_back(c.stats.destandardize_target(z[i]));
  } else {
    auto d = predictive_draws(x, c.distribution(), c.model, c.stats, samples, seed);
    const Vector mean_z = d.z.colwise().mean();
    out.y_pred.assign(mean_z.data(), mean_z.data() + mean_z.size());
    out.draws = std::move(d.y);
  }
  return out;
}

inline WellEvaluation evaluate_checkpoint(const Checkpoint& c, const WellDataset& test, std::size_t samples,
                                          std::uint64_t seed) {
  auto p = predict_test(c, test, samples, seed);
  if (p.draws) {
    const SampleIntervals intervals(*p.draws);
    const IntervalFn fn = [&intervals](std::size_t i, double level) { return intervals(i, level); };
    return evaluate_well(c.well, c.meter, std::move(p.y_true), std::move(p.y_pred), &fn);
  }
  return evaluate_well(c.well, c.meter, std::move(p.y_true), std::move(p.y_pred));
}

// One trial of the training-set-size study: a random split instant s picks a
// fixed 100-point test block [s, s + 100); for each size k the training set
// is the k records preceding s, of which the last 100 validate.
struct SizeTrial {
  std::size_t split_index = 0;
  std::map<int, double> mape;  // E_k
};

inline constexpr std::size_t kSizeStudyTestPoints = 100;
inline constexpr std::size_t kSizeStudyValidationPoints = 100;

inline SizeTrial run_size_trial(const WellDataset& well, const ModelConfig& cfg, std::uint64_t seed,
                                const std::vector<int>& sizes = size_study_sizes()) {
  detail::require_config(!sizes.empty(), "size study needs training sizes");
  const auto k_max = static_cast<std::size_t>(*std::max_element(sizes.begin(), sizes.end()));
  detail::require_config(well.size() >= k_max + kSizeStudyTestPoints,
                         "well has " + std::to_string(well.size()) + " records; size study needs " +
                             std::to_string(k_max + kSizeStudyTestPoints));
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(k_max, well.size() - kSizeStudyTestPoints);
  SizeTrial trial;
  trial.split_index = pick(rng);
  const std::size_t s = trial.split_index;
  const WellDataset test = well.slice(s, s + kSizeStudyTestPoints);
  for (int k : sizes) {
    detail::require_config(static_cast<std::size_t>(k) > kSizeStudyValidationPoints,
                           "training size must exceed the validation block");
    const std::size_t begin = s - static_cast<std::size_t>(k);
    const WellDataset fit = well.slice(begin, s - kSizeStudyValidationPoints);
    const WellDataset val = well.slice(s - kSizeStudyValidationPoints, s);
    ModelConfig c = cfg;
    c.train.seed = derive_seed(seed, static_cast<std::uint64_t>(k));
    const auto ckpt = train_well(fit, val, c);
    const auto pred = predict_test(ckpt, test, 2, 0);
    trial.mape[k] = mape(pred.y_true, pred.y_pred);
  }
  return trial;
}

}  // namespace vfm
