#pragma once

// Probabilistic flow model: y = f(x, phi) + eps, eps ~ N(0, g(f(x, phi), psi)^2).
//
// Parameters live in one flat vector theta = (phi, psi). The network part phi
// is laid out layer by layer; for layer l (1-based) the weight matrix W_l
// (n_l x n_{l-1}, row-major) comes first, followed by the bias vector b_l
// (n_l). The noise parameters psi (0, 1 or 2 entries) follow the last bias:
//   fixed:  none
//   homo:   psi_1                      g = exp(psi_1)
//   hetero: psi_1, psi_2               g = exp(psi_2) |z + offset| + exp(psi_1)

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vfm/errors.hpp"

namespace vfm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::size_t kFeatureCount = 7;
inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "u", "p1", "p2", "T1", "T2", "eta_oil", "eta_gas"};

// Explanatory variables of one steady-state operating point. Units: u in
// [0, 1], pressures in bar, temperatures in K, mass fractions dimensionless.
struct FlowFeatures {
  double u = 0.0;
  double p1 = 0.0;
  double p2 = 0.0;
  double T1 = 0.0;
  double T2 = 0.0;
  double eta_oil = 0.0;
  double eta_gas = 0.0;

  std::array<double, kFeatureCount> to_array() const { return {u, p1, p2, T1, T2, eta_oil, eta_gas}; }

  static FlowFeatures from_array(std::span<const double> v) {
    detail::require_dims(v.size() == kFeatureCount, "FlowFeatures needs 7 values");
    return {v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
  }

  void validate() const {
    for (double v : to_array()) {
      if (!std::isfinite(v)) throw NumericalError("non-finite flow feature");
    }
    detail::require_config(u >= 0.0 && u <= 1.0, "choke opening u must lie in [0, 1]");
    detail::require_config(p2 > 0.0 && p1 >= p2, "pressures must satisfy p1 >= p2 > 0");
    detail::require_config(eta_oil >= 0.0 && eta_gas >= 0.0 && eta_oil + eta_gas <= 1.0,
                           "mass fractions must be non-negative and sum to at most 1");
  }
};

// Layer widths [n_0 = 7, n_1, ..., n_L = 1]. Hidden layers use ReLU, the
// output layer is affine.
class Architecture {
 public:
  explicit Architecture(std::vector<std::size_t> widths) : widths_(std::move(widths)) {
    detail::require_config(widths_.size() >= 2, "architecture needs at least an input and output layer");
    detail::require_config(widths_.front() == kFeatureCount, "architecture input width must be 7");
    detail::require_config(widths_.back() == 1, "architecture output width must be 1");
    for (std::size_t w : widths_) detail::require_config(w >= 1, "layer widths must be >= 1");
    offsets_.reserve(layers() + 1);
    std::size_t offset = 0;
    for (std::size_t l = 0; l < layers(); ++l) {
      offsets_.push_back(offset);
      offset += widths_[l] * widths_[l + 1] + widths_[l + 1];
    }
    offsets_.push_back(offset);
  }

  static Architecture with_hidden(const std::vector<std::size_t>& hidden) {
    std::vector<std::size_t> w{kFeatureCount};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(1);
    return Architecture(std::move(w));
  }

  // Three hidden layers of 50 ReLU units.
  static Architecture standard() { return with_hidden({50, 50, 50}); }

  const std::vector<std::size_t>& widths() const { return widths_; }
  std::size_t layers() const { return widths_.size() - 1; }
  // Layer index l is 0-based here: layer l maps widths[l] -> widths[l + 1].
  std::size_t inputs(std::size_t l) const { return widths_[l]; }
  std::size_t outputs(std::size_t l) const { return widths_[l + 1]; }
  std::size_t weight_offset(std::size_t l) const { return offsets_[l]; }
  std::size_t bias_offset(std::size_t l) const { return offsets_[l] + inputs(l) * outputs(l); }
  std::size_t parameter_count() const { return offsets_.back(); }

  friend bool operator==(const Architecture& a, const Architecture& b) { return a.widths_ == b.widths_; }

 private:
  std::vector<std::size_t> widths_;
  std::vector<std::size_t> offsets_;
};

enum class NoiseKind { FixedHomoscedastic, LearnedHomoscedastic, LearnedHeteroscedastic };

inline std::string_view to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::FixedHomoscedastic: return "fixed";
    case NoiseKind::LearnedHomoscedastic: return "homo";
    case NoiseKind::LearnedHeteroscedastic: return "hetero";
  }
  return "?";
}

inline NoiseKind noise_kind_from_string(std::string_view s) {
  if (s == "fixed") return NoiseKind::FixedHomoscedastic;
  if (s == "homo") return NoiseKind::LearnedHomoscedastic;
  if (s == "hetero") return NoiseKind::LearnedHeteroscedastic;
  throw ConfigError("unknown noise model '" + std::string(s) + "' (expected fixed|homo|hetero)");
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::FixedHomoscedastic;
  // Only used by the fixed variant.
  double sigma_n = 1.0;
  // Only used by the heteroscedastic variant: the multiplicative term is
  // evaluated on max(z + flow_offset, 0), the flow rate clipped at zero.
  // With standardized targets, offset = target mean / target std puts z back
  // on the physical flow scale.
  double flow_offset = 0.0;

  static NoiseSpec fixed(double sigma_n) {
    detail::require_config(std::isfinite(sigma_n) && sigma_n > 0.0, "fixed noise std must be > 0");
    return {NoiseKind::FixedHomoscedastic, sigma_n, 0.0};
  }
  static NoiseSpec learned_homoscedastic() { return {NoiseKind::LearnedHomoscedastic, 1.0, 0.0}; }
  static NoiseSpec learned_heteroscedastic(double flow_offset = 0.0) {
    return {NoiseKind::LearnedHeteroscedastic, 1.0, flow_offset};
  }

  std::size_t parameter_count() const {
    switch (kind) {
      case NoiseKind::FixedHomoscedastic: return 0;
      case NoiseKind::LearnedHomoscedastic: return 1;
      case NoiseKind::LearnedHeteroscedastic: return 2;
    }
    return 0;
  }

  void validate() const {
    if (kind == NoiseKind::FixedHomoscedastic) {
      detail::require_config(std::isfinite(sigma_n) && sigma_n > 0.0, "fixed noise std must be > 0");
    }
    if (!std::isfinite(flow_offset)) throw NumericalError("non-finite flow offset");
  }
};

// Network plus noise model; fixes the layout of theta.
struct FlowModel {
  Architecture arch;
  NoiseSpec noise;

  std::size_t phi_size() const { return arch.parameter_count(); }
  std::size_t psi_size() const { return noise.parameter_count(); }
  std::size_t parameter_count() const { return phi_size() + psi_size(); }

  std::span<const double> phi(std::span<const double> theta) const {
    check(theta);
    return theta.first(phi_size());
  }
  std::span<const double> psi(std::span<const double> theta) const {
    check(theta);
    return theta.subspan(phi_size());
  }

 private:
  void check(std::span<const double> theta) const {
    if (theta.size() != parameter_count()) {
      throw DimensionError("parameter vector has " + std::to_string(theta.size()) + " entries, model needs " +
                           std::to_string(parameter_count()));
    }
  }
};

// Factorized normal prior N(mean_i, stddev_i^2) over theta (or a slice).
struct PriorSpec {
  Vector mean;
  Vector stddev;

  std::size_t size() const { return static_cast<std::size_t>(mean.size()); }

  void validate() const {
    detail::require_dims(mean.size() == stddev.size(), "prior mean/std length mismatch");
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
      if (!std::isfinite(mean[i]) || !std::isfinite(stddev[i])) throw NumericalError("non-finite prior parameter");
      if (!(stddev[i] > 0.0)) throw ConfigError("prior std must be > 0 (index " + std::to_string(i) + ")");
    }
  }

  static PriorSpec concat(const PriorSpec& a, const PriorSpec& b) {
    PriorSpec out;
    out.mean.resize(a.mean.size() + b.mean.size());
    out.stddev.resize(out.mean.size());
    out.mean << a.mean, b.mean;
    out.stddev << a.stddev, b.stddev;
    return out;
  }
};

// Standardized regression data: one row of x per point.
struct RegressionData {
  Matrix x;  // N x 7
  Vector y;  // N

  std::size_t size() const { return static_cast<std::size_t>(y.size()); }

  RegressionData rows(std::span<const std::size_t> idx) const {
    RegressionData out;
    out.x.resize(static_cast<Eigen::Index>(idx.size()), x.cols());
    out.y.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.x.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
      out.y[static_cast<Eigen::Index>(i)] = y[static_cast<Eigen::Index>(idx[i])];
    }
    return out;
  }
};

namespace detail {

inline Eigen::Map<const RowMajorMatrix> weights(std::span<const double> phi, const Architecture& arch, std::size_t l) {
  return {phi.data() + arch.weight_offset(l), static_cast<Eigen::Index>(arch.outputs(l)),
          static_cast<Eigen::Index>(arch.inputs(l))};
}

inline Eigen::Map<const Eigen::RowVectorXd> biases(std::span<const double> phi, const Architecture& arch,
                                                  std::size_t l) {
  return {phi.data() + arch.bias_offset(l), static_cast<Eigen::Index>(arch.outputs(l))};
}

// Post-activation outputs of every layer for a batch; [0] is the input and
// back() is the N x 1 network output.
struct ForwardTrace {
  std::vector<Matrix> h;
};

inline ForwardTrace forward_trace(const Matrix& x, std::span<const double> phi, const Architecture& arch) {
  require_dims(static_cast<std::size_t>(x.cols()) == arch.inputs(0), "input has wrong feature count");
  require_dims(phi.size() == arch.parameter_count(), "weight vector does not match architecture");
  ForwardTrace t;
  t.h.reserve(arch.layers() + 1);
  t.h.push_back(x);
  for (std::size_t l = 0; l < arch.layers(); ++l) {
    Matrix a = t.h.back() * weights(phi, arch, l).transpose();
    a.rowwise() += biases(phi, arch, l);
    if (l + 1 < arch.layers()) a = a.cwiseMax(0.0);
    t.h.push_back(std::move(a));
  }
  return t;
}

// Accumulates d(sum_i dz_i * z_i)/dphi into grad_phi given a forward trace.
inline void backward(const ForwardTrace& t, const Vector& dz, std::span<const double> phi, const Architecture& arch,
                     std::span<double> grad_phi) {
  Matrix delta = dz;  // N x n_out for the current layer
  for (std::size_t l = arch.layers(); l-- > 0;) {
    const Matrix& in = t.h[l];
    Eigen::Map<RowMajorMatrix> gw(grad_phi.data() + arch.weight_offset(l), static_cast<Eigen::Index>(arch.outputs(l)),
                                  static_cast<Eigen::Index>(arch.inputs(l)));
    Eigen::Map<Eigen::RowVectorXd> gb(grad_phi.data() + arch.bias_offset(l),
                                      static_cast<Eigen::Index>(arch.outputs(l)));
    gw.noalias() += delta.transpose() * in;
    gb += delta.colwise().sum();
    if (l == 0) break;
    Matrix back = delta * weights(phi, arch, l);
    // ReLU subgradient: 0 where the unit is inactive (including exactly 0).
    delta = back.cwiseProduct((in.array() > 0.0).cast<double>().matrix());
  }
}

}  // namespace detail

// Network mean z = f(x, phi) for a batch of standardized inputs.
inline Vector forward_mean(const Matrix& x, std::span<const double> phi, const Architecture& arch) {
  return detail::forward_trace(x, phi, arch).h.back().col(0);
}

inline double forward_mean(std::span<const double> x, std::span<const double> phi, const Architecture& arch) {
  if (x.size() != arch.inputs(0)) {
    throw DimensionError("input has " + std::to_string(x.size()) + " features, expected " +
                         std::to_string(arch.inputs(0)));
  }
  Matrix row(1, static_cast<Eigen::Index>(x.size()));
  for (std::size_t j = 0; j < x.size(); ++j) row(0, static_cast<Eigen::Index>(j)) = x[j];
  return forward_mean(row, phi, arch)[0];
}

// Noise standard deviation g(z, psi) > 0. The heteroscedastic term uses the
// positive part of the flow rather than |z|: both agree on physical (z >= 0)
// flows, but |z| gives the likelihood a spurious optimum at large negative z.
inline double noise_std(double z, std::span<const double> psi, const NoiseSpec& spec) {
  detail::require_dims(psi.size() == spec.parameter_count(), "noise parameter count does not match noise model");
  for (double p : psi) {
    if (!std::isfinite(p)) throw NumericalError("non-finite noise parameter");
  }
  switch (spec.kind) {
    case NoiseKind::FixedHomoscedastic: return spec.sigma_n;
    case NoiseKind::LearnedHomoscedastic: return std::exp(psi[0]);
    case NoiseKind::LearnedHeteroscedastic: return std::exp(psi[1]) * std::max(z + spec.flow_offset, 0.0) + std::exp(psi[0]);
  }
  return spec.sigma_n;
}

namespace detail {

struct NoiseDerivs {
  double s;
  double ds_dz;
  std::array<double, 2> ds_dpsi;
};

inline NoiseDerivs noise_derivs(double z, std::span<const double> psi, const NoiseSpec& spec) {
  NoiseDerivs d{noise_std(z, psi, spec), 0.0, {0.0, 0.0}};
  switch (spec.kind) {
    case NoiseKind::FixedHomoscedastic: break;
    case NoiseKind::LearnedHomoscedastic: d.ds_dpsi[0] = d.s; break;
    case NoiseKind::LearnedHeteroscedastic: {
      const double shifted = z + spec.flow_offset;
      const double e2 = std::exp(psi[1]);
      d.ds_dpsi[0] = std::exp(psi[0]);
      d.ds_dpsi[1] = e2 * std::max(shifted, 0.0);
      d.ds_dz = shifted > 0.0 ? e2 : 0.0;
      break;
    }
  }
  return d;
}

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // log(2 pi) / 2

}  // namespace detail

// sum_i log N(y_i | f(x_i, phi), g(f(x_i, phi), psi)^2). When grad is
// non-empty it receives d/dtheta of that sum (overwritten, not accumulated).
inline double log_likelihood(const RegressionData& data, std::span<const double> theta, const FlowModel& model,
                             std::span<double> grad = {}) {
  detail::require_config(data.size() > 0, "log-likelihood needs a non-empty dataset");
  const auto phi = model.phi(theta);
  const auto psi = model.psi(theta);
  const auto trace = detail::forward_trace(data.x, phi, model.arch);
  const auto& z = trace.h.back();

  const bool want_grad = !grad.empty();
  if (want_grad) detail::require_dims(grad.size() == theta.size(), "gradient buffer has wrong length");
  Vector dz;
  if (want_grad) dz.resize(z.rows());
  std::array<double, 2> dpsi{0.0, 0.0};

  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const auto nd = detail::noise_derivs(z(i, 0), psi, model.noise);
    const double r = data.y[i] - z(i, 0);
    const double u = r / nd.s;
    total += -detail::kHalfLog2Pi - std::log(nd.s) - 0.5 * u * u;
    if (want_grad) {
      const double dll_ds = (u * u - 1.0) / nd.s;
      dz[i] = u / nd.s + dll_ds * nd.ds_dz;
      dpsi[0] += dll_ds * nd.ds_dpsi[0];
      dpsi[1] += dll_ds * nd.ds_dpsi[1];
    }
  }
  if (!std::isfinite(total)) throw NumericalError("log-likelihood is not finite");
  if (want_grad) {
    std::fill(grad.begin(), grad.end(), 0.0);
    detail::backward(trace, dz, phi, model.arch, grad.first(model.phi_size()));
    for (std::size_t k = 0; k < model.psi_size(); ++k) grad[model.phi_size() + k] = dpsi[k];
  }
  return total;
}

// He-prior over the network weights: zero means, weight std sqrt(1/n_in) on
// the first layer and sqrt(2/n_in) on every later layer, bias std bias_std.
inline PriorSpec he_prior(const Architecture& arch, double bias_std = 0.1) {
  detail::require_config(std::isfinite(bias_std) && bias_std > 0.0, "bias prior std must be > 0");
  PriorSpec p;
  p.mean = Vector::Zero(static_cast<Eigen::Index>(arch.parameter_count()));
  p.stddev.resize(p.mean.size());
  for (std::size_t l = 0; l < arch.layers(); ++l) {
    const double gain = l == 0 ? 1.0 : 2.0;
    const double w_std = std::sqrt(gain / static_cast<double>(arch.inputs(l)));
    const auto w0 = static_cast<Eigen::Index>(arch.weight_offset(l));
    const auto b0 = static_cast<Eigen::Index>(arch.bias_offset(l));
    const auto nb = static_cast<Eigen::Index>(arch.outputs(l));
    p.stddev.segment(w0, b0 - w0).setConstant(w_std);
    p.stddev.segment(b0, nb).setConstant(bias_std);
  }
  return p;
}

// Settings for translating an instrument MAPE into a prior on psi.
struct NoisePriorConfig {
  double relative_error = 0.1;    // E_r of the instrument
  double log_std = 0.5;           // d of the MAPE-derived parameter
  std::optional<double> mean_flow;  // z-bar, physical units
  double floor_relative_error = 0.01;  // heteroscedastic floor exp(psi_1) ~ this * z-bar
  double floor_log_std = 0.5;
  // Physical flow units per working unit (target std when standardized).
  double flow_scale = 1.0;
};

// Location of a normal whose exponential has mean `target`: log(target) - d^2/2.
inline double lognormal_location(double target, double d) { return std::log(target) - 0.5 * d * d; }

// Prior over psi derived from an instrument MAPE E_r. The heteroscedastic
// multiplicative term gets c2 = log(sqrt(pi/2) E_r) - d2^2/2; flow-level
// terms use c1 = log(sqrt(pi/2) E_r z-bar / scale) - d1^2/2.
inline PriorSpec noise_prior_from_mape(const NoiseSpec& spec, const NoisePriorConfig& cfg) {
  detail::require_config(std::isfinite(cfg.relative_error) && cfg.relative_error > 0.0, "E_r must be > 0");
  detail::require_config(cfg.log_std >= 0.0 && cfg.floor_log_std >= 0.0, "noise prior log-std must be >= 0");
  detail::require_config(cfg.flow_scale > 0.0, "flow scale must be > 0");
  const double folded = std::sqrt(std::numbers::pi / 2.0);
  auto need_mean_flow = [&](const char* what) {
    detail::require_config(cfg.mean_flow.has_value() && *cfg.mean_flow > 0.0,
                           std::string("mean flow z-bar > 0 is required for the ") + what);
    return *cfg.mean_flow / cfg.flow_scale;
  };
  PriorSpec p;
  switch (spec.kind) {
    case NoiseKind::FixedHomoscedastic:
      p.mean.resize(0);
      p.stddev.resize(0);
      break;
    case NoiseKind::LearnedHomoscedastic: {
      const double zbar = need_mean_flow("homoscedastic noise prior");
      p.mean = Vector::Constant(1, lognormal_location(folded * cfg.relative_error * zbar, cfg.log_std));
      p.stddev = Vector::Constant(1, cfg.log_std);
      break;
    }
    case NoiseKind::LearnedHeteroscedastic: {
      const double zbar = need_mean_flow("heteroscedastic noise floor prior");
      p.mean.resize(2);
      p.stddev.resize(2);
      p.mean << lognormal_location(folded * cfg.floor_relative_error * zbar, cfg.floor_log_std),
          lognormal_location(folded * cfg.relative_error, cfg.log_std);
      p.stddev << cfg.floor_log_std, cfg.log_std;
      break;
    }
  }
  return p;
}

// Full prior over theta = (phi, psi).
inline PriorSpec build_prior(const FlowModel& model, double bias_std, const NoisePriorConfig& noise_cfg) {
  return PriorSpec::concat(he_prior(model.arch, bias_std), noise_prior_from_mape(model.noise, noise_cfg));
}

}  // namespace vfm
