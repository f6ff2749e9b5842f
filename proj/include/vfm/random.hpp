#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "vfm/errors.hpp"
#include "vfm/model.hpp"

namespace vfm {

// Every stochastic routine owns one of these, seeded explicitly.
using Rng = std::mt19937_64;

inline Vector standard_normal(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = nd(rng);
  return out;
}

// Derives an independent seed for a sub-stream (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Random partition of {0..n-1}: round(fraction * n) validation indices drawn
// uniformly without replacement. Both halves are returned sorted.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> random_holdout(std::size_t n, double fraction,
                                                                                    std::uint64_t seed) {
  detail::require_config(fraction > 0.0 && fraction < 1.0, "validation fraction must lie in (0, 1)");
  const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  detail::require_config(n_val >= 1 && n_val < n, "validation split of " + std::to_string(n) +
                                                      " points leaves an empty partition");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> fit(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(fit.begin(), fit.end());
  return {std::move(fit), std::move(val)};
}

}  // namespace vfm
