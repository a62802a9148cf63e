#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

namespace metastab {

struct CmaesOptions {
  /// 0 picks 4 + floor(3 ln d).
  std::size_t population = 0;
  std::size_t generations = 30;
  /// Initial step size in unit-box coordinates.
  double sigma0 = 0.3;
  std::uint64_t seed = 1;
  /// Draws per candidate before falling back to clamping into the box.
  std::size_t max_resample = 100;
};

struct CmaesGeneration {
  std::size_t generation = 0;  // 0 is the start point alone
  double best = 0.0;           // best loss in this generation
  double mean = 0.0;           // mean finite loss in this generation
  double best_so_far = 0.0;
  double sigma = 0.0;
  std::vector<double> best_x;
};

struct CmaesResult {
  std::vector<double> x;  // unit-box coordinates of the best point
  double value = 0.0;
  std::vector<CmaesGeneration> trace;
  std::size_t evaluations = 0;
  std::size_t clamped = 0;
  /// The generation budget ran out (always the case without another stopping rule).
  bool budget_exhausted = true;
};

/// Evaluates a batch of candidates; must return one value per candidate.
using BatchObjective = std::function<std::vector<double>(const std::vector<std::vector<double>>&)>;

/// (mu/mu_w, lambda)-CMA-ES on the unit box [0, 1]^d. The start point is evaluated first.
CmaesResult cmaes_minimize(const BatchObjective& f, std::vector<double> x0,
                           const CmaesOptions& options = {});

}  // namespace metastab
