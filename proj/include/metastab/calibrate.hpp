#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "metastab/ctmc.hpp"
#include "metastab/des.hpp"
#include "metastab/kernels.hpp"
#include "metastab/model.hpp"

namespace metastab {

struct CalibrationConfig {
  /// Calibrated parameters with their boxes; values are the nominal theta_0.
  ParamVector theta0;
  /// Initial states, each "empty", "full" or "u,v;u,v".
  std::vector<std::string> inits{"empty", "full"};
  std::size_t runs = 100;       // M
  std::size_t samples = 1800;   // L
  double ts = 0.5;
  double gamma1 = 1.0;
  /// NaN means 1 / (Z L).
  double gamma2 = std::numeric_limits<double>::quiet_NaN();
  std::size_t generations = 30;
  std::size_t population = 0;
  double sigma0 = 0.3;
  std::uint64_t master_seed = 1;
  /// Also match the orbit series.
  bool include_orbit = false;
  FailureModel failure = FailureModel::Auto;

  double effective_gamma2() const;
  std::size_t observables(std::size_t servers) const;
  void validate() const;
};

/// Parses a calibration config. `program` supplies theta_0 values that are not given.
CalibrationConfig parse_calibration_config(std::string_view text, const ProgramSpec& program);
nlohmann::json to_json(const CalibrationConfig& config);

/// Averaged simulator series per initial state. series[z][o][k] with observables
/// ordered u_1..u_K then v_hat_1..v_hat_K.
struct TrainingData {
  std::vector<std::string> inits;
  double ts = 0.0;
  std::size_t samples = 0;
  std::size_t servers = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<std::vector<double>>> series;
};

TrainingData collect_training_data(const ProgramSpec& program, const CalibrationConfig& config);

/// CSV `init,t,u1,v_hat1,...`, one row per (init, sample).
void write_training_csv(std::ostream& out, const TrainingData& data);
TrainingData read_training_csv(std::string_view text, const CalibrationConfig& config,
                               std::size_t servers);

/// CTMC point mass matching a simulator initial state.
std::size_t init_state_index(const StateSpace& space, const InitState& init);

/// CTMC expected observables at theta for every initial state, laid out like TrainingData.
std::vector<std::vector<std::vector<double>>> ctmc_series(const ProgramSpec& program,
                                                          const ParamVector& theta,
                                                          const CalibrationConfig& config,
                                                          kernels::Exec exec = kernels::Exec::Parallel);

/// Regularised trajectory-matching loss at theta.
double calibration_loss(const ProgramSpec& program, const ParamVector& theta,
                        const TrainingData& data, const CalibrationConfig& config,
                        kernels::Exec exec = kernels::Exec::Parallel);

/// Squared-error term alone, between two series sets.
double series_distance(const std::vector<std::vector<std::vector<double>>>& a,
                       const std::vector<std::vector<std::vector<double>>>& b);

struct CalibrationTraceEntry {
  std::size_t generation = 0;
  double best = 0.0;
  double mean = 0.0;
  double best_so_far = 0.0;
  double sigma = 0.0;
  std::vector<double> best_theta;
};

struct CalibrationResult {
  ParamVector theta_star;
  double loss = 0.0;
  double loss_theta0 = 0.0;
  std::vector<CalibrationTraceEntry> trace;
  std::size_t evaluations = 0;
  std::size_t failed_evaluations = 0;
  std::size_t clamped = 0;
  bool budget_exhausted = true;
  double wall_seconds = 0.0;
  nlohmann::json fingerprint;
};

/// Box-constrained CMA-ES over the config's parameters. Candidates in a generation are
/// evaluated concurrently; the result does not depend on the thread count.
CalibrationResult calibrate(const ProgramSpec& program, const TrainingData& data,
                            const CalibrationConfig& config);

nlohmann::json to_json(const CalibrationResult& result);

}  // namespace metastab
