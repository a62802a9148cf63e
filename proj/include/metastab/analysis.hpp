#pragma once

#include <complex>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metastab/ctmc.hpp"
#include "metastab/kernels.hpp"
#include "metastab/linalg.hpp"

namespace metastab {

/// Sorted, duplicate-free state indices.
using StateSet = std::vector<std::size_t>;

StateSet make_state_set(std::vector<std::size_t> states);
std::vector<char> membership(std::size_t n, const StateSet& set);

/// Parses a target-set expression. Terms are joined with ',' or '|' (union):
///   Low, High, (u1,v1,...,uK,vK), or a conjunction like `u<=10 && v1>=3`.
/// Variables are u, v, ui, vi (1-based). A bare `u`/`v` must hold on every server.
StateSet parse_state_set(std::string_view expr, const StateSpace& space);

/// {states with u_i <= floor(fraction * N_i) on every server}.
StateSet low_queue_set(const StateSpace& space, double fraction = 0.1);

/// Weights w(s) = u_i(s) or v_i(s).
std::vector<double> u_observable(const StateSpace& space, std::size_t server);
std::vector<double> v_observable(const StateSpace& space, std::size_t server);
std::vector<double> point_mass(std::size_t n, std::size_t state);

// ---------------------------------------------------------------------------
// Transient behaviour

struct TransientOptions {
  /// Poisson mass dropped per output time.
  double tolerance = 1e-10;
  kernels::Exec exec = kernels::Exec::Parallel;
};

struct DistributionVector {
  double t = 0.0;
  std::vector<double> p;
};

/// pi(t) = pi0 exp(Q t) by uniformization, for sorted nonnegative times.
std::vector<DistributionVector> transient_distribution(const Generator& q,
                                                       std::span<const double> pi0,
                                                       std::span<const double> times,
                                                       const TransientOptions& options = {});

/// result[init][observable][time] = E[w(X(t)) | X(0) ~ pi0s[init]].
/// One uniformization pass serves every output time.
std::vector<std::vector<std::vector<double>>> expected_observables(
    const Generator& q, const std::vector<std::vector<double>>& pi0s, std::span<const double> times,
    const std::vector<std::vector<double>>& weights, const TransientOptions& options = {});

std::vector<double> expected_observable(const Generator& q, std::span<const double> pi0,
                                        std::span<const double> times,
                                        std::span<const double> weights,
                                        const TransientOptions& options = {});

/// Truncation window [left, right] and weights of Poisson(mean) with at most `tolerance`
/// total mass outside it.
struct PoissonWindow {
  std::size_t left = 0;
  std::vector<double> weights;
  std::size_t right() const { return left + weights.size() - 1; }
};
PoissonWindow poisson_window(double mean, double tolerance);

// ---------------------------------------------------------------------------
// Linear-solve based quantities

struct AnalysisOptions {
  linalg::SolverOptions solver;
  double condition_warning = 1e12;
  kernels::Exec exec = kernels::Exec::Parallel;
};

struct StationaryResult {
  std::vector<double> pi;
  double residual = 0.0;  // ||pi Q||_inf / max|Q|
  std::string method;
};

/// Solves pi Q = 0, sum pi = 1 with the empty state as reference.
StationaryResult stationary_distribution(const Generator& q, const AnalysisOptions& options = {},
                                         std::size_t reference = 0);

struct HittingStats {
  StateSet target;
  std::vector<double> mean;
  std::vector<double> stddev;  // empty unless requested
  double residual = 0.0;
  double condition_estimate = 0.0;
  bool ill_conditioned = false;
  std::string method;
};

/// E_x[tau_D] for every x. Throws SolverError when some state cannot reach D.
HittingStats expected_hitting_time(const Generator& q, const StateSet& target,
                                   const AnalysisOptions& options = {});
/// Means plus standard deviations from the second-moment system.
HittingStats hitting_time_stats(const Generator& q, const StateSet& target,
                                const AnalysisOptions& options = {});

/// Indices of states that can reach `target`.
std::vector<char> can_reach(const Generator& q, const StateSet& target);

enum class EscapeRoute { EmbeddedDtmc, Ctmc };

struct EscapeResult {
  double probability = 0.0;
  bool reachable = true;
};

/// P_x(tau_{D \ x} < tau_x^+) by first-step analysis.
EscapeResult escape_probability(const Generator& q, std::size_t x, const StateSet& target,
                                EscapeRoute route = EscapeRoute::EmbeddedDtmc,
                                const AnalysisOptions& options = {});

/// P_y(tau_D < tau_y^+) for every y outside D from one factorization:
/// 1 / (exit(y) G(y, y)) with G the inverse of the negated generator block off D.
std::vector<double> escape_probabilities_outside(const Generator& q, const StateSet& target,
                                                 const AnalysisOptions& options = {});

struct IndexResult {
  double index = 0.0;
  double numerator = 0.0;
  double denominator = 0.0;
  std::size_t numerator_state = 0;
  std::size_t denominator_state = 0;
  double threshold = 0.1;
  bool metastable = false;
};

/// |S| * sup_{x not in D} E_x[tau_D] / inf_{x in D} E_x[tau_{D \ x}].
IndexResult metastability_index_ht(const Generator& q, const StateSet& target,
                                   double threshold = 0.1, const AnalysisOptions& options = {});
/// |S| * sup_{x in D} P_x(tau_{D \ x} < tau_x) / inf_{y not in D} P_y(tau_D < tau_y).
IndexResult metastability_index_escape(const Generator& q, const StateSet& target,
                                       double threshold = 0.1,
                                       const AnalysisOptions& options = {});

struct NestedLevel {
  std::size_t level = 0;  // l, with D_l the set before peeling
  std::size_t peeled = 0; // x_l
  double escape = 0.0;
  StateSet before;        // D_l
  StateSet after;         // D_{l-1}
};

/// Peels x_l = argmax_{x in D_l} P_x(tau_{D_l \ x} < tau_x) for l = k..2. Ties go to the
/// lowest index.
std::vector<NestedLevel> nested_metastable_sets(const Generator& q, const StateSet& target,
                                                const AnalysisOptions& options = {});

struct EigenOptions {
  std::size_t krylov_dim = 0;  // 0 picks max(2k + 20, 40)
  std::size_t max_restarts = 300;
  double tol = 1e-12;
  /// Shift of the first pass relative to max exit rate.
  double initial_shift = 1e-3;
};

struct EigenResult {
  std::vector<std::complex<double>> values;  // eigenvalues of -Q, ascending real part
  double shift = 0.0;
  std::size_t restarts = 0;
  double max_residual = 0.0;
};

/// k eigenvalues of -Q with smallest real part by shift-invert Arnoldi.
EigenResult dominant_eigenvalues(const Generator& q, std::size_t k, const EigenOptions& options = {});

struct SpectralLevel {
  std::size_t level = 0;
  std::size_t peeled = 0;
  double eigenvalue = 0.0;
  double inverse_hitting = 0.0;
  double relative_gap = 0.0;
};

std::vector<SpectralLevel> spectral_hitting_estimate(const Generator& q, const StateSet& target,
                                                     const AnalysisOptions& options = {},
                                                     const EigenOptions& eig = {});

/// log(1 / (2 eps)) / lambda.
double mixing_time_lower_bound(double lambda_real, double eps);

/// max over starts of the total-variation distance between P^t(x, .) and pi.
double tv_distance(const Generator& q, double t, std::span<const double> pi,
                   const std::vector<std::size_t>& starts, const TransientOptions& options = {});

// ---------------------------------------------------------------------------
// Vector field

struct FieldPoint {
  int u = 0;
  int v = 0;
  double f_q = 0.0;
  double f_o = 0.0;
  double magnitude = 0.0;
  double angle = 0.0;
};

struct VectorField {
  std::size_t server = 0;
  int stride = 1;
  std::vector<std::pair<int, int>> fixed;
  std::vector<FieldPoint> points;  // u fastest
};

/// Drift of server `server`'s (u, v) at the given full coordinates.
FieldPoint field_at(const RateModel& rm, std::size_t server, std::span<const int> u,
                    std::span<const int> v);
VectorField vector_field(const RateModel& rm, std::size_t server, int stride,
                         const std::vector<std::pair<int, int>>& fixed,
                         kernels::Exec exec = kernels::Exec::Parallel);
void write_field_csv(std::ostream& out, const VectorField& field);

// ---------------------------------------------------------------------------
// Recovery

struct RecoveryResult {
  double expected_time = 0.0;
  double stddev = 0.0;
  std::vector<double> times;
  /// mean_u[server][time]
  std::vector<std::vector<double>> mean_u;
  HittingStats hitting;
};

RecoveryResult recovery_analysis(const CtmcModel& model, std::span<const double> start,
                                 const StateSet& target, std::span<const double> times,
                                 const AnalysisOptions& options = {},
                                 const TransientOptions& transient = {});

}  // namespace metastab
