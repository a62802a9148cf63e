#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <tuple>
#include <vector>

#include "metastab/model.hpp"

namespace metastab {

/// Compressed sparse rows. Column indices are 32-bit; state spaces stay below 2^32.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint64_t> row_ptr{0};
  std::vector<std::uint32_t> col;
  std::vector<double> val;

  std::size_t nnz() const noexcept { return val.size(); }
  SparseMatrix transpose() const;
  bool operator==(const SparseMatrix&) const = default;
};

/// A CTMC generator: off-diagonal rates plus exit rates (the negated diagonal).
struct Generator {
  SparseMatrix rates;
  std::vector<double> exit;

  std::size_t size() const noexcept { return exit.size(); }
  double max_exit() const;
  /// Largest |Q(i,j)| over all entries, diagonal included.
  double max_abs() const;
  /// Rates multiplied by `a`.
  Generator scaled(double a) const;
  double entry(std::size_t i, std::size_t j) const;

  /// Builds from (from, to, rate) triplets; duplicates add up, self-loops are ignored.
  static Generator from_triplets(std::size_t n,
                                 const std::vector<std::tuple<std::size_t, std::size_t, double>>& t);
  static Generator from_dense(const std::vector<std::vector<double>>& q);
  std::vector<std::vector<double>> dense() const;
  bool operator==(const Generator&) const = default;
};

/// Row-major enumeration over (u1, v1, ..., uK, vK) with u1 fastest.
struct StateSpace {
  std::vector<int> queue_bound;
  std::vector<int> orbit_bound;
  std::vector<std::size_t> u_stride;
  std::vector<std::size_t> v_stride;
  std::size_t size = 0;

  static StateSpace for_program(const ProgramSpec& program);
  std::size_t servers() const noexcept { return queue_bound.size(); }
  std::size_t index(std::span<const int> u, std::span<const int> v) const;
  void decode(std::size_t idx, std::span<int> u, std::span<int> v) const;
  int u(std::size_t idx, std::size_t server) const;
  int v(std::size_t idx, std::size_t server) const;
  /// All servers at (0, 0).
  std::size_t low() const noexcept { return 0; }
  /// All servers at (N, V).
  std::size_t high() const noexcept { return size - 1; }
};

enum class FailureModel { Auto, Exact, Chebyshev };

/// r(u) = sum_{i=1..u} Pois(mu*timeout; i). Zero for u = 0 and for an infinite timeout.
double failure_probability(int u, double mu, double timeout);

/// Effective service rates for every server at queue vector u.
std::vector<double> effective_service_rates(const ProgramSpec& program, std::span<const int> u);
/// Effective arrival rates given the effective service rates.
std::vector<double> effective_arrival_rates(const ProgramSpec& program,
                                            std::span<const double> mu_bar);
double effective_service_rate(const ProgramSpec& program, std::size_t i, std::span<const int> u);
double effective_arrival_rate(const ProgramSpec& program, std::size_t i, std::span<const int> u);

/// Chebyshev upper bound on the timeout probability of server i.
double chebyshev_failure_bound(const ProgramSpec& program, std::size_t i, std::span<const int> u,
                               std::span<const double> mu_bar);
double chebyshev_failure_bound(const ProgramSpec& program, std::size_t i, std::span<const int> u);

/// The six per-server transition families, already zeroed when a bound disables them.
struct ServerRates {
  double arrival_timeout = 0.0;  // (u+1, v+1)
  double arrival = 0.0;          // (u+1, v)
  double completion = 0.0;       // (u-1, v)
  double retry_fail = 0.0;       // (u+1, v)
  double retry_succeed = 0.0;    // (u+1, v-1)
  double orbit_drop = 0.0;       // (u, v-1)
};

ServerRates server_rates(double lambda_bar, double mu_bar, double r, double alpha, double timeout,
                         int u, int v, int queue_bound, int orbit_bound);

struct Transition {
  std::size_t target;
  double rate;
};

/// Evaluates outgoing rates state by state. Cheap to copy; holds precomputed tables.
class RateModel {
 public:
  RateModel(const ProgramSpec& program, FailureModel failure = FailureModel::Auto);

  const ProgramSpec& program() const noexcept { return program_; }
  const StateSpace& space() const noexcept { return space_; }
  bool chebyshev() const noexcept { return chebyshev_; }
  double alpha(std::size_t i) const { return alpha_[i]; }

  /// Rates of server i's families at the given coordinates.
  ServerRates rates(std::size_t i, std::span<const int> u, std::span<const int> v) const;
  /// Off-diagonal transitions out of a state, one per distinct target with positive rate,
  /// ordered by server then family.
  void transitions(std::span<const int> u, std::span<const int> v,
                   std::vector<Transition>& out) const;
  void transitions(std::size_t state, std::vector<Transition>& out) const;
  /// Upper bound on distinct targets per state.
  std::size_t max_neighbors() const noexcept { return 5 * space_.servers(); }

 private:
  ProgramSpec program_;
  StateSpace space_;
  bool chebyshev_;
  std::vector<double> alpha_;
  std::vector<std::vector<double>> exact_r_;
};

struct SingleServerTransition {
  int u;
  int v;
  double rate;
};

/// Outgoing transitions of a one-server program at (u, v), using the exact failure probability.
std::vector<SingleServerTransition> single_server_rates(int u, int v, const ProgramSpec& program);

struct CompileOptions {
  FailureModel failure = FailureModel::Auto;
  std::size_t memory_cap_bytes = std::size_t{8} << 30;
  bool check_irreducible = true;
};

struct CtmcModel {
  ProgramSpec program;
  StateSpace space;
  Generator q;
  std::vector<double> alpha;
  bool chebyshev = false;
  /// Every state reaches the empty state and is reached from it. Unset when not checked.
  bool irreducible_checked = false;
  bool irreducible = false;

  std::size_t size() const noexcept { return space.size; }
};

/// Estimated bytes needed to hold the compiled model.
std::size_t estimate_model_bytes(const ProgramSpec& program);

/// Parallel two-pass assembly. Bitwise identical to compile_serial.
CtmcModel compile(const ProgramSpec& program, const CompileOptions& options = {});
CtmcModel compile_serial(const ProgramSpec& program, const CompileOptions& options = {});

/// True when every state reaches `root` and `root` reaches every state.
bool strongly_connected(const Generator& q, std::size_t root = 0);

/// Jump chain P(s, s') = Q(s, s') / exit(s). Throws SolverError on an absorbing state.
SparseMatrix embedded_dtmc(const Generator& q);

/// MatrixMarket coordinate export of the full generator, diagonal included.
void write_matrix_market(std::ostream& out, const Generator& q);
/// CSV `index,u1,v1,...`.
void write_state_legend(std::ostream& out, const StateSpace& space);

}  // namespace metastab
