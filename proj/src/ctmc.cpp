#include "metastab/ctmc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>

#include "metastab/error.hpp"
#include "metastab/io.hpp"

namespace metastab {

SparseMatrix SparseMatrix::transpose() const {
  SparseMatrix t;
  t.rows = cols;
  t.cols = rows;
  t.row_ptr.assign(cols + 1, 0);
  for (auto c : col) ++t.row_ptr[c + 1];
  for (std::size_t j = 0; j < cols; ++j) t.row_ptr[j + 1] += t.row_ptr[j];
  t.col.resize(nnz());
  t.val.resize(nnz());
  std::vector<std::uint64_t> next(t.row_ptr.begin(), t.row_ptr.end() - 1);
  for (std::size_t i = 0; i < rows; ++i)
    for (auto k = row_ptr[i]; k < row_ptr[i + 1]; ++k) {
      const auto pos = next[col[k]]++;
      t.col[pos] = static_cast<std::uint32_t>(i);
      t.val[pos] = val[k];
    }
  return t;
}

double Generator::max_exit() const {
  double m = 0.0;
  for (double e : exit) m = std::max(m, e);
  return m;
}

double Generator::max_abs() const {
  double m = max_exit();
  for (double r : rates.val) m = std::max(m, r);
  return m;
}

Generator Generator::scaled(double a) const {
  Generator g = *this;
  for (auto& r : g.rates.val) r *= a;
  for (std::size_t i = 0; i < g.size(); ++i) {
    double s = 0.0;
    for (auto k = g.rates.row_ptr[i]; k < g.rates.row_ptr[i + 1]; ++k) s += g.rates.val[k];
    g.exit[i] = s;
  }
  return g;
}

double Generator::entry(std::size_t i, std::size_t j) const {
  if (i == j) return -exit[i];
  for (auto k = rates.row_ptr[i]; k < rates.row_ptr[i + 1]; ++k)
    if (rates.col[k] == j) return rates.val[k];
  return 0.0;
}

Generator Generator::from_triplets(
    std::size_t n, const std::vector<std::tuple<std::size_t, std::size_t, double>>& t) {
  std::vector<std::map<std::size_t, double>> rows(n);
  for (const auto& [i, j, r] : t) {
    if (i >= n || j >= n) throw ValidationError("triplet index out of range");
    if (!(r >= 0.0) || !std::isfinite(r)) throw ValidationError("rates must be finite and >= 0");
    if (i == j || r == 0.0) continue;
    rows[i][j] += r;
  }
  Generator g;
  g.rates.rows = g.rates.cols = n;
  g.exit.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (const auto& [j, r] : rows[i]) {
      g.rates.col.push_back(static_cast<std::uint32_t>(j));
      g.rates.val.push_back(r);
      s += r;
    }
    g.rates.row_ptr.push_back(g.rates.col.size());
    g.exit[i] = s;
  }
  return g;
}

Generator Generator::from_dense(const std::vector<std::vector<double>>& q) {
  std::vector<std::tuple<std::size_t, std::size_t, double>> t;
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = 0; j < q[i].size(); ++j)
      if (i != j && q[i][j] != 0.0) t.emplace_back(i, j, q[i][j]);
  return from_triplets(q.size(), t);
}

std::vector<std::vector<double>> Generator::dense() const {
  const std::size_t n = size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    d[i][i] = -exit[i];
    for (auto k = rates.row_ptr[i]; k < rates.row_ptr[i + 1]; ++k) d[i][rates.col[k]] = rates.val[k];
  }
  return d;
}

// ---------------------------------------------------------------------------

StateSpace StateSpace::for_program(const ProgramSpec& p) {
  StateSpace s;
  std::size_t stride = 1;
  constexpr std::size_t kMax = std::numeric_limits<std::size_t>::max();
  for (const auto& srv : p.servers) {
    s.queue_bound.push_back(srv.queue_bound);
    s.orbit_bound.push_back(srv.orbit_bound);
    s.u_stride.push_back(stride);
    const auto nu = static_cast<std::size_t>(srv.queue_bound) + 1;
    const auto nv = static_cast<std::size_t>(srv.orbit_bound) + 1;
    if (stride > kMax / nu / nv) throw CapacityError("state space size overflows", kMax);
    s.v_stride.push_back(stride * nu);
    stride *= nu * nv;
  }
  s.size = stride;
  return s;
}

std::size_t StateSpace::index(std::span<const int> u, std::span<const int> v) const {
  std::size_t idx = 0;
  for (std::size_t i = 0; i < servers(); ++i)
    idx += static_cast<std::size_t>(u[i]) * u_stride[i] + static_cast<std::size_t>(v[i]) * v_stride[i];
  return idx;
}

void StateSpace::decode(std::size_t idx, std::span<int> u, std::span<int> v) const {
  for (std::size_t i = 0; i < servers(); ++i) {
    const auto nu = static_cast<std::size_t>(queue_bound[i]) + 1;
    const auto nv = static_cast<std::size_t>(orbit_bound[i]) + 1;
    u[i] = static_cast<int>(idx % nu);
    idx /= nu;
    v[i] = static_cast<int>(idx % nv);
    idx /= nv;
  }
}

int StateSpace::u(std::size_t idx, std::size_t i) const {
  return static_cast<int>((idx / u_stride[i]) % (static_cast<std::size_t>(queue_bound[i]) + 1));
}

int StateSpace::v(std::size_t idx, std::size_t i) const {
  return static_cast<int>((idx / v_stride[i]) % (static_cast<std::size_t>(orbit_bound[i]) + 1));
}

// ---------------------------------------------------------------------------

double failure_probability(int u, double mu, double timeout) {
  if (u <= 0 || !std::isfinite(timeout)) return 0.0;
  const double m = mu * timeout;
  if (!(m > 0.0)) return 0.0;
  const double log_m = std::log(m);
  double sum = 0.0;
  for (int i = 1; i <= u; ++i) sum += std::exp(-m + i * log_m - std::lgamma(i + 1.0));
  return std::min(sum, -std::expm1(-m));
}

std::vector<double> effective_service_rates(const ProgramSpec& p, std::span<const int> u) {
  const std::size_t k = p.size();
  std::vector<double> mu_bar(k);
  for (std::size_t j = k; j-- > 0;) {
    const auto& s = p.servers[j];
    const double own = std::min(s.threads, u[j]) * s.service_rate;
    mu_bar[j] = j + 1 < k ? std::min(own, mu_bar[j + 1]) : own;
  }
  return mu_bar;
}

std::vector<double> effective_arrival_rates(const ProgramSpec& p, std::span<const double> mu_bar) {
  std::vector<double> lam(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    lam[i] = i == 0 ? p.arrival_rate(0)
                    : p.arrival_rate(i) + std::min(lam[i - 1], mu_bar[i - 1]);
  return lam;
}

double effective_service_rate(const ProgramSpec& p, std::size_t i, std::span<const int> u) {
  return effective_service_rates(p, u)[i];
}

double effective_arrival_rate(const ProgramSpec& p, std::size_t i, std::span<const int> u) {
  return effective_arrival_rates(p, effective_service_rates(p, u))[i];
}

double chebyshev_failure_bound(const ProgramSpec& p, std::size_t i, std::span<const int> u,
                               std::span<const double> mu_bar) {
  const double timeout = p.timeout(i);
  if (!std::isfinite(timeout)) return 0.0;
  double mt = 0.0;
  double var = 0.0;
  bool any = false;
  for (std::size_t l = i; l < p.size(); ++l) {
    if (u[l] == 0) continue;
    any = true;
    if (!(mu_bar[l] > 0.0)) return 1.0;
    const double x = u[l] / mu_bar[l];
    mt += x;
    var += x * x;
  }
  if (!any) return 0.0;
  const double zeta = std::max(1.0, (timeout - mt) / std::sqrt(var));
  return 1.0 / (zeta * zeta);
}

double chebyshev_failure_bound(const ProgramSpec& p, std::size_t i, std::span<const int> u) {
  return chebyshev_failure_bound(p, i, u, effective_service_rates(p, u));
}

ServerRates server_rates(double lambda_bar, double mu_bar, double r, double alpha, double timeout,
                         int u, int v, int queue_bound, int orbit_bound) {
  ServerRates out;
  const bool room = u < queue_bound;
  const double retry_rate = std::isfinite(timeout) ? v / timeout : 0.0;
  if (room && v < orbit_bound) out.arrival_timeout = lambda_bar * r;
  if (room) out.arrival = lambda_bar * (1.0 - r);
  if (u > 0) out.completion = mu_bar;
  if (room) out.retry_fail = alpha * retry_rate * r;
  if (room && v > 0) out.retry_succeed = alpha * retry_rate * (1.0 - r);
  if (v > 0) out.orbit_drop = (1.0 - alpha) * retry_rate;
  return out;
}

// ---------------------------------------------------------------------------

RateModel::RateModel(const ProgramSpec& program, FailureModel failure)
    : program_(program), space_(StateSpace::for_program(program)) {
  chebyshev_ = failure == FailureModel::Chebyshev ||
               (failure == FailureModel::Auto && program_.size() > 1);
  for (std::size_t i = 0; i < program_.size(); ++i) alpha_.push_back(program_.retry_fraction(i));
  if (!chebyshev_) {
    if (program_.size() != 1) throw ValidationError("exact failure model needs a single server");
    const auto& s = program_.servers[0];
    std::vector<double> table;
    for (int u = 0; u <= s.queue_bound; ++u)
      table.push_back(failure_probability(u, s.threads * s.service_rate, program_.timeout(0)));
    exact_r_.push_back(std::move(table));
  }
}

namespace {

constexpr std::size_t kMaxServersOnStack = 16;

}  // namespace

ServerRates RateModel::rates(std::size_t i, std::span<const int> u, std::span<const int> v) const {
  const auto mu_bar = effective_service_rates(program_, u);
  const auto lambda_bar = effective_arrival_rates(program_, mu_bar);
  const double r = chebyshev_ ? chebyshev_failure_bound(program_, i, u, mu_bar)
                              : exact_r_[0][static_cast<std::size_t>(u[i])];
  return server_rates(lambda_bar[i], mu_bar[i], r, alpha_[i], program_.timeout(i), u[i], v[i],
                      space_.queue_bound[i], space_.orbit_bound[i]);
}

void RateModel::transitions(std::span<const int> u, std::span<const int> v,
                            std::vector<Transition>& out) const {
  out.clear();
  const std::size_t k = program_.size();
  const std::size_t here = space_.index(u, v);
  const auto mu_bar = effective_service_rates(program_, u);
  const auto lambda_bar = effective_arrival_rates(program_, mu_bar);
  for (std::size_t i = 0; i < k; ++i) {
    const double r = chebyshev_ ? chebyshev_failure_bound(program_, i, u, mu_bar)
                                : exact_r_[0][static_cast<std::size_t>(u[i])];
    const ServerRates sr = server_rates(lambda_bar[i], mu_bar[i], r, alpha_[i], program_.timeout(i),
                                        u[i], v[i], space_.queue_bound[i], space_.orbit_bound[i]);
    const std::size_t us = space_.u_stride[i];
    const std::size_t vs = space_.v_stride[i];
    auto emit = [&](std::size_t target, double rate) {
      if (rate > 0.0) out.push_back({target, rate});
    };
    emit(here + us + vs, sr.arrival_timeout);
    emit(here + us, sr.arrival + sr.retry_fail);
    emit(here - us, sr.completion);
    emit(here + us - vs, sr.retry_succeed);
    emit(here - vs, sr.orbit_drop);
  }
  std::sort(out.begin(), out.end(),
            [](const Transition& a, const Transition& b) { return a.target < b.target; });
}

void RateModel::transitions(std::size_t state, std::vector<Transition>& out) const {
  int ub[kMaxServersOnStack];
  int vb[kMaxServersOnStack];
  std::vector<int> uh, vh;
  std::span<int> u(ub, space_.servers());
  std::span<int> v(vb, space_.servers());
  if (space_.servers() > kMaxServersOnStack) {
    uh.resize(space_.servers());
    vh.resize(space_.servers());
    u = uh;
    v = vh;
  }
  space_.decode(state, u, v);
  transitions(std::span<const int>(u), std::span<const int>(v), out);
}

std::vector<SingleServerTransition> single_server_rates(int u, int v, const ProgramSpec& p) {
  if (p.size() != 1) throw ValidationError("single_server_rates needs a one-server program");
  const auto& s = p.servers[0];
  if (u < 0 || u > s.queue_bound || v < 0 || v > s.orbit_bound)
    throw ValidationError("state out of bounds");
  const RateModel rm(p, FailureModel::Exact);
  const int uu[1] = {u};
  const int vv[1] = {v};
  const ServerRates sr = rm.rates(0, uu, vv);
  std::vector<SingleServerTransition> out;
  auto emit = [&](int tu, int tv, double rate) {
    if (rate > 0.0) out.push_back({tu, tv, rate});
  };
  emit(u + 1, v + 1, sr.arrival_timeout);
  emit(u + 1, v, sr.arrival + sr.retry_fail);
  emit(u - 1, v, sr.completion);
  emit(u + 1, v - 1, sr.retry_succeed);
  emit(u, v - 1, sr.orbit_drop);
  return out;
}

// ---------------------------------------------------------------------------

std::size_t estimate_model_bytes(const ProgramSpec& program) {
  const StateSpace space = StateSpace::for_program(program);
  const std::size_t per_state =
      sizeof(std::uint64_t) + sizeof(double) + 5 * program.size() * (sizeof(std::uint32_t) + sizeof(double));
  if (space.size > std::numeric_limits<std::size_t>::max() / per_state)
    return std::numeric_limits<std::size_t>::max();
  return space.size * per_state;
}

namespace {

void check_capacity(const ProgramSpec& program, const CompileOptions& options) {
  const StateSpace space = StateSpace::for_program(program);
  if (space.size > std::numeric_limits<std::uint32_t>::max())
    throw CapacityError("state space of " + std::to_string(space.size) +
                            " states exceeds the 32-bit index cap",
                        std::numeric_limits<std::uint32_t>::max());
  const std::size_t need = estimate_model_bytes(program);
  if (need > options.memory_cap_bytes)
    throw CapacityError("model needs about " + std::to_string(need) +
                            " bytes, above the memory cap of " +
                            std::to_string(options.memory_cap_bytes) + " bytes",
                        options.memory_cap_bytes);
}

CtmcModel finish_model(const ProgramSpec& program, const RateModel& rm, Generator q,
                       const CompileOptions& options) {
  CtmcModel m;
  m.program = program;
  m.space = rm.space();
  m.q = std::move(q);
  for (std::size_t i = 0; i < program.size(); ++i) m.alpha.push_back(rm.alpha(i));
  m.chebyshev = rm.chebyshev();
  if (options.check_irreducible) {
    m.irreducible_checked = true;
    m.irreducible = strongly_connected(m.q, m.space.low());
  }
  return m;
}

}  // namespace

CtmcModel compile_serial(const ProgramSpec& program, const CompileOptions& options) {
  check_capacity(program, options);
  const RateModel rm(program, options.failure);
  const std::size_t n = rm.space().size;
  Generator q;
  q.rates.rows = q.rates.cols = n;
  q.rates.row_ptr.assign(1, 0);
  q.exit.assign(n, 0.0);
  std::vector<Transition> tr;
  for (std::size_t s = 0; s < n; ++s) {
    rm.transitions(s, tr);
    double sum = 0.0;
    for (const auto& t : tr) {
      q.rates.col.push_back(static_cast<std::uint32_t>(t.target));
      q.rates.val.push_back(t.rate);
      sum += t.rate;
    }
    q.rates.row_ptr.push_back(q.rates.col.size());
    q.exit[s] = sum;
  }
  return finish_model(program, rm, std::move(q), options);
}

CtmcModel compile(const ProgramSpec& program, const CompileOptions& options) {
  check_capacity(program, options);
  const RateModel rm(program, options.failure);
  const std::size_t n = rm.space().size;
  const long ln = static_cast<long>(n);
  Generator q;
  q.rates.rows = q.rates.cols = n;
  q.rates.row_ptr.assign(n + 1, 0);
  q.exit.assign(n, 0.0);

#pragma omp parallel
  {
    std::vector<Transition> tr;
#pragma omp for schedule(static)
    for (long s = 0; s < ln; ++s) {
      rm.transitions(static_cast<std::size_t>(s), tr);
      q.rates.row_ptr[static_cast<std::size_t>(s) + 1] = tr.size();
    }
  }
  for (std::size_t s = 0; s < n; ++s) q.rates.row_ptr[s + 1] += q.rates.row_ptr[s];
  q.rates.col.resize(q.rates.row_ptr[n]);
  q.rates.val.resize(q.rates.row_ptr[n]);

#pragma omp parallel
  {
    std::vector<Transition> tr;
#pragma omp for schedule(static)
    for (long s = 0; s < ln; ++s) {
      const auto st = static_cast<std::size_t>(s);
      rm.transitions(st, tr);
      auto pos = q.rates.row_ptr[st];
      double sum = 0.0;
      for (const auto& t : tr) {
        q.rates.col[pos] = static_cast<std::uint32_t>(t.target);
        q.rates.val[pos] = t.rate;
        ++pos;
        sum += t.rate;
      }
      q.exit[st] = sum;
    }
  }
  return finish_model(program, rm, std::move(q), options);
}

bool strongly_connected(const Generator& q, std::size_t root) {
  const std::size_t n = q.size();
  if (n == 0) return false;
  auto reach_all = [&](const SparseMatrix& a) {
    std::vector<char> seen(n, 0);
    std::vector<std::uint32_t> stack{static_cast<std::uint32_t>(root)};
    seen[root] = 1;
    std::size_t count = 1;
    while (!stack.empty()) {
      const auto s = stack.back();
      stack.pop_back();
      for (auto k = a.row_ptr[s]; k < a.row_ptr[s + 1]; ++k) {
        const auto t = a.col[k];
        if (!seen[t] && a.val[k] > 0.0) {
          seen[t] = 1;
          ++count;
          stack.push_back(t);
        }
      }
    }
    return count == n;
  };
  return reach_all(q.rates) && reach_all(q.rates.transpose());
}

SparseMatrix embedded_dtmc(const Generator& q) {
  SparseMatrix p = q.rates;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (!(q.exit[i] > 0.0)) throw SolverError("state " + std::to_string(i) + " is absorbing");
    for (auto k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) p.val[k] /= q.exit[i];
  }
  return p;
}

void write_matrix_market(std::ostream& out, const Generator& q) {
  const std::size_t n = q.size();
  std::size_t diag = 0;
  for (double e : q.exit) diag += e != 0.0;
  out << "%%MatrixMarket matrix coordinate real general\n";
  out << n << ' ' << n << ' ' << q.rates.nnz() + diag << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    bool diag_done = q.exit[i] == 0.0;
    for (auto k = q.rates.row_ptr[i]; k < q.rates.row_ptr[i + 1]; ++k) {
      const std::size_t j = q.rates.col[k];
      if (!diag_done && j > i) {
        out << i + 1 << ' ' << i + 1 << ' ' << fmt_num(-q.exit[i]) << '\n';
        diag_done = true;
      }
      out << i + 1 << ' ' << j + 1 << ' ' << fmt_num(q.rates.val[k]) << '\n';
    }
    if (!diag_done) out << i + 1 << ' ' << i + 1 << ' ' << fmt_num(-q.exit[i]) << '\n';
  }
}

void write_state_legend(std::ostream& out, const StateSpace& space) {
  out << "index";
  for (std::size_t i = 0; i < space.servers(); ++i) out << ",u" << i + 1 << ",v" << i + 1;
  out << '\n';
  std::vector<int> u(space.servers()), v(space.servers());
  for (std::size_t s = 0; s < space.size; ++s) {
    space.decode(s, u, v);
    out << s;
    for (std::size_t i = 0; i < space.servers(); ++i) out << ',' << u[i] << ',' << v[i];
    out << '\n';
  }
}

}  // namespace metastab
