#include "metastab/analysis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include <Eigen/Eigenvalues>

#include "metastab/error.hpp"
#include "metastab/io.hpp"

namespace metastab {

using linalg::Restriction;
using linalg::Vec;

StateSet make_state_set(std::vector<std::size_t> states) {
  std::sort(states.begin(), states.end());
  states.erase(std::unique(states.begin(), states.end()), states.end());
  return states;
}

std::vector<char> membership(std::size_t n, const StateSet& set) {
  std::vector<char> m(n, 0);
  for (auto s : set) {
    if (s >= n) throw ValidationError("state index " + std::to_string(s) + " out of range");
    m[s] = 1;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Target-set expressions

namespace {

struct Cmp {
  bool is_u;
  int server;  // -1: every server
  std::string op;
  int value;
};

bool compare(int a, const std::string& op, int b) {
  if (op == "<=") return a <= b;
  if (op == ">=") return a >= b;
  if (op == "<") return a < b;
  if (op == ">") return a > b;
  if (op == "==" || op == "=") return a == b;
  return a != b;
}

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

int parse_int(const std::string& s, std::string_view context) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size())
    throw ValidationError("expected an integer in '" + std::string(context) + "', got '" + s + "'");
  return v;
}

Cmp parse_cmp(const std::string& text, std::size_t servers) {
  static const char* ops[] = {"<=", ">=", "==", "!=", "<", ">", "="};
  for (const char* op : ops) {
    const auto pos = text.find(op);
    if (pos == std::string::npos) continue;
    const std::string var = trim(std::string_view(text).substr(0, pos));
    const std::string rhs = trim(std::string_view(text).substr(pos + std::string(op).size()));
    if (var.empty() || (var[0] != 'u' && var[0] != 'v'))
      throw ValidationError("unknown variable in '" + text + "'");
    Cmp c{var[0] == 'u', -1, op, parse_int(rhs, text)};
    if (var.size() > 1) {
      const int idx = parse_int(var.substr(1), text);
      if (idx < 1 || static_cast<std::size_t>(idx) > servers)
        throw ValidationError("server index out of range in '" + text + "'");
      c.server = idx - 1;
    }
    return c;
  }
  throw ValidationError("expected a comparison, got '" + text + "'");
}

std::vector<std::string> split_top_level(std::string_view expr) {
  std::vector<std::string> terms;
  int depth = 0;
  std::string cur;
  for (std::size_t i = 0; i < expr.size(); ++i) {
    const char ch = expr[i];
    if (ch == '(') ++depth;
    if (ch == ')') --depth;
    if (depth < 0) throw ValidationError("unbalanced parentheses in '" + std::string(expr) + "'");
    if (depth == 0 && (ch == ',' || ch == '|')) {
      if (ch == '|' && i + 1 < expr.size() && expr[i + 1] == '|') ++i;  // "||" is a union too
      terms.push_back(trim(cur));
      cur.clear();
      continue;
    }
    cur.push_back(ch);
  }
  if (depth != 0) throw ValidationError("unbalanced parentheses in '" + std::string(expr) + "'");
  terms.push_back(trim(cur));
  return terms;
}

}  // namespace

StateSet parse_state_set(std::string_view expr, const StateSpace& space) {
  const std::size_t k = space.servers();
  std::vector<std::size_t> out;
  std::vector<int> u(k), v(k);
  for (const auto& term : split_top_level(expr)) {
    if (term.empty()) throw ValidationError("empty term in state set '" + std::string(expr) + "'");
    if (term == "Low" || term == "low") {
      out.push_back(space.low());
      continue;
    }
    if (term == "High" || term == "high") {
      out.push_back(space.high());
      continue;
    }
    if (term.front() == '(') {
      if (term.back() != ')') throw ValidationError("bad tuple '" + term + "'");
      std::vector<int> vals;
      std::string_view inner = std::string_view(term).substr(1, term.size() - 2);
      std::size_t pos = 0;
      while (pos <= inner.size()) {
        auto end = inner.find(',', pos);
        if (end == std::string_view::npos) end = inner.size();
        vals.push_back(parse_int(trim(inner.substr(pos, end - pos)), term));
        pos = end + 1;
      }
      if (vals.size() != 2 * k)
        throw ValidationError("tuple '" + term + "' needs " + std::to_string(2 * k) + " entries");
      for (std::size_t i = 0; i < k; ++i) {
        u[i] = vals[2 * i];
        v[i] = vals[2 * i + 1];
        if (u[i] < 0 || u[i] > space.queue_bound[i] || v[i] < 0 || v[i] > space.orbit_bound[i])
          throw ValidationError("tuple '" + term + "' is out of bounds");
      }
      out.push_back(space.index(u, v));
      continue;
    }
    std::vector<Cmp> cmps;
    std::size_t pos = 0;
    while (pos <= term.size()) {
      auto end = term.find("&&", pos);
      if (end == std::string::npos) end = term.size();
      cmps.push_back(parse_cmp(trim(std::string_view(term).substr(pos, end - pos)), k));
      pos = end + 2;
    }
    for (std::size_t s = 0; s < space.size; ++s) {
      space.decode(s, u, v);
      bool ok = true;
      for (const auto& c : cmps) {
        const auto& xs = c.is_u ? u : v;
        if (c.server >= 0) {
          ok = ok && compare(xs[static_cast<std::size_t>(c.server)], c.op, c.value);
        } else {
          for (std::size_t i = 0; i < k; ++i) ok = ok && compare(xs[i], c.op, c.value);
        }
        if (!ok) break;
      }
      if (ok) out.push_back(s);
    }
  }
  return make_state_set(std::move(out));
}

StateSet low_queue_set(const StateSpace& space, double fraction) {
  std::vector<std::size_t> out;
  std::vector<int> u(space.servers()), v(space.servers());
  for (std::size_t s = 0; s < space.size; ++s) {
    space.decode(s, u, v);
    bool ok = true;
    for (std::size_t i = 0; i < space.servers(); ++i)
      ok = ok && u[i] <= static_cast<int>(std::floor(fraction * space.queue_bound[i]));
    if (ok) out.push_back(s);
  }
  return out;
}

std::vector<double> u_observable(const StateSpace& space, std::size_t server) {
  std::vector<double> w(space.size);
  for (std::size_t s = 0; s < space.size; ++s) w[s] = space.u(s, server);
  return w;
}

std::vector<double> v_observable(const StateSpace& space, std::size_t server) {
  std::vector<double> w(space.size);
  for (std::size_t s = 0; s < space.size; ++s) w[s] = space.v(s, server);
  return w;
}

std::vector<double> point_mass(std::size_t n, std::size_t state) {
  std::vector<double> p(n, 0.0);
  p.at(state) = 1.0;
  return p;
}

// ---------------------------------------------------------------------------
// Uniformization

PoissonWindow poisson_window(double mean, double tolerance) {
  PoissonWindow w;
  if (!(mean > 0.0)) {
    w.weights = {1.0};
    return w;
  }
  const double spread = std::ceil(12.0 * std::sqrt(mean) + 60.0);
  const double mode = std::floor(mean);
  const std::size_t lo = mode > spread ? static_cast<std::size_t>(mode - spread) : 0;
  const std::size_t hi = static_cast<std::size_t>(mode + spread);
  // Ratios outward from the mode, normalised over the window; the mass beyond it is negligible.
  std::vector<double> p(hi - lo + 1);
  const std::size_t m = static_cast<std::size_t>(mode) - lo;
  p[m] = 1.0;
  for (std::size_t k = m; k + 1 < p.size(); ++k) p[k + 1] = p[k] * mean / static_cast<double>(lo + k + 1);
  for (std::size_t k = m; k > 0; --k) p[k - 1] = p[k] * static_cast<double>(lo + k) / mean;
  double total = 0.0;
  for (double x : p) total += x;
  for (double& x : p) x /= total;
  const double half = tolerance / 2.0;
  std::size_t a = 0;
  double left = 0.0;
  while (a + 1 < p.size() && left + p[a] <= half) left += p[a++];
  std::size_t b = p.size() - 1;
  double right = 0.0;
  while (b > a && right + p[b] <= half) right += p[b--];
  w.left = lo + a;
  w.weights.assign(p.begin() + static_cast<long>(a), p.begin() + static_cast<long>(b) + 1);
  // kept weights sum to one so a transient step never leaks probability
  const double kept = 1.0 - left - right;
  for (double& x : w.weights) x /= kept;
  return w;
}

namespace {

void check_times(std::span<const double> times) {
  for (std::size_t j = 0; j < times.size(); ++j) {
    if (!(times[j] >= 0.0) || !std::isfinite(times[j]))
      throw ValidationError("times must be finite and nonnegative");
    if (j > 0 && times[j] < times[j - 1]) throw ValidationError("times must be sorted");
  }
}

void check_distribution(std::span<const double> p, std::size_t n) {
  if (p.size() != n) throw ValidationError("initial distribution has the wrong length");
  double s = 0.0;
  for (double x : p) {
    if (x < 0.0) throw ValidationError("initial distribution has negative entries");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-10) throw ValidationError("initial distribution does not sum to 1");
}

// Calls visit(k, X) for k = 0..kmax where X = pi0s P^k (n x m, interleaved).
template <typename Visit>
void uniformized_powers(const Generator& q, const std::vector<std::vector<double>>& pi0s,
                        double rate, std::size_t kmax, kernels::Exec exec, Visit visit) {
  const std::size_t n = q.size();
  const std::size_t m = pi0s.size();
  std::vector<double> x(n * m), y(n * m);
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t i = 0; i < n; ++i) x[i * m + c] = pi0s[c][i];
  const SparseMatrix at = q.rates.transpose();
  for (std::size_t k = 0;; ++k) {
    visit(k, x);
    if (k == kmax) break;
    kernels::uniformized_step_block(exec, at, q.exit, rate, m, x, y);
    x.swap(y);
  }
}

}  // namespace

std::vector<std::vector<std::vector<double>>> expected_observables(
    const Generator& q, const std::vector<std::vector<double>>& pi0s, std::span<const double> times,
    const std::vector<std::vector<double>>& weights, const TransientOptions& options) {
  const std::size_t n = q.size();
  const std::size_t m = pi0s.size();
  const std::size_t r = weights.size();
  check_times(times);
  for (const auto& p : pi0s) check_distribution(p, n);
  for (const auto& w : weights)
    if (w.size() != n) throw ValidationError("observable has the wrong length");
  std::vector<std::vector<std::vector<double>>> out(
      m, std::vector<std::vector<double>>(r, std::vector<double>(times.size(), 0.0)));
  if (m == 0 || r == 0 || times.empty()) return out;

  const double rate = q.max_exit();
  std::vector<PoissonWindow> windows;
  std::size_t kmax = 0;
  for (double t : times) {
    windows.push_back(poisson_window(rate * t, options.tolerance));
    kmax = std::max(kmax, windows.back().right());
  }
  // s[k * m * r + c * r + o] = (pi0_c P^k) . w_o
  std::vector<double> s((kmax + 1) * m * r, 0.0);
  constexpr std::size_t kBlock = 4096;
  const std::size_t blocks = (n + kBlock - 1) / kBlock;
  std::vector<double> partial(blocks * m * r);
  uniformized_powers(q, pi0s, rate > 0.0 ? rate : 1.0, rate > 0.0 ? kmax : 0, options.exec,
                     [&](std::size_t k, const std::vector<double>& x) {
                       auto block = [&](std::size_t b) {
                         double* acc = partial.data() + b * m * r;
                         std::fill(acc, acc + m * r, 0.0);
                         const std::size_t hi = std::min(n, (b + 1) * kBlock);
                         for (std::size_t i = b * kBlock; i < hi; ++i)
                           for (std::size_t o = 0; o < r; ++o) {
                             const double wi = weights[o][i];
                             if (wi == 0.0) continue;
                             for (std::size_t c = 0; c < m; ++c) acc[c * r + o] += x[i * m + c] * wi;
                           }
                       };
                       if (options.exec == kernels::Exec::Serial || blocks == 1) {
                         for (std::size_t b = 0; b < blocks; ++b) block(b);
                       } else {
                         const long nb = static_cast<long>(blocks);
#pragma omp parallel for schedule(static)
                         for (long b = 0; b < nb; ++b) block(static_cast<std::size_t>(b));
                       }
                       double* dst = s.data() + k * m * r;
                       for (std::size_t b = 0; b < blocks; ++b)
                         for (std::size_t z = 0; z < m * r; ++z) dst[z] += partial[b * m * r + z];
                     });
  if (!(rate > 0.0)) {
    for (std::size_t c = 0; c < m; ++c)
      for (std::size_t o = 0; o < r; ++o)
        for (std::size_t j = 0; j < times.size(); ++j) out[c][o][j] = s[c * r + o];
    return out;
  }
  for (std::size_t j = 0; j < times.size(); ++j) {
    const auto& w = windows[j];
    for (std::size_t c = 0; c < m; ++c)
      for (std::size_t o = 0; o < r; ++o) {
        double acc = 0.0;
        for (std::size_t t = 0; t < w.weights.size(); ++t)
          acc += w.weights[t] * s[(w.left + t) * m * r + c * r + o];
        out[c][o][j] = acc;
      }
  }
  return out;
}

std::vector<double> expected_observable(const Generator& q, std::span<const double> pi0,
                                        std::span<const double> times,
                                        std::span<const double> weights,
                                        const TransientOptions& options) {
  return expected_observables(q, {std::vector<double>(pi0.begin(), pi0.end())}, times,
                              {std::vector<double>(weights.begin(), weights.end())}, options)[0][0];
}

std::vector<DistributionVector> transient_distribution(const Generator& q,
                                                       std::span<const double> pi0,
                                                       std::span<const double> times,
                                                       const TransientOptions& options) {
  const std::size_t n = q.size();
  check_times(times);
  check_distribution(pi0, n);
  std::vector<DistributionVector> out(times.size());
  for (std::size_t j = 0; j < times.size(); ++j) {
    out[j].t = times[j];
    out[j].p.assign(n, 0.0);
  }
  if (times.empty()) return out;
  const double rate = q.max_exit();
  if (!(rate > 0.0)) {
    for (auto& d : out) d.p.assign(pi0.begin(), pi0.end());
    return out;
  }
  std::vector<PoissonWindow> windows;
  std::size_t kmax = 0;
  for (double t : times) {
    windows.push_back(poisson_window(rate * t, options.tolerance));
    kmax = std::max(kmax, windows.back().right());
  }
  uniformized_powers(q, {std::vector<double>(pi0.begin(), pi0.end())}, rate, kmax, options.exec,
                     [&](std::size_t k, const std::vector<double>& x) {
                       for (std::size_t j = 0; j < times.size(); ++j) {
                         const auto& w = windows[j];
                         if (k < w.left || k > w.right()) continue;
                         const double c = w.weights[k - w.left];
                         auto& p = out[j].p;
                         for (std::size_t i = 0; i < n; ++i) p[i] += c * x[i];
                       }
                     });
  return out;
}

// ---------------------------------------------------------------------------
// Stationary distribution

StationaryResult stationary_distribution(const Generator& q, const AnalysisOptions& options,
                                         std::size_t reference) {
  const std::size_t n = q.size();
  if (reference >= n) throw ValidationError("reference state out of range");
  StationaryResult res;
  res.pi.assign(n, 0.0);
  if (n == 1) {
    res.pi[0] = 1.0;
    res.method = "trivial";
    return res;
  }
  std::vector<char> excluded(n, 0);
  excluded[reference] = 1;
  const Restriction r = Restriction::complement_of(n, excluded);
  Vec rhs = Vec::Zero(static_cast<Eigen::Index>(r.size()));
  for (auto k = q.rates.row_ptr[reference]; k < q.rates.row_ptr[reference + 1]; ++k) {
    const auto b = r.local[q.rates.col[k]];
    if (b >= 0) rhs(b) = -q.rates.val[k];
  }
  Vec x;
  linalg::SolveReport rep;
  const bool direct = options.solver.method == linalg::Method::Direct ||
                      (options.solver.method == linalg::Method::Auto &&
                       r.size() <= options.solver.direct_limit);
  if (direct) {
    linalg::LuSolver lu(linalg::transposed_block(q, r));
    x = lu.solve(rhs, &rep);
  } else {
    const SparseMatrix at = q.rates.transpose();
    Vec diag(static_cast<Eigen::Index>(r.size()));
    for (std::size_t a = 0; a < r.size(); ++a) diag(static_cast<Eigen::Index>(a)) = -q.exit[r.states[a]];
    auto op = [&](const double* in, double* out) {
      const long m = static_cast<long>(r.size());
#pragma omp parallel for schedule(static)
      for (long a = 0; a < m; ++a) {
        const std::size_t j = r.states[static_cast<std::size_t>(a)];
        double s = -q.exit[j] * in[a];
        for (auto k = at.row_ptr[j]; k < at.row_ptr[j + 1]; ++k) {
          const auto b = r.local[at.col[k]];
          if (b >= 0) s += at.val[k] * in[b];
        }
        out[a] = s;
      }
    };
    x = linalg::gmres(op, diag, rhs, options.solver, &rep);
  }
  res.pi[reference] = 1.0;
  for (std::size_t a = 0; a < r.size(); ++a) res.pi[r.states[a]] = std::max(0.0, x(static_cast<Eigen::Index>(a)));
  double total = 0.0;
  for (double p : res.pi) total += p;
  if (!(total > 0.0) || !std::isfinite(total))
    throw SolverError("stationary solve produced an invalid vector");
  for (double& p : res.pi) p /= total;
  // Residual of pi Q.
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] -= res.pi[i] * q.exit[i];
    for (auto k = q.rates.row_ptr[i]; k < q.rates.row_ptr[i + 1]; ++k)
      y[q.rates.col[k]] += res.pi[i] * q.rates.val[k];
  }
  double worst = 0.0;
  for (double v : y) worst = std::max(worst, std::abs(v));
  const double scale = std::max(q.max_abs(), 1e-300);
  res.residual = worst / scale;
  res.method = rep.method;
  if (res.residual > 1e-10)
    throw SolverError("stationary residual " + fmt_num(res.residual) + " above 1e-10",
                      res.residual, rep.iterations);
  return res;
}

// ---------------------------------------------------------------------------
// Hitting times

std::vector<char> can_reach(const Generator& q, const StateSet& target) {
  const std::size_t n = q.size();
  std::vector<char> seen = membership(n, target);
  const SparseMatrix at = q.rates.transpose();
  std::vector<std::size_t> stack(target.begin(), target.end());
  while (!stack.empty()) {
    const auto s = stack.back();
    stack.pop_back();
    for (auto k = at.row_ptr[s]; k < at.row_ptr[s + 1]; ++k) {
      const auto p = at.col[k];
      if (!seen[p] && at.val[k] > 0.0) {
        seen[p] = 1;
        stack.push_back(p);
      }
    }
  }
  return seen;
}

namespace {

HittingStats hitting_impl(const Generator& q, const StateSet& target, const AnalysisOptions& options,
                          bool with_std) {
  const std::size_t n = q.size();
  if (target.empty()) throw ValidationError("target set is empty");
  const auto in_target = membership(n, target);
  const auto reach = can_reach(q, target);
  const auto missing = static_cast<std::size_t>(std::count(reach.begin(), reach.end(), 0));
  if (missing > 0)
    throw SolverError(std::to_string(missing) + " states cannot reach the target set");
  HittingStats h;
  h.target = target;
  h.mean.assign(n, 0.0);
  if (with_std) h.stddev.assign(n, 0.0);
  const Restriction r = Restriction::complement_of(n, in_target);
  if (r.size() == 0) {
    h.method = "trivial";
    return h;
  }
  linalg::NegatedBlockSolver solver(q, r, options.solver);
  linalg::SolveReport rep;
  const Vec ones = Vec::Ones(static_cast<Eigen::Index>(r.size()));
  const Vec m1 = solver.solve(ones, &rep);
  h.residual = rep.residual;
  h.method = rep.method;
  double hmax = 0.0;
  for (std::size_t a = 0; a < r.size(); ++a) {
    const double v = m1(static_cast<Eigen::Index>(a));
    if (!(v >= 0.0) || !std::isfinite(v))
      throw SolverError("hitting-time solve produced an invalid value", rep.residual, rep.iterations);
    h.mean[r.states[a]] = v;
    hmax = std::max(hmax, v);
  }
  h.condition_estimate = solver.norm_inf() * hmax;
  h.ill_conditioned = h.condition_estimate > options.condition_warning;
  if (rep.residual > 1e-8)
    throw SolverError("hitting-time residual too large (condition estimate " +
                          fmt_num(h.condition_estimate) + ")",
                      rep.residual, rep.iterations);
  if (with_std) {
    linalg::SolveReport rep2;
    const Vec m2 = solver.solve(2.0 * m1, &rep2);
    h.residual = std::max(h.residual, rep2.residual);
    for (std::size_t a = 0; a < r.size(); ++a) {
      const double mean = m1(static_cast<Eigen::Index>(a));
      h.stddev[r.states[a]] = std::sqrt(std::max(0.0, m2(static_cast<Eigen::Index>(a)) - mean * mean));
    }
  }
  return h;
}

}  // namespace

HittingStats expected_hitting_time(const Generator& q, const StateSet& target,
                                   const AnalysisOptions& options) {
  return hitting_impl(q, target, options, false);
}

HittingStats hitting_time_stats(const Generator& q, const StateSet& target,
                                const AnalysisOptions& options) {
  return hitting_impl(q, target, options, true);
}

// ---------------------------------------------------------------------------
// Escape probabilities

EscapeResult escape_probability(const Generator& q, std::size_t x, const StateSet& target,
                                EscapeRoute route, const AnalysisOptions& options) {
  (void)options;
  const std::size_t n = q.size();
  if (x >= n) throw ValidationError("start state out of range");
  StateSet d;
  for (auto s : target)
    if (s != x) d.push_back(s);
  if (d.empty()) throw ValidationError("escape target is empty once the start state is removed");
  const auto in_d = membership(n, d);
  if (!(q.exit[x] > 0.0)) return {0.0, false};

  // States that reach D without passing through x.
  std::vector<char> reach(n, 0);
  {
    const SparseMatrix at = q.rates.transpose();
    std::vector<std::size_t> stack(d.begin(), d.end());
    for (auto s : d) reach[s] = 1;
    while (!stack.empty()) {
      const auto s = stack.back();
      stack.pop_back();
      for (auto k = at.row_ptr[s]; k < at.row_ptr[s + 1]; ++k) {
        const auto p = at.col[k];
        if (!reach[p] && p != x && at.val[k] > 0.0) {
          reach[p] = 1;
          stack.push_back(p);
        }
      }
    }
  }
  std::vector<char> excluded(n, 1);
  for (std::size_t s = 0; s < n; ++s) excluded[s] = !(reach[s] && !in_d[s] && s != x);
  const Restriction w = Restriction::complement_of(n, excluded);

  bool x_reaches = false;
  for (auto k = q.rates.row_ptr[x]; k < q.rates.row_ptr[x + 1]; ++k)
    if (reach[q.rates.col[k]] && q.rates.col[k] != x) x_reaches = true;
  if (!x_reaches) return {0.0, false};

  const bool dtmc = route == EscapeRoute::EmbeddedDtmc;
  Vec g;
  if (w.size() > 0) {
    std::vector<Eigen::Triplet<double, int>> t;
    Vec b = Vec::Zero(static_cast<Eigen::Index>(w.size()));
    for (std::size_t a = 0; a < w.size(); ++a) {
      const std::size_t y = w.states[a];
      const double scale = dtmc ? 1.0 / q.exit[y] : 1.0;
      t.emplace_back(static_cast<int>(a), static_cast<int>(a), dtmc ? 1.0 : q.exit[y]);
      for (auto k = q.rates.row_ptr[y]; k < q.rates.row_ptr[y + 1]; ++k) {
        const auto z = q.rates.col[k];
        const double p = dtmc ? q.rates.val[k] * scale : q.rates.val[k];
        if (in_d[z]) b(static_cast<Eigen::Index>(a)) += p;
        else if (w.local[z] >= 0) t.emplace_back(static_cast<int>(a), static_cast<int>(w.local[z]), -p);
      }
    }
    linalg::SpMat a(static_cast<int>(w.size()), static_cast<int>(w.size()));
    a.setFromTriplets(t.begin(), t.end());
    linalg::LuSolver lu(a);
    g = lu.solve(b);
  }
  double e = 0.0;
  for (auto k = q.rates.row_ptr[x]; k < q.rates.row_ptr[x + 1]; ++k) {
    const auto z = q.rates.col[k];
    const double p = dtmc ? q.rates.val[k] / q.exit[x] : q.rates.val[k];
    if (in_d[z]) e += p;
    else if (w.local[z] >= 0) e += p * g(w.local[z]);
  }
  if (!dtmc) e /= q.exit[x];
  return {std::clamp(e, 0.0, 1.0), true};
}

std::vector<double> escape_probabilities_outside(const Generator& q, const StateSet& target,
                                                 const AnalysisOptions& options) {
  const std::size_t n = q.size();
  const auto in_d = membership(n, target);
  const Restriction r = Restriction::complement_of(n, in_d);
  if (r.size() == 0) throw ValidationError("no states outside the target set");
  const auto reach = can_reach(q, target);
  for (auto s : r.states)
    if (!reach[s])
      throw SolverError("state " + std::to_string(s) +
                        " never reaches the target set; escape denominator is zero");
  linalg::NegatedBlockSolver solver(q, r, options.solver);
  std::vector<double> out(r.size());
  const std::size_t m = r.size();
  constexpr std::size_t kBatch = 64;
  for (std::size_t lo = 0; lo < m; lo += kBatch) {
    const std::size_t cols = std::min(kBatch, m - lo);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(cols));
    for (std::size_t c = 0; c < cols; ++c) rhs(static_cast<Eigen::Index>(lo + c), static_cast<Eigen::Index>(c)) = 1.0;
    const Eigen::MatrixXd g = solver.solve_many(rhs);
    for (std::size_t c = 0; c < cols; ++c) {
      const double gyy = g(static_cast<Eigen::Index>(lo + c), static_cast<Eigen::Index>(c));
      out[lo + c] = std::clamp(1.0 / (q.exit[r.states[lo + c]] * gyy), 0.0, 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Indices

IndexResult metastability_index_ht(const Generator& q, const StateSet& target, double threshold,
                                   const AnalysisOptions& options) {
  if (target.size() < 2) throw ValidationError("metastability index needs |D| >= 2");
  if (target.size() >= q.size()) throw ValidationError("D covers every state");
  IndexResult res;
  res.threshold = threshold;
  const HittingStats h = expected_hitting_time(q, target, options);
  const auto in_d = membership(q.size(), target);
  for (std::size_t s = 0; s < q.size(); ++s)
    if (!in_d[s] && h.mean[s] > res.numerator) {
      res.numerator = h.mean[s];
      res.numerator_state = s;
    }
  res.denominator = std::numeric_limits<double>::infinity();
  for (auto x : target) {
    StateSet rest;
    for (auto s : target)
      if (s != x) rest.push_back(s);
    const double t = expected_hitting_time(q, rest, options).mean[x];
    if (t < res.denominator) {
      res.denominator = t;
      res.denominator_state = x;
    }
  }
  if (!(res.denominator > 0.0)) throw SolverError("zero hitting time between elements of D");
  res.index = static_cast<double>(q.size()) * res.numerator / res.denominator;
  res.metastable = res.index < threshold;
  return res;
}

IndexResult metastability_index_escape(const Generator& q, const StateSet& target,
                                       double threshold, const AnalysisOptions& options) {
  if (target.size() < 2) throw ValidationError("metastability index needs |D| >= 2");
  if (target.size() >= q.size())
    throw ValidationError("D covers every state; the denominator ranges over an empty set");
  IndexResult res;
  res.threshold = threshold;
  res.numerator = -1.0;
  for (auto x : target) {
    const double e = escape_probability(q, x, target, EscapeRoute::EmbeddedDtmc, options).probability;
    if (e > res.numerator) {
      res.numerator = e;
      res.numerator_state = x;
    }
  }
  const auto in_d = membership(q.size(), target);
  const Restriction r = Restriction::complement_of(q.size(), in_d);
  const auto outside = escape_probabilities_outside(q, target, options);
  res.denominator = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < outside.size(); ++a)
    if (outside[a] < res.denominator) {
      res.denominator = outside[a];
      res.denominator_state = r.states[a];
    }
  if (!(res.denominator > 0.0))
    throw SolverError("escape denominator is zero; D misses an attractor");
  res.index = static_cast<double>(q.size()) * res.numerator / res.denominator;
  res.metastable = res.index < threshold;
  return res;
}

std::vector<NestedLevel> nested_metastable_sets(const Generator& q, const StateSet& target,
                                                const AnalysisOptions& options) {
  if (target.size() < 2) throw ValidationError("nested sets need |D| >= 2");
  std::vector<NestedLevel> levels;
  StateSet current = make_state_set(target);
  while (current.size() >= 2) {
    NestedLevel lvl;
    lvl.level = current.size();
    lvl.before = current;
    double best = -1.0;
    for (auto x : current) {
      const double e =
          escape_probability(q, x, current, EscapeRoute::EmbeddedDtmc, options).probability;
      if (e > best) {
        best = e;
        lvl.peeled = x;
      }
    }
    lvl.escape = best;
    for (auto s : current)
      if (s != lvl.peeled) lvl.after.push_back(s);
    current = lvl.after;
    levels.push_back(std::move(lvl));
  }
  return levels;
}

// ---------------------------------------------------------------------------
// Eigenvalues

namespace {

struct ArnoldiPass {
  std::vector<std::complex<double>> values;
  std::size_t restarts = 0;
  double max_residual = 0.0;
};

ArnoldiPass shift_invert_arnoldi(const Generator& q, std::size_t k, double shift,
                                 const EigenOptions& options) {
  const std::size_t n = q.size();
  std::vector<Eigen::Triplet<double, int>> t;
  for (std::size_t i = 0; i < n; ++i) {
    t.emplace_back(static_cast<int>(i), static_cast<int>(i), q.exit[i] + shift);
    for (auto kk = q.rates.row_ptr[i]; kk < q.rates.row_ptr[i + 1]; ++kk)
      t.emplace_back(static_cast<int>(i), static_cast<int>(q.rates.col[kk]), -q.rates.val[kk]);
  }
  linalg::SpMat a(static_cast<int>(n), static_cast<int>(n));
  a.setFromTriplets(t.begin(), t.end());
  const linalg::LuSolver lu(a);

  const std::size_t m = std::min(n, options.krylov_dim ? options.krylov_dim : std::max<std::size_t>(2 * k + 20, 40));
  const auto N = static_cast<Eigen::Index>(n);
  Vec start(N);
  for (Eigen::Index i = 0; i < N; ++i) start(i) = 1.0 + 0.5 * std::sin(0.7 * static_cast<double>(i) + 0.3);
  start.normalize();

  ArnoldiPass out;
  for (std::size_t restart = 0; restart <= options.max_restarts; ++restart) {
    Eigen::MatrixXd v(N, static_cast<Eigen::Index>(m + 1));
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m + 1), static_cast<Eigen::Index>(m));
    v.col(0) = start;
    std::size_t dim = m;
    double beta = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      Vec w = lu.solve(Vec(v.col(static_cast<Eigen::Index>(j))));
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t i = 0; i <= j; ++i) {
          const double d = v.col(static_cast<Eigen::Index>(i)).dot(w);
          h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += d;
          w -= d * v.col(static_cast<Eigen::Index>(i));
        }
      beta = w.norm();
      h(static_cast<Eigen::Index>(j + 1), static_cast<Eigen::Index>(j)) = beta;
      double hscale = 0.0;
      for (std::size_t i = 0; i <= j; ++i) hscale = std::max(hscale, std::abs(h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
      if (beta <= 1e-14 * hscale) {
        dim = j + 1;
        beta = 0.0;
        break;
      }
      v.col(static_cast<Eigen::Index>(j + 1)) = w / beta;
    }
    const Eigen::MatrixXd hm = h.topLeftCorner(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    Eigen::EigenSolver<Eigen::MatrixXd> es(hm, true);
    if (es.info() != Eigen::Success) throw SolverError("dense Hessenberg eigensolve failed");
    const auto theta = es.eigenvalues();
    const auto y = es.eigenvectors();
    std::vector<std::size_t> order(static_cast<std::size_t>(dim));
    std::iota(order.begin(), order.end(), 0);
    auto lam = [&](std::size_t i) { return 1.0 / theta(static_cast<Eigen::Index>(i)) - shift; };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a2, std::size_t b2) {
      const double ra = lam(a2).real(), rb = lam(b2).real();
      if (ra != rb) return ra < rb;
      return lam(a2).imag() < lam(b2).imag();
    });
    const std::size_t want = std::min(k, static_cast<std::size_t>(dim));
    double worst = 0.0;
    Eigen::VectorXcd combo = Eigen::VectorXcd::Zero(N);
    for (std::size_t w = 0; w < want; ++w) {
      const auto i = static_cast<Eigen::Index>(order[w]);
      const Eigen::VectorXcd yi = y.col(i) / y.col(i).norm();
      const double res = beta * std::abs(yi(static_cast<Eigen::Index>(dim) - 1)) / std::abs(theta(i));
      worst = std::max(worst, res);
      combo += v.leftCols(static_cast<Eigen::Index>(dim)).cast<std::complex<double>>() * yi;
    }
    out.values.clear();
    for (std::size_t w = 0; w < want; ++w) out.values.push_back(lam(order[w]));
    out.restarts = restart;
    out.max_residual = worst;
    if (worst <= options.tol || dim < m) return out;
    Vec next = combo.real();
    if (next.norm() == 0.0) next = combo.imag();
    start = next / next.norm();
  }
  throw SolverError("Arnoldi did not converge after " + std::to_string(options.max_restarts) +
                        " restarts",
                    out.max_residual, out.restarts);
}

}  // namespace

EigenResult dominant_eigenvalues(const Generator& q, std::size_t k, const EigenOptions& options) {
  if (k == 0) throw ValidationError("k must be >= 1");
  if (k > q.size()) throw ValidationError("k exceeds the number of states");
  const double scale = q.max_exit();
  if (!(scale > 0.0)) throw SolverError("generator has no transitions");
  const double s1 = options.initial_shift * scale;
  ArnoldiPass first = shift_invert_arnoldi(q, k, s1, options);
  double s2 = std::max(first.values.back().real(), 1e-13 * scale);
  s2 = std::min(s2, s1 * 1e3);
  ArnoldiPass second = shift_invert_arnoldi(q, k, s2, options);
  EigenResult res;
  res.values = second.values;
  res.shift = s2;
  res.restarts = first.restarts + second.restarts;
  res.max_residual = second.max_residual;
  return res;
}

std::vector<SpectralLevel> spectral_hitting_estimate(const Generator& q, const StateSet& target,
                                                     const AnalysisOptions& options,
                                                     const EigenOptions& eig) {
  if (target.size() < 2) throw ValidationError("the spectral relation needs |D| >= 2");
  const auto levels = nested_metastable_sets(q, target, options);
  const auto ev = dominant_eigenvalues(q, target.size(), eig);
  std::vector<SpectralLevel> out;
  for (const auto& lvl : levels) {
    SpectralLevel s;
    s.level = lvl.level;
    s.peeled = lvl.peeled;
    s.eigenvalue = ev.values[lvl.level - 1].real();
    const double e = expected_hitting_time(q, lvl.after, options).mean[lvl.peeled];
    s.inverse_hitting = 1.0 / e;
    s.relative_gap = std::abs(s.eigenvalue * e - 1.0);
    out.push_back(s);
  }
  return out;
}

double mixing_time_lower_bound(double lambda_real, double eps) {
  if (!(lambda_real > 0.0)) throw ValidationError("eigenvalue real part must be positive");
  if (!(eps > 0.0 && eps < 0.5)) throw ValidationError("epsilon must lie in (0, 1/2)");
  return std::log(1.0 / (2.0 * eps)) / lambda_real;
}

double tv_distance(const Generator& q, double t, std::span<const double> pi,
                   const std::vector<std::size_t>& starts, const TransientOptions& options) {
  double worst = 0.0;
  const double times[1] = {t};
  for (auto x : starts) {
    const auto d = transient_distribution(q, point_mass(q.size(), x), times, options);
    double tv = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) tv += std::abs(d[0].p[i] - pi[i]);
    worst = std::max(worst, 0.5 * tv);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Vector field

FieldPoint field_at(const RateModel& rm, std::size_t server, std::span<const int> u,
                    std::span<const int> v) {
  const ServerRates r = rm.rates(server, u, v);
  FieldPoint p;
  p.u = u[server];
  p.v = v[server];
  p.f_q = r.arrival_timeout + r.arrival + r.retry_fail + r.retry_succeed - r.completion;
  p.f_o = r.arrival_timeout - r.retry_succeed - r.orbit_drop;
  p.magnitude = std::hypot(p.f_q, p.f_o);
  p.angle = std::atan2(p.f_o, p.f_q);
  return p;
}

VectorField vector_field(const RateModel& rm, std::size_t server, int stride,
                         const std::vector<std::pair<int, int>>& fixed, kernels::Exec exec) {
  const StateSpace& sp = rm.space();
  if (server >= sp.servers()) throw ValidationError("server index out of range");
  if (stride < 1) throw ValidationError("stride must be >= 1");
  if (fixed.size() != sp.servers()) throw ValidationError("fixed coordinates need one pair per server");
  for (std::size_t i = 0; i < sp.servers(); ++i)
    if (i != server && (fixed[i].first < 0 || fixed[i].first > sp.queue_bound[i] ||
                        fixed[i].second < 0 || fixed[i].second > sp.orbit_bound[i]))
      throw ValidationError("fixed coordinates out of bounds");
  VectorField f;
  f.server = server;
  f.stride = stride;
  f.fixed = fixed;
  std::vector<int> us, vs;
  for (int u = 0; u <= sp.queue_bound[server]; u += stride) us.push_back(u);
  for (int v = 0; v <= sp.orbit_bound[server]; v += stride) vs.push_back(v);
  f.points.resize(us.size() * vs.size());
  const long total = static_cast<long>(f.points.size());
  auto compute = [&](long idx) {
    std::vector<int> u(sp.servers()), v(sp.servers());
    for (std::size_t i = 0; i < sp.servers(); ++i) {
      u[i] = fixed[i].first;
      v[i] = fixed[i].second;
    }
    const auto a = static_cast<std::size_t>(idx);
    u[server] = us[a % us.size()];
    v[server] = vs[a / us.size()];
    f.points[a] = field_at(rm, server, u, v);
  };
  if (exec == kernels::Exec::Serial) {
    for (long i = 0; i < total; ++i) compute(i);
  } else {
#pragma omp parallel for schedule(static)
    for (long i = 0; i < total; ++i) compute(i);
  }
  return f;
}

void write_field_csv(std::ostream& out, const VectorField& field) {
  out << "u,v,f_q,f_o,magnitude,angle_rad\n";
  for (const auto& p : field.points)
    out << p.u << ',' << p.v << ',' << fmt_num(p.f_q) << ',' << fmt_num(p.f_o) << ','
        << fmt_num(p.magnitude) << ',' << fmt_num(p.angle) << '\n';
}

// ---------------------------------------------------------------------------

RecoveryResult recovery_analysis(const CtmcModel& model, std::span<const double> start,
                                 const StateSet& target, std::span<const double> times,
                                 const AnalysisOptions& options, const TransientOptions& transient) {
  check_distribution(start, model.size());
  RecoveryResult res;
  res.hitting = hitting_time_stats(model.q, target, options);
  double m1 = 0.0, m2 = 0.0;
  for (std::size_t s = 0; s < model.size(); ++s) {
    if (start[s] == 0.0) continue;
    const double h = res.hitting.mean[s];
    const double sd = res.hitting.stddev[s];
    m1 += start[s] * h;
    m2 += start[s] * (sd * sd + h * h);
  }
  res.expected_time = m1;
  res.stddev = std::sqrt(std::max(0.0, m2 - m1 * m1));
  res.times.assign(times.begin(), times.end());
  std::vector<std::vector<double>> weights;
  for (std::size_t i = 0; i < model.program.size(); ++i) weights.push_back(u_observable(model.space, i));
  const auto obs = expected_observables(model.q, {std::vector<double>(start.begin(), start.end())},
                                        times, weights, transient);
  res.mean_u = obs[0];
  return res;
}

}  // namespace metastab
