#include <catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <sstream>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "metastab/analysis.hpp"
#include "metastab/ctmc.hpp"
#include "metastab/error.hpp"
#include "metastab/rng.hpp"

using namespace metastab;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

ProgramSpec single(double lambda, int n, int v, double mu = 10.0, double timeout = 9.0, int retries = 3) {
  return make_program("s", {{"s1", mu, 1, n, v, std::nullopt}}, {{"s1", lambda, timeout, retries}});
}

MatrixXd dense(const Generator& q) {
  const auto d = q.dense();
  MatrixXd m(static_cast<Eigen::Index>(d.size()), static_cast<Eigen::Index>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d[i][j];
  return m;
}

Generator two_state(double a, double b) { return Generator::from_dense({{-a, a}, {b, -b}}); }

// Bidirectional birth-death chain on 0..n.
Generator birth_death(int n, double up, double down) {
  std::vector<std::tuple<std::size_t, std::size_t, double>> t;
  for (int i = 0; i < n; ++i) {
    t.emplace_back(i, i + 1, up);
    t.emplace_back(i + 1, i, down);
  }
  return Generator::from_triplets(static_cast<std::size_t>(n + 1), t);
}

// Cliques {0,1} and {2,3} joined by a bridge 1 -> 2 of rate eps and 2 -> 1 of rate back.
Generator double_well(double eps, double back) {
  return Generator::from_triplets(4, {{0, 1, 1.0}, {1, 0, 1.0}, {2, 3, 1.0}, {3, 2, 1.0}, {1, 2, eps}, {2, 1, back}});
}
Generator double_well(double eps) { return double_well(eps, eps); }

Generator random_chain(std::size_t n, std::uint64_t seed, double density = 0.3) {
  Rng rng(seed);
  std::vector<std::tuple<std::size_t, std::size_t, double>> t;
  for (std::size_t i = 0; i < n; ++i) {
    t.emplace_back(i, (i + 1) % n, 0.1 + rng.uniform());  // keeps it irreducible
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && rng.uniform() < density) t.emplace_back(i, j, 0.01 + 3.0 * rng.uniform());
  }
  return Generator::from_triplets(n, t);
}

// Dense E_x[tau_D] on S \ D.
VectorXd dense_hitting(const Generator& q, const StateSet& d, VectorXd* second = nullptr) {
  const MatrixXd a = dense(q);
  const auto n = a.rows();
  const auto in = membership(static_cast<std::size_t>(n), d);
  std::vector<Eigen::Index> off;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!in[static_cast<std::size_t>(i)]) off.push_back(i);
  const auto m = static_cast<Eigen::Index>(off.size());
  MatrixXd b(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) b(i, j) = -a(off[i], off[j]);
  const auto lu = b.fullPivLu();
  const VectorXd h = lu.solve(VectorXd::Ones(m));
  VectorXd full = VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < m; ++i) full(off[i]) = h(i);
  if (second) {
    const VectorXd m2 = lu.solve(2.0 * h);
    *second = VectorXd::Zero(n);
    for (Eigen::Index i = 0; i < m; ++i) (*second)(off[i]) = m2(i);
  }
  return full;
}

// First-step analysis on the jump chain: P_x(hit D \ x before returning to x).
double dense_escape(const Generator& q, std::size_t x, const StateSet& d) {
  const MatrixXd a = dense(q);
  const auto n = a.rows();
  MatrixXd p = MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    if (a(i, i) < 0)
      for (Eigen::Index j = 0; j < n; ++j)
        if (j != i) p(i, j) = a(i, j) / -a(i, i);
  std::vector<char> target(static_cast<std::size_t>(n), 0);
  for (auto s : d)
    if (s != x) target[s] = 1;
  // h = 1 on target, 0 at x, harmonic elsewhere
  MatrixXd m = MatrixXd::Identity(n, n);
  VectorXd rhs = VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (target[static_cast<std::size_t>(i)]) {
      rhs(i) = 1.0;
    } else if (static_cast<std::size_t>(i) != x) {
      m.row(i) -= p.row(i);
    }
  }
  const VectorXd h = m.fullPivLu().solve(rhs);
  return p.row(static_cast<Eigen::Index>(x)).dot(h);
}

std::vector<double> uniform_dist(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("state set expressions", "[analysis]") {
  const StateSpace s = StateSpace::for_program(single(9.5, 100, 20));
  CHECK(parse_state_set("Low", s) == StateSet{0});
  CHECK(parse_state_set("High", s) == StateSet{s.size - 1});
  CHECK(parse_state_set("Low,High", s) == StateSet{0, s.size - 1});
  CHECK(parse_state_set("Low | High", s) == StateSet{0, s.size - 1});
  CHECK(parse_state_set("(3,2)", s) == StateSet{3 + 101 * 2});
  CHECK(parse_state_set("u<=10", s).size() == 11 * 21);
  CHECK(parse_state_set("u<=10", s) == low_queue_set(s, 0.1));
  CHECK(parse_state_set("u1<=10 && v1==0", s).size() == 11);
  CHECK(parse_state_set("u>98 && v>=19, Low", s).size() == 2 * 2 + 1);
  CHECK_THROWS_AS(parse_state_set("(101,0)", s), ValidationError);
  CHECK_THROWS_AS(parse_state_set("(1,2,3)", s), ValidationError);
  CHECK_THROWS_AS(parse_state_set("w<3", s), ValidationError);
  CHECK_THROWS_AS(parse_state_set("u2<3", s), ValidationError);
  CHECK_THROWS_AS(parse_state_set("Low,", s), ValidationError);
  CHECK_THROWS_AS(parse_state_set("Middle", s), ValidationError);
}

TEST_CASE("poisson window", "[analysis]") {
  for (double mean : {0.0, 0.3, 7.0, 250.0, 2e4}) {
    const PoissonWindow w = poisson_window(mean, 1e-10);
    double s = 0.0;
    for (double x : w.weights) s += x;
    CHECK_THAT(s, WithinAbs(1.0, 1e-13));
    if (mean > 0.0 && mean < 100.0) {
      auto pmf = [&](std::size_t j) { return std::exp(j * std::log(mean) - mean - std::lgamma(j + 1.0)); };
      double kept = 0.0;
      for (std::size_t j = w.left; j < w.left + w.weights.size(); ++j) kept += pmf(j);
      CHECK(kept >= 1.0 - 1e-10);
      const std::size_t k = static_cast<std::size_t>(mean);
      REQUIRE(k >= w.left);
      CHECK_THAT(w.weights[k - w.left], WithinRel(pmf(k) / kept, 1e-12));
    }
  }
}

TEST_CASE("two-state transient closed form", "[analysis]") {
  const double a = 0.7, b = 1.9;
  const Generator q = two_state(a, b);
  const std::vector<double> pi0{1.0, 0.0};
  const std::vector<double> times{0.0, 0.1, 1.0, 5.0, 40.0};
  const auto out = transient_distribution(q, pi0, times);
  CHECK(out[0].p == pi0);
  for (std::size_t j = 0; j < times.size(); ++j) {
    const double t = times[j];
    CHECK_THAT(out[j].p[0], WithinAbs((b + a * std::exp(-(a + b) * t)) / (a + b), 1e-9));
  }
  // observable u on the M/M/1 chain with one slot
  const Generator mm = compile(make_program("n1", {{"s1", 2.0, 1, 1, 0, std::nullopt}}, {{"s1", 0.5, 9.0, 0}})).q;
  const std::vector<double> u{0.0, 1.0};
  const auto e = expected_observable(mm, pi0, times, u);
  for (std::size_t j = 0; j < times.size(); ++j)
    CHECK_THAT(e[j], WithinAbs(0.5 * (1.0 - std::exp(-2.5 * times[j])) / 2.5, 1e-9));
}

TEST_CASE("uniformization matches the dense matrix exponential", "[analysis]") {
  const Generator q = compile(single(9.5, 14, 5)).q;
  REQUIRE(q.size() <= 200);
  const MatrixXd a = dense(q);
  std::vector<double> pi0(q.size(), 0.0);
  pi0[q.size() - 1] = 0.5;
  pi0[3] = 0.5;
  const std::vector<double> times{0.2, 1.5, 12.0, 90.0};
  const auto out = transient_distribution(q, pi0, times);
  const Eigen::RowVectorXd p0 = Eigen::Map<const Eigen::RowVectorXd>(pi0.data(), static_cast<Eigen::Index>(pi0.size()));
  for (std::size_t j = 0; j < times.size(); ++j) {
    const Eigen::RowVectorXd want = p0 * (a * times[j]).exp();
    double err = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      err = std::max(err, std::abs(out[j].p[i] - want(static_cast<Eigen::Index>(i))));
      CHECK(out[j].p[i] >= -1e-12);
      sum += out[j].p[i];
    }
    CHECK(err <= 1e-8);
    CHECK(std::abs(sum - 1.0) <= 1e-10);
  }
}

TEST_CASE("expected observables conserve mass and agree with full distributions", "[analysis][property]") {
  const Generator q = compile(single(9.5, 100, 20)).q;
  std::vector<double> ones(q.size(), 1.0);
  const StateSpace sp = StateSpace::for_program(single(9.5, 100, 20));
  const auto u = u_observable(sp, 0);
  const std::vector<double> times{0.0, 3.0, 50.0, 400.0};
  const std::vector<std::vector<double>> starts{point_mass(q.size(), 0), point_mass(q.size(), q.size() - 1)};
  const auto res = expected_observables(q, starts, times, {ones, u});
  for (const auto& per_init : res)
    for (double x : per_init[0]) CHECK_THAT(x, WithinAbs(1.0, 1e-10));
  const auto dist = transient_distribution(q, starts[1], times);
  for (std::size_t j = 0; j < times.size(); ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) m += dist[j].p[i] * u[i];
    CHECK_THAT(res[1][1][j], WithinAbs(m, 1e-9 * std::max(1.0, m)));
  }
  TransientOptions serial;
  serial.exec = kernels::Exec::Serial;
  const auto rs = expected_observables(q, starts, times, {ones, u}, serial);
  CHECK(std::memcmp(rs[1][1].data(), res[1][1].data(), times.size() * sizeof(double)) == 0);
}

TEST_CASE("stationary distributions", "[analysis]") {
  const auto sym = stationary_distribution(two_state(3.0, 3.0));
  CHECK_THAT(sym.pi[0], WithinAbs(0.5, 1e-14));

  for (int n : {5, 20, 50}) {
    // timeout long enough that r(u) underflows to zero
    const ProgramSpec p = make_program("mm1", {{"s1", 10.0, 1, n, 0, std::nullopt}}, {{"s1", 6.0, 1e4, 0}});
    const Generator q = compile(p).q;
    const auto st = stationary_distribution(q);
    // dense null space
    const MatrixXd a = dense(q);
    MatrixXd m = a.transpose();
    m.row(0).setOnes();
    VectorXd rhs = VectorXd::Zero(m.rows());
    rhs(0) = 1.0;
    const VectorXd want = m.fullPivLu().solve(rhs);
    for (int i = 0; i <= n; ++i) {
      CHECK_THAT(st.pi[static_cast<std::size_t>(i)], WithinAbs(want(i), 1e-12));
      if (i > 0) CHECK_THAT(st.pi[static_cast<std::size_t>(i)] / st.pi[static_cast<std::size_t>(i - 1)], WithinRel(0.6, 1e-9));
    }
    CHECK(st.residual <= 1e-10);
  }

  AnalysisOptions gm;
  gm.solver.method = linalg::Method::Gmres;
  const Generator q = compile(single(9.5, 100, 20)).q;
  const auto d = stationary_distribution(q);
  const auto g = stationary_distribution(q, gm);
  double diff = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) diff = std::max(diff, std::abs(d.pi[i] - g.pi[i]));
  CHECK(diff <= 1e-8);
}

TEST_CASE("nominal model is bimodal at lambda 9.5", "[analysis]") {
  const ProgramSpec p = single(9.5, 100, 20);
  const CtmcModel m = compile(p);
  const auto st = stationary_distribution(m.q);
  std::vector<double> marg(101, 0.0);
  for (std::size_t i = 0; i < m.size(); ++i) marg[static_cast<std::size_t>(m.space.u(i, 0))] += st.pi[i];
  const auto trough = std::min_element(marg.begin() + 40, marg.begin() + 80);
  const auto upper = std::max_element(trough, marg.end());
  INFO("trough at " << (trough - marg.begin()) << ", upper mode at " << (upper - marg.begin()));
  CHECK(marg[0] > *trough);
  CHECK(*upper > 1.2 * *trough);
  CHECK(upper - marg.begin() >= 80);
}

TEST_CASE("hitting times against dense solves", "[analysis]") {
  const Generator bd = birth_death(3, 1.0, 2.0);
  const auto h = expected_hitting_time(bd, {0});
  const VectorXd want = dense_hitting(bd, {0});
  CHECK(h.mean[0] == 0.0);
  for (int i = 1; i <= 3; ++i) CHECK_THAT(h.mean[static_cast<std::size_t>(i)], WithinAbs(want(i), 1e-10));
  // hand solution: h1 = 7/8, h2 = 13/8, h3 = 17/8
  CHECK_THAT(h.mean[1], WithinAbs(0.875, 1e-12));
  CHECK_THAT(h.mean[2], WithinAbs(1.625, 1e-12));
  CHECK_THAT(h.mean[3], WithinAbs(2.125, 1e-12));

  const Generator b5 = birth_death(5, 1.3, 0.9);
  VectorXd m2;
  const VectorXd m1 = dense_hitting(b5, {0}, &m2);
  const auto st = hitting_time_stats(b5, {0});
  for (int i = 1; i <= 5; ++i) {
    const double sd = std::sqrt(m2(i) - m1(i) * m1(i));
    CHECK_THAT(st.stddev[static_cast<std::size_t>(i)], WithinRel(sd, 1e-8));
  }
  CHECK(st.stddev[0] == 0.0);

  const auto two = hitting_time_stats(two_state(0.4, 3.0), {1});
  CHECK_THAT(two.mean[0], WithinRel(2.5, 1e-12));
  CHECK_THAT(two.stddev[0], WithinRel(2.5, 1e-8));

  const ProgramSpec p = single(9.5, 40, 10);
  const CtmcModel m = compile(p);
  const StateSet d = low_queue_set(m.space, 0.1);
  const auto sparse = expected_hitting_time(m.q, d);
  const VectorXd dd = dense_hitting(m.q, d);
  for (std::size_t i = 0; i < m.size(); ++i)
    CHECK_THAT(sparse.mean[i], WithinRel(dd(static_cast<Eigen::Index>(i)), 1e-8) || WithinAbs(0.0, 0.0));
  for (auto s : d) CHECK(sparse.mean[s] == 0.0);
}

TEST_CASE("unreachable targets are reported", "[analysis]") {
  const Generator q = Generator::from_triplets(3, {{0, 1, 1.0}, {1, 0, 1.0}, {2, 1, 1.0}});
  CHECK_THROWS_AS(expected_hitting_time(q, {2}), SolverError);
  CHECK_THROWS_AS(expected_hitting_time(q, {}), ValidationError);
  const auto r = can_reach(q, {0});
  CHECK(r == std::vector<char>{1, 1, 1});
}

TEST_CASE("escape probabilities", "[analysis]") {
  // every neighbour of x is in D
  const Generator star = Generator::from_triplets(3, {{0, 1, 1.0}, {0, 2, 2.0}, {1, 0, 1.0}, {2, 0, 1.0}});
  CHECK_THAT(escape_probability(star, 0, {1, 2}).probability, WithinAbs(1.0, 1e-15));

  // triangle with uniform rates
  const Generator ring = Generator::from_triplets(
      3, {{0, 1, 1.0}, {1, 0, 1.0}, {1, 2, 1.0}, {2, 1, 1.0}, {2, 0, 1.0}, {0, 2, 1.0}});
  const double e_ring = escape_probability(ring, 0, {2}).probability;
  CHECK_THAT(e_ring, WithinAbs(dense_escape(ring, 0, {2}), 1e-14));
  CHECK_THAT(e_ring, WithinAbs(0.5 + 0.5 * 0.5, 1e-14));
  // middle of a three-state line
  const Generator line = birth_death(2, 1.0, 1.0);
  CHECK_THAT(escape_probability(line, 1, {2}).probability, WithinAbs(0.5, 1e-14));

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Generator q = random_chain(20, seed);
    const StateSet d{seed % 20, (seed * 7 + 3) % 20};
    for (std::size_t x : {std::size_t{0}, std::size_t{5}, d[0]}) {
      if (d.size() == 1 && d[0] == x) continue;
      const double a = escape_probability(q, x, d, EscapeRoute::EmbeddedDtmc).probability;
      const double b = escape_probability(q, x, d, EscapeRoute::Ctmc).probability;
      CHECK(std::abs(a - b) <= 1e-12);
      CHECK_THAT(a, WithinAbs(dense_escape(q, x, d), 1e-12));
    }
  }

  const Generator cut = Generator::from_triplets(3, {{0, 1, 1.0}, {1, 0, 1.0}, {2, 0, 1.0}});
  const auto un = escape_probability(cut, 0, {2});
  CHECK(un.probability == 0.0);
  CHECK_FALSE(un.reachable);
}

TEST_CASE("batched outside escapes match single solves", "[analysis]") {
  const Generator q = compile(single(9.5, 30, 6)).q;
  const StateSet d{0, q.size() - 1};
  const auto all = escape_probabilities_outside(q, d);
  const auto in = membership(q.size(), d);
  std::size_t k = 0;
  for (std::size_t y = 0; y < q.size(); ++y) {
    if (in[y]) continue;
    if (y % 17 == 0) CHECK_THAT(all[k], WithinRel(escape_probability(q, y, d).probability, 1e-9));
    ++k;
  }
}

TEST_CASE("metastability indices", "[analysis]") {
  // stable birth-death with D at both ends
  const Generator bd = birth_death(20, 0.5, 1.0);
  const StateSet d{0, 20};
  const auto ix = metastability_index_ht(bd, d);
  const VectorXd h = dense_hitting(bd, d);
  const double sup = h.maxCoeff();
  const double inf = std::min(dense_hitting(bd, {20})(0), dense_hitting(bd, {0})(20));
  CHECK_THAT(ix.index, WithinRel(21.0 * sup / inf, 1e-8));
  CHECK_FALSE(ix.metastable);
  CHECK(ix.index > 0.1);

  // D = S
  const Generator tri = two_state(1.0, 1.0);
  CHECK_THROWS_AS(metastability_index_escape(tri, {0, 1}), ValidationError);
  CHECK_THROWS_AS(metastability_index_ht(bd, {3}), ValidationError);

  double prev = 1e300;
  for (double eps : {1e-2, 1e-4}) {
    const Generator q = double_well(eps);
    const auto r = metastability_index_escape(q, {0, 3});
    // dense oracle: sup over D, inf over the bridge ends
    const double num = std::max(dense_escape(q, 0, {0, 3}), dense_escape(q, 3, {0, 3}));
    const double den = std::min(dense_escape(q, 1, {0, 3}), dense_escape(q, 2, {0, 3}));
    CHECK_THAT(r.index, WithinRel(4.0 * num / den, 1e-9));
    CHECK(r.index < prev);
    prev = r.index;
  }
  CHECK(prev < 1e-3);
}

TEST_CASE("scaling the generator", "[analysis][property]") {
  const Generator q = compile(single(9.5, 30, 6)).q;
  const double alpha = 3.7;
  const Generator qa = q.scaled(alpha);
  const StateSet d{0, q.size() - 1};
  const auto h = expected_hitting_time(q, {0});
  const auto ha = expected_hitting_time(qa, {0});
  for (std::size_t i = 0; i < q.size(); ++i) CHECK_THAT(ha.mean[i] * alpha, WithinRel(h.mean[i], 1e-9) || WithinAbs(0.0, 0.0));
  CHECK_THAT(metastability_index_ht(qa, d).index, WithinRel(metastability_index_ht(q, d).index, 1e-9));
  CHECK_THAT(metastability_index_escape(qa, d).index, WithinRel(metastability_index_escape(q, d).index, 1e-9));
  const auto e = dominant_eigenvalues(q, 3);
  const auto ea = dominant_eigenvalues(qa, 3);
  for (std::size_t i = 1; i < 3; ++i) CHECK_THAT(ea.values[i].real(), WithinRel(alpha * e.values[i].real(), 1e-7));
  CHECK_THAT(mixing_time_lower_bound(alpha * e.values[1].real(), 0.01),
             WithinRel(mixing_time_lower_bound(e.values[1].real(), 0.01) / alpha, 1e-7));
}

TEST_CASE("nested metastable sets", "[analysis]") {
  const Generator dw = double_well(1e-3);
  const auto sym = nested_metastable_sets(dw, {0, 3});
  REQUIRE(sym.size() == 1);
  CHECK(sym[0].peeled == 0);  // tie goes to the lower index
  CHECK(sym[0].after == StateSet{3});

  const Generator lop = Generator::from_triplets(
      4, {{0, 1, 1.0}, {1, 0, 1.0}, {2, 3, 1.0}, {3, 2, 1.0}, {1, 2, 1e-3}, {2, 1, 1e-2}});
  const auto k2 = nested_metastable_sets(lop, {0, 3});
  CHECK(k2[0].peeled == (dense_escape(lop, 0, {0, 3}) > dense_escape(lop, 3, {0, 3}) ? 0u : 3u));

  const Generator q = random_chain(30, 99, 0.15);
  const StateSet d{2, 9, 17, 25};
  const auto levels = nested_metastable_sets(q, d);
  REQUIRE(levels.size() == 3);
  for (std::size_t l = 0; l < levels.size(); ++l) {
    StateSet want;
    for (auto s : levels[l].before)
      if (s != levels[l].peeled) want.push_back(s);
    CHECK(levels[l].after == want);
    if (l + 1 < levels.size()) CHECK(levels[l + 1].before == levels[l].after);
    double best = 0.0;
    for (auto x : levels[l].before) best = std::max(best, dense_escape(q, x, levels[l].before));
    CHECK_THAT(levels[l].escape, WithinAbs(best, 1e-12));
  }
}

TEST_CASE("dominant eigenvalues", "[analysis]") {
  const auto two = dominant_eigenvalues(two_state(0.3, 1.1), 2);
  CHECK(std::abs(two.values[0]) <= 1e-8 * 1.1);
  CHECK_THAT(two.values[1].real(), WithinRel(1.4, 1e-10));

  for (std::uint64_t seed : {3u, 4u}) {
    const Generator q = random_chain(60, seed);
    const auto e = dominant_eigenvalues(q, 4);
    CHECK(std::abs(e.values[0]) <= 1e-8 * q.max_abs());
    for (std::size_t i = 1; i < 4; ++i) CHECK(e.values[i].real() > 0.0);
    // dense reference
    Eigen::EigenSolver<MatrixXd> es(-dense(q));
    std::vector<double> re;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) re.push_back(es.eigenvalues()(i).real());
    std::sort(re.begin(), re.end());
    for (std::size_t i = 1; i < 4; ++i) CHECK_THAT(e.values[i].real(), WithinRel(re[i], 1e-6));
  }

  const auto hi = dominant_eigenvalues(compile(single(9.5, 100, 20)).q, 3);
  const auto lo = dominant_eigenvalues(compile(single(8.0, 100, 20)).q, 3);
  CHECK(std::abs(hi.values[0]) <= 1e-8 * 200.0);
  INFO("lambda2 at 9.5: " << hi.values[1].real() << ", at 8: " << lo.values[1].real());
  CHECK(hi.values[1].real() * 5.0 < lo.values[1].real());
}

TEST_CASE("spectral relation on double wells", "[analysis]") {
  // the right well is the deep one
  const auto coarse = spectral_hitting_estimate(double_well(1e-2, 1e-4), {0, 3});
  const auto fine = spectral_hitting_estimate(double_well(1e-4, 1e-8), {0, 3});
  REQUIRE(fine.size() == 1);
  CHECK(fine[0].peeled == 0);
  CHECK(fine[0].relative_gap <= 0.05);
  CHECK(coarse[0].relative_gap > fine[0].relative_gap);
  CHECK_THROWS_AS(spectral_hitting_estimate(double_well(1e-2), {0}), ValidationError);
  // equal wells: both leak, so lambda_2 is twice the one-way rate
  const auto sym = spectral_hitting_estimate(double_well(1e-4), {0, 3});
  CHECK_THAT(sym[0].eigenvalue / sym[0].inverse_hitting, WithinAbs(2.0, 1e-3));
}

TEST_CASE("mixing time bound and total variation", "[analysis]") {
  CHECK_THAT(mixing_time_lower_bound(1.0, 1.0 / (2.0 * std::exp(1.0))), WithinAbs(1.0, 1e-14));
  CHECK_THROWS_AS(mixing_time_lower_bound(0.0, 0.01), ValidationError);
  CHECK_THROWS_AS(mixing_time_lower_bound(1.0, 0.5), ValidationError);

  const Generator q = two_state(1.0, 1.0);
  const std::vector<double> pi{0.5, 0.5};
  CHECK_THAT(tv_distance(q, 0.0, pi, {0, 1}), WithinAbs(0.5, 1e-14));
  CHECK_THAT(tv_distance(q, 1.0, pi, {0, 1}), WithinAbs(0.5 * std::exp(-2.0), 1e-10));
  // the distance must still exceed eps at the lower bound
  const double t = mixing_time_lower_bound(2.0, 0.01);
  CHECK(tv_distance(q, 0.999 * t, pi, {0, 1}) > 0.01);
}

TEST_CASE("vector field", "[analysis]") {
  const RateModel rm(single(9.5, 100, 20));
  const int u0[1] = {0}, v0[1] = {0};
  const FieldPoint f = field_at(rm, 0, u0, v0);
  CHECK(f.f_q == 9.5);
  CHECK(f.f_o == 0.0);
  CHECK(f.angle == 0.0);

  const auto start = std::chrono::steady_clock::now();
  const VectorField vf = vector_field(rm, 0, 1, {{0, 0}});
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  CHECK(ms < 100.0);
  REQUIRE(vf.points.size() == 2121);
  const VectorField vs = vector_field(rm, 0, 1, {{0, 0}}, kernels::Exec::Serial);
  std::vector<Transition> out;
  for (std::size_t k = 0; k < vf.points.size(); ++k) {
    const auto& p = vf.points[k];
    CHECK(p.u == static_cast<int>(k % 101));
    const int uu[1] = {p.u}, vv[1] = {p.v};
    const FieldPoint single_pt = field_at(rm, 0, uu, vv);
    CHECK(std::memcmp(&single_pt.f_q, &p.f_q, sizeof(double)) == 0);
    CHECK(std::memcmp(&single_pt.f_o, &p.f_o, sizeof(double)) == 0);
    CHECK(std::memcmp(&vs.points[k].magnitude, &p.magnitude, sizeof(double)) == 0);
    CHECK(p.magnitude == std::hypot(p.f_q, p.f_o));
    CHECK(p.angle == std::atan2(p.f_o, p.f_q));
    // displacement-weighted sum of transition rates
    rm.transitions(uu, vv, out);
    double fq = 0.0, fo = 0.0;
    for (const auto& t : out) {
      fq += t.rate * (rm.space().u(t.target, 0) - p.u);
      fo += t.rate * (rm.space().v(t.target, 0) - p.v);
    }
    CHECK_THAT(p.f_q, WithinAbs(fq, 1e-10));
    CHECK_THAT(p.f_o, WithinAbs(fo, 1e-10));
  }

  const VectorField coarse = vector_field(rm, 0, 10, {{0, 0}});
  CHECK(coarse.points.size() == 11 * 3);
  std::ostringstream csv;
  write_field_csv(csv, coarse);
  CHECK(csv.str().rfind("u,v,f_q,f_o,magnitude,angle_rad\n", 0) == 0);
  CHECK_THROWS_AS(vector_field(rm, 0, 0, {{0, 0}}), ValidationError);
}

TEST_CASE("recovery analysis", "[analysis]") {
  const CtmcModel m = compile(single(8.0, 40, 10));
  const StateSet target = low_queue_set(m.space, 0.1);
  const std::vector<double> times{0.0, 10.0, 100.0};
  const auto in = recovery_analysis(m, point_mass(m.size(), 0), target, times);
  CHECK(in.expected_time == 0.0);
  CHECK(in.stddev == 0.0);
  const auto r = recovery_analysis(m, point_mass(m.size(), m.size() - 1), target, times);
  const VectorXd h = dense_hitting(m.q, target);
  CHECK_THAT(r.expected_time, WithinRel(h(static_cast<Eigen::Index>(m.size() - 1)), 1e-8));
  CHECK(r.mean_u[0][0] == 40.0);
  CHECK(r.mean_u[0][2] < r.mean_u[0][1]);
  CHECK(r.stddev > 0.0);
}
