#include <catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <sstream>

#include "metastab/ctmc.hpp"
#include "metastab/error.hpp"
#include "metastab/io.hpp"
#include "metastab/model.hpp"

using namespace metastab;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ProgramSpec nominal(double lambda = 9.5, int n = 100, int v = 20) {
  return make_program("nominal", {{"s1", 10.0, 1, n, v, std::nullopt}}, {{"s1", lambda, 9.0, 3}});
}

ProgramSpec two_tier() {
  return make_program("two_tier",
                      {{"front", 1000.0, 32, 100, 20, std::string("back")}, {"back", 2.8, 1, 100, 20, std::nullopt}},
                      {{"front", 0.5, 5.0, 5}, {"back", 0.0, 5.0, 3}}, {true});
}

// Poisson tail sum evaluated term by term in log space.
double oracle_r(int u, double m) {
  double s = 0.0;
  for (int i = 1; i <= u; ++i) s += std::exp(i * std::log(m) - std::lgamma(i + 1.0) - m);
  return s;
}

// Single-server generator written out from the transition list.
std::map<std::pair<std::size_t, std::size_t>, double> oracle_single(const ProgramSpec& p) {
  const auto& s = p.servers[0];
  const double lam = p.arrival_rate(0), to = p.timeout(0);
  const double a = p.retries(0) / (p.retries(0) + 1.0);
  const int n = s.queue_bound, vb = s.orbit_bound;
  auto idx = [&](int u, int v) { return static_cast<std::size_t>(u + (n + 1) * v); };
  std::map<std::pair<std::size_t, std::size_t>, double> q;
  auto add = [&](int u, int v, int u2, int v2, double rate) {
    if (rate > 0.0 && u2 >= 0 && u2 <= n && v2 >= 0 && v2 <= vb) q[{idx(u, v), idx(u2, v2)}] += rate;
  };
  for (int v = 0; v <= vb; ++v)
    for (int u = 0; u <= n; ++u) {
      const double r = oracle_r(u, s.threads * s.service_rate * to);
      add(u, v, u + 1, v + 1, lam * r);
      add(u, v, u + 1, v, lam * (1 - r));
      add(u, v, u - 1, v, std::min(s.threads, u) * s.service_rate);
      add(u, v, u + 1, v, a * v * r / to);
      add(u, v, u + 1, v - 1, a * v * (1 - r) / to);
      add(u, v, u, v - 1, (1 - a) * v / to);
    }
  return q;
}

}  // namespace

TEST_CASE("failure probability", "[ctmc]") {
  CHECK(failure_probability(0, 10.0, 9.0) == 0.0);
  CHECK_THAT(failure_probability(1, 1.0, 1.0), WithinAbs(std::exp(-1.0), 1e-15));
  double prev = 0.0;
  for (int u = 0; u <= 100; ++u) {
    const double r = failure_probability(u, 10.0, 9.0);
    CHECK(r >= prev);
    CHECK(r < 1.0);
    CHECK_THAT(r, WithinAbs(oracle_r(u, 90.0), 1e-12));
    prev = r;
  }
  // large mean, no overflow
  CHECK(std::isfinite(failure_probability(5000, 1000.0, 5.0)));
  CHECK(failure_probability(3, 10.0, kNoTimeout) == 0.0);
}

TEST_CASE("effective service and arrival rates", "[ctmc]") {
  const ProgramSpec p = nominal();
  const int u5[1] = {5};
  const int u0[1] = {0};
  CHECK(effective_service_rate(p, 0, u5) == 10.0);
  CHECK(effective_service_rate(p, 0, u0) == 0.0);
  CHECK(effective_arrival_rate(p, 0, u5) == 9.5);

  const ProgramSpec t = two_tier();
  const int u[2] = {32, 40};
  CHECK_THAT(effective_service_rate(t, 1, u), WithinAbs(2.8, 1e-15));
  CHECK_THAT(effective_service_rate(t, 0, u), WithinAbs(2.8, 1e-15));
  CHECK_THAT(effective_arrival_rate(t, 0, u), WithinAbs(0.5, 1e-15));
  CHECK_THAT(effective_arrival_rate(t, 1, u), WithinAbs(0.5, 1e-15));

  // saturated upstream passes its service rate on
  const ProgramSpec sat = make_program(
      "sat", {{"a", 1.0, 1, 10, 2, std::string("b")}, {"b", 5.0, 1, 10, 2, std::nullopt}}, {{"a", 4.0, 5.0, 1}});
  const int us[2] = {3, 3};
  CHECK_THAT(effective_arrival_rate(sat, 1, us), WithinAbs(1.0, 1e-15));
}

TEST_CASE("chebyshev failure bound", "[ctmc]") {
  const ProgramSpec p = nominal();
  const int u50[1] = {50};
  const int u0[1] = {0};
  const int u1[1] = {1};
  CHECK(chebyshev_failure_bound(p, 0, u50) == 1.0);
  CHECK(chebyshev_failure_bound(p, 0, u0) == 0.0);
  // MT = 0.1, sd = 0.1, zeta = 89
  CHECK_THAT(chebyshev_failure_bound(p, 0, u1), WithinRel(1.0 / (89.0 * 89.0), 1e-12));
  // timeout at least ten deviations past the mean
  const ProgramSpec big = make_program("big", {{"s1", 10.0, 1, 100, 20, std::nullopt}}, {{"s1", 9.5, 1e4, 3}});
  for (int u = 1; u <= 100; ++u) {
    const int uu[1] = {u};
    if (1e4 >= u / 10.0 + 10.0 * u / 10.0) CHECK(chebyshev_failure_bound(big, 0, uu) <= 0.01);
  }
}

TEST_CASE("bounded M/M/1 reduction", "[ctmc]") {
  // r(u) is exactly zero here, so nothing is lost to the disabled orbit move
  const ProgramSpec p = make_program("mm1", {{"s1", 10.0, 1, 3, 0, std::nullopt}}, {{"s1", 9.5, 1e4, 0}});
  const CtmcModel m = compile(p);
  REQUIRE(m.size() == 4);
  CHECK(failure_probability(3, 10.0, 1e4) == 0.0);
  const auto q = m.q.dense();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double want = 0.0;
      if (j == i + 1) want = 9.5;
      if (j + 1 == i) want = 10.0;
      if (i == j) want = -((i < 3 ? 9.5 : 0.0) + (i > 0 ? 10.0 : 0.0));
      CHECK(q[i][j] == want);
    }
}

TEST_CASE("single-server generator matches the transition list", "[ctmc]") {
  for (const ProgramSpec& p : {nominal(), nominal(8.0, 30, 7),
                               make_program("c2", {{"s1", 3.0, 2, 12, 4, std::nullopt}}, {{"s1", 5.0, 2.0, 2}})}) {
    const CtmcModel m = compile(p);
    const auto want = oracle_single(p);
    std::size_t count = 0;
    for (std::size_t s = 0; s < m.size(); ++s) {
      double out = 0.0;
      for (auto k = m.q.rates.row_ptr[s]; k < m.q.rates.row_ptr[s + 1]; ++k) {
        const auto it = want.find({s, m.q.rates.col[k]});
        REQUIRE(it != want.end());
        CHECK_THAT(m.q.rates.val[k], WithinRel(it->second, 1e-12));
        out += m.q.rates.val[k];
        ++count;
      }
      CHECK_THAT(m.q.exit[s], WithinRel(out, 1e-14) || WithinAbs(0.0, 0.0));
    }
    CHECK(count == want.size());
  }
}

TEST_CASE("nominal model shape", "[ctmc]") {
  const CtmcModel m = compile(nominal());
  CHECK(m.size() == 2121);
  CHECK(m.irreducible_checked);
  CHECK(m.irreducible);
  CHECK(m.alpha[0] == 0.75);
  const double scale = m.q.max_abs();
  for (std::size_t s = 0; s < m.size(); ++s) {
    const auto lo = m.q.rates.row_ptr[s], hi = m.q.rates.row_ptr[s + 1];
    CHECK(hi - lo <= 6);
    double sum = -m.q.exit[s];
    for (auto k = lo; k < hi; ++k) {
      CHECK(m.q.rates.val[k] >= 0.0);
      CHECK(m.q.rates.col[k] != s);
      sum += m.q.rates.val[k];
    }
    CHECK(std::abs(sum) <= 1e-12 * scale);
  }
}

TEST_CASE("single_server_rates at the corners", "[ctmc]") {
  const ProgramSpec p = nominal();
  const auto t00 = single_server_rates(0, 0, p);
  REQUIRE(t00.size() == 1);
  CHECK(t00[0].u == 1);
  CHECK(t00[0].v == 0);
  CHECK(t00[0].rate == 9.5);
  for (const auto& t : single_server_rates(100, 7, p)) CHECK(t.u <= 100);
  for (const auto& t : single_server_rates(60, 20, p)) CHECK(t.v <= 20);
  CHECK_THROWS_AS(single_server_rates(101, 0, p), ValidationError);
}

TEST_CASE("parallel compile equals serial compile", "[ctmc]") {
  for (const ProgramSpec& p : {nominal(), make_program("pipe",
                                                       {{"s1", 10.0, 1, 12, 3, std::string("s2")},
                                                        {"s2", 15.0, 1, 10, 3, std::nullopt}},
                                                       {{"s1", 8.0, 8.0, 3}, {"s2", 4.5, 4.0, 3}})}) {
    const CtmcModel a = compile(p);
    const CtmcModel b = compile_serial(p);
    CHECK(a.q == b.q);
  }
}

TEST_CASE("multi-server models use the chebyshev bound", "[ctmc]") {
  const ProgramSpec p = make_program(
      "pipe", {{"s1", 10.0, 1, 8, 2, std::string("s2")}, {"s2", 15.0, 1, 6, 2, std::nullopt}},
      {{"s1", 8.0, 8.0, 3}, {"s2", 4.5, 4.0, 3}});
  const CtmcModel m = compile(p);
  CHECK(m.chebyshev);
  CHECK(m.size() == 9u * 3u * 7u * 3u);
  CHECK(compile(nominal(), {FailureModel::Chebyshev}).chebyshev);
  CHECK_THROWS_AS(compile(p, {FailureModel::Exact}), ValidationError);
}

TEST_CASE("two-tier state space size and capacity cap", "[ctmc]") {
  const ProgramSpec p = two_tier();
  CHECK(StateSpace::for_program(p).size == 4498641u);
  CompileOptions small;
  small.memory_cap_bytes = 1 << 20;
  CHECK_THROWS_AS(compile(p, small), CapacityError);
  try {
    compile(p, small);
  } catch (const CapacityError& e) {
    CHECK(std::string(e.what()).find("1048576") != std::string::npos);
  }
}

TEST_CASE("state enumeration is u-fastest and bijective", "[ctmc]") {
  const ProgramSpec p = make_program(
      "pipe", {{"s1", 10.0, 1, 3, 2, std::string("s2")}, {"s2", 15.0, 1, 2, 1, std::nullopt}},
      {{"s1", 8.0, 8.0, 3}});
  const StateSpace s = StateSpace::for_program(p);
  CHECK(s.size == 4u * 3u * 3u * 2u);
  CHECK(s.u(1, 0) == 1);
  CHECK(s.v(4, 0) == 1);
  for (std::size_t i = 0; i < s.size; ++i) {
    int u[2], v[2];
    s.decode(i, u, v);
    CHECK(s.index(u, v) == i);
  }
  CHECK(s.u(s.high(), 1) == 2);
  CHECK(s.v(s.high(), 1) == 1);
}

TEST_CASE("embedded chain", "[ctmc]") {
  const ProgramSpec p = make_program("mm1", {{"s1", 10.0, 1, 5, 0, std::nullopt}}, {{"s1", 9.5, 9.0, 0}});
  const CtmcModel m = compile(p);
  const SparseMatrix e = embedded_dtmc(m.q);
  const Generator pe{e, std::vector<double>(e.rows, 0.0)};
  CHECK(pe.entry(0, 1) == 1.0);
  CHECK_THAT(pe.entry(2, 3), WithinAbs(9.5 / 19.5, 1e-15));
  CHECK_THAT(pe.entry(2, 1), WithinAbs(10.0 / 19.5, 1e-15));
  const CtmcModel n = compile(nominal());
  const SparseMatrix en = embedded_dtmc(n.q);
  for (std::size_t s = 0; s < en.rows; ++s) {
    double sum = 0.0;
    for (auto k = en.row_ptr[s]; k < en.row_ptr[s + 1]; ++k) sum += en.val[k];
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
  const Generator absorbing = Generator::from_triplets(3, {{0, 1, 1.0}, {1, 2, 1.0}});
  CHECK_THROWS_AS(embedded_dtmc(absorbing), SolverError);
}

TEST_CASE("MatrixMarket export and state legend", "[ctmc]") {
  const ProgramSpec p = make_program("mm1", {{"s1", 10.0, 1, 2, 0, std::nullopt}}, {{"s1", 9.5, 9.0, 0}});
  const CtmcModel m = compile(p);
  std::ostringstream mm;
  write_matrix_market(mm, m.q);
  const std::string text = mm.str();
  CHECK(text.rfind("%%MatrixMarket matrix coordinate real general", 0) == 0);
  CHECK(text.find("3 3 7") != std::string::npos);
  std::ostringstream leg;
  write_state_legend(leg, m.space);
  CHECK(leg.str().rfind("index,u1,v1\n0,0,0\n1,1,0\n2,2,0\n", 0) == 0);
}

TEST_CASE("generator triplets and dense round trip", "[ctmc]") {
  const Generator g = Generator::from_triplets(3, {{0, 1, 1.0}, {0, 1, 2.0}, {1, 1, 5.0}, {2, 0, 4.0}});
  CHECK(g.entry(0, 1) == 3.0);
  CHECK(g.entry(1, 1) == 0.0);
  CHECK(g.exit[0] == 3.0);
  CHECK(g.max_exit() == 4.0);
  CHECK(Generator::from_dense(g.dense()) == g);
  CHECK(g.scaled(2.0).entry(2, 0) == 8.0);
  CHECK(g.rates.transpose().transpose() == g.rates);
}
