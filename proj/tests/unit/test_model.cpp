#include <catch_amalgamated.hpp>

#include "metastab/error.hpp"
#include "metastab/io.hpp"
#include "metastab/model.hpp"

using namespace metastab;
using Catch::Approx;

namespace {

const char* kNominal = R"({
  "version": 1,
  "servers": [{"id": "s1", "mu": 10, "threads": 1, "queue_bound": 100, "orbit_bound": 20}],
  "clients": [{"server": "s1", "lambda": 9.5, "timeout": 9, "retries": 3}]
})";

std::string source(const std::string& rel) { return read_file(std::string(METASTAB_SOURCE_DIR) + "/" + rel); }

}  // namespace

TEST_CASE("nominal single-server program parses", "[model]") {
  const ProgramSpec p = parse_program(kNominal);
  REQUIRE(p.size() == 1);
  CHECK(p.arrival_rate(0) == 9.5);
  CHECK(p.servers[0].service_rate == 10.0);
  CHECK(p.timeout(0) == 9.0);
  CHECK(p.retries(0) == 3);
  CHECK(p.servers[0].queue_bound == 100);
  CHECK(p.servers[0].orbit_bound == 20);
  CHECK(p.retry_fraction(0) == Approx(0.75));
}

TEST_CASE("two-tier program orders the pipeline", "[model]") {
  const ProgramSpec p = parse_program(source("scenarios/two_tier.json"));
  REQUIRE(p.size() == 2);
  CHECK(p.servers[0].id == "front");
  CHECK(p.servers[0].threads == 32);
  CHECK(p.servers[1].id == "back");
  CHECK(p.arrival_rate(1) == 0.0);
  CHECK(p.retries(0) == 5);
  CHECK(p.index_of("back") == 1);
}

TEST_CASE("servers listed out of order are sorted into the pipeline", "[model]") {
  const ProgramSpec p = make_program(
      "x", {{"b", 5.0, 1, 3, 1, std::nullopt}, {"a", 5.0, 1, 3, 1, std::string("b")}},
      {{"a", 1.0, 2.0, 1}});
  CHECK(p.servers[0].id == "a");
  CHECK(p.servers[1].id == "b");
  CHECK(!p.clients[1].has_value());
  CHECK(std::isinf(p.timeout(1)));
}

TEST_CASE("cycles, branches and unknown downstreams are rejected", "[model]") {
  SECTION("cycle") {
    CHECK_THROWS_AS(make_program("c", {{"a", 1, 1, 2, 1, std::string("b")}, {"b", 1, 1, 2, 1, std::string("a")}},
                                 {{"a", 1, 1, 0}}),
                    ValidationError);
  }
  SECTION("self loop") {
    CHECK_THROWS_AS(make_program("c", {{"a", 1, 1, 2, 1, std::string("a")}}, {{"a", 1, 1, 0}}), ValidationError);
  }
  SECTION("two upstreams") {
    CHECK_THROWS_AS(make_program("c",
                                 {{"a", 1, 1, 2, 1, std::string("c")},
                                  {"b", 1, 1, 2, 1, std::string("c")},
                                  {"c", 1, 1, 2, 1, std::nullopt}},
                                 {{"a", 1, 1, 0}}),
                    ValidationError);
  }
  SECTION("unknown downstream") {
    CHECK_THROWS_AS(make_program("c", {{"a", 1, 1, 2, 1, std::string("zz")}}, {{"a", 1, 1, 0}}), ValidationError);
  }
  SECTION("duplicate id") {
    CHECK_THROWS_AS(make_program("c", {{"a", 1, 1, 2, 1, std::nullopt}, {"a", 1, 1, 2, 1, std::nullopt}},
                                 {{"a", 1, 1, 0}}),
                    ValidationError);
  }
}

TEST_CASE("invalid numbers are rejected", "[model]") {
  CHECK_THROWS_AS(make_program("c", {{"a", 0.0, 1, 2, 1, std::nullopt}}, {{"a", 1, 1, 0}}), ValidationError);
  CHECK_THROWS_AS(make_program("c", {{"a", 1.0, 0, 2, 1, std::nullopt}}, {{"a", 1, 1, 0}}), ValidationError);
  CHECK_THROWS_AS(make_program("c", {{"a", 1.0, 1, 0, 1, std::nullopt}}, {{"a", 1, 1, 0}}), ValidationError);
  CHECK_THROWS_AS(make_program("c", {{"a", 1.0, 1, 2, 1, std::nullopt}}, {{"a", 1, -1, 0}}), ValidationError);
  CHECK_THROWS_AS(make_program("c", {{"a", 1.0, 1, 2, 1, std::nullopt}}, {{"a", 1, 1, -2}}), ValidationError);
  CHECK_THROWS_AS(make_program("c", {{"a", 1.0, 1, 2, 1, std::nullopt}}, {{"a", 0.0, 1, 0}}), ValidationError);
  CHECK_NOTHROW(make_program("c", {{"a", 1.0, 1, 2, 1, std::nullopt}}, {{"a", 0.0, 1, 0}}, {true}));
}

TEST_CASE("syntax errors carry line and column", "[model]") {
  const std::string bad = "{\n  \"version\": 1,\n  \"servers\": [,]\n}";
  try {
    parse_program(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
    CHECK(e.column() > 0);
  }
}

TEST_CASE("unknown keys and versions are rejected", "[model]") {
  std::string doc = kNominal;
  CHECK_THROWS_AS(parse_program(std::string(doc).replace(doc.find("\"version\": 1"), 12, "\"version\": 2")), ParseError);
  std::string extra = doc;
  extra.insert(extra.find("\"threads\""), "\"colour\": 3, ");
  CHECK_THROWS_AS(parse_program(extra), ParseError);
}

TEST_CASE("render and parse round-trip", "[model]") {
  for (const char* file : {"scenarios/nominal.json", "scenarios/pipeline.json", "scenarios/two_tier.json"}) {
    const ProgramSpec p = parse_program(source(file));
    const ProgramSpec q = parse_program(render_program(p), {true});
    CHECK(p == q);
    CHECK(render_program(q) == render_program(p));
  }
}

TEST_CASE("average_clients combines policies", "[model]") {
  SECTION("identical policies add rates") {
    const std::vector<ClientSpec> cs = {{"s", 3, 9, 3}, {"s", 7, 9, 3}};
    const ClientSpec c = average_clients(cs);
    CHECK(c.arrival_rate == 10.0);
    CHECK(c.timeout == 9.0);
    CHECK(c.max_retries == 3);
  }
  SECTION("rate-weighted timeout") {
    const std::vector<ClientSpec> cs = {{"s", 5, 2, 1}, {"s", 5, 4, 1}};
    const ClientSpec c = average_clients(cs);
    CHECK(c.arrival_rate == 10.0);
    // (5*2 + 5*4) / 10
    CHECK(c.timeout == Approx(3.0));
  }
  SECTION("unequal weights and rounding of the retry budget") {
    const std::vector<ClientSpec> cs = {{"s", 1, 1, 0}, {"s", 3, 5, 4}};
    const ClientSpec c = average_clients(cs);
    CHECK(c.timeout == Approx((1.0 * 1 + 3.0 * 5) / 4.0));
    CHECK(c.max_retries == 3);  // 3.0 exactly
  }
  SECTION("single client is unchanged") {
    const std::vector<ClientSpec> cs = {{"s", 2.5, 7, 2}};
    CHECK(average_clients(cs) == cs[0]);
  }
}

TEST_CASE("parameter names and substitution", "[model]") {
  const ProgramSpec p = parse_program(kNominal);
  CHECK(param_name(parse_param_name("lambda_1")) == "lambda_1");
  CHECK(parse_param_name("queue_bound_1").kind == ParamRef::Kind::QueueBound);
  CHECK_THROWS_AS(parse_param_name("lambda_0"), ValidationError);
  CHECK_THROWS_AS(parse_param_name("gamma_1"), ValidationError);
  CHECK(read_param(p, "timeout_1") == 9.0);

  const ProgramSpec throttled = substitute_params(p, ParamVector{{"lambda_1", 8.0}});
  CHECK(throttled.arrival_rate(0) == 8.0);
  CHECK(substitute_params(p, ParamVector{}) == p);
  CHECK_THROWS_AS(substitute_params(p, ParamVector{{"lambda_1", -1.0}}), ValidationError);
  CHECK_THROWS_AS(substitute_params(p, ParamVector{{"queue_bound_1", 50.0}}), ValidationError);

  CHECK(apply_override(p, "queue_bound_1", 60).servers[0].queue_bound == 60);
  CHECK_THROWS_AS(apply_override(p, "queue_bound_1", 60.5), ValidationError);
  const auto a = parse_assignments("lambda_1=8, timeout_1=10.5");
  REQUIRE(a.size() == 2);
  CHECK(a[1].first == "timeout_1");
  CHECK(a[1].second == 10.5);
  CHECK_THROWS_AS(parse_assignments("lambda_1"), ValidationError);
}

TEST_CASE("ParamVector keeps order and checks boxes", "[model]") {
  ParamVector v{{"lambda_1", 9.5}, {"timeout_1", 9.0}};
  v.set_bound("lambda_1", {9, 10});
  v.set_bound("timeout_1", {7, 11});
  CHECK(v.names() == std::vector<std::string>{"lambda_1", "timeout_1"});
  CHECK(v.in_box());
  const std::vector<double> out = {10.5, 9.0};
  CHECK(!v.with_values(out).in_box());
}
