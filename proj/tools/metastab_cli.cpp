// metastab: command-line front end.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "metastab/analysis.hpp"
#include "metastab/calibrate.hpp"
#include "metastab/ctmc.hpp"
#include "metastab/des.hpp"
#include "metastab/error.hpp"
#include "metastab/io.hpp"
#include "metastab/kernels.hpp"
#include "metastab/model.hpp"
#include "metastab/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace metastab;

namespace {

struct UsageError : Error {
  using Error::Error;
};

struct Global {
  int threads = 0;
  std::string format;  // empty: the command's default
  std::string out_dir = "metastab-out";
  std::uint64_t seed = 1;

  std::string format_or(const std::string& fallback) const { return format.empty() ? fallback : format; }
};

struct Context {
  Global g;
  RunManifest manifest;
  fs::path out;

  void write(const std::string& name, const std::string& content) {
    manifest.write_output(out / name, content);
  }
};

std::string load(const std::string& path, Context& ctx) {
  if (!fs::exists(path)) throw Error("file not found: " + path);
  ctx.manifest.config_paths.push_back(path);
  return read_file(path);
}

ProgramSpec load_program(const std::string& path, Context& ctx) {
  return parse_program(load(path, ctx));
}

// ---------------------------------------------------------------------------
// Small parsers

ProgramSpec apply_params(ProgramSpec p, const std::string& params) {
  if (params.empty()) return p;
  for (const auto& [name, value] : parse_assignments(params)) p = apply_override(p, name, value);
  return p;
}

struct Sweep {
  std::string name;
  std::vector<double> values;
};

/// "name=lo:hi:step" or "name=a,b,c".
std::optional<Sweep> parse_sweep(const std::string& text) {
  if (text.empty()) return std::nullopt;
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw UsageError("sweep must look like name=lo:hi:step");
  Sweep s;
  s.name = text.substr(0, eq);
  (void)parse_param_name(s.name);
  const std::string rhs = text.substr(eq + 1);
  try {
    if (rhs.find(':') != std::string::npos) {
      double lo = 0, hi = 0, step = 0;
      char c1 = 0, c2 = 0;
      std::istringstream in(rhs);
      if (!(in >> lo >> c1 >> hi >> c2 >> step) || c1 != ':' || c2 != ':' || !(step > 0.0))
        throw UsageError("bad sweep range '" + rhs + "'");
      const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
      for (long i = 0; i <= n; ++i) s.values.push_back(lo + static_cast<double>(i) * step);
    } else {
      std::stringstream in(rhs);
      std::string item;
      while (std::getline(in, item, ',')) s.values.push_back(std::stod(item));
    }
  } catch (const std::invalid_argument&) {
    throw UsageError("bad sweep values '" + rhs + "'");
  }
  if (s.values.empty()) throw UsageError("sweep has no points");
  return s;
}

/// Start distribution: a state-set expression, mass spread uniformly.
std::vector<double> parse_start(const std::string& text, const StateSpace& space) {
  const StateSet s = parse_state_set(text, space);
  if (s.empty()) throw UsageError("start set '" + text + "' is empty");
  std::vector<double> p(space.size, 0.0);
  for (auto x : s) p[x] = 1.0 / static_cast<double>(s.size());
  return p;
}

StateSet target_or_default(const std::string& expr, const StateSpace& space) {
  if (expr.empty()) return low_queue_set(space, 0.1);
  StateSet s = parse_state_set(expr, space);
  if (s.empty()) throw UsageError("state set '" + expr + "' is empty");
  return s;
}

/// "s1=High;s2=(10,3)" -> per-server coordinates; unspecified servers sit at Low.
std::vector<std::pair<int, int>> parse_fix(const std::string& text, const ProgramSpec& p) {
  std::vector<std::pair<int, int>> fixed(p.size(), {0, 0});
  if (text.empty()) return fixed;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("--fix items look like s1=High");
    const std::string id = item.substr(0, eq);
    std::string val = item.substr(eq + 1);
    const std::size_t idx = p.index_of(id);
    const auto& s = p.servers[idx];
    if (val == "High" || val == "high" || val == "full") {
      fixed[idx] = {s.queue_bound, s.orbit_bound};
    } else if (val == "Low" || val == "low" || val == "empty") {
      fixed[idx] = {0, 0};
    } else {
      int u = 0, v = 0;
      char extra = 0;
      if (!val.empty() && val.front() == '(' && val.back() == ')') val = val.substr(1, val.size() - 2);
      if (std::sscanf(val.c_str(), " %d , %d %c", &u, &v, &extra) != 2)
        throw UsageError("bad --fix value '" + val + "'");
      fixed[idx] = {u, v};
    }
  }
  return fixed;
}

json params_json(const ProgramSpec& p) {
  json j = json::object();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::string n = std::to_string(i + 1);
    j["lambda_" + n] = p.arrival_rate(i);
    j["mu_" + n] = p.servers[i].service_rate;
    j["timeout_" + n] = std::isfinite(p.timeout(i)) ? json(p.timeout(i)) : json(nullptr);
    j["retries_" + n] = p.retries(i);
    j["queue_bound_" + n] = p.servers[i].queue_bound;
    j["orbit_bound_" + n] = p.servers[i].orbit_bound;
  }
  return j;
}

json state_json(const StateSpace& sp, std::size_t s) {
  json j = json::array();
  for (std::size_t i = 0; i < sp.servers(); ++i) j.push_back({sp.u(s, i), sp.v(s, i)});
  return j;
}

json num(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

std::string legend_header(const StateSpace& sp) {
  std::string h = "index";
  for (std::size_t i = 1; i <= sp.servers(); ++i) h += ",u" + std::to_string(i) + ",v" + std::to_string(i);
  return h;
}

std::string legend_row(const StateSpace& sp, std::size_t s) {
  std::string r = std::to_string(s);
  for (std::size_t i = 0; i < sp.servers(); ++i)
    r += "," + std::to_string(sp.u(s, i)) + "," + std::to_string(sp.v(s, i));
  return r;
}

/// Flattens the scalar members of each row into a CSV table.
std::string table_csv(const std::vector<json>& rows) {
  std::vector<std::string> cols;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.items())
      if (!v.is_structured() && std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
  std::ostringstream out;
  for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << cols[c];
  out << '\n';
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (c) out << ',';
      if (!r.contains(cols[c])) continue;
      const auto& v = r.at(cols[c]);
      if (v.is_number()) out << fmt_num(v.get<double>());
      else if (v.is_boolean()) out << (v.get<bool>() ? "true" : "false");
      else if (v.is_string()) {
        const auto str = v.get<std::string>();
        if (str.find_first_of(",\"\n") == std::string::npos) {
          out << str;
        } else {
          out << '"';
          for (char ch : str) out << (ch == '"' ? "\"\"" : std::string(1, ch));
          out << '"';
        }
      }
    }
    out << '\n';
  }
  return out.str();
}

CompileOptions compile_options(const std::string& failure) {
  CompileOptions co;
  if (failure == "auto") co.failure = FailureModel::Auto;
  else if (failure == "exact") co.failure = FailureModel::Exact;
  else if (failure == "chebyshev") co.failure = FailureModel::Chebyshev;
  else throw UsageError("unknown failure model '" + failure + "'");
  return co;
}

// ---------------------------------------------------------------------------
// validate

struct ValidateArgs {
  std::string program;
};

json cmd_validate(const ValidateArgs& a, Context& ctx) {
  const ProgramSpec p = load_program(a.program, ctx);
  const StateSpace sp = StateSpace::for_program(p);
  json j = {{"name", p.name},
            {"servers", p.size()},
            {"pipeline", json::array()},
            {"states", sp.size},
            {"estimated_bytes", estimate_model_bytes(p)},
            {"params", params_json(p)}};
  for (const auto& s : p.servers) j["pipeline"].push_back(s.id);
  ctx.write("program.json", render_program(p));
  return j;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string program;
  double horizon = 1000.0;
  double ts = 1.0;
  std::size_t runs = 1;
  std::string schedule;
  std::string init = "empty";
  double backoff = 0.0;
  bool metrics = false;
  std::string params;
};

json cmd_simulate(const SimulateArgs& a, Context& ctx) {
  const ProgramSpec p = apply_params(load_program(a.program, ctx), a.params);
  SimOptions opt;
  opt.horizon = a.horizon;
  opt.ts = a.ts;
  opt.retry_backoff = a.backoff;
  opt.metrics = a.metrics;
  opt.init = parse_init(a.init, p);
  if (!a.schedule.empty()) opt.schedule = parse_schedule(load(a.schedule, ctx));
  if (a.runs < 1) throw UsageError("--runs must be at least 1");
  ctx.manifest.seeds.push_back(ctx.g.seed);
  std::vector<Trajectory> trajs(a.runs);
  std::vector<SimResult> results(a.runs);
  const long n = static_cast<long>(a.runs);
#pragma omp parallel for schedule(dynamic, 1)
  for (long r = 0; r < n; ++r)
    results[static_cast<std::size_t>(r)] = simulate(p, derive_seed(ctx.g.seed, static_cast<std::uint64_t>(r)), opt);
  json ledgers = json::array();
  bool balanced = true;
  for (std::size_t r = 0; r < a.runs; ++r) {
    trajs[r] = results[r].trajectory;
    std::ostringstream csv;
    write_trajectory_csv(csv, trajs[r]);
    ctx.write(a.runs == 1 ? "trajectory.csv" : "run_" + std::to_string(r) + ".csv", csv.str());
    for (const auto& l : results[r].ledger) balanced = balanced && l.balanced();
  }
  json j = {{"runs", a.runs}, {"samples", trajs[0].length}, {"ts", a.ts}, {"horizon", a.horizon},
            {"seed", ctx.g.seed}, {"ledger_balanced", balanced}};
  if (a.runs > 1) {
    std::ostringstream csv;
    write_trajectory_csv(csv, ensemble_average(trajs));
    ctx.write("mean.csv", csv.str());
  }
  json servers = json::array();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& l = results[0].ledger[i];
    servers.push_back({{"id", p.servers[i].id},
                       {"arrivals", l.arrivals},
                       {"completions", l.completions},
                       {"drops", l.drops},
                       {"abandoned", l.abandoned},
                       {"timeouts", l.timeouts},
                       {"final_u", trajs[0].servers[i].u.back()}});
  }
  j["first_run"] = servers;
  return j;
}

// ---------------------------------------------------------------------------
// compile

struct CompileArgs {
  std::string program;
  std::string failure = "auto";
  std::string params;
  bool no_export = false;
};

json cmd_compile(const CompileArgs& a, Context& ctx) {
  const ProgramSpec p = apply_params(load_program(a.program, ctx), a.params);
  const CtmcModel m = compile(p, compile_options(a.failure));
  double worst_row = 0.0;
  std::size_t max_nb = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    double s = -m.q.exit[i];
    for (auto k = m.q.rates.row_ptr[i]; k < m.q.rates.row_ptr[i + 1]; ++k) s += m.q.rates.val[k];
    worst_row = std::max(worst_row, std::abs(s));
    max_nb = std::max<std::size_t>(max_nb, m.q.rates.row_ptr[i + 1] - m.q.rates.row_ptr[i]);
  }
  if (!a.no_export) {
    std::ostringstream mtx, leg;
    write_matrix_market(mtx, m.q);
    write_state_legend(leg, m.space);
    ctx.write("generator.mtx", mtx.str());
    ctx.write("states.csv", leg.str());
  }
  return {{"states", m.size()},
          {"nonzeros", m.q.rates.nnz() + m.size()},
          {"max_neighbors", max_nb},
          {"max_row_sum_error", worst_row},
          {"failure_model", m.chebyshev ? "chebyshev" : "exact"},
          {"irreducible", m.irreducible},
          {"max_exit_rate", m.q.max_exit()},
          {"params", params_json(p)}};
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::string program;
  std::string what = "index";
  std::string d;
  std::string params;
  std::string sweep;
  std::string failure = "auto";
  std::size_t k = 2;
  double eps = 0.01;
  double threshold = 0.1;
  std::vector<double> times;
  std::string starts = "Low,High";
  std::string solver = "auto";
};

AnalysisOptions analysis_options(const AnalyzeArgs& a, bool inner_serial) {
  AnalysisOptions o;
  if (a.solver == "direct") o.solver.method = linalg::Method::Direct;
  else if (a.solver == "gmres") o.solver.method = linalg::Method::Gmres;
  else if (a.solver != "auto") throw UsageError("unknown solver '" + a.solver + "'");
  if (inner_serial) {
    o.exec = kernels::Exec::Serial;
    o.solver.exec = kernels::Exec::Serial;
  }
  return o;
}

/// One analysis on one program. `table` receives per-state rows when the output is tabular.
json analyze_one(const AnalyzeArgs& a, const ProgramSpec& p, bool inner_serial, std::string* table) {
  const CtmcModel m = compile(p, compile_options(a.failure));
  const auto opts = analysis_options(a, inner_serial);
  const auto& sp = m.space;
  json j = {{"states", m.size()}, {"irreducible", m.irreducible}, {"params", params_json(p)}};
  if (a.what == "stationary") {
    const auto r = stationary_distribution(m.q, opts);
    j["residual"] = r.residual;
    j["method"] = r.method;
    j["tolerance"] = 1e-10;
    j["p_low"] = r.pi[sp.low()];
    j["p_high"] = r.pi[sp.high()];
    for (std::size_t i = 0; i < sp.servers(); ++i) {
      double mean = 0.0;
      for (std::size_t s = 0; s < m.size(); ++s) mean += r.pi[s] * sp.u(s, i);
      j["mean_u" + std::to_string(i + 1)] = mean;
    }
    if (table) {
      std::ostringstream out;
      out << legend_header(sp) << ",probability\n";
      for (std::size_t s = 0; s < m.size(); ++s) out << legend_row(sp, s) << ',' << fmt_num(r.pi[s]) << '\n';
      *table = out.str();
    } else {
      j["pi"] = r.pi;
    }
  } else if (a.what == "hitting") {
    const StateSet target = target_or_default(a.d, sp);
    const auto h = hitting_time_stats(m.q, target, opts);
    j["target"] = a.d.empty() ? "u<=0.1N" : a.d;
    j["target_size"] = target.size();
    j["from_high"] = h.mean[sp.high()];
    j["from_high_std"] = h.stddev[sp.high()];
    j["from_low"] = h.mean[sp.low()];
    j["from_low_std"] = h.stddev[sp.low()];
    j["max"] = *std::max_element(h.mean.begin(), h.mean.end());
    j["residual"] = h.residual;
    j["tolerance"] = 1e-8;
    j["condition_estimate"] = h.condition_estimate;
    j["ill_conditioned"] = h.ill_conditioned;
    j["method"] = h.method;
    if (h.ill_conditioned)
      std::cerr << "warning: hitting-time system is ill-conditioned (estimate "
                << fmt_num(h.condition_estimate) << ")\n";
    if (table) {
      std::ostringstream out;
      out << legend_header(sp) << ",mean,std\n";
      for (std::size_t s = 0; s < m.size(); ++s)
        out << legend_row(sp, s) << ',' << fmt_num(h.mean[s]) << ',' << fmt_num(h.stddev[s]) << '\n';
      *table = out.str();
    }
  } else if (a.what == "escape") {
    const StateSet d = parse_state_set(a.d.empty() ? "Low,High" : a.d, sp);
    json rows = json::array();
    for (auto x : d) {
      const auto e1 = escape_probability(m.q, x, d, EscapeRoute::EmbeddedDtmc, opts);
      const auto e2 = escape_probability(m.q, x, d, EscapeRoute::Ctmc, opts);
      rows.push_back({{"state", x}, {"coords", state_json(sp, x)}, {"escape_dtmc", e1.probability},
                      {"escape_ctmc", e2.probability}, {"reachable", e1.reachable}});
    }
    j["D"] = a.d.empty() ? "Low,High" : a.d;
    j["escape"] = rows;
    if (table) {
      std::vector<json> flat(rows.begin(), rows.end());
      *table = table_csv(flat);
    }
  } else if (a.what == "index") {
    const StateSet d = parse_state_set(a.d.empty() ? "Low,High" : a.d, sp);
    const auto ht = metastability_index_ht(m.q, d, a.threshold, opts);
    j["D"] = a.d.empty() ? "Low,High" : a.d;
    j["threshold"] = a.threshold;
    j["index_ht"] = ht.index;
    j["index_ht_sup"] = ht.numerator;
    j["index_ht_inf"] = ht.denominator;
    j["metastable"] = ht.metastable;
    try {
      const auto es = metastability_index_escape(m.q, d, a.threshold, opts);
      j["index_escape"] = es.index;
      j["index_escape_sup"] = es.numerator;
      j["index_escape_inf"] = es.denominator;
      j["metastable_escape"] = es.metastable;
    } catch (const SolverError& e) {
      j["index_escape_error"] = e.what();
    }
    const auto levels = nested_metastable_sets(m.q, d, opts);
    json nested = json::array();
    for (const auto& l : levels)
      nested.push_back({{"level", l.level}, {"peeled", l.peeled}, {"coords", state_json(sp, l.peeled)}, {"escape", l.escape}});
    j["nested"] = nested;
  } else if (a.what == "spectral") {
    const auto ev = dominant_eigenvalues(m.q, a.k);
    json vals = json::array();
    for (const auto& v : ev.values) vals.push_back({{"re", v.real()}, {"im", v.imag()}});
    j["eigenvalues"] = vals;
    j["k"] = a.k;
    j["shift"] = ev.shift;
    j["restarts"] = ev.restarts;
    j["max_residual"] = ev.max_residual;
    j["tolerance"] = 1e-12;
    if (a.k >= 2) j["lambda2"] = ev.values[1].real();
    if (!a.d.empty()) {
      const StateSet d = parse_state_set(a.d, sp);
      if (d.size() == a.k) {
        json lv = json::array();
        for (const auto& l : spectral_hitting_estimate(m.q, d, opts))
          lv.push_back({{"level", l.level}, {"peeled", l.peeled}, {"eigenvalue", l.eigenvalue},
                        {"inverse_hitting", l.inverse_hitting}, {"relative_gap", l.relative_gap}});
        j["levels"] = lv;
      }
    }
  } else if (a.what == "mixing") {
    const auto ev = dominant_eigenvalues(m.q, 2);
    const double l2 = ev.values[1].real();
    j["lambda2"] = l2;
    j["eps"] = a.eps;
    j["lower_bound"] = mixing_time_lower_bound(l2, a.eps);
    if (!a.times.empty()) {
      const auto pi = stationary_distribution(m.q, opts).pi;
      std::vector<std::size_t> starts;
      const bool exact = m.size() <= 2000;
      if (exact) {
        for (std::size_t s = 0; s < m.size(); ++s) starts.push_back(s);
      } else {
        starts = parse_state_set(a.starts, sp);
      }
      json dt = json::array();
      TransientOptions to;
      to.exec = opts.exec;
      for (double t : a.times) dt.push_back({{"t", t}, {"d", tv_distance(m.q, t, pi, starts, to)}});
      j["distance"] = dt;
      j["distance_exact_sup"] = exact;
    }
  } else {
    throw UsageError("unknown --what '" + a.what + "'");
  }
  return j;
}

json cmd_analyze(const AnalyzeArgs& a, Context& ctx) {
  const ProgramSpec base = apply_params(load_program(a.program, ctx), a.params);
  const auto sweep = parse_sweep(a.sweep);
  const bool csv = ctx.g.format_or("json") == "csv";
  if (!sweep) {
    std::string table;
    json j = analyze_one(a, base, false, csv ? &table : nullptr);
    j["what"] = a.what;
    if (csv) ctx.write(a.what + ".csv", table.empty() ? table_csv({j}) : table);
    else ctx.write(a.what + ".json", j.dump(2) + "\n");
    return j;
  }
  // Validate every point up front so config errors exit 2 before any solve.
  std::vector<ProgramSpec> programs;
  for (double v : sweep->values) programs.push_back(apply_override(base, sweep->name, v));
  std::vector<json> rows(programs.size());
  const long n = static_cast<long>(programs.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (long i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    json row;
    try {
      row = analyze_one(a, programs[k], true, nullptr);
    } catch (const SolverError& e) {
      row = {{"error", e.what()}};
    }
    row.erase("pi");
    row.erase("params");
    json out = {{"param", sweep->name}, {"value", sweep->values[k]}};
    out.update(row);
    rows[k] = out;
  }
  json j = {{"what", a.what}, {"sweep", sweep->name}, {"points", rows}};
  if (csv) ctx.write(a.what + "_sweep.csv", table_csv(rows));
  else ctx.write(a.what + "_sweep.json", j.dump(2) + "\n");
  return j;
}

// ---------------------------------------------------------------------------
// field

struct FieldArgs {
  std::string program;
  std::size_t server = 1;
  int stride = 1;
  std::string fix;
  std::string params;
  std::string failure = "auto";
};

json cmd_field(const FieldArgs& a, Context& ctx) {
  const ProgramSpec p = apply_params(load_program(a.program, ctx), a.params);
  if (a.server < 1 || a.server > p.size()) throw ValidationError("--server out of range");
  const RateModel rm(p, compile_options(a.failure).failure);
  const auto t0 = std::chrono::steady_clock::now();
  const VectorField f = vector_field(rm, a.server - 1, a.stride, parse_fix(a.fix, p));
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  if (ctx.g.format_or("csv") == "json") {
    json pts = json::array();
    for (const auto& q : f.points)
      pts.push_back({{"u", q.u}, {"v", q.v}, {"f_q", q.f_q}, {"f_o", q.f_o}, {"magnitude", q.magnitude}, {"angle_rad", q.angle}});
    ctx.write("field.json", json({{"server", a.server}, {"stride", a.stride}, {"points", pts}}).dump(2) + "\n");
  } else {
    std::ostringstream out;
    write_field_csv(out, f);
    ctx.write("field.csv", out.str());
  }
  json fixed = json::array();
  for (const auto& [u, v] : f.fixed) fixed.push_back({u, v});
  return {{"server", a.server}, {"stride", a.stride}, {"points", f.points.size()}, {"fixed", fixed}, {"compute_ms", ms}};
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateArgs {
  std::string program;
  std::string config;
  bool reuse_data = false;
};

json cmd_calibrate(const CalibrateArgs& a, Context& ctx) {
  const ProgramSpec p = load_program(a.program, ctx);
  CalibrationConfig cfg = parse_calibration_config(load(a.config, ctx), p);
  ctx.manifest.seeds.push_back(cfg.master_seed);
  const fs::path data_path = ctx.out / "dataset.csv";
  TrainingData data;
  if (a.reuse_data && fs::exists(data_path)) {
    data = read_training_csv(read_file(data_path), cfg, p.size());
  } else {
    data = collect_training_data(p, cfg);
    std::ostringstream out;
    write_training_csv(out, data);
    ctx.write("dataset.csv", out.str());
  }
  const CalibrationResult r = calibrate(p, data, cfg);
  json j = {{"config", to_json(cfg)}, {"result", to_json(r)}};
  ctx.write("calibration.json", j.dump(2) + "\n");
  ctx.write("program_calibrated.json", render_program(substitute_params(p, r.theta_star)));
  // Fitted and nominal CTMC curves next to the data.
  const auto fit = ctmc_series(p, r.theta_star, cfg);
  const auto nom = ctmc_series(p, cfg.theta0, cfg);
  std::ostringstream curves;
  curves << "init,t,server,data_u,ctmc_u_theta0,ctmc_u_fit\n";
  for (std::size_t z = 0; z < cfg.inits.size(); ++z)
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t k = 0; k < cfg.samples; ++k)
        curves << cfg.inits[z] << ',' << fmt_num(static_cast<double>(k) * cfg.ts) << ',' << p.servers[i].id << ','
               << fmt_num(data.series[z][i][k]) << ',' << fmt_num(nom[z][i][k]) << ',' << fmt_num(fit[z][i][k]) << '\n';
  ctx.write("curves.csv", curves.str());
  json out = {{"loss", r.loss}, {"loss_theta0", r.loss_theta0}, {"evaluations", r.evaluations}, {"wall_seconds", r.wall_seconds}};
  out["theta_star"] = to_json(r)["theta_star"];
  return out;
}

// ---------------------------------------------------------------------------
// recover

struct RecoverArgs {
  std::string program;
  std::string policy;
  std::string start = "High";
  std::string target;
  double horizon = 400.0;
  double ts = 1.0;
  std::string sweep;
  std::string failure = "auto";
};

json recover_one(const RecoverArgs& a, const ProgramSpec& p, bool inner_serial, std::string* curve) {
  const CtmcModel m = compile(p, compile_options(a.failure));
  AnalysisOptions opts;
  TransientOptions topts;
  if (inner_serial) {
    opts.exec = kernels::Exec::Serial;
    opts.solver.exec = kernels::Exec::Serial;
    topts.exec = kernels::Exec::Serial;
  }
  const auto start = parse_start(a.start, m.space);
  const StateSet target = target_or_default(a.target, m.space);
  std::vector<double> times;
  if (curve)
    for (double t = 0.0; t <= a.horizon + 1e-9; t += a.ts) times.push_back(t);
  const auto r = recovery_analysis(m, start, target, times, opts, topts);
  if (curve) {
    std::ostringstream out;
    out << "t";
    for (std::size_t i = 0; i < p.size(); ++i) out << ",mean_u" << i + 1;
    out << '\n';
    for (std::size_t k = 0; k < times.size(); ++k) {
      out << fmt_num(times[k]);
      for (std::size_t i = 0; i < p.size(); ++i) out << ',' << fmt_num(r.mean_u[i][k]);
      out << '\n';
    }
    *curve = out.str();
  }
  json j = {{"expected_time", r.expected_time}, {"stddev", r.stddev},
            {"target_size", target.size()}, {"residual", r.hitting.residual},
            {"condition_estimate", r.hitting.condition_estimate}, {"ill_conditioned", r.hitting.ill_conditioned}};
  if (!times.empty())
    for (std::size_t i = 0; i < p.size(); ++i) j["mean_u" + std::to_string(i + 1) + "_end"] = r.mean_u[i].back();
  return j;
}

json cmd_recover(const RecoverArgs& a, Context& ctx) {
  const ProgramSpec base = apply_params(load_program(a.program, ctx), a.policy);
  if (!(a.ts > 0.0) || !(a.horizon >= 0.0)) throw UsageError("--ts must be positive and --horizon nonnegative");
  const auto sweep = parse_sweep(a.sweep);
  const bool csv = ctx.g.format_or("json") == "csv";
  if (!sweep) {
    std::string curve;
    json j = recover_one(a, base, false, &curve);
    j["start"] = a.start;
    j["target"] = a.target.empty() ? "u<=0.1N" : a.target;
    j["policy"] = a.policy;
    ctx.write("expected_u.csv", curve);
    if (csv) ctx.write("recovery.csv", table_csv({j}));
    else ctx.write("recovery.json", j.dump(2) + "\n");
    return j;
  }
  std::vector<ProgramSpec> programs;
  for (double v : sweep->values) programs.push_back(apply_override(base, sweep->name, v));
  std::vector<json> rows(programs.size());
  const long n = static_cast<long>(programs.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (long i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    json row = {{"param", sweep->name}, {"value", sweep->values[k]}};
    try {
      row.update(recover_one(a, programs[k], true, nullptr));
    } catch (const SolverError& e) {
      row["error"] = e.what();
    }
    rows[k] = row;
  }
  json j = {{"sweep", sweep->name}, {"start", a.start}, {"points", rows}};
  if (csv) ctx.write("recovery_sweep.csv", table_csv(rows));
  else ctx.write("recovery_sweep.json", j.dump(2) + "\n");
  return j;
}

// ---------------------------------------------------------------------------

int fail(int code, const std::string& kind, const std::string& message, const json& extra = json::object()) {
  json e = {{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}};
  e["error"].update(extra);
  std::cerr << e.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Metastability analysis for retrying request-response systems"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--threads", g.threads, "Worker threads (0 = OpenMP default)")->envname("METASTAB_THREADS");
  app.add_option("--format", g.format, "Output format for tables")
      ->check(CLI::IsMember({"csv", "json"}))
      ->default_str("")
      ->envname("METASTAB_FORMAT");
  app.add_option("--out-dir", g.out_dir, "Directory for outputs and manifest.json")->envname("METASTAB_OUT_DIR");
  app.add_option("--seed", g.seed, "Master seed")->envname("METASTAB_SEED");

  ValidateArgs va;
  auto* validate = app.add_subcommand("validate", "Check a program file");
  validate->add_option("program", va.program)->required();

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Run the discrete-event simulator");
  sim->add_option("program", sa.program)->required();
  sim->add_option("--horizon", sa.horizon, "Seconds to simulate");
  sim->add_option("--ts", sa.ts, "Sampling period");
  sim->add_option("--runs", sa.runs, "Independent runs; more than one also writes mean.csv");
  sim->add_option("--schedule", sa.schedule, "Rate-change schedule JSON");
  sim->add_option("--init", sa.init, "empty, full, or u,v;u,v");
  sim->add_option("--backoff", sa.backoff, "Constant delay before a retry");
  sim->add_option("--params", sa.params, "Overrides like lambda_1=8");
  sim->add_flag("--metrics", sa.metrics, "Add latency, goodput and drop columns");

  CompileArgs ca;
  auto* comp = app.add_subcommand("compile", "Build the CTMC generator and export it");
  comp->add_option("program", ca.program)->required();
  comp->add_option("--failure", ca.failure, "auto, exact or chebyshev");
  comp->add_option("--params", ca.params, "Overrides like lambda_1=8");
  comp->add_flag("--no-export", ca.no_export, "Skip the MatrixMarket and legend files");

  AnalyzeArgs aa;
  auto* an = app.add_subcommand("analyze", "Stationary, hitting, escape, index, spectral or mixing analysis");
  an->add_option("program", aa.program)->required();
  an->add_option("--what", aa.what)->check(CLI::IsMember({"stationary", "hitting", "escape", "index", "spectral", "mixing"}));
  an->add_option("--D", aa.d, "State-set expression (Low, High, tuples, predicates)");
  an->add_option("--params", aa.params, "Overrides like lambda_1=8");
  an->add_option("--sweep", aa.sweep, "name=lo:hi:step or name=a,b,c");
  an->add_option("--failure", aa.failure, "auto, exact or chebyshev");
  an->add_option("-k", aa.k, "Eigenvalue count");
  an->add_option("--eps", aa.eps, "Mixing-time epsilon");
  an->add_option("--threshold", aa.threshold, "Metastability threshold");
  an->add_option("--t", aa.times, "Times for the distance to stationarity")->delimiter(',');
  an->add_option("--starts", aa.starts, "Start states for the distance on large models");
  an->add_option("--solver", aa.solver, "auto, direct or gmres");

  FieldArgs fa;
  auto* fld = app.add_subcommand("field", "Vector field over one server's (u, v) plane");
  fld->add_option("program", fa.program)->required();
  fld->add_option("--server", fa.server, "1-based server position in the pipeline");
  fld->add_option("--stride", fa.stride, "Grid stride");
  fld->add_option("--fix", fa.fix, "Other servers' coordinates, e.g. s1=High;s2=(3,1)");
  fld->add_option("--params", fa.params, "Overrides like lambda_1=8");
  fld->add_option("--failure", fa.failure, "auto, exact or chebyshev");

  CalibrateArgs cla;
  auto* cal = app.add_subcommand("calibrate", "Fit CTMC parameters to simulator trajectories");
  cal->add_option("program", cla.program)->required();
  cal->add_option("--config", cla.config, "Calibration config JSON")->required();
  cal->add_flag("--reuse-data", cla.reuse_data, "Load dataset.csv from the output directory");

  RecoverArgs ra;
  auto* rec = app.add_subcommand("recover", "Recovery time and expected queue under a policy");
  rec->add_option("program", ra.program)->required();
  rec->add_option("--policy", ra.policy, "Overrides like lambda_1=8");
  rec->add_option("--start", ra.start, "Start set (mass spread uniformly)");
  rec->add_option("--target", ra.target, "Target set (default u<=0.1N on every server)");
  rec->add_option("--horizon", ra.horizon, "Seconds of expected-queue curve");
  rec->add_option("--ts", ra.ts, "Curve sampling period");
  rec->add_option("--sweep", ra.sweep, "name=lo:hi:step or name=a,b,c");
  rec->add_option("--failure", ra.failure, "auto, exact or chebyshev");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Error& e) {
    return fail(2, "usage", e.what());
  }

  Context ctx;
  ctx.g = g;
  ctx.out = g.out_dir;
  ctx.manifest.tool_version = METASTAB_VERSION;
  for (int i = 0; i < argc; ++i) ctx.manifest.argv.emplace_back(argv[i]);
  if (g.threads > 0) kernels::set_threads(g.threads);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    json summary;
    if (*validate) {
      ctx.manifest.command = "validate";
      summary = cmd_validate(va, ctx);
    } else if (*sim) {
      ctx.manifest.command = "simulate";
      summary = cmd_simulate(sa, ctx);
    } else if (*comp) {
      ctx.manifest.command = "compile";
      summary = cmd_compile(ca, ctx);
    } else if (*an) {
      ctx.manifest.command = "analyze";
      summary = cmd_analyze(aa, ctx);
    } else if (*fld) {
      ctx.manifest.command = "field";
      summary = cmd_field(fa, ctx);
    } else if (*cal) {
      ctx.manifest.command = "calibrate";
      summary = cmd_calibrate(cla, ctx);
    } else if (*rec) {
      ctx.manifest.command = "recover";
      summary = cmd_recover(ra, ctx);
    }
    ctx.manifest.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_file_atomic(ctx.out / "manifest.json", ctx.manifest.to_json());
    std::cout << summary.dump(2) << std::endl;
    return 0;
  } catch (const SolverError& e) {
    return fail(1, "solver", e.what(), {{"residual", e.residual()}, {"iterations", e.iterations()}});
  } catch (const CapacityError& e) {
    return fail(2, "capacity", e.what(), {{"cap_bytes", e.cap()}});
  } catch (const ParseError& e) {
    return fail(2, "parse", e.what(), {{"line", e.line()}, {"column", e.column()}});
  } catch (const ValidationError& e) {
    return fail(2, "validation", e.what());
  } catch (const UsageError& e) {
    return fail(2, "usage", e.what());
  } catch (const Error& e) {
    return fail(2, "io", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal", e.what());
  }
}
