#include "metastab/calibrate.hpp"

#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>

#include "metastab/analysis.hpp"
#include "metastab/cmaes.hpp"
#include "metastab/error.hpp"
#include "metastab/io.hpp"
#include "metastab/rng.hpp"

namespace metastab {

using nlohmann::json;

double CalibrationConfig::effective_gamma2() const {
  if (std::isnan(gamma2))
    return 1.0 / (static_cast<double>(inits.size()) * static_cast<double>(samples));
  return gamma2;
}

std::size_t CalibrationConfig::observables(std::size_t servers) const {
  return include_orbit ? 2 * servers : servers;
}

void CalibrationConfig::validate() const {
  if (theta0.empty()) throw ValidationError("calibration needs at least one parameter");
  for (const auto& [name, value] : theta0.entries()) {
    if (!parse_param_name(name).real_valued())
      throw ValidationError("parameter '" + name + "' cannot be calibrated");
    const auto b = theta0.bound(name);
    if (!b) throw ValidationError("parameter '" + name + "' has no box");
    if (!(b->lo <= b->hi)) throw ValidationError("box of '" + name + "' is empty");
    if (!b->contains(value)) throw ValidationError("nominal '" + name + "' lies outside its box");
  }
  if (inits.empty() || runs < 1 || samples < 1)
    throw ValidationError("Z, M and L must be at least 1");
  if (!(ts > 0.0)) throw ValidationError("ts must be positive");
  if (!(gamma1 > 0.0)) throw ValidationError("gamma1 must be positive");
  if (!std::isnan(gamma2) && !(gamma2 >= 0.0)) throw ValidationError("gamma2 must be nonnegative");
  if (!(sigma0 > 0.0)) throw ValidationError("sigma0 must be positive");
}

namespace {

FailureModel parse_failure(const std::string& s) {
  if (s == "auto") return FailureModel::Auto;
  if (s == "exact") return FailureModel::Exact;
  if (s == "chebyshev") return FailureModel::Chebyshev;
  throw ValidationError("unknown failure model '" + s + "'");
}

std::string failure_name(FailureModel f) {
  switch (f) {
    case FailureModel::Exact: return "exact";
    case FailureModel::Chebyshev: return "chebyshev";
    default: return "auto";
  }
}

}  // namespace

CalibrationConfig parse_calibration_config(std::string_view text, const ProgramSpec& program) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("calibration config: ") + e.what(), 0, 0);
  }
  if (!j.is_object()) throw ValidationError("calibration config must be an object");
  static const std::vector<std::string> known = {
      "version", "params", "inits", "runs", "samples", "ts", "gamma1", "gamma2", "generations",
      "population", "sigma0", "seed", "include_orbit", "failure"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ParseError("calibration config: unknown field '" + key + "'");
  if (j.value("version", 0) != 1) throw ParseError("calibration config needs \"version\": 1");
  CalibrationConfig c;
  try {
    for (const auto& p : j.at("params")) {
      const std::string name = p.at("name").get<std::string>();
      const double nominal = p.contains("nominal") ? p.at("nominal").get<double>() : read_param(program, name);
      c.theta0.set(name, nominal);
      c.theta0.set_bound(name, {p.at("lo").get<double>(), p.at("hi").get<double>()});
    }
    if (j.contains("inits")) c.inits = j.at("inits").get<std::vector<std::string>>();
    c.runs = j.value("runs", c.runs);
    c.samples = j.value("samples", c.samples);
    c.ts = j.value("ts", c.ts);
    c.gamma1 = j.value("gamma1", c.gamma1);
    if (j.contains("gamma2") && !j.at("gamma2").is_null()) c.gamma2 = j.at("gamma2").get<double>();
    c.generations = j.value("generations", c.generations);
    c.population = j.value("population", c.population);
    c.sigma0 = j.value("sigma0", c.sigma0);
    c.master_seed = j.value("seed", c.master_seed);
    c.include_orbit = j.value("include_orbit", c.include_orbit);
    c.failure = parse_failure(j.value("failure", std::string("auto")));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("calibration config: ") + e.what());
  }
  for (const auto& s : c.inits) (void)parse_init(s, program);
  c.validate();
  return c;
}

json to_json(const CalibrationConfig& c) {
  json params = json::array();
  for (const auto& [name, value] : c.theta0.entries()) {
    const auto b = c.theta0.bound(name);
    params.push_back({{"name", name}, {"nominal", value}, {"lo", b ? b->lo : value}, {"hi", b ? b->hi : value}});
  }
  return {{"version", 1},
          {"params", params},
          {"inits", c.inits},
          {"runs", c.runs},
          {"samples", c.samples},
          {"ts", c.ts},
          {"gamma1", c.gamma1},
          {"gamma2", c.effective_gamma2()},
          {"generations", c.generations},
          {"population", c.population},
          {"sigma0", c.sigma0},
          {"seed", c.master_seed},
          {"include_orbit", c.include_orbit},
          {"failure", failure_name(c.failure)}};
}

// ---------------------------------------------------------------------------

TrainingData collect_training_data(const ProgramSpec& program, const CalibrationConfig& config) {
  config.validate();
  TrainingData d;
  d.inits = config.inits;
  d.ts = config.ts;
  d.samples = config.samples;
  d.servers = program.size();
  for (std::size_t z = 0; z < config.inits.size(); ++z) {
    SimOptions opt;
    opt.ts = config.ts;
    opt.horizon = config.ts * static_cast<double>(config.samples);
    opt.init = parse_init(config.inits[z], program);
    const std::uint64_t seed = derive_seed(config.master_seed, z);
    d.seeds.push_back(seed);
    const Trajectory t = ensemble_mean(program, seed, config.runs, opt);
    if (t.length < config.samples) throw Error("simulator returned a short trajectory");
    std::vector<std::vector<double>> obs;
    for (std::size_t i = 0; i < d.servers; ++i)
      obs.emplace_back(t.servers[i].u.begin(), t.servers[i].u.begin() + static_cast<long>(config.samples));
    for (std::size_t i = 0; i < d.servers; ++i)
      obs.emplace_back(t.servers[i].v_hat.begin(), t.servers[i].v_hat.begin() + static_cast<long>(config.samples));
    d.series.push_back(std::move(obs));
  }
  return d;
}

void write_training_csv(std::ostream& out, const TrainingData& data) {
  out << "init,t";
  for (std::size_t i = 1; i <= data.servers; ++i) out << ",u" << i << ",v_hat" << i;
  out << '\n';
  for (std::size_t z = 0; z < data.inits.size(); ++z)
    for (std::size_t k = 0; k < data.samples; ++k) {
      out << data.inits[z] << ',' << fmt_num(static_cast<double>(k) * data.ts);
      for (std::size_t i = 0; i < data.servers; ++i)
        out << ',' << fmt_num(data.series[z][i][k]) << ',' << fmt_num(data.series[z][data.servers + i][k]);
      out << '\n';
    }
}

TrainingData read_training_csv(std::string_view text, const CalibrationConfig& config,
                               std::size_t servers) {
  TrainingData d;
  d.inits = config.inits;
  d.ts = config.ts;
  d.samples = config.samples;
  d.servers = servers;
  for (std::size_t z = 0; z < config.inits.size(); ++z) d.seeds.push_back(derive_seed(config.master_seed, z));
  d.series.assign(config.inits.size(),
                  std::vector<std::vector<double>>(2 * servers, std::vector<double>(config.samples, 0.0)));
  std::vector<std::size_t> counts(config.inits.size(), 0);
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("dataset CSV is empty");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 2 + 2 * servers)
      throw ParseError("dataset CSV row has the wrong number of columns", lineno, 0);
    const auto it = std::find(config.inits.begin(), config.inits.end(), cells[0]);
    if (it == config.inits.end()) throw ParseError("dataset CSV names an unknown init", lineno, 0);
    const auto z = static_cast<std::size_t>(it - config.inits.begin());
    const std::size_t k = counts[z]++;
    if (k >= config.samples) throw ParseError("dataset CSV has too many samples", lineno, 0);
    try {
      for (std::size_t i = 0; i < servers; ++i) {
        d.series[z][i][k] = std::stod(cells[2 + 2 * i]);
        d.series[z][servers + i][k] = std::stod(cells[3 + 2 * i]);
      }
    } catch (const std::exception&) {
      throw ParseError("dataset CSV has a non-numeric cell", lineno, 0);
    }
  }
  for (auto c : counts)
    if (c != config.samples) throw ValidationError("dataset CSV does not match the config's L");
  return d;
}

std::size_t init_state_index(const StateSpace& space, const InitState& init) {
  std::vector<int> u, v;
  for (const auto& [a, b] : init) {
    u.push_back(a);
    v.push_back(b);
  }
  return space.index(u, v);
}

std::vector<std::vector<std::vector<double>>> ctmc_series(const ProgramSpec& program,
                                                          const ParamVector& theta,
                                                          const CalibrationConfig& config,
                                                          kernels::Exec exec) {
  const ProgramSpec p = substitute_params(program, theta);
  CompileOptions co;
  co.failure = config.failure;
  co.check_irreducible = false;
  const CtmcModel m = exec == kernels::Exec::Serial ? compile_serial(p, co) : compile(p, co);
  std::vector<std::vector<double>> pi0s;
  for (const auto& s : config.inits)
    pi0s.push_back(point_mass(m.size(), init_state_index(m.space, parse_init(s, p))));
  std::vector<std::vector<double>> weights;
  for (std::size_t i = 0; i < p.size(); ++i) weights.push_back(u_observable(m.space, i));
  if (config.include_orbit)
    for (std::size_t i = 0; i < p.size(); ++i) weights.push_back(v_observable(m.space, i));
  std::vector<double> times(config.samples);
  for (std::size_t k = 0; k < config.samples; ++k) times[k] = static_cast<double>(k) * config.ts;
  TransientOptions topt;
  topt.exec = exec;
  return expected_observables(m.q, pi0s, times, weights, topt);
}

double series_distance(const std::vector<std::vector<std::vector<double>>>& a,
                       const std::vector<std::vector<std::vector<double>>>& b) {
  double s = 0.0;
  for (std::size_t z = 0; z < a.size(); ++z)
    for (std::size_t o = 0; o < a[z].size(); ++o)
      for (std::size_t k = 0; k < a[z][o].size(); ++k) {
        const double e = a[z][o][k] - b.at(z).at(o).at(k);
        s += e * e;
      }
  return s;
}

double calibration_loss(const ProgramSpec& program, const ParamVector& theta,
                        const TrainingData& data, const CalibrationConfig& config,
                        kernels::Exec exec) {
  if (!theta.in_box()) throw ValidationError("theta lies outside the feasibility box");
  double reg = 0.0;
  for (const auto& [name, value] : theta.entries()) {
    const double e = value - config.theta0.get(name);
    reg += e * e;
  }
  const double g2 = config.effective_gamma2();
  if (g2 == 0.0) return config.gamma1 * reg;
  return config.gamma1 * reg + g2 * series_distance(ctmc_series(program, theta, config, exec), data.series);
}

// ---------------------------------------------------------------------------

CalibrationResult calibrate(const ProgramSpec& program, const TrainingData& data,
                            const CalibrationConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto names = config.theta0.names();
  const auto nominal = config.theta0.values();
  std::vector<double> lo, hi;
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto b = *config.theta0.bound(names[i]);
    lo.push_back(b.lo);
    hi.push_back(b.hi);
    if (b.hi > b.lo) free.push_back(i);
  }
  auto to_theta = [&](const std::vector<double>& x) {
    std::vector<double> v = nominal;
    for (std::size_t a = 0; a < free.size(); ++a) {
      const std::size_t i = free[a];
      v[i] = std::clamp(lo[i] + x[a] * (hi[i] - lo[i]), lo[i], hi[i]);
    }
    return config.theta0.with_values(v);
  };

  CalibrationResult res;
  const double loss0 = calibration_loss(program, config.theta0, data, config);
  res.loss_theta0 = loss0;
  if (free.empty()) {
    res.theta_star = config.theta0;
    res.loss = loss0;
    res.evaluations = 1;
    res.budget_exhausted = false;
    res.trace.push_back({0, loss0, loss0, loss0, 0.0, nominal});
  } else {
    std::size_t failed = 0;
    BatchObjective f = [&](const std::vector<std::vector<double>>& xs) {
      std::vector<double> out(xs.size());
      std::vector<char> bad(xs.size(), 0);
      const long n = static_cast<long>(xs.size());
      if (xs.size() == 1) {
        // the start point; already evaluated
        out[0] = loss0;
        return out;
      }
#pragma omp parallel for schedule(dynamic, 1)
      for (long k = 0; k < n; ++k) {
        const auto i = static_cast<std::size_t>(k);
        try {
          out[i] = calibration_loss(program, to_theta(xs[i]), data, config, kernels::Exec::Serial);
        } catch (const Error&) {
          out[i] = std::numeric_limits<double>::infinity();
          bad[i] = 1;
        }
      }
      for (char b : bad) failed += static_cast<std::size_t>(b);
      return out;
    };
    std::vector<double> x0;
    for (auto i : free) x0.push_back((nominal[i] - lo[i]) / (hi[i] - lo[i]));
    CmaesOptions co;
    co.generations = config.generations;
    co.population = config.population;
    co.sigma0 = config.sigma0;
    co.seed = derive_seed(config.master_seed, 0x63616c6962ULL);
    const CmaesResult r = cmaes_minimize(f, x0, co);
    res.theta_star = to_theta(r.x);
    res.loss = r.value;
    res.evaluations = r.evaluations;
    res.failed_evaluations = failed;
    res.clamped = r.clamped;
    res.budget_exhausted = r.budget_exhausted;
    for (const auto& g : r.trace)
      res.trace.push_back({g.generation, g.best, g.mean, g.best_so_far, g.sigma, to_theta(g.best_x).values()});
  }
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  res.fingerprint = {{"master_seed", config.master_seed},
                     {"data_seeds", data.seeds},
                     {"inits", data.inits},
                     {"runs", config.runs},
                     {"samples", config.samples},
                     {"ts", config.ts},
                     {"gamma1", config.gamma1},
                     {"gamma2", config.effective_gamma2()},
                     {"program_sha256", sha256_hex(render_program(program))}};
  return res;
}

json to_json(const CalibrationResult& r) {
  json theta = json::object();
  for (const auto& [name, value] : r.theta_star.entries()) theta[name] = value;
  json trace = json::array();
  for (const auto& t : r.trace)
    trace.push_back({{"generation", t.generation},
                     {"best", t.best},
                     {"mean", std::isfinite(t.mean) ? json(t.mean) : json(nullptr)},
                     {"best_so_far", t.best_so_far},
                     {"sigma", t.sigma},
                     {"best_theta", t.best_theta}});
  return {{"theta_star", theta},
          {"loss", r.loss},
          {"loss_theta0", r.loss_theta0},
          {"evaluations", r.evaluations},
          {"failed_evaluations", r.failed_evaluations},
          {"clamped_candidates", r.clamped},
          {"budget_exhausted", r.budget_exhausted},
          {"wall_seconds", r.wall_seconds},
          {"fingerprint", r.fingerprint},
          {"trace", trace}};
}

}  // namespace metastab
