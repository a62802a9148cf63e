#include "metastab/des.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include <json.hpp>

#include "metastab/error.hpp"
#include "metastab/io.hpp"

namespace metastab {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

Schedule parse_schedule(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("invalid schedule JSON: ") + e.what());
  }
  if (!doc.is_array()) throw ParseError("schedule must be a JSON array");
  Schedule s;
  double last = -1.0;
  for (const auto& item : doc) {
    if (!item.is_object() || !item.contains("t") || !item.contains("set") ||
        !item["t"].is_number() || !item["set"].is_object())
      throw ParseError("schedule entries need numeric 't' and object 'set'");
    ScheduleEntry e;
    e.t = item["t"].get<double>();
    if (!(e.t > last) || e.t < 0.0) throw ValidationError("schedule times must strictly increase");
    last = e.t;
    for (auto it = item["set"].begin(); it != item["set"].end(); ++it) {
      if (!it.value().is_number()) throw ParseError("schedule value for '" + it.key() + "'");
      const ParamRef ref = parse_param_name(it.key());
      if (!ref.real_valued())
        throw ValidationError("schedule can only set lambda, mu or timeout: '" + it.key() + "'");
      e.set.emplace_back(it.key(), it.value().get<double>());
    }
    s.entries.push_back(std::move(e));
  }
  return s;
}

InitState empty_init(const ProgramSpec& p) { return InitState(p.size(), {0, 0}); }

InitState full_init(const ProgramSpec& p) {
  InitState s;
  for (const auto& srv : p.servers) s.emplace_back(srv.queue_bound, srv.orbit_bound);
  return s;
}

InitState parse_init(std::string_view text, const ProgramSpec& p) {
  if (text == "empty" || text == "Low" || text == "low") return empty_init(p);
  if (text == "full" || text == "High" || text == "high") return full_init(p);
  InitState s;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find(';', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string item(text.substr(pos, end - pos));
    int u = 0, v = 0;
    char extra = 0;
    if (std::sscanf(item.c_str(), " %d , %d %c", &u, &v, &extra) != 2)
      throw ValidationError("bad init state '" + item + "'; expected u,v;u,v");
    s.emplace_back(u, v);
    pos = end + 1;
  }
  if (s.size() != p.size())
    throw ValidationError("init state has " + std::to_string(s.size()) + " servers, program has " +
                          std::to_string(p.size()));
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i].first < 0 || s[i].first > p.servers[i].queue_bound || s[i].second < 0 ||
        s[i].second > p.servers[i].orbit_bound)
      throw ValidationError("init state out of bounds for server '" + p.servers[i].id + "'");
  return s;
}

Simulator::Simulator(const ProgramSpec& program, std::uint64_t seed, const SimOptions& options)
    : program_(program), options_(options) {
  if (!(options.horizon > 0.0) || !(options.ts > 0.0))
    throw ValidationError("horizon and sampling period must be positive");
  if (options.retry_backoff < 0.0) throw ValidationError("retry backoff must be >= 0");
  servers_.resize(program_.size());
  for (std::size_t i = 0; i < servers_.size(); ++i) {
    auto& s = servers_[i];
    s.lambda = program_.arrival_rate(i);
    s.mu = program_.servers[i].service_rate;
    s.timeout = program_.timeout(i);
    s.retries = program_.retries(i);
    s.arrival_rng = Rng(derive_seed(seed, 2 * i));
    s.service_rng = Rng(derive_seed(seed, 2 * i + 1));
  }
  if (options_.schedule) {
    double last = -1.0;
    for (std::size_t k = 0; k < options_.schedule->entries.size(); ++k) {
      const auto& e = options_.schedule->entries[k];
      if (!(e.t > last)) throw ValidationError("schedule times must strictly increase");
      last = e.t;
      for (const auto& [name, value] : e.set) {
        const ParamRef ref = parse_param_name(name);
        if (!ref.real_valued() || ref.server >= servers_.size())
          throw ValidationError("schedule parameter '" + name + "' is not applicable");
        if (ref.kind == ParamRef::Kind::ArrivalRate ? value < 0.0 : !(value > 0.0))
          throw ValidationError("schedule value for '" + name + "' out of range");
      }
      push(e.t, Kind::RateChange, k);
    }
  }
  if (options_.init) {
    const InitState& init = *options_.init;
    if (init.size() != servers_.size()) throw ValidationError("init state size mismatch");
    for (std::size_t i = 0; i < init.size(); ++i)
      if (init[i].first < 0 || init[i].first > program_.servers[i].queue_bound ||
          init[i].second < 0 || init[i].second > program_.servers[i].orbit_bound)
        throw ValidationError("init state out of bounds");
    seed_initial_state(init);
  }
  for (std::size_t i = 0; i < servers_.size(); ++i) schedule_arrival(i);
}

void Simulator::push(double t, Kind kind, std::uint64_t a, std::uint64_t b) {
  heap_.push(Event{t, kind, seq_++, a, b});
}

void Simulator::schedule_arrival(std::size_t i) {
  auto& s = servers_[i];
  if (s.lambda > 0.0) push(now_ + s.arrival_rng.exponential(s.lambda), Kind::Arrival, i,
                           s.arrival_generation);
}

std::uint64_t Simulator::new_request(std::size_t server, std::uint64_t parent_job) {
  auto& s = servers_[server];
  Request r;
  r.server = server;
  r.parent_job = parent_job;
  r.created = now_;
  r.timeout = s.timeout;
  r.max_retries = std::isfinite(s.timeout) ? s.retries : 0;
  requests_.push_back(r);
  ++s.ledger.arrivals;
  ++s.ledger.in_flight;
  return requests_.size() - 1;
}

void Simulator::issue_attempt(std::uint64_t rid) {
  Request& r = requests_[rid];
  const std::size_t i = r.server;
  auto& s = servers_[i];
  ++r.attempts;
  ++s.ledger.attempts;
  if (s.in_system >= program_.servers[i].queue_bound) {
    ++s.ledger.attempts_dropped;
    ++s.interval_drops;
    end_request(rid, Outcome::Drop);
    return;
  }
  jobs_.push_back(Job{rid, r.attempts, i});
  s.queue.push_back(jobs_.size() - 1);
  ++s.in_system;
  if (std::isfinite(r.timeout)) push(now_ + r.timeout, Kind::Timeout, rid, r.attempts);
  try_start(i);
}

void Simulator::try_start(std::size_t i) {
  auto& s = servers_[i];
  while (s.busy < program_.servers[i].threads && !s.queue.empty()) {
    const std::uint64_t job = s.queue.front();
    s.queue.pop_front();
    ++s.busy;
    push(now_ + s.service_rng.exponential(s.mu), Kind::ServiceDone, job);
  }
}

void Simulator::service_done(std::uint64_t job) {
  const std::size_t i = jobs_[job].server;
  if (i + 1 < servers_.size()) {
    // Synchronous call: the worker stays occupied until the downstream request ends.
    const std::uint64_t child = new_request(i + 1, job);
    issue_attempt(child);
    return;
  }
  finish_job(job, true);
}

void Simulator::finish_job(std::uint64_t job, bool ok) {
  const Job j = jobs_[job];
  auto& s = servers_[j.server];
  --s.in_system;
  --s.busy;
  ++s.ledger.departures;
  Request& r = requests_[j.request];
  if (r.alive && !r.pending_retry && j.attempt == r.attempts)
    end_request(j.request, ok ? Outcome::Success : Outcome::DownstreamFailure);
  try_start(j.server);
}

void Simulator::end_request(std::uint64_t rid, Outcome outcome) {
  Request& r = requests_[rid];
  if (!r.alive) return;
  r.alive = false;
  auto& s = servers_[r.server];
  --s.ledger.in_flight;
  if (r.timed_out) --s.retrying;
  switch (outcome) {
    case Outcome::Success:
      ++s.ledger.completions;
      s.latency_sum += now_ - r.created;
      ++s.latency_count;
      break;
    case Outcome::Drop: ++s.ledger.drops; break;
    case Outcome::Abandon: ++s.ledger.abandoned; break;
    case Outcome::DownstreamFailure: ++s.ledger.downstream_failures; break;
  }
  if (r.parent_job != kNone) finish_job(r.parent_job, outcome == Outcome::Success);
}

void Simulator::apply_rate_change(std::size_t entry) {
  for (const auto& [name, value] : options_.schedule->entries[entry].set) {
    const ParamRef ref = parse_param_name(name);
    auto& s = servers_[ref.server];
    switch (ref.kind) {
      case ParamRef::Kind::ArrivalRate:
        s.lambda = value;
        ++s.arrival_generation;
        schedule_arrival(ref.server);
        break;
      case ParamRef::Kind::ServiceRate: s.mu = value; break;
      case ParamRef::Kind::Timeout: s.timeout = value; break;
      default: break;
    }
  }
}

void Simulator::handle(const Event& e) {
  switch (e.kind) {
    case Kind::RateChange: apply_rate_change(e.a); break;
    case Kind::ServiceDone: service_done(e.a); break;
    case Kind::Timeout: {
      Request& r = requests_[e.a];
      if (!r.alive || r.pending_retry || static_cast<std::uint64_t>(r.attempts) != e.b) break;
      auto& s = servers_[r.server];
      ++s.ledger.timeouts;
      if (!r.timed_out) {
        r.timed_out = true;
        ++s.retrying;
      }
      if (r.attempts <= r.max_retries) {
        r.pending_retry = true;
        push(now_ + options_.retry_backoff, Kind::RetryFire, e.a);
      } else {
        end_request(e.a, Outcome::Abandon);
      }
      break;
    }
    case Kind::RetryFire: {
      Request& r = requests_[e.a];
      if (!r.alive) break;
      r.pending_retry = false;
      issue_attempt(e.a);
      break;
    }
    case Kind::Arrival: {
      auto& s = servers_[e.a];
      if (e.b != s.arrival_generation) break;
      issue_attempt(new_request(e.a, kNone));
      schedule_arrival(e.a);
      break;
    }
  }
}

void Simulator::seed_initial_state(const InitState& init) {
  for (std::size_t i = 0; i < init.size(); ++i) {
    auto& s = servers_[i];
    const auto [u, v] = init[i];
    const int retrying_in_queue = std::min(u, v);
    for (int k = 0; k < u; ++k) {
      const std::uint64_t rid = new_request(i, kNone);
      ++s.ledger.initial;
      Request& r = requests_[rid];
      if (k < retrying_in_queue && r.max_retries >= 1) {
        // An earlier attempt already timed out; this queued job is the retry.
        r.attempts = 1;
        r.timed_out = true;
        ++s.retrying;
      }
      issue_attempt(rid);
    }
    for (int k = u; k < v; ++k) {
      const std::uint64_t rid = new_request(i, kNone);
      ++s.ledger.initial;
      Request& r = requests_[rid];
      if (r.max_retries < 1) {
        end_request(rid, Outcome::Abandon);
        continue;
      }
      r.attempts = 1;
      r.timed_out = true;
      r.pending_retry = true;
      ++s.retrying;
      push(0.0, Kind::RetryFire, rid);
    }
  }
}

void Simulator::run_until(double t) {
  while (!heap_.empty() && heap_.top().t < t) {
    const Event e = heap_.top();
    heap_.pop();
    now_ = e.t;
    handle(e);
  }
  now_ = std::max(now_, t);
}

std::vector<int> Simulator::jobs_in_system() const {
  std::vector<int> out;
  for (const auto& s : servers_) out.push_back(s.in_system);
  return out;
}

std::vector<int> Simulator::measure_retries() const {
  std::vector<int> out;
  for (const auto& s : servers_) out.push_back(s.retrying);
  return out;
}

std::vector<ServerLedger> Simulator::ledger() const {
  std::vector<ServerLedger> out;
  for (const auto& s : servers_) {
    ServerLedger l = s.ledger;
    l.in_system = static_cast<std::uint64_t>(s.in_system);
    out.push_back(l);
  }
  return out;
}

void Simulator::sample(Trajectory& traj) {
  for (std::size_t i = 0; i < servers_.size(); ++i) {
    auto& s = servers_[i];
    auto& series = traj.servers[i];
    series.u.push_back(s.in_system);
    series.v_hat.push_back(s.retrying);
    if (options_.metrics) {
      const bool first = series.u.size() == 1;
      series.latency_mean.push_back(s.latency_count ? s.latency_sum / s.latency_count : kNaN);
      series.goodput.push_back(first ? 0.0 : static_cast<double>(s.latency_count) / options_.ts);
      series.drops.push_back(static_cast<double>(s.interval_drops));
    }
    s.latency_sum = 0.0;
    s.latency_count = 0;
    s.interval_drops = 0;
  }
}

SimResult Simulator::run() {
  SimResult res;
  Trajectory& traj = res.trajectory;
  traj.ts = options_.ts;
  traj.has_metrics = options_.metrics;
  traj.servers.resize(servers_.size());
  for (const auto& srv : program_.servers) traj.server_ids.push_back(srv.id);
  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(k) * options_.ts;
    if (!(t < options_.horizon)) break;
    run_until(t);
    sample(traj);
    ++traj.length;
  }
  run_until(options_.horizon);
  res.ledger = ledger();
  return res;
}

SimResult simulate(const ProgramSpec& program, std::uint64_t seed, const SimOptions& options) {
  Simulator sim(program, seed, options);
  return sim.run();
}

Trajectory ensemble_average(const std::vector<Trajectory>& trajs) {
  if (trajs.empty()) throw ValidationError("ensemble_average: no trajectories");
  const Trajectory& first = trajs.front();
  for (const auto& t : trajs)
    if (t.length != first.length || t.ts != first.ts || t.servers.size() != first.servers.size() ||
        t.has_metrics != first.has_metrics)
      throw ValidationError("ensemble_average: trajectories have mismatched shapes");
  Trajectory out = first;
  const double m = static_cast<double>(trajs.size());
  auto mean_of = [&](auto member, std::size_t i, std::size_t k, bool skip_nan) {
    double sum = 0.0;
    double count = 0.0;
    for (const auto& t : trajs) {
      const double x = (t.servers[i].*member)[k];
      if (skip_nan && std::isnan(x)) continue;
      sum += x;
      count += 1.0;
    }
    if (!skip_nan) return sum / m;
    return count > 0 ? sum / count : kNaN;
  };
  for (std::size_t i = 0; i < out.servers.size(); ++i) {
    for (std::size_t k = 0; k < out.length; ++k) {
      out.servers[i].u[k] = mean_of(&ServerSeries::u, i, k, false);
      out.servers[i].v_hat[k] = mean_of(&ServerSeries::v_hat, i, k, false);
      if (out.has_metrics) {
        out.servers[i].latency_mean[k] = mean_of(&ServerSeries::latency_mean, i, k, true);
        out.servers[i].goodput[k] = mean_of(&ServerSeries::goodput, i, k, false);
        out.servers[i].drops[k] = mean_of(&ServerSeries::drops, i, k, false);
      }
    }
  }
  return out;
}

Trajectory ensemble_mean_serial(const ProgramSpec& program, std::uint64_t master_seed,
                                std::size_t runs, const SimOptions& options) {
  std::vector<Trajectory> trajs;
  trajs.reserve(runs);
  for (std::size_t r = 0; r < runs; ++r)
    trajs.push_back(simulate(program, derive_seed(master_seed, r), options).trajectory);
  return ensemble_average(trajs);
}

Trajectory ensemble_mean(const ProgramSpec& program, std::uint64_t master_seed, std::size_t runs,
                         const SimOptions& options) {
  std::vector<Trajectory> trajs(runs);
  const long n = static_cast<long>(runs);
#pragma omp parallel for schedule(dynamic, 1)
  for (long r = 0; r < n; ++r)
    trajs[static_cast<std::size_t>(r)] =
        simulate(program, derive_seed(master_seed, static_cast<std::uint64_t>(r)), options)
            .trajectory;
  return ensemble_average(trajs);
}

void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
  out << "t,server_id,u,v_hat";
  if (traj.has_metrics) out << ",latency_mean,goodput,drops";
  out << '\n';
  for (std::size_t k = 0; k < traj.length; ++k) {
    for (std::size_t i = 0; i < traj.servers.size(); ++i) {
      const auto& s = traj.servers[i];
      out << fmt_num(traj.time(k)) << ',' << traj.server_ids[i] << ',' << fmt_num(s.u[k]) << ','
          << fmt_num(s.v_hat[k]);
      if (traj.has_metrics)
        out << ',' << fmt_num(s.latency_mean[k]) << ',' << fmt_num(s.goodput[k]) << ','
            << fmt_num(s.drops[k]);
      out << '\n';
    }
  }
}

}  // namespace metastab
