#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "metastab/model.hpp"
#include "metastab/rng.hpp"

namespace metastab {

/// Per-server sampled series. Values are doubles so ensemble means share the type.
struct ServerSeries {
  std::vector<double> u;
  std::vector<double> v_hat;
  // Optional per-interval metrics, filled when requested.
  std::vector<double> latency_mean;
  std::vector<double> goodput;
  std::vector<double> drops;
};

struct Trajectory {
  double ts = 1.0;
  std::size_t length = 0;
  std::vector<std::string> server_ids;
  std::vector<ServerSeries> servers;
  bool has_metrics = false;

  double time(std::size_t k) const { return static_cast<double>(k) * ts; }
};

struct ScheduleEntry {
  double t = 0.0;
  std::vector<std::pair<std::string, double>> set;
};

/// Rate changes applied at given times. Accepts lambda_i, mu_i and timeout_i.
struct Schedule {
  std::vector<ScheduleEntry> entries;
};

/// Parses `[{"t": 200, "set": {"lambda_1": 20}}, ...]`; times must strictly increase.
Schedule parse_schedule(std::string_view text);

/// Per-server initial (u, v).
using InitState = std::vector<std::pair<int, int>>;

/// "empty", "full", or "u1,v1;u2,v2;...".
InitState parse_init(std::string_view text, const ProgramSpec& program);
InitState empty_init(const ProgramSpec& program);
InitState full_init(const ProgramSpec& program);

struct SimOptions {
  double horizon = 1.0;
  double ts = 1.0;
  std::optional<Schedule> schedule;
  std::optional<InitState> init;
  /// Delay between a timeout and the next attempt.
  double retry_backoff = 0.0;
  bool metrics = false;
};

/// Request outcomes for requests that target one server.
struct ServerLedger {
  std::uint64_t arrivals = 0;  // includes requests seeded by the initial state
  std::uint64_t initial = 0;
  std::uint64_t completions = 0;
  std::uint64_t drops = 0;
  std::uint64_t abandoned = 0;
  std::uint64_t downstream_failures = 0;
  std::uint64_t in_flight = 0;
  // Attempt-level accounting.
  std::uint64_t attempts = 0;
  std::uint64_t attempts_dropped = 0;
  std::uint64_t departures = 0;
  std::uint64_t in_system = 0;
  std::uint64_t timeouts = 0;

  bool balanced() const {
    return arrivals == completions + drops + abandoned + downstream_failures + in_flight &&
           attempts == attempts_dropped + departures + in_system;
  }
};

struct SimResult {
  Trajectory trajectory;
  std::vector<ServerLedger> ledger;
};

/// Event-heap simulator. One instance is single-threaded.
class Simulator {
 public:
  Simulator(const ProgramSpec& program, std::uint64_t seed, const SimOptions& options);

  /// Processes every event with time strictly below `t`.
  void run_until(double t);
  double now() const { return now_; }

  std::vector<int> jobs_in_system() const;
  /// Requests that timed out at least once and are neither finished nor abandoned.
  std::vector<int> measure_retries() const;
  std::vector<ServerLedger> ledger() const;

  /// Runs to the horizon, sampling at k*ts for every k with k*ts < horizon.
  SimResult run();

 private:
  enum class Kind : int { RateChange = 0, ServiceDone = 1, Timeout = 2, RetryFire = 3, Arrival = 4 };
  struct Event {
    double t;
    Kind kind;
    std::uint64_t seq;
    std::uint64_t a;
    std::uint64_t b;
  };
  struct Later {
    bool operator()(const Event& x, const Event& y) const {
      if (x.t != y.t) return x.t > y.t;
      if (x.kind != y.kind) return static_cast<int>(x.kind) > static_cast<int>(y.kind);
      return x.seq > y.seq;
    }
  };
  enum class Outcome { Success, Drop, Abandon, DownstreamFailure };
  static constexpr std::uint64_t kNone = ~std::uint64_t{0};

  struct Request {
    std::size_t server;
    std::uint64_t parent_job;
    double created;
    double timeout;
    int max_retries;
    int attempts = 0;
    bool timed_out = false;
    bool pending_retry = false;
    bool alive = true;
  };
  struct Job {
    std::uint64_t request;
    int attempt;
    std::size_t server;
  };
  struct ServerState {
    std::deque<std::uint64_t> queue;
    int busy = 0;
    int in_system = 0;
    int retrying = 0;
    std::uint64_t arrival_generation = 0;
    double lambda = 0.0;
    double mu = 1.0;
    double timeout = kNoTimeout;
    int retries = 0;
    Rng arrival_rng;
    Rng service_rng;
    ServerLedger ledger;
    // Interval metrics.
    double latency_sum = 0.0;
    std::uint64_t latency_count = 0;
    std::uint64_t interval_drops = 0;
  };

  void push(double t, Kind kind, std::uint64_t a = 0, std::uint64_t b = 0);
  void handle(const Event& e);
  void schedule_arrival(std::size_t server);
  std::uint64_t new_request(std::size_t server, std::uint64_t parent_job);
  void issue_attempt(std::uint64_t request);
  void try_start(std::size_t server);
  void service_done(std::uint64_t job);
  void finish_job(std::uint64_t job, bool ok);
  void end_request(std::uint64_t request, Outcome outcome);
  void apply_rate_change(std::size_t entry);
  void seed_initial_state(const InitState& init);
  void sample(Trajectory& traj);

  ProgramSpec program_;
  SimOptions options_;
  std::vector<ServerState> servers_;
  std::vector<Request> requests_;
  std::vector<Job> jobs_;
  std::priority_queue<Event, std::vector<Event>, Later> heap_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;
};

SimResult simulate(const ProgramSpec& program, std::uint64_t seed, const SimOptions& options);

/// Per-sample mean across trajectories.
Trajectory ensemble_average(const std::vector<Trajectory>& trajectories);

/// Runs `runs` simulations with seeds derive_seed(master_seed, r) and averages them.
/// The OpenMP version gives the same bytes as the serial one for any thread count.
Trajectory ensemble_mean_serial(const ProgramSpec& program, std::uint64_t master_seed,
                                std::size_t runs, const SimOptions& options);
Trajectory ensemble_mean(const ProgramSpec& program, std::uint64_t master_seed, std::size_t runs,
                         const SimOptions& options);

/// CSV `t,server_id,u,v_hat[,latency_mean,goodput,drops]`, one row per (sample, server).
void write_trajectory_csv(std::ostream& out, const Trajectory& trajectory);

}  // namespace metastab
