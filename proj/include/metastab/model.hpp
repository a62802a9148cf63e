#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace metastab {

/// Timeout used for servers that have no client policy attached.
inline constexpr double kNoTimeout = std::numeric_limits<double>::infinity();

/// A request source bound to one server. Rates in requests/second, times in seconds.
struct ClientSpec {
  std::string server;
  double arrival_rate = 0.0;
  double timeout = 1.0;
  int max_retries = 0;

  bool operator==(const ClientSpec&) const = default;
};

struct ServerSpec {
  std::string id;
  double service_rate = 1.0;
  int threads = 1;
  /// Max jobs in system, in service plus waiting.
  int queue_bound = 1;
  int orbit_bound = 0;
  std::optional<std::string> downstream;

  bool operator==(const ServerSpec&) const = default;
};

/// A validated program: servers in pipeline order (server i calls server i+1)
/// and at most one (averaged) client per server.
struct ProgramSpec {
  std::string name;
  std::vector<ServerSpec> servers;
  /// Aligned with `servers`.
  std::vector<std::optional<ClientSpec>> clients;

  std::size_t size() const noexcept { return servers.size(); }

  double arrival_rate(std::size_t i) const { return clients[i] ? clients[i]->arrival_rate : 0.0; }
  double timeout(std::size_t i) const { return clients[i] ? clients[i]->timeout : kNoTimeout; }
  int retries(std::size_t i) const { return clients[i] ? clients[i]->max_retries : 0; }
  /// Fraction of timed-out requests that are retried, R/(R+1).
  double retry_fraction(std::size_t i) const {
    const double r = retries(i);
    return r / (r + 1.0);
  }
  std::size_t index_of(std::string_view server_id) const;

  bool operator==(const ProgramSpec&) const = default;
};

struct ValidationOptions {
  /// Permit a zero arrival rate on the pipeline root. Only useful in tests.
  bool allow_zero_arrival = false;
};

/// Orders servers into a pipeline, averages clients per server and checks every invariant.
ProgramSpec make_program(std::string name, std::vector<ServerSpec> servers,
                         std::vector<ClientSpec> clients, ValidationOptions options = {});

/// Parses the versioned JSON program document.
ProgramSpec parse_program(std::string_view text, ValidationOptions options = {});

/// Renders a program as the JSON document accepted by `parse_program`.
std::string render_program(const ProgramSpec& program);

/// Collapses the clients of one server into a single client: rates add, the timeout is
/// the rate-weighted mean and the retry budget the rate-weighted mean rounded half up.
ClientSpec average_clients(std::span<const ClientSpec> clients);

// ---------------------------------------------------------------------------
// Parameters

/// What a parameter name like "lambda_2" refers to. Server index is 0-based.
struct ParamRef {
  enum class Kind { ArrivalRate, ServiceRate, Timeout, QueueBound, OrbitBound, Threads, Retries };
  Kind kind;
  std::size_t server;

  bool real_valued() const noexcept {
    return kind == Kind::ArrivalRate || kind == Kind::ServiceRate || kind == Kind::Timeout;
  }
};

/// Parses "lambda_i", "mu_i", "timeout_i", "queue_bound_i", "orbit_bound_i", "threads_i",
/// "retries_i" with 1-based i. Throws ValidationError on anything else.
ParamRef parse_param_name(std::string_view name);
std::string param_name(ParamRef ref);

struct ParamBound {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double x) const noexcept { return x >= lo && x <= hi; }
  double width() const noexcept { return hi - lo; }
};

/// Named real parameters with optional closed-interval bounds, in insertion order.
class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(std::initializer_list<std::pair<std::string, double>> entries);

  void set(const std::string& name, double value);
  void set_bound(const std::string& name, ParamBound bound);
  double get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::optional<ParamBound> bound(const std::string& name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<std::pair<std::string, double>>& entries() const noexcept { return entries_; }
  std::vector<std::string> names() const;
  std::vector<double> values() const;
  /// Same names, new values (in entry order).
  ParamVector with_values(std::span<const double> values) const;
  /// True when every bounded entry lies inside its bound.
  bool in_box() const;

 private:
  std::vector<std::pair<std::string, double>> entries_;
  std::map<std::string, ParamBound> bounds_;
};

/// Reads the current value of a real parameter from a program.
double read_param(const ProgramSpec& program, const std::string& name);

/// Returns a copy of `program` with the named real constants replaced; only
/// lambda/mu/timeout are accepted. Invariants are re-checked.
ProgramSpec substitute_params(const ProgramSpec& program, const ParamVector& theta,
                              ValidationOptions options = {});

/// Like substitute_params but also accepts structural names (bounds, threads, retries);
/// integral kinds require an integral value. Used by sweeps and policy overrides.
ProgramSpec apply_override(const ProgramSpec& program, const std::string& name, double value,
                           ValidationOptions options = {});

/// Parses "name=value,name=value" into (name, value) pairs.
std::vector<std::pair<std::string, double>> parse_assignments(std::string_view text);

}  // namespace metastab
