#include "metastab/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "metastab/error.hpp"

namespace metastab {

using nlohmann::json;

std::size_t ProgramSpec::index_of(std::string_view server_id) const {
  for (std::size_t i = 0; i < servers.size(); ++i)
    if (servers[i].id == server_id) return i;
  throw ValidationError("unknown server '" + std::string(server_id) + "'");
}

ClientSpec average_clients(std::span<const ClientSpec> clients) {
  if (clients.empty()) throw ValidationError("average_clients: no clients");
  ClientSpec out;
  out.server = clients.front().server;
  double lam = 0.0;
  for (const auto& c : clients) lam += c.arrival_rate;
  double t = 0.0, r = 0.0;
  if (lam > 0.0) {
    for (const auto& c : clients) {
      t += c.arrival_rate * c.timeout;
      r += c.arrival_rate * c.max_retries;
    }
    t /= lam;
    r /= lam;
  } else {
    for (const auto& c : clients) {
      t += c.timeout;
      r += c.max_retries;
    }
    t /= static_cast<double>(clients.size());
    r /= static_cast<double>(clients.size());
  }
  out.arrival_rate = lam;
  out.timeout = t;
  out.max_retries = static_cast<int>(std::floor(r + 0.5));
  return out;
}

namespace {

void check_server(const ServerSpec& s) {
  const std::string where = "server '" + s.id + "': ";
  if (s.id.empty()) throw ValidationError("server id must be non-empty");
  if (!(s.service_rate > 0.0) || !std::isfinite(s.service_rate))
    throw ValidationError(where + "mu must be positive and finite");
  if (s.threads < 1) throw ValidationError(where + "threads must be >= 1");
  if (s.queue_bound < 1) throw ValidationError(where + "queue_bound must be >= 1");
  if (s.orbit_bound < 0) throw ValidationError(where + "orbit_bound must be >= 0");
}

void check_client(const ClientSpec& c, bool zero_ok) {
  const std::string where = "client of '" + c.server + "': ";
  if (!std::isfinite(c.arrival_rate) || c.arrival_rate < 0.0 || (!zero_ok && c.arrival_rate == 0.0))
    throw ValidationError(where + "lambda must be positive");
  if (!(c.timeout > 0.0) || !std::isfinite(c.timeout))
    throw ValidationError(where + "timeout must be positive and finite");
  if (c.max_retries < 0) throw ValidationError(where + "retries must be >= 0");
}

std::vector<ServerSpec> order_pipeline(std::vector<ServerSpec> servers) {
  if (servers.empty()) throw ValidationError("program has no servers");
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < servers.size(); ++i)
    if (!idx.emplace(servers[i].id, i).second)
      throw ValidationError("duplicate server id '" + servers[i].id + "'");
  std::vector<int> upstream(servers.size(), 0);
  for (const auto& s : servers) {
    if (!s.downstream) continue;
    auto it = idx.find(*s.downstream);
    if (it == idx.end())
      throw ValidationError("server '" + s.id + "' references unknown downstream '" +
                            *s.downstream + "'");
    if (++upstream[it->second] > 1)
      throw ValidationError("server '" + *s.downstream +
                            "' has more than one upstream; only linear pipelines are supported");
  }
  // Any walk that revisits a node is a cycle.
  for (std::size_t start = 0; start < servers.size(); ++start) {
    std::set<std::size_t> seen;
    std::size_t cur = start;
    while (true) {
      if (!seen.insert(cur).second)
        throw ValidationError("downstream references form a cycle through '" + servers[cur].id +
                              "'");
      if (!servers[cur].downstream) break;
      cur = idx.at(*servers[cur].downstream);
    }
  }
  std::vector<std::size_t> roots;
  for (std::size_t i = 0; i < servers.size(); ++i)
    if (upstream[i] == 0) roots.push_back(i);
  if (roots.size() != 1)
    throw ValidationError("servers must form a single pipeline; found " +
                          std::to_string(roots.size()) + " roots");
  std::vector<ServerSpec> out;
  std::size_t cur = roots.front();
  while (true) {
    out.push_back(servers[cur]);
    if (!servers[cur].downstream) break;
    cur = idx.at(*servers[cur].downstream);
  }
  return out;
}

void check_program(const ProgramSpec& p, ValidationOptions options) {
  for (const auto& s : p.servers) check_server(s);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i + 1 < p.size()) {
      if (p.servers[i].downstream != p.servers[i + 1].id)
        throw ValidationError("servers are not in pipeline order");
    } else if (p.servers[i].downstream) {
      throw ValidationError("last server must not have a downstream");
    }
    if (p.clients[i]) {
      if (p.clients[i]->server != p.servers[i].id)
        throw ValidationError("client/server alignment broken");
      check_client(*p.clients[i], options.allow_zero_arrival || i > 0);
    }
  }
  if (!options.allow_zero_arrival && p.arrival_rate(0) <= 0.0)
    throw ValidationError("root server '" + p.servers[0].id +
                          "' needs a client with positive lambda");
}

std::pair<std::size_t, std::size_t> line_col(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ParseError(where + ": unknown field '" + it.key() + "'");
  }
}

template <typename T>
T required(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParseError(where + ": field '" + key + "' has the wrong type");
  }
}

int required_int(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
  const json& v = obj.at(key);
  if (!v.is_number_integer()) throw ParseError(where + ": field '" + key + "' must be an integer");
  return v.get<int>();
}

}  // namespace

ProgramSpec make_program(std::string name, std::vector<ServerSpec> servers,
                         std::vector<ClientSpec> clients, ValidationOptions options) {
  ProgramSpec p;
  p.name = std::move(name);
  for (const auto& s : servers) check_server(s);
  p.servers = order_pipeline(std::move(servers));
  p.clients.assign(p.servers.size(), std::nullopt);
  std::map<std::size_t, std::vector<ClientSpec>> grouped;
  for (auto& c : clients) {
    std::size_t i = 0;
    try {
      i = p.index_of(c.server);
    } catch (const ValidationError&) {
      throw ValidationError("client references unknown server '" + c.server + "'");
    }
    check_client(c, true);
    grouped[i].push_back(std::move(c));
  }
  for (auto& [i, group] : grouped) p.clients[i] = average_clients(group);
  check_program(p, options);
  return p;
}

ProgramSpec parse_program(std::string_view text, ValidationOptions options) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    auto [line, col] = line_col(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ParseError("invalid JSON: " + std::string(e.what()), line, col);
  }
  if (!doc.is_object()) throw ParseError("program document must be a JSON object");
  reject_unknown_keys(doc, {"version", "name", "servers", "clients"}, "program");
  if (!doc.contains("version")) throw ParseError("program: missing field 'version'");
  if (!doc["version"].is_number_integer() || doc["version"].get<int>() != 1)
    throw ParseError("program: unsupported version (expected 1)");
  std::string name = doc.value("name", std::string{});
  if (!doc.contains("servers") || !doc["servers"].is_array())
    throw ParseError("program: 'servers' must be an array");

  std::vector<ServerSpec> servers;
  for (std::size_t k = 0; k < doc["servers"].size(); ++k) {
    const json& js = doc["servers"][k];
    const std::string where = "servers[" + std::to_string(k) + "]";
    if (!js.is_object()) throw ParseError(where + ": must be an object");
    reject_unknown_keys(js, {"id", "mu", "threads", "queue_bound", "orbit_bound", "downstream"},
                        where);
    ServerSpec s;
    s.id = required<std::string>(js, "id", where);
    s.service_rate = required<double>(js, "mu", where);
    s.threads = js.contains("threads") ? required_int(js, "threads", where) : 1;
    s.queue_bound = required_int(js, "queue_bound", where);
    s.orbit_bound = required_int(js, "orbit_bound", where);
    if (js.contains("downstream") && !js["downstream"].is_null())
      s.downstream = required<std::string>(js, "downstream", where);
    servers.push_back(std::move(s));
  }

  std::vector<ClientSpec> clients;
  if (doc.contains("clients")) {
    if (!doc["clients"].is_array()) throw ParseError("program: 'clients' must be an array");
    for (std::size_t k = 0; k < doc["clients"].size(); ++k) {
      const json& jc = doc["clients"][k];
      const std::string where = "clients[" + std::to_string(k) + "]";
      if (!jc.is_object()) throw ParseError(where + ": must be an object");
      reject_unknown_keys(jc, {"server", "lambda", "timeout", "retries"}, where);
      ClientSpec c;
      c.server = required<std::string>(jc, "server", where);
      c.arrival_rate = required<double>(jc, "lambda", where);
      c.timeout = required<double>(jc, "timeout", where);
      c.max_retries = required_int(jc, "retries", where);
      clients.push_back(std::move(c));
    }
  }
  return make_program(std::move(name), std::move(servers), std::move(clients), options);
}

std::string render_program(const ProgramSpec& p) {
  json doc;
  doc["version"] = 1;
  doc["name"] = p.name;
  json servers = json::array();
  for (const auto& s : p.servers) {
    json js{{"id", s.id},
            {"mu", s.service_rate},
            {"threads", s.threads},
            {"queue_bound", s.queue_bound},
            {"orbit_bound", s.orbit_bound}};
    if (s.downstream) js["downstream"] = *s.downstream;
    servers.push_back(std::move(js));
  }
  doc["servers"] = std::move(servers);
  json clients = json::array();
  for (const auto& c : p.clients) {
    if (!c) continue;
    clients.push_back({{"server", c->server},
                       {"lambda", c->arrival_rate},
                       {"timeout", c->timeout},
                       {"retries", c->max_retries}});
  }
  doc["clients"] = std::move(clients);
  return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

namespace {

struct KindName {
  ParamRef::Kind kind;
  const char* prefix;
};

constexpr KindName kKindNames[] = {
    {ParamRef::Kind::ArrivalRate, "lambda"},    {ParamRef::Kind::ServiceRate, "mu"},
    {ParamRef::Kind::Timeout, "timeout"},       {ParamRef::Kind::QueueBound, "queue_bound"},
    {ParamRef::Kind::OrbitBound, "orbit_bound"}, {ParamRef::Kind::Threads, "threads"},
    {ParamRef::Kind::Retries, "retries"},
};

}  // namespace

ParamRef parse_param_name(std::string_view name) {
  const auto us = name.rfind('_');
  if (us == std::string_view::npos || us + 1 >= name.size())
    throw ValidationError("bad parameter name '" + std::string(name) + "'");
  const std::string_view prefix = name.substr(0, us);
  const std::string_view digits = name.substr(us + 1);
  std::size_t one_based = 0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), one_based);
  if (ec != std::errc{} || ptr != digits.data() + digits.size() || one_based == 0)
    throw ValidationError("bad parameter index in '" + std::string(name) + "'");
  for (const auto& kn : kKindNames)
    if (prefix == kn.prefix) return {kn.kind, one_based - 1};
  throw ValidationError("unknown parameter '" + std::string(name) + "'");
}

std::string param_name(ParamRef ref) {
  for (const auto& kn : kKindNames)
    if (kn.kind == ref.kind) return std::string(kn.prefix) + "_" + std::to_string(ref.server + 1);
  return {};
}

ParamVector::ParamVector(std::initializer_list<std::pair<std::string, double>> entries) {
  for (const auto& [k, v] : entries) set(k, v);
}

void ParamVector::set(const std::string& name, double value) {
  for (auto& e : entries_)
    if (e.first == name) {
      e.second = value;
      return;
    }
  entries_.emplace_back(name, value);
}

void ParamVector::set_bound(const std::string& name, ParamBound bound) {
  if (!(bound.lo <= bound.hi))
    throw ValidationError("bound for '" + name + "' has lo > hi");
  bounds_[name] = bound;
}

double ParamVector::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return e.second;
  throw ValidationError("parameter '" + name + "' not set");
}

bool ParamVector::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == name; });
}

std::optional<ParamBound> ParamVector::bound(const std::string& name) const {
  auto it = bounds_.find(name);
  if (it == bounds_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> ParamVector::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

std::vector<double> ParamVector::values() const {
  std::vector<double> out;
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

ParamVector ParamVector::with_values(std::span<const double> values) const {
  if (values.size() != entries_.size())
    throw ValidationError("with_values: size mismatch");
  ParamVector out = *this;
  for (std::size_t i = 0; i < values.size(); ++i) out.entries_[i].second = values[i];
  return out;
}

bool ParamVector::in_box() const {
  for (const auto& [name, value] : entries_) {
    auto b = bound(name);
    if (b && !b->contains(value)) return false;
  }
  return true;
}

double read_param(const ProgramSpec& p, const std::string& name) {
  const ParamRef ref = parse_param_name(name);
  if (ref.server >= p.size())
    throw ValidationError("parameter '" + name + "' refers to a missing server");
  const auto& s = p.servers[ref.server];
  switch (ref.kind) {
    case ParamRef::Kind::ArrivalRate: return p.arrival_rate(ref.server);
    case ParamRef::Kind::ServiceRate: return s.service_rate;
    case ParamRef::Kind::Timeout: return p.timeout(ref.server);
    case ParamRef::Kind::QueueBound: return s.queue_bound;
    case ParamRef::Kind::OrbitBound: return s.orbit_bound;
    case ParamRef::Kind::Threads: return s.threads;
    case ParamRef::Kind::Retries: return p.retries(ref.server);
  }
  return 0.0;
}

namespace {

void assign(ProgramSpec& p, const std::string& name, double value, bool structural_ok) {
  const ParamRef ref = parse_param_name(name);
  if (ref.server >= p.size())
    throw ValidationError("parameter '" + name + "' refers to a missing server");
  if (!ref.real_valued() && !structural_ok)
    throw ValidationError("parameter '" + name + "' is not calibratable");
  if (!ref.real_valued() && value != std::floor(value))
    throw ValidationError("parameter '" + name + "' needs an integral value");
  auto& s = p.servers[ref.server];
  auto& c = p.clients[ref.server];
  auto need_client = [&] {
    if (!c) throw ValidationError("parameter '" + name + "' refers to a server without a client");
  };
  switch (ref.kind) {
    case ParamRef::Kind::ArrivalRate: need_client(); c->arrival_rate = value; break;
    case ParamRef::Kind::ServiceRate: s.service_rate = value; break;
    case ParamRef::Kind::Timeout: need_client(); c->timeout = value; break;
    case ParamRef::Kind::QueueBound: s.queue_bound = static_cast<int>(value); break;
    case ParamRef::Kind::OrbitBound: s.orbit_bound = static_cast<int>(value); break;
    case ParamRef::Kind::Threads: s.threads = static_cast<int>(value); break;
    case ParamRef::Kind::Retries: need_client(); c->max_retries = static_cast<int>(value); break;
  }
}

}  // namespace

ProgramSpec substitute_params(const ProgramSpec& program, const ParamVector& theta,
                              ValidationOptions options) {
  ProgramSpec p = program;
  for (const auto& [name, value] : theta.entries()) assign(p, name, value, false);
  check_program(p, options);
  return p;
}

ProgramSpec apply_override(const ProgramSpec& program, const std::string& name, double value,
                           ValidationOptions options) {
  ProgramSpec p = program;
  assign(p, name, value, true);
  check_program(p, options);
  return p;
}

std::vector<std::pair<std::string, double>> parse_assignments(std::string_view text) {
  std::vector<std::pair<std::string, double>> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view item = text.substr(pos, end - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) {
      const auto eq = item.find('=');
      if (eq == std::string_view::npos)
        throw ValidationError("expected name=value, got '" + std::string(item) + "'");
      const std::string key(item.substr(0, eq));
      const std::string val(item.substr(eq + 1));
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(val, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != val.size())
        throw ValidationError("bad number '" + val + "' for '" + key + "'");
      parse_param_name(key);
      out.emplace_back(key, v);
    }
    pos = end + 1;
  }
  return out;
}

}  // namespace metastab
