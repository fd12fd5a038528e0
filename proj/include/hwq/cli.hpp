#pragma once

// Experiment runner behind the `hwq` executable: JSON configs, command
// dispatch, CSV/SVG reports and run manifests. Needs nlohmann/json.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hwq/coupling.hpp"
#include "hwq/error.hpp"
#include "hwq/exact.hpp"
#include "hwq/functionals.hpp"
#include "hwq/model.hpp"
#include "hwq/policy.hpp"
#include "hwq/simulate.hpp"
#include "hwq/verify.hpp"

namespace hwq::cli {

inline constexpr std::string_view kSchemaVersion = "hwq-config/1";
inline constexpr std::string_view kVersion = "0.1.0";

enum class Command { Validate, Exact, Simulate, Couple, Verify, Sweep };

inline constexpr std::string_view to_string(Command c) noexcept {
  switch (c) {
    case Command::Validate: return "validate";
    case Command::Exact: return "exact";
    case Command::Simulate: return "simulate";
    case Command::Couple: return "couple";
    case Command::Verify: return "verify";
    case Command::Sweep: return "sweep";
  }
  return "unknown";
}

inline Command parse_command(std::string_view s) {
  for (auto c : {Command::Validate, Command::Exact, Command::Simulate, Command::Couple, Command::Verify, Command::Sweep})
    if (s == to_string(c)) return c;
  throw Error(Errc::SchemaError,
              "unknown command '" + std::string(s) + "' (valid: validate, exact, simulate, couple, verify, sweep)");
}

// ---------------------------------------------------------------------------
// Config

/// A steady-state quantity reported by `exact` and `simulate`. `param` is the
/// class index for z_class, theta for the MGFs and x for queue_tail.
struct Observable {
  std::string id;
  double param = 0.0;
  bool operator==(const Observable&) const = default;
};

inline const std::vector<std::string_view>& observable_ids() {
  static const std::vector<std::string_view> ids = {"z_total", "z_class", "z_hat", "phi_hat", "q_total",
                                                    "mgf_pos", "mgf_neg", "trunc_sq_mgf", "queue_tail"};
  return ids;
}

struct ExactSection {
  std::optional<int> truncation;
  std::string solver = "auto";  // auto | gth | power
  bool operator==(const ExactSection&) const = default;
};

struct SimulateSection {
  std::string estimator = "batch_means";  // batch_means | regenerative
  std::uint64_t batches = 20;
  std::uint64_t events_per_batch = 0;  // 0: 2000 per server
  std::uint64_t cycles = 10000;
  std::uint64_t max_events_per_cycle = 1'000'000;
  std::optional<std::uint64_t> warmup;
  std::uint64_t check_events = 100000;  // invariant-checked run length
  bool operator==(const SimulateSection&) const = default;
};

struct CoupleSection {
  std::string mode = "infserver";  // infserver | monotone
  std::vector<double> nu_prime;
  std::uint64_t events = 1'000'000;
  std::uint64_t replications = 1;
  bool operator==(const CoupleSection&) const = default;
};

struct VerifySection {
  std::vector<double> theta = {0.1, 0.2, 0.5, 1.0};
  double k = 5.0;
  std::optional<int> truncation;
  bool operator==(const VerifySection&) const = default;
};

struct SweepSection {
  std::vector<double> r_list;
  std::vector<double> theta;
  std::vector<std::string> functionals;
  double k = 5.0;
  std::string estimator = "auto";  // auto | exact | regenerative | batch_means
  std::uint64_t batches = 20;
  std::uint64_t events_per_batch = 0;
  std::uint64_t cycles = 10000;
  std::optional<std::uint64_t> warmup;
  std::uint64_t exact_max_states = 20000;
  double regenerative_max_r = 4.0;
  bool plot = true;
  bool operator==(const SweepSection&) const = default;
};

struct ExperimentConfig {
  std::string schema_version = std::string(kSchemaVersion);
  std::vector<ClassParams> classes;
  double r = 0.0;
  double a = 0.0;
  PolicyKind policy = PolicyKind::Fifo;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::vector<Observable> observables = {{"z_total", 0.0}};
  ExactSection exact;
  SimulateSection simulate;
  CoupleSection couple;
  VerifySection verify;
  SweepSection sweep;

  bool operator==(const ExperimentConfig&) const = default;
  SystemConfig system() const { return build_config(classes, r, a); }
};

namespace detail {

using nlohmann::json;

// Walks a JSON object, reporting the first schema problem with its location.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("expected an object");
  }

  void allow(std::initializer_list<std::string_view> keys) const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) fail_at(it.key(), "unknown key");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  const json& at(const std::string& key) const {
    if (!j_.contains(key)) fail_at(key, "missing required key");
    return j_.at(key);
  }
  std::string path(const std::string& key) const { return path_ + "/" + key; }

  double number(const std::string& key) const { return as_number(at(key), path(key)); }
  double number(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }

  std::uint64_t count(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      throw Error(Errc::SchemaError, path(key) + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
  }
  std::optional<std::uint64_t> optional_count(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return count(key, 0);
  }
  std::optional<int> optional_int(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    const json& v = at(key);
    if (!v.is_number_integer()) throw Error(Errc::SchemaError, path(key) + ": expected an integer");
    return v.get<int>();
  }

  std::string string(const std::string& key, std::string fallback) const {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_string()) throw Error(Errc::SchemaError, path(key) + ": expected a string");
    return v.get<std::string>();
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_boolean()) throw Error(Errc::SchemaError, path(key) + ": expected a boolean");
    return v.get<bool>();
  }

  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) const {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_array()) throw Error(Errc::SchemaError, path(key) + ": expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_number(v[i], path(key) + "/" + std::to_string(i)));
    return out;
  }

  std::vector<std::string> strings(const std::string& key) const {
    if (!has(key)) return {};
    const json& v = at(key);
    if (!v.is_array()) throw Error(Errc::SchemaError, path(key) + ": expected an array of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_string()) throw Error(Errc::SchemaError, path(key) + "/" + std::to_string(i) + ": expected a string");
      out.push_back(v[i].get<std::string>());
    }
    return out;
  }

  [[noreturn]] void fail(const std::string& what) const { throw Error(Errc::SchemaError, path_ + ": " + what); }
  [[noreturn]] void fail_at(const std::string& key, const std::string& what) const {
    throw Error(Errc::SchemaError, path(key) + ": " + what);
  }

 private:
  static double as_number(const json& v, const std::string& where) {
    if (!v.is_number()) throw Error(Errc::SchemaError, where + ": expected a number");
    return v.get<double>();
  }

  const json& j_;
  std::string path_;
};

inline void require_one_of(const std::string& value, std::initializer_list<std::string_view> valid,
                           const std::string& where) {
  if (std::find(valid.begin(), valid.end(), value) != valid.end()) return;
  std::string list;
  for (auto v : valid) list += (list.empty() ? "" : ", ") + std::string(v);
  throw Error(Errc::SchemaError, where + ": unknown value '" + value + "' (valid: " + list + ")");
}

}  // namespace detail

/// Parses and validates a config. Model errors (NonUnitLoad, InvalidRate)
/// surface unchanged; everything else is a SchemaError naming its location.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::Reader;
  ExperimentConfig cfg;
  const Reader root(j, "");
  root.allow({"schema_version", "system", "policy", "seed", "threads", "observables", "exact", "simulate", "couple",
              "verify", "sweep"});
  cfg.schema_version = root.string("schema_version", "");
  if (cfg.schema_version != kSchemaVersion)
    throw Error(Errc::SchemaError, "/schema_version: expected '" + std::string(kSchemaVersion) + "', got '" +
                                       cfg.schema_version + "'");

  const Reader sys(root.at("system"), "/system");
  sys.allow({"classes", "r", "a"});
  const auto& classes = sys.at("classes");
  if (!classes.is_array() || classes.empty()) sys.fail_at("classes", "expected a non-empty array");
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const Reader c(classes[i], "/system/classes/" + std::to_string(i));
    c.allow({"lambda", "mu", "nu"});
    cfg.classes.push_back({c.number("lambda"), c.number("mu"), c.number("nu", 0.0)});
  }
  cfg.r = sys.number("r");
  cfg.a = sys.number("a");

  const std::string policy = root.string("policy", "");
  if (policy.empty()) root.fail_at("policy", "missing required key");
  try {
    cfg.policy = parse_policy_kind(policy);
  } catch (const Error& e) {
    throw Error(Errc::SchemaError, "/policy: " + std::string(e.what()).substr(std::string("SchemaError: ").size()));
  }
  cfg.seed = root.count("seed", 1);
  cfg.threads = static_cast<unsigned>(root.count("threads", 1));
  if (cfg.threads == 0) root.fail_at("threads", "must be at least 1");

  if (root.has("observables")) {
    const auto& obs = root.at("observables");
    if (!obs.is_array()) root.fail_at("observables", "expected an array");
    cfg.observables.clear();
    for (std::size_t i = 0; i < obs.size(); ++i) {
      const std::string where = "/observables/" + std::to_string(i);
      const Reader o(obs[i], where);
      o.allow({"id", "param"});
      Observable ob{o.string("id", ""), o.number("param", 0.0)};
      const auto& ids = observable_ids();
      if (std::find(ids.begin(), ids.end(), ob.id) == ids.end())
        throw Error(Errc::SchemaError, where + "/id: unknown observable '" + ob.id +
                                           "' (valid: z_total, z_class, z_hat, phi_hat, q_total, mgf_pos, mgf_neg, "
                                           "trunc_sq_mgf, queue_tail)");
      if (ob.id == "z_class" && (ob.param < 0 || ob.param >= static_cast<double>(cfg.classes.size()) ||
                                 ob.param != std::floor(ob.param)))
        throw Error(Errc::SchemaError, where + "/param: class index out of range");
      cfg.observables.push_back(ob);
    }
  }

  if (root.has("exact")) {
    const Reader e(root.at("exact"), "/exact");
    e.allow({"truncation", "solver"});
    cfg.exact.truncation = e.optional_int("truncation");
    cfg.exact.solver = e.string("solver", "auto");
    detail::require_one_of(cfg.exact.solver, {"auto", "gth", "power"}, "/exact/solver");
  }
  if (root.has("simulate")) {
    const Reader s(root.at("simulate"), "/simulate");
    s.allow({"estimator", "batches", "events_per_batch", "cycles", "max_events_per_cycle", "warmup", "check_events"});
    auto& o = cfg.simulate;
    o.estimator = s.string("estimator", o.estimator);
    detail::require_one_of(o.estimator, {"batch_means", "regenerative"}, "/simulate/estimator");
    o.batches = s.count("batches", o.batches);
    o.events_per_batch = s.count("events_per_batch", o.events_per_batch);
    o.cycles = s.count("cycles", o.cycles);
    o.max_events_per_cycle = s.count("max_events_per_cycle", o.max_events_per_cycle);
    o.warmup = s.optional_count("warmup");
    o.check_events = s.count("check_events", o.check_events);
  }
  if (root.has("couple")) {
    const Reader c(root.at("couple"), "/couple");
    c.allow({"mode", "nu_prime", "events", "replications"});
    auto& o = cfg.couple;
    o.mode = c.string("mode", o.mode);
    detail::require_one_of(o.mode, {"infserver", "monotone"}, "/couple/mode");
    o.nu_prime = c.numbers("nu_prime", {});
    o.events = c.count("events", o.events);
    o.replications = c.count("replications", o.replications);
    if (o.replications == 0) c.fail_at("replications", "must be at least 1");
  }
  if (root.has("verify")) {
    const Reader v(root.at("verify"), "/verify");
    v.allow({"theta", "k", "truncation"});
    cfg.verify.theta = v.numbers("theta", cfg.verify.theta);
    cfg.verify.k = v.number("k", cfg.verify.k);
    cfg.verify.truncation = v.optional_int("truncation");
  }
  if (root.has("sweep")) {
    const Reader s(root.at("sweep"), "/sweep");
    s.allow({"r_list", "theta", "functionals", "k", "estimator", "batches", "events_per_batch", "cycles", "warmup",
             "exact_max_states", "regenerative_max_r", "plot"});
    auto& o = cfg.sweep;
    o.r_list = s.numbers("r_list", {});
    o.theta = s.numbers("theta", {});
    o.functionals = s.strings("functionals");
    for (std::size_t i = 0; i < o.functionals.size(); ++i) {
      try {
        functionals::parse_sweep_functional(o.functionals[i]);
      } catch (const Error& e) {
        throw Error(Errc::SchemaError, "/sweep/functionals/" + std::to_string(i) + ": " +
                                           std::string(e.what()).substr(std::string("SchemaError: ").size()));
      }
    }
    o.k = s.number("k", o.k);
    o.estimator = s.string("estimator", o.estimator);
    detail::require_one_of(o.estimator, {"auto", "exact", "regenerative", "batch_means"}, "/sweep/estimator");
    o.batches = s.count("batches", o.batches);
    o.events_per_batch = s.count("events_per_batch", o.events_per_batch);
    o.cycles = s.count("cycles", o.cycles);
    o.warmup = s.optional_count("warmup");
    o.exact_max_states = s.count("exact_max_states", o.exact_max_states);
    o.regenerative_max_r = s.number("regenerative_max_r", o.regenerative_max_r);
    o.plot = s.boolean("plot", o.plot);
  }

  // model-level checks for every scale the config will touch; per-instance defaults filled in
  const SystemConfig model = cfg.system();
  if (!cfg.exact.truncation) cfg.exact.truncation = default_truncation(model);
  if (!cfg.verify.truncation) cfg.verify.truncation = default_truncation(model);
  if (!cfg.simulate.warmup) cfg.simulate.warmup = default_warmup(model);
  for (double r : cfg.sweep.r_list) (void)build_config(cfg.classes, r, cfg.a);
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(Errc::SchemaError, std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::SchemaError, "cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  using nlohmann::json;
  json classes = json::array();
  for (const auto& c : cfg.classes) classes.push_back({{"lambda", c.lambda}, {"mu", c.mu}, {"nu", c.nu}});
  json obs = json::array();
  for (const auto& o : cfg.observables) obs.push_back({{"id", o.id}, {"param", o.param}});
  auto opt = [](const auto& v) { return v ? json(*v) : json(nullptr); };
  const auto& s = cfg.simulate;
  const auto& w = cfg.sweep;
  return {
      {"schema_version", cfg.schema_version},
      {"system", {{"classes", classes}, {"r", cfg.r}, {"a", cfg.a}}},
      {"policy", std::string(to_string(cfg.policy))},
      {"seed", cfg.seed},
      {"threads", cfg.threads},
      {"observables", obs},
      {"exact", {{"truncation", opt(cfg.exact.truncation)}, {"solver", cfg.exact.solver}}},
      {"simulate",
       {{"estimator", s.estimator},
        {"batches", s.batches},
        {"events_per_batch", s.events_per_batch},
        {"cycles", s.cycles},
        {"max_events_per_cycle", s.max_events_per_cycle},
        {"warmup", opt(s.warmup)},
        {"check_events", s.check_events}}},
      {"couple",
       {{"mode", cfg.couple.mode},
        {"nu_prime", cfg.couple.nu_prime},
        {"events", cfg.couple.events},
        {"replications", cfg.couple.replications}}},
      {"verify", {{"theta", cfg.verify.theta}, {"k", cfg.verify.k}, {"truncation", opt(cfg.verify.truncation)}}},
      {"sweep",
       {{"r_list", w.r_list},
        {"theta", w.theta},
        {"functionals", w.functionals},
        {"k", w.k},
        {"estimator", w.estimator},
        {"batches", w.batches},
        {"events_per_batch", w.events_per_batch},
        {"cycles", w.cycles},
        {"warmup", opt(w.warmup)},
        {"exact_max_states", w.exact_max_states},
        {"regenerative_max_r", w.regenerative_max_r},
        {"plot", w.plot}}},
  };
}

inline std::string emit_config(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Exit codes

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitInvariant = 3;
inline constexpr int kExitInternal = 4;

inline int exit_code(Errc c) noexcept {
  switch (c) {
    case Errc::NotConverged:
    case Errc::Reducible:
    case Errc::CycleTimeout:
      return kExitNumeric;
    case Errc::OrderingViolation:
      return kExitInvariant;
    default:
      return kExitConfig;
  }
}

// ---------------------------------------------------------------------------
// Output

/// Shortest decimal that round-trips, so CSVs are byte-stable.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}
inline std::string fmt(std::uint64_t v) { return std::to_string(v); }
inline std::string fmt(int v) { return std::to_string(v); }

/// RFC 4180 writer.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
      : out_(path, std::ios::binary), width_(header.size()) {
    if (!out_) throw Error(Errc::InvalidArgument, "cannot write '" + path.string() + "'");
    write(header);
  }

  void row(const std::vector<std::string>& fields) {
    if (fields.size() != width_) throw Error(Errc::InvalidArgument, "CSV row has the wrong number of fields");
    write(fields);
  }

  static std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  }

 private:
  void write(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << quote(fields[i]);
    out_ << "\r\n";
  }

  std::ofstream out_;
  std::size_t width_;
};

inline const std::vector<std::string> kProvenance = {"r", "a", "policy", "seed", "method"};

inline std::vector<std::string> with_provenance(std::vector<std::string> cols) {
  cols.insert(cols.begin(), kProvenance.begin(), kProvenance.end());
  return cols;
}

struct SvgSeries {
  std::string label;
  std::vector<double> x, y, err;
};

/// Static log-log plot of estimate against r with 95% error bars.
inline void write_svg(const std::filesystem::path& path, const std::string& title, const std::vector<SvgSeries>& series) {
  const double w = 640, h = 420, left = 70, right = 190, top = 40, bottom = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!(s.x[i] > 0) || !(s.y[i] > 0)) continue;
      x0 = std::min(x0, std::log10(s.x[i]));
      x1 = std::max(x1, std::log10(s.x[i]));
      y0 = std::min(y0, std::log10(std::max(s.y[i] - s.err[i], s.y[i] * 0.5)));
      y1 = std::max(y1, std::log10(s.y[i] + s.err[i]));
    }
  if (!(x1 >= x0)) x0 = 0, x1 = 1;
  if (!(y1 >= y0)) y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-9) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-9) y0 -= 0.05, y1 += 0.05;
  auto px = [&](double x) { return left + (std::log10(x) - x0) / (x1 - x0) * (w - left - right); };
  auto py = [&](double y) { return h - bottom - (std::log10(y) - y0) / (y1 - y0) * (h - top - bottom); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::InvalidArgument, "cannot write '" + path.string() + "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << (w - right + left) / 2 << "\" y=\"" << h - 12
      << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">r (log scale)</text>\n";
  out << "<text x=\"16\" y=\"" << (h - bottom + top) / 2 << "\" font-family=\"sans-serif\" font-size=\"12\" "
      << "transform=\"rotate(-90 16 " << (h - bottom + top) / 2 << ")\" text-anchor=\"middle\">estimate (log scale)</text>\n";
  for (int e = static_cast<int>(std::floor(x0)); e <= static_cast<int>(std::ceil(x1)); ++e) {
    for (double m : {1.0, 2.0, 5.0}) {
      const double v = m * std::pow(10.0, e);
      if (std::log10(v) < x0 - 1e-12 || std::log10(v) > x1 + 1e-12) continue;
      out << "<text x=\"" << px(v) << "\" y=\"" << h - bottom + 16
          << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" << fmt(v) << "</text>\n";
    }
  }
  out << "<text x=\"" << left - 6 << "\" y=\"" << py(std::pow(10.0, y0)) << "\" font-family=\"sans-serif\" "
      << "font-size=\"10\" text-anchor=\"end\">" << fmt(std::round(std::pow(10.0, y0) * 1e4) / 1e4) << "</text>\n";
  out << "<text x=\"" << left - 6 << "\" y=\"" << py(std::pow(10.0, y1)) + 8 << "\" font-family=\"sans-serif\" "
      << "font-size=\"10\" text-anchor=\"end\">" << fmt(std::round(std::pow(10.0, y1) * 1e4) / 1e4) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = colors[k % 6];
    std::string points;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!(s.x[i] > 0) || !(s.y[i] > 0)) continue;
      points += fmt(px(s.x[i])) + "," + fmt(py(s.y[i])) + " ";
      const double lo = std::max(s.y[i] - s.err[i], s.y[i] * 0.5);
      out << "<line x1=\"" << px(s.x[i]) << "\" y1=\"" << py(lo) << "\" x2=\"" << px(s.x[i]) << "\" y2=\""
          << py(s.y[i] + s.err[i]) << "\" stroke=\"" << color << "\"/>\n";
      out << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"" << points << "\"/>\n";
    out << "<text x=\"" << w - right + 10 << "\" y=\"" << top + 16 * (k + 1) << "\" font-family=\"sans-serif\" "
        << "font-size=\"11\" fill=\"" << color << "\">" << s.label << "</text>\n";
  }
  out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Commands

struct RunResult {
  int exit_code = kExitOk;
  std::vector<std::string> outputs;
  std::string summary;
};

inline Functional make_observable(const Observable& o, const SystemConfig& cfg, double k) {
  if (o.id == "z_total") return functionals::total_count();
  if (o.id == "z_class") return functionals::class_count(static_cast<std::size_t>(o.param));
  if (o.id == "z_hat") return functionals::z_hat_total(cfg);
  if (o.id == "phi_hat") return functionals::phi_hat(cfg);
  if (o.id == "q_total") return [](const MacroState& s) { return static_cast<double>(s.queued()); };
  return functionals::make(functionals::parse_sweep_functional(o.id), cfg, o.param, k);
}

namespace detail {

inline std::vector<std::string> provenance(const ExperimentConfig& cfg, double r, std::string_view method) {
  return {fmt(r), fmt(cfg.a), std::string(to_string(cfg.policy)), fmt(cfg.seed), std::string(method)};
}

inline std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline RunResult run_validate(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  CsvWriter csv(out / "validate.csv", with_provenance({"n_servers", "effective_a", "classes", "sum_rho",
                                                       "nominal_utilization"}));
  std::vector<double> rs = {cfg.r};
  rs.insert(rs.end(), cfg.sweep.r_list.begin(), cfg.sweep.r_list.end());
  for (double r : rs) {
    const auto sys = build_config(cfg.classes, r, cfg.a);
    double rho = 0.0;
    for (std::size_t i = 0; i < sys.num_classes(); ++i) rho += sys.rho(i);
    csv.row(concat(provenance(cfg, r, "validate"), {fmt(sys.n_servers()), fmt(sys.effective_a()),
                                                    fmt(static_cast<std::uint64_t>(sys.num_classes())), fmt(rho),
                                                    fmt(nominal_utilization(sys))}));
  }
  return {kExitOk, {"validate.csv"}, "config valid"};
}

inline RunResult run_exact(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  const auto sys = cfg.system();
  SolverOptions opts;
  opts.method = cfg.exact.solver == "gth" ? SolverMethod::Gth
                : cfg.exact.solver == "power" ? SolverMethod::PowerIteration
                                              : SolverMethod::Auto;
  const ExactSolution sol = solve_exact(sys, cfg.policy, cfg.exact.truncation, opts);
  CsvWriter csv(out / "exact.csv", with_provenance({"observable", "param", "value", "states", "truncation",
                                                    "residual", "boundary_mass", "truncation_deficit"}));
  for (const auto& o : cfg.observables) {
    csv.row(concat(provenance(cfg, cfg.r, "exact"),
                   {o.id, fmt(o.param), fmt(sol.expect(make_observable(o, sys, cfg.verify.k))),
                    fmt(static_cast<std::uint64_t>(sol.index.size())), fmt(sol.index.truncation()),
                    fmt(sol.stationary.residual), fmt(sol.stationary.boundary_mass),
                    fmt(sol.stationary.truncation_deficit)}));
  }
  return {kExitOk, {"exact.csv"}, std::to_string(sol.index.size()) + " states solved"};
}

inline RunResult run_simulate(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  const auto sys = cfg.system();
  const auto& s = cfg.simulate;
  std::vector<Functional> fs;
  for (const auto& o : cfg.observables) fs.push_back(make_observable(o, sys, cfg.verify.k));
  RngStream rng(cfg.seed, 0);
  std::vector<StationaryEstimate> est;
  if (s.estimator == "regenerative") {
    est = regenerative_estimate(sys, cfg.policy, fs, s.cycles, rng, s.max_events_per_cycle);
  } else {
    const std::uint64_t per_batch =
        s.events_per_batch ? s.events_per_batch : 2000ULL * static_cast<std::uint64_t>(sys.n_servers());
    est = batch_means_estimate(sys, cfg.policy, fs, s.batches, per_batch, s.warmup.value_or(default_warmup(sys)), rng);
  }
  // separate stream for the invariant-checked run
  std::uint64_t violations = 0;
  if (s.check_events > 0) {
    RngStream check_rng(cfg.seed, 1);
    violations = run(sys, cfg.policy, {}, {s.check_events, 0, true}, check_rng).invariant_violations;
  }
  CsvWriter csv(out / "simulate.csv", with_provenance({"observable", "param", "estimate", "half_width",
                                                       "cycles_or_batches", "warmup_events", "checked_events",
                                                       "invariant_violations"}));
  for (std::size_t j = 0; j < fs.size(); ++j) {
    const auto& o = cfg.observables[j];
    csv.row(concat(provenance(cfg, cfg.r, to_string(est[j].method)),
                   {o.id, fmt(o.param), fmt(est[j].value), fmt(est[j].half_width), fmt(est[j].cycles_or_batches),
                    fmt(est[j].warmup_events), fmt(s.check_events), fmt(violations)}));
  }
  return {violations ? kExitInvariant : kExitOk, {"simulate.csv"},
          std::to_string(violations) + " invariant violations"};
}

inline RunResult run_couple(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  const auto sys = cfg.system();
  const auto& c = cfg.couple;
  const std::size_t d = sys.num_classes();
  const bool infserver = c.mode == "infserver";
  if (infserver) require_nu_le_mu(sys);
  else require_nu_prime(sys, c.nu_prime);

  struct Rep {
    CouplingReport report;
    std::vector<double> primary_mean, other_mean;
  };
  auto task = [&](std::size_t k) {
    RngStream rng(cfg.seed, k);
    Rep rep;
    rep.primary_mean.assign(d, 0.0);
    rep.other_mean.assign(d, 0.0);
    double t = 0.0;
    const CouplingOptions opts{c.events, false};
    if (infserver) {
      rep.report = run_infserver_coupled(sys, cfg.policy, opts, rng, [&](double dt, const InfServerJointState& js) {
        t += dt;
        for (std::size_t i = 0; i < d; ++i) {
          rep.primary_mean[i] += dt * js.primary.macro().z[i];
          rep.other_mean[i] += dt * js.g(i);
        }
      });
    } else {
      rep.report =
          run_monotone_coupled(sys, c.nu_prime, cfg.policy, opts, rng, [&](double dt, const MonotoneJointState& js) {
            t += dt;
            for (std::size_t i = 0; i < d; ++i) {
              rep.primary_mean[i] += dt * js.primary.macro().z[i];
              rep.other_mean[i] += dt * js.z_shadow[i];
            }
          });
    }
    for (std::size_t i = 0; i < d; ++i) {
      rep.primary_mean[i] /= t;
      rep.other_mean[i] /= t;
    }
    return rep;
  };
  const auto reps = parallel_map(static_cast<std::size_t>(c.replications), cfg.threads, task);

  CsvWriter csv(out / "couple.csv", with_provenance({"replication", "class", "events", "ordering_violations",
                                                     "mean_z", infserver ? "mean_g" : "mean_z_shadow",
                                                     "first_violation"}));
  std::uint64_t violations = 0;
  for (std::size_t k = 0; k < reps.size(); ++k) {
    violations += reps[k].report.ordering_violations;
    for (std::size_t i = 0; i < d; ++i)
      csv.row(concat(provenance(cfg, cfg.r, c.mode),
                     {fmt(static_cast<std::uint64_t>(k)), fmt(static_cast<std::uint64_t>(i)),
                      fmt(reps[k].report.events), fmt(reps[k].report.ordering_violations),
                      fmt(reps[k].primary_mean[i]), fmt(reps[k].other_mean[i]), reps[k].report.first_violation}));
  }
  return {violations ? kExitInvariant : kExitOk, {"couple.csv"}, std::to_string(violations) + " ordering violations"};
}

inline RunResult run_verify(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  const auto sys = cfg.system();
  const int truncation = cfg.verify.truncation.value_or(default_truncation(sys));
  CsvWriter csv(out / "verify.csv", with_provenance({"check", "theta", "states", "violations", "min_slack",
                                                     "residual", "deficit", "roundoff", "pass"}));
  std::uint64_t failures = 0;
  auto drift_row = [&](const DriftReport& rep, double theta) {
    failures += rep.violations;
    csv.row(concat(provenance(cfg, cfg.r, "exhaustive"),
                   {rep.check, fmt(theta), fmt(static_cast<std::uint64_t>(rep.rows.size())), fmt(rep.violations),
                    fmt(rep.min_slack), "", "", "", rep.violations == 0 ? "true" : "false"}));
  };

  const auto ident = drift_identity_check(sys, cfg.policy, truncation);
  const bool ident_ok = ident.max_relative_error <= 1e-12;
  if (!ident_ok) ++failures;
  csv.row(concat(provenance(cfg, cfg.r, "exhaustive"),
                 {"drift_identity", "", fmt(ident.interior_states), ident_ok ? "0" : "1", "",
                  fmt(ident.max_relative_error), "", "", ident_ok ? "true" : "false"}));

  if (sys.nu_max() == 0.0) {
    for (double theta : cfg.verify.theta) drift_row(lyapunov_pointwise_check(sys, cfg.policy, theta, truncation), theta);
  }
  if (sys.nu_min() > 0.0) drift_row(drift_bounds_abandon_check(sys, cfg.policy, truncation), 0.0);

  for (double theta : cfg.verify.theta) {
    for (const auto& row : generator_identity_check(sys, cfg.policy, theta, cfg.verify.k, truncation)) {
      if (!row.pass) ++failures;
      csv.row(concat(provenance(cfg, cfg.r, "exact"),
                     {"generator_identity:" + row.function, fmt(theta), "", row.pass ? "0" : "1", "",
                      fmt(row.residual), fmt(row.deficit), fmt(row.roundoff), row.pass ? "true" : "false"}));
    }
  }
  return {failures ? kExitInvariant : kExitOk, {"verify.csv"}, std::to_string(failures) + " failed checks"};
}

inline SweepSpec sweep_spec(const ExperimentConfig& cfg) {
  SweepSpec spec;
  spec.classes = cfg.classes;
  spec.a = cfg.a;
  spec.kind = cfg.policy;
  spec.r_list = cfg.sweep.r_list;
  spec.theta_list = cfg.sweep.theta;
  for (const auto& f : cfg.sweep.functionals) spec.functionals.push_back(functionals::parse_sweep_functional(f));
  spec.k = cfg.sweep.k;
  using Choice = EstimatorSettings::Choice;
  const auto& e = cfg.sweep.estimator;
  spec.estimator.choice = e == "exact"          ? Choice::Exact
                          : e == "regenerative" ? Choice::Regenerative
                          : e == "batch_means"  ? Choice::BatchMeans
                                                : Choice::Auto;
  spec.estimator.batches = cfg.sweep.batches;
  spec.estimator.events_per_batch = cfg.sweep.events_per_batch;
  spec.estimator.cycles = cfg.sweep.cycles;
  spec.estimator.warmup = cfg.sweep.warmup;
  spec.estimator.exact_max_states = cfg.sweep.exact_max_states;
  spec.estimator.regenerative_max_r = cfg.sweep.regenerative_max_r;
  spec.seed = cfg.seed;
  spec.threads = cfg.threads;
  return spec;
}

inline RunResult run_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  if (cfg.sweep.r_list.empty() || cfg.sweep.theta.empty() || cfg.sweep.functionals.empty())
    throw Error(Errc::SchemaError, "/sweep: r_list, theta and functionals must be non-empty");
  const auto rows = sweep(sweep_spec(cfg));
  RunResult res{kExitOk, {"sweep.csv", "sweep_trend.csv"}, std::to_string(rows.size()) + " rows"};
  {
    CsvWriter csv(out / "sweep.csv", with_provenance({"functional", "theta", "estimate", "half_width", "stream"}));
    for (const auto& row : rows)
      csv.row(concat(provenance(cfg, row.r, to_string(row.method)),
                     {std::string(functionals::to_string(row.functional)), fmt(row.theta), fmt(row.estimate),
                      fmt(row.half_width), fmt(row.stream)}));
  }
  // one series per (functional, theta)
  std::map<std::pair<std::string, double>, std::vector<SweepRow>> series;
  for (const auto& row : rows) series[{std::string(functionals::to_string(row.functional)), row.theta}].push_back(row);
  CsvWriter trend(out / "sweep_trend.csv",
                  with_provenance({"functional", "theta", "slope", "half_width", "flat"}));
  std::vector<SvgSeries> plot;
  for (const auto& [key, pts] : series) {
    std::string slope = "", hw = "", flat = "";
    const bool usable = pts.size() >= 2 &&
                        std::all_of(pts.begin(), pts.end(), [](const SweepRow& r) { return r.estimate > 0.0; });
    if (usable) {
      const Trend t = log_log_trend(pts);
      slope = fmt(t.slope);
      hw = fmt(t.half_width);
      flat = t.flat() ? "true" : "false";
    }
    std::string methods;
    for (const auto& p : pts) {
      const std::string m(to_string(p.method));
      if (methods.find(m) == std::string::npos) methods += (methods.empty() ? "" : "+") + m;
    }
    std::string rs;
    for (const auto& p : pts) rs += (rs.empty() ? "" : ";") + fmt(p.r);
    trend.row({rs, fmt(cfg.a), std::string(to_string(cfg.policy)), fmt(cfg.seed), methods, key.first,
               fmt(key.second), slope, hw, flat});
    SvgSeries s{key.first + " theta=" + fmt(key.second), {}, {}, {}};
    for (const auto& p : pts) {
      s.x.push_back(p.r);
      s.y.push_back(p.estimate);
      s.err.push_back(p.half_width);
    }
    plot.push_back(std::move(s));
  }
  if (cfg.sweep.plot) {
    write_svg(out / "sweep.svg", "steady-state functionals vs r (" + std::string(to_string(cfg.policy)) + ")", plot);
    res.outputs.push_back("sweep.svg");
  }
  return res;
}

}  // namespace detail

/// Runs one command, writes its reports and manifest.json into `out`.
/// Returns 0, or 3 when a check reported a violation; model and numeric
/// failures propagate as Error.
inline RunResult dispatch(Command cmd, const ExperimentConfig& cfg, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  const auto start = std::chrono::steady_clock::now();
  RunResult res;
  switch (cmd) {
    case Command::Validate: res = detail::run_validate(cfg, out); break;
    case Command::Exact: res = detail::run_exact(cfg, out); break;
    case Command::Simulate: res = detail::run_simulate(cfg, out); break;
    case Command::Couple: res = detail::run_couple(cfg, out); break;
    case Command::Verify: res = detail::run_verify(cfg, out); break;
    case Command::Sweep: res = detail::run_sweep(cfg, out); break;
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  nlohmann::json manifest = {
      {"schema_version", std::string(kSchemaVersion)},
      {"hwq_version", std::string(kVersion)},
      {"command", std::string(to_string(cmd))},
      {"seed", cfg.seed},
      {"threads", cfg.threads},
      {"stream_scheme", "stream k of seed s: mt19937_64 seeded with splitmix64(splitmix64(s) ^ (k+1)*0x9E3779B97F4A7C15)"},
      {"compiler", __VERSION__},
      {"wall_time_seconds", wall},
      {"exit_code", res.exit_code},
      {"outputs", res.outputs},
      {"config", to_json(cfg)},
  };
  std::ofstream(out / "manifest.json", std::ios::binary) << manifest.dump(2) << "\n";
  return res;
}

}  // namespace hwq::cli
