#pragma once

#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "psgd/cost_model.hpp"
#include "psgd/error.hpp"
#include "psgd/optimizer.hpp"
#include "psgd/problems.hpp"
#include "psgd/run_result.hpp"
#include "psgd/strategies.hpp"
#include "psgd/topology.hpp"

namespace psgd {

enum class Backend { Simulate, Threaded };

inline std::string_view to_string(Backend b) { return b == Backend::Simulate ? "simulate" : "threaded"; }

inline Backend backend_from_string(std::string_view s) {
  if (s == "simulate") return Backend::Simulate;
  if (s == "threaded") return Backend::Threaded;
  throw ConfigError(detail::concat("run.backend: unknown value '", s, "' (expected simulate|threaded)"));
}

inline CostModel cost_preset(std::string_view name) {
  if (name == "default") return CostModel{};
  if (name == "zero_comm") return CostModel::zero_comm();
  if (name == "p100_nccl") return CostModel::p100_nccl();
  if (name == "p100_openmpi") return CostModel::p100_openmpi();
  if (name == "v100_hring") return CostModel::v100_hring();
  throw ConfigError(detail::concat("cost.preset: unknown value '", name,
                                   "' (expected default|zero_comm|p100_nccl|p100_openmpi|v100_hring)"));
}

struct ProblemConfig {
  ProblemKind kind = ProblemKind::LogisticRegression;
  std::size_t d_x = 8;
  std::size_t d_y = 2;
  std::vector<std::size_t> hidden{16};
  std::size_t n_train = 4096;
  std::size_t n_heldout = 1024;
  std::uint64_t seed = 1;
  double separation = 4.0;
  // Binary dataset file; empty means generate from the fields above.
  std::string dataset;

  bool operator==(const ProblemConfig&) const = default;
};

struct ExperimentConfig {
  ProblemConfig problem;
  StrategySpec strategy{StrategyKind::SyncCentral, 1, 256};
  std::optional<MixingMatrix> mixing;
  LrSchedule schedule = LrSchedule::baseline();
  std::string cost_preset = "default";
  CostModel cost;
  Backend backend = Backend::Simulate;
  std::size_t epochs = 16;
  std::uint64_t seed = 1;
  std::string output;

  bool operator==(const ExperimentConfig&) const = default;
};

namespace cfg {

struct Value;
using List = std::vector<Value>;

// A scalar keeps its source text; `quoted` distinguishes "1" from 1.
struct Value {
  std::variant<std::string, List> v;
  bool quoted = false;
  int line = 0;
};

struct Entry {
  Value value;
  bool used = false;
};

using Document = std::map<std::string, Entry>;  // "section.key" -> value

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  Document parse() {
    Document doc;
    std::string section;
    while (pos_ < text_.size()) {
      skip_blank();
      if (pos_ >= text_.size()) break;
      const char c = text_[pos_];
      if (c == '\n') {
        ++pos_;
        ++line_;
        continue;
      }
      if (c == '#' || c == ';') {
        skip_comment();
        continue;
      }
      if (c == '[') {
        ++pos_;
        section = ident();
        skip_blank();
        expect(']');
        end_of_line();
        if (!known_section(section)) fail(detail::concat("unknown section [", section, "]"));
        continue;
      }
      const std::string key = ident();
      if (section.empty()) fail(detail::concat("key '", key, "' appears before any [section]"));
      skip_blank();
      expect('=');
      skip_blank();
      const int at = line_;
      Value v = value();
      v.line = at;
      end_of_line();
      const std::string full = section + "." + key;
      if (doc.contains(full)) fail(detail::concat("duplicate key ", full));
      doc[full] = Entry{std::move(v), false};
    }
    return doc;
  }

 private:
  static bool known_section(const std::string& s) {
    return s == "problem" || s == "strategy" || s == "schedule" || s == "cost" || s == "run";
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(detail::concat("config line ", line_, ": ", what));
  }

  void skip_blank() {
    while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\r')) ++pos_;
  }
  void skip_comment() {
    while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
  }
  // Whitespace, newlines and comments inside a list.
  void skip_space() {
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (c == '\n') {
        ++line_;
        ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\r') {
        ++pos_;
      } else if (c == '#') {
        skip_comment();
      } else {
        break;
      }
    }
  }
  void end_of_line() {
    skip_blank();
    if (pos_ < text_.size() && (text_[pos_] == '#' || text_[pos_] == ';')) skip_comment();
    if (pos_ < text_.size() && text_[pos_] != '\n') fail(detail::concat("unexpected text '", rest_of_line(), "'"));
  }
  std::string rest_of_line() const {
    const auto end = text_.find('\n', pos_);
    return std::string(text_.substr(pos_, end == std::string_view::npos ? std::string_view::npos : end - pos_));
  }
  void expect(char c) {
    if (pos_ >= text_.size() || text_[pos_] != c) fail(detail::concat("expected '", c, "'"));
    ++pos_;
  }
  std::string ident() {
    const std::size_t start = pos_;
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
        ++pos_;
      } else {
        break;
      }
    }
    if (pos_ == start) fail(detail::concat("expected a name, found '", rest_of_line(), "'"));
    return std::string(text_.substr(start, pos_ - start));
  }

  Value value() {
    if (pos_ >= text_.size() || text_[pos_] == '\n') fail("missing value");
    const char c = text_[pos_];
    if (c == '[') {
      ++pos_;
      List items;
      skip_space();
      while (pos_ < text_.size() && text_[pos_] != ']') {
        items.push_back(value());
        skip_space();
        if (pos_ < text_.size() && text_[pos_] == ',') {
          ++pos_;
          skip_space();
        } else {
          break;
        }
      }
      skip_space();
      expect(']');
      return Value{std::move(items), false, line_};
    }
    if (c == '"') {
      ++pos_;
      std::string s;
      while (pos_ < text_.size() && text_[pos_] != '"') {
        if (text_[pos_] == '\n') fail("unterminated string");
        if (text_[pos_] == '\\' && pos_ + 1 < text_.size()) ++pos_;
        s += text_[pos_++];
      }
      expect('"');
      return Value{std::move(s), true, line_};
    }
    const std::size_t start = pos_;
    while (pos_ < text_.size()) {
      const char d = text_[pos_];
      if (d == ',' || d == ']' || d == '\n' || d == '#' || d == ';' || d == ' ' || d == '\t' || d == '\r') break;
      ++pos_;
    }
    return Value{std::string(text_.substr(start, pos_ - start)), false, line_};
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  int line_ = 1;
};

// Typed access with errors that name the key and the constraint.
class Reader {
 public:
  explicit Reader(Document doc) : doc_(std::move(doc)) {}

  const Value* find(const std::string& key) {
    auto it = doc_.find(key);
    if (it == doc_.end()) return nullptr;
    it->second.used = true;
    return &it->second.value;
  }

  [[noreturn]] static void type_error(const std::string& key, const char* expected) {
    throw ConfigError(detail::concat(key, ": expected ", expected));
  }

  static const std::string& scalar(const std::string& key, const Value& v, const char* expected) {
    if (!std::holds_alternative<std::string>(v.v)) type_error(key, expected);
    return std::get<std::string>(v.v);
  }

  static double to_real(const std::string& key, const Value& v) {
    const std::string& s = scalar(key, v, "a number");
    if (v.quoted || s.empty()) type_error(key, "a number");
    errno = 0;
    char* end = nullptr;
    const double d = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(d)) type_error(key, "a finite number");
    return d;
  }

  static std::uint64_t to_count(const std::string& key, const Value& v) {
    const std::string& s = scalar(key, v, "a non-negative integer");
    if (v.quoted || s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      type_error(key, "a non-negative integer");
    }
    errno = 0;
    const unsigned long long n = std::strtoull(s.c_str(), nullptr, 10);
    if (errno == ERANGE) type_error(key, "an integer within 64 bits");
    return n;
  }

  void real(const std::string& key, double& out) {
    if (const Value* v = find(key)) out = to_real(key, *v);
  }
  template <class T>
  void count(const std::string& key, T& out) {
    if (const Value* v = find(key)) out = static_cast<T>(to_count(key, *v));
  }
  void boolean(const std::string& key, bool& out) {
    if (const Value* v = find(key)) {
      const std::string& s = scalar(key, *v, "true or false");
      if (v->quoted || (s != "true" && s != "false")) type_error(key, "true or false");
      out = s == "true";
    }
  }
  void text(const std::string& key, std::string& out) {
    if (const Value* v = find(key)) out = scalar(key, *v, "a string");
  }
  template <class F>
  void enumeration(const std::string& key, F convert) {
    if (const Value* v = find(key)) convert(scalar(key, *v, "a name"));
  }
  void counts(const std::string& key, std::vector<std::size_t>& out) {
    if (const Value* v = find(key)) {
      if (!std::holds_alternative<List>(v->v)) type_error(key, "a list of integers");
      out.clear();
      for (const auto& item : std::get<List>(v->v)) out.push_back(static_cast<std::size_t>(to_count(key, item)));
    }
  }
  void reals(const std::string& key, std::vector<double>& out) {
    if (const Value* v = find(key)) {
      if (!std::holds_alternative<List>(v->v)) type_error(key, "a list of numbers");
      out.clear();
      for (const auto& item : std::get<List>(v->v)) out.push_back(to_real(key, item));
    }
  }
  void matrix(const std::string& key, std::optional<MixingMatrix>& out) {
    if (const Value* v = find(key)) {
      if (!std::holds_alternative<List>(v->v)) type_error(key, "a list of rows");
      std::vector<std::vector<double>> rows;
      for (const auto& row : std::get<List>(v->v)) {
        if (!std::holds_alternative<List>(row.v)) type_error(key, "a list of rows");
        rows.emplace_back();
        for (const auto& item : std::get<List>(row.v)) rows.back().push_back(to_real(key, item));
      }
      try {
        out = MixingMatrix(std::move(rows));
      } catch (const TopologyError& e) {
        throw ConfigError(detail::concat(key, ": ", e.what()));
      }
    }
  }

  void reject_unused() const {
    for (const auto& [key, entry] : doc_) {
      if (!entry.used) throw ConfigError(detail::concat("unknown key ", key, " (line ", entry.value.line, ")"));
    }
  }

 private:
  Document doc_;
};

}  // namespace cfg

// Module-level checks that do not need the dataset in memory.
inline void validate_config(const ExperimentConfig& c) {
  const auto& p = c.problem;
  if (p.kind == ProblemKind::QuadraticBowl && p.d_y != 1) throw ConfigError("problem.d_y must be 1 for quadratic");
  if (p.kind == ProblemKind::LogisticRegression && p.d_y != 2) throw ConfigError("problem.d_y must be 2 for logistic");
  if (p.kind == ProblemKind::MlpSoftmax && p.d_y < 2) throw ConfigError("problem.d_y must be >= 2 for mlp");
  if (p.kind != ProblemKind::QuadraticBowl && p.dataset.empty() && p.d_x < p.d_y) {
    throw ConfigError("problem.d_x must be >= problem.d_y for generated classification data");
  }
  if (p.d_x == 0) throw ConfigError("problem.d_x must be >= 1");
  if (p.n_train == 0 || p.n_heldout == 0) throw ConfigError("problem.n_train and problem.n_heldout must be >= 1");
  for (auto h : p.hidden) {
    if (h == 0) throw ConfigError("problem.hidden entries must be >= 1");
  }
  if (!(p.separation >= 0.0)) throw ConfigError("problem.separation must be >= 0");
  c.strategy.validate();
  if (c.mixing) {
    if (c.strategy.kind != StrategyKind::SdPsgd) throw ConfigError("strategy.mixing applies to sd_psgd only");
    if (c.mixing->size() != c.strategy.learners) {
      throw ConfigError(detail::concat("strategy.mixing must be ", c.strategy.learners, "x", c.strategy.learners));
    }
  }
  if (c.strategy.learners > p.n_train) throw ConfigError("strategy.learners must be <= problem.n_train");
  if (c.strategy.global_batch > p.n_train) throw ConfigError("strategy.batch must be <= problem.n_train");
  if (is_synchronous(c.strategy.kind) && p.dataset.empty() && p.n_train % c.strategy.global_batch != 0) {
    throw ConfigError(detail::concat("problem.n_train (", p.n_train, ") must be a multiple of strategy.batch (",
                                     c.strategy.global_batch, ") for synchronous strategies"));
  }
  c.schedule.validate();
  c.cost.validate();
  if (c.epochs == 0) throw ConfigError("run.epochs must be >= 1");
}

// "section.key=value" replacements applied on top of a document (sweeps).
using Overrides = std::vector<std::pair<std::string, std::string>>;

namespace cfg {

inline void apply_overrides(Document& doc, const Overrides& overrides) {
  for (const auto& [key, text] : overrides) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) throw ConfigError(detail::concat("override key '", key, "' must be section.key"));
    const std::string doc_text = "[" + key.substr(0, dot) + "]\n" + key.substr(dot + 1) + " = " + text + "\n";
    Document one = Parser(doc_text).parse();
    doc[key] = std::move(one.begin()->second);
  }
}

}  // namespace cfg

// Parses without validating; parse_config adds the checks.
inline ExperimentConfig parse_config_unchecked(std::string_view text, const Overrides& overrides = {}) {
  cfg::Document doc = cfg::Parser(text).parse();
  cfg::apply_overrides(doc, overrides);
  for (const char* key : {"problem.kind", "strategy.kind"}) {
    if (!doc.contains(key)) throw ConfigError(detail::concat("missing required key ", key));
  }
  cfg::Reader r(std::move(doc));
  ExperimentConfig c;

  auto& p = c.problem;
  r.enumeration("problem.kind", [&](const std::string& s) { p.kind = problem_kind_from_string(s); });
  r.count("problem.d_x", p.d_x);
  r.count("problem.d_y", p.d_y);
  r.counts("problem.hidden", p.hidden);
  r.count("problem.n_train", p.n_train);
  r.count("problem.n_heldout", p.n_heldout);
  r.count("problem.seed", p.seed);
  r.real("problem.separation", p.separation);
  r.text("problem.dataset", p.dataset);

  auto& s = c.strategy;
  r.enumeration("strategy.kind", [&](const std::string& v) { s.kind = strategy_kind_from_string(v); });
  r.count("strategy.learners", s.learners);
  r.count("strategy.batch", s.global_batch);
  r.count("strategy.group_size", s.group_size);
  r.boolean("strategy.gossip", s.gossip_neighbors);
  r.count("strategy.staleness_bound", s.staleness_bound);
  r.matrix("strategy.mixing", c.mixing);

  auto& sc = c.schedule;
  // Each kind starts from its standard recipe; explicit keys then override it.
  r.enumeration("schedule.kind", [&](const std::string& v) {
    switch (schedule_kind_from_string(v)) {
      case ScheduleKind::Constant: sc = LrSchedule::constant(sc.alpha0); break;
      case ScheduleKind::StepAnneal: sc = LrSchedule::baseline(); break;
      case ScheduleKind::WarmupAnneal: sc = LrSchedule::warmup(); break;
    }
  });
  r.real("schedule.alpha0", sc.alpha0);
  r.real("schedule.peak", sc.peak);
  r.count("schedule.warmup_epochs", sc.warmup_epochs);
  r.count("schedule.anneal_start", sc.anneal_start_epoch);
  r.real("schedule.anneal_factor", sc.anneal_factor);

  r.text("cost.preset", c.cost_preset);
  c.cost = cost_preset(c.cost_preset);
  auto& k = c.cost;
  r.real("cost.compute_seconds_per_sample", k.compute_seconds_per_sample);
  r.reals("cost.slowdown", k.slowdown);
  r.real("cost.jitter", k.compute_jitter);
  r.real("cost.model_bytes", k.model_bytes);
  r.real("cost.link_bandwidth", k.link_bandwidth);
  r.real("cost.link_efficiency", k.link_efficiency);
  r.real("cost.link_latency", k.link_latency);
  r.real("cost.allreduce_efficiency", k.allreduce_efficiency);
  r.real("cost.intra_node_bandwidth", k.intra_node_bandwidth);
  r.count("cost.learners_per_node", k.learners_per_node);
  r.enumeration("cost.ps_transport", [&](const std::string& v) { k.ps_transport = ps_transport_from_string(v); });
  r.boolean("cost.loader_overlap", k.loader_overlap);
  r.real("cost.load_seconds_per_sample", k.load_seconds_per_sample);

  r.enumeration("run.backend", [&](const std::string& v) { c.backend = backend_from_string(v); });
  r.count("run.epochs", c.epochs);
  r.count("run.seed", c.seed);
  r.text("run.output", c.output);

  r.reject_unused();
  return c;
}

inline ExperimentConfig parse_config(std::string_view text, const Overrides& overrides = {}) {
  ExperimentConfig c = parse_config_unchecked(text, overrides);
  validate_config(c);
  return c;
}

namespace cfg {

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

template <class T, class F>
std::string list(const std::vector<T>& xs, F fmt) {
  std::string out = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + fmt(xs[i]);
  return out + "]";
}

inline std::string num(std::uint64_t v) { return std::to_string(v); }

}  // namespace cfg

// Writes every field explicitly, so parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const ExperimentConfig& c) {
  using cfg::num;
  using cfg::quote;
  std::ostringstream o;
  const auto& p = c.problem;
  o << "[problem]\n"
    << "kind = " << quote(std::string(to_string(p.kind))) << "\n"
    << "d_x = " << num(p.d_x) << "\n"
    << "d_y = " << num(p.d_y) << "\n"
    << "hidden = " << cfg::list(p.hidden, [](std::size_t h) { return num(h); }) << "\n"
    << "n_train = " << num(p.n_train) << "\n"
    << "n_heldout = " << num(p.n_heldout) << "\n"
    << "seed = " << num(p.seed) << "\n"
    << "separation = " << format_real(p.separation) << "\n"
    << "dataset = " << quote(p.dataset) << "\n\n";

  const auto& s = c.strategy;
  o << "[strategy]\n"
    << "kind = " << quote(std::string(to_string(s.kind))) << "\n"
    << "learners = " << num(s.learners) << "\n"
    << "batch = " << num(s.global_batch) << "\n"
    << "group_size = " << num(s.group_size) << "\n"
    << "gossip = " << (s.gossip_neighbors ? "true" : "false") << "\n"
    << "staleness_bound = " << num(s.staleness_bound) << "\n";
  if (c.mixing) {
    o << "mixing = [\n";
    for (const auto& row : c.mixing->rows()) o << "  " << cfg::list(row, format_real) << ",\n";
    o << "]\n";
  }
  o << "\n";

  const auto& sc = c.schedule;
  o << "[schedule]\n"
    << "kind = " << quote(std::string(to_string(sc.kind))) << "\n"
    << "alpha0 = " << format_real(sc.alpha0) << "\n"
    << "peak = " << format_real(sc.peak) << "\n"
    << "warmup_epochs = " << num(sc.warmup_epochs) << "\n"
    << "anneal_start = " << num(sc.anneal_start_epoch) << "\n"
    << "anneal_factor = " << format_real(sc.anneal_factor) << "\n\n";

  const auto& k = c.cost;
  o << "[cost]\n"
    << "preset = " << quote(c.cost_preset) << "\n"
    << "compute_seconds_per_sample = " << format_real(k.compute_seconds_per_sample) << "\n"
    << "slowdown = " << cfg::list(k.slowdown, format_real) << "\n"
    << "jitter = " << format_real(k.compute_jitter) << "\n"
    << "model_bytes = " << format_real(k.model_bytes) << "\n"
    << "link_bandwidth = " << format_real(k.link_bandwidth) << "\n"
    << "link_efficiency = " << format_real(k.link_efficiency) << "\n"
    << "link_latency = " << format_real(k.link_latency) << "\n"
    << "allreduce_efficiency = " << format_real(k.allreduce_efficiency) << "\n"
    << "intra_node_bandwidth = " << format_real(k.intra_node_bandwidth) << "\n"
    << "learners_per_node = " << num(k.learners_per_node) << "\n"
    << "ps_transport = " << quote(std::string(to_string(k.ps_transport))) << "\n"
    << "loader_overlap = " << (k.loader_overlap ? "true" : "false") << "\n"
    << "load_seconds_per_sample = " << format_real(k.load_seconds_per_sample) << "\n\n";

  o << "[run]\n"
    << "backend = " << quote(std::string(to_string(c.backend))) << "\n"
    << "epochs = " << num(c.epochs) << "\n"
    << "seed = " << num(c.seed) << "\n"
    << "output = " << quote(c.output) << "\n";
  return o.str();
}

}  // namespace psgd
