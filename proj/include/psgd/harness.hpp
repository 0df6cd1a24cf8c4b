#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "psgd/config.hpp"
#include "psgd/problems.hpp"
#include "psgd/rng.hpp"
#include "psgd/run_result.hpp"
#include "psgd/simulator.hpp"
#include "psgd/threaded.hpp"
#include "psgd/topology.hpp"

namespace psgd {

inline constexpr const char* kVersion = "1.0.0";

// ---- dataset files ---------------------------------------------------------
//
// "PSGD1\0\0\0", then d_x, d_y, n_train, n_heldout as little-endian u64, then
// all features as little-endian f64 (train rows, then heldout rows), then all
// labels as u64 in the same order.

namespace io {

inline constexpr std::array<char, 8> kMagic{'P', 'S', 'G', 'D', '1', 0, 0, 0};

inline void put_u64(std::ostream& o, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  o.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& in, const std::string& path) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ConfigError(detail::concat(path, ": truncated dataset file"));
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace io

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream o(path, std::ios::binary);
  if (!o) throw Error(detail::concat("cannot write ", path.string()));
  o.write(io::kMagic.data(), io::kMagic.size());
  for (std::uint64_t v : {std::uint64_t(ds.d_x), std::uint64_t(ds.d_y), std::uint64_t(ds.samples.size()),
                          std::uint64_t(ds.heldout.size())}) {
    io::put_u64(o, v);
  }
  for (const auto* part : {&ds.samples, &ds.heldout}) {
    for (const auto& s : *part) {
      for (double x : s.features) io::put_u64(o, std::bit_cast<std::uint64_t>(x));
    }
  }
  for (const auto* part : {&ds.samples, &ds.heldout}) {
    for (const auto& s : *part) io::put_u64(o, s.label);
  }
  if (!o) throw Error(detail::concat("write failed for ", path.string()));
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  const std::string name = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(detail::concat("cannot open dataset ", name));
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != io::kMagic) {
    throw ConfigError(detail::concat(name, ": not a dataset file (bad magic)"));
  }
  Dataset ds;
  ds.d_x = io::get_u64(in, name);
  ds.d_y = io::get_u64(in, name);
  const std::uint64_t n_train = io::get_u64(in, name), n_heldout = io::get_u64(in, name);
  const auto expected = 40 + (n_train + n_heldout) * (ds.d_x + 1) * 8;
  if (std::filesystem::file_size(path) != expected) {
    throw ConfigError(detail::concat(name, ": size ", std::filesystem::file_size(path), " bytes, header implies ",
                                     expected));
  }
  ds.samples.resize(n_train);
  ds.heldout.resize(n_heldout);
  for (auto* part : {&ds.samples, &ds.heldout}) {
    for (auto& s : *part) {
      s.features.resize(ds.d_x);
      for (auto& x : s.features) {
        x = std::bit_cast<double>(io::get_u64(in, name));
        if (!std::isfinite(x)) throw NumericError(detail::concat(name, ": non-finite feature"));
      }
    }
  }
  for (auto* part : {&ds.samples, &ds.heldout}) {
    for (auto& s : *part) s.label = io::get_u64(in, name);
  }
  return ds;
}

// split,label,x0..x{d-1}
inline void export_dataset_csv(const Dataset& ds, std::ostream& o) {
  o << "split,label";
  for (std::size_t j = 0; j < ds.d_x; ++j) o << ",x" << j;
  o << '\n';
  auto rows = [&](const std::vector<Sample>& part, const char* split) {
    for (const auto& s : part) {
      o << split << ',' << s.label;
      for (double x : s.features) o << ',' << format_real(x);
      o << '\n';
    }
  };
  rows(ds.samples, "train");
  rows(ds.heldout, "heldout");
}

// ---- experiments -----------------------------------------------------------

struct Workload {
  Dataset dataset;
  Problem problem;
};

inline Workload load_workload(const ExperimentConfig& c) {
  const auto& p = c.problem;
  Dataset ds;
  if (!p.dataset.empty()) {
    ds = read_dataset(p.dataset);
    if (ds.d_x != p.d_x || ds.d_y != p.d_y) {
      throw ConfigError(detail::concat("problem.dataset has d_x=", ds.d_x, " d_y=", ds.d_y, " but the config says d_x=",
                                       p.d_x, " d_y=", p.d_y));
    }
  } else {
    ds = generate(p.kind, p.seed, p.n_train, p.n_heldout, p.d_x, p.d_y, GenerateOptions{p.separation});
  }
  Problem problem = make_problem(p.kind, p.d_x, p.d_y, p.hidden, p.seed);
  return {std::move(ds), std::move(problem)};
}

inline RunResult execute(const ExperimentConfig& c, const Workload& w, const RunOptions& base = {}) {
  RunOptions opts = base;
  opts.mixing = c.mixing;
  if (c.backend == Backend::Simulate) {
    return simulate_run(c.strategy, w.problem, w.dataset, c.schedule, c.cost, c.epochs, c.seed, opts);
  }
  return threaded_run(c.strategy, w.problem, w.dataset, c.schedule, c.epochs, c.seed, opts);
}

inline std::string manifest_text(const ExperimentConfig& c) {
  return detail::concat("# psgd-lab ", kVersion, "\n# seed ", c.seed, "\n", serialize_config(c));
}

// Runs one experiment and writes manifest.ini plus the three CSVs to `dir`.
inline RunResult run_experiment(const ExperimentConfig& c, const std::filesystem::path& dir) {
  validate_config(c);
  const Workload w = load_workload(c);
  RunResult r;
  try {
    r = execute(c, w);
  } catch (const Error& e) {
    throw Error(detail::concat(e.what(), " [strategy ", to_string(c.strategy.kind), ", L=", c.strategy.learners,
                               ", backend ", to_string(c.backend), "]"));
  }
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "manifest.ini", std::ios::binary);
    if (!f) throw Error(detail::concat("cannot write ", (dir / "manifest.ini").string()));
    f << manifest_text(c);
  }
  write_run_csvs(r, dir, is_synchronous(c.strategy.kind));
  return r;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(detail::concat("cannot read ", path.string()));
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline std::vector<std::string> split_values(const std::string& list) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(list);
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw ConfigError(detail::concat("sweep: no values in '", list, "'"));
  return out;
}

struct SweepRow {
  std::string value;
  std::filesystem::path dir;
  RunResult result;
};

// Runs the config once per value of `key`, sequentially, into
// root/<key>=<value>/, and writes root/speedup.csv.
// Every point is parsed and validated before the first one runs.
inline std::vector<SweepRow> sweep(const std::string& config_text, const Overrides& base, const std::string& key,
                                   const std::vector<std::string>& values, const std::filesystem::path& root) {
  std::vector<std::pair<std::string, ExperimentConfig>> configs;
  for (const auto& v : values) {
    Overrides o = base;
    o.emplace_back(key, v);
    configs.emplace_back(v, parse_config(config_text, o));
  }

  std::vector<SweepRow> rows;
  for (auto& [v, c] : configs) {
    const auto dir = root / (key + "=" + v);
    rows.push_back({v, dir, run_experiment(c, dir)});
  }
  std::filesystem::create_directories(root);
  std::ofstream f(root / "speedup.csv", std::ios::binary);
  if (!f) throw Error(detail::concat("cannot write ", (root / "speedup.csv").string()));
  f << "value,strategy,learners,total_seconds,baseline_seconds,speedup,final_heldout_loss\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& c = configs[i].second;
    const auto& r = rows[i].result;
    f << rows[i].value << ',' << to_string(c.strategy.kind) << ',' << c.strategy.learners << ','
      << format_real(r.total_seconds) << ',' << format_real(r.baseline_seconds) << ',' << format_real(r.speedup)
      << ',' << format_real(r.heldout_loss.back()) << '\n';
  }
  return rows;
}

// ---- validation ------------------------------------------------------------

struct Check {
  std::string name;
  bool passed = true;
  std::string detail;
};

struct ValidationReport {
  std::vector<Check> checks;
  double gradient_error = -1.0;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }
  std::string text() const {
    std::ostringstream o;
    for (const auto& c : checks) o << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
    return o.str();
  }
};

inline constexpr double kGradientTolerance = 1e-5;

// Dry run: every check is attempted and reported, nothing is trained.
inline ValidationReport validate(const std::string& config_text, const Overrides& overrides = {}) {
  ValidationReport rep;
  auto attempt = [&](const std::string& name, auto&& body) {
    Check c{name, true, ""};
    try {
      c.detail = body(c);
    } catch (const std::exception& e) {
      c.passed = false;
      c.detail = e.what();
    }
    rep.checks.push_back(std::move(c));
  };

  ExperimentConfig c;
  bool parsed = false;
  attempt("parse", [&](Check&) {
    c = parse_config_unchecked(config_text, overrides);
    parsed = true;
    return std::string("schema ok");
  });
  if (!parsed) return rep;

  attempt("topology", [&](Check&) {
    c.strategy.validate();
    return detail::concat(to_string(c.strategy.kind), " with L=", c.strategy.learners,
                          c.strategy.kind == StrategyKind::HRing
                              ? detail::concat(", ", c.strategy.outer_count(), " super-learners of ",
                                               c.strategy.group_size)
                              : std::string());
  });

  attempt("divisibility", [&](Check&) {
    const auto& s = c.strategy;
    if (s.learners == 0 || s.global_batch % s.learners != 0) {
      throw ConfigError(detail::concat("strategy.batch (", s.global_batch, ") is not divisible by strategy.learners (",
                                       s.learners, ")"));
    }
    if (is_synchronous(s.kind) && c.problem.n_train % s.global_batch != 0) {
      throw ConfigError(detail::concat("problem.n_train (", c.problem.n_train, ") is not a multiple of strategy.batch (",
                                       s.global_batch, ")"));
    }
    return detail::concat("M=", s.global_batch, ", M_l=", s.local_batch());
  });

  attempt("mixing", [&](Check& self) {
    const auto& s = c.strategy;
    MixingMatrix m;
    std::string which;
    if (c.mixing) {
      m = *c.mixing;
      which = "custom";
    } else if (s.kind == StrategyKind::ScPsgd || s.kind == StrategyKind::SyncCentral) {
      m = uniform_matrix(s.learners);
      which = "uniform";
    } else if (s.kind == StrategyKind::HRing) {
      m = ring_matrix(s.outer_count());
      which = "outer ring";
    } else if (s.learners >= 3) {
      m = ring_matrix(s.learners);
      which = "ring";
    } else {
      return std::string("no mixing for this configuration");
    }
    const auto r = validate_doubly_stochastic(m);
    self.passed = r.passed();
    return detail::concat(which, " ", m.size(), "x", m.size(), " ", r.describe());
  });

  attempt("config", [&](Check&) {
    validate_config(c);
    return std::string("all constraints hold");
  });

  attempt("gradient", [&](Check& self) {
    const Workload w = load_workload(c);
    Rng rng(derive_seed(c.seed, 0x6AD));
    // Random point near the initial one, and a random batch of up to 16 samples.
    ParamBuilder wb(w.problem.initial_point(c.seed));
    for (auto& v : wb.values()) v += 0.5 * rng.normal();
    const ParamVector at = std::move(wb).finish("gradient check point");
    const auto perm = rng.permutation(w.dataset.samples.size());
    std::vector<const Sample*> batch;
    for (std::size_t i = 0; i < std::min<std::size_t>(16, perm.size()); ++i) batch.push_back(&w.dataset.samples[perm[i]]);
    const ParamVector g = w.problem.gradient(at, batch);
    const ParamVector fd = finite_difference(w.problem, at, batch, 1e-6);
    rep.gradient_error = relative_error(g, fd, 1e-12);
    self.passed = rep.gradient_error < kGradientTolerance;
    return detail::concat("relative L2 error ", rep.gradient_error, " (limit ", kGradientTolerance, ")");
  });
  return rep;
}

}  // namespace psgd
