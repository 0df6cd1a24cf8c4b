#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "psgd/error.hpp"
#include "psgd/strategies.hpp"
#include "psgd/tensor.hpp"

namespace psgd {

struct RunResult {
  std::vector<double> epoch_seconds;  // duration of each epoch (virtual or real)
  std::vector<double> heldout_loss;   // after each epoch
  std::vector<double> epoch_lr;
  std::vector<std::uint64_t> batches_per_learner;
  std::size_t local_batch = 0;
  StalenessHistogram staleness;
  std::uint64_t total_samples = 0;
  double total_seconds = 0.0;
  double baseline_seconds = 0.0;
  double speedup = 0.0;
  bool virtual_time = true;
  // PS model, or mean of the learners' models for decentralized strategies.
  ParamVector final_model;
  // Reference model after every synchronous round, when requested.
  std::vector<ParamVector> trajectory;
};

// Baseline total time over parallel total time, for runs over the same samples.
inline double measure_speedup(const RunResult& parallel, const RunResult& baseline) {
  if (parallel.total_samples != baseline.total_samples) {
    throw ConfigError(detail::concat("measure_speedup: runs processed different sample counts (",
                                     parallel.total_samples, " vs ", baseline.total_samples, ")"));
  }
  if (!(parallel.total_seconds > 0.0)) throw ConfigError("measure_speedup: parallel run has no elapsed time");
  return baseline.total_seconds / parallel.total_seconds;
}

// Shortest representation that round-trips, so equal runs give equal bytes.
inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// metrics.csv: epoch,seconds,heldout_loss,lr
// workload.csv: learner,batches,samples
// staleness.csv: tau,count  (header only for synchronous strategies)
inline void write_run_csvs(const RunResult& r, const std::filesystem::path& dir, bool synchronous) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw Error(detail::concat("cannot write ", (dir / name).string()));
    return f;
  };
  {
    auto f = open("metrics.csv");
    f << "epoch,seconds,heldout_loss,lr\n";
    for (std::size_t e = 0; e < r.epoch_seconds.size(); ++e) {
      f << e << ',' << format_real(r.epoch_seconds[e]) << ',' << format_real(r.heldout_loss[e]) << ','
        << format_real(r.epoch_lr[e]) << '\n';
    }
  }
  {
    auto f = open("workload.csv");
    f << "learner,batches,samples\n";
    for (std::size_t l = 0; l < r.batches_per_learner.size(); ++l) {
      f << l << ',' << r.batches_per_learner[l] << ',' << r.batches_per_learner[l] * r.local_batch << '\n';
    }
  }
  {
    auto f = open("staleness.csv");
    f << "tau,count\n";
    if (!synchronous) {
      for (auto [tau, count] : r.staleness.counts) f << tau << ',' << count << '\n';
    }
  }
}

}  // namespace psgd
