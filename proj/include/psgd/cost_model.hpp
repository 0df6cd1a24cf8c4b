#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string_view>
#include <vector>

#include "psgd/error.hpp"

namespace psgd {

// How the parameter server of the synchronous centralized strategy is realized
// in the cost model: as a reduce-then-broadcast ring allreduce, or as a single
// server link that gathers and broadcasts L models back to back.
enum class PsTransport { Allreduce, Server };

inline std::string_view to_string(PsTransport t) { return t == PsTransport::Allreduce ? "allreduce" : "server"; }

inline PsTransport ps_transport_from_string(std::string_view s) {
  if (s == "allreduce") return PsTransport::Allreduce;
  if (s == "server") return PsTransport::Server;
  throw ConfigError(detail::concat("unknown cost.ps_transport '", s, "' (expected allreduce|server)"));
}

// Virtual-time cost parameters. Seconds and bytes throughout.
struct CostModel {
  double compute_seconds_per_sample = 0.07 / 32.0;
  // Per-learner compute slowdown (>= 1); learners past the end run at 1.
  std::vector<double> slowdown;
  // Interference delay per batch: uniform in [0, 2 * jitter] times the
  // unslowed batch compute time (mean = jitter). Zero keeps runs jitter-free.
  double compute_jitter = 0.0;
  double model_bytes = 165e6;
  double link_bandwidth = 12.5e9;  // 100 Gbit/s
  // Achieved fraction of link_bandwidth for point-to-point model transfers.
  double link_efficiency = 1.0;
  double link_latency = 5e-6;
  // Achieved fraction of link_bandwidth for the ring allreduce.
  double allreduce_efficiency = 1.0;
  // Bandwidth between learners of one H-ring super-learner (same node).
  double intra_node_bandwidth = 16e9;
  // Learners sharing one network interface; concurrent transfers split it evenly.
  std::size_t learners_per_node = 1;
  PsTransport ps_transport = PsTransport::Allreduce;
  // When false, every batch is first read from storage shared by all learners,
  // one load at a time.
  bool loader_overlap = true;
  double load_seconds_per_sample = 0.0;

  // No communication cost at all.
  static CostModel zero_comm() {
    CostModel c;
    c.model_bytes = 0.0;
    c.link_latency = 0.0;
    return c;
  }

  // 16 P100 learners, 4 per node, 100 Gbit/s Ethernet, NCCL allreduce. The
  // efficiencies are calibrated to the measured no-straggler speedups
  // (SC-PSGD 8.70, AD-PSGD 10.88 at local batch 160).
  static CostModel p100_nccl() {
    CostModel c;
    c.compute_jitter = 0.1;
    c.link_efficiency = 0.165;
    c.allreduce_efficiency = 0.11;
    c.learners_per_node = 4;
    return c;
  }

  // Same cluster with the slower MPI allreduce.
  static CostModel p100_openmpi() {
    CostModel c = p100_nccl();
    c.allreduce_efficiency = 0.05;
    return c;
  }

  // 8 V100 learners per node, PCIe Gen3 inside a node, 100 Gbit/s between nodes.
  static CostModel v100_hring() {
    CostModel c = p100_nccl();
    c.learners_per_node = 8;
    c.intra_node_bandwidth = 16e9;
    return c;
  }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(detail::concat(name, " must be > 0"));
    };
    auto non_negative = [](double v, const char* name) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(detail::concat(name, " must be >= 0"));
    };
    positive(compute_seconds_per_sample, "cost.compute_seconds_per_sample");
    for (double s : slowdown) {
      if (!(s >= 1.0) || !std::isfinite(s)) throw ConfigError("cost.slowdown entries must be >= 1");
    }
    non_negative(compute_jitter, "cost.compute_jitter");
    non_negative(model_bytes, "cost.model_bytes");
    positive(link_bandwidth, "cost.link_bandwidth");
    non_negative(link_latency, "cost.link_latency");
    if (!(link_efficiency > 0.0 && link_efficiency <= 1.0)) throw ConfigError("cost.link_efficiency must be in (0, 1]");
    if (!(allreduce_efficiency > 0.0 && allreduce_efficiency <= 1.0)) {
      throw ConfigError("cost.allreduce_efficiency must be in (0, 1]");
    }
    positive(intra_node_bandwidth, "cost.intra_node_bandwidth");
    if (learners_per_node == 0) throw ConfigError("cost.learners_per_node must be >= 1");
    non_negative(load_seconds_per_sample, "cost.load_seconds_per_sample");
  }

  double slowdown_of(std::size_t learner) const { return learner < slowdown.size() ? slowdown[learner] : 1.0; }

  // Compute time of one batch without interference.
  double batch_compute_seconds(std::size_t learner, std::size_t batch) const {
    return compute_seconds_per_sample * static_cast<double>(batch) * slowdown_of(learner);
  }

  // Bandwidth-optimal ring allreduce: 2(L-1)/L * bytes / bw + 2(L-1) latency.
  double allreduce_seconds(std::size_t L) const {
    if (L <= 1) return 0.0;
    const double n = static_cast<double>(L);
    return 2.0 * (n - 1.0) / n * model_bytes / (link_bandwidth * allreduce_efficiency) +
           2.0 * (n - 1.0) * link_latency;
  }

  double intra_allreduce_seconds(std::size_t group) const {
    if (group <= 1) return 0.0;
    const double n = static_cast<double>(group);
    return 2.0 * (n - 1.0) / n * model_bytes / intra_node_bandwidth + 2.0 * (n - 1.0) * link_latency;
  }

  // One model over an uncontended link, excluding latency.
  double transfer_seconds() const { return model_bytes / (link_bandwidth * link_efficiency); }

  // model_bytes / bandwidth + latency on an idle interface.
  double neighbor_exchange_seconds() const { return transfer_seconds() + link_latency; }

  // Synchronous centralized update: allreduce, or L pushes plus L pulls
  // serialized on the server link.
  double sync_central_seconds(std::size_t L) const {
    if (L <= 1) return 0.0;
    if (ps_transport == PsTransport::Allreduce) return allreduce_seconds(L);
    return 2.0 * static_cast<double>(L) * transfer_seconds() + 2.0 * link_latency;
  }

  // Asynchronous push plus pull for one learner, served by the PS one at a time.
  double ps_exchange_seconds(std::size_t L) const {
    if (L <= 1) return 0.0;
    return 2.0 * (transfer_seconds() + link_latency);
  }

  double serial_load_seconds_per_sample() const { return loader_overlap ? 0.0 : load_seconds_per_sample; }

  // Parallelizable share of single-learner work: gradient computation can be
  // split across learners, loads from the shared store cannot.
  double parallel_fraction() const {
    const double serial = serial_load_seconds_per_sample();
    return compute_seconds_per_sample / (compute_seconds_per_sample + serial);
  }

  // Time for one learner alone to process `samples` samples.
  double baseline_seconds(double samples) const {
    return samples * (compute_seconds_per_sample + serial_load_seconds_per_sample());
  }

  bool operator==(const CostModel&) const = default;
};

// Amdahl's law: speedup <= 1 / (1 - p).
inline double amdahl_bound(double p) {
  if (!(p >= 0.0) || !(p < 1.0)) {
    throw ConfigError(detail::concat("amdahl_bound: parallel fraction must be in [0, 1), got ", p));
  }
  return 1.0 / (1.0 - p);
}

// Bound for a cost model; unbounded when nothing is serial.
inline double amdahl_bound_for(const CostModel& cost) {
  const double p = cost.parallel_fraction();
  return p >= 1.0 ? std::numeric_limits<double>::infinity() : amdahl_bound(p);
}

}  // namespace psgd
