#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "psgd/error.hpp"
#include "psgd/problems.hpp"
#include "psgd/tensor.hpp"
#include "psgd/topology.hpp"

namespace psgd {

enum class StrategyKind { SyncCentral, AsyncCentral, ScPsgd, SdPsgd, AdPsgd, HRing };

inline std::string_view to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::SyncCentral: return "sync_central";
    case StrategyKind::AsyncCentral: return "async_central";
    case StrategyKind::ScPsgd: return "sc_psgd";
    case StrategyKind::SdPsgd: return "sd_psgd";
    case StrategyKind::AdPsgd: return "ad_psgd";
    case StrategyKind::HRing: return "hring";
  }
  return "?";
}

inline StrategyKind strategy_kind_from_string(std::string_view s) {
  for (auto k : {StrategyKind::SyncCentral, StrategyKind::AsyncCentral, StrategyKind::ScPsgd, StrategyKind::SdPsgd,
                 StrategyKind::AdPsgd, StrategyKind::HRing}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError(detail::concat("unknown strategy kind '", s,
                                   "' (expected sync_central|async_central|sc_psgd|sd_psgd|ad_psgd|hring)"));
}

inline bool is_synchronous(StrategyKind k) {
  return k == StrategyKind::SyncCentral || k == StrategyKind::ScPsgd || k == StrategyKind::SdPsgd;
}

struct StrategySpec {
  StrategyKind kind = StrategyKind::SyncCentral;
  std::size_t learners = 1;      // L
  std::size_t global_batch = 1;  // M
  std::size_t group_size = 1;    // learners per H-ring super-learner
  // AD-PSGD / H-ring: also overwrite both neighbours with the averaged model.
  bool gossip_neighbors = false;
  // AsyncCentral: pushes staler than this are discarded (0 = no bound).
  std::uint64_t staleness_bound = 0;

  std::size_t local_batch() const { return global_batch / learners; }
  std::size_t outer_count() const { return learners / group_size; }

  void validate() const {
    if (learners == 0) throw ConfigError("strategy.learners must be >= 1");
    if (global_batch == 0) throw ConfigError("strategy.batch must be >= 1");
    if (global_batch % learners != 0) {
      throw ConfigError(detail::concat("strategy.batch (", global_batch, ") must be divisible by strategy.learners (",
                                       learners, ")"));
    }
    if ((kind == StrategyKind::SdPsgd || kind == StrategyKind::AdPsgd) && learners == 2) {
      throw ConfigError("strategy.learners = 2: ring requires L >= 3 for distinct left/right neighbors");
    }
    if (kind == StrategyKind::HRing) {
      if (group_size == 0 || learners % group_size != 0) {
        throw ConfigError(detail::concat("strategy.group_size (", group_size, ") must divide strategy.learners (",
                                         learners, ")"));
      }
      if (outer_count() < 3) {
        throw ConfigError(detail::concat("strategy: hring outer ring has ", outer_count(),
                                         " super-learners; ring requires L >= 3 for distinct left/right neighbors"));
      }
    }
  }

  bool operator==(const StrategySpec&) const = default;
};

struct LearnerState {
  std::size_t id = 0;
  ParamVector model;
  std::uint64_t batches_done = 0;
  std::uint64_t samples_consumed = 0;
  std::uint64_t pulled_version = 0;
};

struct PsState {
  ParamVector model;
  std::uint64_t update_count = 0;
  std::uint64_t model_version = 0;
};

// tau -> number of updates applied with that staleness.
struct StalenessHistogram {
  std::map<std::uint64_t, std::uint64_t> counts;
  std::uint64_t dropped = 0;

  void record(std::uint64_t tau, std::uint64_t times = 1) { counts[tau] += times; }
  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto [_, c] : counts) n += c;
    return n;
  }
  std::uint64_t max_tau() const { return counts.empty() ? 0 : counts.rbegin()->first; }
  double mean_tau() const {
    double s = 0.0;
    for (auto [t, c] : counts) s += static_cast<double>(t) * static_cast<double>(c);
    const auto n = total();
    return n ? s / static_cast<double>(n) : 0.0;
  }
  bool operator==(const StalenessHistogram&) const = default;
};

inline std::vector<LearnerState> make_learners(std::size_t L, const ParamVector& w0) {
  std::vector<LearnerState> out(L);
  for (std::size_t l = 0; l < L; ++l) {
    out[l].id = l;
    out[l].model = w0;
  }
  return out;
}

inline void note_batch(LearnerState& learner, std::size_t local_batch) {
  ++learner.batches_done;
  learner.samples_consumed += local_batch;
}

// Gradient at the learner's current model; the model itself is untouched.
inline ParamVector local_gradient(const LearnerState& learner, const Problem& problem, Batch batch,
                                  std::size_t local_batch) {
  if (batch.size() != local_batch) {
    throw ProtocolError(detail::concat("local_gradient: learner ", learner.id, " got a batch of ", batch.size(),
                                       ", expected M_l = ", local_batch));
  }
  return problem.gradient(learner.model, batch);
}

namespace detail {

inline void require_round_inputs(std::size_t learners, std::size_t inputs, const char* op) {
  if (learners == 0) throw ProtocolError(concat(op, ": no learners"));
  if (inputs != learners) throw ProtocolError(concat(op, ": ", inputs, " inputs for ", learners, " learners"));
}

inline void require_identical_models(std::span<const LearnerState> learners, const char* op) {
  for (const auto& l : learners) {
    if (!(l.model == learners.front().model)) {
      throw ProtocolError(concat(op, ": learner ", l.id, " entered the round with a divergent model"));
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Synchronous centralized: the PS waits for all L gradients, applies their mean
// once, and every learner pulls the new model.

inline void sync_central_apply(PsState& ps, std::span<LearnerState> learners, std::span<const ParamVector> grads,
                               double alpha, std::size_t local_batch, StalenessHistogram& staleness) {
  detail::require_round_inputs(learners.size(), grads.size(), "sync_central_round");
  for (const auto& l : learners) {
    if (l.pulled_version != ps.model_version) {
      throw ProtocolError(detail::concat("sync_central_round: learner ", l.id, " holds version ", l.pulled_version,
                                         ", PS is at ", ps.model_version));
    }
  }
  ps.model = axpy(-alpha, mean_of(grads), ps.model);
  ++ps.update_count;
  ++ps.model_version;
  for (auto& l : learners) {
    l.model = ps.model;
    l.pulled_version = ps.model_version;
    note_batch(l, local_batch);
  }
  staleness.record(0, learners.size());
}

inline void sync_central_round(PsState& ps, std::span<LearnerState> learners, std::span<const Batch> batches,
                               const Problem& problem, double alpha, std::size_t local_batch,
                               StalenessHistogram& staleness) {
  detail::require_round_inputs(learners.size(), batches.size(), "sync_central_round");
  std::vector<ParamVector> grads;
  grads.reserve(learners.size());
  for (std::size_t l = 0; l < learners.size(); ++l) {
    grads.push_back(local_gradient(learners[l], problem, batches[l], local_batch));
  }
  sync_central_apply(ps, learners, grads, alpha, local_batch, staleness);
}

// ---------------------------------------------------------------------------
// Asynchronous centralized: the PS applies each gradient on arrival.

inline void pull(const PsState& ps, LearnerState& learner) {
  learner.model = ps.model;
  learner.pulled_version = ps.model_version;
}

struct PushOutcome {
  std::uint64_t tau = 0;
  bool applied = true;
};

inline PushOutcome async_central_push(PsState& ps, const LearnerState& learner, const ParamVector& grad, double alpha,
                                      StalenessHistogram& staleness, std::uint64_t staleness_bound = 0) {
  if (learner.pulled_version > ps.model_version) {
    throw ProtocolError(detail::concat("async_central_push: learner ", learner.id, " pulled version ",
                                       learner.pulled_version, " ahead of PS version ", ps.model_version));
  }
  PushOutcome out;
  out.tau = ps.model_version - learner.pulled_version;
  if (staleness_bound > 0 && out.tau > staleness_bound) {
    out.applied = false;
    ++staleness.dropped;
    return out;
  }
  ps.model = axpy(-alpha, grad, ps.model);
  ++ps.update_count;
  ++ps.model_version;
  staleness.record(out.tau);
  return out;
}

// ---------------------------------------------------------------------------
// SC-PSGD: local SGD steps followed by a global average (allreduce).

inline void sc_psgd_apply(std::span<LearnerState> learners, std::span<const ParamVector> grads, double alpha,
                          std::size_t local_batch) {
  detail::require_round_inputs(learners.size(), grads.size(), "sc_psgd_round");
  detail::require_identical_models(learners, "sc_psgd_round");
  const std::size_t L = learners.size();
  std::vector<ParamVector> stepped;
  stepped.reserve(L);
  for (std::size_t l = 0; l < L; ++l) stepped.push_back(axpy(-alpha, grads[l], learners[l].model));
  // Every column of the uniform matrix is identical, so one column serves all learners.
  const std::size_t d = stepped.front().dim();
  const double t = 1.0 / static_cast<double>(L);
  ParamBuilder avg(d);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t k = 0; k < d; ++k) avg[k] += t * stepped[i][k];
  const ParamVector averaged = std::move(avg).finish("sc_psgd_round");
  for (auto& l : learners) {
    l.model = averaged;
    note_batch(l, local_batch);
  }
}

inline void sc_psgd_round(std::span<LearnerState> learners, std::span<const Batch> batches, const Problem& problem,
                          double alpha, std::size_t local_batch) {
  detail::require_round_inputs(learners.size(), batches.size(), "sc_psgd_round");
  std::vector<ParamVector> grads;
  for (std::size_t l = 0; l < learners.size(); ++l) {
    grads.push_back(local_gradient(learners[l], problem, batches[l], local_batch));
  }
  sc_psgd_apply(learners, grads, alpha, local_batch);
}

// ---------------------------------------------------------------------------
// SD-PSGD: W_{k+1} = W_k T1 - alpha G(W_k). Gradients come from the pre-mixing
// models; both terms are combined at the round barrier. A caller-supplied
// matrix replaces T1.

inline void sd_psgd_apply(std::span<LearnerState> learners, std::span<const ParamVector> grads, double alpha,
                          std::size_t local_batch, const MixingMatrix* mixing = nullptr) {
  detail::require_round_inputs(learners.size(), grads.size(), "sd_psgd_round");
  const std::size_t L = learners.size();
  if (L == 1) {
    learners[0].model = axpy(-alpha, grads[0], learners[0].model);
    note_batch(learners[0], local_batch);
    return;
  }
  if (L < 3) throw TopologyError("sd_psgd_round: ring requires L >= 3 for distinct left/right neighbors");
  std::vector<ParamVector> models;
  models.reserve(L);
  for (const auto& l : learners) models.push_back(l.model);
  auto mixed = mixing ? apply_mixing(models, *mixing) : apply_mixing(models, ring_matrix(L));
  for (std::size_t l = 0; l < L; ++l) {
    learners[l].model = axpy(-alpha, grads[l], mixed[l]);
    note_batch(learners[l], local_batch);
  }
}

inline void sd_psgd_round(std::span<LearnerState> learners, std::span<const Batch> batches, const Problem& problem,
                          double alpha, std::size_t local_batch, const MixingMatrix* mixing = nullptr) {
  detail::require_round_inputs(learners.size(), batches.size(), "sd_psgd_round");
  std::vector<ParamVector> grads;
  for (std::size_t l = 0; l < learners.size(); ++l) {
    grads.push_back(local_gradient(learners[l], problem, batches[l], local_batch));
  }
  sd_psgd_apply(learners, grads, alpha, local_batch, mixing);
}

// ---------------------------------------------------------------------------
// AD-PSGD: a finishing learner atomically replaces its model with the T1 row
// average of itself and both ring neighbours minus its (possibly stale)
// gradient. The caller provides the atomicity.

struct RingNeighbors {
  std::size_t left;
  std::size_t right;
};

inline RingNeighbors ring_neighbors(std::size_t i, std::size_t L) { return {(i + L - 1) % L, (i + 1) % L}; }

// (left + self + right) / 3, summed in ascending learner id like a T1 column.
inline ParamVector ring_average(std::span<const ParamVector* const> models_by_id,
                                std::span<const std::size_t> ids_ascending) {
  const std::size_t d = models_by_id.front()->dim();
  ParamBuilder acc(d);
  const double t = 1.0 / 3.0;
  for (std::size_t id : ids_ascending) {
    const ParamVector& w = *models_by_id[id];
    for (std::size_t k = 0; k < d; ++k) acc[k] += t * w[k];
  }
  return std::move(acc).finish("ring_average");
}

struct AdCombineResult {
  ParamVector self;
  ParamVector neighbor_average;  // (l + s + r)/3 without the gradient term
};

// Combines three models (in any order) with a gradient. For L < 3 the ring
// degenerates to the learner alone.
inline AdCombineResult ad_psgd_combine(const ParamVector& left, const ParamVector& self, const ParamVector& right,
                                       std::size_t left_id, std::size_t self_id, std::size_t right_id,
                                       const ParamVector& grad, double alpha) {
  require_same_dim(left, self, "ad_psgd_step");
  require_same_dim(right, self, "ad_psgd_step");
  if (left_id == self_id && right_id == self_id) {
    return {axpy(-alpha, grad, self), self};
  }
  // Sort the three (id, model) pairs by id so the sum order matches a T1 column.
  std::array<std::pair<std::size_t, const ParamVector*>, 3> parts{
      {{left_id, &left}, {self_id, &self}, {right_id, &right}}};
  std::sort(parts.begin(), parts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const std::size_t d = self.dim();
  ParamBuilder acc(d);
  const double t = 1.0 / 3.0;
  for (const auto& [id, w] : parts) {
    for (std::size_t k = 0; k < d; ++k) acc[k] += t * (*w)[k];
  }
  ParamVector avg = std::move(acc).finish("ad_psgd_step");
  ParamVector updated = axpy(-alpha, grad, avg);
  return {std::move(updated), std::move(avg)};
}

// Serial AD-PSGD step for learner i: gradient at its current model, then the
// three-way average. With gossip_neighbors both neighbours also take the average.
inline void ad_psgd_step(std::span<LearnerState> learners, std::size_t i, const Problem& problem, Batch batch,
                         double alpha, std::size_t local_batch, bool gossip_neighbors = false) {
  const std::size_t L = learners.size();
  if (i >= L) throw ProtocolError("ad_psgd_step: learner index out of range");
  if (L == 2) throw TopologyError("ad_psgd_step: ring requires L >= 3 for distinct left/right neighbors");
  const ParamVector grad = local_gradient(learners[i], problem, batch, local_batch);
  const auto nb = L == 1 ? RingNeighbors{0, 0} : ring_neighbors(i, L);
  auto res = ad_psgd_combine(learners[nb.left].model, learners[i].model, learners[nb.right].model, nb.left, i,
                             nb.right, grad, alpha);
  if (gossip_neighbors && L >= 3) {
    learners[nb.left].model = res.neighbor_average;
    learners[nb.right].model = res.neighbor_average;
  }
  learners[i].model = std::move(res.self);
  note_batch(learners[i], local_batch);
}

// ---------------------------------------------------------------------------
// H-ring: each group of group_size learners runs SC-PSGD internally (gradient
// average), then acts as one AD-PSGD super-learner on the outer ring.

// Mean of the members' gradients, in member order.
inline ParamVector hring_group_gradient(std::span<const ParamVector> member_grads) { return mean_of(member_grads); }

// Applies super-learner g's step against its outer neighbours. `learners` is
// group-major: group g owns [g*G, (g+1)*G).
inline void hring_group_apply(std::span<LearnerState> learners, std::size_t group_size, std::size_t g,
                              const ParamVector& group_grad, double alpha, std::size_t local_batch,
                              bool gossip_neighbors = false) {
  const std::size_t S = learners.size() / group_size;
  if (S < 3) throw TopologyError("hring: outer ring requires >= 3 super-learners");
  auto lead = [&](std::size_t grp) -> LearnerState& { return learners[grp * group_size]; };
  for (std::size_t m = 1; m < group_size; ++m) {
    if (!(learners[g * group_size + m].model == lead(g).model)) {
      throw ProtocolError(detail::concat("hring: members of group ", g, " hold divergent models"));
    }
  }
  const auto nb = ring_neighbors(g, S);
  auto res = ad_psgd_combine(lead(nb.left).model, lead(g).model, lead(nb.right).model, nb.left, g, nb.right, group_grad,
                             alpha);
  auto set_group = [&](std::size_t grp, const ParamVector& w) {
    for (std::size_t m = 0; m < group_size; ++m) learners[grp * group_size + m].model = w;
  };
  if (gossip_neighbors) {
    set_group(nb.left, res.neighbor_average);
    set_group(nb.right, res.neighbor_average);
  }
  set_group(g, res.self);
  for (std::size_t m = 0; m < group_size; ++m) note_batch(learners[g * group_size + m], local_batch);
}

// One serial sweep: every group, in ascending order, computes its averaged
// gradient at its current model and performs its super-learner step.
inline void hring_round(std::span<LearnerState> learners, std::size_t group_size, std::span<const Batch> batches,
                        const Problem& problem, double alpha, std::size_t local_batch, bool gossip_neighbors = false) {
  detail::require_round_inputs(learners.size(), batches.size(), "hring_round");
  if (group_size == 0 || learners.size() % group_size != 0) throw ProtocolError("hring_round: bad group size");
  const std::size_t S = learners.size() / group_size;
  if (S < 3) throw TopologyError("hring_round: outer ring requires >= 3 super-learners");
  for (std::size_t g = 0; g < S; ++g) {
    std::vector<ParamVector> grads;
    for (std::size_t m = 0; m < group_size; ++m) {
      const std::size_t l = g * group_size + m;
      grads.push_back(local_gradient(learners[l], problem, batches[l], local_batch));
    }
    hring_group_apply(learners, group_size, g, hring_group_gradient(grads), alpha, local_batch, gossip_neighbors);
  }
}

}  // namespace psgd
