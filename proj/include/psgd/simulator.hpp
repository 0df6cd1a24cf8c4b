#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <queue>
#include <vector>

#include "psgd/cost_model.hpp"
#include "psgd/data_feed.hpp"
#include "psgd/error.hpp"
#include "psgd/optimizer.hpp"
#include "psgd/problems.hpp"
#include "psgd/rng.hpp"
#include "psgd/run_result.hpp"
#include "psgd/strategies.hpp"
#include "psgd/topology.hpp"

namespace psgd {

struct RunOptions {
  // Keep the reference model after every synchronous round.
  bool record_trajectory = false;
  // SD-PSGD mixing matrix in place of the ring.
  std::optional<MixingMatrix> mixing;
};

// Checks shared by both backends before anything runs.
inline void validate_run(const StrategySpec& spec, const Dataset& ds, const LrSchedule& schedule, std::size_t epochs,
                         const RunOptions& opts = {}) {
  spec.validate();
  if (opts.mixing) {
    if (spec.kind != StrategyKind::SdPsgd) throw ConfigError("strategy.mixing applies to sd_psgd only");
    if (opts.mixing->size() != spec.learners) {
      throw ConfigError(detail::concat("strategy.mixing is ", opts.mixing->size(), "x", opts.mixing->size(),
                                       " but strategy.learners = ", spec.learners));
    }
    const auto report = validate_doubly_stochastic(*opts.mixing);
    if (!report.passed()) throw TopologyError("strategy.mixing: " + report.describe());
  }
  schedule.validate();
  if (epochs == 0) throw ConfigError("run.epochs must be >= 1");
  const std::size_t n = ds.samples.size();
  if (n == 0 || ds.heldout.empty()) throw ConfigError("dataset needs training and heldout samples");
  if (spec.learners > n) throw ConfigError(detail::concat("strategy.learners (", spec.learners, ") exceeds n_train"));
  if (is_synchronous(spec.kind) && n % spec.global_batch != 0) {
    throw ConfigError(detail::concat("problem.n_train (", n, ") must be a multiple of strategy.batch (",
                                     spec.global_batch, ") for synchronous strategies"));
  }
  if (spec.global_batch > n) throw ConfigError("strategy.batch exceeds problem.n_train");
}

namespace sim {

enum class EventKind { ComputeDone, TransferDone, ExchangeDone, PsDone };

struct Event {
  double time;
  std::size_t who;
  std::uint64_t seq;
  EventKind kind;
  std::uint64_t gen;
};

// Earliest time first; simultaneous events go to the lower learner id, then
// to the earlier-scheduled event.
struct Later {
  bool operator()(const Event& a, const Event& b) const {
    if (a.time != b.time) return a.time > b.time;
    if (a.who != b.who) return a.who > b.who;
    return a.seq > b.seq;
  }
};

class EventQueue {
 public:
  void push(double time, std::size_t who, EventKind kind, std::uint64_t gen = 0) {
    q_.push(Event{time, who, seq_++, kind, gen});
  }
  bool empty() const { return q_.empty(); }
  Event pop() {
    Event e = q_.top();
    q_.pop();
    return e;
  }

 private:
  std::priority_queue<Event, std::vector<Event>, Later> q_;
  std::uint64_t seq_ = 0;
};

// Network interface shared by the learners of one node. Active transfers split
// the bandwidth evenly (processor sharing); each change reschedules every
// active transfer's completion, and stale completions are recognised by their
// generation number.
class SharedInterface {
 public:
  void start(std::size_t who, double work, double now, EventQueue& q, std::vector<std::uint64_t>& gens) {
    advance(now);
    active_.push_back({who, work});
    reschedule(now, q, gens);
  }

  void finish(std::size_t who, double now, EventQueue& q, std::vector<std::uint64_t>& gens) {
    advance(now);
    std::erase_if(active_, [&](const Active& a) { return a.who == who; });
    reschedule(now, q, gens);
  }

 private:
  struct Active {
    std::size_t who;
    double remaining;
  };

  void advance(double now) {
    if (!active_.empty()) {
      const double share = (now - last_) / static_cast<double>(active_.size());
      for (auto& a : active_) a.remaining = std::max(0.0, a.remaining - share);
    }
    last_ = now;
  }

  void reschedule(double now, EventQueue& q, std::vector<std::uint64_t>& gens) {
    const double k = static_cast<double>(active_.size());
    for (const auto& a : active_) q.push(now + a.remaining * k, a.who, EventKind::TransferDone, ++gens[a.who]);
  }

  std::vector<Active> active_;
  double last_ = 0.0;
};

// Deterministic single-threaded executor.
class Simulation {
 public:
  Simulation(const StrategySpec& spec, const Problem& problem, const Dataset& ds, const LrSchedule& schedule,
             const CostModel& cost, std::size_t epochs, std::uint64_t seed, const RunOptions& opts)
      : spec_(spec),
        problem_(problem),
        ds_(ds),
        schedule_(schedule),
        cost_(cost),
        epochs_(epochs),
        opts_(opts),
        n_(ds.samples.size()),
        L_(spec.learners),
        Ml_(spec.local_batch()),
        feed_(ds, seed, epochs + 1),
        jitter_rng_(derive_seed(seed, 0x717)) {
    learners_ = make_learners(L_, problem.initial_point(seed));
    ps_.model = learners_.front().model;
  }

  RunResult run() {
    switch (spec_.kind) {
      case StrategyKind::SyncCentral:
      case StrategyKind::ScPsgd:
      case StrategyKind::SdPsgd: run_synchronous(); break;
      case StrategyKind::AsyncCentral: run_async_central(); break;
      case StrategyKind::AdPsgd: run_ad_psgd(); break;
      case StrategyKind::HRing: run_hring(); break;
    }
    result_.local_batch = Ml_;
    result_.virtual_time = true;
    for (const auto& l : learners_) {
      result_.batches_per_learner.push_back(l.batches_done);
      result_.total_samples += l.samples_consumed;
    }
    result_.total_seconds = 0.0;
    for (double s : result_.epoch_seconds) result_.total_seconds += s;
    result_.baseline_seconds = cost_.baseline_seconds(static_cast<double>(epochs_ * n_));
    result_.speedup = result_.baseline_seconds / result_.total_seconds;
    result_.final_model = reference_model();
    return std::move(result_);
  }

 private:
  double compute_seconds(std::size_t learner) {
    double t = cost_.batch_compute_seconds(learner, Ml_);
    if (cost_.compute_jitter > 0.0) {
      t += cost_.compute_seconds_per_sample * static_cast<double>(Ml_) * 2.0 * cost_.compute_jitter *
           jitter_rng_.uniform();
    }
    return t;
  }

  // Time at which a batch requested at `now` is in memory.
  double load_ready(double now) {
    const double per_sample = cost_.serial_load_seconds_per_sample();
    if (per_sample == 0.0) return now;
    const double start = std::max(now, storage_free_);
    storage_free_ = start + per_sample * static_cast<double>(Ml_);
    return storage_free_;
  }

  ParamVector reference_model() const {
    if (spec_.kind == StrategyKind::SyncCentral || spec_.kind == StrategyKind::AsyncCentral) return ps_.model;
    std::vector<ParamVector> models;
    models.reserve(L_);
    for (const auto& l : learners_) models.push_back(l.model);
    return mean_of(models);
  }

  void close_epoch(double now) {
    result_.epoch_seconds.push_back(now - epoch_start_);
    result_.heldout_loss.push_back(problem_.loss(reference_model(), std::span<const Sample>(ds_.heldout)));
    result_.epoch_lr.push_back(lr_at(schedule_, epoch_));
    epoch_start_ = now;
    ++epoch_;
  }

  // ---- synchronous strategies: barrier per round -------------------------

  double sync_comm_seconds() const {
    if (L_ <= 1) return 0.0;
    switch (spec_.kind) {
      case StrategyKind::SyncCentral: return cost_.sync_central_seconds(L_);
      case StrategyKind::ScPsgd: return cost_.allreduce_seconds(L_);
      case StrategyKind::SdPsgd: {
        // Every learner exchanges at the barrier; the busiest interface decides.
        const double k = static_cast<double>(std::min(cost_.learners_per_node, L_));
        return k * cost_.transfer_seconds() + cost_.link_latency;
      }
      default: return 0.0;
    }
  }

  void run_synchronous() {
    const std::size_t rounds = n_ / spec_.global_batch;
    const double comm = sync_comm_seconds();
    double now = 0.0;
    for (std::size_t e = 0; e < epochs_; ++e) {
      const double alpha = lr_at(schedule_, e);
      for (std::size_t r = 0; r < rounds; ++r) {
        double compute_end = now;
        for (std::size_t l = 0; l < L_; ++l) {
          const double ready = load_ready(now);
          compute_end = std::max(compute_end, ready + compute_seconds(l));
        }
        now = compute_end + comm;

        std::vector<std::vector<const Sample*>> owned(L_);
        std::vector<Batch> batches(L_);
        std::vector<ParamVector> grads;
        grads.reserve(L_);
        for (std::size_t l = 0; l < L_; ++l) {
          owned[l] = feed_.sync_batch(e, r, l, Ml_, L_);
          batches[l] = owned[l];
          grads.push_back(local_gradient(learners_[l], problem_, batches[l], Ml_));
        }
        switch (spec_.kind) {
          case StrategyKind::SyncCentral:
            sync_central_apply(ps_, learners_, grads, alpha, Ml_, result_.staleness);
            break;
          case StrategyKind::ScPsgd:
            sc_psgd_apply(learners_, grads, alpha, Ml_);
            result_.staleness.record(0, L_);
            break;
          default:
            sd_psgd_apply(learners_, grads, alpha, Ml_, opts_.mixing ? &*opts_.mixing : nullptr);
            result_.staleness.record(0, L_);
            break;
        }
        if (opts_.record_trajectory) result_.trajectory.push_back(reference_model());
      }
      close_epoch(now);
    }
  }

  // ---- shared async bookkeeping ------------------------------------------

  double current_alpha() const { return lr_at(schedule_, std::min<std::uint64_t>(completed_ / n_, epochs_ - 1)); }

  // Returns true once the requested number of epochs has been consumed.
  bool account(std::uint64_t samples, double now) {
    completed_ += samples;
    while (epoch_ < epochs_ && completed_ >= (epoch_ + 1) * n_) close_epoch(now);
    return epoch_ >= epochs_;
  }

  // ---- asynchronous centralized ------------------------------------------

  void run_async_central() {
    EventQueue q;
    std::vector<std::uint64_t> position(L_, 0);
    std::vector<std::vector<const Sample*>> batch(L_);
    std::vector<ParamVector> grad(L_);
    double ps_free = 0.0;
    const double ps_cost = cost_.ps_exchange_seconds(L_);

    auto begin = [&](std::size_t l, double now) {
      batch[l] = feed_.stream_batch(l, L_, position[l], Ml_);
      position[l] += Ml_;
      q.push(load_ready(now) + compute_seconds(l), l, EventKind::ComputeDone);
    };
    for (auto& l : learners_) pull(ps_, l);
    for (std::size_t l = 0; l < L_; ++l) begin(l, 0.0);

    while (!q.empty()) {
      const Event ev = q.pop();
      const std::size_t l = ev.who;
      if (ev.kind == EventKind::ComputeDone) {
        grad[l] = local_gradient(learners_[l], problem_, batch[l], Ml_);
        const double start = std::max(ev.time, ps_free);
        ps_free = start + ps_cost;
        q.push(ps_free, l, EventKind::PsDone);
      } else {
        async_central_push(ps_, learners_[l], grad[l], current_alpha(), result_.staleness, spec_.staleness_bound);
        pull(ps_, learners_[l]);
        note_batch(learners_[l], Ml_);
        if (account(Ml_, ev.time)) return;
        begin(l, ev.time);
      }
    }
  }

  // ---- asynchronous decentralized ----------------------------------------

  void run_ad_psgd() {
    EventQueue q;
    std::vector<std::uint64_t> gens(L_, 0);
    std::vector<SharedInterface> nodes((L_ + cost_.learners_per_node - 1) / cost_.learners_per_node);
    std::vector<std::uint64_t> position(L_, 0);
    std::vector<std::vector<const Sample*>> batch(L_);
    std::vector<ParamVector> snapshot(L_), grad(L_);
    const double work = cost_.transfer_seconds();

    auto begin = [&](std::size_t l, double now) {
      batch[l] = feed_.stream_batch(l, L_, position[l], Ml_);
      position[l] += Ml_;
      snapshot[l] = learners_[l].model;
      q.push(load_ready(now) + compute_seconds(l), l, EventKind::ComputeDone);
    };
    for (std::size_t l = 0; l < L_; ++l) begin(l, 0.0);

    while (!q.empty()) {
      const Event ev = q.pop();
      const std::size_t l = ev.who;
      switch (ev.kind) {
        case EventKind::ComputeDone:
          grad[l] = problem_.gradient(snapshot[l], batch[l]);
          if (L_ == 1) {
            q.push(ev.time, l, EventKind::ExchangeDone);
          } else {
            nodes[l / cost_.learners_per_node].start(l, work, ev.time, q, gens);
          }
          break;
        case EventKind::TransferDone:
          if (ev.gen != gens[l]) break;
          nodes[l / cost_.learners_per_node].finish(l, ev.time, q, gens);
          q.push(ev.time + cost_.link_latency, l, EventKind::ExchangeDone);
          break;
        case EventKind::ExchangeDone: {
          const auto nb = L_ == 1 ? RingNeighbors{0, 0} : ring_neighbors(l, L_);
          auto res = ad_psgd_combine(learners_[nb.left].model, learners_[l].model, learners_[nb.right].model, nb.left,
                                     l, nb.right, grad[l], current_alpha());
          if (spec_.gossip_neighbors && L_ >= 3) {
            learners_[nb.left].model = res.neighbor_average;
            learners_[nb.right].model = res.neighbor_average;
          }
          learners_[l].model = std::move(res.self);
          note_batch(learners_[l], Ml_);
          if (account(Ml_, ev.time)) return;
          begin(l, ev.time);
          break;
        }
        case EventKind::PsDone: break;
      }
    }
  }

  // ---- hierarchical ring -------------------------------------------------

  void run_hring() {
    const std::size_t G = spec_.group_size;
    const std::size_t S = L_ / G;
    const std::size_t groups_per_node = std::max<std::size_t>(1, cost_.learners_per_node / G);
    EventQueue q;
    std::vector<std::uint64_t> gens(S, 0);
    std::vector<SharedInterface> nodes((S + groups_per_node - 1) / groups_per_node);
    std::vector<std::uint64_t> position(S, 0);
    std::vector<std::vector<const Sample*>> batch(S);
    std::vector<ParamVector> snapshot(S), grad(S);
    const double work = cost_.transfer_seconds();
    const double inner = cost_.intra_allreduce_seconds(G);

    auto begin = [&](std::size_t g, double now) {
      batch[g] = feed_.stream_batch(g, S, position[g], G * Ml_);
      position[g] += G * Ml_;
      snapshot[g] = learners_[g * G].model;
      double end = now;
      for (std::size_t m = 0; m < G; ++m) end = std::max(end, load_ready(now) + compute_seconds(g * G + m));
      q.push(end + inner, g, EventKind::ComputeDone);
    };
    for (std::size_t g = 0; g < S; ++g) begin(g, 0.0);

    while (!q.empty()) {
      const Event ev = q.pop();
      const std::size_t g = ev.who;
      switch (ev.kind) {
        case EventKind::ComputeDone: {
          std::vector<ParamVector> member_grads;
          member_grads.reserve(G);
          for (std::size_t m = 0; m < G; ++m) {
            const Batch slice(batch[g].data() + m * Ml_, Ml_);
            member_grads.push_back(problem_.gradient(snapshot[g], slice));
          }
          grad[g] = hring_group_gradient(member_grads);
          nodes[g / groups_per_node].start(g, work, ev.time, q, gens);
          break;
        }
        case EventKind::TransferDone:
          if (ev.gen != gens[g]) break;
          nodes[g / groups_per_node].finish(g, ev.time, q, gens);
          q.push(ev.time + cost_.link_latency, g, EventKind::ExchangeDone);
          break;
        case EventKind::ExchangeDone:
          hring_group_apply(learners_, G, g, grad[g], current_alpha(), Ml_, spec_.gossip_neighbors);
          if (account(G * Ml_, ev.time)) return;
          begin(g, ev.time);
          break;
        case EventKind::PsDone: break;
      }
    }
  }

  const StrategySpec& spec_;
  const Problem& problem_;
  const Dataset& ds_;
  const LrSchedule& schedule_;
  const CostModel& cost_;
  std::size_t epochs_;
  RunOptions opts_;
  std::uint64_t n_;
  std::size_t L_;
  std::size_t Ml_;
  DataFeed feed_;
  Rng jitter_rng_;
  std::vector<LearnerState> learners_;
  PsState ps_;
  RunResult result_;
  double storage_free_ = 0.0;
  double epoch_start_ = 0.0;
  std::uint64_t epoch_ = 0;
  std::uint64_t completed_ = 0;
};

}  // namespace sim

// Runs a strategy in virtual time under `cost`. A pure function of its inputs:
// repeated calls return identical results.
inline RunResult simulate_run(const StrategySpec& spec, const Problem& problem, const Dataset& dataset,
                              const LrSchedule& schedule, const CostModel& cost, std::size_t epochs,
                              std::uint64_t seed, const RunOptions& opts = {}) {
  validate_run(spec, dataset, schedule, epochs, opts);
  cost.validate();
  return sim::Simulation(spec, problem, dataset, schedule, cost, epochs, seed, opts).run();
}

}  // namespace psgd
