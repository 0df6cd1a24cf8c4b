#pragma once

#include <algorithm>
#include <atomic>
#include <barrier>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include "psgd/data_feed.hpp"
#include "psgd/error.hpp"
#include "psgd/optimizer.hpp"
#include "psgd/problems.hpp"
#include "psgd/run_result.hpp"
#include "psgd/simulator.hpp"
#include "psgd/strategies.hpp"

namespace psgd {

namespace threaded {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// FNV-1a over the bit patterns of the model plus its version.
inline std::uint64_t checksum(const ParamVector& w, std::uint64_t version) {
  std::uint64_t h = 1469598103934665603ULL ^ version;
  for (double v : w.values()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFF;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

// A model guarded by its own mutex. Writers refresh the checksum; readers
// verify it, so an update that escaped the lock shows up as a torn read.
struct Cell {
  std::mutex m;
  ParamVector model;
  std::uint64_t version = 0;
  std::uint64_t sum = 0;

  void store(ParamVector w) {
    model = std::move(w);
    ++version;
    sum = checksum(model, version);
  }
  const ParamVector& load(std::size_t id) const {
    if (checksum(model, version) != sum) {
      throw ProtocolError(detail::concat("torn read on model cell ", id, " (version ", version, ")"));
    }
    return model;
  }
};

// Locks a set of cells in ascending id order (duplicates collapsed), which
// rules out lock-order cycles between neighbouring exchanges.
class OrderedLock {
 public:
  OrderedLock(std::vector<std::unique_ptr<Cell>>& cells, std::vector<std::size_t> ids) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (std::size_t id : ids) locks_.emplace_back(cells[id]->m);
  }

 private:
  std::vector<std::unique_lock<std::mutex>> locks_;
};

// Collects the first exception thrown by any worker.
class Failure {
 public:
  void capture() {
    std::lock_guard g(m_);
    if (!error_) error_ = std::current_exception();
    failed_.store(true);
  }
  bool failed() const { return failed_.load(); }
  void rethrow() const {
    if (error_) std::rethrow_exception(error_);
  }

 private:
  std::mutex m_;
  std::exception_ptr error_;
  std::atomic<bool> failed_{false};
};

class Runtime {
 public:
  Runtime(const StrategySpec& spec, const Problem& problem, const Dataset& ds, const LrSchedule& schedule,
          std::size_t epochs, std::uint64_t seed, const RunOptions& opts)
      : spec_(spec),
        problem_(problem),
        ds_(ds),
        schedule_(schedule),
        epochs_(epochs),
        opts_(opts),
        n_(ds.samples.size()),
        L_(spec.learners),
        Ml_(spec.local_batch()),
        feed_(ds, seed, epochs + 1),
        busy_(spec.learners, 0.0) {
    learners_ = make_learners(L_, problem.initial_point(seed));
    ps_.model = learners_.front().model;
  }

  RunResult run() {
    start_ = epoch_start_ = Clock::now();
    switch (spec_.kind) {
      case StrategyKind::SyncCentral:
      case StrategyKind::ScPsgd:
      case StrategyKind::SdPsgd: run_synchronous(); break;
      case StrategyKind::AsyncCentral: run_async_central(); break;
      case StrategyKind::AdPsgd: run_ad_psgd(); break;
      case StrategyKind::HRing: run_hring(); break;
    }
    failure_.rethrow();

    result_.local_batch = Ml_;
    result_.virtual_time = false;
    for (const auto& l : learners_) {
      result_.batches_per_learner.push_back(l.batches_done);
      result_.total_samples += l.samples_consumed;
    }
    result_.total_seconds = 0.0;
    for (double s : result_.epoch_seconds) result_.total_seconds += s;
    // One learner would have spent the summed gradient time of all workers.
    result_.baseline_seconds = 0.0;
    for (double b : busy_) result_.baseline_seconds += b;
    result_.speedup = result_.total_seconds > 0.0 ? result_.baseline_seconds / result_.total_seconds : 1.0;
    if (!(result_.speedup > 0.0)) result_.speedup = 1.0;
    result_.final_model = reference_model();
    return std::move(result_);
  }

 private:
  ParamVector timed_gradient(std::size_t worker, const ParamVector& w, Batch batch) {
    const auto t0 = Clock::now();
    ParamVector g = problem_.gradient(w, batch);
    busy_[worker] += seconds_since(t0);
    return g;
  }

  ParamVector reference_model() const {
    if (spec_.kind == StrategyKind::SyncCentral || spec_.kind == StrategyKind::AsyncCentral) return ps_.model;
    std::vector<ParamVector> models;
    models.reserve(L_);
    for (const auto& l : learners_) models.push_back(l.model);
    return mean_of(models);
  }

  void close_epoch(const ParamVector& reference) {
    const auto now = Clock::now();
    result_.epoch_seconds.push_back(std::chrono::duration<double>(now - epoch_start_).count());
    result_.heldout_loss.push_back(problem_.loss(reference, std::span<const Sample>(ds_.heldout)));
    result_.epoch_lr.push_back(lr_at(schedule_, epoch_));
    epoch_start_ = now;
    ++epoch_;
  }

  double current_alpha() const { return lr_at(schedule_, std::min<std::uint64_t>(completed_ / n_, epochs_ - 1)); }

  // ---- synchronous: one barrier per round, reduction on a single thread --

  void run_synchronous() {
    const std::size_t rounds = n_ / spec_.global_batch;
    std::vector<ParamVector> grads(L_);
    std::size_t e = 0, r = 0;
    bool stop = false;

    auto reduce = [&]() noexcept {
      try {
        if (failure_.failed()) {
          stop = true;
          return;
        }
        const double alpha = lr_at(schedule_, e);
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
        if (++r == rounds) {
          close_epoch(reference_model());
          r = 0;
          if (++e == epochs_) stop = true;
        }
      } catch (...) {
        failure_.capture();
        stop = true;
      }
    };
    std::barrier sync(static_cast<std::ptrdiff_t>(L_), reduce);

    auto worker = [&](std::size_t l) {
      while (true) {
        try {
          if (!failure_.failed()) {
            const auto batch = feed_.sync_batch(e, r, l, Ml_, L_);
            const Batch view(batch);
            if (view.size() != Ml_) throw ProtocolError("synchronous batch has the wrong size");
            grads[l] = timed_gradient(l, learners_[l].model, view);
          }
        } catch (...) {
          failure_.capture();
        }
        sync.arrive_and_wait();
        if (stop) return;
      }
    };
    launch(L_, worker);
  }

  // ---- asynchronous centralized: the PS is one serialized cell ------------

  void run_async_central() {
    std::mutex ps_mutex;
    bool done = false;

    auto worker = [&](std::size_t l) {
      try {
        LearnerState& me = learners_[l];
        {
          std::lock_guard g(ps_mutex);
          pull(ps_, me);
        }
        std::uint64_t position = 0;
        while (!failure_.failed()) {
          std::this_thread::yield();
          const auto batch = feed_.stream_batch(l, L_, position, Ml_);
          position += Ml_;
          const ParamVector grad = timed_gradient(l, me.model, batch);
          std::lock_guard g(ps_mutex);
          if (done) return;
          async_central_push(ps_, me, grad, current_alpha(), result_.staleness, spec_.staleness_bound);
          pull(ps_, me);
          note_batch(me, Ml_);
          completed_ += Ml_;
          while (epoch_ < epochs_ && completed_ >= (epoch_ + 1) * n_) close_epoch(ps_.model);
          if (epoch_ >= epochs_) {
            done = true;
            return;
          }
        }
      } catch (...) {
        failure_.capture();
      }
    };
    launch(L_, worker);
  }

  // ---- AD-PSGD: per-learner cells, three-way lock in id order ------------

  void run_ad_psgd() {
    std::vector<std::unique_ptr<Cell>> cells;
    for (std::size_t l = 0; l < L_; ++l) {
      cells.push_back(std::make_unique<Cell>());
      cells.back()->store(learners_[l].model);
    }
    std::mutex book;
    std::atomic<bool> done{false};

    auto mean_of_cells = [&]() {
      std::vector<std::size_t> all(L_);
      for (std::size_t l = 0; l < L_; ++l) all[l] = l;
      OrderedLock lock(cells, all);
      std::vector<ParamVector> models;
      for (std::size_t l = 0; l < L_; ++l) models.push_back(cells[l]->load(l));
      return mean_of(models);
    };

    auto worker = [&](std::size_t l) {
      try {
        const auto nb = L_ == 1 ? RingNeighbors{0, 0} : ring_neighbors(l, L_);
        std::uint64_t position = 0;
        while (!done.load() && !failure_.failed()) {
          ParamVector snapshot;
          {
            std::lock_guard g(cells[l]->m);
            snapshot = cells[l]->load(l);
          }
          const auto batch = feed_.stream_batch(l, L_, position, Ml_);
          position += Ml_;
          const ParamVector grad = timed_gradient(l, snapshot, batch);
          double alpha;
          {
            std::lock_guard g(book);
            if (done.load()) return;
            alpha = current_alpha();
          }
          {
            OrderedLock lock(cells, {nb.left, l, nb.right});
            auto res = ad_psgd_combine(cells[nb.left]->load(nb.left), cells[l]->load(l),
                                       cells[nb.right]->load(nb.right), nb.left, l, nb.right, grad, alpha);
            if (spec_.gossip_neighbors && L_ >= 3) {
              cells[nb.left]->store(res.neighbor_average);
              cells[nb.right]->store(res.neighbor_average);
            }
            cells[l]->store(std::move(res.self));
          }
          {
            std::lock_guard g(book);
            if (done.load()) return;
            note_batch(learners_[l], Ml_);
            completed_ += Ml_;
            while (epoch_ < epochs_ && completed_ >= (epoch_ + 1) * n_) close_epoch(mean_of_cells());
            if (epoch_ >= epochs_) done.store(true);
          }
          // Oversubscribed cores would otherwise let one learner run far ahead
          // of neighbours it keeps averaging with.
          std::this_thread::yield();
        }
      } catch (...) {
        failure_.capture();
        done.store(true);
      }
    };
    launch(L_, worker);
    for (std::size_t l = 0; l < L_; ++l) learners_[l].model = cells[l]->model;
  }

  // ---- H-ring: group barrier inside, AD exchange between groups ----------

  void run_hring() {
    const std::size_t G = spec_.group_size;
    const std::size_t S = L_ / G;
    std::vector<std::unique_ptr<Cell>> cells;
    for (std::size_t g = 0; g < S; ++g) {
      cells.push_back(std::make_unique<Cell>());
      cells.back()->store(learners_[g * G].model);
    }
    std::mutex book;
    std::atomic<bool> done{false};

    struct Group {
      std::vector<ParamVector> grads;
      ParamVector snapshot;
      std::uint64_t position = 0;
      std::vector<const Sample*> batch;
      bool stop = false;
    };
    std::vector<Group> groups(S);
    for (auto& grp : groups) grp.grads.resize(G);

    auto mean_of_cells = [&]() {
      std::vector<std::size_t> all(S);
      for (std::size_t g = 0; g < S; ++g) all[g] = g;
      OrderedLock lock(cells, all);
      std::vector<ParamVector> models;
      for (std::size_t g = 0; g < S; ++g) models.push_back(cells[g]->load(g));
      return mean_of(models);
    };

    // Loads the next group batch and the group's current model.
    auto prepare = [&](std::size_t g) {
      Group& grp = groups[g];
      grp.batch = feed_.stream_batch(g, S, grp.position, G * Ml_);
      grp.position += G * Ml_;
      std::lock_guard lk(cells[g]->m);
      grp.snapshot = cells[g]->load(g);
    };

    auto exchange = [&](std::size_t g) {
      Group& grp = groups[g];
      if (failure_.failed() || done.load()) {
        grp.stop = true;
        return;
      }
      const ParamVector group_grad = hring_group_gradient(grp.grads);
      double alpha;
      {
        std::lock_guard lk(book);
        if (done.load()) {
          grp.stop = true;
          return;
        }
        alpha = current_alpha();
      }
      const auto nb = ring_neighbors(g, S);
      {
        OrderedLock lock(cells, {nb.left, g, nb.right});
        auto res = ad_psgd_combine(cells[nb.left]->load(nb.left), cells[g]->load(g), cells[nb.right]->load(nb.right),
                                   nb.left, g, nb.right, group_grad, alpha);
        if (spec_.gossip_neighbors) {
          cells[nb.left]->store(res.neighbor_average);
          cells[nb.right]->store(res.neighbor_average);
        }
        cells[g]->store(std::move(res.self));
      }
      {
        std::lock_guard lk(book);
        if (done.load()) {
          grp.stop = true;
          return;
        }
        for (std::size_t m = 0; m < G; ++m) note_batch(learners_[g * G + m], Ml_);
        completed_ += G * Ml_;
        while (epoch_ < epochs_ && completed_ >= (epoch_ + 1) * n_) close_epoch(mean_of_cells());
        if (epoch_ >= epochs_) done.store(true);
      }
      if (done.load()) {
        grp.stop = true;
        return;
      }
      prepare(g);
    };

    struct Completion {
      Runtime* self;
      std::function<void(std::size_t)>* step;
      std::size_t g;
      void operator()() noexcept {
        try {
          (*step)(g);
        } catch (...) {
          self->failure_.capture();
        }
      }
    };
    std::function<void(std::size_t)> step = [&](std::size_t g) {
      try {
        exchange(g);
      } catch (...) {
        done.store(true);
        groups[g].stop = true;
        throw;
      }
    };
    std::vector<std::unique_ptr<std::barrier<Completion>>> barriers;
    for (std::size_t g = 0; g < S; ++g) {
      prepare(g);
      barriers.push_back(std::make_unique<std::barrier<Completion>>(static_cast<std::ptrdiff_t>(G),
                                                                    Completion{this, &step, g}));
    }

    auto worker = [&](std::size_t l) {
      const std::size_t g = l / G, m = l % G;
      Group& grp = groups[g];
      while (true) {
        try {
          if (!failure_.failed()) {
            const Batch slice(grp.batch.data() + m * Ml_, Ml_);
            grp.grads[m] = timed_gradient(l, grp.snapshot, slice);
          }
        } catch (...) {
          failure_.capture();
        }
        barriers[g]->arrive_and_wait();
        if (grp.stop) return;
      }
    };
    launch(L_, worker);
    for (std::size_t g = 0; g < S; ++g) {
      for (std::size_t m = 0; m < G; ++m) learners_[g * G + m].model = cells[g]->model;
    }
  }

  template <class F>
  void launch(std::size_t count, F& body) {
    std::vector<std::thread> threads;
    threads.reserve(count);
    for (std::size_t i = 0; i < count; ++i) threads.emplace_back(body, i);
    for (auto& t : threads) t.join();
  }

  const StrategySpec& spec_;
  const Problem& problem_;
  const Dataset& ds_;
  const LrSchedule& schedule_;
  std::size_t epochs_;
  RunOptions opts_;
  std::uint64_t n_;
  std::size_t L_;
  std::size_t Ml_;
  DataFeed feed_;
  std::vector<double> busy_;  // per-worker gradient seconds
  std::vector<LearnerState> learners_;
  PsState ps_;
  RunResult result_;
  Failure failure_;
  Clock::time_point start_, epoch_start_;
  std::uint64_t epoch_ = 0;
  std::uint64_t completed_ = 0;
};

}  // namespace threaded

// Runs a strategy on L real threads. Synchronous strategies reduce in learner
// order on one thread and so reproduce simulate_run's iterates exactly;
// asynchronous interleavings depend on the OS scheduler.
inline RunResult threaded_run(const StrategySpec& spec, const Problem& problem, const Dataset& dataset,
                              const LrSchedule& schedule, std::size_t epochs, std::uint64_t seed,
                              const RunOptions& opts = {}) {
  validate_run(spec, dataset, schedule, epochs, opts);
  return threaded::Runtime(spec, problem, dataset, schedule, epochs, seed, opts).run();
}

}  // namespace psgd
