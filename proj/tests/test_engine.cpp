#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "psgd/data_feed.hpp"
#include "psgd/simulator.hpp"
#include "psgd/threaded.hpp"

using namespace psgd;

namespace {

struct Workload {
  Dataset ds;
  Problem problem;
};

Workload logistic(std::size_t n = 1024) {
  return {generate(ProblemKind::LogisticRegression, 11, n, 256, 6, 2), Problem::logistic(6)};
}

Workload mlp(std::size_t n = 1024) {
  return {generate(ProblemKind::MlpSoftmax, 12, n, 256, 6, 3), Problem::mlp({6, 8, 3})};
}

StrategySpec spec(StrategyKind k, std::size_t L, std::size_t M, std::size_t G = 1) {
  StrategySpec s;
  s.kind = k;
  s.learners = L;
  s.global_batch = M;
  s.group_size = G;
  return s;
}

std::uint64_t batches_times_size(const RunResult& r) {
  return std::accumulate(r.batches_per_learner.begin(), r.batches_per_learner.end(), std::uint64_t{0}) *
         r.local_batch;
}

}  // namespace

TEST(Simulate, SingleLearnerBaseline) {
  const auto w = logistic();
  CostModel c;
  const auto r = simulate_run(spec(StrategyKind::SyncCentral, 1, 32), w.problem, w.ds, LrSchedule::baseline(), c, 3, 1);
  EXPECT_NEAR(r.speedup, 1.0, 1e-12);
  ASSERT_EQ(r.epoch_seconds.size(), 3u);
  for (double s : r.epoch_seconds) EXPECT_NEAR(s, 1024 * c.compute_seconds_per_sample, 1e-9);
  EXPECT_EQ(r.heldout_loss.size(), 3u);
  EXPECT_EQ(r.epoch_lr.size(), 3u);
  EXPECT_TRUE(r.virtual_time);
}

TEST(Simulate, ZeroCommLinearSpeedup) {
  const auto w = logistic();
  for (auto k : {StrategyKind::SyncCentral, StrategyKind::ScPsgd, StrategyKind::SdPsgd}) {
    const auto r = simulate_run(spec(k, 16, 256), w.problem, w.ds, LrSchedule::baseline(), CostModel::zero_comm(), 2, 1);
    EXPECT_NEAR(r.speedup, 16.0, 1e-9) << to_string(k);
  }
}

TEST(Simulate, StragglerSlowsSynchronousRuns) {
  const auto w = logistic();
  double last = 0.0;
  for (double slow : {1.0, 2.0, 10.0, 100.0}) {
    CostModel c = CostModel::p100_nccl();
    c.slowdown = {slow};
    const auto r = simulate_run(spec(StrategyKind::SyncCentral, 8, 256), w.problem, w.ds, LrSchedule::baseline(), c, 1, 1);
    EXPECT_GT(r.total_seconds, last) << slow;
    last = r.total_seconds;
  }
}

TEST(Simulate, AdPsgdToleratesStraggler) {
  const auto w = logistic(4096);
  CostModel c = CostModel::p100_nccl();
  const auto base = simulate_run(spec(StrategyKind::AdPsgd, 16, 2560), w.problem, w.ds, LrSchedule::warmup(), c, 1, 1);
  c.slowdown = {100.0};
  const auto slow = simulate_run(spec(StrategyKind::AdPsgd, 16, 2560), w.problem, w.ds, LrSchedule::warmup(), c, 1, 1);
  EXPECT_LT(slow.epoch_seconds[0] / base.epoch_seconds[0], 1.10);
}

TEST(Simulate, SampleConservation) {
  const auto w = logistic();
  const std::vector<StrategySpec> specs{spec(StrategyKind::SyncCentral, 4, 64), spec(StrategyKind::ScPsgd, 4, 64),
                                        spec(StrategyKind::SdPsgd, 4, 64),      spec(StrategyKind::AsyncCentral, 4, 64),
                                        spec(StrategyKind::AdPsgd, 4, 64),      spec(StrategyKind::HRing, 6, 48, 2)};
  for (const auto& s : specs) {
    const auto r = simulate_run(s, w.problem, w.ds, LrSchedule::baseline(), CostModel::p100_nccl(), 3, 2);
    EXPECT_EQ(r.total_samples, batches_times_size(r)) << to_string(s.kind);
    EXPECT_GE(r.total_samples, 3u * 1024u) << to_string(s.kind);
    EXPECT_LT(r.total_samples, 3u * 1024u + s.global_batch) << to_string(s.kind);
    if (is_synchronous(s.kind)) {
      EXPECT_EQ(r.total_samples, 3u * 1024u);
      for (auto b : r.batches_per_learner) EXPECT_EQ(b, r.batches_per_learner.front());
    }
  }
}

TEST(Simulate, Deterministic) {
  const auto w = mlp();
  CostModel c = CostModel::p100_nccl();
  c.slowdown = {3.0, 1.5};
  for (auto k : {StrategyKind::AsyncCentral, StrategyKind::AdPsgd, StrategyKind::SdPsgd}) {
    const auto a = simulate_run(spec(k, 8, 128), w.problem, w.ds, LrSchedule::warmup(), c, 2, 7);
    const auto b = simulate_run(spec(k, 8, 128), w.problem, w.ds, LrSchedule::warmup(), c, 2, 7);
    EXPECT_EQ(a.epoch_seconds, b.epoch_seconds);
    EXPECT_EQ(a.heldout_loss, b.heldout_loss);
    EXPECT_EQ(a.final_model, b.final_model);
    EXPECT_EQ(a.staleness, b.staleness);
  }
}

// Randomized configurations never beat L or the Amdahl bound.
TEST(Simulate, SpeedupBounds) {
  const auto w = logistic(960);
  Rng rng(2024);
  const StrategyKind kinds[] = {StrategyKind::SyncCentral, StrategyKind::AsyncCentral, StrategyKind::ScPsgd,
                                StrategyKind::SdPsgd,      StrategyKind::AdPsgd,       StrategyKind::HRing};
  const std::size_t Ls[] = {1, 3, 4, 6, 8, 12};
  int ran = 0;
  for (int t = 0; t < 50; ++t) {
    const auto k = kinds[rng.below(6)];
    std::size_t L = Ls[rng.below(6)];
    std::size_t G = 1;
    if (k == StrategyKind::HRing) {
      L = 12;
      G = rng.below(2) ? 2 : 4;
    }
    if ((k == StrategyKind::SdPsgd || k == StrategyKind::AdPsgd) && L == 1) L = 3;
    const std::size_t M = L * 20 * (1 + rng.below(2));
    if (is_synchronous(k) && 960 % M != 0) continue;
    CostModel c = CostModel::p100_nccl();
    c.compute_jitter = 0.3 * rng.uniform();
    c.model_bytes = 1e6 * (1 + rng.below(200));
    c.learners_per_node = 1 + rng.below(4);
    c.loader_overlap = rng.below(2) == 0;
    c.load_seconds_per_sample = c.compute_seconds_per_sample * 0.05 * rng.uniform();
    if (rng.below(2)) c.slowdown = {1.0 + 5.0 * rng.uniform()};
    const auto r = simulate_run(spec(k, L, M, G), w.problem, w.ds, LrSchedule::baseline(), c, 1, t);
    EXPECT_LE(r.speedup, double(L) * (1 + 1e-9)) << t << " " << to_string(k) << " L=" << L;
    EXPECT_LE(r.speedup, amdahl_bound_for(c) * (1 + 1e-9)) << t << " " << to_string(k) << " L=" << L;
    ++ran;
  }
  EXPECT_GE(ran, 30);
}

TEST(Simulate, RejectsBadRuns) {
  const auto w = logistic(1000);
  const CostModel c;
  EXPECT_THROW(simulate_run(spec(StrategyKind::SyncCentral, 4, 64), w.problem, w.ds, LrSchedule::baseline(), c, 1, 1),
               ConfigError);
  EXPECT_THROW(simulate_run(spec(StrategyKind::AdPsgd, 2, 40), w.problem, w.ds, LrSchedule::baseline(), c, 1, 1),
               ConfigError);
  EXPECT_THROW(simulate_run(spec(StrategyKind::AdPsgd, 4, 40), w.problem, w.ds, LrSchedule::baseline(), c, 0, 1),
               ConfigError);
  RunOptions o;
  o.mixing = ring_matrix(4);
  EXPECT_THROW(simulate_run(spec(StrategyKind::AdPsgd, 4, 40), w.problem, w.ds, LrSchedule::baseline(), c, 1, 1, o),
               ConfigError);
  o.mixing = ring_matrix(5);
  EXPECT_THROW(simulate_run(spec(StrategyKind::SdPsgd, 4, 40), w.problem, w.ds, LrSchedule::baseline(), c, 1, 1, o),
               ConfigError);
}

TEST(Simulate, CustomRingMatchesBuiltIn) {
  const auto w = logistic();
  RunOptions o;
  o.mixing = ring_matrix(4);
  const auto custom = simulate_run(spec(StrategyKind::SdPsgd, 4, 64), w.problem, w.ds, LrSchedule::baseline(),
                                   CostModel::p100_nccl(), 2, 3, o);
  const auto ring = simulate_run(spec(StrategyKind::SdPsgd, 4, 64), w.problem, w.ds, LrSchedule::baseline(),
                                 CostModel::p100_nccl(), 2, 3);
  EXPECT_EQ(custom.final_model, ring.final_model);
  EXPECT_EQ(custom.epoch_seconds, ring.epoch_seconds);

  // a different matrix changes the iterates
  o.mixing = uniform_matrix(4);
  const auto uniform = simulate_run(spec(StrategyKind::SdPsgd, 4, 64), w.problem, w.ds, LrSchedule::baseline(),
                                    CostModel::p100_nccl(), 2, 3, o);
  EXPECT_NE(uniform.final_model, ring.final_model);
}

TEST(Threaded, SynchronousMatchesSimulation) {
  const auto w = mlp();
  for (auto k : {StrategyKind::SyncCentral, StrategyKind::ScPsgd, StrategyKind::SdPsgd}) {
    RunOptions o;
    o.record_trajectory = true;
    const auto s = spec(k, 4, 64);
    const auto sim = simulate_run(s, w.problem, w.ds, LrSchedule::warmup(), CostModel::zero_comm(), 2, 5, o);
    const auto thr = threaded_run(s, w.problem, w.ds, LrSchedule::warmup(), 2, 5, o);
    ASSERT_EQ(sim.trajectory.size(), thr.trajectory.size());
    for (std::size_t i = 0; i < sim.trajectory.size(); ++i) {
      EXPECT_LT(l2_distance(sim.trajectory[i], thr.trajectory[i]), 1e-9) << to_string(k) << " round " << i;
    }
    EXPECT_FALSE(thr.virtual_time);
    EXPECT_EQ(thr.total_samples, 2u * 1024u);
  }
}

TEST(Threaded, SingleLearnerIsSerialSgd) {
  const auto w = logistic();
  const auto sched = LrSchedule::baseline();
  const std::size_t epochs = 2, M = 32;
  const auto r = threaded_run(spec(StrategyKind::SyncCentral, 1, M), w.problem, w.ds, sched, epochs, 9);
  DataFeed feed(w.ds, 9, epochs + 1);
  SgdState s{w.problem.initial_point(9)};
  for (std::size_t e = 0; e < epochs; ++e)
    for (std::size_t round = 0; round < 1024 / M; ++round) {
      const auto b = feed.sync_batch(e, round, 0, M, 1);
      s = sgd_step(s, w.problem.gradient(s.w, b), lr_at(sched, e));
    }
  EXPECT_EQ(r.final_model, s.w);
}

// Thread interleaving is not reproducible, but the end point should match the
// simulated run of the same configuration closely.
TEST(Threaded, AsyncStrategiesConverge) {
  const auto w = logistic(4096);
  const auto sched = LrSchedule::baseline();
  for (auto s : {spec(StrategyKind::AdPsgd, 4, 128), spec(StrategyKind::AsyncCentral, 4, 128),
                 spec(StrategyKind::HRing, 6, 96, 2)}) {
    const auto ref = simulate_run(s, w.problem, w.ds, sched, CostModel{}, 4, 3);
    const auto r = threaded_run(s, w.problem, w.ds, sched, 4, 3);
    EXPECT_EQ(r.total_samples, batches_times_size(r));
    EXPECT_GE(r.total_samples, 4u * 4096u);
    const double rel = (r.heldout_loss.back() - ref.heldout_loss.back()) / ref.heldout_loss.back();
    EXPECT_LT(std::abs(rel), 0.10) << to_string(s.kind) << " " << r.heldout_loss.back() << " vs "
                                   << ref.heldout_loss.back();
  }
}

TEST(Threaded, AdPsgdMatchesSimulatedLoss) {
  const auto w = logistic(4096);
  const auto s = spec(StrategyKind::AdPsgd, 4, 128);
  const auto sim = simulate_run(s, w.problem, w.ds, LrSchedule::baseline(), CostModel{}, 4, 3);
  const auto thr = threaded_run(s, w.problem, w.ds, LrSchedule::baseline(), 4, 3);
  EXPECT_LT(std::abs(thr.heldout_loss.back() / sim.heldout_loss.back() - 1.0), 0.02);
}

TEST(MeasureSpeedup, Examples) {
  RunResult a, b;
  a.total_samples = b.total_samples = 100;
  a.total_seconds = 2.0;
  b.total_seconds = 10.0;
  EXPECT_DOUBLE_EQ(measure_speedup(a, b), 5.0);
  b.total_samples = 99;
  EXPECT_THROW(measure_speedup(a, b), ConfigError);
  b.total_samples = 100;
  a.total_seconds = 0.0;
  EXPECT_THROW(measure_speedup(a, b), ConfigError);
}

TEST(Amdahl, Examples) {
  EXPECT_EQ(amdahl_bound(0.0), 1.0);
  EXPECT_EQ(amdahl_bound(0.5), 2.0);
  EXPECT_NEAR(amdahl_bound(0.96), 25.0, 1e-12);
  EXPECT_THROW(amdahl_bound(1.0), ConfigError);
  EXPECT_THROW(amdahl_bound(-0.1), ConfigError);
  CostModel c;
  EXPECT_TRUE(std::isinf(amdahl_bound_for(c)));
  c.loader_overlap = false;
  c.load_seconds_per_sample = c.compute_seconds_per_sample / 24.0;
  EXPECT_NEAR(amdahl_bound_for(c), 25.0, 1e-9);
}

TEST(Simulate, SerialLoadingCapsSpeedup) {
  const auto w = logistic();
  CostModel c = CostModel::zero_comm();
  c.loader_overlap = false;
  c.load_seconds_per_sample = c.compute_seconds_per_sample / 24.0;
  const auto r = simulate_run(spec(StrategyKind::ScPsgd, 32, 1024), w.problem, w.ds, LrSchedule::baseline(), c, 1, 1);
  EXPECT_LE(r.speedup, 25.0);
  EXPECT_GT(r.speedup, 10.0);
}
