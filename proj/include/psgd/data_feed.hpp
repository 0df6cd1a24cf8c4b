#pragma once

#include <cstdint>
#include <vector>

#include "psgd/error.hpp"
#include "psgd/problems.hpp"
#include "psgd/rng.hpp"

namespace psgd {

// Deterministic batch assignment shared by both backends.
//
// Every pass over the training set uses a fresh seeded permutation. Synchronous
// round r of epoch e takes the global batch perm_e[r*M, (r+1)*M) and learner l
// gets its l-th M_l slice, so an L-learner round sees exactly the samples a
// single learner with batch M would. Asynchronous streams read the
// concatenated permutations starting at stream s's offset s*n/S and wrap
// back to the first pass if a fast stream outruns the materialized ones.
class DataFeed {
 public:
  // `passes` permutations are materialized up front, so the feed is read-only
  // (and thread-safe) afterwards.
  DataFeed(const Dataset& ds, std::uint64_t seed, std::size_t passes) : ds_(&ds) {
    if (ds.samples.empty()) throw ConfigError("data feed: empty training set");
    perms_.reserve(passes);
    for (std::size_t p = 0; p < passes; ++p) {
      Rng rng(derive_seed(seed, 0xFEED0000ULL + p));
      perms_.push_back(rng.permutation(ds.samples.size()));
    }
  }

  std::size_t size() const { return ds_->samples.size(); }

  // Learner l's slice of synchronous round r in epoch e.
  std::vector<const Sample*> sync_batch(std::size_t epoch, std::size_t round, std::size_t learner,
                                        std::size_t local_batch, std::size_t L) const {
    const auto& perm = pass(epoch);
    const std::size_t begin = (round * L + learner) * local_batch;
    if (begin + local_batch > perm.size()) throw ProtocolError("data feed: synchronous round past end of epoch");
    std::vector<const Sample*> out(local_batch);
    for (std::size_t i = 0; i < local_batch; ++i) out[i] = &ds_->samples[perm[begin + i]];
    return out;
  }

  // Samples [position, position + count) of stream s out of S streams.
  std::vector<const Sample*> stream_batch(std::size_t stream, std::size_t streams, std::uint64_t position,
                                          std::size_t count) const {
    const std::size_t n = size();
    const std::uint64_t start = static_cast<std::uint64_t>(stream) * n / streams;
    std::vector<const Sample*> out(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint64_t abs = start + position + i;
      out[i] = &ds_->samples[perms_[static_cast<std::size_t>(abs / n) % perms_.size()][abs % n]];
    }
    return out;
  }

 private:
  const std::vector<std::size_t>& pass(std::size_t p) const {
    if (p >= perms_.size()) throw ProtocolError(detail::concat("data feed: pass ", p, " was not materialized"));
    return perms_[p];
  }

  const Dataset* ds_;
  std::vector<std::vector<std::size_t>> perms_;
};

}  // namespace psgd
