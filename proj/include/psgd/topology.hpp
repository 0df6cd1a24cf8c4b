#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "psgd/error.hpp"
#include "psgd/tensor.hpp"

namespace psgd {

// Dense L x L mixing matrix. Column j holds the weights learner j applies to
// every learner's model: new_j = sum_i model_i * t_ij.
class MixingMatrix {
 public:
  MixingMatrix() = default;

  // Row-major entries; must be square. Stochasticity is checked separately by
  // validate_doubly_stochastic so that invalid matrices can still be reported on.
  explicit MixingMatrix(std::vector<std::vector<double>> rows) {
    const std::size_t n = rows.size();
    if (n == 0) throw TopologyError("mixing matrix must be non-empty");
    for (const auto& r : rows) {
      if (r.size() != n) {
        throw TopologyError(detail::concat("mixing matrix is not square (", n, " rows, a row of ", r.size(), ")"));
      }
    }
    size_ = n;
    entries_.reserve(n * n);
    for (const auto& r : rows) entries_.insert(entries_.end(), r.begin(), r.end());
  }

  std::size_t size() const noexcept { return size_; }
  double operator()(std::size_t i, std::size_t j) const { return entries_[i * size_ + j]; }

  std::vector<std::vector<double>> rows() const {
    std::vector<std::vector<double>> out(size_);
    for (std::size_t i = 0; i < size_; ++i) out[i].assign(entries_.begin() + i * size_, entries_.begin() + (i + 1) * size_);
    return out;
  }

  MixingMatrix operator*(const MixingMatrix& o) const {
    if (o.size_ != size_) throw TopologyError("mixing matrix product: size mismatch");
    std::vector<std::vector<double>> r(size_, std::vector<double>(size_, 0.0));
    for (std::size_t i = 0; i < size_; ++i)
      for (std::size_t k = 0; k < size_; ++k)
        for (std::size_t j = 0; j < size_; ++j) r[i][j] += (*this)(i, k) * o(k, j);
    return MixingMatrix(std::move(r));
  }

  static MixingMatrix identity(std::size_t n) {
    std::vector<std::vector<double>> r(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) r[i][i] = 1.0;
    return MixingMatrix(std::move(r));
  }

  bool operator==(const MixingMatrix&) const = default;

 private:
  std::size_t size_ = 0;
  std::vector<double> entries_;
};

// Each learner averages itself with its immediate left and right neighbours.
inline MixingMatrix ring_matrix(std::size_t L) {
  if (L < 3) throw TopologyError("ring requires L >= 3 for distinct left/right neighbors");
  std::vector<std::vector<double>> r(L, std::vector<double>(L, 0.0));
  for (std::size_t i = 0; i < L; ++i) {
    r[i][(i + L - 1) % L] = 1.0 / 3.0;
    r[i][i] = 1.0 / 3.0;
    r[i][(i + 1) % L] = 1.0 / 3.0;
  }
  return MixingMatrix(std::move(r));
}

inline MixingMatrix uniform_matrix(std::size_t L) {
  if (L < 1) throw TopologyError("uniform matrix requires L >= 1");
  return MixingMatrix(std::vector<std::vector<double>>(L, std::vector<double>(L, 1.0 / static_cast<double>(L))));
}

struct StochasticityReport {
  double max_row_deviation = 0.0;
  double max_column_deviation = 0.0;
  std::size_t worst_row = 0;
  std::size_t worst_column = 0;
  std::size_t entries_out_of_range = 0;
  double tolerance = 1e-12;

  bool passed() const {
    return max_row_deviation <= tolerance && max_column_deviation <= tolerance && entries_out_of_range == 0;
  }

  std::string describe() const {
    return detail::concat(passed() ? "doubly stochastic" : "NOT doubly stochastic",
                          ": max row-sum deviation ", max_row_deviation, " (row ", worst_row, ")",
                          ", max column-sum deviation ", max_column_deviation, " (column ", worst_column, ")",
                          ", entries outside [0,1]: ", entries_out_of_range);
  }
};

inline StochasticityReport validate_doubly_stochastic(const MixingMatrix& m, double tolerance = 1e-12) {
  StochasticityReport rep;
  rep.tolerance = tolerance;
  const std::size_t n = m.size();
  if (n == 0) throw TopologyError("validate_doubly_stochastic: empty matrix");
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row += m(i, j);
      col += m(j, i);
      const double v = m(i, j);
      if (!(v >= -tolerance && v <= 1.0 + tolerance)) ++rep.entries_out_of_range;
    }
    if (std::abs(row - 1.0) > rep.max_row_deviation) {
      rep.max_row_deviation = std::abs(row - 1.0);
      rep.worst_row = i;
    }
    if (std::abs(col - 1.0) > rep.max_column_deviation) {
      rep.max_column_deviation = std::abs(col - 1.0);
      rep.worst_column = i;
    }
  }
  return rep;
}

// new_j = sum_i models[i] * t_ij, summed in ascending i.
inline std::vector<ParamVector> apply_mixing(std::span<const ParamVector> models, const MixingMatrix& m) {
  const std::size_t L = m.size();
  if (models.size() != L) {
    throw DimensionError(detail::concat("apply_mixing: ", models.size(), " models for a ", L, "x", L, " matrix"));
  }
  const std::size_t d = models.front().dim();
  for (const auto& w : models) {
    if (w.dim() != d) throw DimensionError("apply_mixing: models have unequal dimensions");
  }
  std::vector<ParamVector> out;
  out.reserve(L);
  for (std::size_t j = 0; j < L; ++j) {
    ParamBuilder acc(d);
    for (std::size_t i = 0; i < L; ++i) {
      const double t = m(i, j);
      if (t == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) acc[k] += t * models[i][k];
    }
    out.push_back(std::move(acc).finish("apply_mixing"));
  }
  return out;
}

// Largest distance from any model to the mean of all models.
inline double consensus_distance(std::span<const ParamVector> models) {
  const ParamVector mean = mean_of(models);
  double worst = 0.0;
  for (const auto& w : models) worst = std::max(worst, l2_distance(w, mean));
  return worst;
}

// Second-largest eigenvalue modulus of the symmetric ring matrix.
inline double ring_lambda2(std::size_t L) {
  double best = 0.0;
  for (std::size_t k = 1; k < L; ++k) {
    const double lam = (1.0 + 2.0 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(L))) / 3.0;
    best = std::max(best, std::abs(lam));
  }
  return best;
}

}  // namespace psgd
