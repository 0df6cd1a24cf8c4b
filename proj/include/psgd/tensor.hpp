#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "psgd/error.hpp"

namespace psgd {

// Dense vector of model parameters or gradients. The dimension is fixed at
// construction; every public operation rejects results containing NaN or Inf.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  ParamVector(std::initializer_list<double> values) : values_(values) { check_finite("construction"); }
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) { check_finite("construction"); }

  std::size_t dim() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const noexcept { return values_; }
  const double* data() const noexcept { return values_.data(); }

  bool operator==(const ParamVector&) const = default;

  void check_finite(const char* where) const {
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i])) {
        throw NumericError(detail::concat("non-finite value at index ", i, " after ", where));
      }
    }
  }

 private:
  // Raw construction for library kernels that validate their own output.
  struct Unchecked {};
  ParamVector(Unchecked, std::vector<double> values) : values_(std::move(values)) {}

  std::vector<double> values_;

  friend class ParamBuilder;
};

// Mutable staging buffer used by kernels to assemble a ParamVector; finish()
// transfers ownership and validates finiteness exactly once.
class ParamBuilder {
 public:
  explicit ParamBuilder(std::size_t dim) : values_(dim, 0.0) {}
  explicit ParamBuilder(const ParamVector& from) : values_(from.values_) {}

  std::size_t dim() const noexcept { return values_.size(); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<double> values() noexcept { return values_; }

  ParamVector finish(const char* where) && {
    ParamVector out(ParamVector::Unchecked{}, std::move(values_));
    out.check_finite(where);
    return out;
  }

 private:
  std::vector<double> values_;
};

inline void require_same_dim(const ParamVector& x, const ParamVector& y, const char* op) {
  if (x.dim() != y.dim()) {
    throw DimensionError(detail::concat(op, ": dimension mismatch (", x.dim(), " vs ", y.dim(), ")"));
  }
}

// y + alpha * x
inline ParamVector axpy(double alpha, const ParamVector& x, const ParamVector& y) {
  require_same_dim(x, y, "axpy");
  if (!std::isfinite(alpha)) throw NumericError("axpy: non-finite scalar");
  ParamBuilder out(y.dim());
  for (std::size_t i = 0; i < y.dim(); ++i) out[i] = y[i] + alpha * x[i];
  return std::move(out).finish("axpy");
}

inline ParamVector scale(double alpha, const ParamVector& x) {
  if (!std::isfinite(alpha)) throw NumericError("scale: non-finite scalar");
  ParamBuilder out(x.dim());
  for (std::size_t i = 0; i < x.dim(); ++i) out[i] = alpha * x[i];
  return std::move(out).finish("scale");
}

// Elementwise mean, accumulated as a running mean in list order (ascending
// learner index) so results are bit-reproducible and the mean of identical
// vectors is that vector exactly.
inline ParamVector mean_of(std::span<const ParamVector> vectors) {
  if (vectors.empty()) throw DimensionError("mean_of: empty list");
  const std::size_t d = vectors.front().dim();
  ParamBuilder mean(vectors.front());
  for (std::size_t n = 1; n < vectors.size(); ++n) {
    const auto& v = vectors[n];
    if (v.dim() != d) {
      throw DimensionError(detail::concat("mean_of: dimension mismatch (", d, " vs ", v.dim(), ")"));
    }
    const double inv = 1.0 / static_cast<double>(n + 1);
    for (std::size_t i = 0; i < d; ++i) mean[i] += (v[i] - mean[i]) * inv;
  }
  return std::move(mean).finish("mean_of");
}

inline ParamVector mean_of(std::initializer_list<ParamVector> vectors) {
  return mean_of(std::span<const ParamVector>(vectors.begin(), vectors.size()));
}

inline double dot(const ParamVector& x, const ParamVector& y) {
  require_same_dim(x, y, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i) s += x[i] * y[i];
  return s;
}

inline double l2_norm(const ParamVector& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i) s += x[i] * x[i];
  return std::sqrt(s);
}

inline double l2_distance(const ParamVector& x, const ParamVector& y) {
  require_same_dim(x, y, "l2_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// ||x - y|| / max(||y||, floor); the floor keeps comparisons against a zero
// reference meaningful.
inline double relative_error(const ParamVector& x, const ParamVector& reference, double floor = 1e-300) {
  const double denom = std::max(l2_norm(reference), floor);
  return l2_distance(x, reference) / denom;
}

}  // namespace psgd
