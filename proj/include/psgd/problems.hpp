#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "psgd/error.hpp"
#include "psgd/rng.hpp"
#include "psgd/tensor.hpp"

namespace psgd {

enum class ProblemKind { QuadraticBowl, LogisticRegression, MlpSoftmax };

inline std::string_view to_string(ProblemKind k) {
  switch (k) {
    case ProblemKind::QuadraticBowl: return "quadratic";
    case ProblemKind::LogisticRegression: return "logistic";
    case ProblemKind::MlpSoftmax: return "mlp";
  }
  return "?";
}

inline ProblemKind problem_kind_from_string(std::string_view s) {
  if (s == "quadratic") return ProblemKind::QuadraticBowl;
  if (s == "logistic") return ProblemKind::LogisticRegression;
  if (s == "mlp") return ProblemKind::MlpSoftmax;
  throw ConfigError(detail::concat("unknown problem kind '", s, "' (expected quadratic|logistic|mlp)"));
}

// One training example. Classifier labels are class indices; the quadratic
// problem carries label 0 and ignores sample content.
struct Sample {
  std::vector<double> features;
  std::uint64_t label = 0;

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::size_t d_x = 0;
  std::size_t d_y = 0;
  std::vector<Sample> samples;
  std::vector<Sample> heldout;

  bool operator==(const Dataset&) const = default;
};

using Batch = std::span<const Sample* const>;

struct GenerateOptions {
  // Distance between any two class means.
  double cluster_separation = 4.0;
};

namespace detail {

inline void check_sizes(std::size_t n_train, std::size_t n_heldout, std::size_t d_x, std::size_t d_y) {
  if (n_train == 0 || n_heldout == 0) throw ConfigError("generate: sample counts must be > 0");
  if (d_x == 0 || d_y == 0) throw ConfigError("generate: dimensions must be > 0");
}

}  // namespace detail

// Synthetic corpus. Classifiers draw one unit-covariance Gaussian per class with
// means sep/sqrt(2) * e_k (a regular simplex with pairwise distance sep);
// the quadratic problem gets plain Gaussian inputs. The first n_train draws are
// the training set and the next n_heldout the heldout set.
inline Dataset generate(ProblemKind kind, std::uint64_t seed, std::size_t n_train, std::size_t n_heldout,
                        std::size_t d_x, std::size_t d_y, const GenerateOptions& opts = {}) {
  detail::check_sizes(n_train, n_heldout, d_x, d_y);
  const bool classifier = kind != ProblemKind::QuadraticBowl;
  if (classifier && d_y < 2) throw ConfigError("generate: classifiers need d_y >= 2");
  if (classifier && d_x < d_y) {
    throw ConfigError(detail::concat("generate: simplex class means need d_x >= d_y (", d_x, " < ", d_y, ")"));
  }
  if (kind == ProblemKind::LogisticRegression && d_y != 2) {
    throw ConfigError("generate: logistic regression is binary (d_y must be 2)");
  }

  Rng rng(derive_seed(seed, 0xDA7A));
  Dataset ds;
  ds.d_x = d_x;
  ds.d_y = classifier ? d_y : 1;
  const double offset = opts.cluster_separation / std::sqrt(2.0);
  auto draw = [&]() {
    Sample s;
    s.features.resize(d_x);
    if (classifier) s.label = rng.below(d_y);
    for (std::size_t j = 0; j < d_x; ++j) s.features[j] = rng.normal();
    if (classifier) s.features[s.label] += offset;
    return s;
  };
  ds.samples.reserve(n_train);
  for (std::size_t i = 0; i < n_train; ++i) ds.samples.push_back(draw());
  ds.heldout.reserve(n_heldout);
  for (std::size_t i = 0; i < n_heldout; ++i) ds.heldout.push_back(draw());
  return ds;
}

inline std::vector<const Sample*> all_of(std::span<const Sample> samples) {
  std::vector<const Sample*> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(&s);
  return out;
}

// Differentiable workload: f(w; sample) averaged over a batch.
class Problem {
 public:
  // Quadratic bowl 0.5 (w - w*)' diag(a) (w - w*).
  static Problem quadratic(std::vector<double> curvature, std::vector<double> optimum) {
    if (curvature.size() != optimum.size() || curvature.empty()) {
      throw DimensionError("quadratic: curvature and optimum must have equal non-zero length");
    }
    for (double a : curvature) {
      if (!(a > 0.0) || !std::isfinite(a)) throw ConfigError("quadratic: curvature entries must be > 0");
    }
    Problem p(ProblemKind::QuadraticBowl);
    p.dim_ = curvature.size();
    p.curvature_ = std::move(curvature);
    p.optimum_ = std::move(optimum);
    return p;
  }

  // Seeded bowl with curvature in [0.5, 2] and a standard-normal optimum.
  static Problem random_quadratic(std::size_t dim, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xB0B1));
    std::vector<double> a(dim), opt(dim);
    for (std::size_t i = 0; i < dim; ++i) a[i] = 0.5 + 1.5 * rng.uniform();
    for (std::size_t i = 0; i < dim; ++i) opt[i] = rng.normal();
    return quadratic(std::move(a), std::move(opt));
  }

  // Binary logistic regression; parameters are d_x weights followed by a bias.
  static Problem logistic(std::size_t d_x) {
    if (d_x == 0) throw ConfigError("logistic: d_x must be > 0");
    Problem p(ProblemKind::LogisticRegression);
    p.layers_ = {d_x, 2};
    p.dim_ = d_x + 1;
    return p;
  }

  // Fully-connected tanh network with a softmax output. Parameters are laid out
  // layer by layer: row-major weights (out x in) followed by out biases.
  static Problem mlp(std::vector<std::size_t> layer_sizes) {
    if (layer_sizes.size() < 2) throw ConfigError("mlp: need at least input and output layer sizes");
    for (auto s : layer_sizes) {
      if (s == 0) throw ConfigError("mlp: layer sizes must be > 0");
    }
    if (layer_sizes.back() < 2) throw ConfigError("mlp: output layer needs >= 2 classes");
    Problem p(ProblemKind::MlpSoftmax);
    p.layers_ = std::move(layer_sizes);
    p.dim_ = 0;
    for (std::size_t k = 0; k + 1 < p.layers_.size(); ++k) p.dim_ += (p.layers_[k] + 1) * p.layers_[k + 1];
    return p;
  }

  ProblemKind kind() const noexcept { return kind_; }
  std::size_t dim() const noexcept { return dim_; }
  const std::vector<std::size_t>& layer_sizes() const noexcept { return layers_; }
  const std::vector<double>& curvature() const noexcept { return curvature_; }
  ParamVector optimum() const { return ParamVector(optimum_); }

  // Starting point for training: zeros, except the MLP which needs symmetry
  // breaking (scaled uniform init per layer).
  ParamVector initial_point(std::uint64_t seed) const {
    if (kind_ != ProblemKind::MlpSoftmax) return ParamVector(dim_);
    Rng rng(derive_seed(seed, 0x1417));
    ParamBuilder w(dim_);
    std::size_t off = 0;
    for (std::size_t k = 0; k + 1 < layers_.size(); ++k) {
      const std::size_t in = layers_[k], out = layers_[k + 1];
      const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
      for (std::size_t i = 0; i < in * out; ++i) w[off + i] = bound * (2.0 * rng.uniform() - 1.0);
      off += (in + 1) * out;
    }
    return std::move(w).finish("initial_point");
  }

  double loss(const ParamVector& w, Batch batch) const {
    check_args(w, batch, "loss");
    switch (kind_) {
      case ProblemKind::QuadraticBowl: return quadratic_loss(w);
      case ProblemKind::LogisticRegression: {
        double s = 0.0;
        for (const Sample* x : batch) s += logistic_sample(w, *x, nullptr);
        return s / static_cast<double>(batch.size());
      }
      case ProblemKind::MlpSoftmax: {
        double s = 0.0;
        MlpScratch scratch(layers_);
        for (const Sample* x : batch) s += mlp_sample(w, *x, nullptr, scratch);
        return s / static_cast<double>(batch.size());
      }
    }
    return 0.0;
  }

  double loss(const ParamVector& w, std::span<const Sample> samples) const {
    const auto ptrs = all_of(samples);
    return loss(w, Batch(ptrs));
  }

  // Batch-averaged gradient; accumulation runs in batch order.
  ParamVector gradient(const ParamVector& w, Batch batch) const {
    check_args(w, batch, "gradient");
    ParamBuilder g(dim_);
    switch (kind_) {
      case ProblemKind::QuadraticBowl:
        for (std::size_t i = 0; i < dim_; ++i) g[i] = curvature_[i] * (w[i] - optimum_[i]);
        return std::move(g).finish("gradient");
      case ProblemKind::LogisticRegression:
        for (const Sample* x : batch) logistic_sample(w, *x, &g);
        break;
      case ProblemKind::MlpSoftmax: {
        MlpScratch scratch(layers_);
        for (const Sample* x : batch) mlp_sample(w, *x, &g, scratch);
        break;
      }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < dim_; ++i) g[i] *= inv;
    return std::move(g).finish("gradient");
  }

  // Fraction of samples whose arg-max prediction equals the label.
  double accuracy(const ParamVector& w, std::span<const Sample> samples) const {
    if (kind_ == ProblemKind::QuadraticBowl) throw ConfigError("accuracy: quadratic problem has no classes");
    std::size_t correct = 0;
    MlpScratch scratch(layers_);
    for (const auto& s : samples) {
      std::uint64_t pred = 0;
      if (kind_ == ProblemKind::LogisticRegression) {
        pred = logistic_margin(w, s) > 0.0 ? 1 : 0;
      } else {
        mlp_forward(w, s, scratch);
        const auto& out = scratch.act.back();
        pred = static_cast<std::uint64_t>(std::max_element(out.begin(), out.end()) - out.begin());
      }
      correct += pred == s.label;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
  }

 private:
  explicit Problem(ProblemKind kind) : kind_(kind) {}

  void check_args(const ParamVector& w, Batch batch, const char* op) const {
    if (w.dim() != dim_) {
      throw DimensionError(detail::concat(op, ": parameter dimension ", w.dim(), " != problem dimension ", dim_));
    }
    if (batch.empty()) throw DimensionError(detail::concat(op, ": empty batch"));
    if (kind_ != ProblemKind::QuadraticBowl) {
      for (const Sample* s : batch) {
        if (s->features.size() != layers_.front()) {
          throw DimensionError(detail::concat(op, ": sample has ", s->features.size(), " features, expected ",
                                              layers_.front()));
        }
        if (s->label >= layers_.back()) throw DimensionError(detail::concat(op, ": label out of range"));
      }
    }
  }

  double quadratic_loss(const ParamVector& w) const {
    double s = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double d = w[i] - optimum_[i];
      s += curvature_[i] * d * d;
    }
    return 0.5 * s;
  }

  double logistic_margin(const ParamVector& w, const Sample& x) const {
    const std::size_t d = dim_ - 1;
    double z = w[d];
    for (std::size_t j = 0; j < d; ++j) z += w[j] * x.features[j];
    return z;
  }

  // Cross-entropy of sigmoid(z); accumulates d/dw into grad when given.
  double logistic_sample(const ParamVector& w, const Sample& x, ParamBuilder* grad) const {
    const double z = logistic_margin(w, x);
    const double y = static_cast<double>(x.label);
    // log(1 + e^z) - y z, evaluated stably.
    const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    if (grad) {
      const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      const double r = p - y;
      const std::size_t d = dim_ - 1;
      for (std::size_t j = 0; j < d; ++j) (*grad)[j] += r * x.features[j];
      (*grad)[d] += r;
    }
    return softplus - y * z;
  }

  struct MlpScratch {
    std::vector<std::vector<double>> act;    // activations per layer (act[0] = input)
    std::vector<std::vector<double>> delta;  // dL/d(pre-activation) per non-input layer
    std::vector<double> logits;
    explicit MlpScratch(const std::vector<std::size_t>& layers) : logits(layers.back()) {
      act.resize(layers.size());
      delta.resize(layers.size());
      for (std::size_t k = 0; k < layers.size(); ++k) {
        act[k].resize(layers[k]);
        delta[k].resize(layers[k]);
      }
    }
  };

  // Leaves softmax probabilities in act.back() and returns the log-sum-exp of
  // the output logits.
  double mlp_forward(const ParamVector& w, const Sample& x, MlpScratch& s) const {
    std::copy(x.features.begin(), x.features.end(), s.act[0].begin());
    std::size_t off = 0;
    const std::size_t n_layers = layers_.size();
    double lse = 0.0;
    for (std::size_t k = 0; k + 1 < n_layers; ++k) {
      const std::size_t in = layers_[k], out = layers_[k + 1];
      const double* weights = w.data() + off;
      const double* bias = weights + in * out;
      auto& next = s.act[k + 1];
      for (std::size_t o = 0; o < out; ++o) {
        double z = bias[o];
        for (std::size_t i = 0; i < in; ++i) z += weights[o * in + i] * s.act[k][i];
        next[o] = z;
      }
      if (k + 2 < n_layers) {
        for (auto& v : next) v = std::tanh(v);
      } else {
        std::copy(next.begin(), next.end(), s.logits.begin());
        const double m = *std::max_element(next.begin(), next.end());
        double sum = 0.0;
        for (double v : next) sum += std::exp(v - m);
        lse = m + std::log(sum);
        for (auto& v : next) v = std::exp(v - lse);
      }
      off += (in + 1) * out;
    }
    return lse;
  }

  double mlp_sample(const ParamVector& w, const Sample& x, ParamBuilder* grad, MlpScratch& s) const {
    const double lse = mlp_forward(w, x, s);
    const std::size_t n_layers = layers_.size();
    const double loss = lse - s.logits[x.label];
    if (!grad) return loss;

    auto& top = s.delta[n_layers - 1];
    for (std::size_t o = 0; o < layers_.back(); ++o) top[o] = s.act.back()[o];
    top[x.label] -= 1.0;

    std::vector<std::size_t> offsets(n_layers - 1);
    std::size_t off = 0;
    for (std::size_t k = 0; k + 1 < n_layers; ++k) {
      offsets[k] = off;
      off += (layers_[k] + 1) * layers_[k + 1];
    }
    for (std::size_t k = n_layers - 1; k-- > 0;) {
      const std::size_t in = layers_[k], out = layers_[k + 1];
      const double* weights = w.data() + offsets[k];
      const auto& d_out = s.delta[k + 1];
      for (std::size_t o = 0; o < out; ++o) {
        const double dz = d_out[o];
        for (std::size_t i = 0; i < in; ++i) (*grad)[offsets[k] + o * in + i] += dz * s.act[k][i];
        (*grad)[offsets[k] + in * out + o] += dz;
      }
      if (k > 0) {
        auto& d_in = s.delta[k];
        for (std::size_t i = 0; i < in; ++i) {
          double acc = 0.0;
          for (std::size_t o = 0; o < out; ++o) acc += weights[o * in + i] * d_out[o];
          const double a = s.act[k][i];
          d_in[i] = acc * (1.0 - a * a);
        }
      }
    }
    return loss;
  }

  ProblemKind kind_;
  std::size_t dim_ = 0;
  std::vector<double> curvature_;
  std::vector<double> optimum_;
  std::vector<std::size_t> layers_;
};

// Central differences of loss, coordinate by coordinate. Never calls gradient().
inline ParamVector finite_difference(const Problem& problem, const ParamVector& w, Batch batch, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("finite_difference: epsilon must be > 0");
  ParamBuilder g(w.dim());
  for (std::size_t i = 0; i < w.dim(); ++i) {
    ParamBuilder plus(w), minus(w);
    plus[i] += epsilon;
    minus[i] -= epsilon;
    const double fp = problem.loss(std::move(plus).finish("finite_difference"), batch);
    const double fm = problem.loss(std::move(minus).finish("finite_difference"), batch);
    g[i] = (fp - fm) / (2.0 * epsilon);
  }
  return std::move(g).finish("finite_difference");
}

enum class ShardScheme { Partition, FullWithOffset };

// Per-learner view of the training set. Partition gives learner l a contiguous
// n/L slice (remainder to the last learner); FullWithOffset walks the whole
// ordering starting at l*n/L, wrapping around.
inline std::vector<const Sample*> shard(const Dataset& ds, std::size_t l, std::size_t L, ShardScheme scheme) {
  const std::size_t n = ds.samples.size();
  if (L == 0 || l >= L) throw ConfigError(detail::concat("shard: learner index ", l, " out of range for L=", L));
  if (L > n) throw ConfigError(detail::concat("shard: L=", L, " exceeds sample count ", n));
  std::vector<const Sample*> out;
  if (scheme == ShardScheme::Partition) {
    const std::size_t base = n / L;
    const std::size_t begin = l * base;
    const std::size_t end = (l + 1 == L) ? n : begin + base;
    out.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) out.push_back(&ds.samples[i]);
  } else {
    const std::size_t start = l * n / L;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(&ds.samples[(start + i) % n]);
  }
  return out;
}

// Builds the problem a config describes; the quadratic bowl uses d_x as its dimension.
inline Problem make_problem(ProblemKind kind, std::size_t d_x, std::size_t d_y, const std::vector<std::size_t>& hidden,
                            std::uint64_t seed) {
  switch (kind) {
    case ProblemKind::QuadraticBowl: return Problem::random_quadratic(d_x, seed);
    case ProblemKind::LogisticRegression:
      if (d_y != 2) throw ConfigError("logistic regression requires d_y = 2");
      return Problem::logistic(d_x);
    case ProblemKind::MlpSoftmax: {
      std::vector<std::size_t> layers{d_x};
      layers.insert(layers.end(), hidden.begin(), hidden.end());
      layers.push_back(d_y);
      return Problem::mlp(std::move(layers));
    }
  }
  throw ConfigError("unknown problem kind");
}

}  // namespace psgd
