#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "psgd/error.hpp"
#include "psgd/tensor.hpp"

namespace psgd {

enum class ScheduleKind { Constant, StepAnneal, WarmupAnneal };

inline std::string_view to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Constant: return "constant";
    case ScheduleKind::StepAnneal: return "step_anneal";
    case ScheduleKind::WarmupAnneal: return "warmup_anneal";
  }
  return "?";
}

inline ScheduleKind schedule_kind_from_string(std::string_view s) {
  if (s == "constant") return ScheduleKind::Constant;
  if (s == "step_anneal") return ScheduleKind::StepAnneal;
  if (s == "warmup_anneal") return ScheduleKind::WarmupAnneal;
  throw ConfigError(detail::concat("unknown schedule kind '", s, "' (expected constant|step_anneal|warmup_anneal)"));
}

// Per-epoch learning rate. Epochs are 0-based and the rate is constant within
// an epoch.
struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Constant;
  double alpha0 = 0.1;
  double peak = 1.0;
  std::uint64_t warmup_epochs = 0;
  std::uint64_t anneal_start_epoch = 10;
  double anneal_factor = 0.70710678118654752440;  // 1/sqrt(2)

  static LrSchedule constant(double alpha) { return {ScheduleKind::Constant, alpha, alpha, 0, 0, 0.5}; }

  // Single-learner recipe: 0.1, annealed by 1/sqrt(2) each epoch from epoch 10 on.
  static LrSchedule baseline() { return {ScheduleKind::StepAnneal, 0.1, 0.1, 0, 10, 1.0 / std::sqrt(2.0)}; }

  // Distributed recipe: linear 0.1 -> 1.0 over the first 10 epochs, then annealed.
  static LrSchedule warmup() { return {ScheduleKind::WarmupAnneal, 0.1, 1.0, 10, 10, 1.0 / std::sqrt(2.0)}; }

  void validate() const {
    if (!(alpha0 > 0.0) || !std::isfinite(alpha0)) throw ConfigError("schedule.alpha0 must be > 0");
    if (kind == ScheduleKind::WarmupAnneal && (!(peak > 0.0) || !std::isfinite(peak))) {
      throw ConfigError("schedule.peak must be > 0");
    }
    if (kind != ScheduleKind::Constant && !(anneal_factor > 0.0 && anneal_factor < 1.0)) {
      throw ConfigError("schedule.anneal_factor must be in (0, 1)");
    }
  }

  bool operator==(const LrSchedule&) const = default;
};

inline double lr_at(const LrSchedule& s, std::uint64_t epoch) {
  switch (s.kind) {
    case ScheduleKind::Constant: return s.alpha0;
    case ScheduleKind::StepAnneal:
      if (epoch < s.anneal_start_epoch) return s.alpha0;
      return s.alpha0 * std::pow(s.anneal_factor, static_cast<double>(epoch - s.anneal_start_epoch + 1));
    case ScheduleKind::WarmupAnneal: {
      if (epoch < s.warmup_epochs) {
        if (s.warmup_epochs == 1) return s.peak;
        const double t = static_cast<double>(epoch) / static_cast<double>(s.warmup_epochs - 1);
        return s.alpha0 + t * (s.peak - s.alpha0);
      }
      return s.peak * std::pow(s.anneal_factor, static_cast<double>(epoch - s.warmup_epochs + 1));
    }
  }
  return s.alpha0;
}

struct SgdState {
  ParamVector w;
  std::uint64_t iteration = 0;
  std::uint64_t epoch = 0;
};

// w <- w - alpha * grad, iteration + 1.
inline SgdState sgd_step(const SgdState& state, const ParamVector& grad, double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("sgd_step: alpha must be > 0");
  require_same_dim(grad, state.w, "sgd_step");
  return SgdState{axpy(-alpha, grad, state.w), state.iteration + 1, state.epoch};
}

}  // namespace psgd
