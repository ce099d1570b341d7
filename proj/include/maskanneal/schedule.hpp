#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "maskanneal/mat.hpp"

namespace maskanneal {

/// Deterministic annealing plan: temperature, blend, mid-penalty weight,
/// hardening factor, and the mask-update cadence. All step windows are in
/// optimizer steps; the temperature index k counts mask-update events.
struct AnnealPlan {
  double t0 = 1.0;       // initial gate temperature
  double gamma = 0.995;  // geometric decay per mask update
  double t_min = 1e-4;   // sigmoid overflow floor

  long beta_start_step = 0;
  long beta_end_step = 1;

  double lambda_mid_start = 0.0;
  double lambda_mid_end = 0.1;
  long lambda_start_step = 0;
  long lambda_end_step = 1;

  long harden_start_step = 1;
  long harden_end_step = 2;

  long t_update = 100;
  long t_max = 1;

  void validate() const {
    require(t0 > 0.0, "plan: T0 must be > 0");
    require(gamma > 0.0 && gamma < 1.0, "plan: gamma must be in (0,1)");
    require(t_min > 0.0, "plan: T_min must be > 0");
    require(t_update > 0, "plan: T_update must be > 0");
    require(t_max > 0, "plan: T_max must be > 0");
    require(beta_start_step < beta_end_step, "plan: empty beta window");
    require(lambda_start_step < lambda_end_step, "plan: empty lambda_mid window");
    require(harden_start_step < harden_end_step, "plan: empty hardening window");
    require(lambda_mid_start <= lambda_mid_end, "plan: lambda_mid must not decrease");
    require(lambda_mid_start >= 0.0, "plan: lambda_mid must be non-negative");
    require(beta_end_step <= harden_start_step,
            "plan: beta window must end no later than hardening starts");
    require(harden_end_step <= t_max, "plan: hardening window exceeds T_max");
  }
};

/// Default desk-scale plan for a given step budget: blend over [20%, 70%],
/// mid-penalty ramp 0 -> 0.1 over [20%, 80%], hardening over [80%, 95%],
/// the last 5% a post-projection finetune.
inline AnnealPlan default_plan(long t_max, long t_update = 100) {
  AnnealPlan p;
  p.t0 = 1.0;
  p.gamma = 0.995;
  p.t_min = 1e-4;
  p.t_update = t_update;
  p.t_max = t_max;
  p.beta_start_step = long(0.20 * double(t_max));
  p.beta_end_step = long(0.70 * double(t_max));
  p.lambda_mid_start = 0.0;
  p.lambda_mid_end = 0.1;
  p.lambda_start_step = long(0.20 * double(t_max));
  p.lambda_end_step = long(0.80 * double(t_max));
  p.harden_start_step = long(0.80 * double(t_max));
  p.harden_end_step = long(0.95 * double(t_max));
  p.validate();
  return p;
}

/// T0 * gamma^k, floored at t_min. k indexes mask-update events.
inline double temperature_at(const AnnealPlan& p, long update_index) {
  const double t = p.t0 * std::pow(p.gamma, double(update_index));
  return std::max(t, p.t_min);
}

/// Smooth-step (cubic Hermite) ramp 0 -> 1 over the beta window: zero slope
/// at both ends.
inline double beta_at(const AnnealPlan& p, long step) {
  const double u = std::clamp(double(step - p.beta_start_step) /
                                  double(p.beta_end_step - p.beta_start_step),
                              0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

/// Linear ramp between the endpoints over the lambda window, clamped outside.
inline double lambda_mid_at(const AnnealPlan& p, long step) {
  const double u = std::clamp(double(step - p.lambda_start_step) /
                                  double(p.lambda_end_step - p.lambda_start_step),
                              0.0, 1.0);
  return p.lambda_mid_start + u * (p.lambda_mid_end - p.lambda_mid_start);
}

/// 1 before the hardening window, linear to 0 across it, 0 after.
inline double hardening_x_at(const AnnealPlan& p, long step) {
  const double u = std::clamp(double(step - p.harden_start_step) /
                                  double(p.harden_end_step - p.harden_start_step),
                              0.0, 1.0);
  return 1.0 - u;
}

inline bool is_mask_update_step(const AnnealPlan& p, long step) {
  return step > 0 && step % p.t_update == 0;
}

}  // namespace maskanneal
