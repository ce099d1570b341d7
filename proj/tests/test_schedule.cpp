#include <gtest/gtest.h>

#include "maskanneal/schedule.hpp"

using namespace maskanneal;

namespace {
AnnealPlan small_plan() {
  AnnealPlan p = default_plan(1000, 10);
  return p;
}
}  // namespace

TEST(Schedule, TemperatureGeometric) {
  AnnealPlan p = small_plan();
  p.t0 = 1.0;
  p.gamma = 0.9;
  EXPECT_DOUBLE_EQ(temperature_at(p, 0), 1.0);
  EXPECT_DOUBLE_EQ(temperature_at(p, 2), 0.81);
  EXPECT_DOUBLE_EQ(temperature_at(p, 100000), p.t_min);
}

TEST(Schedule, TemperatureStrictlyDecreasingUntilFloor) {
  AnnealPlan p = small_plan();
  double prev = temperature_at(p, 0);
  bool floored = false;
  for (long k = 1; k < 5000; ++k) {
    double t = temperature_at(p, k);
    if (!floored) {
      if (t == p.t_min)
        floored = true;
      else
        EXPECT_LT(t, prev);
    } else {
      EXPECT_DOUBLE_EQ(t, p.t_min);
    }
    prev = t;
  }
  EXPECT_TRUE(floored);
}

TEST(Schedule, BetaSmoothStepEndpointsAndMidpoint) {
  AnnealPlan p = small_plan();
  EXPECT_DOUBLE_EQ(beta_at(p, p.beta_start_step - 5), 0.0);
  EXPECT_DOUBLE_EQ(beta_at(p, p.beta_start_step), 0.0);
  EXPECT_DOUBLE_EQ(beta_at(p, p.beta_end_step), 1.0);
  EXPECT_DOUBLE_EQ(beta_at(p, p.beta_end_step + 100), 1.0);
  const long mid = (p.beta_start_step + p.beta_end_step) / 2;
  EXPECT_DOUBLE_EQ(beta_at(p, mid), 0.5);
}

TEST(Schedule, BetaQuarterPointValue) {
  AnnealPlan p;
  p.t_max = 500;
  p.beta_start_step = 0;
  p.beta_end_step = 400;
  p.lambda_start_step = 0;
  p.lambda_end_step = 400;
  p.harden_start_step = 400;
  p.harden_end_step = 500;
  p.validate();
  // u = 0.25 -> 3u^2 - 2u^3 = 0.15625
  EXPECT_DOUBLE_EQ(beta_at(p, 100), 0.15625);
}

TEST(Schedule, BetaNonDecreasingWithContinuousDerivative) {
  AnnealPlan p = small_plan();
  double prev = beta_at(p, 0);
  double prev_slope = 0.0;
  for (long t = 1; t <= p.t_max; ++t) {
    const double b = beta_at(p, t);
    EXPECT_GE(b, prev - 1e-15);
    const double slope = b - prev;
    // smooth-step: discrete slope changes stay O(1/window^2), no jumps
    EXPECT_LT(std::abs(slope - prev_slope), 2.5e-5);
    prev_slope = slope;
    prev = b;
  }
}

TEST(Schedule, LambdaMidLinearRamp) {
  AnnealPlan p = small_plan();
  EXPECT_DOUBLE_EQ(lambda_mid_at(p, 0), p.lambda_mid_start);
  EXPECT_DOUBLE_EQ(lambda_mid_at(p, p.t_max), p.lambda_mid_end);
  const long mid = (p.lambda_start_step + p.lambda_end_step) / 2;
  EXPECT_DOUBLE_EQ(lambda_mid_at(p, mid), 0.5 * (p.lambda_mid_start + p.lambda_mid_end));
}

TEST(Schedule, HardeningRampAndClamps) {
  AnnealPlan p = small_plan();
  EXPECT_DOUBLE_EQ(hardening_x_at(p, p.harden_start_step - 1), 1.0);
  EXPECT_DOUBLE_EQ(hardening_x_at(p, (p.harden_start_step + p.harden_end_step) / 2), 0.5);
  EXPECT_DOUBLE_EQ(hardening_x_at(p, p.harden_end_step), 0.0);
  EXPECT_DOUBLE_EQ(hardening_x_at(p, p.t_max), 0.0);
  double prev = 1.0;
  for (long t = 0; t <= p.t_max; ++t) {
    const double x = hardening_x_at(p, t);
    EXPECT_LE(x, prev + 1e-15);
    prev = x;
  }
}

TEST(Schedule, MaskUpdateCadence) {
  AnnealPlan p = small_plan();
  EXPECT_FALSE(is_mask_update_step(p, 1));
  EXPECT_TRUE(is_mask_update_step(p, p.t_update));
  long count = 0;
  for (long t = 1; t <= p.t_max; ++t) count += is_mask_update_step(p, t) ? 1 : 0;
  EXPECT_EQ(count, p.t_max / p.t_update);
}

TEST(Schedule, InvalidPlansRejected) {
  AnnealPlan p = small_plan();
  p.gamma = 1.5;
  EXPECT_THROW(p.validate(), std::invalid_argument);

  p = small_plan();
  p.beta_end_step = p.harden_start_step + 1;  // beta must settle before hardening
  EXPECT_THROW(p.validate(), std::invalid_argument);

  p = small_plan();
  p.harden_end_step = p.t_max + 1;
  EXPECT_THROW(p.validate(), std::invalid_argument);

  p = small_plan();
  p.lambda_mid_start = 0.5;
  p.lambda_mid_end = 0.1;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(Schedule, PureFunctionsReplayIdentically) {
  AnnealPlan p = small_plan();
  for (long t : {0L, 7L, 123L, 999L}) {
    EXPECT_EQ(beta_at(p, t), beta_at(p, t));
    EXPECT_EQ(lambda_mid_at(p, t), lambda_mid_at(p, t));
    EXPECT_EQ(hardening_x_at(p, t), hardening_x_at(p, t));
  }
}
