#include <gtest/gtest.h>

#include "maskanneal/mask.hpp"
#include "maskanneal/rng.hpp"
#include "oracle/oracles.hpp"

using namespace maskanneal;

namespace {
const SparsityPattern k24 = SparsityPattern::nofm(2, 4);

Mat row4(double a, double b, double c, double d) {
  Mat m(1, 4);
  m[0] = a; m[1] = b; m[2] = c; m[3] = d;
  return m;
}
}  // namespace

TEST(GroupThreshold, SecondLargestOfFour) {
  Mat tau = group_threshold(row4(3, 1, 2, 0), k24);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(tau[i], 2.0);
}

TEST(GroupThreshold, AllEqualGroup) {
  Mat tau = group_threshold(row4(5, 5, 5, 5), k24);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(tau[i], 5.0);
}

TEST(GroupThreshold, MatchesFullSortOracle) {
  RngStream rng(3, "tau");
  const SparsityPattern p = SparsityPattern::nofm(4, 8);
  for (int trial = 0; trial < 200; ++trial) {
    Mat s(1, 8);
    for (std::size_t i = 0; i < 8; ++i) s[i] = rng.normal();
    Mat tau = group_threshold(s, p);
    std::vector<double> sorted(s.values());
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(tau[i], sorted[3]);
  }
}

TEST(SoftGate, ThresholdMapsToHalf) {
  Mat s = row4(2, 2, 2, 2);
  Mat tau = group_threshold(s, k24);
  Mat g = soft_gate(s, tau, 0.7);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g[i], 0.5);
}

TEST(SoftGate, SigmoidValues) {
  Mat s = row4(3, 1, 2, 0);
  Mat tau = group_threshold(s, k24);
  Mat g = soft_gate(s, tau, 1.0);
  auto sigma = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  EXPECT_NEAR(g[0], sigma(1), 1e-15);
  EXPECT_NEAR(g[1], sigma(-1), 1e-15);
  EXPECT_DOUBLE_EQ(g[2], 0.5);
  EXPECT_NEAR(g[3], sigma(-2), 1e-15);
}

TEST(SoftGate, ColdLimitIsStepPattern) {
  Mat s = row4(3, 1, 2, 0);
  Mat tau = group_threshold(s, k24);
  Mat g = soft_gate(s, tau, 1e-12);
  EXPECT_DOUBLE_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[1], 0.0);
  EXPECT_DOUBLE_EQ(g[2], 0.5);  // exactly at tau
  EXPECT_DOUBLE_EQ(g[3], 0.0);
}

TEST(SoftGate, TopNSitAtOrAboveHalf) {
  RngStream rng(5, "gate");
  for (int trial = 0; trial < 100; ++trial) {
    Mat s(2, 8);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = rng.normal();
    Mat tau = group_threshold(s, k24);
    Mat g = soft_gate(s, tau, 0.3);
    Mat hard = hard_target(s, k24);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (hard[i] == 1.0)
        EXPECT_GE(g[i], 0.5);
      else
        EXPECT_LT(g[i], 0.5 + 1e-15);
    }
  }
}

TEST(SoftGate, NonPositiveTemperatureThrows) {
  Mat s = row4(1, 2, 3, 4);
  EXPECT_THROW(soft_gate(s, s, 0.0), std::invalid_argument);
}

TEST(Blend, EndpointsAndMidpoint) {
  Mat g(1, 4, 0.8);
  Mat gbar(1, 4, 1.0);
  EXPECT_DOUBLE_EQ(blend(g, gbar, 0.0)[0], 0.8);
  EXPECT_DOUBLE_EQ(blend(g, gbar, 1.0)[0], 1.0);
  EXPECT_DOUBLE_EQ(blend(g, gbar, 0.5)[0], 0.9);
  EXPECT_THROW(blend(g, gbar, 1.5), std::invalid_argument);
}

TEST(MidPenalty, ZeroWeightIsIdentity) {
  Mat g = row4(0.3, 0.6, 0.2, 0.9);
  Mat m(1, 4, 0.5);
  Mat gbar = row4(1, 0, 1, 0);
  Mat out = mid_penalty_inject(g, m, gbar, 1.0, 0.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out[i], g[i]);
}

TEST(MidPenalty, HandArithmetic) {
  Mat g(1, 4, 0.5);
  Mat m(1, 4, 0.1);
  Mat gbar(1, 4, 1.0);
  Mat out = mid_penalty_inject(g, m, gbar, 0.2, 1.0);
  // 0.5 - 0.2*(0.1-1) = 0.68
  EXPECT_NEAR(out[0], 0.68, 1e-15);
}

TEST(MidPenalty, ClampFloor) {
  Mat g(1, 4, 0.05);
  Mat m(1, 4, 1.0);
  Mat gbar(1, 4, 0.0);
  Mat out = mid_penalty_inject(g, m, gbar, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(out[0], 0.0);
}

TEST(MidPenalty, MonotoneTowardTarget) {
  RngStream rng(9, "mono");
  for (int trial = 0; trial < 200; ++trial) {
    Mat g(1, 4), m(1, 4), gbar(1, 4);
    for (std::size_t i = 0; i < 4; ++i) {
      g[i] = rng.uniform01();
      m[i] = rng.uniform01();
      gbar[i] = rng.next_u64() & 1 ? 1.0 : 0.0;
    }
    const double s1 = rng.uniform01(), s2 = s1 + rng.uniform01();
    Mat a = mid_penalty_inject(g, m, gbar, 1.0, s1);
    Mat b = mid_penalty_inject(g, m, gbar, 1.0, s2);
    for (std::size_t i = 0; i < 4; ++i) {
      // larger step never moves the result away from the target
      EXPECT_LE(std::abs(gbar[i] - b[i]), std::abs(gbar[i] - a[i]) + 1e-15);
    }
  }
}

TEST(EmaUpdate, AssignsAtAlphaOne) {
  SoftMask mask(1, 4, k24);
  mask.ema_alpha = 1.0;
  Mat g = row4(0.1, 0.9, 0.4, 0.7);
  ema_update(mask, g);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(mask.m[i], g[i]);
}

TEST(EmaUpdate, HalfwayStep) {
  SoftMask mask(1, 4, k24);
  mask.ema_alpha = 0.5;
  mask.m = Mat(1, 4, 0.2);
  ema_update(mask, Mat(1, 4, 0.8));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(mask.m[i], 0.5);
}

TEST(EmaUpdate, ConvergesGeometrically) {
  SoftMask mask(1, 4, k24);
  mask.ema_alpha = 0.3;
  Mat target(1, 4, 0.9);
  for (int i = 0; i < 200; ++i) ema_update(mask, target);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(mask.m[i], 0.9, 1e-12);
}

TEST(EmaUpdate, FrozenMaskRejected) {
  SoftMask mask(1, 4, k24);
  mask.frozen = true;
  EXPECT_THROW(ema_update(mask, Mat(1, 4, 0.5)), std::invalid_argument);
}

TEST(EmaUpdate, StaysInUnitInterval) {
  RngStream rng(11, "range");
  SoftMask mask(1, 8, k24);
  mask.ema_alpha = 0.25;
  for (int step = 0; step < 500; ++step) {
    Mat g(1, 8);
    for (std::size_t i = 0; i < 8; ++i) g[i] = rng.uniform01();
    ema_update(mask, g);
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_GE(mask.m[i], 0.0);
      EXPECT_LE(mask.m[i], 1.0);
    }
  }
}

TEST(EffectiveMask, SoftAndHardEndpoints) {
  SoftMask mask(1, 4, k24);
  mask.m = row4(0.9, 0.1, 0.6, 0.4);
  mask.hardening_x = 1.0;
  Mat soft = effective_mask(mask);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(soft[i], mask.m[i]);

  mask.hardening_x = 0.0;
  Mat hard = effective_mask(mask);
  EXPECT_DOUBLE_EQ(hard[0], 1.0);
  EXPECT_DOUBLE_EQ(hard[1], 0.0);
  EXPECT_DOUBLE_EQ(hard[2], 1.0);
  EXPECT_DOUBLE_EQ(hard[3], 0.0);

  mask.hardening_x = 0.5;
  Mat mid = effective_mask(mask);
  EXPECT_DOUBLE_EQ(mid[0], 0.95);
}

TEST(Finalize, RequiresCompleteHardening) {
  SoftMask mask(1, 4, k24);
  mask.hardening_x = 0.2;
  EXPECT_THROW(finalize(mask, mask.m), std::invalid_argument);
}

TEST(Finalize, BinaryFeasibleUnchanged) {
  SoftMask mask(1, 4, k24);
  mask.m = row4(1, 0, 1, 0);
  mask.hardening_x = 0.0;
  finalize(mask, mask.m);
  EXPECT_TRUE(mask.frozen);
  EXPECT_DOUBLE_EQ(mask.m[0], 1.0);
  EXPECT_DOUBLE_EQ(mask.m[1], 0.0);
  EXPECT_DOUBLE_EQ(mask.m[2], 1.0);
  EXPECT_DOUBLE_EQ(mask.m[3], 0.0);
}

TEST(Finalize, RanksByCurrentMask) {
  SoftMask mask(1, 4, k24);
  mask.m = row4(0.9, 0.8, 0.7, 0.1);
  mask.hardening_x = 0.0;
  finalize(mask, mask.m);
  EXPECT_DOUBLE_EQ(mask.m[0], 1.0);
  EXPECT_DOUBLE_EQ(mask.m[1], 1.0);
  EXPECT_DOUBLE_EQ(mask.m[2], 0.0);
  EXPECT_DOUBLE_EQ(mask.m[3], 0.0);
}

TEST(Finalize, RepairsThresholdInfeasibility) {
  // three entries above theta: threshold mask infeasible, projection repairs
  SoftMask mask(1, 4, k24);
  mask.m = row4(0.9, 0.9, 0.9, 0.1);
  mask.hardening_x = 0.0;
  finalize(mask, mask.m);
  EXPECT_TRUE(check_feasible(mask.m, k24).ok);
  EXPECT_DOUBLE_EQ(mask.m[0], 1.0);
  EXPECT_DOUBLE_EQ(mask.m[1], 1.0);
  EXPECT_DOUBLE_EQ(mask.m[2], 0.0);

  auto res = oracle::exhaustive_group_project({0.9, 0.9, 0.9, 0.1}, 2);
  std::vector<int> kept;
  for (int i = 0; i < 4; ++i)
    if (mask.m[std::size_t(i)] == 1.0) kept.push_back(i);
  bool is_optimum = false;
  for (const auto& opt : res.all_optima) is_optimum = is_optimum || opt == kept;
  EXPECT_TRUE(is_optimum);
}

TEST(Finalize, AlwaysFeasibleOnRandomMasks) {
  RngStream rng(13, "fin");
  for (int trial = 0; trial < 100; ++trial) {
    SoftMask mask(4, 16, k24);
    for (std::size_t i = 0; i < mask.m.size(); ++i) mask.m[i] = rng.uniform01();
    mask.hardening_x = 0.0;
    finalize(mask, mask.m);
    EXPECT_TRUE(check_feasible(mask.m, k24).ok);
  }
}

TEST(MidLoss, EqualityCases) {
  EXPECT_DOUBLE_EQ(mid_loss(row4(1, 0, 1, 0)), 0.0);
  EXPECT_DOUBLE_EQ(mid_loss(Mat(1, 4, 0.5)), 0.25);
  Mat m(1, 2);
  m[0] = 0.9;
  m[1] = 0.1;
  EXPECT_NEAR(mid_loss(m), 0.09, 1e-15);
  EXPECT_THROW(mid_loss(row4(1.5, 0, 0, 0)), std::invalid_argument);
}

TEST(MaskStats, BinaryFeasibleAllZero) {
  Mat m = row4(1, 0, 1, 0);
  MaskStats st = mask_stats(m, k24);
  EXPECT_DOUBLE_EQ(st.mid_fraction, 0.0);
  EXPECT_DOUBLE_EQ(st.mean_distance_to_binary, 0.0);
  EXPECT_TRUE(st.threshold_mask_feasible);
  EXPECT_DOUBLE_EQ(st.projection_error, 0.0);
}

TEST(MaskStats, AllHalf) {
  Mat m(1, 4, 0.5);
  MaskStats st = mask_stats(m, k24);
  EXPECT_DOUBLE_EQ(st.mid_fraction, 1.0);
  EXPECT_DOUBLE_EQ(st.projection_error, 0.5);
  EXPECT_FALSE(st.threshold_mask_feasible);  // 0.5 > theta is false everywhere
}

TEST(MaskEngine, DegenerateCompositionEqualsHardProjection) {
  // beta=1, alpha=1, lambda_mid=0: one update assigns the hard target
  RngStream rng(17, "degen");
  SoftMask mask(2, 8, k24);
  mask.ema_alpha = 1.0;
  Mat s(2, 8);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = rng.normal();
  Mat tau = group_threshold(s, k24);
  Mat g = soft_gate(s, tau, 1.0);
  Mat gbar = hard_target(s, k24);
  Mat blended = blend(g, gbar, 1.0);
  Mat injected = mid_penalty_inject(blended, mask.m, gbar, 1.0, 0.0);
  ema_update(mask, injected);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_DOUBLE_EQ(mask.m[i], gbar[i]);
}

TEST(MaskEngine, GateRoundsToTargetAtColdTemperature) {
  RngStream rng(19, "cold");
  for (int trial = 0; trial < 50; ++trial) {
    Mat s(1, 8);
    for (std::size_t i = 0; i < 8; ++i) s[i] = rng.normal();  // ties have measure zero
    Mat tau = group_threshold(s, k24);
    Mat g = soft_gate(s, tau, 1e-9);
    Mat gbar = hard_target(s, k24);
    for (std::size_t i = 0; i < 8; ++i) {
      const double rounded = g[i] > 0.5 ? 1.0 : 0.0;
      if (g[i] != 0.5) EXPECT_DOUBLE_EQ(rounded, gbar[i]);
    }
  }
}

TEST(MaskEngine, RangePreservationThroughFullUpdate) {
  RngStream rng(23, "pipe");
  SoftMask mask(4, 16, k24);
  mask.ema_alpha = 0.2;
  for (int step = 0; step < 100; ++step) {
    Mat s(4, 16);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = rng.normal();
    Mat tau = group_threshold(s, k24);
    Mat g = soft_gate(s, tau, std::max(1e-3, 1.0 * std::pow(0.95, step)));
    Mat gbar = hard_target(s, k24);
    Mat blended = blend(g, gbar, std::min(1.0, step / 50.0));
    Mat injected = mid_penalty_inject(blended, mask.m, gbar, 1.0, 0.05 * step / 100.0);
    ema_update(mask, injected);
    for (std::size_t i = 0; i < mask.m.size(); ++i) {
      EXPECT_GE(mask.m[i], 0.0);
      EXPECT_LE(mask.m[i], 1.0);
    }
  }
}
