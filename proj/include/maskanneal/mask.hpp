#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "maskanneal/mat.hpp"
#include "maskanneal/pattern.hpp"

namespace maskanneal {

enum class FinalizeRanking { by_m, by_score };

/// Per-layer continuous mask in [0,1] with its annealing state. The mask is
/// never touched by backprop; it evolves only through the update rule below
/// and is frozen to a feasible binary matrix by finalize().
struct SoftMask {
  Mat m;
  SparsityPattern pattern = SparsityPattern::nofm(2, 4);
  double temperature = 1.0;   // T, sharpness of the soft gate
  double blend = 0.0;         // beta, soft-to-structured interpolation
  double mid_weight = 0.0;    // lambda_mid
  double pen_step = 1.0;      // eta_pen
  double ema_alpha = 0.15;    // alpha of the mask EMA update
  double hardening_x = 1.0;   // x, 1 = fully soft forward, 0 = thresholded
  double hard_threshold = 0.5;  // theta
  bool frozen = false;
  long version = 0;  // bumped on every change to m; callers mutating m directly must bump it

  SoftMask() = default;
  SoftMask(std::size_t rows, std::size_t cols, const SparsityPattern& p)
      : m(rows, cols, 1.0), pattern(p) {
    p.check_shape(rows, cols);
  }
};

/// Per-entry group threshold: every entry carries the keep_count-th largest
/// standardized score of its group.
inline Mat group_threshold(const Mat& s, const SparsityPattern& pattern) {
  pattern.check_shape(s.rows(), s.cols());
  Mat tau(s.rows(), s.cols());
  thread_local std::vector<double> buf;
  for (const GroupIndex& g : iter_groups(pattern, s.rows(), s.cols())) {
    buf.clear();
    for (auto [r, c] : g.members) buf.push_back(s(r, c));
    const std::size_t k = std::size_t(pattern.keep_count()) - 1;
    std::nth_element(buf.begin(), buf.begin() + long(k), buf.end(), std::greater<double>());
    const double t = buf[k];
    for (auto [r, c] : g.members) tau(r, c) = t;
  }
  return tau;
}

/// G = sigmoid((s - tau)/T). Entries at the threshold map to exactly 0.5.
inline Mat soft_gate(const Mat& s, const Mat& tau, double temperature) {
  require(temperature > 0.0, "soft_gate: temperature must be > 0");
  require(s.same_shape(tau), "soft_gate: shape mismatch");
  Mat g(s.rows(), s.cols());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double z = (s[i] - tau[i]) / temperature;
    if (z == 0.0)
      g[i] = 0.5;
    else
      g[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return g;
}

/// Binary structured target: group top-K of the scores (same tie-break as
/// project_structured).
inline Mat hard_target(const Mat& s, const SparsityPattern& pattern) {
  return project_structured(s, pattern);
}

/// (1-beta)*G + beta*Gbar.
inline Mat blend(const Mat& g, const Mat& gbar, double beta) {
  require(beta >= 0.0 && beta <= 1.0, "blend: beta out of [0,1]");
  require(g.same_shape(gbar), "blend: shape mismatch");
  Mat out(g.rows(), g.cols());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = (1.0 - beta) * g[i] + beta * gbar[i];
  return out;
}

/// Pushes the gate toward the structured target along the residual
/// delta = m - Gbar: clamp(G - eta*lambda*delta, 0, 1).
inline Mat mid_penalty_inject(const Mat& g, const Mat& m, const Mat& gbar, double eta_pen,
                              double lambda_mid) {
  require(eta_pen >= 0.0 && lambda_mid >= 0.0, "mid_penalty_inject: negative step");
  require(g.same_shape(m) && g.same_shape(gbar), "mid_penalty_inject: shape mismatch");
  Mat out(g.rows(), g.cols());
  const double step = eta_pen * lambda_mid;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double x = g[i] - step * (m[i] - gbar[i]);
    out[i] = x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
  }
  return out;
}

/// m <- (1-alpha)*m + alpha*Gtilde. Annealing state is untouched.
inline void ema_update(SoftMask& mask, const Mat& gtilde) {
  require(!mask.frozen, "ema_update: mask is frozen");
  require(mask.m.same_shape(gtilde), "ema_update: shape mismatch");
  const double a = mask.ema_alpha;
  require(a > 0.0 && a <= 1.0, "ema_update: alpha out of (0,1]");
  for (std::size_t i = 0; i < mask.m.size(); ++i)
    mask.m[i] = (1.0 - a) * mask.m[i] + a * gtilde[i];
  ++mask.version;
}

/// Forward-time mask: x*m + (1-x)*[m > theta].
inline Mat effective_mask(const SoftMask& mask) {
  const double x = mask.hardening_x;
  require(x >= 0.0 && x <= 1.0, "effective_mask: x out of [0,1]");
  Mat out(mask.m.rows(), mask.m.cols());
  for (std::size_t i = 0; i < mask.m.size(); ++i) {
    const double hard = mask.m[i] > mask.hard_threshold ? 1.0 : 0.0;
    out[i] = x * mask.m[i] + (1.0 - x) * hard;
  }
  return out;
}

/// Final structured projection and freeze. Survivors are ranked by the
/// current soft mask values by default, or by the standardized score; the
/// projection repairs any threshold infeasibility.
inline void finalize(SoftMask& mask, const Mat& standardized_score,
                     FinalizeRanking ranking = FinalizeRanking::by_m) {
  require(mask.hardening_x == 0.0, "finalize: hardening window not complete (x != 0)");
  const Mat& key = ranking == FinalizeRanking::by_m ? mask.m : standardized_score;
  require(key.same_shape(mask.m), "finalize: ranking score shape mismatch");
  mask.m = project_structured(key, mask.pattern);
  mask.frozen = true;
  ++mask.version;
}

/// Mean of m(1-m): 0 iff binary, maximal 0.25 at all-0.5. Reported as a
/// metric only; it reaches the mask through the mid-penalty injection, not
/// through autograd.
inline double mid_loss(const Mat& m) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    require(m[i] >= 0.0 && m[i] <= 1.0, "mid_loss: mask entry out of [0,1]");
    s += m[i] * (1.0 - m[i]);
  }
  return m.size() ? s / double(m.size()) : 0.0;
}

struct MaskStats {
  double mid_fraction = 0.0;        // entries in [0.2, 0.8]
  double mean_distance_to_binary = 0.0;  // mean min(m, 1-m)
  bool threshold_mask_feasible = true;
  double projection_error = 0.0;    // ||m - project(m)||_1 / count
};

inline MaskStats mask_stats(const Mat& m, const SparsityPattern& pattern,
                            double theta = 0.5) {
  MaskStats st;
  std::size_t mid = 0;
  double dist = 0.0;
  Mat thresholded(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] >= 0.2 && m[i] <= 0.8) ++mid;
    dist += std::min(m[i], 1.0 - m[i]);
    thresholded[i] = m[i] > theta ? 1.0 : 0.0;
  }
  st.mid_fraction = m.size() ? double(mid) / double(m.size()) : 0.0;
  st.mean_distance_to_binary = m.size() ? dist / double(m.size()) : 0.0;
  st.threshold_mask_feasible = check_feasible(thresholded, pattern).ok;
  Mat projected = project_structured(m, pattern);
  double err = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) err += std::abs(m[i] - projected[i]);
  st.projection_error = m.size() ? err / double(m.size()) : 0.0;
  return st;
}

}  // namespace maskanneal
