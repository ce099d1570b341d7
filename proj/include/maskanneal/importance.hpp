#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "maskanneal/autodiff.hpp"
#include "maskanneal/mat.hpp"

namespace maskanneal {

/// Running estimate of the loss Hessian diagonal for one layer, shaped like
/// the layer's weight matrix. Fed by Hutchinson probes (Hv).v with
/// Rademacher v.
struct HessianDiagState {
  enum class Averaging { ema, uniform };

  Mat ema;  // empty until the first sample
  double decay = 0.9;
  Averaging averaging = Averaging::ema;
  long sample_count = 0;
  double epsilon = 1e-8;

  HessianDiagState() = default;
  HessianDiagState(std::size_t rows, std::size_t cols, double decay_ = 0.9,
                   double epsilon_ = 1e-8)
      : ema(rows, cols, 0.0), decay(decay_), epsilon(epsilon_) {
    // decay 0 degenerates to keeping only the latest sample
    require(decay_ >= 0.0 && decay_ < 1.0, "hessian ema decay must be in [0,1)");
  }
};

/// Folds one Hutchinson sample (Hv).v into the state. The first sample
/// initializes the average directly; afterwards
/// ema <- decay*ema + (1-decay)*sample (or a running mean in uniform mode).
inline void hutchinson_update(HessianDiagState& state, const std::vector<double>& hv,
                              const std::vector<double>& v) {
  require(hv.size() == state.ema.size() && v.size() == state.ema.size(),
          "hutchinson_update: length mismatch");
  for (double x : v)
    require(x == 1.0 || x == -1.0, "hutchinson_update: probe must be Rademacher");
  for (double x : hv) require(std::isfinite(x), "hutchinson_update: non-finite hvp result");

  const bool first = state.sample_count == 0;
  double d = state.decay;
  if (state.averaging == HessianDiagState::Averaging::uniform)
    d = double(state.sample_count) / double(state.sample_count + 1);
  for (std::size_t i = 0; i < state.ema.size(); ++i) {
    const double sample = hv[i] * v[i];
    state.ema[i] = first ? sample : d * state.ema[i] + (1.0 - d) * sample;
  }
  ++state.sample_count;
}

/// OBD-style importance of each weight plus its layer-wise standardization.
struct ImportanceScore {
  Mat raw;           // (max(ema,0) + eps) .* W^2
  Mat standardized;  // (raw - mu) / (sigma + eps_std)
  double mu = 0.0;
  double sigma = 0.0;
};

/// Importance from curvature and magnitude. Negative diagonal estimates are
/// clamped to zero so the score stays a sensitivity magnitude; before the
/// first probe the score reduces to eps*W^2, i.e. magnitude ranking.
inline ImportanceScore compute_score(const Mat& w, const HessianDiagState& state,
                                     double std_epsilon = 1e-8) {
  require(w.rows() == state.ema.rows() && w.cols() == state.ema.cols(),
          "compute_score: weight/state shape mismatch");
  require(w.all_finite() && state.ema.all_finite(), "compute_score: non-finite input");

  ImportanceScore s;
  s.raw = Mat(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double h = state.sample_count > 0 ? std::max(state.ema[i], 0.0) : 0.0;
    s.raw[i] = (h + state.epsilon) * w[i] * w[i];
  }
  s.mu = s.raw.mean();
  double var = 0.0;
  for (std::size_t i = 0; i < s.raw.size(); ++i) {
    const double d = s.raw[i] - s.mu;
    var += d * d;
  }
  s.sigma = std::sqrt(var / double(s.raw.size()));
  s.standardized = Mat(w.rows(), w.cols());
  for (std::size_t i = 0; i < s.raw.size(); ++i)
    s.standardized[i] = (s.raw[i] - s.mu) / (s.sigma + std_epsilon);
  return s;
}

/// Exact loss change from zeroing one flat weight index of one parameter:
/// L(w_i = 0) - L(w_i). Direct double evaluation; intended for tiny models.
template <class Real>
double delta_loss_from_zeroing(
    const std::function<ad::Tensor<Real>(ad::Tape<Real>&)>& loss_builder,
    ad::Tensor<Real>& param, std::size_t flat_index) {
  const Real saved = param.values()[flat_index];
  ad::Tape<Real> tape;
  const double base = double(loss_builder(tape).item());
  param.values()[flat_index] = Real(0);
  ad::Tape<Real> tape2;
  const double zeroed = double(loss_builder(tape2).item());
  param.values()[flat_index] = saved;
  return zeroed - base;
}

}  // namespace maskanneal
