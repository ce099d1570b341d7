#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "maskanneal/autodiff.hpp"

namespace maskanneal {

/// Momentum SGD or Adam over a fixed parameter list. State buffers are keyed
/// by parameter order, so the list must be identical on every step.
class Optimizer {
 public:
  enum class Kind { sgd, adam };

  Optimizer() = default;
  Optimizer(Kind kind, double lr, double momentum = 0.9, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8)
      : kind_(kind), lr_(lr), momentum_(momentum), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  static Kind parse_kind(const std::string& s) {
    if (s == "sgd") return Kind::sgd;
    if (s == "adam") return Kind::adam;
    throw std::invalid_argument("unknown optimizer kind: " + s);
  }

  Kind kind() const { return kind_; }
  double learning_rate() const { return lr_; }
  long step_count() const { return t_; }

  void step(std::vector<ad::TensorD>& params) {
    if (slot1_.size() != params.size()) {
      slot1_.assign(params.size(), {});
      slot2_.assign(params.size(), {});
    }
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i].values();
      auto& g = params[i].grad();
      if (kind_ == Kind::sgd) {
        auto& buf = slot1_[i];
        if (buf.size() != w.size()) buf.assign(w.size(), 0.0);
        for (std::size_t k = 0; k < w.size(); ++k) {
          buf[k] = momentum_ * buf[k] + g[k];
          w[k] -= lr_ * buf[k];
        }
      } else {
        auto& m = slot1_[i];
        auto& v = slot2_[i];
        if (m.size() != w.size()) {
          m.assign(w.size(), 0.0);
          v.assign(w.size(), 0.0);
        }
        const double bc1 = 1.0 - std::pow(beta1_, double(t_));
        const double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (std::size_t k = 0; k < w.size(); ++k) {
          m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
          v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
          w[k] -= lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
        }
      }
      params[i].zero_grad();
    }
  }

  // state access for checkpointing
  const std::vector<std::vector<double>>& slot1() const { return slot1_; }
  const std::vector<std::vector<double>>& slot2() const { return slot2_; }
  void restore(long t, std::vector<std::vector<double>> s1, std::vector<std::vector<double>> s2) {
    t_ = t;
    slot1_ = std::move(s1);
    slot2_ = std::move(s2);
  }

 private:
  Kind kind_ = Kind::sgd;
  double lr_ = 0.05;
  double momentum_ = 0.9;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<std::vector<double>> slot1_, slot2_;  // sgd: momentum; adam: m, v
};

}  // namespace maskanneal
