#pragma once

#include <functional>
#include <vector>

#include "maskanneal/autodiff.hpp"

namespace maskanneal::ad {

enum class HvpBackend {
  finite_difference,  // central differences of first-order gradients
  double_backward,    // reverse-over-reverse, exact
};

template <class Real>
std::size_t total_param_size(const std::vector<Tensor<Real>>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

/// Gradient of loss_builder's output with respect to params, flattened in
/// param order. Each call evaluates on a fresh tape.
template <class Real>
std::vector<Real> flat_gradient(const std::function<Tensor<Real>(Tape<Real>&)>& loss_builder,
                                const std::vector<Tensor<Real>>& params) {
  Tape<Real> tape;
  Tensor<Real> loss = loss_builder(tape);
  auto grads = tape.gradients(loss, params);
  std::vector<Real> flat;
  flat.reserve(total_param_size(params));
  for (const auto& g : grads) flat.insert(flat.end(), g.values().begin(), g.values().end());
  return flat;
}

/// H*v for the Hessian of the scalar loss at the current parameter values.
///
/// finite_difference perturbs the parameters by +-h*v with
/// h = fd_scale * (1 + max|param|) and differences the gradients; it needs
/// only first-order reverse mode. double_backward differentiates grad.v on
/// the same tape and is exact (used as the high-accuracy reference).
/// Parameters are restored bit-exactly afterwards.
template <class Real>
std::vector<Real> hessian_vector_product(
    const std::function<Tensor<Real>(Tape<Real>&)>& loss_builder,
    std::vector<Tensor<Real>>& params, const std::vector<Real>& v,
    HvpBackend backend = HvpBackend::finite_difference, Real fd_scale = Real(1e-4)) {
  const std::size_t n = total_param_size(params);
  if (v.size() != n)
    throw std::invalid_argument("hessian_vector_product: |v| != total parameter count");

  if (backend == HvpBackend::double_backward) {
    Tape<Real> tape;
    Tensor<Real> loss = loss_builder(tape);
    auto grads = tape.gradients(loss, params);
    Tensor<Real> s = Tensor<Real>::zeros(1, 1);
    std::size_t off = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Mat vi(params[i].rows(), params[i].cols());
      for (std::size_t k = 0; k < vi.size(); ++k) vi[k] = double(v[off + k]);
      off += vi.size();
      s = tape.add(s, tape.sum(tape.mul(grads[i], Tensor<Real>::constant(vi))));
    }
    auto hv = tape.gradients(s, params);
    std::vector<Real> flat;
    flat.reserve(n);
    for (const auto& g : hv) flat.insert(flat.end(), g.values().begin(), g.values().end());
    return flat;
  }

  Real max_abs = 0;
  for (const auto& p : params)
    for (Real x : p.values()) max_abs = std::max(max_abs, std::abs(x));
  const Real h = fd_scale * (Real(1) + max_abs);

  std::vector<std::vector<Real>> saved;
  saved.reserve(params.size());
  for (const auto& p : params) saved.push_back(p.values());

  auto shift = [&](Real sign) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& dst = params[i].values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = saved[i][k] + sign * h * v[off + k];
      off += dst.size();
    }
  };

  shift(Real(1));
  std::vector<Real> gp = flat_gradient(loss_builder, params);
  shift(Real(-1));
  std::vector<Real> gm = flat_gradient(loss_builder, params);
  for (std::size_t i = 0; i < params.size(); ++i) params[i].values() = saved[i];

  std::vector<Real> hv(n);
  for (std::size_t i = 0; i < n; ++i) hv[i] = (gp[i] - gm[i]) / (2 * h);
  return hv;
}

}  // namespace maskanneal::ad
