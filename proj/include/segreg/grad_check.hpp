#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "segreg/tensor.hpp"

namespace segreg {

namespace detail {

inline void check_eps(double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw ValidationError("grad_check: eps must lie in [1e-6, 1e-3]");
}

inline double relative_gap(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

template <class F>
double scalar_value(F& f, const Tensor<double>& x) {
  NoGradGuard guard;
  const double v = f(x).item();
  if (!std::isfinite(v)) throw NumericError("grad_check: f(x) is not finite");
  return v;
}

}  // namespace detail

/// Largest relative gap between the autodiff gradient of `f` at `x` and a
/// central-difference estimate, over all coordinates of `x`.
template <class F>
double grad_check(F f, const Tensor<double>& x, double eps = 1e-6) {
  detail::check_eps(eps);
  auto leaf = x.detach(true);
  auto y = f(leaf);
  if (!std::isfinite(y.item())) throw NumericError("grad_check: f(x) is not finite");
  y.backward();
  std::vector<double> analytic(x.numel(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  double worst = 0.0;
  std::vector<double> probe(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = detail::scalar_value(f, Tensor<double>(x.shape(), probe));
    probe[i] = saved - eps;
    const double down = detail::scalar_value(f, Tensor<double>(x.shape(), probe));
    probe[i] = saved;
    worst = std::max(worst, detail::relative_gap(analytic[i], (up - down) / (2 * eps)));
  }
  return worst;
}

/// Same check over a set of parameter leaves read by a closure `f()`.
///
/// Parameters are perturbed in place and restored. When `max_coords` is set,
/// only an evenly strided subset of at most that many coordinates per tensor
/// is probed.
template <class F>
double grad_check_params(F f, std::vector<Tensor<double>>& params, double eps = 1e-6,
                         std::optional<std::size_t> max_coords = std::nullopt) {
  detail::check_eps(eps);
  for (auto& p : params) p.zero_grad();
  auto y = f();
  if (!std::isfinite(y.item())) throw NumericError("grad_check: f(x) is not finite");
  y.backward();

  auto value = [&] {
    NoGradGuard guard;
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: f(x) is not finite");
    return v;
  };

  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto data = p.mutable_data();
    std::size_t stride = 1;
    if (max_coords && *max_coords > 0 && data.size() > *max_coords) stride = (data.size() + *max_coords - 1) / *max_coords;
    for (std::size_t i = 0; i < data.size(); i += stride) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = value();
      data[i] = saved - eps;
      const double down = value();
      data[i] = saved;
      worst = std::max(worst, detail::relative_gap(analytic[i], (up - down) / (2 * eps)));
    }
    p.zero_grad();
  }
  return worst;
}

}  // namespace segreg
