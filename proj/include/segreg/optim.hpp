#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "segreg/errors.hpp"
#include "segreg/tensor.hpp"

namespace segreg {

/// SGD with heavy-ball momentum: v <- mu v + g; theta <- theta - lr v.
/// With clip_norm > 0 the gradient is first rescaled so that its global l2
/// norm does not exceed clip_norm.
template <class T>
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum = 0.9, double clip_norm = 0.0)
      : lr_(lr), momentum_(momentum), clip_norm_(clip_norm) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("optimizer: learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("optimizer: momentum must lie in [0,1)");
    if (!(clip_norm >= 0.0)) throw ValidationError("optimizer: clip_norm must be >= 0");
  }

  // Global l2 norm of the gradients seen by the last step, before clipping.
  double last_grad_norm() const { return last_norm_; }

  void step(std::vector<Tensor<T>>& params) {
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(p.numel(), T(0));
    }
    if (velocity_.size() != params.size()) throw ValidationError("optimizer: parameter list changed between steps");
    double sq = 0.0;
    for (const auto& p : params)
      if (p.has_grad())
        for (T g : p.grad()) sq += static_cast<double>(g) * g;
    last_norm_ = std::sqrt(sq);
    if (!std::isfinite(last_norm_)) throw NumericError("optimizer: non-finite gradient");
    const T factor = clip_norm_ > 0.0 && last_norm_ > clip_norm_ ? static_cast<T>(clip_norm_ / last_norm_) : T(1);
    const T lr = static_cast<T>(lr_), mu = static_cast<T>(momentum_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = mu * v[i] + factor * g[i];
        w[i] -= lr * v[i];
      }
      for (T x : w)
        if (!std::isfinite(x)) throw NumericError("optimizer: parameters became non-finite");
    }
  }

 private:
  double lr_, momentum_, clip_norm_;
  double last_norm_ = 0.0;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace segreg
