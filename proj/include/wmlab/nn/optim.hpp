#pragma once

#include "wmlab/nn/layers.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace wmlab::nn {

/// SGD with heavy-ball momentum and L2 weight decay (decay added to the
/// gradient before the momentum update).
template <typename Scalar>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(std::vector<NamedParam<Scalar>>& params, double lr) {
    if (velocity_.size() != params.size()) {
      velocity_.clear();
      for (auto& p : params) velocity_.push_back(Matrix<Scalar>::Zero(p.param->value.rows(), p.param->value.cols()));
    }
    const auto mu = static_cast<Scalar>(momentum_);
    const auto wd = static_cast<Scalar>(weight_decay_);
    const auto rate = static_cast<Scalar>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param<Scalar>& p = *params[i].param;
      Matrix<Scalar>& v = velocity_[i];
      if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) v = Matrix<Scalar>::Zero(p.value.rows(), p.value.cols());
      if (wd != Scalar(0))
        v = mu * v + p.grad + wd * p.value;
      else
        v = mu * v + p.grad;
      p.value -= rate * v;
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Matrix<Scalar>> velocity_;
};

/// ½‖θ‖² over all parameters.
template <typename Scalar>
double l2_half(const std::vector<NamedParam<Scalar>>& params) {
  double s = 0;
  for (const auto& p : params) s += static_cast<double>(p.param->value.squaredNorm());
  return 0.5 * s;
}

/// Learning rate for `epoch` (0-based) of `epochs` under a named schedule:
/// "constant", "cosine" or "step" (x0.1 at 50% and 75%).
inline double scheduled_lr(const std::string& schedule, double base, int epoch, int epochs) {
  if (schedule == "constant" || epochs <= 1) return base;
  if (schedule == "cosine") return 0.5 * base * (1.0 + std::cos(M_PI * epoch / epochs));
  if (schedule == "step") return base * (epoch >= epochs * 3 / 4 ? 0.01 : epoch >= epochs / 2 ? 0.1 : 1.0);
  throw std::invalid_argument("unknown learning-rate schedule '" + schedule + "'");
}

}  // namespace wmlab::nn
