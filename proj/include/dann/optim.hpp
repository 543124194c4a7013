#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dann/autodiff.hpp"

namespace dann {

struct AdamState {
  Tensor m;
  Tensor v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(const Shape& shape) : m(shape), v(shape) {}
};

/// One bias-corrected Adam update of `param` in place.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state,
                      double lr) {
  if (grad.shape() != param.shape()) {
    throw Error("adam_step: gradient shape " + shape_str(grad.shape()) +
                " does not match parameter " + shape_str(param.shape()));
  }
  if (!(lr > 0.0)) throw Error("adam_step: learning rate must be > 0");
  if (state.m.shape() != param.shape()) state.m = Tensor(param.shape());
  if (state.v.shape() != param.shape()) state.v = Tensor(param.shape());
  state.t += 1;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double gi = grad[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * gi;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * gi * gi;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

/// Adam over a fixed list of parameters; frozen parameters are skipped.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Parameter*> params, double lr) : params_(std::move(params)), lr_(lr) {
    if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be > 0");
    states_.reserve(params_.size());
    for (Parameter* p : params_) states_.emplace_back(p->value.shape());
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter* p = params_[i];
      if (!p->trainable) continue;
      if (p->grad.shape() != p->value.shape()) p->zero_grad();
      adam_step(p->value, p->grad, states_[i], lr_);
    }
  }

  double lr() const noexcept { return lr_; }
  const std::vector<Parameter*>& params() const noexcept { return params_; }
  std::vector<AdamState>& states() noexcept { return states_; }
  const std::vector<AdamState>& states() const noexcept { return states_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<AdamState> states_;
  double lr_ = 0.01;
};

/// Clamps every element into [-c, c].
inline void clip_params(std::span<Tensor* const> params, double c) {
  if (!(c > 0.0)) throw Error("clip_params: clip value must be > 0");
  for (Tensor* t : params) {
    for (double& v : t->data()) {
      if (v > c) v = c;
      else if (v < -c) v = -c;
    }
  }
}

inline void clip_params(std::span<Parameter* const> params, double c) {
  std::vector<Tensor*> tensors;
  tensors.reserve(params.size());
  for (Parameter* p : params) tensors.push_back(&p->value);
  clip_params(std::span<Tensor* const>(tensors), c);
}

/// Rescales each output unit's incoming weight vector to l2-norm <= s. The
/// weight is stored [inputs x outputs], so a unit's vector is a column.
inline void max_norm_columns(Tensor& weight, double s) {
  if (!(s > 0.0)) throw Error("max_norm: bound must be > 0");
  const std::size_t r = weight.rows();
  const std::size_t c = weight.cols();
  for (std::size_t j = 0; j < c; ++j) {
    double sq = 0.0;
    for (std::size_t i = 0; i < r; ++i) sq += weight.at(i, j) * weight.at(i, j);
    const double norm = std::sqrt(sq);
    if (norm > s) {
      const double f = s / norm;
      for (std::size_t i = 0; i < r; ++i) weight.at(i, j) *= f;
    }
  }
}

}  // namespace dann
