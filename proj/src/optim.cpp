#include "etl/optim.hpp"

#include <cmath>

#include "etl/errors.hpp"

namespace etl {

void sgd_step(std::vector<Tensor>& params, double lr) {
  if (!(lr > 0.0)) throw Error("sgd_step: learning rate must be positive");
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    auto g = p.grad();
    check_finite(g, "sgd_step gradient");
    auto v = p.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  if (!(options_.lr > 0.0)) throw Error("Adam: learning rate must be positive");
  for (const Tensor& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  for (const Tensor& p : params_) {
    if (p.has_grad()) check_finite(p.grad(), "Adam gradient");
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(options_.beta1, t);
  const double c2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace etl
