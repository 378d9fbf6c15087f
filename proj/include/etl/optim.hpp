#pragma once

#include <cstddef>
#include <vector>

#include "etl/tensor.hpp"

namespace etl {

// Plain gradient descent: p -= lr * grad. Parameters without a gradient
// buffer are skipped.
void sgd_step(std::vector<Tensor>& params, double lr);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias-corrected moments. Moment buffers are bound to the
/// parameter list given at construction.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  void step();
  void zero_grad();

  std::size_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t step_ = 0;
};

}  // namespace etl
