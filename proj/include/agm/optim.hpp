#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "agm/autodiff.hpp"

namespace agm {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam over a fixed parameter list. Parameters without
// an accumulated gradient are skipped for that step.
class AdamW {
 public:
  AdamW(std::vector<ad::Var> params, AdamWOptions options = {});

  void step(double lr);
  void zero_grad();
  const std::vector<ad::Var>& params() const { return params_; }
  std::int64_t steps_taken() const { return t_; }

 private:
  std::vector<ad::Var> params_;
  AdamWOptions options_;
  std::vector<ad::Matrix> m_;
  std::vector<ad::Matrix> v_;
  std::int64_t t_ = 0;
};

// Plain gradient descent: p -= lr * grad.
void sgd_step(std::span<ad::Var> params, double lr);

// Scales gradients in place so their global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(std::span<ad::Var> params, double max_norm);

// Linear warmup over the first warmup_ratio * total_steps, then linear decay
// to zero at total_steps.
class LinearWarmupSchedule {
 public:
  LinearWarmupSchedule(double base_lr, std::int64_t total_steps,
                       double warmup_ratio);
  double lr(std::int64_t step) const;

 private:
  double base_lr_;
  std::int64_t total_steps_;
  std::int64_t warmup_steps_;
};

}  // namespace agm
