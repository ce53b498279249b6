#include "agm/optim.hpp"

#include <algorithm>
#include <cmath>

#include "agm/errors.hpp"

namespace agm {

AdamW::AdamW(std::vector<ad::Var> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.push_back(ad::Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(ad::Matrix::Zero(p.rows(), p.cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const ad::Matrix& g = p.grad();
    if (g.size() == 0) continue;
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    auto& w = p.mutable_value();
    if (options_.weight_decay > 0.0) w *= (1.0 - lr * options_.weight_decay);
    w.array() -= lr * (m_[i].array() / c1) /
                 ((v_[i].array() / c2).sqrt() + options_.eps);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void sgd_step(std::span<ad::Var> params, double lr) {
  for (auto& p : params) {
    if (p.grad().size() == 0) continue;
    p.mutable_value() -= lr * p.grad();
  }
}

double clip_grad_norm(std::span<ad::Var> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.grad().size() != 0) sq += p.grad().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / (norm + 1e-6);
    for (auto& p : params) {
      if (p.grad().size() != 0) p.mutable_grad() *= s;
    }
  }
  return norm;
}

LinearWarmupSchedule::LinearWarmupSchedule(double base_lr,
                                           std::int64_t total_steps,
                                           double warmup_ratio)
    : base_lr_(base_lr),
      total_steps_(std::max<std::int64_t>(total_steps, 1)),
      warmup_steps_(static_cast<std::int64_t>(
          std::ceil(warmup_ratio * static_cast<double>(total_steps)))) {
  if (warmup_ratio < 0.0 || warmup_ratio > 1.0) {
    throw ConfigError("warmup_ratio must lie in [0, 1]");
  }
}

double LinearWarmupSchedule::lr(std::int64_t step) const {
  if (step < warmup_steps_) {
    return base_lr_ * static_cast<double>(step + 1) /
           static_cast<double>(warmup_steps_);
  }
  const double remaining =
      static_cast<double>(total_steps_ - step) /
      static_cast<double>(std::max<std::int64_t>(total_steps_ - warmup_steps_, 1));
  return base_lr_ * std::clamp(remaining, 0.0, 1.0);
}

}  // namespace agm
