#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "stochca/tensor.hpp"

namespace stochca {

struct OptimizerConfig {
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 10;
  std::size_t total_steps = 200;
  std::size_t batch_size = 16;
};

/// Linear warm-up followed by cosine decay to zero.
inline double scheduled_lr(const OptimizerConfig& c, std::size_t step) {
  if (step < c.warmup_steps) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  if (c.total_steps <= c.warmup_steps) return c.lr;
  const double progress =
      static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps);
  return 0.5 * c.lr * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

/// AdamW with decoupled weight decay.
class AdamW {
 public:
  AdamW(OptimizerConfig cfg, const std::vector<Parameter*>& params) : cfg_(cfg), params_(params) {
    for (Parameter* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  std::size_t step_count() const { return step_; }
  const OptimizerConfig& config() const { return cfg_; }

  /// Applies one update from the accumulated gradients, then clears them.
  void step() {
    const double lr = scheduled_lr(cfg_, step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      if (p.frozen) throw InvariantViolation("optimizer asked to update frozen parameter '" + p.name + "'");
      if (!p.grad) continue;
      Tensor& w = p.value;
      const Tensor& g = *p.grad;
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      const double decay = p.decay ? cfg_.weight_decay : 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + decay * w[j]);
      }
      p.zero_grad();
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace stochca
