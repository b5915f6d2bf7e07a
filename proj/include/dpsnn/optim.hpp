#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dpsnn/errors.hpp"
#include "dpsnn/model_params.hpp"

namespace dpsnn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("Adam: learning rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("Adam: moment decays must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("Adam: eps must be > 0");
  }
};

/// Adam with bias correction. Moments live as long as the object; local training creates a
/// fresh optimizer every round.
class Adam {
 public:
  Adam(std::size_t dim, AdamConfig cfg = {}) : cfg_(cfg), m_(dim, 0.0), v_(dim, 0.0) { cfg_.validate(); }

  void step(ModelParams& params, std::span<const double> grad) {
    if (grad.size() != m_.size() || params.size() != m_.size()) throw ConfigError("Adam: dimension mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto& w = params.raw();
    for (std::size_t k = 0; k < m_.size(); ++k) {
      m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * grad[k];
      v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * grad[k] * grad[k];
      w[k] -= cfg_.lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + cfg_.eps);
    }
  }

  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace dpsnn
