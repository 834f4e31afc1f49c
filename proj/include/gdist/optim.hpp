#pragma once

#include <cmath>
#include <vector>

#include "gdist/nn.hpp"

namespace gdist::optim {

/// SGD with classical momentum: v = mu*v + g; p -= lr*v.
class Sgd {
public:
  Sgd() = default;
  Sgd(nn::ParameterList params, double momentum = 0.9, double weight_decay = 0.0)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.var.shape());
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto var = params_[i].var;
      const Tensor& g = var.grad();
      if (g.size() != var.value().size()) continue;
      Tensor& v = velocity_[i];
      Tensor& w = var.mutable_value();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k] + weight_decay_ * w[k];
        v[k] = momentum_ * v[k] + gk;
        w[k] -= lr * v[k];
      }
    }
  }

  void zero_grad() { nn::zero_grad(params_); }
  const nn::ParameterList& params() const { return params_; }

private:
  nn::ParameterList params_;
  std::vector<Tensor> velocity_;
  double momentum_ = 0.9;
  double weight_decay_ = 0.0;
};

class Adam {
public:
  Adam() = default;
  explicit Adam(nn::ParameterList params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto var = params_[i].var;
      const Tensor& g = var.grad();
      if (g.size() != var.value().size()) continue;
      Tensor& w = var.mutable_value();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
        v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
        w[k] -= lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
      }
    }
  }

  void zero_grad() { nn::zero_grad(params_); }
  const nn::ParameterList& params() const { return params_; }

private:
  nn::ParameterList params_;
  std::vector<Tensor> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

/// Step decay: lr * factor^(number of milestones passed).
inline double step_decay(double base_lr, std::size_t epoch, const std::vector<std::size_t>& milestones,
                         double factor = 0.1) {
  double lr = base_lr;
  for (auto m : milestones)
    if (epoch >= m) lr *= factor;
  return lr;
}

}  // namespace gdist::optim
