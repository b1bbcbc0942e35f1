#pragma once

#include <cmath>
#include <vector>

#include "ragkit/tensor.hpp"

namespace ragkit {

// Adaptive per-parameter optimizer (Adam). State order follows the parameter
// list handed to step(), which must be stable across calls.
template <typename T>
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t steps() const { return t_; }

  void step(const std::vector<Tensor<T>*>& params) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->numel(), 0.0);
        v_.emplace_back(p->numel(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      Tensor<T>* p = params[pi];
      if (!p->grad) continue;
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (size_t i = 0; i < p->numel(); ++i) {
        const double g = static_cast<double>((*p->grad)[i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        (*p->data)[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

template <typename T>
void zero_grads(const std::vector<Tensor<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace ragkit
