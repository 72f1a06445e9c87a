#pragma once

#include <cmath>

#include "attnstyle/tensor.hpp"

namespace attnstyle {

// Adam with standard defaults (beta1 0.9, beta2 0.999, eps 1e-8). One
// instance per parameter tensor; state persists across calls.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (lr <= 0) throw std::invalid_argument("Adam: learning rate must be positive");
    }

    void step(Tensor& param, const Tensor& grad) {
        check_same_shape(param, grad, "Adam::step");
        if (m_.numel() == 0) {
            m_ = Tensor(param.shape());
            v_ = Tensor(param.shape());
        } else {
            check_same_shape(param, m_, "Adam::step (state)");
        }
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (int64_t i = 0; i < param.numel(); ++i) {
            double g = grad[i];
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
            param[i] -= lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
        }
    }

    void reset() {
        m_ = Tensor();
        v_ = Tensor();
        t_ = 0;
    }

    double lr() const { return lr_; }

private:
    double lr_, beta1_, beta2_, eps_;
    Tensor m_, v_;
    int64_t t_ = 0;
};

}  // namespace attnstyle
