#pragma once

#include <vector>

#include "attnstyle/tensor.hpp"

namespace attnstyle {

// Cumulative-product noise coefficients alpha_bar_t for t in [0, T_max].
// alpha_bar_0 == 1 so adding noise at t=0 is the identity.
struct DiffusionSchedule {
    std::vector<double> alpha_bar;

    int t_max() const { return static_cast<int>(alpha_bar.size()) - 1; }

    double at(int t) const {
        if (t < 0 || t > t_max())
            throw std::out_of_range("DiffusionSchedule: timestep " + std::to_string(t) +
                                    " outside [0," + std::to_string(t_max()) + "]");
        return alpha_bar[static_cast<size_t>(t)];
    }

    // Standard scaled-linear beta schedule: betas are the squares of a linear
    // ramp between sqrt(beta_start) and sqrt(beta_end).
    static DiffusionSchedule scaled_linear(int t_max, double beta_start = 0.00085,
                                           double beta_end = 0.012);

    void validate() const;
};

// sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps
Tensor add_noise(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& sched);

}  // namespace attnstyle
