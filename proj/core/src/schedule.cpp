#include "attnstyle/schedule.hpp"

#include <cmath>

namespace attnstyle {

DiffusionSchedule DiffusionSchedule::scaled_linear(int t_max, double beta_start, double beta_end) {
    if (t_max < 1) throw std::invalid_argument("DiffusionSchedule: t_max must be >= 1");
    DiffusionSchedule s;
    s.alpha_bar.resize(static_cast<size_t>(t_max) + 1);
    s.alpha_bar[0] = 1.0;
    double prod = 1.0;
    double s0 = std::sqrt(beta_start), s1 = std::sqrt(beta_end);
    for (int t = 1; t <= t_max; ++t) {
        double r = t_max == 1 ? 0.0 : double(t - 1) / double(t_max - 1);
        double beta = std::pow(s0 + (s1 - s0) * r, 2.0);
        prod *= (1.0 - beta);
        s.alpha_bar[static_cast<size_t>(t)] = prod;
    }
    s.validate();
    return s;
}

void DiffusionSchedule::validate() const {
    if (alpha_bar.size() < 2) throw std::invalid_argument("DiffusionSchedule: length must be >= 2");
    if (alpha_bar[0] != 1.0) throw std::invalid_argument("DiffusionSchedule: alpha_bar[0] must be 1");
    for (size_t t = 1; t < alpha_bar.size(); ++t) {
        if (!(alpha_bar[t] > 0.0 && alpha_bar[t] <= 1.0))
            throw std::invalid_argument("DiffusionSchedule: alpha_bar out of (0,1] at t=" +
                                        std::to_string(t));
        if (!(alpha_bar[t] < alpha_bar[t - 1]))
            throw std::invalid_argument("DiffusionSchedule: alpha_bar not strictly decreasing at t=" +
                                        std::to_string(t));
    }
}

Tensor add_noise(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
    check_same_shape(z0, eps, "add_noise");
    double ab = sched.at(t);
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out = z0;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

}  // namespace attnstyle
