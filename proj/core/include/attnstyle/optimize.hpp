#pragma once

#include "attnstyle/backbone.hpp"

namespace attnstyle {

struct OptimizeConfig {
    enum class Init { ContentLatent, RandomNoise, RegionFilled };

    int iterations = 200;
    double lr = 0.05;
    double lambda = 0.25;
    uint64_t seed = 0;
    Init init = Init::ContentLatent;
    // Opt-in memoization of reference/content taps per timestep. Results must
    // stay within 1e-3 relative loss of the recomputing path (they are exact
    // here: taps are deterministic in (latent, t)).
    bool cache_reference_taps = false;
    double residual_scale = 1.0;  // instrumentation only

    void validate() const {
        if (iterations < 0) throw std::invalid_argument("OptimizeConfig: iterations must be >= 0");
        if (lr <= 0) throw std::invalid_argument("OptimizeConfig: lr must be > 0");
        if (lambda < 0) throw std::invalid_argument("OptimizeConfig: lambda must be >= 0");
    }
};

// t(k) = round(T_max * (1 - k/N)), clamped to >= 1; non-increasing, starts at
// T_max.
std::vector<int> timestep_schedule(int iterations, int t_max);

struct OptimizeResult {
    Tensor latent;
    std::vector<double> total_trace;    // per iteration, loss before the step
    std::vector<double> ad_trace;
    std::vector<double> content_trace;  // empty when lambda == 0
};

// Pure backprop-through-taps latent optimization; the denoiser's noise output
// is never applied. Starts from the content latent (or noise/region fill per
// cfg.init) and runs cfg.iterations Adam steps on the scheduled timesteps.
OptimizeResult content_preserving_optimize(const Image& style, const Image& content,
                                           const OptimizeConfig& cfg, const Backbone& backbone);

// AD-loss-only optimization of a random latent (cfg.lambda ignored, treated
// as 0; cfg.init must be RandomNoise).
OptimizeResult texture_optimize(const Image& example, const OptimizeConfig& cfg,
                                const Backbone& backbone);

// Region-filled initialization + masked AD loss + Q-based content loss against
// the initialization.
OptimizeResult controlled_texture_optimize(const Image& src_texture, const LabelMap& src_seg,
                                           const LabelMap& tgt_seg, const OptimizeConfig& cfg,
                                           const Backbone& backbone);

// Fills each target pixel with a uniformly drawn same-label source pixel.
Image region_filled_init(const Image& src_texture, const LabelMap& src_seg,
                         const LabelMap& tgt_seg, uint64_t seed);

}  // namespace attnstyle
