#pragma once

#include <functional>
#include <optional>

#include "attnstyle/backbone.hpp"

namespace attnstyle {

struct TilingSpec {
    int window = 64;  // latent units
    int stride = 32;  // <= window

    void validate() const {
        if (window < 1) throw std::invalid_argument("TilingSpec: window must be >= 1");
        if (stride < 1 || stride > window)
            throw std::invalid_argument("TilingSpec: stride must be in [1, window]");
    }
};

struct SamplerConfig {
    int steps = 50;
    double cfg_scale = 7.0;
    int inner_steps = 2;    // M; 0 degenerates to plain DDIM (+ optional AdaIN)
    double lr = 0.015;      // 0.05 for non-text tasks
    double lambda = 0.0;    // content weight; used only with a content image
    bool adain = true;
    bool reset_adam_per_step = false;  // ablation switch
    std::optional<TilingSpec> tiling;
    uint64_t seed = 0;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("SamplerConfig: steps must be >= 1");
        if (inner_steps < 0) throw std::invalid_argument("SamplerConfig: inner_steps must be >= 0");
        if (lr <= 0) throw std::invalid_argument("SamplerConfig: lr must be > 0");
        if (lambda < 0) throw std::invalid_argument("SamplerConfig: lambda must be >= 0");
        if (tiling) tiling->validate();
    }
};

// Deterministic DDIM update (eta = 0):
//   z0_hat = (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t)
//   z_prev = sqrt(ab_prev) z0_hat + sqrt(1-ab_prev) eps
Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_pred,
                 const DiffusionSchedule& sched);

// Per-channel mean/std modulation of z toward z_ref's statistics. A zero-std
// channel passes through shifted to z_ref's mean.
Tensor adain(const Tensor& z, const Tensor& z_ref);

struct StepTrace {
    int t = 0;
    double ad_before = 0.0;
    double ad_after = 0.0;
    bool inner_increased = false;
};

struct SampleResult {
    Tensor latent;  // z_0
    std::vector<StepTrace> trace;
};

struct GuidedSampleInputs {
    std::string prompt;
    const Image* style = nullptr;            // required
    const Image* content = nullptr;          // optional, adds lambda * content loss
    const Tensor* structural = nullptr;      // optional ControlNet-style condition
    std::optional<Tensor> start_latent;      // SDEdit: resume below start_t
    std::optional<int> start_t;
    // Output latent shape when it differs from the style latent (expansion).
    std::optional<std::vector<int64_t>> target_latent_shape;
};

// Algorithm: seeded Gaussian z_T; per DDIM step, CFG noise prediction, DDIM
// update, noise the style latent to t-1, AdaIN toward it, then `inner_steps`
// Adam updates on the AD loss (plus content loss when configured). One Adam
// state persists across timesteps unless reset_adam_per_step.
SampleResult guided_sample(const GuidedSampleInputs& in, const SamplerConfig& cfg,
                           const Backbone& backbone);

// Partially noised layout for structure-preserving sampling. Returns the
// noised latent and t_start = round(s * T_max).
std::pair<Tensor, int> sdedit_init(const Image& layout, double strength, uint64_t seed,
                                   const Backbone& backbone);

// Overlapping-window positions covering [0, size) with the given window and
// stride; the last window is clamped flush to the end.
std::vector<int> tile_positions(int size, int window, int stride);

// Noise prediction over an oversized latent: per-window predictions averaged
// with uniform weights on overlaps. Degenerates bitwise to predict_noise when
// the latent is exactly one window.
Tensor tiled_predict(const Tensor& z_big, int t, const std::string& prompt, double cfg_scale,
                     const TilingSpec& tiling, const Backbone& backbone);

// Guided sampling over a latent larger than the backbone window: tiled DDIM
// noise prediction and per-tile AD-loss gradients fused by uniform averaging.
// Decodes with the backbone's (possibly fine-tuned) decoder.
Image expand_texture(const Image& example, int target_h, int target_w, const SamplerConfig& cfg,
                     const Backbone& backbone, SampleResult* result_out = nullptr);

}  // namespace attnstyle
