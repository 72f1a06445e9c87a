#include "attnstyle/sample.hpp"

#include <cmath>
#include <iostream>

#include "attnstyle/adam.hpp"

namespace attnstyle {

namespace {

constexpr int64_t kMaxWindowTokens = 16384;

// Evenly spaced DDIM grid: times[i] = round(t_max * i / steps), i in [0, steps].
std::vector<int> ddim_times(int steps, int t_max) {
    std::vector<int> times(static_cast<size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i)
        times[static_cast<size_t>(i)] = int(std::lround(double(t_max) * double(i) / double(steps)));
    return times;
}

Tensor copy_window(const Tensor& z, int y0, int x0, int wh, int ww) {
    int64_t c = z.dim(0), H = z.dim(1), W = z.dim(2);
    Tensor out({c, int64_t(wh), int64_t(ww)});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int y = 0; y < wh; ++y)
            for (int x = 0; x < ww; ++x)
                out[ch * wh * ww + int64_t(y) * ww + x] =
                    z[ch * H * W + int64_t(y0 + y) * W + (x0 + x)];
    return out;
}

void add_window(Tensor& acc, Tensor& count, const Tensor& win, int y0, int x0) {
    int64_t c = acc.dim(0), H = acc.dim(1), W = acc.dim(2);
    int64_t wh = win.dim(1), ww = win.dim(2);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < wh; ++y)
            for (int64_t x = 0; x < ww; ++x) {
                acc[ch * H * W + (y0 + y) * W + (x0 + x)] += win[ch * wh * ww + y * ww + x];
                if (ch == 0) count[(y0 + y) * W + (x0 + x)] += 1.0;
            }
}

void divide_by_count(Tensor& acc, const Tensor& count) {
    int64_t c = acc.dim(0), n = count.numel();
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < n; ++i) acc[ch * n + i] /= count[i];
}

}  // namespace

Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_pred,
                 const DiffusionSchedule& sched) {
    if (t_prev < 0 || t <= t_prev)
        throw std::invalid_argument("ddim_step: need t > t_prev >= 0, got t=" + std::to_string(t) +
                                    " t_prev=" + std::to_string(t_prev));
    check_same_shape(z_t, eps_pred, "ddim_step");
    double ab_t = sched.at(t), ab_prev = sched.at(t_prev);
    double sq_t = std::sqrt(ab_t), sq1_t = std::sqrt(1.0 - ab_t);
    double sq_p = std::sqrt(ab_prev), sq1_p = std::sqrt(1.0 - ab_prev);
    Tensor out = z_t;
    for (int64_t i = 0; i < out.numel(); ++i) {
        double z0_hat = (z_t[i] - sq1_t * eps_pred[i]) / sq_t;
        out[i] = sq_p * z0_hat + sq1_p * eps_pred[i];
    }
    return out;
}

Tensor adain(const Tensor& z, const Tensor& z_ref) {
    if (z.rank() != 3 || z_ref.rank() != 3 || z.dim(0) != z_ref.dim(0))
        throw std::invalid_argument("adain: inputs must be [c,H,W] with equal channel counts");
    int64_t c = z.dim(0);
    int64_t n = z.dim(1) * z.dim(2), n_ref = z_ref.dim(1) * z_ref.dim(2);
    Tensor out = z;
    for (int64_t ch = 0; ch < c; ++ch) {
        const double* src = z.data() + ch * n;
        const double* ref = z_ref.data() + ch * n_ref;
        double mu = 0.0, mu_r = 0.0;
        for (int64_t i = 0; i < n; ++i) mu += src[i];
        mu /= double(n);
        for (int64_t i = 0; i < n_ref; ++i) mu_r += ref[i];
        mu_r /= double(n_ref);
        double var = 0.0, var_r = 0.0;
        for (int64_t i = 0; i < n; ++i) var += (src[i] - mu) * (src[i] - mu);
        var /= double(n);
        for (int64_t i = 0; i < n_ref; ++i) var_r += (ref[i] - mu_r) * (ref[i] - mu_r);
        var_r /= double(n_ref);
        double sigma = std::sqrt(var), sigma_r = std::sqrt(var_r);
        double* dst = out.data() + ch * n;
        if (sigma < 1e-12) {
            for (int64_t i = 0; i < n; ++i) dst[i] = src[i] - mu + mu_r;
        } else {
            for (int64_t i = 0; i < n; ++i) dst[i] = (src[i] - mu) / sigma * sigma_r + mu_r;
        }
    }
    return out;
}

std::vector<int> tile_positions(int size, int window, int stride) {
    if (window > size)
        throw std::invalid_argument("tile_positions: window " + std::to_string(window) +
                                    " exceeds latent size " + std::to_string(size));
    std::vector<int> pos;
    for (int p = 0;; p += stride) {
        if (p + window >= size) {
            pos.push_back(size - window);  // clamp flush to the end
            break;
        }
        pos.push_back(p);
    }
    return pos;
}

Tensor tiled_predict(const Tensor& z_big, int t, const std::string& prompt, double cfg_scale,
                     const TilingSpec& tiling, const Backbone& backbone) {
    tiling.validate();
    int H = int(z_big.dim(1)), W = int(z_big.dim(2));
    if (H == tiling.window && W == tiling.window)
        return backbone.predict_noise(z_big, t, prompt, cfg_scale);
    auto ys = tile_positions(H, std::min(tiling.window, H), tiling.stride);
    auto xs = tile_positions(W, std::min(tiling.window, W), tiling.stride);
    int wh = std::min(tiling.window, H), ww = std::min(tiling.window, W);
    Tensor acc(z_big.shape());
    Tensor count({int64_t(H), int64_t(W)});
    for (int y0 : ys)
        for (int x0 : xs) {
            Tensor win = copy_window(z_big, y0, x0, wh, ww);
            Tensor eps = backbone.predict_noise(win, t, prompt, cfg_scale);
            add_window(acc, count, eps, y0, x0);
        }
    divide_by_count(acc, count);
    return acc;
}

std::pair<Tensor, int> sdedit_init(const Image& layout, double strength, uint64_t seed,
                                   const Backbone& backbone) {
    if (!(strength > 0.0 && strength < 1.0))
        throw std::invalid_argument("sdedit_init: strength must be in (0,1)");
    Tensor z0 = backbone.encode(layout);
    int t_start = int(std::lround(strength * backbone.schedule().t_max()));
    if (t_start == 0) return {z0, 0};
    std::mt19937_64 rng(seed ^ 0x5ded17ULL);
    Tensor eps = Tensor::randn(z0.shape(), rng);
    return {add_noise(z0, t_start, eps, backbone.schedule()), t_start};
}

SampleResult guided_sample(const GuidedSampleInputs& in, const SamplerConfig& cfg,
                           const Backbone& backbone) {
    cfg.validate();
    if (!in.style) throw std::invalid_argument("guided_sample: style image required");
    const auto& sched = backbone.schedule();
    Tensor z_style = backbone.encode(*in.style);
    std::optional<Tensor> z_content;
    if (in.content) z_content = backbone.encode(*in.content);

    SampleResult res;
    std::mt19937_64 rng_init(cfg.seed);
    std::mt19937_64 rng_ref(cfg.seed ^ 0x5eedcafeULL);  // dedicated reference-noise stream
    std::mt19937_64 rng_content(cfg.seed ^ 0xc0ffeeULL);

    int t_hi = sched.t_max();
    if (in.start_latent) {
        if (!in.start_t) throw std::invalid_argument("guided_sample: start_latent needs start_t");
        res.latent = *in.start_latent;
        t_hi = *in.start_t;
    } else if (in.target_latent_shape) {
        res.latent = Tensor::randn(*in.target_latent_shape, rng_init);
    } else {
        res.latent = Tensor::randn(z_style.shape(), rng_init);
    }

    const bool tiled = cfg.tiling.has_value();
    if (tiled) {
        int64_t wt = int64_t(cfg.tiling->window) * cfg.tiling->window;
        if (wt > kMaxWindowTokens)
            throw std::invalid_argument(
                "guided_sample: window of " + std::to_string(wt) +
                " tokens exceeds the per-pass budget of " + std::to_string(kMaxWindowTokens) +
                "; reduce the window to <= " +
                std::to_string(int(std::sqrt(double(kMaxWindowTokens)))) +
                " or use a smaller stride with partial windows");
    }
    const bool guidance = cfg.inner_steps > 0;
    Adam opt(cfg.lr);

    auto times = ddim_times(cfg.steps, sched.t_max());
    // SDEdit: run only the part of the grid at or below t_hi.
    int i_hi = cfg.steps;
    while (i_hi > 0 && times[static_cast<size_t>(i_hi)] > t_hi) --i_hi;
    if (in.start_latent && i_hi == 0)
        return res;  // strength so small that no denoising step remains

    int lat_h = int(res.latent.dim(1)), lat_w = int(res.latent.dim(2));
    int wh = tiled ? std::min(cfg.tiling->window, lat_h) : lat_h;
    int ww = tiled ? std::min(cfg.tiling->window, lat_w) : lat_w;
    std::vector<int> ys{0}, xs{0};
    if (tiled) {
        ys = tile_positions(lat_h, wh, cfg.tiling->stride);
        xs = tile_positions(lat_w, ww, cfg.tiling->stride);
    }

    for (int i = i_hi; i >= 1; --i) {
        int t = times[static_cast<size_t>(i)], t_prev = times[static_cast<size_t>(i - 1)];
        if (t == t_prev) continue;

        Tensor eps = tiled
                         ? tiled_predict(res.latent, t, in.prompt, cfg.cfg_scale, *cfg.tiling,
                                         backbone)
                         : backbone.predict_noise(res.latent, t, in.prompt, cfg.cfg_scale,
                                                  in.structural);
        res.latent = ddim_step(res.latent, t, t_prev, eps, sched);

        if (!guidance && !cfg.adain) continue;  // plain DDIM trajectory, bit for bit

        Tensor eps_ref = Tensor::randn(z_style.shape(), rng_ref);
        Tensor zs_prev = add_noise(z_style, t_prev, eps_ref, sched);
        if (cfg.adain) res.latent = adain(res.latent, zs_prev);
        if (!guidance) continue;

        AttentionTaps reference = backbone.extract_detached(zs_prev, t_prev, {});
        std::optional<AttentionTaps> content_taps;
        if (z_content && cfg.lambda > 0.0) {
            Tensor eps_c = Tensor::randn(z_content->shape(), rng_content);
            content_taps =
                backbone.extract_detached(add_noise(*z_content, t_prev, eps_c, sched), t_prev, {});
        }

        auto eval_loss = [&](const Tensor& z, Tensor* grad_out) {
            // Per-tile evaluation; a single full-size tile in the non-tiled case.
            Tensor grad_acc(z.shape());
            Tensor count({z.dim(1), z.dim(2)});
            double loss_sum = 0.0;
            int tiles = 0;
            for (int y0 : ys)
                for (int x0 : xs) {
                    Tensor win = (tiled && (int(z.dim(1)) != wh || int(z.dim(2)) != ww))
                                     ? copy_window(z, y0, x0, wh, ww)
                                     : z;
                    auto zv = ag::leaf(win, grad_out != nullptr);
                    auto taps = backbone.forward(zv, t_prev, {}).taps;
                    ag::Var loss = ad_loss(taps, reference);
                    if (content_taps)
                        loss = total_loss(loss, content_loss(taps, *content_taps), cfg.lambda);
                    loss_sum += loss->value[0];
                    ++tiles;
                    if (grad_out) {
                        ag::backward(loss);
                        add_window(grad_acc, count, zv->grad, y0, x0);
                    }
                }
            if (grad_out) {
                divide_by_count(grad_acc, count);
                *grad_out = std::move(grad_acc);
            }
            return loss_sum / double(tiles);
        };

        if (cfg.reset_adam_per_step) opt.reset();
        StepTrace st;
        st.t = t_prev;
        for (int m = 0; m < cfg.inner_steps; ++m) {
            Tensor grad;
            double lv = eval_loss(res.latent, &grad);
            if (m == 0) st.ad_before = lv;
            if (!std::isfinite(lv))
                throw std::runtime_error("guided_sample: non-finite loss at step t=" +
                                         std::to_string(t_prev));
            opt.step(res.latent, grad);
        }
        st.ad_after = eval_loss(res.latent, nullptr);
        if (st.ad_after > st.ad_before + 1e-6) {
            st.inner_increased = true;
            std::cerr << "[attnstyle] inner loop increased AD loss at t=" << t_prev << " ("
                      << st.ad_before << " -> " << st.ad_after << ")\n";
        }
        for (int64_t j = 0; j < res.latent.numel(); ++j)
            if (!std::isfinite(res.latent[j]))
                throw std::runtime_error("guided_sample: non-finite latent at step t=" +
                                         std::to_string(t_prev));
        res.trace.push_back(st);
    }
    return res;
}

Image expand_texture(const Image& example, int target_h, int target_w, const SamplerConfig& cfg,
                     const Backbone& backbone, SampleResult* result_out) {
    if (target_h < example.h || target_w < example.w)
        throw std::invalid_argument("expand_texture: target must be at least the example size");
    if (!cfg.tiling) throw std::invalid_argument("expand_texture: cfg.tiling must be set");
    int f = backbone.codec_factor();
    if (target_h % f != 0 || target_w % f != 0)
        throw std::invalid_argument("expand_texture: target resolution not divisible by codec "
                                    "factor " + std::to_string(f));
    GuidedSampleInputs in;
    in.style = &example;
    in.target_latent_shape = {{int64_t(backbone.latent_channels()), int64_t(target_h / f),
                               int64_t(target_w / f)}};
    SampleResult res = guided_sample(in, cfg, backbone);
    if (result_out) *result_out = res;
    return backbone.decode(res.latent);
}

}  // namespace attnstyle
