#include "attnstyle/optimize.hpp"

#include <cmath>
#include <map>
#include <unordered_map>

#include "attnstyle/adam.hpp"

namespace attnstyle {

std::vector<int> timestep_schedule(int iterations, int t_max) {
    if (iterations < 1) throw std::invalid_argument("timestep_schedule: iterations must be >= 1");
    std::vector<int> ts(static_cast<size_t>(iterations));
    for (int k = 0; k < iterations; ++k) {
        int t = int(std::lround(double(t_max) * (1.0 - double(k) / double(iterations))));
        ts[static_cast<size_t>(k)] = std::max(t, 1);
    }
    return ts;
}

namespace {

struct LoopInputs {
    Tensor init_latent;
    Tensor style_latent;
    const Tensor* content_latent = nullptr;  // null -> no content loss
    const GuidanceMask* masks = nullptr;     // null -> unmasked AD loss
};

OptimizeResult run_loop(const LoopInputs& in, const OptimizeConfig& cfg, const Backbone& backbone) {
    cfg.validate();
    OptimizeResult res;
    res.latent = in.init_latent;
    if (cfg.iterations == 0) return res;

    const bool use_content = in.content_latent != nullptr && cfg.lambda > 0.0;
    auto ts = timestep_schedule(cfg.iterations, backbone.schedule().t_max());
    Adam opt(cfg.lr);

    std::map<int, AttentionTaps> style_cache, content_cache;
    auto ref_taps = [&](const Tensor& lat, int t, std::map<int, AttentionTaps>& cache) {
        if (cfg.cache_reference_taps) {
            auto it = cache.find(t);
            if (it != cache.end()) return it->second;
            auto taps = backbone.extract_detached(lat, t, {});
            cache.emplace(t, taps);
            return taps;
        }
        return backbone.extract_detached(lat, t, {});
    };

    for (int k = 0; k < cfg.iterations; ++k) {
        int t = ts[static_cast<size_t>(k)];
        auto reference = ref_taps(in.style_latent, t, style_cache);

        auto z = ag::leaf(res.latent, true);
        auto target = backbone.forward(z, t, {}, cfg.residual_scale).taps;

        ag::Var ad = in.masks ? masked_ad_loss(target, reference, *in.masks)
                              : ad_loss(target, reference);
        ag::Var loss = ad;
        double content_val = 0.0;
        if (use_content) {
            auto content = ref_taps(*in.content_latent, t, content_cache);
            auto cl = content_loss(target, content);
            content_val = cl->value[0];
            loss = total_loss(ad, cl, cfg.lambda);
        }

        double lv = loss->value[0];
        if (!std::isfinite(lv))
            throw std::runtime_error("optimize: non-finite loss at iteration " + std::to_string(k));
        res.total_trace.push_back(lv);
        res.ad_trace.push_back(ad->value[0]);
        if (use_content) res.content_trace.push_back(content_val);

        ag::backward(loss);
        for (int64_t i = 0; i < z->grad.numel(); ++i)
            if (!std::isfinite(z->grad[i]))
                throw std::runtime_error("optimize: non-finite gradient at iteration " +
                                         std::to_string(k));
        opt.step(res.latent, z->grad);
    }
    return res;
}

}  // namespace

OptimizeResult content_preserving_optimize(const Image& style, const Image& content,
                                           const OptimizeConfig& cfg, const Backbone& backbone) {
    LoopInputs in;
    in.style_latent = backbone.encode(style);
    Tensor content_latent = backbone.encode(content);
    switch (cfg.init) {
        case OptimizeConfig::Init::ContentLatent:
            in.init_latent = content_latent;
            break;
        case OptimizeConfig::Init::RandomNoise: {
            std::mt19937_64 rng(cfg.seed);
            in.init_latent = Tensor::randn(content_latent.shape(), rng);
            break;
        }
        case OptimizeConfig::Init::RegionFilled:
            throw std::invalid_argument(
                "content_preserving_optimize: region-filled init belongs to "
                "controlled_texture_optimize");
    }
    in.content_latent = &content_latent;
    return run_loop(in, cfg, backbone);
}

OptimizeResult texture_optimize(const Image& example, const OptimizeConfig& cfg,
                                const Backbone& backbone) {
    if (cfg.init != OptimizeConfig::Init::RandomNoise)
        throw std::invalid_argument("texture_optimize: init mode must be random-noise");
    OptimizeConfig c = cfg;
    c.lambda = 0.0;
    LoopInputs in;
    in.style_latent = backbone.encode(example);
    std::mt19937_64 rng(cfg.seed);
    in.init_latent = Tensor::randn(in.style_latent.shape(), rng);
    return run_loop(in, c, backbone);
}

Image region_filled_init(const Image& src_texture, const LabelMap& src_seg,
                         const LabelMap& tgt_seg, uint64_t seed) {
    if (src_seg.h != src_texture.h || src_seg.w != src_texture.w)
        throw std::invalid_argument("region_filled_init: source segmentation size must match "
                                    "the source texture");
    std::unordered_map<int, std::vector<int>> by_label;  // label -> flat pixel indices
    for (int i = 0; i < src_seg.h * src_seg.w; ++i)
        by_label[src_seg.labels[static_cast<size_t>(i)]].push_back(i);

    Image out;
    out.h = tgt_seg.h;
    out.w = tgt_seg.w;
    out.c = 3;
    out.pixels.resize(size_t(out.h) * out.w * 3);
    std::mt19937_64 rng(seed);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            int lbl = tgt_seg.at(y, x);
            auto it = by_label.find(lbl);
            if (it == by_label.end())
                throw std::invalid_argument("region_filled_init: unmatched label " +
                                            std::to_string(lbl) +
                                            " present in target but absent from source");
            std::uniform_int_distribution<size_t> pick(0, it->second.size() - 1);
            int src = it->second[pick(rng)];
            int sy = src / src_seg.w, sx = src % src_seg.w;
            for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = src_texture.at(sy, sx, ch);
        }
    return out;
}

OptimizeResult controlled_texture_optimize(const Image& src_texture, const LabelMap& src_seg,
                                           const LabelMap& tgt_seg, const OptimizeConfig& cfg,
                                           const Backbone& backbone) {
    Image init_img = region_filled_init(src_texture, src_seg, tgt_seg, cfg.seed);
    LoopInputs in;
    in.style_latent = backbone.encode(src_texture);
    Tensor content_latent = backbone.encode(init_img);
    in.init_latent = content_latent;
    in.content_latent = &content_latent;

    // One mask per selected layer; every toy layer runs on the full latent
    // token grid.
    int lat_h = int(content_latent.dim(1)), lat_w = int(content_latent.dim(2));
    size_t n_selected = backbone.selector().resolve(backbone.attention_layer_ids()).size();
    std::vector<std::pair<int, int>> token_hw(n_selected, {lat_h, lat_w});
    GuidanceMask masks = build_guidance_mask(src_seg, tgt_seg, token_hw);
    in.masks = &masks;
    return run_loop(in, cfg, backbone);
}

}  // namespace attnstyle
