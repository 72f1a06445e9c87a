#include "attnstyle/task.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "attnstyle/image.hpp"

namespace attnstyle {

using nlohmann::json;

std::string task_name(Task t) {
    switch (t) {
        case Task::StyleTransfer: return "style-transfer";
        case Task::AppearanceTransfer: return "appearance-transfer";
        case Task::T2IStyle: return "t2i-style";
        case Task::Texture: return "texture";
        case Task::TextureControlled: return "texture-controlled";
        case Task::TextureExpand: return "texture-expand";
        case Task::LayoutTexture: return "layout-texture";
    }
    throw std::logic_error("task_name: unreachable");
}

Task task_from_name(const std::string& name) {
    for (Task t : {Task::StyleTransfer, Task::AppearanceTransfer, Task::T2IStyle, Task::Texture,
                   Task::TextureControlled, Task::TextureExpand, Task::LayoutTexture})
        if (task_name(t) == name) return t;
    throw ValidationError("task", "unknown task '" + name + "'");
}

void TaskConfig::validate() const {
    auto require = [](const std::string& value, const char* field) {
        if (value.empty())
            throw ValidationError(field, std::string("missing required field '") + field + "'");
    };
    require(style_path, "style");
    require(backbone_path, "backbone");
    require(out_path, "out");
    switch (task) {
        case Task::StyleTransfer:
        case Task::AppearanceTransfer:
            require(content_path, "content");
            break;
        case Task::T2IStyle:
            require(prompt, "prompt");
            break;
        case Task::Texture:
            break;
        case Task::TextureControlled:
            require(seg_src_path, "seg-src");
            require(seg_tgt_path, "seg-tgt");
            break;
        case Task::TextureExpand:
            if (!target_h || !target_w)
                throw ValidationError("target", "texture-expand requires target-h and target-w");
            break;
        case Task::LayoutTexture:
            require(layout_path, "layout");
            break;
    }
    if (lambda && *lambda < 0) throw ValidationError("lambda", "lambda must be >= 0");
    if (lr && *lr <= 0) throw ValidationError("lr", "lr must be > 0");
    if (iters && *iters < 0) throw ValidationError("iters", "iters must be >= 0");
    if (steps && *steps < 1) throw ValidationError("steps", "steps must be >= 1");
    if (inner_steps && *inner_steps < 0)
        throw ValidationError("inner-steps", "inner-steps must be >= 0");
    if (cfg_scale && *cfg_scale < 1) throw ValidationError("cfg-scale", "cfg-scale must be >= 1");
    if (sdedit_strength && !(*sdedit_strength > 0 && *sdedit_strength < 1))
        throw ValidationError("sdedit-strength", "sdedit-strength must be in (0,1)");
}

TaskConfig TaskConfig::resolved() const {
    TaskConfig c = *this;
    auto def = [](std::optional<double>& v, double d) { if (!v) v = d; };
    auto defi = [](std::optional<int>& v, int d) { if (!v) v = d; };
    switch (task) {
        case Task::StyleTransfer:
            def(c.lambda, 0.25);
            def(c.lr, 0.05);
            defi(c.iters, 200);
            break;
        case Task::AppearanceTransfer:
            def(c.lambda, 0.2);
            def(c.lr, 0.05);
            defi(c.iters, 200);
            break;
        case Task::Texture:
            def(c.lambda, 0.0);
            def(c.lr, 0.05);
            defi(c.iters, 100);
            break;
        case Task::TextureControlled:
            def(c.lambda, 0.15);
            def(c.lr, 0.05);
            defi(c.iters, 200);
            break;
        case Task::T2IStyle:
            def(c.lr, 0.015);
            def(c.cfg_scale, 7.0);
            defi(c.steps, 50);
            defi(c.inner_steps, 2);
            def(c.lambda, 0.0);
            break;
        case Task::TextureExpand:
            def(c.lr, 0.05);
            def(c.cfg_scale, 1.0);
            defi(c.steps, 50);
            defi(c.inner_steps, 3);
            def(c.lambda, 0.0);
            break;
        case Task::LayoutTexture:
            def(c.lr, 0.05);
            def(c.cfg_scale, 1.0);
            defi(c.steps, 50);
            defi(c.inner_steps, 2);
            def(c.lambda, 0.2);
            def(c.sdedit_strength, 0.6);
            break;
    }
    return c;
}

std::string TaskConfig::to_json_text() const {
    json j;
    j["schema_version"] = 1;
    j["task"] = task_name(task);
    j["style"] = style_path;
    if (!content_path.empty()) j["content"] = content_path;
    if (!seg_src_path.empty()) j["seg_src"] = seg_src_path;
    if (!seg_tgt_path.empty()) j["seg_tgt"] = seg_tgt_path;
    if (!layout_path.empty()) j["layout"] = layout_path;
    if (!prompt.empty()) j["prompt"] = prompt;
    j["backbone"] = backbone_path;
    j["out"] = out_path;
    if (lambda) j["lambda"] = *lambda;
    if (lr) j["lr"] = *lr;
    if (cfg_scale) j["cfg_scale"] = *cfg_scale;
    if (sdedit_strength) j["sdedit_strength"] = *sdedit_strength;
    if (iters) j["iters"] = *iters;
    if (steps) j["steps"] = *steps;
    if (inner_steps) j["inner_steps"] = *inner_steps;
    if (target_h) j["target_h"] = *target_h;
    if (target_w) j["target_w"] = *target_w;
    if (tile_window) j["tile_window"] = *tile_window;
    if (tile_stride) j["tile_stride"] = *tile_stride;
    j["seed"] = seed;
    j["vae_finetune"] = vae_finetune;
    return j.dump(2);
}

TaskConfig TaskConfig::from_json_text(const std::string& text) {
    json j = json::parse(text);
    int version = j.value("schema_version", 1);
    if (version != 1)
        throw ValidationError("schema_version",
                              "unsupported config schema version " + std::to_string(version));
    TaskConfig c;
    c.task = task_from_name(j.value("task", "style-transfer"));
    c.style_path = j.value("style", "");
    c.content_path = j.value("content", "");
    c.seg_src_path = j.value("seg_src", "");
    c.seg_tgt_path = j.value("seg_tgt", "");
    c.layout_path = j.value("layout", "");
    c.prompt = j.value("prompt", "");
    c.backbone_path = j.value("backbone", "");
    c.out_path = j.value("out", "");
    if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("cfg_scale")) c.cfg_scale = j["cfg_scale"].get<double>();
    if (j.contains("sdedit_strength")) c.sdedit_strength = j["sdedit_strength"].get<double>();
    if (j.contains("iters")) c.iters = j["iters"].get<int>();
    if (j.contains("steps")) c.steps = j["steps"].get<int>();
    if (j.contains("inner_steps")) c.inner_steps = j["inner_steps"].get<int>();
    if (j.contains("target_h")) c.target_h = j["target_h"].get<int>();
    if (j.contains("target_w")) c.target_w = j["target_w"].get<int>();
    if (j.contains("tile_window")) c.tile_window = j["tile_window"].get<int>();
    if (j.contains("tile_stride")) c.tile_stride = j["tile_stride"].get<int>();
    c.seed = j.value("seed", uint64_t(0));
    c.vae_finetune = j.value("vae_finetune", false);
    return c;
}

TaskConfig TaskConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

namespace {

Image load_image_io(const std::string& path) {
    try {
        return load_image(path);
    } catch (const std::exception& e) {
        throw IoError(e.what());
    }
}

LabelMap load_labels_io(const std::string& path) {
    try {
        return load_labels(path);
    } catch (const std::exception& e) {
        throw IoError(e.what());
    }
}

json trace_json(const OptimizeResult& r) {
    json j;
    j["total"] = r.total_trace;
    j["ad"] = r.ad_trace;
    if (!r.content_trace.empty()) j["content"] = r.content_trace;
    return j;
}

json trace_json(const SampleResult& r) {
    json steps = json::array();
    for (const auto& s : r.trace)
        steps.push_back({{"t", s.t},
                         {"ad_before", s.ad_before},
                         {"ad_after", s.ad_after},
                         {"increased", s.inner_increased}});
    return steps;
}

}  // namespace

RunOutcome run(const TaskConfig& raw) {
    raw.validate();
    TaskConfig cfg = raw.resolved();

    Backbone backbone = [&] {
        try {
            return Backbone::load_from_file(cfg.backbone_path);
        } catch (const std::exception& e) {
            throw BackboneError(e.what());
        }
    }();

    Image style = load_image_io(cfg.style_path);
    if (cfg.vae_finetune) {
        auto ft = finetune_decoder(backbone, style, 50, 0.01);
        backbone.set_decoder_weights(ft.dec_W, ft.dec_b);
    }

    auto t0 = std::chrono::steady_clock::now();
    json losses;
    bool per_tile_ad = false;
    Image out_img;

    switch (cfg.task) {
        case Task::StyleTransfer:
        case Task::AppearanceTransfer: {
            Image content = load_image_io(cfg.content_path);
            OptimizeConfig oc;
            oc.iterations = *cfg.iters;
            oc.lr = *cfg.lr;
            oc.lambda = *cfg.lambda;
            oc.seed = cfg.seed;
            auto r = content_preserving_optimize(style, content, oc, backbone);
            losses = trace_json(r);
            out_img = backbone.decode(r.latent);
            break;
        }
        case Task::Texture: {
            OptimizeConfig oc;
            oc.iterations = *cfg.iters;
            oc.lr = *cfg.lr;
            oc.seed = cfg.seed;
            oc.init = OptimizeConfig::Init::RandomNoise;
            auto r = texture_optimize(style, oc, backbone);
            losses = trace_json(r);
            out_img = backbone.decode(r.latent);
            break;
        }
        case Task::TextureControlled: {
            LabelMap seg_src = load_labels_io(cfg.seg_src_path);
            LabelMap seg_tgt = load_labels_io(cfg.seg_tgt_path);
            OptimizeConfig oc;
            oc.iterations = *cfg.iters;
            oc.lr = *cfg.lr;
            oc.lambda = *cfg.lambda;
            oc.seed = cfg.seed;
            auto r = controlled_texture_optimize(style, seg_src, seg_tgt, oc, backbone);
            losses = trace_json(r);
            out_img = backbone.decode(r.latent);
            break;
        }
        case Task::T2IStyle: {
            SamplerConfig sc;
            sc.steps = *cfg.steps;
            sc.cfg_scale = *cfg.cfg_scale;
            sc.inner_steps = *cfg.inner_steps;
            sc.lr = *cfg.lr;
            sc.seed = cfg.seed;
            GuidedSampleInputs in;
            in.prompt = cfg.prompt;
            in.style = &style;
            auto r = guided_sample(in, sc, backbone);
            losses = trace_json(r);
            out_img = backbone.decode(r.latent);
            break;
        }
        case Task::LayoutTexture: {
            Image layout = load_image_io(cfg.layout_path);
            SamplerConfig sc;
            sc.steps = *cfg.steps;
            sc.cfg_scale = *cfg.cfg_scale;
            sc.inner_steps = *cfg.inner_steps;
            sc.lr = *cfg.lr;
            sc.lambda = *cfg.lambda;
            sc.seed = cfg.seed;
            auto [z_start, t_start] = sdedit_init(layout, *cfg.sdedit_strength, cfg.seed, backbone);
            GuidedSampleInputs in;
            in.style = &style;
            in.content = &layout;
            in.start_latent = z_start;
            in.start_t = t_start;
            auto r = guided_sample(in, sc, backbone);
            losses = trace_json(r);
            out_img = backbone.decode(r.latent);
            break;
        }
        case Task::TextureExpand: {
            SamplerConfig sc;
            sc.steps = *cfg.steps;
            sc.cfg_scale = *cfg.cfg_scale;
            sc.inner_steps = *cfg.inner_steps;
            sc.lr = *cfg.lr;
            sc.seed = cfg.seed;
            TilingSpec tiling;
            tiling.window = cfg.tile_window ? *cfg.tile_window
                                            : int(std::min<int64_t>(style.h, style.w)) /
                                                  backbone.codec_factor();
            tiling.stride = cfg.tile_stride ? *cfg.tile_stride : std::max(1, tiling.window / 2);
            sc.tiling = tiling;
            per_tile_ad = true;
            SampleResult r;
            out_img = expand_texture(style, *cfg.target_h, *cfg.target_w, sc, backbone, &r);
            losses = trace_json(r);
            break;
        }
    }

    auto t1 = std::chrono::steady_clock::now();
    RunOutcome outcome;
    outcome.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
    outcome.output_path = cfg.out_path;
    outcome.manifest_path = cfg.out_path + ".manifest.json";

    try {
        save_image(out_img, cfg.out_path, cfg.seed);
    } catch (const std::exception& e) {
        throw IoError(e.what());
    }
    json manifest;
    manifest["schema_version"] = 1;
    manifest["config"] = json::parse(cfg.to_json_text());
    manifest["seed"] = cfg.seed;
    manifest["losses"] = losses;
    manifest["per_tile_ad"] = per_tile_ad;
    manifest["wall_time_s"] = outcome.wall_time_s;
    manifest["output"] = cfg.out_path;
    std::ofstream mf(outcome.manifest_path);
    if (!mf) throw IoError("cannot write manifest: " + outcome.manifest_path);
    mf << manifest.dump(2) << "\n";
    return outcome;
}

TaskConfig config_from_manifest(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open manifest: " + manifest_path);
    json j;
    in >> j;
    if (!j.contains("config")) throw IoError("manifest has no config object: " + manifest_path);
    return TaskConfig::from_json_text(j["config"].dump());
}

namespace {

Image synthetic_image(int h, int w, uint64_t seed) {
    Image img;
    img.h = h;
    img.w = w;
    img.c = 3;
    img.pixels.resize(size_t(h) * w * 3);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(0, 255);
    for (auto& p : img.pixels) p = uint8_t(d(rng));
    return img;
}

}  // namespace

BenchReport bench_optimize(const std::vector<int>& iteration_counts, const Backbone& backbone) {
    BenchReport rep;
    if (iteration_counts.empty()) return rep;
    Image example = synthetic_image(24, 24, 11);
    OptimizeConfig warm;
    warm.iterations = 3;
    warm.init = OptimizeConfig::Init::RandomNoise;
    texture_optimize(example, warm, backbone);  // warm-up, excluded from timing
    for (int n : iteration_counts) {
        OptimizeConfig oc;
        oc.iterations = n;
        oc.init = OptimizeConfig::Init::RandomNoise;
        auto t0 = std::chrono::steady_clock::now();
        texture_optimize(example, oc, backbone);
        auto t1 = std::chrono::steady_clock::now();
        rep.rows.push_back({n, std::chrono::duration<double>(t1 - t0).count()});
    }
    const auto& base = rep.rows.front();
    for (const auto& row : rep.rows) {
        double expected = double(row.iterations) / double(base.iterations);
        double actual = row.seconds / base.seconds;
        if (std::abs(actual / expected - 1.0) > 0.25) rep.scaling_ok = false;
    }
    return rep;
}

BenchReport bench_sample(const std::vector<int>& inner_step_counts, const Backbone& backbone) {
    BenchReport rep;
    if (inner_step_counts.empty()) return rep;
    Image example = synthetic_image(24, 24, 12);
    GuidedSampleInputs in;
    in.style = &example;
    SamplerConfig warm;
    warm.steps = 2;
    warm.inner_steps = 1;
    warm.cfg_scale = 1.0;
    warm.lr = 0.05;
    guided_sample(in, warm, backbone);  // warm-up
    for (int m : inner_step_counts) {
        SamplerConfig sc;
        sc.steps = 10;
        sc.inner_steps = m;
        sc.cfg_scale = 1.0;
        sc.lr = 0.05;
        auto t0 = std::chrono::steady_clock::now();
        guided_sample(in, sc, backbone);
        auto t1 = std::chrono::steady_clock::now();
        rep.rows.push_back({m, std::chrono::duration<double>(t1 - t0).count()});
    }
    for (size_t i = 1; i < rep.rows.size(); ++i)
        if (rep.rows[i].seconds <= rep.rows[i - 1].seconds) rep.scaling_ok = false;
    return rep;
}

std::string checkpoint_cache_dir() {
    const char* env = std::getenv("ATTNSTYLE_CACHE_DIR");
    return env ? env : ".";
}

}  // namespace attnstyle
