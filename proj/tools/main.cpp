#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "attnstyle/task.hpp"

using namespace attnstyle;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitBackbone = 3;
constexpr int kExitIo = 4;

int run_cmd(const TaskConfig& cfg) {
    auto outcome = run(cfg);
    std::printf("wrote %s (manifest %s, %.2f s)\n", outcome.output_path.c_str(),
                outcome.manifest_path.c_str(), outcome.wall_time_s);
    return 0;
}

void print_report(const BenchReport& rep, const char* unit) {
    for (const auto& row : rep.rows)
        std::printf("%8d %-12s %10.3f s\n", row.iterations, unit, row.seconds);
    std::printf("scaling: %s\n", rep.scaling_ok ? "ok" : "OUT OF BOUNDS");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attention-distillation style transfer"};
    app.require_subcommand(1);

    // run
    auto* run_sc = app.add_subcommand("run", "Run one task and write image + manifest");
    std::string config_path, task_str, from_manifest;
    TaskConfig flags;  // only explicitly-set members override a config file
    bool has_task = false;
    run_sc->add_option("--config", config_path, "JSON config file; flags override its values");
    run_sc->add_option("--from-manifest", from_manifest, "Reuse the config of a previous run");
    run_sc->add_option("--task", task_str,
                       "style-transfer|appearance-transfer|t2i-style|texture|"
                       "texture-controlled|texture-expand|layout-texture");
    run_sc->add_option("--style", flags.style_path, "Style / texture example image");
    run_sc->add_option("--content", flags.content_path, "Content image");
    run_sc->add_option("--prompt", flags.prompt, "Text prompt (t2i-style)");
    run_sc->add_option("--seg-src", flags.seg_src_path, "Source segmentation map");
    run_sc->add_option("--seg-tgt", flags.seg_tgt_path, "Target segmentation map");
    run_sc->add_option("--layout", flags.layout_path, "Layout image (layout-texture)");
    run_sc->add_option("--backbone", flags.backbone_path, "Backbone descriptor JSON");
    run_sc->add_option("--out", flags.out_path, "Output image path");
    double lambda = 0, lr = 0, cfg_scale = 0, sdedit = 0;
    int iters = 0, steps = 0, inner = 0, th = 0, tw = 0, twin = 0, tstride = 0;
    auto* o_lambda = run_sc->add_option("--lambda", lambda, "Content-loss weight");
    auto* o_lr = run_sc->add_option("--lr", lr, "Adam learning rate");
    auto* o_iters = run_sc->add_option("--iters", iters, "Optimization iterations");
    auto* o_steps = run_sc->add_option("--steps", steps, "DDIM steps");
    auto* o_cfg = run_sc->add_option("--cfg-scale", cfg_scale, "Classifier-free guidance scale");
    auto* o_inner = run_sc->add_option("--inner-steps", inner, "Guidance steps per timestep");
    auto* o_sdedit = run_sc->add_option("--sdedit-strength", sdedit, "Layout noising strength");
    auto* o_th = run_sc->add_option("--target-h", th, "Expansion target height (px)");
    auto* o_tw = run_sc->add_option("--target-w", tw, "Expansion target width (px)");
    auto* o_twin = run_sc->add_option("--tile-window", twin, "Tiling window (latent units)");
    auto* o_tstride = run_sc->add_option("--tile-stride", tstride, "Tiling stride (latent units)");
    auto* o_seed = run_sc->add_option("--seed", flags.seed, "RNG seed");
    run_sc->add_flag("--vae-finetune", flags.vae_finetune, "Fine-tune the decoder on the example");

    // bench
    auto* bench_sc = app.add_subcommand("bench", "Timed sweeps on a synthetic image");
    std::string bench_mode = "optimize", bench_backbone;
    std::vector<int> counts;
    bench_sc->add_option("--mode", bench_mode, "optimize (iteration sweep) or sample (M sweep)")
        ->check(CLI::IsMember({"optimize", "sample"}));
    bench_sc->add_option("--backbone", bench_backbone, "Backbone descriptor JSON")->required();
    bench_sc->add_option("--counts", counts, "Iteration counts / inner-step counts");

    // finetune-vae
    auto* ft_sc = app.add_subcommand("finetune-vae", "Report decoder fine-tuning losses");
    std::string ft_image, ft_backbone;
    int ft_steps = 50;
    double ft_lr = 0.01;
    ft_sc->add_option("--style", ft_image, "Image to fit the decoder to")->required();
    ft_sc->add_option("--backbone", ft_backbone, "Backbone descriptor JSON")->required();
    ft_sc->add_option("--steps", ft_steps, "Adam steps");
    ft_sc->add_option("--lr", ft_lr, "Adam learning rate");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_sc->parsed()) {
            TaskConfig cfg;
            if (!from_manifest.empty())
                cfg = config_from_manifest(from_manifest);
            else if (!config_path.empty())
                cfg = TaskConfig::from_file(config_path);
            if (run_sc->count("--task")) {
                cfg.task = task_from_name(task_str);
                has_task = true;
            }
            if (config_path.empty() && from_manifest.empty() && !has_task)
                throw ValidationError("task", "either --task or --config is required");
            auto take = [](std::string& dst, const std::string& src) {
                if (!src.empty()) dst = src;
            };
            take(cfg.style_path, flags.style_path);
            take(cfg.content_path, flags.content_path);
            take(cfg.prompt, flags.prompt);
            take(cfg.seg_src_path, flags.seg_src_path);
            take(cfg.seg_tgt_path, flags.seg_tgt_path);
            take(cfg.layout_path, flags.layout_path);
            take(cfg.backbone_path, flags.backbone_path);
            take(cfg.out_path, flags.out_path);
            if (o_lambda->count()) cfg.lambda = lambda;
            if (o_lr->count()) cfg.lr = lr;
            if (o_iters->count()) cfg.iters = iters;
            if (o_steps->count()) cfg.steps = steps;
            if (o_cfg->count()) cfg.cfg_scale = cfg_scale;
            if (o_inner->count()) cfg.inner_steps = inner;
            if (o_sdedit->count()) cfg.sdedit_strength = sdedit;
            if (o_th->count()) cfg.target_h = th;
            if (o_tw->count()) cfg.target_w = tw;
            if (o_twin->count()) cfg.tile_window = twin;
            if (o_tstride->count()) cfg.tile_stride = tstride;
            if (o_seed->count()) cfg.seed = flags.seed;
            if (run_sc->count("--vae-finetune")) cfg.vae_finetune = flags.vae_finetune;
            return run_cmd(cfg);
        }
        if (bench_sc->parsed()) {
            Backbone backbone = [&] {
                try {
                    return Backbone::load_from_file(bench_backbone);
                } catch (const std::exception& e) {
                    throw BackboneError(e.what());
                }
            }();
            BenchReport rep = bench_mode == "optimize" ? bench_optimize(counts, backbone)
                                                       : bench_sample(counts, backbone);
            print_report(rep, bench_mode == "optimize" ? "iterations" : "inner-steps");
            return 0;
        }
        if (ft_sc->parsed()) {
            Backbone backbone = [&] {
                try {
                    return Backbone::load_from_file(ft_backbone);
                } catch (const std::exception& e) {
                    throw BackboneError(e.what());
                }
            }();
            Image img = [&] {
                try {
                    return load_image(ft_image);
                } catch (const std::exception& e) {
                    throw IoError(e.what());
                }
            }();
            if (ft_steps < 0) throw ValidationError("steps", "steps must be >= 0");
            auto r = finetune_decoder(backbone, img, ft_steps, ft_lr);
            std::printf("initial L1 %.6f, final L1 %.6f over %d steps\n", r.losses.front(),
                        r.losses.back(), ft_steps);
            return 0;
        }
    } catch (const ValidationError& e) {
        std::cerr << "validation error [" << e.field << "]: " << e.what() << "\n";
        return kExitValidation;
    } catch (const BackboneError& e) {
        std::cerr << "backbone error: " << e.what() << "\n";
        return kExitBackbone;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
