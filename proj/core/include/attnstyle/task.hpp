#pragma once

#include <optional>
#include <string>

#include "attnstyle/backbone.hpp"
#include "attnstyle/optimize.hpp"
#include "attnstyle/sample.hpp"

namespace attnstyle {

struct ValidationError : std::runtime_error {
    std::string field;
    ValidationError(std::string field_, const std::string& msg)
        : std::runtime_error(msg), field(std::move(field_)) {}
};
struct BackboneError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Task {
    StyleTransfer,
    AppearanceTransfer,
    T2IStyle,
    Texture,
    TextureControlled,
    TextureExpand,
    LayoutTexture,
};

std::string task_name(Task t);
Task task_from_name(const std::string& name);

// Everything one run needs. Optional knobs fall back to per-task defaults at
// resolve() time; the manifest always records the resolved values.
struct TaskConfig {
    Task task = Task::StyleTransfer;
    std::string style_path, content_path, seg_src_path, seg_tgt_path, layout_path;
    std::string prompt;
    std::string backbone_path;
    std::string out_path;
    std::optional<double> lambda, lr, cfg_scale, sdedit_strength;
    std::optional<int> iters, steps, inner_steps;
    std::optional<int> target_h, target_w;  // texture expansion
    std::optional<int> tile_window, tile_stride;
    uint64_t seed = 0;
    bool vae_finetune = false;

    void validate() const;
    // Fill every optional with its per-task default.
    TaskConfig resolved() const;

    static TaskConfig from_json_text(const std::string& text);
    static TaskConfig from_file(const std::string& path);
    std::string to_json_text() const;
};

struct RunOutcome {
    std::string output_path;
    std::string manifest_path;
    double wall_time_s = 0.0;
};

// Loads the backbone, dispatches to the optimize/sample pipeline for the
// task, writes the output image (seed embedded) and a JSON manifest with the
// resolved config and per-iteration losses next to it.
RunOutcome run(const TaskConfig& cfg);

// Reads the "config" object back out of a run manifest.
TaskConfig config_from_manifest(const std::string& manifest_path);

struct BenchRow {
    int iterations = 0;
    double seconds = 0.0;
};
struct BenchReport {
    std::vector<BenchRow> rows;
    bool scaling_ok = true;  // optimize: time ratios within +-25% of the
                             // iteration ratios; sample: monotone in M
};

// Timed sweeps on a synthetic image; one warm-up pass is excluded.
BenchReport bench_optimize(const std::vector<int>& iteration_counts, const Backbone& backbone);
BenchReport bench_sample(const std::vector<int>& inner_step_counts, const Backbone& backbone);

// Checkpoint-cache directory: $ATTNSTYLE_CACHE_DIR, falling back to ".".
std::string checkpoint_cache_dir();

}  // namespace attnstyle
