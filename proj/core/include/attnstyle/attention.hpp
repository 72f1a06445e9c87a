#pragma once

#include <optional>
#include <vector>

#include "attnstyle/autograd.hpp"

namespace attnstyle {

// Boolean attention-restriction matrix for one layer:
// allowed[j*n_src + i] == true iff target token j may attend to source token i.
struct LayerMask {
    int64_t n_tgt = 0;
    int64_t n_src = 0;
    std::vector<uint8_t> allowed;

    bool at(int64_t j, int64_t i) const { return allowed[j * n_src + i] != 0; }
};

// Per-layer masks plus the flattened label grids they were built from.
struct GuidanceMask {
    std::vector<LayerMask> layers;
    std::vector<std::vector<int>> src_labels;  // per layer, row-major token grid
    std::vector<std::vector<int>> tgt_labels;
};

// Q/K/V captured from one self-attention layer, shaped [heads, tokens, head_dim].
struct LayerTap {
    int layer_id = -1;
    ag::Var Q, K, V;
};

struct AttentionTaps {
    std::vector<LayerTap> layers;
};

// Selects which self-attention layers feed the losses. Default: final six.
struct LayerSelector {
    int last_n = 6;
    std::vector<int> resolve(const std::vector<int>& available) const;
};

// softmax(Q K^T / sqrt(d)) V with Q,K,V: [heads, n, d]. Masked-out pairs get
// -1e30 logits so their weight is exactly representable zero after softmax.
// A fully masked target row is an error.
ag::Var attention(const ag::Var& Q, const ag::Var& K, const ag::Var& V,
                  const LayerMask* mask = nullptr);
// Same, but also returns the post-softmax weights [heads, n_q, n_k] (for
// instrumented tests).
ag::Var attention_with_weights(const ag::Var& Q, const ag::Var& K, const ag::Var& V,
                               ag::Var& weights_out, const LayerMask* mask = nullptr);

// L1 between the target branch's attention output and the ideal output formed
// by attending target queries over the reference's keys/values. Mean over
// elements per layer, then mean over layers.
ag::Var ad_loss(const AttentionTaps& target, const AttentionTaps& reference);

// As ad_loss, but the ideal branch restricts aggregation with per-layer masks.
// The target branch stays unmasked.
ag::Var masked_ad_loss(const AttentionTaps& target, const AttentionTaps& reference,
                       const GuidanceMask& masks);

// L1 between target queries and content queries under the same reduction.
ag::Var content_loss(const AttentionTaps& target, const AttentionTaps& content);

// ad + lambda * content. lambda must be >= 0.
ag::Var total_loss(const ag::Var& ad, const ag::Var& content, double lambda);

// Integer-labeled map, row-major.
struct LabelMap {
    int h = 0, w = 0;
    std::vector<int> labels;
    int at(int y, int x) const { return labels[static_cast<size_t>(y) * w + x]; }
};

// Downsamples both maps (nearest neighbor) to each layer's token grid and
// builds the per-layer same-label masks. A target label missing from the
// source map is an error (it would create an empty attention row).
GuidanceMask build_guidance_mask(const LabelMap& src_seg, const LabelMap& tgt_seg,
                                 const std::vector<std::pair<int, int>>& token_hw);

// Nearest-neighbor label downsample to h x w, flattened row-major.
std::vector<int> downsample_labels(const LabelMap& map, int h, int w);

}  // namespace attnstyle
