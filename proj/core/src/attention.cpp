#include "attnstyle/attention.hpp"

#include <cmath>
#include <unordered_set>

namespace attnstyle {

namespace {

constexpr double kMaskedLogit = -1e30;

void check_tap_shapes(const ag::Var& Q, const ag::Var& K, const ag::Var& V) {
    const auto& q = Q->value.shape();
    const auto& k = K->value.shape();
    const auto& v = V->value.shape();
    if (q.size() != 3 || k.size() != 3 || v.size() != 3)
        throw std::invalid_argument("attention: Q/K/V must be [heads, tokens, head_dim]");
    if (q[0] != k[0] || q[0] != v[0])
        throw std::invalid_argument("attention: head count mismatch");
    if (q[2] != k[2])
        throw std::invalid_argument("attention: Q/K head_dim mismatch");
    if (k[1] != v[1])
        throw std::invalid_argument("attention: K/V token count mismatch");
}

Tensor mask_logits(const LayerMask& mask, int64_t n_q, int64_t n_k) {
    if (mask.n_tgt != n_q || mask.n_src != n_k)
        throw std::invalid_argument("attention: mask shape " + std::to_string(mask.n_tgt) + "x" +
                                    std::to_string(mask.n_src) + " does not match tokens " +
                                    std::to_string(n_q) + "x" + std::to_string(n_k));
    Tensor m({n_q, n_k});
    for (int64_t j = 0; j < n_q; ++j) {
        bool any = false;
        for (int64_t i = 0; i < n_k; ++i) {
            bool ok = mask.at(j, i);
            any = any || ok;
            m[j * n_k + i] = ok ? 0.0 : kMaskedLogit;
        }
        if (!any)
            throw std::invalid_argument("attention: empty attention row at target token " +
                                        std::to_string(j));
    }
    return m;
}

ag::Var attention_impl(const ag::Var& Q, const ag::Var& K, const ag::Var& V,
                       const LayerMask* mask, ag::Var* weights_out) {
    check_tap_shapes(Q, K, V);
    int64_t d = Q->value.dim(2);
    auto logits = ag::scale(ag::matmul(Q, ag::transpose_last2(K)), 1.0 / std::sqrt(double(d)));
    std::optional<Tensor> m;
    if (mask) m = mask_logits(*mask, Q->value.dim(1), K->value.dim(1));
    auto weights = ag::softmax_lastdim(logits, m ? &*m : nullptr);
    if (weights_out) *weights_out = weights;
    return ag::matmul(weights, V);
}

void check_layer_sets(const AttentionTaps& a, const AttentionTaps& b, const char* op) {
    if (a.layers.size() != b.layers.size())
        throw std::invalid_argument(std::string(op) + ": layer count mismatch");
    for (size_t i = 0; i < a.layers.size(); ++i)
        if (a.layers[i].layer_id != b.layers[i].layer_id)
            throw std::invalid_argument(std::string(op) + ": layer id mismatch at index " +
                                        std::to_string(i));
}

ag::Var mean_over_layers(std::vector<ag::Var> per_layer) {
    ag::Var acc = per_layer[0];
    for (size_t i = 1; i < per_layer.size(); ++i) acc = ag::add(acc, per_layer[i]);
    return ag::scale(acc, 1.0 / static_cast<double>(per_layer.size()));
}

}  // namespace

std::vector<int> LayerSelector::resolve(const std::vector<int>& available) const {
    if (last_n <= 0) throw std::invalid_argument("LayerSelector: last_n must be positive");
    size_t n = std::min<size_t>(static_cast<size_t>(last_n), available.size());
    return {available.end() - static_cast<ptrdiff_t>(n), available.end()};
}

ag::Var attention(const ag::Var& Q, const ag::Var& K, const ag::Var& V, const LayerMask* mask) {
    return attention_impl(Q, K, V, mask, nullptr);
}

ag::Var attention_with_weights(const ag::Var& Q, const ag::Var& K, const ag::Var& V,
                               ag::Var& weights_out, const LayerMask* mask) {
    return attention_impl(Q, K, V, mask, &weights_out);
}

ag::Var ad_loss(const AttentionTaps& target, const AttentionTaps& reference) {
    check_layer_sets(target, reference, "ad_loss");
    std::vector<ag::Var> per_layer;
    for (size_t i = 0; i < target.layers.size(); ++i) {
        const auto& t = target.layers[i];
        const auto& r = reference.layers[i];
        auto current = attention(t.Q, t.K, t.V);
        auto ideal = attention(t.Q, r.K, r.V);
        per_layer.push_back(ag::l1_mean(current, ideal));
    }
    return mean_over_layers(std::move(per_layer));
}

ag::Var masked_ad_loss(const AttentionTaps& target, const AttentionTaps& reference,
                       const GuidanceMask& masks) {
    check_layer_sets(target, reference, "masked_ad_loss");
    if (masks.layers.size() != target.layers.size())
        throw std::invalid_argument("masked_ad_loss: one mask per selected layer required");
    std::vector<ag::Var> per_layer;
    for (size_t i = 0; i < target.layers.size(); ++i) {
        const auto& t = target.layers[i];
        const auto& r = reference.layers[i];
        auto current = attention(t.Q, t.K, t.V);
        auto ideal = attention(t.Q, r.K, r.V, &masks.layers[i]);
        per_layer.push_back(ag::l1_mean(current, ideal));
    }
    return mean_over_layers(std::move(per_layer));
}

ag::Var content_loss(const AttentionTaps& target, const AttentionTaps& content) {
    check_layer_sets(target, content, "content_loss");
    std::vector<ag::Var> per_layer;
    for (size_t i = 0; i < target.layers.size(); ++i)
        per_layer.push_back(ag::l1_mean(target.layers[i].Q, content.layers[i].Q));
    return mean_over_layers(std::move(per_layer));
}

ag::Var total_loss(const ag::Var& ad, const ag::Var& content, double lambda) {
    if (lambda < 0) throw std::invalid_argument("total_loss: lambda must be >= 0");
    return ag::add(ad, ag::scale(content, lambda));
}

std::vector<int> downsample_labels(const LabelMap& map, int h, int w) {
    if (map.h <= 0 || map.w <= 0) throw std::invalid_argument("downsample_labels: empty map");
    if (map.h % h != 0 || map.w % w != 0)
        throw std::invalid_argument("downsample_labels: token grid " + std::to_string(h) + "x" +
                                    std::to_string(w) + " does not divide map " +
                                    std::to_string(map.h) + "x" + std::to_string(map.w));
    std::vector<int> out(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        // Nearest neighbor: pick the source pixel at the center of each cell.
        int sy = (2 * y + 1) * map.h / (2 * h);
        for (int x = 0; x < w; ++x) {
            int sx = (2 * x + 1) * map.w / (2 * w);
            out[static_cast<size_t>(y) * w + x] = map.at(sy, sx);
        }
    }
    return out;
}

GuidanceMask build_guidance_mask(const LabelMap& src_seg, const LabelMap& tgt_seg,
                                 const std::vector<std::pair<int, int>>& token_hw) {
    GuidanceMask out;
    for (const auto& [th, tw] : token_hw) {
        // Token grids scale with the underlying map resolution; src and tgt maps
        // may differ in size, so each gets its own grid at the same scale factor.
        int sh = th, sw = tw;
        if (tgt_seg.h % th == 0 && tgt_seg.w % tw == 0) {
            int fy = tgt_seg.h / th, fx = tgt_seg.w / tw;
            if (src_seg.h % fy == 0 && src_seg.w % fx == 0) {
                sh = src_seg.h / fy;
                sw = src_seg.w / fx;
            }
        }
        auto tgt = downsample_labels(tgt_seg, th, tw);
        auto src = downsample_labels(src_seg, sh, sw);

        std::unordered_set<int> src_set(src.begin(), src.end());
        for (int lbl : tgt)
            if (!src_set.count(lbl))
                throw std::invalid_argument("build_guidance_mask: unmatched label " +
                                            std::to_string(lbl) +
                                            " present in target but absent from source");

        LayerMask m;
        m.n_tgt = static_cast<int64_t>(tgt.size());
        m.n_src = static_cast<int64_t>(src.size());
        m.allowed.resize(static_cast<size_t>(m.n_tgt * m.n_src));
        for (int64_t j = 0; j < m.n_tgt; ++j)
            for (int64_t i = 0; i < m.n_src; ++i)
                m.allowed[j * m.n_src + i] = (tgt[j] == src[i]) ? 1 : 0;
        out.layers.push_back(std::move(m));
        out.src_labels.push_back(std::move(src));
        out.tgt_labels.push_back(std::move(tgt));
    }
    return out;
}

}  // namespace attnstyle
