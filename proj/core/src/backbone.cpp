#include "attnstyle/backbone.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "attnstyle/adam.hpp"

namespace attnstyle {

namespace {

using IndexMap = std::shared_ptr<const std::vector<int64_t>>;

IndexMap chw_to_tokens_index(int c, int h, int w) {
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(static_cast<size_t>(c) * h * w);
    for (int64_t tok = 0; tok < int64_t(h) * w; ++tok)
        for (int64_t ch = 0; ch < c; ++ch) idx->push_back(ch * h * w + tok);
    return idx;
}

IndexMap tokens_to_chw_index(int c, int h, int w) {
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(static_cast<size_t>(c) * h * w);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t tok = 0; tok < int64_t(h) * w; ++tok) idx->push_back(tok * c + ch);
    return idx;
}

IndexMap split_heads_index(int64_t n, int heads, int64_t dh) {
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(static_cast<size_t>(n) * heads * dh);
    for (int hh = 0; hh < heads; ++hh)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < dh; ++j) idx->push_back(i * heads * dh + hh * dh + j);
    return idx;
}

IndexMap merge_heads_index(int64_t n, int heads, int64_t dh) {
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(static_cast<size_t>(n) * heads * dh);
    for (int64_t i = 0; i < n; ++i)
        for (int hh = 0; hh < heads; ++hh)
            for (int64_t j = 0; j < dh; ++j) idx->push_back((int64_t(hh) * n + i) * dh + j);
    return idx;
}

Tensor sinusoidal(double pos, int dim) {
    Tensor e({int64_t(dim)});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        e[2 * i] = std::sin(pos * freq);
        e[2 * i + 1] = std::cos(pos * freq);
    }
    return e;
}

// 2-D position code: first half of the channels encodes the row, second half
// the column.
Tensor positional_embedding(int h, int w, int dim) {
    Tensor pos({int64_t(h) * w, int64_t(dim)});
    int half = dim / 2;
    for (int y = 0; y < h; ++y) {
        Tensor ey = sinusoidal(double(y), half);
        for (int x = 0; x < w; ++x) {
            Tensor ex = sinusoidal(double(x), half);
            double* row = pos.data() + (int64_t(y) * w + x) * dim;
            for (int i = 0; i < half; ++i) {
                row[i] = ey[i];
                row[half + i] = ex[i];
            }
        }
    }
    return pos;
}

Tensor init_weight(std::mt19937_64& rng, int64_t fan_in, int64_t fan_out) {
    return Tensor::randn({fan_in, fan_out}, rng, 1.0 / std::sqrt(double(fan_in)));
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

void write_tensor(std::ostream& os, const Tensor& t) {
    uint32_t rank = static_cast<uint32_t>(t.rank());
    os.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
    for (int64_t d : t.shape()) os.write(reinterpret_cast<const char*>(&d), sizeof(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

Tensor read_tensor(std::istream& is) {
    uint32_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), sizeof(rank));
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) is.read(reinterpret_cast<char*>(&d), sizeof(d));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor data");
    return t;
}

constexpr char kCheckpointMagic[8] = {'A', 'D', 'C', 'K', 'P', 'T', '1', '\n'};

}  // namespace

// ---------------------------------------------------------------------------
// LatentCodec

LatentCodec LatentCodec::make_identity() {
    LatentCodec c;
    c.factor = 1;
    c.latent_channels = 3;
    c.identity = true;
    return c;
}

LatentCodec LatentCodec::make(int factor, int latent_channels, uint64_t seed) {
    if (factor < 1) throw std::invalid_argument("LatentCodec: factor must be >= 1");
    if (factor == 1 && latent_channels == 3) return make_identity();
    if (latent_channels < 3)
        throw std::invalid_argument("LatentCodec: need at least 3 latent channels");
    LatentCodec c;
    c.factor = factor;
    c.latent_channels = latent_channels;
    c.identity = false;
    int64_t block = 3LL * factor * factor;
    std::mt19937_64 rng(seed ^ 0x1a7ec0decULL);
    c.enc_W = Tensor::randn({block, latent_channels}, rng, 0.05 / factor);
    c.dec_W = Tensor::randn({int64_t(latent_channels), block}, rng, 0.05);
    c.dec_b = Tensor({block});
    // First three latent channels start as per-color block means, and the
    // decoder starts by replicating them back; round trips therefore begin as
    // block-average reconstructions rather than noise.
    for (int ch = 0; ch < 3; ++ch)
        for (int p = 0; p < factor * factor; ++p) {
            c.enc_W[(int64_t(ch) * factor * factor + p) * latent_channels + ch] =
                1.0 / double(factor * factor);
            c.dec_W[int64_t(ch) * block + ch * factor * factor + p] = 1.0;
        }
    return c;
}

Tensor LatentCodec::encode(const Tensor& img_chw) const {
    if (img_chw.rank() != 3 || img_chw.dim(0) != 3)
        throw std::invalid_argument("LatentCodec::encode: expected [3,H,W]");
    int H = int(img_chw.dim(1)), W = int(img_chw.dim(2));
    if (H % factor != 0 || W % factor != 0)
        throw std::invalid_argument("LatentCodec::encode: resolution " + std::to_string(W) + "x" +
                                    std::to_string(H) + " not divisible by codec factor " +
                                    std::to_string(factor));
    if (identity) return img_chw;
    int h = H / factor, w = W / factor;
    int64_t block = 3LL * factor * factor;
    Tensor out({int64_t(latent_channels), int64_t(h), int64_t(w)});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < latent_channels; ++c) {
                double acc = 0.0;
                for (int ch = 0; ch < 3; ++ch)
                    for (int dy = 0; dy < factor; ++dy)
                        for (int dx = 0; dx < factor; ++dx) {
                            int64_t bi = int64_t(ch) * factor * factor + dy * factor + dx;
                            acc += img_chw[int64_t(ch) * H * W + (y * factor + dy) * W +
                                           (x * factor + dx)] *
                                   enc_W[bi * latent_channels + c];
                        }
                out[int64_t(c) * h * w + int64_t(y) * w + x] = acc;
            }
            (void)block;
        }
    return out;
}

Tensor LatentCodec::decode(const Tensor& latent) const {
    if (latent.rank() != 3 || latent.dim(0) != latent_channels)
        throw std::invalid_argument("LatentCodec::decode: latent channel mismatch");
    if (identity) return latent;
    int h = int(latent.dim(1)), w = int(latent.dim(2));
    int H = h * factor, W = w * factor;
    Tensor out({3, int64_t(H), int64_t(W)});
    int64_t block = 3LL * factor * factor;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int64_t bi = 0; bi < block; ++bi) {
                double acc = dec_b[bi];
                for (int c = 0; c < latent_channels; ++c)
                    acc += latent[int64_t(c) * h * w + int64_t(y) * w + x] * dec_W[c * block + bi];
                int ch = int(bi / (factor * factor));
                int dy = int((bi / factor) % factor);
                int dx = int(bi % factor);
                out[int64_t(ch) * H * W + (int64_t(y) * factor + dy) * W + x * factor + dx] = acc;
            }
    return out;
}

ag::Var LatentCodec::decode_graph(const Tensor& latent, const ag::Var& W, const ag::Var& b) const {
    if (identity) throw std::invalid_argument("LatentCodec::decode_graph: identity codec has no weights");
    int h = int(latent.dim(1)), w = int(latent.dim(2));
    int64_t n = int64_t(h) * w;
    int64_t block = 3LL * factor * factor;
    // latent CHW -> token rows
    Tensor toks({n, int64_t(latent_channels)});
    for (int64_t tok = 0; tok < n; ++tok)
        for (int c = 0; c < latent_channels; ++c)
            toks[tok * latent_channels + c] = latent[int64_t(c) * n + tok];
    auto y = ag::linear(ag::constant(std::move(toks)), W, b);  // [n, block]
    int H = h * factor, Wd = w * factor;
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->resize(size_t(3) * H * Wd);
    for (int64_t tok = 0; tok < n; ++tok) {
        int ty = int(tok / w), tx = int(tok % w);
        for (int64_t bi = 0; bi < block; ++bi) {
            int ch = int(bi / (factor * factor));
            int dy = int((bi / factor) % factor);
            int dx = int(bi % factor);
            (*idx)[size_t(int64_t(ch) * H * Wd + (int64_t(ty) * factor + dy) * Wd + tx * factor + dx)] =
                tok * block + bi;
        }
    }
    return ag::take(y, idx, {3, int64_t(H), int64_t(Wd)});
}

// ---------------------------------------------------------------------------
// Descriptor

BackboneDescriptor BackboneDescriptor::from_json_text(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    BackboneDescriptor d;
    std::string kind = j.value("kind", "toy");
    if (kind == "toy")
        d.kind = Kind::Toy;
    else if (kind == "pretrained")
        d.kind = Kind::Pretrained;
    else
        throw std::invalid_argument("backbone descriptor: unknown kind '" + kind + "'");
    d.seed = j.value("seed", uint64_t(0));
    d.checkpoint = j.value("checkpoint", std::string());
    d.sha256 = j.value("sha256", std::string());
    d.t_max = j.value("t_max", 100);
    d.codec_factor = j.value("codec_factor", 2);
    d.identity_codec = j.value("identity_codec", false);
    d.select_last = j.value("select_last", 6);
    d.supports_condition = j.value("supports_condition", true);
    d.arch.latent_channels = j.value("latent_channels", 4);
    d.arch.d_model = j.value("d_model", 32);
    d.arch.heads = j.value("heads", 2);
    d.arch.n_layers = j.value("layers", 12);
    d.arch.d_mlp = j.value("d_mlp", 64);
    return d;
}

BackboneDescriptor BackboneDescriptor::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open backbone descriptor: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

// ---------------------------------------------------------------------------
// Backbone

Backbone Backbone::load(const BackboneDescriptor& desc) {
    Backbone b;
    b.arch_ = desc.arch;
    b.selector_.last_n = desc.select_last;
    b.supports_condition_ = desc.supports_condition;
    if (desc.kind == BackboneDescriptor::Kind::Toy) {
        if (desc.arch.n_layers < 8)
            throw std::invalid_argument("toy backbone: needs at least 8 self-attention layers, got " +
                                        std::to_string(desc.arch.n_layers));
        if (desc.arch.d_model % desc.arch.heads != 0)
            throw std::invalid_argument("toy backbone: d_model must be divisible by heads");
        b.schedule_ = DiffusionSchedule::scaled_linear(desc.t_max);
        b.codec_ = desc.identity_codec
                       ? LatentCodec::make_identity()
                       : LatentCodec::make(desc.codec_factor, desc.arch.latent_channels, desc.seed);
        if (desc.identity_codec && desc.arch.latent_channels != 3)
            throw std::invalid_argument("toy backbone: identity codec requires 3 latent channels");
        b.init_toy(desc.seed);
    } else {
        b.load_checkpoint(desc.checkpoint, desc.sha256);
        b.selector_.last_n = desc.select_last;
    }
    return b;
}

Backbone Backbone::load_from_file(const std::string& descriptor_path) {
    return load(BackboneDescriptor::from_file(descriptor_path));
}

void Backbone::init_toy(uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x70b0beULL);
    const int d = arch_.d_model;
    embed_W_ = init_weight(rng, arch_.latent_channels, d);
    embed_b_ = Tensor({int64_t(d)});
    time_W_ = init_weight(rng, d, d);
    time_b_ = Tensor({int64_t(d)});
    out_W_ = init_weight(rng, d, arch_.latent_channels);
    out_b_ = Tensor({int64_t(arch_.latent_channels)});
    layers_.clear();
    // Residual output projections are damped by 1/sqrt(2L) so the stream stays
    // near unit scale through the stack; undamped stacks make the tap losses
    // too rough for fixed-step optimization.
    const double damp = 1.0 / std::sqrt(2.0 * double(arch_.n_layers));
    for (int l = 0; l < arch_.n_layers; ++l) {
        LayerWeights w;
        w.Wq = init_weight(rng, d, d);
        w.bq = Tensor({int64_t(d)});
        w.Wk = init_weight(rng, d, d);
        w.bk = Tensor({int64_t(d)});
        w.Wv = init_weight(rng, d, d);
        w.bv = Tensor({int64_t(d)});
        w.Wo = init_weight(rng, d, d);
        for (int64_t i = 0; i < w.Wo.numel(); ++i) w.Wo[i] *= damp;
        w.bo = Tensor({int64_t(d)});
        w.W1 = init_weight(rng, d, arch_.d_mlp);
        w.b1 = Tensor({int64_t(arch_.d_mlp)});
        w.W2 = init_weight(rng, arch_.d_mlp, d);
        for (int64_t i = 0; i < w.W2.numel(); ++i) w.W2[i] *= damp;
        w.b2 = Tensor({int64_t(d)});
        layers_.push_back(std::move(w));
    }
}

std::vector<int> Backbone::attention_layer_ids() const {
    std::vector<int> ids(layers_.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = int(i);
    return ids;
}

void Backbone::set_decoder_weights(Tensor dec_W, Tensor dec_b) {
    check_same_shape(codec_.dec_W, dec_W, "set_decoder_weights (W)");
    check_same_shape(codec_.dec_b, dec_b, "set_decoder_weights (b)");
    codec_.dec_W = std::move(dec_W);
    codec_.dec_b = std::move(dec_b);
}

ag::Var Backbone::embed_tokens(const ag::Var& z, int t, const Conditioning& cond, int H,
                               int W) const {
    const int c = arch_.latent_channels, d = arch_.d_model;
    int64_t n = int64_t(H) * W;
    auto toks = ag::take(z, chw_to_tokens_index(c, H, W), {n, int64_t(c)});
    auto x = ag::linear(toks, ag::constant(embed_W_), ag::constant(embed_b_));
    x = ag::add(x, ag::constant(positional_embedding(H, W, d)));

    // Slow time code: neighboring timesteps see near-identical conditioning,
    // so the timestep-annealed objectives change smoothly.
    Tensor temb_in = sinusoidal(0.05 * double(t), d);
    Tensor temb({int64_t(d)});
    for (int i = 0; i < d; ++i) {
        double acc = time_b_[i];
        for (int jj = 0; jj < d; ++jj) acc += temb_in[jj] * time_W_[int64_t(jj) * d + i];
        temb[i] = acc;
    }
    x = ag::add_rowvec(x, ag::constant(std::move(temb)));

    if (!cond.prompt.empty()) {
        std::mt19937_64 prng(fnv1a(cond.prompt));
        x = ag::add_rowvec(x, ag::constant(Tensor::randn({int64_t(d)}, prng, 0.5)));
    }
    if (cond.structural) {
        if (!supports_condition_)
            throw std::invalid_argument("backbone: structural condition supplied but this "
                                        "backbone has no conditioning hook");
        if (cond.structural->shape() != z->value.shape())
            throw std::invalid_argument("backbone: structural condition shape mismatch");
        Tensor cond_toks({n, int64_t(c)});
        for (int64_t tok = 0; tok < n; ++tok)
            for (int ch = 0; ch < c; ++ch)
                cond_toks[tok * c + ch] = (*cond.structural)[int64_t(ch) * n + tok];
        auto ct = ag::linear(ag::constant(std::move(cond_toks)), ag::constant(embed_W_), nullptr);
        x = ag::add(x, ct);
    }
    return x;
}

ForwardResult Backbone::forward(const ag::Var& z, int t, const Conditioning& cond,
                                double residual_scale) const {
    if (z->value.rank() != 3 || z->value.dim(0) != arch_.latent_channels)
        throw std::invalid_argument("backbone: latent must be [" +
                                    std::to_string(arch_.latent_channels) + ",H,W], got " +
                                    Tensor::shape_str(z->value.shape()));
    schedule_.at(t);  // range check
    const int H = int(z->value.dim(1)), W = int(z->value.dim(2));
    const int c = arch_.latent_channels, d = arch_.d_model, heads = arch_.heads;
    const int64_t n = int64_t(H) * W, dh = d / heads;

    auto split_idx = split_heads_index(n, heads, dh);
    auto merge_idx = merge_heads_index(n, heads, dh);
    auto selected = selector_.resolve(attention_layer_ids());

    auto x = embed_tokens(z, t, cond, H, W);
    ForwardResult res;
    for (size_t l = 0; l < layers_.size(); ++l) {
        const auto& wl = layers_[l];
        auto q = ag::linear(x, ag::constant(wl.Wq), ag::constant(wl.bq));
        auto k = ag::linear(x, ag::constant(wl.Wk), ag::constant(wl.bk));
        auto v = ag::linear(x, ag::constant(wl.Wv), ag::constant(wl.bv));
        auto Qh = ag::take(q, split_idx, {int64_t(heads), n, dh});
        auto Kh = ag::take(k, split_idx, {int64_t(heads), n, dh});
        auto Vh = ag::take(v, split_idx, {int64_t(heads), n, dh});
        auto attn = attention(Qh, Kh, Vh);
        auto merged = ag::take(attn, merge_idx, {n, int64_t(d)});
        auto o = ag::linear(merged, ag::constant(wl.Wo), ag::constant(wl.bo));
        x = ag::add(x, residual_scale == 1.0 ? o : ag::scale(o, residual_scale));
        auto h1 = ag::tanh(ag::linear(x, ag::constant(wl.W1), ag::constant(wl.b1)));
        auto o2 = ag::linear(h1, ag::constant(wl.W2), ag::constant(wl.b2));
        x = ag::add(x, residual_scale == 1.0 ? o2 : ag::scale(o2, residual_scale));

        if (std::find(selected.begin(), selected.end(), int(l)) != selected.end())
            res.taps.layers.push_back({int(l), Qh, Kh, Vh});
    }
    auto out_toks = ag::linear(x, ag::constant(out_W_), ag::constant(out_b_));
    auto noise = ag::take(out_toks, tokens_to_chw_index(c, H, W), {int64_t(c), int64_t(H), int64_t(W)});
    res.noise_pred = noise->value;
    ++forward_count_;
    return res;
}

AttentionTaps Backbone::extract(const Tensor& latent, int t, const Conditioning& cond,
                                bool requires_grad) const {
    auto z = ag::leaf(latent, requires_grad);
    return forward(z, t, cond).taps;
}

AttentionTaps Backbone::extract_detached(const Tensor& latent, int t,
                                         const Conditioning& cond) const {
    auto taps = extract(latent, t, cond, false);
    AttentionTaps out;
    for (auto& l : taps.layers)
        out.layers.push_back({l.layer_id, ag::constant(l.Q->value), ag::constant(l.K->value),
                              ag::constant(l.V->value)});
    return out;
}

Tensor Backbone::encode(const Image& img) const { return codec_.encode(image_to_chw(img)); }

Image Backbone::decode(const Tensor& latent) const { return chw_to_image(codec_.decode(latent)); }

Tensor Backbone::predict_noise(const Tensor& z_t, int t, const std::string& prompt,
                               double cfg_scale, const Tensor* condition) const {
    if (condition && !supports_condition_)
        throw std::invalid_argument("predict_noise: structural condition supplied but this "
                                    "backbone has no conditioning hook");
    Conditioning uncond{"", condition};
    if (prompt.empty()) return forward(ag::constant(z_t), t, uncond).noise_pred;
    if (cfg_scale < 1.0)
        throw std::invalid_argument("predict_noise: cfg_scale must be >= 1 with a prompt");
    Conditioning cond{prompt, condition};
    Tensor eps_cond = forward(ag::constant(z_t), t, cond).noise_pred;
    if (cfg_scale == 1.0) return eps_cond;
    Tensor eps_uncond = forward(ag::constant(z_t), t, uncond).noise_pred;
    Tensor out = eps_uncond;
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = eps_uncond[i] + cfg_scale * (eps_cond[i] - eps_uncond[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void Backbone::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    int32_t hdr[10] = {int32_t(arch_.latent_channels), int32_t(arch_.d_model), int32_t(arch_.heads),
                       int32_t(arch_.n_layers),        int32_t(arch_.d_mlp),  int32_t(schedule_.t_max()),
                       int32_t(codec_.factor),         codec_.identity ? 1 : 0,
                       int32_t(selector_.last_n),      supports_condition_ ? 1 : 0};
    os.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
    write_tensor(os, embed_W_);
    write_tensor(os, embed_b_);
    write_tensor(os, time_W_);
    write_tensor(os, time_b_);
    write_tensor(os, out_W_);
    write_tensor(os, out_b_);
    for (const auto& l : layers_)
        for (const Tensor* t : {&l.Wq, &l.bq, &l.Wk, &l.bk, &l.Wv, &l.bv, &l.Wo, &l.bo, &l.W1,
                                &l.b1, &l.W2, &l.b2})
            write_tensor(os, *t);
    if (!codec_.identity) {
        write_tensor(os, codec_.enc_W);
        write_tensor(os, codec_.dec_W);
        write_tensor(os, codec_.dec_b);
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

void Backbone::load_checkpoint(const std::string& path, const std::string& expected_sha) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    if (expected_sha.empty())
        throw std::invalid_argument("pretrained backbone descriptor must carry a sha256 hash");
    std::string actual = file_sha256(path);
    if (actual != expected_sha)
        throw std::runtime_error("checkpoint hash mismatch for " + path + ": expected " +
                                 expected_sha + ", got " + actual);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw std::runtime_error("corrupt checkpoint (bad magic): " + path);
    int32_t hdr[10];
    is.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
    arch_.latent_channels = hdr[0];
    arch_.d_model = hdr[1];
    arch_.heads = hdr[2];
    arch_.n_layers = hdr[3];
    arch_.d_mlp = hdr[4];
    schedule_ = DiffusionSchedule::scaled_linear(hdr[5]);
    bool identity = hdr[7] != 0;
    selector_.last_n = hdr[8];
    supports_condition_ = hdr[9] != 0;
    embed_W_ = read_tensor(is);
    embed_b_ = read_tensor(is);
    time_W_ = read_tensor(is);
    time_b_ = read_tensor(is);
    out_W_ = read_tensor(is);
    out_b_ = read_tensor(is);
    layers_.resize(static_cast<size_t>(arch_.n_layers));
    for (auto& l : layers_)
        for (Tensor* t : {&l.Wq, &l.bq, &l.Wk, &l.bk, &l.Wv, &l.bv, &l.Wo, &l.bo, &l.W1, &l.b1,
                          &l.W2, &l.b2})
            *t = read_tensor(is);
    if (identity) {
        codec_ = LatentCodec::make_identity();
    } else {
        codec_.factor = hdr[6];
        codec_.latent_channels = arch_.latent_channels;
        codec_.identity = false;
        codec_.enc_W = read_tensor(is);
        codec_.dec_W = read_tensor(is);
        codec_.dec_b = read_tensor(is);
    }
}

std::string Backbone::file_sha256(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open file for hashing: " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[65536];
    while (is) {
        is.read(buf, sizeof(buf));
        EVP_DigestUpdate(ctx, buf, static_cast<size_t>(is.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Decoder fine-tuning

DecoderFinetuneResult finetune_decoder(const Backbone& backbone, const Image& x, int steps,
                                       double lr) {
    if (steps < 0) throw std::invalid_argument("finetune_decoder: steps must be >= 0");
    const LatentCodec& codec = backbone.codec();
    if (codec.identity)
        throw std::invalid_argument("finetune_decoder: identity codec has no decoder weights");
    Tensor target = image_to_chw(x);
    Tensor latent = codec.encode(target);

    DecoderFinetuneResult res;
    res.dec_W = codec.dec_W;
    res.dec_b = codec.dec_b;

    auto eval_loss = [&](const Tensor& W, const Tensor& b) {
        LatentCodec c = codec;
        c.dec_W = W;
        c.dec_b = b;
        Tensor rec = c.decode(latent);
        double s = 0.0;
        for (int64_t i = 0; i < rec.numel(); ++i) s += std::abs(rec[i] - target[i]);
        return s / double(rec.numel());
    };

    double initial = eval_loss(res.dec_W, res.dec_b);
    res.losses.push_back(initial);
    if (steps == 0) return res;

    Tensor best_W = res.dec_W, best_b = res.dec_b;
    double best = initial;
    Adam opt_W(lr), opt_b(lr);
    for (int s = 0; s < steps; ++s) {
        auto W = ag::leaf(res.dec_W, true);
        auto b = ag::leaf(res.dec_b, true);
        auto rec = codec.decode_graph(latent, W, b);
        auto loss = ag::l1_mean(rec, ag::constant(target));
        double lv = loss->value[0];
        if (!std::isfinite(lv))
            throw std::runtime_error("finetune_decoder: non-finite loss at step " +
                                     std::to_string(s));
        ag::backward(loss);
        opt_W.step(res.dec_W, W->grad);
        opt_b.step(res.dec_b, b->grad);
        double after = eval_loss(res.dec_W, res.dec_b);
        res.losses.push_back(after);
        if (after < best) {
            best = after;
            best_W = res.dec_W;
            best_b = res.dec_b;
        }
    }
    res.dec_W = std::move(best_W);
    res.dec_b = std::move(best_b);
    return res;
}

}  // namespace attnstyle
