#pragma once

#include <memory>
#include <optional>
#include <string>

#include "attnstyle/attention.hpp"
#include "attnstyle/image.hpp"
#include "attnstyle/schedule.hpp"

namespace attnstyle {

// Linear block codec between image space and latent space. encode folds f x f
// pixel blocks into one latent vector; decode unfolds. The encoder is frozen;
// decoder weights are the only trainable part (per-example fine-tuning).
struct LatentCodec {
    int factor = 1;
    int latent_channels = 3;
    bool identity = true;   // factor-1 pass-through, exact round trip
    Tensor enc_W;           // [3*f*f, latent_channels]
    Tensor dec_W;           // [latent_channels, 3*f*f]
    Tensor dec_b;           // [3*f*f]

    static LatentCodec make_identity();
    static LatentCodec make(int factor, int latent_channels, uint64_t seed);

    Tensor encode(const Tensor& img_chw) const;  // [3,H,W] -> [c,H/f,W/f]
    Tensor decode(const Tensor& latent) const;   // exact inverse of shapes
    // Differentiable decode for fine-tuning; `latent` is treated as constant.
    ag::Var decode_graph(const Tensor& latent, const ag::Var& W, const ag::Var& b) const;
};

struct ToyArch {
    int latent_channels = 4;
    int d_model = 32;
    int heads = 2;
    int n_layers = 12;
    int d_mlp = 64;
};

// What a run needs to instantiate a backbone. Loaded from a small JSON file.
struct BackboneDescriptor {
    enum class Kind { Toy, Pretrained };
    Kind kind = Kind::Toy;
    uint64_t seed = 0;
    std::string checkpoint;  // pretrained only
    std::string sha256;      // pretrained only; content hash of the checkpoint
    int t_max = 100;
    int codec_factor = 2;
    bool identity_codec = false;
    int select_last = 6;
    bool supports_condition = true;
    ToyArch arch;

    static BackboneDescriptor from_file(const std::string& path);
    static BackboneDescriptor from_json_text(const std::string& text);
};

struct Conditioning {
    std::string prompt;                 // empty -> unconditional
    const Tensor* structural = nullptr; // optional latent-shaped condition
};

struct ForwardResult {
    Tensor noise_pred;   // same shape as the input latent
    AttentionTaps taps;  // selected layers only; empty if selector resolves to none
};

// A denoising backbone: a residual transformer over the latent token grid with
// sinusoidal timestep embedding. "Toy" instances are generated from a seed;
// "pretrained" instances load the identical architecture from a checkpoint
// file whose content hash is verified. Weights are never trained here.
class Backbone {
public:
    static Backbone load(const BackboneDescriptor& desc);
    static Backbone load_from_file(const std::string& descriptor_path);

    const DiffusionSchedule& schedule() const { return schedule_; }
    const LatentCodec& codec() const { return codec_; }
    void set_decoder_weights(Tensor dec_W, Tensor dec_b);
    int latent_channels() const { return arch_.latent_channels; }
    int codec_factor() const { return codec_.factor; }
    bool supports_condition() const { return supports_condition_; }
    const LayerSelector& selector() const { return selector_; }
    std::vector<int> attention_layer_ids() const;

    // One pass of the denoiser. `z` is a [c,H,W] graph variable; taps for the
    // selected layers stay connected to it, so losses built on them
    // backpropagate into the latent. residual_scale scales the residual-branch
    // contributions (1 in normal use; instrumented tests set 0).
    ForwardResult forward(const ag::Var& z, int t, const Conditioning& cond,
                          double residual_scale = 1.0) const;

    // Forward pass capturing taps only; the noise prediction is discarded.
    AttentionTaps extract(const Tensor& latent, int t, const Conditioning& cond,
                          bool requires_grad = false) const;
    // Detached taps: values only, safe to reuse as reference/content branches.
    AttentionTaps extract_detached(const Tensor& latent, int t, const Conditioning& cond) const;

    Tensor encode(const Image& img) const;
    Image decode(const Tensor& latent) const;

    // CFG noise prediction: eps_uncond + s * (eps_cond - eps_uncond).
    Tensor predict_noise(const Tensor& z_t, int t, const std::string& prompt, double cfg_scale,
                         const Tensor* condition = nullptr) const;

    uint64_t forward_count() const { return forward_count_; }

    void save_checkpoint(const std::string& path) const;
    static std::string file_sha256(const std::string& path);

private:
    Backbone() = default;
    void init_toy(uint64_t seed);
    void load_checkpoint(const std::string& path, const std::string& expected_sha);
    ag::Var embed_tokens(const ag::Var& z, int t, const Conditioning& cond, int H, int W) const;

    struct LayerWeights {
        Tensor Wq, bq, Wk, bk, Wv, bv, Wo, bo;
        Tensor W1, b1, W2, b2;
    };

    ToyArch arch_;
    std::vector<LayerWeights> layers_;
    Tensor embed_W_, embed_b_;
    Tensor time_W_, time_b_;
    Tensor out_W_, out_b_;
    LatentCodec codec_;
    DiffusionSchedule schedule_;
    LayerSelector selector_;
    bool supports_condition_ = true;
    mutable uint64_t forward_count_ = 0;
};

struct DecoderFinetuneResult {
    Tensor dec_W, dec_b;
    std::vector<double> losses;  // per-step L1, losses.front() is the frozen loss
};

// Minimizes |D(E(x)) - x|_1 over the decoder weights with Adam; the encoder
// and the original backbone are untouched (caller applies the returned
// weights via set_decoder_weights if wanted).
DecoderFinetuneResult finetune_decoder(const Backbone& backbone, const Image& x, int steps,
                                       double lr);

}  // namespace attnstyle
