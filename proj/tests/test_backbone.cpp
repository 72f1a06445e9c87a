#include <doctest.h>

#include "helpers.hpp"

using namespace attnstyle;
using namespace testutil;

TEST_CASE("descriptor parsing and construction rules") {
    auto d = BackboneDescriptor::from_json_text(R"({"kind":"toy","seed":3,"layers":9})");
    CHECK(d.seed == 3);
    CHECK(d.arch.n_layers == 9);
    CHECK_THROWS(BackboneDescriptor::from_json_text(R"({"kind":"mystery"})"));

    auto bad = tiny_desc();
    bad.arch.n_layers = 4;  // last-6 selection needs headroom
    CHECK_THROWS(Backbone::load(bad));
    bad = tiny_desc();
    bad.arch.d_model = 15;
    CHECK_THROWS(Backbone::load(bad));
}

TEST_CASE("toy backbone is deterministic in its seed") {
    auto b1 = Backbone::load(tiny_desc(9));
    auto b2 = Backbone::load(tiny_desc(9));
    auto b3 = Backbone::load(tiny_desc(10));
    std::mt19937_64 rng(1);
    Tensor z = Tensor::randn({4, 4, 4}, rng);
    Tensor e1 = b1.predict_noise(z, 50, "", 1.0);
    Tensor e2 = b2.predict_noise(z, 50, "", 1.0);
    Tensor e3 = b3.predict_noise(z, 50, "", 1.0);
    CHECK(max_abs_diff(e1, e2) == 0.0);
    CHECK(max_abs_diff(e1, e3) > 0.0);
    CHECK(e1.shape() == z.shape());
}

TEST_CASE("selector picks the trailing layers of the registry") {
    auto b = Backbone::load(tiny_desc());
    CHECK(b.attention_layer_ids().size() == 8);
    auto taps = b.extract_detached(Tensor({4, 4, 4}), 10, {});
    REQUIRE(taps.layers.size() == 2);
    CHECK(taps.layers[0].layer_id == 6);
    CHECK(taps.layers[1].layer_id == 7);
}

TEST_CASE("timestep embedding is live: taps differ across t") {
    auto b = Backbone::load(tiny_desc());
    std::mt19937_64 rng(4);
    Tensor z = Tensor::randn({4, 4, 4}, rng);
    auto a = b.extract_detached(z, 100, {});
    auto c = b.extract_detached(z, 1, {});
    CHECK(max_abs_diff(a.layers[0].Q->value, c.layers[0].Q->value) > 1e-9);
}

TEST_CASE("prompt conditioning changes the prediction") {
    auto b = Backbone::load(tiny_desc());
    std::mt19937_64 rng(5);
    Tensor z = Tensor::randn({4, 4, 4}, rng);
    Tensor uncond = b.predict_noise(z, 30, "", 1.0);
    Tensor cond = b.predict_noise(z, 30, "a brick wall", 1.0);
    CHECK(max_abs_diff(uncond, cond) > 1e-9);
    CHECK_THROWS(b.predict_noise(z, 30, "a brick wall", 0.5));
    // cfg blends: s=1 equals the conditional branch
    Tensor blend = b.predict_noise(z, 30, "a brick wall", 7.0);
    CHECK(max_abs_diff(blend, cond) > 1e-9);
}

TEST_CASE("structural condition requires the hook") {
    auto desc = tiny_desc();
    desc.supports_condition = false;
    auto b = Backbone::load(desc);
    Tensor z({4, 4, 4});
    CHECK_THROWS(b.predict_noise(z, 10, "", 1.0, &z));
}

TEST_CASE("codec shapes: factor 8 folds 64x64 into 8x8") {
    auto codec = LatentCodec::make(8, 4, 1);
    Tensor img({3, 64, 64});
    Tensor lat = codec.encode(img);
    CHECK(lat.shape() == std::vector<int64_t>({4, 8, 8}));
    CHECK(codec.decode(lat).shape() == std::vector<int64_t>({3, 64, 64}));
}

TEST_CASE("non-divisible input fails before any compute") {
    auto codec = LatentCodec::make(8, 4, 1);
    CHECK_THROWS_WITH_AS(codec.encode(Tensor({3, 511, 511})), doctest::Contains("511"),
                         std::invalid_argument);
}

TEST_CASE("identity codec round trip is exact") {
    auto desc = tiny_desc();
    desc.identity_codec = true;
    desc.arch.latent_channels = 3;
    auto b = Backbone::load(desc);
    Image img = noise_image(8, 8, 6);
    CHECK(b.decode(b.encode(img)).pixels == img.pixels);
}

TEST_CASE("lossy round trip stays closer than an unrelated image") {
    auto b = Backbone::load(tiny_desc());
    Image img = gradient_image(16, 16);
    Image other = noise_image(16, 16, 7);
    Image rec = b.decode(b.encode(img));
    auto l1 = [](const Image& a, const Image& c) {
        double s = 0;
        for (size_t i = 0; i < a.pixels.size(); ++i)
            s += std::abs(double(a.pixels[i]) - double(c.pixels[i]));
        return s / double(a.pixels.size());
    };
    CHECK(l1(rec, img) < l1(other, img));
}

TEST_CASE("checkpoint save/load reproduces the toy network bitwise") {
    auto toy = Backbone::load(tiny_desc(21));
    std::string ckpt = tmp_dir() + "/bb.ckpt";
    toy.save_checkpoint(ckpt);
    std::string sha = Backbone::file_sha256(ckpt);

    BackboneDescriptor d;
    d.kind = BackboneDescriptor::Kind::Pretrained;
    d.checkpoint = ckpt;
    d.sha256 = sha;
    d.select_last = 2;
    auto loaded = Backbone::load(d);

    std::mt19937_64 rng(8);
    Tensor z = Tensor::randn({4, 4, 4}, rng);
    CHECK(max_abs_diff(toy.predict_noise(z, 33, "", 1.0), loaded.predict_noise(z, 33, "", 1.0)) ==
          0.0);

    SUBCASE("hash mismatch is rejected") {
        d.sha256 = std::string(64, '0');
        CHECK_THROWS_WITH_AS(Backbone::load(d), doctest::Contains("hash mismatch"),
                             std::runtime_error);
    }
    SUBCASE("missing hash is rejected") {
        d.sha256.clear();
        CHECK_THROWS(Backbone::load(d));
    }
    SUBCASE("missing file is rejected") {
        d.checkpoint = tmp_dir() + "/nope.ckpt";
        CHECK_THROWS(Backbone::load(d));
    }
    SUBCASE("truncated checkpoint is rejected") {
        std::string trunc = tmp_dir() + "/trunc.ckpt";
        {
            std::ifstream in(ckpt, std::ios::binary);
            std::ofstream out(trunc, std::ios::binary);
            char buf[64];
            in.read(buf, sizeof(buf));
            out.write(buf, in.gcount());
        }
        d.checkpoint = trunc;
        d.sha256 = Backbone::file_sha256(trunc);
        CHECK_THROWS(Backbone::load(d));
    }
}

TEST_CASE("decoder fine-tuning: zero steps is a no-op, 50 steps improves") {
    auto b = Backbone::load(tiny_desc());
    Image img = gradient_image(16, 16);

    auto frozen = finetune_decoder(b, img, 0, 0.01);
    REQUIRE(frozen.losses.size() == 1);
    CHECK(max_abs_diff(frozen.dec_W, b.codec().dec_W) == 0.0);

    auto tuned = finetune_decoder(b, img, 50, 0.01);
    REQUIRE(tuned.losses.size() == 51);
    CHECK(tuned.losses.back() < tuned.losses.front());

    // generalization: a same-texture holdout crop must not regress much
    Image crop;
    crop.h = crop.w = 8;
    crop.c = 3;
    crop.pixels.resize(8 * 8 * 3);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            for (int ch = 0; ch < 3; ++ch) crop.at(y, x, ch) = img.at(y + 4, x + 4, ch);
    auto holdout_l1 = [&](const Tensor& W, const Tensor& bias) {
        LatentCodec c = b.codec();
        c.dec_W = W;
        c.dec_b = bias;
        Tensor t = image_to_chw(crop);
        Tensor rec = c.decode(c.encode(t));
        double s = 0;
        for (int64_t i = 0; i < rec.numel(); ++i) s += std::abs(rec[i] - t[i]);
        return s / double(rec.numel());
    };
    double before = holdout_l1(frozen.dec_W, frozen.dec_b);
    double after = holdout_l1(tuned.dec_W, tuned.dec_b);
    CHECK(after <= before * 1.10);

    CHECK_THROWS(finetune_decoder(b, img, -1, 0.01));
    auto ident = tiny_desc();
    ident.identity_codec = true;
    ident.arch.latent_channels = 3;
    CHECK_THROWS(finetune_decoder(Backbone::load(ident), img, 5, 0.01));
}

TEST_CASE("forward_count instruments denoiser invocations") {
    auto b = Backbone::load(tiny_desc());
    uint64_t before = b.forward_count();
    b.predict_noise(Tensor({4, 4, 4}), 10, "", 1.0);
    CHECK(b.forward_count() == before + 1);
    b.predict_noise(Tensor({4, 4, 4}), 10, "x", 7.0);
    CHECK(b.forward_count() == before + 3);  // conditional + unconditional
}
