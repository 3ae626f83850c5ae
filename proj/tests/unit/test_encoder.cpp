#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "helpers.hpp"
#include "trajprior/encoder.hpp"
#include "trajprior/errors.hpp"

using namespace trajprior;

namespace {

Clip random_clip(std::size_t h, std::size_t w, std::uint64_t seed) {
    Clip c;
    for (std::size_t t = 0; t < kClipFrames; ++t) c.frames.push_back(testutil::random_tensor<float>({3, h, w}, seed + t, 0.0, 1.0));
    return c;
}

EncoderConfig small_config() {
    EncoderConfig c;
    c.fused_channels = 4;
    c.heads = 2;
    c.layers = 1;
    c.pyramid_channels = {2, 2, 2, 2};
    return c;
}

} // namespace

TEST(Encoder, GrayscaleUsesLuminanceWeights) {
    // channel planes: R = (1, 0), G = (0, 1), B = (1, 1)
    Tensor img({3, 1, 2}, {1, 0, 0, 1, 1, 1});
    const Tensor g = to_grayscale(img);
    ASSERT_EQ(g.shape(), (Shape{1, 1, 2}));
    EXPECT_NEAR(g[0], 0.299 + 0.114, 1e-6);
    EXPECT_NEAR(g[1], 0.587 + 0.114, 1e-6);
}

TEST(Encoder, PatchStatisticsMatchNaiveDft) {
    const auto gray = testutil::random_tensor<float>({1, 32, 32}, 5, 0.0, 1.0);
    const Tensor a = patch_statistics(gray, 8);
    ASSERT_EQ(a.size(), 16u);
    for (std::size_t pr = 0; pr < 4; ++pr)
        for (std::size_t pc = 0; pc < 4; ++pc) {
            std::vector<double> patch(64);
            for (std::size_t i = 0; i < 8; ++i)
                for (std::size_t j = 0; j < 8; ++j) patch[i * 8 + j] = gray[(pr * 8 + i) * 32 + pc * 8 + j];
            double mean = 0.0;
            for (const auto& z : testutil::naive_dft2(patch, 8)) mean += std::abs(z);
            EXPECT_NEAR(a[pr * 4 + pc], mean / 64.0, 1e-4);
        }
}

TEST(Encoder, ConstantImageHasDcOnlyStatistic) {
    const Tensor gray = Tensor::full({1, 32, 32}, 0.5f);
    const Tensor a = patch_statistics(gray, 8);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], 0.5 * 64 / 64.0, 1e-5);
}

TEST(Encoder, OutputWidthIsFusedChannelsForAnyResolution) {
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{32, 32}, {64, 32}, {64, 64}}) {
        EncoderConfig cfg = small_config();
        cfg.height = h;
        cfg.width = w;
        const ParamMap p = init_encoder_params(cfg, 3);
        const Tensor out = encode_clip(random_clip(h, w, 7), p, cfg);
        EXPECT_EQ(out.size(), cfg.fused_channels);
        EXPECT_TRUE(out.all_finite());
    }
}

TEST(Encoder, FrequencyAttentionScalesEachPatchBySigmoidWeight) {
    const EncoderConfig cfg = small_config();
    const ParamMap p = init_encoder_params(cfg, 1);
    const auto gray = testutil::random_tensor<float>({1, 32, 32}, 2, 0.0, 1.0);
    const Tensor w = frequency_weights(gray, p, cfg);
    ASSERT_EQ(w.size(), cfg.patch_count());
    for (std::size_t i = 0; i < w.size(); ++i) {
        EXPECT_GT(w[i], 0.0f);
        EXPECT_LT(w[i], 1.0f);
    }
    const Tensor out = frequency_attention(gray, p, cfg);
    ASSERT_EQ(out.shape(), (Shape{1, 32, 32}));
    for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x)
            EXPECT_NEAR(out[y * 32 + x], gray[y * 32 + x] * w[(y / 8) * 4 + x / 8], 1e-6);
}

TEST(Encoder, ProjectionIsUnitNorm) {
    const EncoderConfig cfg = small_config();
    const ParamMap enc = init_encoder_params(cfg, 1);
    const ParamMap head = init_head_params(cfg.fused_channels, {}, 2);
    std::vector<Clip> clips{random_clip(32, 32, 1), random_clip(32, 32, 20)};
    const auto feats = encode_clips({&clips[0], &clips[1]}, enc, cfg);
    Tensor f({2, cfg.fused_channels});
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < cfg.fused_channels; ++c) f.at(r, c) = feats[r][c];
    const Tensor z = project(f, head, cfg);
    ASSERT_EQ(z.shape(), (Shape{2, 128}));
    for (std::size_t r = 0; r < 2; ++r) {
        double n = 0.0;
        for (std::size_t c = 0; c < 128; ++c) n += double(z.at(r, c)) * z.at(r, c);
        EXPECT_NEAR(n, 1.0, 1e-5);
    }
}

TEST(Encoder, BatchedAndSingleClipInferenceAgree) {
    const EncoderConfig cfg = small_config();
    const ParamMap p = init_encoder_params(cfg, 4);
    std::vector<Clip> clips{random_clip(32, 32, 30), random_clip(32, 32, 40)};
    const auto both = encode_clips({&clips[0], &clips[1]}, p, cfg);
    for (std::size_t i = 0; i < 2; ++i) {
        const Tensor one = encode_clip(clips[i], p, cfg);
        for (std::size_t c = 0; c < one.size(); ++c) EXPECT_NEAR(both[i][c], one[c], 1e-5);
    }
}

TEST(Encoder, SameSeedSameParameters) {
    const EncoderConfig cfg = small_config();
    EXPECT_EQ(init_encoder_params(cfg, 9), init_encoder_params(cfg, 9));
    EXPECT_NE(init_encoder_params(cfg, 9), init_encoder_params(cfg, 10));
}

TEST(Encoder, RejectsBadConfigsAndClips) {
    EncoderConfig c = small_config();
    c.patch = 6;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.height = 40;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.fused_channels = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    Clip short_clip = random_clip(32, 32, 1);
    short_clip.frames.pop_back();
    EXPECT_THROW(short_clip.validate(), DimensionError);
}

TEST(Encoder, CheckpointRoundTrip) {
    Checkpoint ck;
    ck.encoder = small_config();
    ck.head_config = {32, 16};
    ck.encoder_params = init_encoder_params(ck.encoder, 5);
    ck.head_params = init_head_params(ck.encoder.fused_channels, ck.head_config, 6);
    const auto path = std::filesystem::temp_directory_path() / "trajprior_test_model.tpck";
    save_checkpoint(path.string(), ck);
    const Checkpoint back = load_checkpoint(path.string());
    EXPECT_EQ(back.encoder, ck.encoder);
    EXPECT_EQ(back.head_config, ck.head_config);
    EXPECT_EQ(back.encoder_params, ck.encoder_params);
    EXPECT_EQ(back.head_params, ck.head_params);
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint(path.string()), Error);
}

TEST(Encoder, GradientsPassFiniteDifferences) {
    const EncoderConfig cfg = small_config();
    const ParamMap p = init_encoder_params(cfg, 11);
    std::vector<Clip> clips{random_clip(32, 32, 50)};
    const EncoderInputs in = prepare_inputs({&clips[0]}, cfg);
    Tape<double> tape;
    const auto nodes = build_encoder(tape, cfg, p, 1, BatchNormMode::Train);
    const NodeId loss = testutil::weighted_sum(tape, nodes.output, 12);
    const std::map<std::string, BasicTensor<double>> feed{
        {"rgb", in.rgb.cast<double>()}, {"gray", in.gray.cast<double>()}, {"stats", in.stats.cast<double>()}};
    EXPECT_LT(testutil::check(tape, loss, feed, 4, 13), 1e-3);
}
