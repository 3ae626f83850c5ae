#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "trajprior/errors.hpp"
#include "trajprior/retrieval.hpp"
#include "trajprior/trainer.hpp"

using namespace trajprior;

namespace {

Clip random_clip(std::uint64_t seed) {
    Clip c;
    for (std::size_t t = 0; t < kClipFrames; ++t) c.frames.push_back(testutil::random_tensor<float>({3, 32, 32}, seed * 31 + t, 0.0, 1.0));
    return c;
}

EncoderConfig tiny() {
    EncoderConfig c;
    c.fused_channels = 4;
    c.heads = 2;
    c.layers = 1;
    c.pyramid_channels = {2, 2, 2, 2};
    return c;
}

TrainerConfig tiny_trainer() {
    TrainerConfig t;
    t.batch = 4;
    t.epochs = 1;
    t.hard_negatives = 3;
    t.queue_capacity = 16;
    t.head = {16, 8};
    t.lr_encoder = 1e-3;
    t.lr_head = 1e-3;
    return t;
}

double oracle_nce(std::span<const float> a, std::span<const float> p, const std::vector<std::vector<float>>& negs, double tau) {
    auto dot = [](std::span<const float> x, std::span<const float> y) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += double(x[i]) * y[i];
        return s;
    };
    double denom = std::exp(dot(a, p) / tau);
    for (const auto& n : negs) denom += std::exp(dot(a, n) / tau);
    return -std::log(std::exp(dot(a, p) / tau) / denom);
}

} // namespace

TEST(Augment, SameSeedSameViewDifferentSeedDifferentView) {
    const Clip c = random_clip(1);
    const AugmentationPolicy pol;
    EXPECT_EQ(augment(c, pol, 5), augment(c, pol, 5));
    EXPECT_NE(augment(c, pol, 5), augment(c, pol, 6));
    const Clip v = augment(c, pol, 7);
    EXPECT_NO_THROW(v.validate());
    EXPECT_EQ(v.height(), 32u);
    for (const auto& f : v.frames)
        for (std::size_t i = 0; i < f.size(); ++i) {
            EXPECT_GE(f[i], 0.0f);
            EXPECT_LE(f[i], 1.0f);
        }
}

TEST(Augment, IdentityPolicyLeavesClipUnchanged) {
    const Clip c = random_clip(2);
    const Clip v = augment(c, AugmentationPolicy::identity(), 3);
    for (std::size_t t = 0; t < kClipFrames; ++t)
        for (std::size_t i = 0; i < c.frames[t].size(); ++i) EXPECT_NEAR(v.frames[t][i], c.frames[t][i], 1e-6);
}

TEST(Augment, FlipIsAnInvolution) {
    Tensor f({1, 1, 3}, {1, 2, 3});
    EXPECT_EQ(flip_horizontal(f).storage(), (std::vector<float>{3, 2, 1}));
    const Clip c = random_clip(3);
    EXPECT_EQ(flip_horizontal(flip_horizontal(c.frames[0])), c.frames[0]);
}

TEST(Augment, SameTransformOnEveryFrame) {
    // identical frames stay identical after augmentation
    Clip c = random_clip(4);
    for (auto& f : c.frames) f = c.frames[0];
    const Clip v = augment(c, AugmentationPolicy{}, 11);
    for (const auto& f : v.frames) EXPECT_EQ(f, v.frames[0]);
}

TEST(Augment, RejectsBadPolicy) {
    AugmentationPolicy p;
    p.crop_scale_min = 0.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = {};
    p.flip_prob = 1.5;
    EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Queue, MatchesDequeOracle) {
    std::mt19937_64 rng(8);
    MemoryQueue q(7, 3);
    std::deque<std::vector<float>> oracle;
    double next = 0.0;
    for (int round = 0; round < 40; ++round) {
        const std::size_t n = rng() % 5 + 1;
        Tensor rows({n, 3});
        for (std::size_t r = 0; r < n; ++r) {
            // unit vector that encodes a running marker
            const double s = std::sqrt(next * next + 1.0);
            rows.at(r, 0) = static_cast<float>(next / s);
            rows.at(r, 1) = static_cast<float>(1.0 / s);
            oracle.push_back({rows.at(r, 0), rows.at(r, 1), rows.at(r, 2)});
            next += 1.0;
        }
        while (oracle.size() > 7) oracle.pop_front();
        q.enqueue(rows);
        ASSERT_EQ(q.size(), oracle.size());
        const Tensor snap = q.snapshot();
        for (std::size_t i = 0; i < oracle.size(); ++i) {
            EXPECT_EQ(q.entry(i), oracle[i]);
            for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(snap.at(i, c), oracle[i][c]);
        }
    }
}

TEST(Queue, EmptyAndOversizedBatches) {
    MemoryQueue q(4, 2);
    EXPECT_EQ(q.size(), 0u);
    EXPECT_EQ(q.snapshot().size(), 0u);
    Tensor big({6, 2});
    for (std::size_t i = 0; i < 6; ++i) big[2 * i + (i % 2)] = i < 3 ? 1.0f : -1.0f;
    q.enqueue(big);
    EXPECT_EQ(q.size(), 4u);
    EXPECT_EQ(q.entry(0), std::vector<float>(big.storage().begin() + 4, big.storage().begin() + 6));
    EXPECT_EQ(q.entry(3), std::vector<float>(big.storage().begin() + 10, big.storage().end()));
    EXPECT_THROW(MemoryQueue(0, 2), ConfigError);
    EXPECT_THROW(q.enqueue(Tensor({1, 3})), DimensionError);
    // projections must already be on the unit sphere
    EXPECT_THROW(q.enqueue(Tensor({1, 2}, {3, 4})), ConfigError);
}

TEST(Queue, SourceTagsSurviveEvictionAndFilterSnapshots) {
    MemoryQueue q(4, 2);
    auto rows = [](std::initializer_list<float> angles) {
        Tensor t({angles.size(), 2});
        std::size_t r = 0;
        for (float a : angles) {
            t.at(r, 0) = std::cos(a);
            t.at(r, 1) = std::sin(a);
            ++r;
        }
        return t;
    };
    const std::vector<std::int64_t> first{7, 8, 9};
    q.enqueue(rows({0.1f, 0.2f, 0.3f}), first);
    q.enqueue(rows({0.4f, 0.5f}));  // untagged
    // oldest (7) evicted; survivors 8, 9, -1, -1
    ASSERT_EQ(q.size(), 4u);
    EXPECT_EQ(q.source(0), 8);
    EXPECT_EQ(q.source(1), 9);
    EXPECT_EQ(q.source(3), -1);

    const std::vector<std::int64_t> drop{9, 7};
    const Tensor kept = q.snapshot_excluding(drop);
    ASSERT_EQ(kept.dim(0), 3u);
    EXPECT_EQ(kept.at(0, 0), q.entry(0)[0]);
    EXPECT_EQ(kept.at(1, 0), q.entry(2)[0]);  // order preserved
    EXPECT_EQ(kept.at(2, 0), q.entry(3)[0]);
    EXPECT_EQ(q.snapshot_excluding({}).dim(0), 4u);
    const std::vector<std::int64_t> wrong{1};
    EXPECT_THROW(q.enqueue(rows({0.6f, 0.7f}), wrong), DimensionError);
}

TEST(Mining, MatchesBruteForceSort) {
    for (std::uint64_t trial = 0; trial < 30; ++trial) {
        const Tensor cand = random_unit_vectors(40, 16, 100 + trial);
        const Tensor anc = random_unit_vectors(1, 16, 200 + trial);
        const std::span<const float> a = anc.data();
        std::vector<std::size_t> idx(40);
        std::iota(idx.begin(), idx.end(), 0);
        auto dot = [&](std::size_t r) {
            double s = 0.0;
            for (std::size_t j = 0; j < 16; ++j) s += double(a[j]) * cand.at(r, j);
            return s;
        };
        std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) { return dot(x) > dot(y); });
        idx.resize(10);
        EXPECT_EQ(mine_hard_negatives(a, cand, 10), idx);
    }
}

TEST(Mining, TiesAndSmallPools) {
    Tensor cand({3, 2}, {0, 1, 1, 0, 1, 0});
    const std::vector<float> a{1, 0};
    EXPECT_EQ(mine_hard_negatives(a, cand, 2), (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(mine_hard_negatives(a, cand, 10).size(), 3u);
    EXPECT_THROW(mine_hard_negatives(a, cand, 0), ConfigError);
    EXPECT_THROW(mine_hard_negatives(a, cand, -1), ConfigError);
    EXPECT_TRUE(mine_hard_negatives(a, Tensor(), 3).empty());
}

TEST(InfoNce, WorkedExamples) {
    const std::vector<float> a{1, 0}, p{1, 0}, n{0, 1};
    // s+ = 1, s- = 0, tau = 1: -log(e / (e + 1))
    EXPECT_NEAR(info_nce(a, p, Tensor({1, 2}, {0, 1}), 1.0), std::log1p(std::exp(-1.0)), 1e-12);
    // no negatives -> zero loss
    EXPECT_NEAR(info_nce(a, p, Tensor(), 0.07), 0.0, 1e-12);
    // huge margin at small tau stays finite
    EXPECT_TRUE(std::isfinite(info_nce(a, n, Tensor({1, 2}, {-1, 0}), 0.01)));
    EXPECT_THROW(info_nce(a, p, Tensor({1, 2}, {0, 1}), 0.0), ConfigError);
    EXPECT_THROW(info_nce(std::vector<float>{2, 0}, p, Tensor({1, 2}, {0, 1}), 1.0), Error);
}

TEST(InfoNce, TapeMatchesScalarOracleWithMining) {
    const std::size_t B = 4, K = 3, m = 8;
    const Tensor z = random_unit_vectors(2 * B, m, 300);
    const Tensor queue = random_unit_vectors(6, m, 301);
    const double tau = 0.1;
    Tape<double> tape;
    const NodeId zn = tape.parameter("z", z.cast<double>());
    const NodeId loss = tape.info_nce(zn, B, queue.cast<double>(), K, tau);
    tape.evaluate();

    double total = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        std::vector<std::vector<float>> pool;
        for (std::size_t r = 0; r < 2 * B; ++r)
            if (r != i && r != i + B) pool.emplace_back(&z.at(r, 0), &z.at(r, 0) + m);
        for (std::size_t r = 0; r < queue.dim(0); ++r) pool.emplace_back(&queue.at(r, 0), &queue.at(r, 0) + m);
        Tensor cand({pool.size(), m});
        for (std::size_t r = 0; r < pool.size(); ++r) std::copy(pool[r].begin(), pool[r].end(), &cand.at(r, 0));
        std::span<const float> a(&z.at(i, 0), m), p(&z.at(i + B, 0), m);
        std::vector<std::vector<float>> hard;
        for (auto r : mine_hard_negatives(a, cand, K)) hard.push_back(pool[r]);
        Tensor neg({K, m});
        for (std::size_t r = 0; r < K; ++r) std::copy(hard[r].begin(), hard[r].end(), &neg.at(r, 0));
        const double o = oracle_nce(a, p, hard, tau);
        EXPECT_NEAR(info_nce(a, p, neg, tau), o, 1e-9);
        total += o;
    }
    EXPECT_NEAR(tape.value(loss)[0], total / B, 1e-9);
}

TEST(AdamW, FirstStepsMatchHandComputation) {
    ParamMap p{{"w", Tensor({2}, {1.0f, -2.0f})}};
    AdamW opt(0.9, 0.999, 1e-8, 0.01);
    const double lr = 0.1;
    opt.step(p, {{"w", Tensor({2}, {0.5f, -0.25f})}}, [&](const std::string&) { return lr; });
    // step 1: m^ = g, v^ = g^2 -> update = lr * sign(g) (up to eps)
    EXPECT_NEAR(p["w"][0], 1.0 - lr * 0.01 * 1.0 - lr * 0.5 / (0.5 + 1e-8), 1e-6);
    EXPECT_NEAR(p["w"][1], -2.0 - lr * 0.01 * -2.0 + lr * 0.25 / (0.25 + 1e-8), 1e-6);
    const double w0 = p["w"][0];
    opt.step(p, {{"w", Tensor({2}, {0.5f, -0.25f})}}, [&](const std::string&) { return lr; });
    // constant gradient keeps m^/sqrt(v^) at sign(g)
    EXPECT_NEAR(p["w"][0], w0 - lr * 0.01 * w0 - lr, 1e-5);
    EXPECT_EQ(opt.steps(), 2u);
}

TEST(AdamW, PerNameRatesAndZeroRateFreezes) {
    ParamMap p{{"enc", Tensor({1}, {1.0f})}, {"head", Tensor({1}, {1.0f})}};
    AdamW opt(0.9, 0.999, 1e-8, 0.0);
    opt.step(p, {{"enc", Tensor({1}, {1.0f})}, {"head", Tensor({1}, {1.0f})}},
             [](const std::string& n) { return n == "enc" ? 0.0 : 0.5; });
    EXPECT_EQ(p["enc"][0], 1.0f);
    EXPECT_NEAR(p["head"][0], 0.5, 1e-6);
}

TEST(Trainer, ConfigValidation) {
    TrainerConfig t;
    EXPECT_NO_THROW(t.validate());
    t.temperature = 0.0;
    EXPECT_THROW(t.validate(), ConfigError);
    t = {};
    t.hard_negatives = 0;
    EXPECT_THROW(t.validate(), ConfigError);
    t = {};
    t.batch = 1;
    EXPECT_THROW(t.validate(), ConfigError);
    t = {};
    EXPECT_EQ(t.batch, 8u);
    EXPECT_EQ(t.epochs, 50u);
    EXPECT_DOUBLE_EQ(t.temperature, 0.07);
    EXPECT_EQ(t.hard_negatives, 10u);
    EXPECT_EQ(t.queue_capacity, 1024u);
}

TEST(Trainer, StepUpdatesParametersAndFillsQueue) {
    const EncoderConfig ec = tiny();
    const TrainerConfig tc = tiny_trainer();
    ContrastiveTrainer tr(ec, tc, init_encoder_params(ec, 1), init_head_params(ec.fused_channels, tc.head, 2));
    std::vector<Clip> v1, v2;
    for (std::uint64_t i = 0; i < 4; ++i) {
        const Clip c = random_clip(10 + i);
        v1.push_back(augment(c, tc.augmentation, 2 * i));
        v2.push_back(augment(c, tc.augmentation, 2 * i + 1));
    }
    std::vector<const Clip*> p1, p2;
    for (std::size_t i = 0; i < 4; ++i) p1.push_back(&v1[i]), p2.push_back(&v2[i]);
    const ParamMap before = tr.head_params();
    const double loss = tr.step(p1, p2);
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_GT(loss, 0.0);
    EXPECT_EQ(tr.steps(), 1u);
    EXPECT_EQ(tr.queue().size(), 4u);
    EXPECT_NE(tr.head_params(), before);
    for (std::size_t i = 0; i < 4; ++i) {
        double n = 0.0;
        for (float x : tr.queue().entry(i)) n += double(x) * x;
        EXPECT_NEAR(n, 1.0, 1e-4);
    }
}

TEST(Trainer, SmallStepLowersTheSameBatchLoss) {
    const EncoderConfig ec = tiny();
    TrainerConfig tc = tiny_trainer();
    tc.lr_encoder = tc.lr_head = 1e-4;
    tc.weight_decay = 0.0;
    ContrastiveTrainer tr(ec, tc, init_encoder_params(ec, 5), init_head_params(ec.fused_channels, tc.head, 6));
    std::vector<Clip> v1, v2;
    for (std::uint64_t i = 0; i < 4; ++i) {
        const Clip c = random_clip(60 + i);
        v1.push_back(augment(c, tc.augmentation, 2 * i));
        v2.push_back(augment(c, tc.augmentation, 2 * i + 1));
    }
    std::vector<const Clip*> p1, p2;
    for (std::size_t i = 0; i < 4; ++i) p1.push_back(&v1[i]), p2.push_back(&v2[i]);
    const double before = tr.evaluate_loss(p1, p2, Tensor(), BatchNormMode::Train);
    EXPECT_DOUBLE_EQ(tr.step(p1, p2), before);
    EXPECT_LT(tr.evaluate_loss(p1, p2, Tensor(), BatchNormMode::Train), before);
}

TEST(Trainer, ShortRunIsDeterministic) {
    std::vector<Clip> corpus;
    for (std::uint64_t i = 0; i < 10; ++i) corpus.push_back(random_clip(40 + i));
    const EncoderConfig ec = tiny();
    TrainerConfig tc = tiny_trainer();
    tc.validation_fraction = 0.2;
    const TrainResult a = train(corpus, ec, tc), b = train(corpus, ec, tc);
    EXPECT_EQ(a.history, b.history);
    EXPECT_EQ(a.validation_losses, b.validation_losses);
    EXPECT_EQ(a.best.encoder_params, b.best.encoder_params);
    EXPECT_EQ(a.train_indices.size() + a.validation_indices.size(), 10u);
    EXPECT_EQ(a.history.size(), 2u);  // 8 training clips / batch 4
    const std::string csv = history_csv(a.history);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,step,loss,queue_size");
    tc.batch = 16;
    EXPECT_THROW(train(corpus, ec, tc), ConfigError);
}
