#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "rrl/mgla.hpp"
#include "rrl/model.hpp"

using namespace rrl;

namespace {

ModelConfig tiny_cfg(uint64_t seed = 5) {
    ModelConfig cfg;
    cfg.input_size = 16;
    cfg.stage_channels = {4, 6, 8, 10, 12};
    cfg.init_seed = seed;
    cfg.batch_size = 4;
    return cfg;
}

ValueT<float> rand_patch(Rng& rng, int b, int s) {
    std::vector<float> d(static_cast<size_t>(b) * s * s);
    for (auto& v : d) v = static_cast<float>(rng.uniform(0, 1));
    return constant<float>({b, 1, s, s}, std::move(d));
}

}  // namespace

TEST_CASE("encoder stage shapes for the default config") {
    ModelConfig cfg;  // defaults: channels 16..128, input 64
    auto m = build_model<float>(cfg);
    Rng rng(1);
    auto feats = encode(m, rand_patch(rng, 1, 64), false);
    CHECK(feats.maps[0]->shape == Shape{1, 16, 64, 64});
    CHECK(feats.maps[1]->shape == Shape{1, 32, 32, 32});
    CHECK(feats.maps[2]->shape == Shape{1, 64, 16, 16});
    CHECK(feats.maps[3]->shape == Shape{1, 96, 8, 8});
    CHECK(feats.maps[4]->shape == Shape{1, 128, 4, 4});

    // eval-mode determinism on a repeated input
    auto again = encode(m, feats.maps[0]->parents.empty() ? rand_patch(rng, 1, 64) : rand_patch(rng, 1, 64), false);
    (void)again;
    Rng rng2(99);
    auto x = rand_patch(rng2, 2, 64);
    auto f1 = encode(m, x, false);
    auto f2 = encode(m, x, false);
    for (int i = 0; i < 5; ++i) CHECK(f1.maps[i]->data == f2.maps[i]->data);

    // smoke: finite with a live fraction after relu
    int64_t nonzero = 0;
    for (float v : f1.maps[4]->data) nonzero += v != 0.f;
    CHECK(nonzero > 0);

    CHECK_THROWS_AS(encode(m, constant<float>({1, 1, 32, 32}, std::vector<float>(1024, 0.f)), false), ConfigError);
}

TEST_CASE("stage shape contract holds for other inputs divisible by 16") {
    auto cfg = tiny_cfg();
    cfg.input_size = 32;
    auto m = build_model<float>(cfg);
    Rng rng(2);
    auto feats = encode(m, rand_patch(rng, 1, 32), false);
    for (int i = 0; i < 5; ++i) {
        const int side = 32 >> i;
        CHECK(feats.maps[i]->shape == Shape{1, cfg.stage_channels[static_cast<size_t>(i)], side, side});
    }
}

TEST_CASE("decoder reconstructs the input shape with values in (0,1)") {
    ModelConfig cfg;
    auto m = build_model<float>(cfg);
    Rng rng(3);
    auto feats = encode(m, rand_patch(rng, 2, 64), false);
    auto rec = decode(m, feats.maps[4], false);
    CHECK(rec->shape == Shape{2, 1, 64, 64});
    for (float v : rec->data) {
        CHECK(v > 0.f);
        CHECK(v < 1.f);
    }
    CHECK_THROWS_AS(decode(m, feats.maps[3], false), ConfigError);
}

TEST_CASE("fil swap symmetry is bit-exact in train and eval mode") {
    auto m = build_model<float>(tiny_cfg(11));
    Rng rng(4);
    for (int stage = 0; stage < 5; ++stage) {
        const int c = m.cfg.stage_channels[static_cast<size_t>(stage)];
        for (int rep = 0; rep < 4; ++rep) {
            std::vector<float> da(static_cast<size_t>(2) * c * 4 * 4), db(da.size());
            for (auto& v : da) v = static_cast<float>(rng.uniform(-1, 1));
            for (auto& v : db) v = static_cast<float>(rng.uniform(-1, 1));
            auto fa = constant<float>({2, c, 4, 4}, da);
            auto fb = constant<float>({2, c, 4, 4}, db);
            for (bool train : {true, false}) {
                auto ab = fil_forward(m, stage, fa, fb, train);
                auto ba = fil_forward(m, stage, fb, fa, train);
                CHECK(ab.common->data == ba.common->data);          // bit-identical
                CHECK(ab.private_a->data == ba.private_b->data);
                CHECK(ab.private_b->data == ba.private_a->data);
            }
        }
    }
}

TEST_CASE("fil zero weights and zero inputs give zero outputs") {
    auto m = build_model<float>(tiny_cfg(12));
    auto& f = m.fil[0];
    std::fill(f.common.w->data.begin(), f.common.w->data.end(), 0.f);
    std::fill(f.priv.w->data.begin(), f.priv.w->data.end(), 0.f);
    std::fill(f.common.bn.beta->data.begin(), f.common.bn.beta->data.end(), 0.f);
    std::fill(f.priv.bn.beta->data.begin(), f.priv.bn.beta->data.end(), 0.f);
    const int c = m.cfg.stage_channels[0];
    auto z = zeros<float>({1, c, 4, 4});
    auto out = fil_forward(m, 0, z, z, false);
    for (float v : out.common->data) CHECK(v == 0.f);
    for (float v : out.private_a->data) CHECK(v == 0.f);
    CHECK(out.common->shape == Shape{1, c, 4, 4});

    auto bad = zeros<float>({1, c, 8, 8});
    CHECK_THROWS_AS(fil_forward(m, 0, z, bad, false), ConfigError);
}

TEST_CASE("aggregate_step shapes and zero case") {
    auto m = build_model<float>(tiny_cfg(13));
    const auto& ch = m.cfg.stage_channels;
    Rng rng(6);
    auto pa1 = rand_patch(rng, 1, 16);  // reuse as generic values
    // stage 1 on real stage shapes
    auto p1a = oracles::rand_value(rng, {1, ch[0], 16, 16});
    std::vector<float> v1(p1a->data.begin(), p1a->data.end());
    auto f1a = constant<float>({1, ch[0], 16, 16}, v1);
    auto f1b = constant<float>({1, ch[0], 16, 16}, v1);
    auto a1 = aggregate_step(m, 0, ValueT<float>{}, f1a, f1b, false);
    CHECK(a1->shape == Shape{1, ch[0], 16, 16});
    auto f2 = constant<float>({1, ch[1], 8, 8}, std::vector<float>(static_cast<size_t>(ch[1]) * 64, 0.25f));
    auto a2 = aggregate_step(m, 1, a1, f2, f2, false);
    CHECK(a2->shape == Shape{1, ch[1], 8, 8});

    // zero weights and beta give the zero map
    std::fill(m.agg[0].w->data.begin(), m.agg[0].w->data.end(), 0.f);
    auto az = aggregate_step(m, 0, ValueT<float>{}, f1a, f1b, false);
    for (float v : az->data) CHECK(v == 0.f);

    CHECK_THROWS_AS(aggregate_step(m, 1, ValueT<float>{}, f2, f2, false), ConfigError);
    CHECK_THROWS_AS(aggregate_step(m, 0, a1, f1a, f1b, false), ConfigError);
}

TEST_CASE("metric head: zero init gives 0.5, outputs stay in (0,1), golden value") {
    auto m = build_model<float>(tiny_cfg(14));
    HeadT<float> zero_head;
    zero_head.w1 = zeros<float>({512, 12});
    zero_head.b1 = zeros<float>({512});
    zero_head.w2 = zeros<float>({256, 512});
    zero_head.b2 = zeros<float>({256});
    zero_head.w3 = zeros<float>({1, 256});
    zero_head.b3 = zeros<float>({1});
    Rng rng(7);
    auto fmap = constant<float>({3, 12, 2, 2}, [&] {
        std::vector<float> d(3 * 12 * 4);
        for (auto& v : d) v = static_cast<float>(rng.uniform(-3, 3));
        return d;
    }());
    auto s = metric_forward(zero_head, fmap);
    REQUIRE(s->shape == Shape{3});
    for (float v : s->data) CHECK(v == 0.5f);

    auto s2 = metric_forward(m.master_head(), fmap);
    for (float v : s2->data) {
        CHECK(v > 0.f);
        CHECK(v < 1.f);
    }

    // frozen regression point: seeded head + seeded input
    auto mg = build_model<float>(tiny_cfg(424242));
    Rng rg(777);
    std::vector<float> d(2 * 12 * 3 * 3);
    for (auto& v : d) v = static_cast<float>(rg.uniform(-1, 1));
    auto golden = metric_forward(mg.master_head(), constant<float>({2, 12, 3, 3}, d));
    CHECK(golden->data[0] == doctest::Approx(0.443822861f).epsilon(1e-6));
    CHECK(golden->data[1] == doctest::Approx(0.381972849f).epsilon(1e-6));

    CHECK_THROWS_AS(metric_forward(mg.master_head(), constant<float>({1, 5, 2, 2}, std::vector<float>(20, 0.f))),
                    ConfigError);
}

TEST_CASE("forward_full wiring") {
    auto m = build_model<float>(tiny_cfg(15));
    Rng rng(8);
    auto a = rand_patch(rng, 3, 16);
    auto b = rand_patch(rng, 3, 16);
    auto out = forward_full(m, a, b, true);

    // master is the stage-5 head output
    CHECK(out.master == out.stage_scores[4]);
    // heads exist exactly at module/stage 3..5 for a=b=3; 1-2 never constructed
    for (int i = 0; i < 2; ++i) {
        CHECK(!out.module_scores[static_cast<size_t>(i)]);
        CHECK(!out.stage_scores[static_cast<size_t>(i)]);
        CHECK(!m.module_heads[static_cast<size_t>(i)].present());
        CHECK(!m.stage_heads[static_cast<size_t>(i)].present());
    }
    for (int i = 2; i < 5; ++i) {
        REQUIRE(out.module_scores[static_cast<size_t>(i)]);
        REQUIRE(out.stage_scores[static_cast<size_t>(i)]);
        for (float v : out.module_scores[static_cast<size_t>(i)]->data) {
            CHECK(v > 0.f);
            CHECK(v < 1.f);
        }
    }
    REQUIRE(out.recon_a);
    CHECK(out.recon_a->shape == Shape{3, 1, 16, 16});

    // identical pair: the two private streams coincide
    auto same = forward_full(m, a, a, true);
    for (int i = 0; i < 5; ++i)
        CHECK(same.fil_outs[static_cast<size_t>(i)].private_a->data ==
              same.fil_outs[static_cast<size_t>(i)].private_b->data);

    // deterministic repeat in eval mode
    auto s1 = score_batch(m, a, b);
    auto s2 = score_batch(m, a, b);
    CHECK(s1->data == s2->data);

    // pruned topology rejects the training forward but scores fine
    auto pruned_cfg = tiny_cfg(15);
    pruned_cfg.topology = "pruned";
    auto mp = build_model<float>(pruned_cfg);
    CHECK_THROWS_WITH_AS(forward_full(mp, a, b, false), "forward_full: training topology required", ConfigError);
    auto sp = score_batch(mp, a, b);
    CHECK(sp->shape == Shape{3});
}

TEST_CASE("ablation flags change the constructed graph") {
    auto cfg = tiny_cfg(16);
    cfg.enable_fil = false;
    auto m = build_model<float>(cfg);
    CHECK(!m.has_fil());
    Rng rng(9);
    auto a = rand_patch(rng, 2, 16);
    auto b = rand_patch(rng, 2, 16);
    auto out = forward_full(m, a, b, true);
    for (int i = 0; i < 5; ++i) CHECK(!out.module_scores[static_cast<size_t>(i)]);  // no common features, no module heads
    CHECK(out.master);

    auto cfg2 = tiny_cfg(16);
    cfg2.enable_mlpp = false;
    auto m2 = build_model<float>(cfg2);
    CHECK(!m2.has_decoder());
    CHECK(!m2.perceptual.present());
    auto out2 = forward_full(m2, a, b, true);
    CHECK(!out2.recon_a);
    CHECK(!out2.stage_scores[2]);  // sub-heads absent
    CHECK(out2.master);

    auto cfg3 = tiny_cfg(16);
    cfg3.enable_mgla = false;
    auto m3 = build_model<float>(cfg3);
    auto out3 = forward_full(m3, a, b, true);
    CHECK(out3.master->shape == Shape{2});
    CHECK(m3.store.count(true, "encoder.stage1.mgla") == 0);

    auto cfg4 = tiny_cfg(16);
    cfg4.enable_cross_layer = true;
    auto m4 = build_model<float>(cfg4);
    CHECK(m4.store.count(true, "encoder.stage1.skip") > 0);
    auto out4 = forward_full(m4, a, b, true);
    CHECK(out4.master->shape == Shape{2});
}

TEST_CASE("parameter counts match an independent tally for the default config") {
    ModelConfig cfg;
    auto m = build_model<float>(cfg);

    // encoder: convs 144+4608+18432+55296+110592, bn 672, attention kernels 52
    const int64_t conv = 16 * 1 * 9 + 32 * 16 * 9 + 64 * 32 * 9 + 96 * 64 * 9 + 128 * 96 * 9;
    CHECK(conv == 189072);
    int64_t mgla_total = 0;
    const int sides[5] = {64, 32, 16, 8, 4};
    const int chans[5] = {16, 32, 64, 96, 128};
    for (int i = 0; i < 5; ++i) mgla_total += mgla_param_count(chans[i], sides[i], sides[i], false);
    CHECK(mgla_total == 52);
    const int64_t bn = 2 * (16 + 32 + 64 + 96 + 128);
    CHECK(m.store.count(true, "encoder.") == conv + bn + mgla_total);
    CHECK(m.store.count(true, "encoder.") == 189796);

    // attention contribution alone
    CHECK(m.store.count(true, "encoder.stage1.mgla") +
              m.store.count(true, "encoder.stage2.mgla") +
              m.store.count(true, "encoder.stage3.mgla") +
              m.store.count(true, "encoder.stage4.mgla") +
              m.store.count(true, "encoder.stage5.mgla") ==
          mgla_total);

    // decoder: mirrored convs + final conv with bias + bn
    const int64_t dec = 96 * 128 * 9 + 64 * 96 * 9 + 32 * 64 * 9 + 16 * 32 * 9 + (1 * 16 * 9 + 1) +
                        2 * (96 + 64 + 32 + 16);
    CHECK(m.store.count(true, "decoder.") == dec);
    CHECK(dec == 189489);

    // doubling every stage width more than doubles the count (quadratic conv terms)
    ModelConfig wide;
    wide.stage_channels = {32, 64, 128, 192, 256};
    auto mw = build_model<float>(wide);
    CHECK(mw.store.count(true) > 2 * m.store.count(true));
}
