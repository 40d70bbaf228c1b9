#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "rrl/mgla.hpp"

using namespace rrl;

TEST_CASE("kernel_size hand values and integer oracle over 1..4096") {
    CHECK(kernel_size(64) == 4);   // log2=6 -> 3.5 -> 4 -> even
    CHECK(kernel_size(2) == 2);    // log2=1 -> 1 -> odd -> 2
    CHECK(kernel_size(100) == 4);  // log2~6.644 -> 3.82 -> 4
    CHECK(kernel_size(16) == 4);   // 2.5 -> 3 -> odd -> 4
    CHECK_THROWS_AS(kernel_size(0), ConfigError);

    for (int len = 1; len <= 4096; ++len) {
        INFO("len=", len);
        CHECK(kernel_size(len, KernelRound::kUp) == oracles::kernel_size(len, true));
        CHECK(kernel_size(len, KernelRound::kDown) == oracles::kernel_size(len, false));
    }
}

TEST_CASE("mgla_param_count") {
    CHECK(mgla_param_count(16, 32, 32, false) == 12);
    CHECK(mgla_param_count(16, 32, 32, true) == 15);  // one bias per branch
    CHECK(mgla_param_count(2, 2, 2, false) == 6);
}

TEST_CASE("attention_pool hand value and convexity") {
    // C=2,H=1,W=2: ch0=[1,3], ch1=[2,2]; pooled complement [1.5,2.5],
    // softmax ~[0.2689,0.7311], contexts ~[2.4622, 2.0]
    auto f = constant<double>({2, 1, 2}, {1, 3, 2, 2});
    auto ctx = attention_pool(f, 1);
    REQUIRE(ctx->shape == Shape{2});
    CHECK(ctx->data[0] == doctest::Approx(2.46211715726).epsilon(1e-9));
    CHECK(ctx->data[1] == doctest::Approx(2.0).epsilon(1e-12));

    // constant input: every context entry equals that constant
    auto fc = full<double>({3, 4, 5}, 0.7);
    for (int axis : {1, 2, 3}) {
        auto c = attention_pool(reshape(fc, {1, 3, 4, 5}), axis);
        for (double v : c->data) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
    }

    // convex combination: outputs within [min,max] of the input
    Rng rng(17);
    for (int rep = 0; rep < 10; ++rep) {
        auto x = oracles::rand_value(rng, {1, 4, 6, 5}, false);
        const double mn = *std::min_element(x->data.begin(), x->data.end());
        const double mx = *std::max_element(x->data.begin(), x->data.end());
        for (int axis : {1, 2, 3}) {
            auto c = attention_pool(x, axis);
            for (double v : c->data) {
                CHECK(v >= mn - 1e-12);
                CHECK(v <= mx + 1e-12);
            }
        }
    }
}

TEST_CASE("local_interaction basics") {
    auto g = constant<double>({4}, {1, 2, 3, 4});
    // delta kernel [1,0] acts as identity
    auto y = local_interaction(g, constant<double>({2}, {1, 0}), ValueT<double>{});
    for (int i = 0; i < 4; ++i) CHECK(y->data[i] == doctest::Approx(g->data[i]));
    // zero weights give the zero vector
    auto z = local_interaction(g, constant<double>({2}, {0, 0}), ValueT<double>{});
    for (double v : z->data) CHECK(v == 0.0);
    // averaging kernel, matches the conv1d oracle
    auto a = local_interaction(g, constant<double>({2}, {0.5, 0.5}), ValueT<double>{});
    const double expect[4] = {1.5, 2.5, 3.5, 2.0};
    for (int i = 0; i < 4; ++i) CHECK(a->data[i] == doctest::Approx(expect[i]));
    // hard length mismatch rejected
    CHECK_THROWS_AS(local_interaction(g, constant<double>({5}, {1, 0, 0, 0, 0}), ValueT<double>{}), ConfigError);
}

TEST_CASE("zero-parameter gate halves the input exactly") {
    Rng rng(23);
    std::vector<float> d(3 * 6 * 4);
    for (auto& v : d) v = static_cast<float>(rng.uniform(-2, 2));
    auto f = constant<float>({3, 6, 4}, d);
    MglaParamsT<float> p;
    p.w_h = zeros<float>({kernel_size(6)});
    p.w_w = zeros<float>({kernel_size(4)});
    p.w_c = zeros<float>({kernel_size(3)});
    auto out = mgla_forward(f, p);
    REQUIRE(out->shape == f->shape);
    for (size_t i = 0; i < d.size(); ++i) CHECK(out->data[i] == 0.5f * d[i]);  // sigmoid(0) bit-exact
}

TEST_CASE("gating keeps sign and strictly shrinks magnitude") {
    Rng rng(29);
    auto f = oracles::rand_value(rng, {1, 4, 8, 8}, false);
    MglaParamsT<double> p;
    p.w_h = oracles::rand_value(rng, {kernel_size(8)}, false);
    p.w_w = oracles::rand_value(rng, {kernel_size(8)}, false);
    p.w_c = oracles::rand_value(rng, {kernel_size(4)}, false);
    auto out = mgla_forward(f, p);
    REQUIRE(out->shape == f->shape);
    for (size_t i = 0; i < f->data.size(); ++i) {
        if (f->data[i] == 0.0) {
            CHECK(out->data[i] == 0.0);
        } else {
            CHECK(out->data[i] * f->data[i] > 0.0);            // same sign
            CHECK(std::abs(out->data[i]) < std::abs(f->data[i]));  // gate in (0,1)
        }
    }
}

TEST_CASE("mgla_forward matches the straight-line scalar oracle on 4x8x8") {
    Rng rng(31);
    const int C = 4, H = 8, W = 8;
    std::vector<double> fd(static_cast<size_t>(C) * H * W);
    for (auto& v : fd) v = rng.uniform(-1, 1);
    std::vector<double> wh(static_cast<size_t>(kernel_size(H))), ww(static_cast<size_t>(kernel_size(W))),
        wc(static_cast<size_t>(kernel_size(C)));
    for (auto& v : wh) v = rng.uniform(-1, 1);
    for (auto& v : ww) v = rng.uniform(-1, 1);
    for (auto& v : wc) v = rng.uniform(-1, 1);

    const auto expect = oracles::mgla(fd, C, H, W, wh, ww, wc);

    // float engine against the double oracle
    std::vector<float> ff(fd.begin(), fd.end());
    MglaParamsT<float> p;
    p.w_h = constant<float>({static_cast<int>(wh.size())}, std::vector<float>(wh.begin(), wh.end()));
    p.w_w = constant<float>({static_cast<int>(ww.size())}, std::vector<float>(ww.begin(), ww.end()));
    p.w_c = constant<float>({static_cast<int>(wc.size())}, std::vector<float>(wc.begin(), wc.end()));
    auto out = mgla_forward(constant<float>({C, H, W}, ff), p);
    REQUIRE(out->shape == Shape{C, H, W});
    for (size_t i = 0; i < expect.size(); ++i)
        CHECK(std::abs(static_cast<double>(out->data[i]) - expect[i]) < 1e-6);

    // double engine should agree to near machine precision
    MglaParamsT<double> pd;
    pd.w_h = constant<double>({static_cast<int>(wh.size())}, wh);
    pd.w_w = constant<double>({static_cast<int>(ww.size())}, ww);
    pd.w_c = constant<double>({static_cast<int>(wc.size())}, wc);
    auto outd = mgla_forward(constant<double>({C, H, W}, fd), pd);
    for (size_t i = 0; i < expect.size(); ++i)
        CHECK(outd->data[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("shape preservation across assorted shapes") {
    Rng rng(37);
    const std::vector<Shape> shapes = {{1, 2, 2}, {3, 5, 7}, {2, 16, 4}, {8, 3, 3}};
    for (const auto& s : shapes) {
        auto f = oracles::rand_value(rng, s, false);
        MglaParamsT<double> p;
        p.w_h = oracles::rand_value(rng, {kernel_size(s[1])}, false);
        p.w_w = oracles::rand_value(rng, {kernel_size(s[2])}, false);
        p.w_c = oracles::rand_value(rng, {kernel_size(s[0])}, false);
        CHECK(mgla_forward(f, p)->shape == s);
    }
}
