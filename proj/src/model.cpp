#include "rrl/model.hpp"

namespace rrl {

namespace {

template <class S>
std::vector<S> he_normal(Rng& rng, int64_t fan_in, int64_t n) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<S> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<S>(rng.normal() * std_dev);
    return v;
}

template <class S>
ValueT<S> add_conv(ParamStoreT<S>& store, Rng& rng, const std::string& name, int co, int ci, int k,
                   bool trainable = true) {
    const int64_t n = static_cast<int64_t>(co) * ci * k * k;
    return store.add(name, {co, ci, k, k}, he_normal<S>(rng, static_cast<int64_t>(ci) * k * k, n), trainable);
}

template <class S>
BnLayerT<S> add_bn(ParamStoreT<S>& store, const std::string& prefix, int channels) {
    BnLayerT<S> bn;
    bn.gamma = store.add(prefix + ".gamma", {channels}, std::vector<S>(static_cast<size_t>(channels), S(1)), true);
    bn.beta = store.add(prefix + ".beta", {channels}, std::vector<S>(static_cast<size_t>(channels), S(0)), true);
    bn.stats = BnStats<S>(channels);
    return bn;
}

template <class S>
HeadT<S> add_head(ParamStoreT<S>& store, Rng& rng, const std::string& prefix, int in_width) {
    HeadT<S> h;
    h.w1 = store.add(prefix + ".fc1.weight", {512, in_width}, he_normal<S>(rng, in_width, 512LL * in_width), true);
    h.b1 = store.add(prefix + ".fc1.bias", {512}, std::vector<S>(512, S(0)), true);
    h.w2 = store.add(prefix + ".fc2.weight", {256, 512}, he_normal<S>(rng, 512, 256LL * 512), true);
    h.b2 = store.add(prefix + ".fc2.bias", {256}, std::vector<S>(256, S(0)), true);
    h.w3 = store.add(prefix + ".fc3.weight", {1, 256}, he_normal<S>(rng, 256, 256), true);
    h.b3 = store.add(prefix + ".fc3.bias", {1}, std::vector<S>(1, S(0)), true);
    return h;
}

}  // namespace

template <class S>
ModelT<S> build_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelT<S> m;
    m.cfg = cfg;
    Rng rng(cfg.init_seed);
    const auto& ch = cfg.stage_channels;
    const bool training = !cfg.pruned();
    const bool aux = training && cfg.enable_mlpp;

    // encoder
    for (int i = 0; i < 5; ++i) {
        const std::string p = "encoder.stage" + std::to_string(i + 1);
        const int cin = i == 0 ? cfg.in_channels : ch[static_cast<size_t>(i - 1)];
        const int cout = ch[static_cast<size_t>(i)];
        m.enc[static_cast<size_t>(i)].conv.w = add_conv(m.store, rng, p + ".conv.weight", cout, cin, 3);
        m.enc[static_cast<size_t>(i)].conv.bn = add_bn(m.store, p + ".bn", cout);
        if (cfg.enable_mgla) {
            const int side = cfg.input_size >> i;
            const int kc = kernel_size(cout, cfg.round());
            const int ks = kernel_size(side, cfg.round());
            auto& g = m.enc[static_cast<size_t>(i)].mgla;
            g.w_h = m.store.add(p + ".mgla.w_h", {ks}, he_normal<S>(rng, ks, ks), true);
            g.w_w = m.store.add(p + ".mgla.w_w", {ks}, he_normal<S>(rng, ks, ks), true);
            g.w_c = m.store.add(p + ".mgla.w_c", {kc}, he_normal<S>(rng, kc, kc), true);
            if (cfg.attention_bias) {
                g.b_h = m.store.add(p + ".mgla.b_h", {1}, std::vector<S>(1, S(0)), true);
                g.b_w = m.store.add(p + ".mgla.b_w", {1}, std::vector<S>(1, S(0)), true);
                g.b_c = m.store.add(p + ".mgla.b_c", {1}, std::vector<S>(1, S(0)), true);
            }
        }
        if (cfg.enable_cross_layer) {
            m.enc[static_cast<size_t>(i)].skip_w = add_conv(m.store, rng, p + ".skip.weight", cout, cin, 1);
        }
    }

    // feature interaction, one block per stage with independent parameters
    if (cfg.enable_fil) {
        m.fil.resize(5);
        for (int i = 0; i < 5; ++i) {
            const std::string p = "fil.stage" + std::to_string(i + 1);
            const int c = ch[static_cast<size_t>(i)];
            m.fil[static_cast<size_t>(i)].common.w = add_conv(m.store, rng, p + ".common.conv.weight", c, 2 * c, 3);
            m.fil[static_cast<size_t>(i)].common.bn = add_bn(m.store, p + ".common.bn", c);
            m.fil[static_cast<size_t>(i)].priv.w = add_conv(m.store, rng, p + ".private.conv.weight", c, 2 * c, 3);
            m.fil[static_cast<size_t>(i)].priv.bn = add_bn(m.store, p + ".private.bn", c);
        }
    }

    // aggregation
    for (int i = 0; i < 5; ++i) {
        const std::string p = "agg.stage" + std::to_string(i + 1);
        const int c = ch[static_cast<size_t>(i)];
        const int cin = i == 0 ? 2 * c : ch[static_cast<size_t>(i - 1)] + 2 * c;
        m.agg[static_cast<size_t>(i)].w = add_conv(m.store, rng, p + ".conv.weight", c, cin, 3);
        m.agg[static_cast<size_t>(i)].bn = add_bn(m.store, p + ".bn", c);
    }

    // heads: module heads a..5 on common features, stage heads b..5 on
    // aggregates; the stage-5 head is the master and the only one kept after
    // pruning. Heads below a/b are never constructed.
    if (aux && cfg.enable_fil) {
        for (int i = cfg.a; i <= 5; ++i) {
            m.module_heads[static_cast<size_t>(i - 1)] =
                add_head(m.store, rng, "head.module" + std::to_string(i), ch[static_cast<size_t>(i - 1)]);
        }
    }
    if (aux) {
        for (int j = cfg.b; j <= 4; ++j) {
            m.stage_heads[static_cast<size_t>(j - 1)] =
                add_head(m.store, rng, "head.stage" + std::to_string(j), ch[static_cast<size_t>(j - 1)]);
        }
    }
    m.stage_heads[4] = add_head(m.store, rng, "head.stage5", ch[4]);

    // decoder, mirror of the encoder channel sequence
    if (aux) {
        m.dec_blocks.resize(4);
        for (int j = 0; j < 4; ++j) {
            const std::string p = "decoder.block" + std::to_string(j + 1);
            const int cin = ch[static_cast<size_t>(4 - j)];
            const int cout = ch[static_cast<size_t>(3 - j)];
            m.dec_blocks[static_cast<size_t>(j)].w = add_conv(m.store, rng, p + ".conv.weight", cout, cin, 3);
            m.dec_blocks[static_cast<size_t>(j)].bn = add_bn(m.store, p + ".bn", cout);
        }
        m.dec_final_w = add_conv(m.store, rng, "decoder.final.weight", cfg.in_channels, ch[0], 3);
        m.dec_final_b = m.store.add("decoder.final.bias", {cfg.in_channels},
                                    std::vector<S>(static_cast<size_t>(cfg.in_channels), S(0)), true);
    }

    // frozen perceptual stack, separate seed, never updated
    if (aux) {
        Rng prng(cfg.perceptual_seed);
        m.perceptual.w1 = add_conv(m.store, prng, "perceptual.conv1.weight", 8, cfg.in_channels, 3, false);
        m.perceptual.b1 = m.store.add("perceptual.conv1.bias", {8}, std::vector<S>(8, S(0)), false);
        m.perceptual.w2 = add_conv(m.store, prng, "perceptual.conv2.weight", 16, 8, 3, false);
        m.perceptual.b2 = m.store.add("perceptual.conv2.bias", {16}, std::vector<S>(16, S(0)), false);
        m.perceptual.w3 = add_conv(m.store, prng, "perceptual.conv3.weight", 16, 16, 3, false);
        m.perceptual.b3 = m.store.add("perceptual.conv3.bias", {16}, std::vector<S>(16, S(0)), false);
    }

    return m;
}

template <class S>
StageFeaturesT<S> encode(ModelT<S>& m, const ValueT<S>& patch, bool train) {
    if (patch->shape.size() != 4 || patch->shape[1] != m.cfg.in_channels ||
        patch->shape[2] != m.cfg.input_size || patch->shape[3] != m.cfg.input_size)
        throw ConfigError("encode: expected [B," + std::to_string(m.cfg.in_channels) + "," +
                          std::to_string(m.cfg.input_size) + "," + std::to_string(m.cfg.input_size) + "], got " +
                          shape_str(patch->shape));
    StageFeaturesT<S> out;
    ValueT<S> x = patch;
    for (int i = 0; i < 5; ++i) {
        ValueT<S> stage_in = i == 0 ? x : max_pool_2x2(x);
        auto& st = m.enc[static_cast<size_t>(i)];
        auto y = relu(batch_norm(conv2d(stage_in, st.conv.w, ValueT<S>{}, 1, 1), st.conv.bn.gamma,
                                 st.conv.bn.beta, st.conv.bn.stats, train));
        if (st.mgla.w_h) y = mgla_forward(y, st.mgla);
        if (st.skip_w) y = add(y, conv2d(stage_in, st.skip_w, ValueT<S>{}, 1, 0));
        out.maps[static_cast<size_t>(i)] = y;
        x = y;
    }
    return out;
}

template <class S>
ValueT<S> decode(ModelT<S>& m, const ValueT<S>& top, bool train) {
    if (!m.has_decoder()) throw ConfigError("decode: model has no decoder");
    const int s5 = m.cfg.input_size >> 4;
    if (top->shape.size() != 4 || top->shape[1] != m.cfg.stage_channels[4] || top->shape[2] != s5 ||
        top->shape[3] != s5)
        throw ConfigError("decode: expected stage-5 shape, got " + shape_str(top->shape));
    ValueT<S> x = top;
    for (auto& blk : m.dec_blocks) {
        x = relu(batch_norm(conv2d(upsample_nearest_2x(x), blk.w, ValueT<S>{}, 1, 1), blk.bn.gamma, blk.bn.beta,
                            blk.bn.stats, train));
    }
    return sigmoid(conv2d(x, m.dec_final_w, m.dec_final_b, 1, 1));
}

template <class S>
FilOutT<S> fil_forward(ModelT<S>& m, int stage, const ValueT<S>& fa, const ValueT<S>& fb, bool train) {
    if (!m.has_fil()) throw ConfigError("fil_forward: feature interaction disabled in this model");
    if (stage < 0 || stage > 4) throw ConfigError("fil_forward: stage out of range");
    if (fa->shape != fb->shape)
        throw ConfigError("fil_forward: shape mismatch " + shape_str(fa->shape) + " vs " + shape_str(fb->shape));
    auto& f = m.fil[static_cast<size_t>(stage)];

    // both interaction terms are symmetric in (a,b)
    auto cin = concat<S>({add(fa, fb), mul(fa, fb)}, 1);
    auto common = relu(batch_norm(conv2d(cin, f.common.w, ValueT<S>{}, 1, 1), f.common.bn.gamma, f.common.bn.beta,
                                  f.common.bn.stats, train));

    // shared private transform over the pair-interleaved batch; adjacent-pair
    // batch statistics make swap symmetry exact in train mode too
    auto stacked = interleave0(concat<S>({fa, common}, 1), concat<S>({fb, common}, 1));
    auto pout = relu(batch_norm(conv2d(stacked, f.priv.w, ValueT<S>{}, 1, 1), f.priv.bn.gamma, f.priv.bn.beta,
                                f.priv.bn.stats, train));
    FilOutT<S> out;
    out.common = common;
    out.private_a = stride0(pout, 0);
    out.private_b = stride0(pout, 1);
    return out;
}

template <class S>
ValueT<S> aggregate_step(ModelT<S>& m, int stage, const ValueT<S>& prev, const ValueT<S>& pa,
                         const ValueT<S>& pb, bool train) {
    if (stage < 0 || stage > 4) throw ConfigError("aggregate_step: stage out of range");
    if (pa->shape != pb->shape)
        throw ConfigError("aggregate_step: shape mismatch " + shape_str(pa->shape) + " vs " + shape_str(pb->shape));
    if ((stage == 0) != !prev) throw ConfigError("aggregate_step: prev required exactly for stages past the first");
    auto& ag = m.agg[static_cast<size_t>(stage)];
    ValueT<S> in;
    if (stage == 0) {
        in = concat<S>({pa, pb}, 1);
    } else {
        in = concat<S>({max_pool_2x2(prev), pa, pb}, 1);
    }
    return relu(batch_norm(conv2d(in, ag.w, ValueT<S>{}, 1, 1), ag.bn.gamma, ag.bn.beta, ag.bn.stats, train));
}

template <class S>
ValueT<S> metric_forward(const HeadT<S>& head, const ValueT<S>& fmap) {
    if (!head.present()) throw ConfigError("metric_forward: head not constructed");
    if (fmap->shape.size() != 4 || fmap->shape[1] != head.w1->shape[1])
        throw ConfigError("metric_forward: feature map " + shape_str(fmap->shape) + " does not match head width " +
                          std::to_string(head.w1->shape[1]));
    auto v = global_avg_pool(fmap, {2, 3});  // [B,C]
    auto h1 = relu(fully_connected(v, head.w1, head.b1));
    auto h2 = relu(fully_connected(h1, head.w2, head.b2));
    auto logit = fully_connected(h2, head.w3, head.b3);  // [B,1]
    return reshape(sigmoid(logit), {fmap->shape[0]});
}

namespace {

// shared trunk of forward_full and score_batch: stacked Siamese encode,
// per-stage interaction, sequential aggregation
template <class S>
struct TrunkOut {
    StageFeaturesT<S> feats_a, feats_b;
    std::array<FilOutT<S>, 5> fil_outs;
    std::array<ValueT<S>, 5> aggs;
    ValueT<S> stacked_feats5;
};

template <class S>
TrunkOut<S> run_trunk(ModelT<S>& m, const ValueT<S>& batch_a, const ValueT<S>& batch_b, bool train) {
    if (batch_a->shape != batch_b->shape)
        throw ConfigError("forward: patch shapes differ: " + shape_str(batch_a->shape) + " vs " +
                          shape_str(batch_b->shape));
    const int b = batch_a->shape[0];
    TrunkOut<S> t;
    auto feats = encode(m, concat<S>({batch_a, batch_b}, 0), train);
    t.stacked_feats5 = feats.maps[4];
    ValueT<S> prev;
    for (int i = 0; i < 5; ++i) {
        auto fa = slice0(feats.maps[static_cast<size_t>(i)], 0, b);
        auto fb = slice0(feats.maps[static_cast<size_t>(i)], b, b);
        t.feats_a.maps[static_cast<size_t>(i)] = fa;
        t.feats_b.maps[static_cast<size_t>(i)] = fb;
        ValueT<S> pa = fa, pb = fb;
        if (m.has_fil()) {
            t.fil_outs[static_cast<size_t>(i)] = fil_forward(m, i, fa, fb, train);
            pa = t.fil_outs[static_cast<size_t>(i)].private_a;
            pb = t.fil_outs[static_cast<size_t>(i)].private_b;
        }
        prev = aggregate_step(m, i, prev, pa, pb, train);
        t.aggs[static_cast<size_t>(i)] = prev;
    }
    return t;
}

}  // namespace

template <class S>
FullOutT<S> forward_full(ModelT<S>& m, const ValueT<S>& batch_a, const ValueT<S>& batch_b, bool train) {
    if (m.cfg.pruned()) throw ConfigError("forward_full: training topology required");
    auto t = run_trunk(m, batch_a, batch_b, train);
    FullOutT<S> out;
    out.feats_a = t.feats_a;
    out.feats_b = t.feats_b;
    out.fil_outs = t.fil_outs;
    for (int i = 0; i < 5; ++i) {
        if (m.module_heads[static_cast<size_t>(i)].present()) {
            out.module_scores[static_cast<size_t>(i)] =
                metric_forward(m.module_heads[static_cast<size_t>(i)], t.fil_outs[static_cast<size_t>(i)].common);
        }
        if (m.stage_heads[static_cast<size_t>(i)].present()) {
            out.stage_scores[static_cast<size_t>(i)] =
                metric_forward(m.stage_heads[static_cast<size_t>(i)], t.aggs[static_cast<size_t>(i)]);
        }
    }
    out.master = out.stage_scores[4];
    if (m.has_decoder()) {
        const int b = batch_a->shape[0];
        auto dec = decode(m, t.stacked_feats5, train);
        out.recon_a = slice0(dec, 0, b);
        out.recon_b = slice0(dec, b, b);
    }
    return out;
}

template <class S>
ValueT<S> score_batch(ModelT<S>& m, const ValueT<S>& batch_a, const ValueT<S>& batch_b) {
    auto t = run_trunk(m, batch_a, batch_b, /*train=*/false);
    return metric_forward(m.master_head(), t.aggs[4]);
}

#define RRL_INSTANTIATE_MODEL(S)                                                                           \
    template ModelT<S> build_model<S>(const ModelConfig&);                                                 \
    template StageFeaturesT<S> encode<S>(ModelT<S>&, const ValueT<S>&, bool);                              \
    template ValueT<S> decode<S>(ModelT<S>&, const ValueT<S>&, bool);                                      \
    template FilOutT<S> fil_forward<S>(ModelT<S>&, int, const ValueT<S>&, const ValueT<S>&, bool);         \
    template ValueT<S> aggregate_step<S>(ModelT<S>&, int, const ValueT<S>&, const ValueT<S>&,              \
                                         const ValueT<S>&, bool);                                          \
    template ValueT<S> metric_forward<S>(const HeadT<S>&, const ValueT<S>&);                               \
    template FullOutT<S> forward_full<S>(ModelT<S>&, const ValueT<S>&, const ValueT<S>&, bool);            \
    template ValueT<S> score_batch<S>(ModelT<S>&, const ValueT<S>&, const ValueT<S>&);

RRL_INSTANTIATE_MODEL(float)
RRL_INSTANTIATE_MODEL(double)

}  // namespace rrl
