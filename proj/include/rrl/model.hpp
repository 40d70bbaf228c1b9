#pragma once
// The full network: five-stage encoder (conv-bn-relu-attention per stage),
// reconstruction decoder, per-stage feature-interaction blocks splitting each
// pair into common and private maps, sequential aggregation of the private
// streams, and the metric heads. Construction order of parameters is the
// canonical order for initialization and checkpoints.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "rrl/config.hpp"
#include "rrl/mgla.hpp"
#include "rrl/tensor.hpp"

namespace rrl {

template <class S>
struct ParamStoreT {
    struct Param {
        std::string name;
        ValueT<S> value;
        bool trainable;
    };
    std::vector<Param> params;

    ValueT<S> add(const std::string& name, Shape shape, std::vector<S> data, bool trainable) {
        for (const auto& p : params)
            if (p.name == name) throw ConfigError("duplicate parameter name " + name);
        auto v = make_leaf<S>(std::move(shape), std::move(data), trainable);
        params.push_back({name, v, trainable});
        return v;
    }

    int64_t count(bool trainable_only = true, const std::string& prefix = "") const {
        int64_t n = 0;
        for (const auto& p : params) {
            if (trainable_only && !p.trainable) continue;
            if (!prefix.empty() && p.name.rfind(prefix, 0) != 0) continue;
            n += p.value->size();
        }
        return n;
    }

    void zero_grad() {
        for (auto& p : params)
            if (p.trainable) p.value->zero_grad();
    }
};

template <class S>
struct BnLayerT {
    ValueT<S> gamma, beta;
    BnStats<S> stats;
};

template <class S>
struct ConvBnT {
    ValueT<S> w;
    BnLayerT<S> bn;
};

template <class S>
struct EncoderStageT {
    ConvBnT<S> conv;
    MglaParamsT<S> mgla;  // null values when attention disabled
    ValueT<S> skip_w;     // 1x1 projection, only with cross-layer connections
};

template <class S>
struct HeadT {
    ValueT<S> w1, b1, w2, b2, w3, b3;
    bool present() const { return static_cast<bool>(w1); }
};

template <class S>
struct PerceptualT {
    ValueT<S> w1, b1, w2, b2, w3, b3;  // frozen; drawn from perceptual_seed
    bool present() const { return static_cast<bool>(w1); }
};

template <class S>
struct ModelT {
    ModelConfig cfg;
    ParamStoreT<S> store;

    std::array<EncoderStageT<S>, 5> enc;
    std::vector<ConvBnT<S>> dec_blocks;  // 4 upsample blocks when decoder present
    ValueT<S> dec_final_w, dec_final_b;

    struct FilStage {
        ConvBnT<S> common;
        ConvBnT<S> priv;  // single shared transform for both private outputs
    };
    std::vector<FilStage> fil;  // 5 entries when interaction enabled, else empty

    std::array<ConvBnT<S>, 5> agg;
    std::array<HeadT<S>, 5> module_heads;  // index = stage-1; present for stages a..5
    std::array<HeadT<S>, 5> stage_heads;   // present for stages b..5 (stage 5 = master)
    PerceptualT<S> perceptual;

    bool has_decoder() const { return !dec_blocks.empty(); }
    bool has_fil() const { return !fil.empty(); }
    const HeadT<S>& master_head() const { return stage_heads[4]; }

    // Canonical-order walk over batch-norm layers; the running-statistic
    // buffers are serialized through this (they live in the layer structs, so
    // no pointers are stored that a move could invalidate).
    template <class F>
    void for_each_bn(F&& fn) {
        for (int i = 0; i < 5; ++i)
            fn("encoder.stage" + std::to_string(i + 1) + ".bn", enc[static_cast<size_t>(i)].conv.bn);
        for (size_t i = 0; i < fil.size(); ++i) {
            fn("fil.stage" + std::to_string(i + 1) + ".common.bn", fil[i].common.bn);
            fn("fil.stage" + std::to_string(i + 1) + ".private.bn", fil[i].priv.bn);
        }
        for (int i = 0; i < 5; ++i)
            fn("agg.stage" + std::to_string(i + 1) + ".bn", agg[static_cast<size_t>(i)].bn);
        for (size_t j = 0; j < dec_blocks.size(); ++j)
            fn("decoder.block" + std::to_string(j + 1) + ".bn", dec_blocks[j].bn);
    }
};

// Builds the model described by cfg (respecting topology and ablation flags)
// and initializes parameters from cfg.init_seed / cfg.perceptual_seed:
// He-normal for conv and fc weights, zeros for biases, identity batch-norm.
template <class S>
ModelT<S> build_model(const ModelConfig& cfg);

template <class S>
struct StageFeaturesT {
    std::array<ValueT<S>, 5> maps;  // post-attention stage outputs
};

// Stage shapes: channels[i] x (input_size/2^i) x (input_size/2^i), 2x2 max
// pool between consecutive stages.
template <class S>
StageFeaturesT<S> encode(ModelT<S>& m, const ValueT<S>& patch, bool train);

// Reconstruction from the stage-5 map; values in (0,1) via final sigmoid.
template <class S>
ValueT<S> decode(ModelT<S>& m, const ValueT<S>& top, bool train);

template <class S>
struct FilOutT {
    ValueT<S> common, private_a, private_b;
};

// common = relu(bn(conv([fa+fb, fa*fb]))); private_x = relu(bn(conv([fx, common])))
// with one shared private transform. Swapping fa/fb leaves common bit-identical
// and swaps the private outputs, in train mode as well (the private branch runs
// as a pair-interleaved batch and batch statistics reduce pair-first).
template <class S>
FilOutT<S> fil_forward(ModelT<S>& m, int stage, const ValueT<S>& fa, const ValueT<S>& fb, bool train);

// stage 0: relu(bn(conv([pa, pb]))); stage i>0: pool prev, relu(bn(conv([pooled, pa, pb]))).
template <class S>
ValueT<S> aggregate_step(ModelT<S>& m, int stage, const ValueT<S>& prev, const ValueT<S>& pa,
                         const ValueT<S>& pb, bool train);

// global average pool -> 512 -> relu -> 256 -> relu -> 1 -> sigmoid; returns [B].
template <class S>
ValueT<S> metric_forward(const HeadT<S>& head, const ValueT<S>& fmap);

template <class S>
struct FullOutT {
    ValueT<S> master;
    std::array<ValueT<S>, 5> module_scores;  // null where no head exists
    std::array<ValueT<S>, 5> stage_scores;
    ValueT<S> recon_a, recon_b;  // null without the reconstruction branch
    StageFeaturesT<S> feats_a, feats_b;
    std::array<FilOutT<S>, 5> fil_outs;
};

// Whole training-topology graph: encode both patches (stacked Siamese pass),
// interaction per stage, aggregation, every head, both reconstructions.
template <class S>
FullOutT<S> forward_full(ModelT<S>& m, const ValueT<S>& batch_a, const ValueT<S>& batch_b, bool train);

// Inference path (works for both topologies): frozen-statistics forward
// through encoder, interaction, aggregation and the master head only.
template <class S>
ValueT<S> score_batch(ModelT<S>& m, const ValueT<S>& batch_a, const ValueT<S>& batch_b);

}  // namespace rrl
