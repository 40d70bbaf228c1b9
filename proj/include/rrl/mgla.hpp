#pragma once
// Multi-dimensional global-to-local attention: attention pooling per
// dimension, a short 1-d convolution over each pooled context, and a
// multiplicative sigmoid gate over the broadcast product.

#include "rrl/tensor.hpp"

namespace rrl {

enum class KernelRound { kUp, kDown };

// Kernel size of the per-dimension 1-d convolution as a function of the
// context vector length: k = round((log2(len)+1)/2), bumped to the next even
// value when odd, never below 2.
int kernel_size(int len, KernelRound round = KernelRound::kUp);

// One short 1-d kernel per dimension; bias off by default.
template <class S>
struct MglaParamsT {
    ValueT<S> w_h, w_w, w_c;
    ValueT<S> b_h, b_w, b_c;  // null when bias disabled
};

int64_t mgla_param_count(int c, int h, int w, bool use_bias, KernelRound round = KernelRound::kUp);

// Parameter-free global context along `axis` of [B,C,H,W] (1=C, 2=H, 3=W):
// average over the target axis, softmax over the flattened complement map,
// then a weighted sum of the target-axis fibers. Returns [B,D]. Rank-3 input
// is treated as a single sample and returns [D].
template <class S>
ValueT<S> attention_pool(const ValueT<S>& f, int axis);

template <class S>
ValueT<S> local_interaction(const ValueT<S>& g, const ValueT<S>& w, const ValueT<S>& bias);

// out = f * sigmoid(bcast(gl_h) * bcast(gl_w) * bcast(gl_c)); shape preserved.
// Accepts [B,C,H,W] or a single [C,H,W] sample.
template <class S>
ValueT<S> mgla_forward(const ValueT<S>& f, const MglaParamsT<S>& params);

// -----------------------------------------------------------------------

template <class S>
ValueT<S> attention_pool(const ValueT<S>& f, int axis) {
    if (f->shape.size() == 3) {
        Shape s = f->shape;
        auto pooled = attention_pool(reshape(f, {1, s[0], s[1], s[2]}), axis);
        return reshape(pooled, {pooled->shape[1]});
    }
    return attention_pool_op(f, axis);
}

template <class S>
ValueT<S> local_interaction(const ValueT<S>& g, const ValueT<S>& w, const ValueT<S>& bias) {
    const int len = g->shape.back();
    const int expect = kernel_size(len);
    if (w->shape.size() != 1)
        throw ConfigError("local_interaction: weights must be 1-d");
    // the configured rounding may legally produce the other parity; only a
    // hard mismatch with both rules is rejected
    if (w->shape[0] != expect && w->shape[0] != kernel_size(len, KernelRound::kDown))
        throw ConfigError("local_interaction: kernel length " + std::to_string(w->shape[0]) +
                          " does not match kernel_size(" + std::to_string(len) + ")");
    return conv1d_same(g, w, bias);
}

template <class S>
ValueT<S> mgla_forward(const ValueT<S>& f, const MglaParamsT<S>& params) {
    if (f->shape.size() == 3) {
        Shape s = f->shape;
        auto out = mgla_forward(reshape(f, {1, s[0], s[1], s[2]}), params);
        return reshape(out, s);
    }
    if (f->shape.size() != 4) throw ConfigError("mgla_forward: expected [B,C,H,W], got " + shape_str(f->shape));
    const int b = f->shape[0], c = f->shape[1], h = f->shape[2], w = f->shape[3];

    auto gl_h = conv1d_same(attention_pool(f, 2), params.w_h, params.b_h);  // [B,H]
    auto gl_w = conv1d_same(attention_pool(f, 3), params.w_w, params.b_w);  // [B,W]
    auto gl_c = conv1d_same(attention_pool(f, 1), params.w_c, params.b_c);  // [B,C]

    auto gate_hw = mul(reshape(gl_h, {b, 1, h, 1}), reshape(gl_w, {b, 1, 1, w}));
    auto gate = sigmoid(mul(gate_hw, reshape(gl_c, {b, c, 1, 1})));
    return mul(f, gate);
}

}  // namespace rrl
