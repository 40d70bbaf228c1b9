#pragma once
// Differentiable N-d array engine. Reverse-mode autodiff over a dynamically
// recorded graph: every op returns a shared node holding data, links to its
// parents and a closure that pushes gradients back into them. backward()
// replays the recording in reverse topological order.
//
// Scalar type is a template parameter: training runs in float, gradient
// checks instantiate the same code in double.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rrl/common.hpp"

namespace rrl {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s);

template <class S>
struct NodeT;

template <class S>
using ValueT = std::shared_ptr<NodeT<S>>;

template <class S>
struct NodeT {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // allocated lazily; same length as data once touched
    bool requires_grad = false;
    bool is_leaf = false;
    const char* op = "leaf";
    std::vector<ValueT<S>> parents;
    std::function<void(NodeT<S>&)> backward_fn;

    int64_t size() const { return static_cast<int64_t>(data.size()); }

    S scalar() const {
        if (data.size() != 1) throw ConfigError("scalar() on tensor of size " + std::to_string(data.size()));
        return data[0];
    }

    void accumulate_grad(const S* g, int64_t n) {
        if (grad.empty()) grad.assign(data.size(), S(0));
        for (int64_t i = 0; i < n; ++i) grad[i] += g[i];
    }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), S(0));
    }

    void zero_grad() {
        if (requires_grad) grad.assign(data.size(), S(0));
    }
};

// ---------------------------------------------------------------------------
// construction

template <class S>
ValueT<S> make_leaf(Shape shape, std::vector<S> data, bool requires_grad);

template <class S>
ValueT<S> constant(Shape shape, std::vector<S> data);

template <class S>
ValueT<S> zeros(Shape shape, bool requires_grad = false);

template <class S>
ValueT<S> full(Shape shape, S value);

// ---------------------------------------------------------------------------
// ops (each differentiable unless noted)

// Cross-correlation, no kernel flip. x: [B,Ci,H,W], w: [Co,Ci,k,k],
// bias: [Co] or null. Output [B,Co,H',W'] with H' = (H+2p-k)/s + 1.
template <class S>
ValueT<S> conv2d(const ValueT<S>& x, const ValueT<S>& w, const ValueT<S>& bias, int stride, int pad);

// Length-preserving 1-d cross-correlation on the last axis of [B,L] or [L].
// Zero padding floor((k-1)/2) left, ceil((k-1)/2) right (even kernels allowed).
template <class S>
ValueT<S> conv1d_same(const ValueT<S>& x, const ValueT<S>& w, const ValueT<S>& bias);

// x: [B,In], w: [Out,In], bias: [Out] or null -> [B,Out]
template <class S>
ValueT<S> fully_connected(const ValueT<S>& x, const ValueT<S>& w, const ValueT<S>& bias);

template <class S> ValueT<S> relu(const ValueT<S>& x);
template <class S> ValueT<S> sigmoid(const ValueT<S>& x);
template <class S> ValueT<S> sqrt_op(const ValueT<S>& x);
template <class S> ValueT<S> square(const ValueT<S>& x);
template <class S> ValueT<S> log_op(const ValueT<S>& x);

// y = a*x + b elementwise with scalar constants
template <class S> ValueT<S> affine(const ValueT<S>& x, S a, S b);

// Pass-through gradient inside [lo,hi], zero outside.
template <class S> ValueT<S> clamp(const ValueT<S>& x, S lo, S hi);

// Max-subtracted softmax over the last axis.
template <class S> ValueT<S> softmax(const ValueT<S>& x);

// Non-graph batch-norm state. Running statistics are plain buffers mutated
// during train-mode forwards; gamma/beta are graph leaves owned elsewhere.
template <class S>
struct BnStats {
    std::vector<S> running_mean;
    std::vector<S> running_var;
    explicit BnStats(int channels = 0)
        : running_mean(channels, S(0)), running_var(channels, S(1)) {}
};

// x: [B,C,H,W]. train=true normalizes with batch statistics (accumulated
// per-sample, combined adjacent-pair-first so paired batches are
// order-symmetric) and updates the running buffers; train=false is the
// frozen affine map.
template <class S>
ValueT<S> batch_norm(const ValueT<S>& x, const ValueT<S>& gamma, const ValueT<S>& beta,
                     BnStats<S>& stats, bool train, S momentum = S(0.1), S eps = S(1e-5));

template <class S> ValueT<S> max_pool_2x2(const ValueT<S>& x);
template <class S> ValueT<S> upsample_nearest_2x(const ValueT<S>& x);

// Mean over the given axes (sorted, unique), dims removed.
template <class S> ValueT<S> mean_axes(const ValueT<S>& x, std::vector<int> axes);
template <class S> ValueT<S> mean_over_axis(const ValueT<S>& x, int axis);
template <class S> ValueT<S> global_avg_pool(const ValueT<S>& x, std::vector<int> axes);
template <class S> ValueT<S> mean_all(const ValueT<S>& x);

// Elementwise with trailing-dim broadcasting (numpy rules).
template <class S> ValueT<S> add(const ValueT<S>& a, const ValueT<S>& b);
template <class S> ValueT<S> sub(const ValueT<S>& a, const ValueT<S>& b);
template <class S> ValueT<S> mul(const ValueT<S>& a, const ValueT<S>& b);

template <class S> ValueT<S> add_n(const std::vector<ValueT<S>>& xs);

// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
template <class S> ValueT<S> matmul(const ValueT<S>& a, const ValueT<S>& b);

// Layout ops; identity gradient, data copied row-major.
template <class S> ValueT<S> reshape(const ValueT<S>& x, Shape shape);
template <class S> ValueT<S> transpose(const ValueT<S>& x, std::vector<int> perm);

template <class S> ValueT<S> concat(const std::vector<ValueT<S>>& xs, int axis);
template <class S> ValueT<S> slice0(const ValueT<S>& x, int start, int len);

// Pair interleave along axis 0: out[2i]=a[i], out[2i+1]=b[i].
template <class S> ValueT<S> interleave0(const ValueT<S>& a, const ValueT<S>& b);
// Inverse: every second sample starting at offset (0 or 1).
template <class S> ValueT<S> stride0(const ValueT<S>& x, int offset);

// Attention pooling over one axis of [B,C,H,W] (1=C, 2=H, 3=W): mean over the
// target axis, softmax over the flattened complement, weighted sum of the
// target-axis fibers. Fused single-kernel forward/backward. Returns [B,D].
template <class S> ValueT<S> attention_pool_op(const ValueT<S>& x, int axis);

// ---------------------------------------------------------------------------
// backward

// Seeds d(root)/d(root)=1 (root must be scalar) and propagates through the
// graph, visiting each node exactly once. Interior grads are released as soon
// as their node has pushed them back; leaf grads survive for the optimizer.
template <class S>
void backward(const ValueT<S>& root);

// Aborts with a NumericError naming the op if v contains NaN or Inf.
template <class S>
void check_finite(const char* op, const std::vector<S>& v);

}  // namespace rrl
