#include "rrl/tensor.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "rrl/detail/gemm.hpp"

namespace rrl {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <class S>
void check_finite(const char* op, const std::vector<S>& v) {
    // A non-finite element always poisons the double sum; float data cannot
    // overflow a double accumulator.
    double acc = 0.0;
    for (size_t i = 0; i < v.size(); ++i) acc += static_cast<double>(v[i]);
    if (std::isfinite(acc)) return;
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(static_cast<double>(v[i]))) {
            throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
        }
    }
    throw NumericError(std::string(op) + ": non-finite accumulation");
}

namespace {

template <class S>
ValueT<S> make_node(const char* op, Shape shape, std::vector<S> data, std::vector<ValueT<S>> parents) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
        throw ConfigError(std::string(op) + ": data length does not match shape " + shape_str(shape));
    auto n = std::make_shared<NodeT<S>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    check_finite(op, n->data);
    for (const auto& p : parents) {
        if (p && p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    n->parents = std::move(parents);
    return n;
}

template <class S>
void require_rank(const char* op, const ValueT<S>& x, size_t rank) {
    if (x->shape.size() != rank)
        throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                          shape_str(x->shape));
}

// Fixed grain sizes: elementwise loops only fan out when the tensor is large
// enough for threading to pay off.
constexpr int64_t kElemGrain = 1 << 17;

// Work-aware grain: items per thread chosen so a worker gets at least ~2M
// elementary ops, keeping small launches single-threaded.
inline int64_t grain_for(int64_t per_item_cost) {
    constexpr int64_t kCutoff = 1 << 21;
    if (per_item_cost < 1) per_item_cost = 1;
    return std::max<int64_t>(1, kCutoff / per_item_cost);
}

// Adjacent-pair-first batch reduction. partials is n_samples rows of width;
// the (2i, 2i+1) inner additions commute bit-exactly, so reductions over
// pair-interleaved batches are invariant under swapping each pair.
template <class S>
void reduce_pairs(const std::vector<S>& partials, int64_t n_samples, int64_t width, S* out) {
    std::fill(out, out + width, S(0));
    int64_t b = 0;
    for (; b + 1 < n_samples; b += 2) {
        const S* p0 = partials.data() + b * width;
        const S* p1 = p0 + width;
        for (int64_t i = 0; i < width; ++i) out[i] += p0[i] + p1[i];
    }
    if (b < n_samples) {
        const S* p0 = partials.data() + b * width;
        for (int64_t i = 0; i < width; ++i) out[i] += p0[i];
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// construction

template <class S>
ValueT<S> make_leaf(Shape shape, std::vector<S> data, bool requires_grad) {
    auto n = make_node<S>("leaf", std::move(shape), std::move(data), {});
    n->requires_grad = requires_grad;
    n->is_leaf = true;
    return n;
}

template <class S>
ValueT<S> constant(Shape shape, std::vector<S> data) {
    return make_leaf<S>(std::move(shape), std::move(data), false);
}

template <class S>
ValueT<S> zeros(Shape shape, bool requires_grad) {
    std::vector<S> d(static_cast<size_t>(numel(shape)), S(0));
    return make_leaf<S>(std::move(shape), std::move(d), requires_grad);
}

template <class S>
ValueT<S> full(Shape shape, S value) {
    std::vector<S> d(static_cast<size_t>(numel(shape)), value);
    return make_leaf<S>(std::move(shape), std::move(d), false);
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

// Writes one sample's patch matrix into a wider [kk, row_stride] buffer at
// column offset col0 (chunked samples sit side by side along N).
template <class S>
void im2col_strided(const S* x, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, S* col0,
                    int64_t row_stride) {
    for (int c = 0; c < ci; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                S* dst = col0 + (static_cast<int64_t>((c * k + ky) * k + kx)) * row_stride;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    S* row = dst + static_cast<int64_t>(oy) * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(row, row + wo, S(0));
                        continue;
                    }
                    const S* src = x + (static_cast<int64_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        row[ox] = (ix >= 0 && ix < w) ? src[ix] : S(0);
                    }
                }
            }
        }
    }
}

template <class S>
void col2im_add_strided(const S* col0, int64_t row_stride, int ci, int h, int w, int k, int stride, int pad,
                        int ho, int wo, S* x) {
    for (int c = 0; c < ci; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const S* src = col0 + (static_cast<int64_t>((c * k + ky) * k + kx)) * row_stride;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    S* row = x + (static_cast<int64_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) row[ix] += src[static_cast<int64_t>(oy) * wo + ox];
                    }
                }
            }
        }
    }
}

// Samples per conv chunk: bounded by a ~2M-float patch-matrix buffer and by
// keeping at least four chunks for batch-level threading.
inline int64_t conv_chunk(int64_t b, int64_t kk, int64_t n) {
    const int64_t mem_cap = std::max<int64_t>(1, (1 << 21) / std::max<int64_t>(1, kk * n));
    const int64_t par_cap = std::max<int64_t>(1, b / 4);
    return std::max<int64_t>(1, std::min({mem_cap, par_cap, b}));
}

// ---- direct kernels for the dominant 3x3 / stride 1 / pad 1 case ----
// No column-matrix expansion; row-hot loops the compiler vectorizes. Output
// channels run in pairs so each input row load feeds six FMA streams.

template <class S>
void pad1_copy(const S* x, int ci, int h, int w, S* padded) {
    const int pw = w + 2;
    std::fill(padded, padded + static_cast<int64_t>(ci) * (h + 2) * pw, S(0));
    for (int c = 0; c < ci; ++c)
        for (int y = 0; y < h; ++y)
            std::copy_n(x + (static_cast<int64_t>(c) * h + y) * w, w,
                        padded + (static_cast<int64_t>(c) * (h + 2) + y + 1) * pw + 1);
}

template <class S>
void conv3_fwd(const S* __restrict padded, const S* __restrict w, int ci, int co, int h, int wd,
               S* __restrict out) {
    const int pw = wd + 2;
    std::vector<S> acc(static_cast<size_t>(4) * wd);
    for (int y = 0; y < h; ++y) {
        for (int oc = 0; oc < co; oc += 4) {
            const int nb = co - oc < 4 ? co - oc : 4;
            std::fill(acc.begin(), acc.begin() + static_cast<int64_t>(nb) * wd, S(0));
            for (int c = 0; c < ci; ++c) {
                for (int ky = 0; ky < 3; ++ky) {
                    const S* __restrict row = padded + (static_cast<int64_t>(c) * (h + 2) + y + ky) * pw;
                    for (int j = 0; j < nb; ++j) {
                        const S* wj = w + (static_cast<int64_t>(oc + j) * ci + c) * 9 + ky * 3;
                        S* __restrict pj = acc.data() + static_cast<int64_t>(j) * wd;
                        const S a0 = wj[0], a1 = wj[1], a2 = wj[2];
                        for (int x = 0; x < wd; ++x) pj[x] += a0 * row[x] + a1 * row[x + 1] + a2 * row[x + 2];
                    }
                }
            }
            for (int j = 0; j < nb; ++j)
                std::copy_n(acc.data() + static_cast<int64_t>(j) * wd, wd,
                            out + (static_cast<int64_t>(oc + j) * h + y) * wd);
        }
    }
}

// weight gradient: gw[oc,c,ky,kx] += sum_{y,x} gout[oc,y,x] * padded[c,y+ky,x+kx].
// Per-tap accumulation planes keep the hot loop elementwise (no serial
// reduction chain); output channels run in pairs so each padded row load
// feeds both tap sets.
template <class S>
void conv3_gw(const S* __restrict padded, const S* __restrict gout, int ci, int co, int h, int wd,
              S* __restrict gw) {
    const int pw = wd + 2;
    std::vector<S> planes(static_cast<size_t>(18) * wd);
    for (int oc = 0; oc < co; oc += 2) {
        const int nb = co - oc < 2 ? 1 : 2;
        for (int c = 0; c < ci; ++c) {
            std::fill(planes.begin(), planes.begin() + static_cast<int64_t>(nb) * 9 * wd, S(0));
            for (int y = 0; y < h; ++y) {
                const S* __restrict g0 = gout + (static_cast<int64_t>(oc) * h + y) * wd;
                for (int ky = 0; ky < 3; ++ky) {
                    const S* __restrict row = padded + (static_cast<int64_t>(c) * (h + 2) + y + ky) * pw;
                    S* __restrict p0 = planes.data() + (ky * 3 + 0) * static_cast<int64_t>(wd);
                    S* __restrict p1 = planes.data() + (ky * 3 + 1) * static_cast<int64_t>(wd);
                    S* __restrict p2 = planes.data() + (ky * 3 + 2) * static_cast<int64_t>(wd);
                    if (nb == 2) {
                        const S* __restrict g1 = gout + (static_cast<int64_t>(oc + 1) * h + y) * wd;
                        S* __restrict q0 = planes.data() + (9 + ky * 3 + 0) * static_cast<int64_t>(wd);
                        S* __restrict q1 = planes.data() + (9 + ky * 3 + 1) * static_cast<int64_t>(wd);
                        S* __restrict q2 = planes.data() + (9 + ky * 3 + 2) * static_cast<int64_t>(wd);
                        for (int x = 0; x < wd; ++x) {
                            const S r0 = row[x], r1 = row[x + 1], r2 = row[x + 2];
                            const S a = g0[x], b = g1[x];
                            p0[x] += a * r0;
                            p1[x] += a * r1;
                            p2[x] += a * r2;
                            q0[x] += b * r0;
                            q1[x] += b * r1;
                            q2[x] += b * r2;
                        }
                    } else {
                        for (int x = 0; x < wd; ++x) {
                            const S gv = g0[x];
                            p0[x] += gv * row[x];
                            p1[x] += gv * row[x + 1];
                            p2[x] += gv * row[x + 2];
                        }
                    }
                }
            }
            for (int j = 0; j < nb; ++j) {
                S* dst = gw + (static_cast<int64_t>(oc + j) * ci + c) * 9;
                for (int t = 0; t < 9; ++t) {
                    const S* p = planes.data() + (static_cast<int64_t>(j) * 9 + t) * wd;
                    S acc = 0;
                    for (int x = 0; x < wd; ++x) acc += p[x];
                    dst[t] += acc;
                }
            }
        }
    }
}

}  // namespace

template <class S>
ValueT<S> conv2d(const ValueT<S>& x, const ValueT<S>& w, const ValueT<S>& bias, int stride, int pad) {
    require_rank("conv2d", x, 4);
    require_rank("conv2d", w, 4);
    const int b = x->shape[0], ci = x->shape[1], h = x->shape[2], ww = x->shape[3];
    const int co = w->shape[0], k = w->shape[2];
    if (w->shape[1] != ci)
        throw ConfigError("conv2d: input channels " + std::to_string(ci) + " do not match kernel " +
                          shape_str(w->shape));
    if (w->shape[2] != w->shape[3]) throw ConfigError("conv2d: kernel must be square, got " + shape_str(w->shape));
    if (stride < 1 || pad < 0) throw ConfigError("conv2d: bad stride/pad");
    if (k > h + 2 * pad || k > ww + 2 * pad)
        throw ConfigError("conv2d: kernel " + std::to_string(k) + " exceeds padded input " + shape_str(x->shape));
    if (bias && (bias->shape.size() != 1 || bias->shape[0] != co))
        throw ConfigError("conv2d: bias shape mismatch");
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (ww + 2 * pad - k) / stride + 1;
    const int64_t kk = static_cast<int64_t>(ci) * k * k;
    const int64_t n = static_cast<int64_t>(ho) * wo;
    const int64_t in_sz = static_cast<int64_t>(ci) * h * ww;
    const int64_t out_sz = static_cast<int64_t>(co) * n;

    std::vector<S> out(static_cast<size_t>(b) * out_sz);
    // Wide maps go through the direct row kernels; narrow deep maps pack more
    // work per GEMM via sample chunks instead.
    const bool direct3 = (k == 3 && stride == 1 && pad == 1 && wo >= 16);
    if (direct3) {
        const int64_t pad_sz = static_cast<int64_t>(ci) * (h + 2) * (ww + 2);
        parallel_for(b, grain_for(static_cast<int64_t>(co) * kk * n), [&](int64_t lo, int64_t hi) {
            std::vector<S> padded(static_cast<size_t>(pad_sz));
            for (int64_t s = lo; s < hi; ++s) {
                pad1_copy(x->data.data() + s * in_sz, ci, h, ww, padded.data());
                S* o = out.data() + s * out_sz;
                conv3_fwd(padded.data(), w->data.data(), ci, co, h, ww, o);
                if (bias) {
                    for (int c = 0; c < co; ++c) {
                        const S bv = bias->data[static_cast<size_t>(c)];
                        S* row = o + static_cast<int64_t>(c) * n;
                        for (int64_t i = 0; i < n; ++i) row[i] += bv;
                    }
                }
            }
        });
        auto node = make_node<S>("conv2d", {b, co, ho, wo}, std::move(out),
                                 bias ? std::vector<ValueT<S>>{x, w, bias} : std::vector<ValueT<S>>{x, w});
        if (node->requires_grad) {
            NodeT<S>* xp = x.get();
            NodeT<S>* wp = w.get();
            NodeT<S>* bp = bias ? bias.get() : nullptr;
            node->backward_fn = [xp, wp, bp, b, ci, h, ww, co, kk, n, in_sz, out_sz](NodeT<S>& self) {
                const S* go = self.grad.data();
                const bool need_x = xp->requires_grad;
                const bool need_w = wp->requires_grad;
                if (need_x) xp->ensure_grad();
                // transposed, tap-flipped weights turn the input gradient into
                // another 3x3 forward pass over the padded output gradient
                std::vector<S> wt;
                if (need_x) {
                    wt.resize(static_cast<size_t>(co) * kk);
                    for (int oc = 0; oc < co; ++oc)
                        for (int c = 0; c < ci; ++c)
                            for (int t = 0; t < 9; ++t)
                                wt[(static_cast<size_t>(c) * co + oc) * 9 + (8 - t)] =
                                    wp->data[(static_cast<size_t>(oc) * ci + c) * 9 + t];
                }
                const int64_t chunk = conv_chunk(b, kk, n);
                const int64_t n_chunks = (b + chunk - 1) / chunk;
                std::vector<S> w_parts, b_parts;
                if (need_w) w_parts.assign(static_cast<size_t>(n_chunks) * co * kk, S(0));
                if (bp && bp->requires_grad) b_parts.assign(static_cast<size_t>(n_chunks) * co, S(0));
                parallel_for(n_chunks, grain_for(3 * static_cast<int64_t>(co) * kk * n * chunk),
                             [&](int64_t lo, int64_t hi) {
                    std::vector<S> padded_in, padded_g, gx_tmp;
                    if (need_w) padded_in.resize(static_cast<size_t>(ci) * (h + 2) * (ww + 2));
                    if (need_x) {
                        padded_g.resize(static_cast<size_t>(co) * (h + 2) * (ww + 2));
                        gx_tmp.resize(static_cast<size_t>(in_sz));
                    }
                    for (int64_t cix = lo; cix < hi; ++cix) {
                        const int64_t s0 = cix * chunk;
                        const int64_t cnt = std::min<int64_t>(chunk, b - s0);
                        for (int64_t si = 0; si < cnt; ++si) {
                            const int64_t s = s0 + si;
                            const S* g = go + s * out_sz;
                            if (need_w) {
                                auto tt0 = std::chrono::steady_clock::now();
                                pad1_copy(xp->data.data() + s * in_sz, ci, h, ww, padded_in.data());
                                auto tt1 = std::chrono::steady_clock::now();
                                conv3_gw(padded_in.data(), g, ci, co, h, ww, w_parts.data() + cix * co * kk);
                                auto tt2 = std::chrono::steady_clock::now();
                                if (std::getenv("RRL_DBG"))
                                    std::fprintf(stderr, "pad %.3fms gw %.3fms\n",
                                        std::chrono::duration<double>(tt1-tt0).count()*1e3,
                                        std::chrono::duration<double>(tt2-tt1).count()*1e3);
                            }
                            if (!b_parts.empty()) {
                                S* bpart = b_parts.data() + cix * co;
                                for (int c = 0; c < co; ++c) {
                                    const S* row = g + static_cast<int64_t>(c) * n;
                                    S acc = 0;
                                    for (int64_t i = 0; i < n; ++i) acc += row[i];
                                    bpart[c] += acc;
                                }
                            }
                            if (need_x) {
                                pad1_copy(g, co, h, ww, padded_g.data());
                                conv3_fwd(padded_g.data(), wt.data(), co, ci, h, ww, gx_tmp.data());
                                S* gx = xp->grad.data() + s * in_sz;
                                for (int64_t i = 0; i < in_sz; ++i) gx[i] += gx_tmp[static_cast<size_t>(i)];
                            }
                        }
                    }
                });
                if (need_w) {
                    wp->ensure_grad();
                    std::vector<S> wacc(static_cast<size_t>(co) * kk);
                    reduce_pairs(w_parts, n_chunks, co * kk, wacc.data());
                    for (int64_t i = 0; i < co * kk; ++i) wp->grad[static_cast<size_t>(i)] += wacc[static_cast<size_t>(i)];
                }
                if (!b_parts.empty()) {
                    bp->ensure_grad();
                    std::vector<S> acc(static_cast<size_t>(co));
                    reduce_pairs(b_parts, n_chunks, co, acc.data());
                    for (int c = 0; c < co; ++c) bp->grad[static_cast<size_t>(c)] += acc[static_cast<size_t>(c)];
                }
            };
        }
        return node;
    }
    // samples are processed in fixed-size chunks: one im2col buffer and one
    // GEMM per chunk, giving the GEMM a wide N even when H'xW' is small. The
    // chunk size depends only on shapes, so results are reproducible.
    const int64_t chunk = conv_chunk(b, kk, n);
    const int64_t n_chunks = (b + chunk - 1) / chunk;
    const int64_t conv_cost = static_cast<int64_t>(co) * kk * n * chunk;
    parallel_for(n_chunks, grain_for(conv_cost), [&](int64_t lo, int64_t hi) {
        std::vector<S> col(static_cast<size_t>(kk) * chunk * n);
        std::vector<S> prod(static_cast<size_t>(co) * chunk * n);
        for (int64_t cix = lo; cix < hi; ++cix) {
            const int64_t s0 = cix * chunk;
            const int64_t cnt = std::min<int64_t>(chunk, b - s0);
            const int64_t big_n = cnt * n;
            for (int64_t s = 0; s < cnt; ++s)
                im2col_strided(x->data.data() + (s0 + s) * in_sz, ci, h, ww, k, stride, pad, ho, wo,
                               col.data() + s * n, big_n);
            detail::gemm(false, false, co, static_cast<int>(big_n), static_cast<int>(kk), S(1), w->data.data(),
                         static_cast<int>(kk), col.data(), static_cast<int>(big_n), S(0), prod.data(),
                         static_cast<int>(big_n));
            for (int64_t s = 0; s < cnt; ++s) {
                S* o = out.data() + (s0 + s) * out_sz;
                for (int c = 0; c < co; ++c) {
                    const S* src = prod.data() + static_cast<int64_t>(c) * big_n + s * n;
                    S* dst = o + static_cast<int64_t>(c) * n;
                    if (bias) {
                        const S bv = bias->data[static_cast<size_t>(c)];
                        for (int64_t i = 0; i < n; ++i) dst[i] = src[i] + bv;
                    } else {
                        std::copy_n(src, n, dst);
                    }
                }
            }
        }
    });

    auto node = make_node<S>("conv2d", {b, co, ho, wo}, std::move(out),
                             bias ? std::vector<ValueT<S>>{x, w, bias} : std::vector<ValueT<S>>{x, w});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        NodeT<S>* wp = w.get();
        NodeT<S>* bp = bias ? bias.get() : nullptr;
        node->backward_fn = [xp, wp, bp, b, ci, h, ww, co, k, stride, pad, ho, wo, kk, n, in_sz,
                             out_sz](NodeT<S>& self) {
            const S* go = self.grad.data();
            const bool need_x = xp->requires_grad;
            const bool need_w = wp->requires_grad;
            if (need_x) xp->ensure_grad();
            const int64_t chunk = conv_chunk(b, kk, n);
            const int64_t n_chunks = (b + chunk - 1) / chunk;
            std::vector<S> w_parts, b_parts;
            if (need_w) w_parts.assign(static_cast<size_t>(n_chunks) * co * kk, S(0));
            if (bp && bp->requires_grad) b_parts.assign(static_cast<size_t>(n_chunks) * co, S(0));
            parallel_for(n_chunks, grain_for(3 * static_cast<int64_t>(co) * kk * n * chunk),
                         [&](int64_t lo, int64_t hi) {
                std::vector<S> col(static_cast<size_t>(kk) * chunk * n);
                std::vector<S> gbig(static_cast<size_t>(co) * chunk * n);
                for (int64_t cix = lo; cix < hi; ++cix) {
                    const int64_t s0 = cix * chunk;
                    const int64_t cnt = std::min<int64_t>(chunk, b - s0);
                    const int64_t big_n = cnt * n;
                    // gather the chunk's output grads into [co, cnt*n]
                    for (int64_t s = 0; s < cnt; ++s) {
                        const S* g = go + (s0 + s) * out_sz;
                        for (int c = 0; c < co; ++c)
                            std::copy_n(g + static_cast<int64_t>(c) * n, n,
                                        gbig.data() + static_cast<int64_t>(c) * big_n + s * n);
                    }
                    if (need_w) {
                        for (int64_t s = 0; s < cnt; ++s)
                            im2col_strided(xp->data.data() + (s0 + s) * in_sz, ci, h, ww, k, stride, pad, ho,
                                           wo, col.data() + s * n, big_n);
                        detail::gemm(false, true, co, static_cast<int>(kk), static_cast<int>(big_n), S(1),
                                     gbig.data(), static_cast<int>(big_n), col.data(), static_cast<int>(big_n),
                                     S(0), w_parts.data() + cix * co * kk, static_cast<int>(kk));
                    }
                    if (!b_parts.empty()) {
                        S* bpart = b_parts.data() + cix * co;
                        for (int c = 0; c < co; ++c) {
                            const S* row = gbig.data() + static_cast<int64_t>(c) * big_n;
                            S acc = 0;
                            for (int64_t i = 0; i < big_n; ++i) acc += row[i];
                            bpart[c] = acc;
                        }
                    }
                    if (need_x) {
                        // reuse col as the column-space gradient buffer
                        detail::gemm(true, false, static_cast<int>(kk), static_cast<int>(big_n), co, S(1),
                                     wp->data.data(), static_cast<int>(kk), gbig.data(),
                                     static_cast<int>(big_n), S(0), col.data(), static_cast<int>(big_n));
                        for (int64_t s = 0; s < cnt; ++s)
                            col2im_add_strided(col.data() + s * n, big_n, ci, h, ww, k, stride, pad, ho, wo,
                                               xp->grad.data() + (s0 + s) * in_sz);
                    }
                }
            });
            if (need_w) {
                wp->ensure_grad();
                std::vector<S> wacc(static_cast<size_t>(co) * kk);
                reduce_pairs(w_parts, n_chunks, co * kk, wacc.data());
                for (int64_t i = 0; i < co * kk; ++i) wp->grad[static_cast<size_t>(i)] += wacc[static_cast<size_t>(i)];
            }
            if (!b_parts.empty()) {
                bp->ensure_grad();
                std::vector<S> acc(static_cast<size_t>(co));
                reduce_pairs(b_parts, n_chunks, co, acc.data());
                for (int c = 0; c < co; ++c) bp->grad[static_cast<size_t>(c)] += acc[static_cast<size_t>(c)];
            }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// conv1d_same

template <class S>
ValueT<S> conv1d_same(const ValueT<S>& x, const ValueT<S>& w, const ValueT<S>& bias) {
    if (x->shape.empty() || x->shape.size() > 2)
        throw ConfigError("conv1d_same: expected [L] or [B,L], got " + shape_str(x->shape));
    require_rank("conv1d_same", w, 1);
    const int batch = x->shape.size() == 2 ? x->shape[0] : 1;
    const int len = x->shape.back();
    const int k = w->shape[0];
    if (k < 1) throw ConfigError("conv1d_same: kernel must be non-empty");
    if (len < 1 || k > len + k - 1) throw ConfigError("conv1d_same: kernel exceeds padded input");
    if (bias && numel(bias->shape) != 1) throw ConfigError("conv1d_same: bias must be a scalar");
    const int pl = (k - 1) / 2;

    std::vector<S> out(static_cast<size_t>(batch) * len);
    for (int s = 0; s < batch; ++s) {
        const S* xs = x->data.data() + static_cast<int64_t>(s) * len;
        S* os = out.data() + static_cast<int64_t>(s) * len;
        for (int i = 0; i < len; ++i) {
            S acc = bias ? bias->data[0] : S(0);
            for (int j = 0; j < k; ++j) {
                int src = i - pl + j;
                if (src >= 0 && src < len) acc += xs[src] * w->data[static_cast<size_t>(j)];
            }
            os[i] = acc;
        }
    }
    auto node = make_node<S>("conv1d_same", x->shape, std::move(out),
                             bias ? std::vector<ValueT<S>>{x, w, bias} : std::vector<ValueT<S>>{x, w});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        NodeT<S>* wp = w.get();
        NodeT<S>* bp = bias ? bias.get() : nullptr;
        node->backward_fn = [xp, wp, bp, batch, len, k, pl](NodeT<S>& self) {
            const S* go = self.grad.data();
            if (xp->requires_grad) xp->ensure_grad();
            if (wp->requires_grad) wp->ensure_grad();
            if (bp && bp->requires_grad) bp->ensure_grad();
            for (int s = 0; s < batch; ++s) {
                const S* g = go + static_cast<int64_t>(s) * len;
                const S* xs = xp->data.data() + static_cast<int64_t>(s) * len;
                for (int i = 0; i < len; ++i) {
                    for (int j = 0; j < k; ++j) {
                        int src = i - pl + j;
                        if (src < 0 || src >= len) continue;
                        if (xp->requires_grad) xp->grad[static_cast<size_t>(s) * len + src] += g[i] * wp->data[static_cast<size_t>(j)];
                        if (wp->requires_grad) wp->grad[static_cast<size_t>(j)] += g[i] * xs[src];
                    }
                    if (bp && bp->requires_grad) bp->grad[0] += g[i];
                }
            }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// fully_connected

template <class S>
ValueT<S> fully_connected(const ValueT<S>& x, const ValueT<S>& w, const ValueT<S>& bias) {
    require_rank("fully_connected", x, 2);
    require_rank("fully_connected", w, 2);
    const int b = x->shape[0], in = x->shape[1], out_w = w->shape[0];
    if (w->shape[1] != in)
        throw ConfigError("fully_connected: input width " + std::to_string(in) + " does not match weights " +
                          shape_str(w->shape));
    if (bias && (bias->shape.size() != 1 || bias->shape[0] != out_w))
        throw ConfigError("fully_connected: bias shape mismatch");
    std::vector<S> out(static_cast<size_t>(b) * out_w);
    detail::gemm(false, true, b, out_w, in, S(1), x->data.data(), in, w->data.data(), in, S(0), out.data(), out_w);
    if (bias) {
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < out_w; ++j) out[static_cast<size_t>(i) * out_w + j] += bias->data[static_cast<size_t>(j)];
    }
    auto node = make_node<S>("fully_connected", {b, out_w}, std::move(out),
                             bias ? std::vector<ValueT<S>>{x, w, bias} : std::vector<ValueT<S>>{x, w});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        NodeT<S>* wp = w.get();
        NodeT<S>* bp = bias ? bias.get() : nullptr;
        node->backward_fn = [xp, wp, bp, b, in, out_w](NodeT<S>& self) {
            const S* go = self.grad.data();
            if (xp->requires_grad) {
                xp->ensure_grad();
                detail::gemm(false, false, b, in, out_w, S(1), go, out_w, wp->data.data(), in, S(1),
                             xp->grad.data(), in);
            }
            if (wp->requires_grad) {
                wp->ensure_grad();
                detail::gemm(true, false, out_w, in, b, S(1), go, out_w, xp->data.data(), in, S(1),
                             wp->grad.data(), in);
            }
            if (bp && bp->requires_grad) {
                bp->ensure_grad();
                for (int i = 0; i < b; ++i)
                    for (int j = 0; j < out_w; ++j) bp->grad[static_cast<size_t>(j)] += go[static_cast<size_t>(i) * out_w + j];
            }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// elementwise unaries

template <class S>
ValueT<S> relu(const ValueT<S>& x) {
    std::vector<S> out(x->data.size());
    parallel_for(x->size(), kElemGrain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) out[static_cast<size_t>(i)] = x->data[static_cast<size_t>(i)] > S(0) ? x->data[static_cast<size_t>(i)] : S(0);
    });
    auto node = make_node<S>("relu", x->shape, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp](NodeT<S>& self) {
            xp->ensure_grad();
            parallel_for(self.size(), kElemGrain, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    if (xp->data[static_cast<size_t>(i)] > S(0)) xp->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
            });
        };
    }
    return node;
}

template <class S>
ValueT<S> sigmoid(const ValueT<S>& x) {
    std::vector<S> out(x->data.size());
    parallel_for(x->size(), kElemGrain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) out[static_cast<size_t>(i)] = S(1) / (S(1) + std::exp(-x->data[static_cast<size_t>(i)]));
    });
    auto node = make_node<S>("sigmoid", x->shape, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp](NodeT<S>& self) {
            xp->ensure_grad();
            parallel_for(self.size(), kElemGrain, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    S y = self.data[static_cast<size_t>(i)];
                    xp->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * y * (S(1) - y);
                }
            });
        };
    }
    return node;
}

template <class S>
ValueT<S> sqrt_op(const ValueT<S>& x) {
    std::vector<S> out(x->data.size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (x->data[i] < S(0)) throw NumericError("sqrt: negative input");
        out[i] = std::sqrt(x->data[i]);
    }
    auto node = make_node<S>("sqrt", x->shape, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp](NodeT<S>& self) {
            xp->ensure_grad();
            for (size_t i = 0; i < self.data.size(); ++i) {
                // subgradient 0 at exactly zero instead of poisoning the step
                if (self.data[i] > S(0)) xp->grad[i] += self.grad[i] * S(0.5) / self.data[i];
            }
        };
    }
    return node;
}

template <class S>
ValueT<S> square(const ValueT<S>& x) {
    std::vector<S> out(x->data.size());
    parallel_for(x->size(), kElemGrain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) out[static_cast<size_t>(i)] = x->data[static_cast<size_t>(i)] * x->data[static_cast<size_t>(i)];
    });
    auto node = make_node<S>("square", x->shape, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp](NodeT<S>& self) {
            xp->ensure_grad();
            parallel_for(self.size(), kElemGrain, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) xp->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * S(2) * xp->data[static_cast<size_t>(i)];
            });
        };
    }
    return node;
}

template <class S>
ValueT<S> log_op(const ValueT<S>& x) {
    std::vector<S> out(x->data.size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (x->data[i] <= S(0)) throw NumericError("log: non-positive input");
        out[i] = std::log(x->data[i]);
    }
    auto node = make_node<S>("log", x->shape, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp](NodeT<S>& self) {
            xp->ensure_grad();
            for (size_t i = 0; i < self.data.size(); ++i) xp->grad[i] += self.grad[i] / xp->data[i];
        };
    }
    return node;
}

template <class S>
ValueT<S> affine(const ValueT<S>& x, S a, S b) {
    std::vector<S> out(x->data.size());
    parallel_for(x->size(), kElemGrain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) out[static_cast<size_t>(i)] = a * x->data[static_cast<size_t>(i)] + b;
    });
    auto node = make_node<S>("affine", x->shape, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp, a](NodeT<S>& self) {
            xp->ensure_grad();
            for (size_t i = 0; i < self.data.size(); ++i) xp->grad[i] += a * self.grad[i];
        };
    }
    return node;
}

template <class S>
ValueT<S> clamp(const ValueT<S>& x, S lo, S hi) {
    std::vector<S> out(x->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, x->data[i]));
    auto node = make_node<S>("clamp", x->shape, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp, lo, hi](NodeT<S>& self) {
            xp->ensure_grad();
            for (size_t i = 0; i < self.data.size(); ++i)
                if (xp->data[i] >= lo && xp->data[i] <= hi) xp->grad[i] += self.grad[i];
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// softmax

template <class S>
ValueT<S> softmax(const ValueT<S>& x) {
    if (x->shape.empty()) throw ConfigError("softmax: rank-0 input");
    const int len = x->shape.back();
    if (len < 1) throw ConfigError("softmax: empty axis");
    const int64_t rows = x->size() / len;
    std::vector<S> out(x->data.size());
    parallel_for(rows, grain_for(len), [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            const S* in = x->data.data() + r * len;
            S* o = out.data() + r * len;
            S mx = in[0];
            for (int i = 1; i < len; ++i) mx = std::max(mx, in[i]);
            S sum = 0;
            for (int i = 0; i < len; ++i) {
                o[i] = std::exp(in[i] - mx);
                sum += o[i];
            }
            for (int i = 0; i < len; ++i) o[i] /= sum;
        }
    });
    auto node = make_node<S>("softmax", x->shape, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp, rows, len](NodeT<S>& self) {
            xp->ensure_grad();
            parallel_for(rows, grain_for(len), [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    const S* y = self.data.data() + r * len;
                    const S* g = self.grad.data() + r * len;
                    S* gx = xp->grad.data() + r * len;
                    S dot = 0;
                    for (int i = 0; i < len; ++i) dot += g[i] * y[i];
                    for (int i = 0; i < len; ++i) gx[i] += y[i] * (g[i] - dot);
                }
            });
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// batch_norm

template <class S>
ValueT<S> batch_norm(const ValueT<S>& x, const ValueT<S>& gamma, const ValueT<S>& beta, BnStats<S>& stats,
                     bool train, S momentum, S eps) {
    require_rank("batch_norm", x, 4);
    const int b = x->shape[0], c = x->shape[1];
    const int64_t hw = static_cast<int64_t>(x->shape[2]) * x->shape[3];
    if (gamma->shape != Shape{c} || beta->shape != Shape{c})
        throw ConfigError("batch_norm: gamma/beta must be [" + std::to_string(c) + "]");
    if (static_cast<int>(stats.running_mean.size()) != c)
        throw ConfigError("batch_norm: running stats channel mismatch");

    std::vector<S> mean(static_cast<size_t>(c)), invstd(static_cast<size_t>(c));
    if (train) {
        const int64_t n = static_cast<int64_t>(b) * hw;
        std::vector<S> parts(static_cast<size_t>(b) * c * 2);
        parallel_for(b, grain_for(static_cast<int64_t>(c) * hw), [&](int64_t lo, int64_t hi) {
            for (int64_t s = lo; s < hi; ++s) {
                for (int ch = 0; ch < c; ++ch) {
                    const S* px = x->data.data() + (s * c + ch) * hw;
                    S sum = 0, sq = 0;
                    for (int64_t i = 0; i < hw; ++i) {
                        sum += px[i];
                        sq += px[i] * px[i];
                    }
                    parts[static_cast<size_t>((s * c + ch) * 2)] = sum;
                    parts[static_cast<size_t>((s * c + ch) * 2 + 1)] = sq;
                }
            }
        });
        std::vector<S> tot(static_cast<size_t>(c) * 2);
        reduce_pairs(parts, b, static_cast<int64_t>(c) * 2, tot.data());
        for (int ch = 0; ch < c; ++ch) {
            S m = tot[static_cast<size_t>(ch) * 2] / static_cast<S>(n);
            S v = tot[static_cast<size_t>(ch) * 2 + 1] / static_cast<S>(n) - m * m;
            if (v < S(0)) v = S(0);
            mean[static_cast<size_t>(ch)] = m;
            invstd[static_cast<size_t>(ch)] = S(1) / std::sqrt(v + eps);
            stats.running_mean[static_cast<size_t>(ch)] = (S(1) - momentum) * stats.running_mean[static_cast<size_t>(ch)] + momentum * m;
            stats.running_var[static_cast<size_t>(ch)] = (S(1) - momentum) * stats.running_var[static_cast<size_t>(ch)] + momentum * v;
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            mean[static_cast<size_t>(ch)] = stats.running_mean[static_cast<size_t>(ch)];
            invstd[static_cast<size_t>(ch)] = S(1) / std::sqrt(stats.running_var[static_cast<size_t>(ch)] + eps);
        }
    }

    std::vector<S> out(x->data.size());
    parallel_for(b, grain_for(static_cast<int64_t>(c) * hw), [&](int64_t lo, int64_t hi) {
        for (int64_t s = lo; s < hi; ++s) {
            for (int ch = 0; ch < c; ++ch) {
                const S* px = x->data.data() + (s * c + ch) * hw;
                S* po = out.data() + (s * c + ch) * hw;
                const S m = mean[static_cast<size_t>(ch)], is = invstd[static_cast<size_t>(ch)];
                const S g = gamma->data[static_cast<size_t>(ch)], bt = beta->data[static_cast<size_t>(ch)];
                for (int64_t i = 0; i < hw; ++i) po[i] = g * (px[i] - m) * is + bt;
            }
        }
    });

    auto node = make_node<S>("batch_norm", x->shape, std::move(out), {x, gamma, beta});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        NodeT<S>* gp = gamma.get();
        NodeT<S>* bp = beta.get();
        node->backward_fn = [xp, gp, bp, b, c, hw, train, mean = std::move(mean),
                             invstd = std::move(invstd)](NodeT<S>& self) {
            const int64_t n = static_cast<int64_t>(b) * hw;
            // per-channel sums of gout and gout*xhat, combined pair-first
            std::vector<S> parts(static_cast<size_t>(b) * c * 2);
            parallel_for(b, grain_for(static_cast<int64_t>(c) * hw), [&](int64_t lo, int64_t hi) {
                for (int64_t s = lo; s < hi; ++s) {
                    for (int ch = 0; ch < c; ++ch) {
                        const S* px = xp->data.data() + (s * c + ch) * hw;
                        const S* pg = self.grad.data() + (s * c + ch) * hw;
                        const S m = mean[static_cast<size_t>(ch)], is = invstd[static_cast<size_t>(ch)];
                        S s1 = 0, s2 = 0;
                        for (int64_t i = 0; i < hw; ++i) {
                            s1 += pg[i];
                            s2 += pg[i] * (px[i] - m) * is;
                        }
                        parts[static_cast<size_t>((s * c + ch) * 2)] = s1;
                        parts[static_cast<size_t>((s * c + ch) * 2 + 1)] = s2;
                    }
                }
            });
            std::vector<S> tot(static_cast<size_t>(c) * 2);
            reduce_pairs(parts, b, static_cast<int64_t>(c) * 2, tot.data());
            if (gp->requires_grad) {
                gp->ensure_grad();
                for (int ch = 0; ch < c; ++ch) gp->grad[static_cast<size_t>(ch)] += tot[static_cast<size_t>(ch) * 2 + 1];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (int ch = 0; ch < c; ++ch) bp->grad[static_cast<size_t>(ch)] += tot[static_cast<size_t>(ch) * 2];
            }
            if (xp->requires_grad) {
                xp->ensure_grad();
                parallel_for(b, grain_for(static_cast<int64_t>(c) * hw), [&](int64_t lo, int64_t hi) {
                    for (int64_t s = lo; s < hi; ++s) {
                        for (int ch = 0; ch < c; ++ch) {
                            const S* px = xp->data.data() + (s * c + ch) * hw;
                            const S* pg = self.grad.data() + (s * c + ch) * hw;
                            S* gx = xp->grad.data() + (s * c + ch) * hw;
                            const S m = mean[static_cast<size_t>(ch)], is = invstd[static_cast<size_t>(ch)];
                            const S g = gp->data[static_cast<size_t>(ch)];
                            if (train) {
                                const S g1 = tot[static_cast<size_t>(ch) * 2] / static_cast<S>(n);
                                const S g2 = tot[static_cast<size_t>(ch) * 2 + 1] / static_cast<S>(n);
                                for (int64_t i = 0; i < hw; ++i) {
                                    S xhat = (px[i] - m) * is;
                                    gx[i] += g * is * (pg[i] - g1 - xhat * g2);
                                }
                            } else {
                                for (int64_t i = 0; i < hw; ++i) gx[i] += g * is * pg[i];
                            }
                        }
                    }
                });
            }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// pooling / upsampling

template <class S>
ValueT<S> max_pool_2x2(const ValueT<S>& x) {
    require_rank("max_pool_2x2", x, 4);
    const int b = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (h % 2 || w % 2) throw ConfigError("max_pool_2x2: spatial extents must be even, got " + shape_str(x->shape));
    const int ho = h / 2, wo = w / 2;
    std::vector<S> out(static_cast<size_t>(b) * c * ho * wo);
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    const int64_t planes = static_cast<int64_t>(b) * c;
    parallel_for(planes, grain_for(static_cast<int64_t>(h) * w), [&](int64_t lo, int64_t hi) {
        for (int64_t p = lo; p < hi; ++p) {
            const S* px = x->data.data() + p * h * w;
            S* po = out.data() + p * ho * wo;
            int64_t* pa = argmax->data() + p * ho * wo;
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox) {
                    int64_t base = static_cast<int64_t>(2 * oy) * w + 2 * ox;
                    int64_t best = base;
                    S bv = px[base];
                    // fixed scan order; first max wins on ties
                    const int64_t cand[3] = {base + 1, base + w, base + w + 1};
                    for (int64_t idx : cand) {
                        if (px[idx] > bv) {
                            bv = px[idx];
                            best = idx;
                        }
                    }
                    po[static_cast<int64_t>(oy) * wo + ox] = bv;
                    pa[static_cast<int64_t>(oy) * wo + ox] = p * h * w + best;
                }
            }
        }
    });
    auto node = make_node<S>("max_pool_2x2", {b, c, ho, wo}, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp, argmax](NodeT<S>& self) {
            xp->ensure_grad();
            for (size_t i = 0; i < self.data.size(); ++i) xp->grad[static_cast<size_t>((*argmax)[i])] += self.grad[i];
        };
    }
    return node;
}

template <class S>
ValueT<S> upsample_nearest_2x(const ValueT<S>& x) {
    require_rank("upsample_nearest_2x", x, 4);
    const int b = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    const int ho = 2 * h, wo = 2 * w;
    std::vector<S> out(static_cast<size_t>(b) * c * ho * wo);
    const int64_t planes = static_cast<int64_t>(b) * c;
    parallel_for(planes, grain_for(static_cast<int64_t>(ho) * wo), [&](int64_t lo, int64_t hi) {
        for (int64_t p = lo; p < hi; ++p) {
            const S* px = x->data.data() + p * h * w;
            S* po = out.data() + p * ho * wo;
            for (int y = 0; y < ho; ++y) {
                const S* row = px + static_cast<int64_t>(y / 2) * w;
                S* orow = po + static_cast<int64_t>(y) * wo;
                for (int xx = 0; xx < wo; ++xx) orow[xx] = row[xx / 2];
            }
        }
    });
    auto node = make_node<S>("upsample_nearest_2x", {b, c, ho, wo}, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp, planes, h, w, ho, wo](NodeT<S>& self) {
            xp->ensure_grad();
            parallel_for(planes, grain_for(static_cast<int64_t>(ho) * wo), [&](int64_t lo, int64_t hi) {
                for (int64_t p = lo; p < hi; ++p) {
                    const S* pg = self.grad.data() + p * ho * wo;
                    S* gx = xp->grad.data() + p * h * w;
                    for (int y = 0; y < h; ++y) {
                        for (int xx = 0; xx < w; ++xx) {
                            const S* g0 = pg + static_cast<int64_t>(2 * y) * wo + 2 * xx;
                            const S* g1 = g0 + wo;
                            gx[static_cast<int64_t>(y) * w + xx] += (g0[0] + g0[1]) + (g1[0] + g1[1]);
                        }
                    }
                }
            });
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// reductions

template <class S>
ValueT<S> mean_axes(const ValueT<S>& x, std::vector<int> axes) {
    const int rank = static_cast<int>(x->shape.size());
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (int a : axes)
        if (a < 0 || a >= rank) throw ConfigError("mean_axes: axis " + std::to_string(a) + " out of range");
    std::vector<bool> reduce(static_cast<size_t>(rank), false);
    for (int a : axes) reduce[static_cast<size_t>(a)] = true;

    Shape out_shape;
    for (int d = 0; d < rank; ++d)
        if (!reduce[static_cast<size_t>(d)]) out_shape.push_back(x->shape[d]);

    int64_t count = 1;
    for (int a : axes) count *= x->shape[a];
    const int64_t out_n = numel(out_shape);

    // strides of the input mapped onto the output index space (0 = reduced)
    std::vector<int64_t> in_strides(static_cast<size_t>(rank), 1);
    for (int d = rank - 2; d >= 0; --d) in_strides[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(d) + 1] * x->shape[d + 1];

    std::vector<S> out(static_cast<size_t>(out_n), S(0));
    // single fixed-order pass over the input
    std::vector<int> idx(static_cast<size_t>(rank), 0);
    const int64_t total = x->size();
    std::vector<int64_t> out_stride(static_cast<size_t>(rank), 0);
    {
        int64_t os = 1;
        for (int d = rank - 1; d >= 0; --d) {
            if (!reduce[static_cast<size_t>(d)]) {
                out_stride[static_cast<size_t>(d)] = os;
                os *= x->shape[d];
            }
        }
    }
    int64_t oidx = 0;
    for (int64_t i = 0; i < total; ++i) {
        out[static_cast<size_t>(oidx)] += x->data[static_cast<size_t>(i)];
        for (int d = rank - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            oidx += out_stride[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < x->shape[d]) break;
            idx[static_cast<size_t>(d)] = 0;
            oidx -= out_stride[static_cast<size_t>(d)] * x->shape[d];
        }
    }
    const S inv = S(1) / static_cast<S>(count);
    for (auto& v : out) v *= inv;

    auto node = make_node<S>("mean_axes", out_shape, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp, reduce, out_stride, rank, inv](NodeT<S>& self) {
            xp->ensure_grad();
            std::vector<int> idx2(static_cast<size_t>(rank), 0);
            int64_t oi = 0;
            const int64_t total2 = xp->size();
            for (int64_t i = 0; i < total2; ++i) {
                xp->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(oi)] * inv;
                for (int d = rank - 1; d >= 0; --d) {
                    idx2[static_cast<size_t>(d)]++;
                    oi += out_stride[static_cast<size_t>(d)];
                    if (idx2[static_cast<size_t>(d)] < xp->shape[d]) break;
                    idx2[static_cast<size_t>(d)] = 0;
                    oi -= out_stride[static_cast<size_t>(d)] * xp->shape[d];
                }
            }
        };
    }
    return node;
}

template <class S>
ValueT<S> mean_over_axis(const ValueT<S>& x, int axis) {
    return mean_axes(x, {axis});
}

template <class S>
ValueT<S> global_avg_pool(const ValueT<S>& x, std::vector<int> axes) {
    return mean_axes(x, std::move(axes));
}

template <class S>
ValueT<S> mean_all(const ValueT<S>& x) {
    std::vector<int> axes(x->shape.size());
    std::iota(axes.begin(), axes.end(), 0);
    return mean_axes(x, std::move(axes));
}

// ---------------------------------------------------------------------------
// broadcasting elementwise binaries

namespace {

struct BcastPlan {
    Shape out_shape;
    std::vector<int64_t> sa, sb;  // strides per output dim, 0 on broadcast dims
    int rank = 0;
};

template <class S>
BcastPlan bcast_plan(const char* op, const ValueT<S>& a, const ValueT<S>& b) {
    const int rank = static_cast<int>(std::max(a->shape.size(), b->shape.size()));
    BcastPlan p;
    p.rank = rank;
    p.out_shape.resize(static_cast<size_t>(rank));
    Shape as(static_cast<size_t>(rank), 1), bs(static_cast<size_t>(rank), 1);
    std::copy(a->shape.begin(), a->shape.end(), as.begin() + (rank - static_cast<int>(a->shape.size())));
    std::copy(b->shape.begin(), b->shape.end(), bs.begin() + (rank - static_cast<int>(b->shape.size())));
    for (int d = 0; d < rank; ++d) {
        if (as[d] != bs[d] && as[d] != 1 && bs[d] != 1)
            throw ConfigError(std::string(op) + ": shapes " + shape_str(a->shape) + " and " + shape_str(b->shape) +
                              " are not broadcastable");
        p.out_shape[static_cast<size_t>(d)] = std::max(as[d], bs[d]);
    }
    p.sa.assign(static_cast<size_t>(rank), 0);
    p.sb.assign(static_cast<size_t>(rank), 0);
    int64_t sta = 1, stb = 1;
    for (int d = rank - 1; d >= 0; --d) {
        if (as[d] != 1) {
            p.sa[static_cast<size_t>(d)] = sta;
        }
        sta *= as[d];
        if (bs[d] != 1) {
            p.sb[static_cast<size_t>(d)] = stb;
        }
        stb *= bs[d];
    }
    return p;
}

enum class BinOp { kAdd, kSub, kMul };

template <class S>
ValueT<S> binary_op(const char* name, BinOp op, const ValueT<S>& a, const ValueT<S>& b) {
    if (a->shape == b->shape) {
        // fast path, no index arithmetic
        std::vector<S> out(a->data.size());
        const S* pa = a->data.data();
        const S* pb = b->data.data();
        parallel_for(a->size(), kElemGrain, [&](int64_t lo, int64_t hi) {
            switch (op) {
                case BinOp::kAdd:
                    for (int64_t i = lo; i < hi; ++i) out[static_cast<size_t>(i)] = pa[i] + pb[i];
                    break;
                case BinOp::kSub:
                    for (int64_t i = lo; i < hi; ++i) out[static_cast<size_t>(i)] = pa[i] - pb[i];
                    break;
                case BinOp::kMul:
                    for (int64_t i = lo; i < hi; ++i) out[static_cast<size_t>(i)] = pa[i] * pb[i];
                    break;
            }
        });
        auto node = make_node<S>(name, a->shape, std::move(out), {a, b});
        if (node->requires_grad) {
            NodeT<S>* ap = a.get();
            NodeT<S>* bp = b.get();
            node->backward_fn = [ap, bp, op](NodeT<S>& self) {
                const int64_t n = self.size();
                if (ap->requires_grad) {
                    ap->ensure_grad();
                    parallel_for(n, kElemGrain, [&](int64_t lo, int64_t hi) {
                        if (op == BinOp::kMul)
                            for (int64_t i = lo; i < hi; ++i) ap->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * bp->data[static_cast<size_t>(i)];
                        else
                            for (int64_t i = lo; i < hi; ++i) ap->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
                    });
                }
                if (bp->requires_grad) {
                    bp->ensure_grad();
                    parallel_for(n, kElemGrain, [&](int64_t lo, int64_t hi) {
                        switch (op) {
                            case BinOp::kAdd:
                                for (int64_t i = lo; i < hi; ++i) bp->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
                                break;
                            case BinOp::kSub:
                                for (int64_t i = lo; i < hi; ++i) bp->grad[static_cast<size_t>(i)] -= self.grad[static_cast<size_t>(i)];
                                break;
                            case BinOp::kMul:
                                for (int64_t i = lo; i < hi; ++i) bp->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] * ap->data[static_cast<size_t>(i)];
                                break;
                        }
                    });
                }
            };
        }
        return node;
    }

    BcastPlan plan = bcast_plan(name, a, b);
    const int rank = plan.rank;
    const int64_t total = numel(plan.out_shape);
    const int64_t nlast = plan.out_shape[static_cast<size_t>(rank - 1)];
    const int64_t rows = total / nlast;
    const int64_t sa_last = plan.sa[static_cast<size_t>(rank - 1)];
    const int64_t sb_last = plan.sb[static_cast<size_t>(rank - 1)];
    // start offsets of a row in each operand
    auto row_offsets = [plan, rank](int64_t row, int64_t& ia, int64_t& ib) {
        ia = ib = 0;
        int64_t r = row;
        for (int dd = rank - 2; dd >= 0; --dd) {
            const int64_t sz = plan.out_shape[static_cast<size_t>(dd)];
            const int64_t q = r % sz;
            r /= sz;
            ia += q * plan.sa[static_cast<size_t>(dd)];
            ib += q * plan.sb[static_cast<size_t>(dd)];
        }
    };

    std::vector<S> out(static_cast<size_t>(total));
    const S* pa = a->data.data();
    const S* pb = b->data.data();
    parallel_for(rows, grain_for(nlast), [&](int64_t lo, int64_t hi) {
        for (int64_t row = lo; row < hi; ++row) {
            int64_t ia, ib;
            row_offsets(row, ia, ib);
            S* po = out.data() + row * nlast;
            const S* ra = pa + ia;
            const S* rb = pb + ib;
            for (int64_t i = 0; i < nlast; ++i) {
                const S av = ra[i * sa_last];
                const S bv = rb[i * sb_last];
                po[i] = op == BinOp::kAdd ? av + bv : op == BinOp::kSub ? av - bv : av * bv;
            }
        }
    });
    auto node = make_node<S>(name, plan.out_shape, std::move(out), {a, b});
    if (node->requires_grad) {
        NodeT<S>* ap = a.get();
        NodeT<S>* bp = b.get();
        node->backward_fn = [ap, bp, op, rows, nlast, sa_last, sb_last, row_offsets](NodeT<S>& self) {
            if (ap->requires_grad) ap->ensure_grad();
            if (bp->requires_grad) bp->ensure_grad();
            // sequential rows: broadcast axes reduce in fixed output order
            for (int64_t row = 0; row < rows; ++row) {
                int64_t ia, ib;
                row_offsets(row, ia, ib);
                const S* g = self.grad.data() + row * nlast;
                if (ap->requires_grad) {
                    S* ga = ap->grad.data() + ia;
                    if (op != BinOp::kMul) {
                        if (sa_last == 1) {
                            for (int64_t i = 0; i < nlast; ++i) ga[i] += g[i];
                        } else {
                            S acc = 0;
                            for (int64_t i = 0; i < nlast; ++i) acc += g[i];
                            ga[0] += acc;
                        }
                    } else {
                        const S* rb = bp->data.data() + ib;
                        if (sa_last == 1) {
                            for (int64_t i = 0; i < nlast; ++i) ga[i] += g[i] * rb[i * sb_last];
                        } else {
                            S acc = 0;
                            for (int64_t i = 0; i < nlast; ++i) acc += g[i] * rb[i * sb_last];
                            ga[0] += acc;
                        }
                    }
                }
                if (bp->requires_grad) {
                    S* gb = bp->grad.data() + ib;
                    const S sign = op == BinOp::kSub ? S(-1) : S(1);
                    if (op != BinOp::kMul) {
                        if (sb_last == 1) {
                            for (int64_t i = 0; i < nlast; ++i) gb[i] += sign * g[i];
                        } else {
                            S acc = 0;
                            for (int64_t i = 0; i < nlast; ++i) acc += g[i];
                            gb[0] += sign * acc;
                        }
                    } else {
                        const S* ra = ap->data.data() + ia;
                        if (sb_last == 1) {
                            for (int64_t i = 0; i < nlast; ++i) gb[i] += g[i] * ra[i * sa_last];
                        } else {
                            S acc = 0;
                            for (int64_t i = 0; i < nlast; ++i) acc += g[i] * ra[i * sa_last];
                            gb[0] += acc;
                        }
                    }
                }
            }
        };
    }
    return node;
}

}  // namespace

template <class S>
ValueT<S> add(const ValueT<S>& a, const ValueT<S>& b) {
    return binary_op("add", BinOp::kAdd, a, b);
}
template <class S>
ValueT<S> sub(const ValueT<S>& a, const ValueT<S>& b) {
    return binary_op("sub", BinOp::kSub, a, b);
}
template <class S>
ValueT<S> mul(const ValueT<S>& a, const ValueT<S>& b) {
    return binary_op("mul", BinOp::kMul, a, b);
}

template <class S>
ValueT<S> add_n(const std::vector<ValueT<S>>& xs) {
    if (xs.empty()) throw ConfigError("add_n: empty input");
    ValueT<S> acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
}

// ---------------------------------------------------------------------------
// matmul

template <class S>
ValueT<S> matmul(const ValueT<S>& a, const ValueT<S>& b) {
    const bool batched = a->shape.size() == 3;
    if (batched) {
        require_rank("matmul", b, 3);
        if (a->shape[0] != b->shape[0] || a->shape[2] != b->shape[1])
            throw ConfigError("matmul: incompatible " + shape_str(a->shape) + " x " + shape_str(b->shape));
    } else {
        require_rank("matmul", a, 2);
        require_rank("matmul", b, 2);
        if (a->shape[1] != b->shape[0])
            throw ConfigError("matmul: incompatible " + shape_str(a->shape) + " x " + shape_str(b->shape));
    }
    const int nb = batched ? a->shape[0] : 1;
    const int m = batched ? a->shape[1] : a->shape[0];
    const int k = batched ? a->shape[2] : a->shape[1];
    const int n = batched ? b->shape[2] : b->shape[1];
    Shape out_shape = batched ? Shape{nb, m, n} : Shape{m, n};
    std::vector<S> out(static_cast<size_t>(nb) * m * n);
    parallel_for(nb, grain_for(static_cast<int64_t>(m) * k * n), [&](int64_t lo, int64_t hi) {
        for (int64_t s = lo; s < hi; ++s) {
            detail::gemm(false, false, m, n, k, S(1), a->data.data() + s * m * k, k, b->data.data() + s * k * n, n,
                         S(0), out.data() + s * m * n, n);
        }
    });
    auto node = make_node<S>("matmul", std::move(out_shape), std::move(out), {a, b});
    if (node->requires_grad) {
        NodeT<S>* ap = a.get();
        NodeT<S>* bp = b.get();
        node->backward_fn = [ap, bp, nb, m, k, n](NodeT<S>& self) {
            if (ap->requires_grad) ap->ensure_grad();
            if (bp->requires_grad) bp->ensure_grad();
            parallel_for(nb, grain_for(2 * static_cast<int64_t>(m) * k * n), [&](int64_t lo, int64_t hi) {
                for (int64_t s = lo; s < hi; ++s) {
                    const S* g = self.grad.data() + s * m * n;
                    if (ap->requires_grad) {
                        detail::gemm(false, true, m, k, n, S(1), g, n, bp->data.data() + s * k * n, n, S(1),
                                     ap->grad.data() + s * m * k, k);
                    }
                    if (bp->requires_grad) {
                        detail::gemm(true, false, k, n, m, S(1), ap->data.data() + s * m * k, k, g, n, S(1),
                                     bp->grad.data() + s * k * n, n);
                    }
                }
            });
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// layout ops

template <class S>
ValueT<S> reshape(const ValueT<S>& x, Shape shape) {
    if (numel(shape) != x->size())
        throw ConfigError("reshape: cannot view " + shape_str(x->shape) + " as " + shape_str(shape));
    std::vector<S> out = x->data;
    auto node = make_node<S>("reshape", std::move(shape), std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp](NodeT<S>& self) { xp->accumulate_grad(self.grad.data(), self.size()); };
    }
    return node;
}

template <class S>
ValueT<S> transpose(const ValueT<S>& x, std::vector<int> perm) {
    const int rank = static_cast<int>(x->shape.size());
    if (static_cast<int>(perm.size()) != rank) throw ConfigError("transpose: perm rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(rank), false);
    for (int p : perm) {
        if (p < 0 || p >= rank || seen[static_cast<size_t>(p)]) throw ConfigError("transpose: bad permutation");
        seen[static_cast<size_t>(p)] = true;
    }
    Shape out_shape(static_cast<size_t>(rank));
    for (int d = 0; d < rank; ++d) out_shape[static_cast<size_t>(d)] = x->shape[perm[static_cast<size_t>(d)]];

    std::vector<int64_t> in_strides(static_cast<size_t>(rank), 1);
    for (int d = rank - 2; d >= 0; --d) in_strides[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(d) + 1] * x->shape[d + 1];
    // stride of the source index as the output index advances
    std::vector<int64_t> stride(static_cast<size_t>(rank));
    for (int d = 0; d < rank; ++d) stride[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(d)])];

    const int64_t total = x->size();
    std::vector<S> out(static_cast<size_t>(total));
    auto gather = [&](const S* src, S* dst) {
        std::vector<int> idx(static_cast<size_t>(rank), 0);
        int64_t si = 0;
        for (int64_t i = 0; i < total; ++i) {
            dst[i] = src[si];
            for (int d = rank - 1; d >= 0; --d) {
                idx[static_cast<size_t>(d)]++;
                si += stride[static_cast<size_t>(d)];
                if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
                si -= stride[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
            }
        }
    };
    gather(x->data.data(), out.data());
    auto node = make_node<S>("transpose", out_shape, std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp, out_shape, stride, rank, total](NodeT<S>& self) {
            xp->ensure_grad();
            std::vector<int> idx(static_cast<size_t>(rank), 0);
            int64_t si = 0;
            for (int64_t i = 0; i < total; ++i) {
                xp->grad[static_cast<size_t>(si)] += self.grad[static_cast<size_t>(i)];
                for (int d = rank - 1; d >= 0; --d) {
                    idx[static_cast<size_t>(d)]++;
                    si += stride[static_cast<size_t>(d)];
                    if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
                    idx[static_cast<size_t>(d)] = 0;
                    si -= stride[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
                }
            }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// concat / slicing

template <class S>
ValueT<S> concat(const std::vector<ValueT<S>>& xs, int axis) {
    if (xs.empty()) throw ConfigError("concat: empty input");
    const int rank = static_cast<int>(xs[0]->shape.size());
    if (axis < 0 || axis >= rank) throw ConfigError("concat: axis out of range");
    Shape out_shape = xs[0]->shape;
    int total_axis = 0;
    for (const auto& x : xs) {
        if (static_cast<int>(x->shape.size()) != rank) throw ConfigError("concat: rank mismatch");
        for (int d = 0; d < rank; ++d) {
            if (d != axis && x->shape[d] != out_shape[d])
                throw ConfigError("concat: shape mismatch " + shape_str(x->shape) + " vs " + shape_str(out_shape));
        }
        total_axis += x->shape[axis];
    }
    out_shape[axis] = total_axis;

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[d];
    for (int d = axis + 1; d < rank; ++d) inner *= out_shape[d];

    std::vector<S> out(static_cast<size_t>(numel(out_shape)));
    const int64_t out_row = static_cast<int64_t>(total_axis) * inner;
    int64_t off = 0;
    for (const auto& x : xs) {
        const int64_t x_row = static_cast<int64_t>(x->shape[axis]) * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(x->data.data() + o * x_row, x_row, out.data() + o * out_row + off);
        off += x_row;
    }
    std::vector<ValueT<S>> parents(xs.begin(), xs.end());
    auto node = make_node<S>("concat", out_shape, std::move(out), std::move(parents));
    if (node->requires_grad) {
        std::vector<NodeT<S>*> ps;
        std::vector<int64_t> rows;
        for (const auto& x : xs) {
            ps.push_back(x.get());
            rows.push_back(static_cast<int64_t>(x->shape[axis]) * inner);
        }
        node->backward_fn = [ps, rows, outer, out_row](NodeT<S>& self) {
            int64_t off2 = 0;
            for (size_t pi = 0; pi < ps.size(); ++pi) {
                NodeT<S>* p = ps[pi];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int64_t o = 0; o < outer; ++o) {
                        const S* g = self.grad.data() + o * out_row + off2;
                        S* dst = p->grad.data() + o * rows[pi];
                        for (int64_t i = 0; i < rows[pi]; ++i) dst[i] += g[i];
                    }
                }
                off2 += rows[pi];
            }
        };
    }
    return node;
}

template <class S>
ValueT<S> slice0(const ValueT<S>& x, int start, int len) {
    if (x->shape.empty()) throw ConfigError("slice0: rank-0 input");
    if (start < 0 || len < 0 || start + len > x->shape[0]) throw ConfigError("slice0: range out of bounds");
    const int64_t row = x->size() / x->shape[0];
    Shape out_shape = x->shape;
    out_shape[0] = len;
    std::vector<S> out(static_cast<size_t>(len) * row);
    std::copy_n(x->data.data() + static_cast<int64_t>(start) * row, out.size(), out.data());
    auto node = make_node<S>("slice0", std::move(out_shape), std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp, start, row](NodeT<S>& self) {
            xp->ensure_grad();
            S* dst = xp->grad.data() + static_cast<int64_t>(start) * row;
            for (size_t i = 0; i < self.data.size(); ++i) dst[i] += self.grad[i];
        };
    }
    return node;
}

template <class S>
ValueT<S> interleave0(const ValueT<S>& a, const ValueT<S>& b) {
    if (a->shape != b->shape) throw ConfigError("interleave0: shape mismatch");
    if (a->shape.empty()) throw ConfigError("interleave0: rank-0 input");
    const int n = a->shape[0];
    const int64_t row = a->size() / n;
    Shape out_shape = a->shape;
    out_shape[0] = 2 * n;
    std::vector<S> out(static_cast<size_t>(2 * n) * row);
    for (int i = 0; i < n; ++i) {
        std::copy_n(a->data.data() + static_cast<int64_t>(i) * row, row, out.data() + static_cast<int64_t>(2 * i) * row);
        std::copy_n(b->data.data() + static_cast<int64_t>(i) * row, row, out.data() + static_cast<int64_t>(2 * i + 1) * row);
    }
    auto node = make_node<S>("interleave0", std::move(out_shape), std::move(out), {a, b});
    if (node->requires_grad) {
        NodeT<S>* ap = a.get();
        NodeT<S>* bp = b.get();
        node->backward_fn = [ap, bp, n, row](NodeT<S>& self) {
            if (ap->requires_grad) ap->ensure_grad();
            if (bp->requires_grad) bp->ensure_grad();
            for (int i = 0; i < n; ++i) {
                const S* ga = self.grad.data() + static_cast<int64_t>(2 * i) * row;
                const S* gb = self.grad.data() + static_cast<int64_t>(2 * i + 1) * row;
                if (ap->requires_grad) {
                    S* dst = ap->grad.data() + static_cast<int64_t>(i) * row;
                    for (int64_t j = 0; j < row; ++j) dst[j] += ga[j];
                }
                if (bp->requires_grad) {
                    S* dst = bp->grad.data() + static_cast<int64_t>(i) * row;
                    for (int64_t j = 0; j < row; ++j) dst[j] += gb[j];
                }
            }
        };
    }
    return node;
}

template <class S>
ValueT<S> stride0(const ValueT<S>& x, int offset) {
    if (x->shape.empty()) throw ConfigError("stride0: rank-0 input");
    if (offset != 0 && offset != 1) throw ConfigError("stride0: offset must be 0 or 1");
    const int n = x->shape[0];
    if (n % 2) throw ConfigError("stride0: axis 0 must be even");
    const int64_t row = x->size() / n;
    Shape out_shape = x->shape;
    out_shape[0] = n / 2;
    std::vector<S> out(static_cast<size_t>(n / 2) * row);
    for (int i = 0; i < n / 2; ++i)
        std::copy_n(x->data.data() + static_cast<int64_t>(2 * i + offset) * row, row, out.data() + static_cast<int64_t>(i) * row);
    auto node = make_node<S>("stride0", std::move(out_shape), std::move(out), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp, n, row, offset](NodeT<S>& self) {
            xp->ensure_grad();
            for (int i = 0; i < n / 2; ++i) {
                const S* g = self.grad.data() + static_cast<int64_t>(i) * row;
                S* dst = xp->grad.data() + static_cast<int64_t>(2 * i + offset) * row;
                for (int64_t j = 0; j < row; ++j) dst[j] += g[j];
            }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// attention pooling (fused)

template <class S>
ValueT<S> attention_pool_op(const ValueT<S>& x, int axis) {
    require_rank("attention_pool", x, 4);
    if (axis < 1 || axis > 3) throw ConfigError("attention_pool: axis must be 1 (C), 2 (H) or 3 (W)");
    const int b = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    const int d = x->shape[axis];
    const int64_t rest = static_cast<int64_t>(c) * h * w / d;
    const int64_t plane = static_cast<int64_t>(c) * h * w;

    std::vector<S> ctx(static_cast<size_t>(b) * d);
    // softmax weights over the complement map, kept for the backward pass
    auto soft = std::make_shared<std::vector<S>>(static_cast<size_t>(b) * rest);

    parallel_for(b, grain_for(2 * plane), [&](int64_t lo, int64_t hi) {
        for (int64_t s = lo; s < hi; ++s) {
            const S* px = x->data.data() + s * plane;
            S* ps = soft->data() + s * rest;
            S* pc = ctx.data() + s * d;
            // complement mean over the target axis
            if (axis == 1) {
                std::fill(ps, ps + rest, S(0));
                for (int ch = 0; ch < c; ++ch) {
                    const S* row = px + static_cast<int64_t>(ch) * h * w;
                    for (int64_t i = 0; i < rest; ++i) ps[i] += row[i];
                }
                const S inv = S(1) / static_cast<S>(c);
                for (int64_t i = 0; i < rest; ++i) ps[i] *= inv;
            } else if (axis == 2) {
                // rest index = ch*w + xw
                for (int ch = 0; ch < c; ++ch) {
                    S* dst = ps + static_cast<int64_t>(ch) * w;
                    std::fill(dst, dst + w, S(0));
                    for (int y = 0; y < h; ++y) {
                        const S* row = px + (static_cast<int64_t>(ch) * h + y) * w;
                        for (int xw = 0; xw < w; ++xw) dst[xw] += row[xw];
                    }
                    const S inv = S(1) / static_cast<S>(h);
                    for (int xw = 0; xw < w; ++xw) dst[xw] *= inv;
                }
            } else {
                // rest index = ch*h + y
                for (int ch = 0; ch < c; ++ch) {
                    for (int y = 0; y < h; ++y) {
                        const S* row = px + (static_cast<int64_t>(ch) * h + y) * w;
                        S acc = 0;
                        for (int xw = 0; xw < w; ++xw) acc += row[xw];
                        ps[static_cast<int64_t>(ch) * h + y] = acc / static_cast<S>(w);
                    }
                }
            }
            // in-place softmax
            S mx = ps[0];
            for (int64_t i = 1; i < rest; ++i) mx = std::max(mx, ps[i]);
            S sum = 0;
            for (int64_t i = 0; i < rest; ++i) {
                ps[i] = std::exp(ps[i] - mx);
                sum += ps[i];
            }
            const S isum = S(1) / sum;
            for (int64_t i = 0; i < rest; ++i) ps[i] *= isum;
            // weighted sum of the target-axis fibers
            std::fill(pc, pc + d, S(0));
            if (axis == 1) {
                for (int ch = 0; ch < c; ++ch) {
                    const S* row = px + static_cast<int64_t>(ch) * h * w;
                    S acc = 0;
                    for (int64_t i = 0; i < rest; ++i) acc += row[i] * ps[i];
                    pc[ch] = acc;
                }
            } else if (axis == 2) {
                for (int ch = 0; ch < c; ++ch) {
                    const S* sw = ps + static_cast<int64_t>(ch) * w;
                    for (int y = 0; y < h; ++y) {
                        const S* row = px + (static_cast<int64_t>(ch) * h + y) * w;
                        S acc = 0;
                        for (int xw = 0; xw < w; ++xw) acc += row[xw] * sw[xw];
                        pc[y] += acc;
                    }
                }
            } else {
                for (int ch = 0; ch < c; ++ch) {
                    for (int y = 0; y < h; ++y) {
                        const S* row = px + (static_cast<int64_t>(ch) * h + y) * w;
                        const S sv = ps[static_cast<int64_t>(ch) * h + y];
                        for (int xw = 0; xw < w; ++xw) pc[xw] += row[xw] * sv;
                    }
                }
            }
        }
    });

    auto node = make_node<S>("attention_pool", {b, d}, std::move(ctx), {x});
    if (node->requires_grad) {
        NodeT<S>* xp = x.get();
        node->backward_fn = [xp, soft, axis, b, c, h, w, d, rest, plane](NodeT<S>& self) {
            xp->ensure_grad();
            parallel_for(b, grain_for(4 * plane), [&](int64_t lo, int64_t hi) {
                std::vector<S> gsoft(static_cast<size_t>(rest));
                for (int64_t s = lo; s < hi; ++s) {
                    const S* px = xp->data.data() + s * plane;
                    const S* ps = soft->data() + s * rest;
                    const S* gc = self.grad.data() + s * d;
                    S* gx = xp->grad.data() + s * plane;
                    // ctx[dd] = sum_r fiber(dd,r) * soft[r]
                    // gx via the fiber term; gsoft gathers the weight term
                    std::fill(gsoft.begin(), gsoft.end(), S(0));
                    if (axis == 1) {
                        for (int ch = 0; ch < c; ++ch) {
                            const S g = gc[ch];
                            const S* row = px + static_cast<int64_t>(ch) * h * w;
                            S* grow = gx + static_cast<int64_t>(ch) * h * w;
                            for (int64_t i = 0; i < rest; ++i) {
                                grow[i] += g * ps[i];
                                gsoft[static_cast<size_t>(i)] += g * row[i];
                            }
                        }
                    } else if (axis == 2) {
                        for (int ch = 0; ch < c; ++ch) {
                            const S* sw = ps + static_cast<int64_t>(ch) * w;
                            S* gsw = gsoft.data() + static_cast<int64_t>(ch) * w;
                            for (int y = 0; y < h; ++y) {
                                const S g = gc[y];
                                const S* row = px + (static_cast<int64_t>(ch) * h + y) * w;
                                S* grow = gx + (static_cast<int64_t>(ch) * h + y) * w;
                                for (int xw = 0; xw < w; ++xw) {
                                    grow[xw] += g * sw[xw];
                                    gsw[xw] += g * row[xw];
                                }
                            }
                        }
                    } else {
                        for (int ch = 0; ch < c; ++ch) {
                            for (int y = 0; y < h; ++y) {
                                const S sv = ps[static_cast<int64_t>(ch) * h + y];
                                const S* row = px + (static_cast<int64_t>(ch) * h + y) * w;
                                S* grow = gx + (static_cast<int64_t>(ch) * h + y) * w;
                                S acc = 0;
                                for (int xw = 0; xw < w; ++xw) {
                                    grow[xw] += gc[xw] * sv;
                                    acc += gc[xw] * row[xw];
                                }
                                gsoft[static_cast<size_t>(ch) * h + y] += acc;
                            }
                        }
                    }
                    // softmax backward into the complement map, then the mean
                    S dot = 0;
                    for (int64_t i = 0; i < rest; ++i) dot += gsoft[static_cast<size_t>(i)] * ps[i];
                    // gm[r] = soft[r] * (gsoft[r] - dot); mean spreads gm/D over the target axis
                    if (axis == 1) {
                        const S inv = S(1) / static_cast<S>(c);
                        for (int ch = 0; ch < c; ++ch) {
                            S* grow = gx + static_cast<int64_t>(ch) * h * w;
                            for (int64_t i = 0; i < rest; ++i)
                                grow[i] += ps[i] * (gsoft[static_cast<size_t>(i)] - dot) * inv;
                        }
                    } else if (axis == 2) {
                        const S inv = S(1) / static_cast<S>(h);
                        for (int ch = 0; ch < c; ++ch) {
                            const S* gsw = gsoft.data() + static_cast<int64_t>(ch) * w;
                            const S* sw = ps + static_cast<int64_t>(ch) * w;
                            for (int y = 0; y < h; ++y) {
                                S* grow = gx + (static_cast<int64_t>(ch) * h + y) * w;
                                for (int xw = 0; xw < w; ++xw) grow[xw] += sw[xw] * (gsw[xw] - dot) * inv;
                            }
                        }
                    } else {
                        const S inv = S(1) / static_cast<S>(w);
                        for (int ch = 0; ch < c; ++ch) {
                            for (int y = 0; y < h; ++y) {
                                const S gm = ps[static_cast<int64_t>(ch) * h + y] *
                                             (gsoft[static_cast<size_t>(ch) * h + y] - dot) * inv;
                                S* grow = gx + (static_cast<int64_t>(ch) * h + y) * w;
                                for (int xw = 0; xw < w; ++xw) grow[xw] += gm;
                            }
                        }
                    }
                }
            });
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// backward

template <class S>
void backward(const ValueT<S>& root) {
    if (!root) throw ConfigError("backward: null root");
    if (root->size() != 1) throw ConfigError("backward: root must be scalar, got " + shape_str(root->shape));
    if (!root->requires_grad) throw ConfigError("backward: root does not require grad");

    // iterative post-order DFS -> producers before consumers
    std::vector<NodeT<S>*> order;
    std::unordered_set<NodeT<S>*> visited;
    std::vector<std::pair<NodeT<S>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            NodeT<S>* p = node->parents[child].get();
            ++child;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = S(1);
    const bool profile = std::getenv("RRL_PROFILE_BACKWARD") != nullptr;
    std::map<std::string, double>* prof = nullptr;
    if (profile) {
        static std::map<std::string, double> totals;
        prof = &totals;
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<S>* node = *it;
        if (node->backward_fn && !node->grad.empty()) {
            if (prof) {
                auto t0 = std::chrono::steady_clock::now();
                node->backward_fn(*node);
                (*prof)[node->op] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            } else {
                node->backward_fn(*node);
            }
        }
        if (!node->is_leaf && node != root.get()) {
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
    if (prof) {
        std::fprintf(stderr, "backward profile (cumulative):\n");
        for (const auto& [name, secs] : *prof) std::fprintf(stderr, "  %-18s %.3fs\n", name.c_str(), secs);
    }
}

// ---------------------------------------------------------------------------
// explicit instantiations

#define RRL_INSTANTIATE_OPS(S)                                                                              \
    template void check_finite<S>(const char*, const std::vector<S>&);                                      \
    template ValueT<S> make_leaf<S>(Shape, std::vector<S>, bool);                                           \
    template ValueT<S> constant<S>(Shape, std::vector<S>);                                                  \
    template ValueT<S> zeros<S>(Shape, bool);                                                               \
    template ValueT<S> full<S>(Shape, S);                                                                   \
    template ValueT<S> conv2d<S>(const ValueT<S>&, const ValueT<S>&, const ValueT<S>&, int, int);           \
    template ValueT<S> conv1d_same<S>(const ValueT<S>&, const ValueT<S>&, const ValueT<S>&);                \
    template ValueT<S> fully_connected<S>(const ValueT<S>&, const ValueT<S>&, const ValueT<S>&);            \
    template ValueT<S> relu<S>(const ValueT<S>&);                                                           \
    template ValueT<S> sigmoid<S>(const ValueT<S>&);                                                        \
    template ValueT<S> sqrt_op<S>(const ValueT<S>&);                                                        \
    template ValueT<S> square<S>(const ValueT<S>&);                                                         \
    template ValueT<S> log_op<S>(const ValueT<S>&);                                                         \
    template ValueT<S> affine<S>(const ValueT<S>&, S, S);                                                   \
    template ValueT<S> clamp<S>(const ValueT<S>&, S, S);                                                    \
    template ValueT<S> softmax<S>(const ValueT<S>&);                                                        \
    template ValueT<S> batch_norm<S>(const ValueT<S>&, const ValueT<S>&, const ValueT<S>&, BnStats<S>&,     \
                                     bool, S, S);                                                           \
    template ValueT<S> max_pool_2x2<S>(const ValueT<S>&);                                                   \
    template ValueT<S> upsample_nearest_2x<S>(const ValueT<S>&);                                            \
    template ValueT<S> mean_axes<S>(const ValueT<S>&, std::vector<int>);                                    \
    template ValueT<S> mean_over_axis<S>(const ValueT<S>&, int);                                            \
    template ValueT<S> global_avg_pool<S>(const ValueT<S>&, std::vector<int>);                              \
    template ValueT<S> mean_all<S>(const ValueT<S>&);                                                       \
    template ValueT<S> add<S>(const ValueT<S>&, const ValueT<S>&);                                          \
    template ValueT<S> sub<S>(const ValueT<S>&, const ValueT<S>&);                                          \
    template ValueT<S> mul<S>(const ValueT<S>&, const ValueT<S>&);                                          \
    template ValueT<S> add_n<S>(const std::vector<ValueT<S>>&);                                             \
    template ValueT<S> matmul<S>(const ValueT<S>&, const ValueT<S>&);                                       \
    template ValueT<S> reshape<S>(const ValueT<S>&, Shape);                                                 \
    template ValueT<S> transpose<S>(const ValueT<S>&, std::vector<int>);                                    \
    template ValueT<S> concat<S>(const std::vector<ValueT<S>>&, int);                                       \
    template ValueT<S> slice0<S>(const ValueT<S>&, int, int);                                               \
    template ValueT<S> interleave0<S>(const ValueT<S>&, const ValueT<S>&);                                  \
    template ValueT<S> stride0<S>(const ValueT<S>&, int);                                                   \
    template ValueT<S> attention_pool_op<S>(const ValueT<S>&, int);                                         \
    template void backward<S>(const ValueT<S>&);

RRL_INSTANTIATE_OPS(float)
RRL_INSTANTIATE_OPS(double)

}  // namespace rrl
