#include "rrl/loss.hpp"

#include <algorithm>
#include <cmath>

namespace rrl {

namespace {
constexpr double kScoreClamp = 1e-7;
}

double bce(double y_hat, int y) {
    if (y != 0 && y != 1) throw ConfigError("bce: label must be 0 or 1");
    const double s = std::min(1.0 - kScoreClamp, std::max(kScoreClamp, y_hat));
    return -(y * std::log(s) + (1 - y) * std::log(1.0 - s));
}

double total_loss(double metric, double recon1, double recon2, const LossWeights& w) {
    return metric + w.alpha * (recon1 + recon2);
}

template <class S>
ValueT<S> bce_mean(const ValueT<S>& scores, const ValueT<S>& labels) {
    if (scores->shape != labels->shape)
        throw ConfigError("bce_mean: scores " + shape_str(scores->shape) + " vs labels " + shape_str(labels->shape));
    for (S v : labels->data)
        if (v != S(0) && v != S(1)) throw ConfigError("bce_mean: labels must be 0 or 1");
    auto s = clamp(scores, static_cast<S>(kScoreClamp), static_cast<S>(1.0 - kScoreClamp));
    auto pos = mul(labels, log_op(s));
    auto neg = mul(affine(labels, S(-1), S(1)), log_op(affine(s, S(-1), S(1))));
    return affine(mean_all(add(pos, neg)), S(-1), S(0));
}

template <class S>
ValueT<S> rmse_batch_mean(const ValueT<S>& x, const ValueT<S>& y) {
    if (x->shape != y->shape)
        throw ConfigError("rmse: shape mismatch " + shape_str(x->shape) + " vs " + shape_str(y->shape));
    if (x->shape.empty()) throw ConfigError("rmse: rank-0 input");
    std::vector<int> inner_axes;
    for (int d = 1; d < static_cast<int>(x->shape.size()); ++d) inner_axes.push_back(d);
    auto sq = square(sub(x, y));
    auto per_sample = inner_axes.empty() ? sq : mean_axes(sq, inner_axes);  // [B]
    return mean_all(sqrt_op(per_sample));
}

template <class S>
ValueT<S> perceptual_forward(const PerceptualT<S>& p, const ValueT<S>& img) {
    if (!p.present()) throw ConfigError("perceptual_forward: network not constructed");
    auto h1 = relu(conv2d(img, p.w1, p.b1, 2, 1));
    auto h2 = relu(conv2d(h1, p.w2, p.b2, 1, 1));
    return relu(conv2d(h2, p.w3, p.b3, 2, 1));
}

template <class S>
ValueT<S> reconstruction_loss(const ValueT<S>& recon, const ValueT<S>& orig,
                              const std::function<ValueT<S>(const ValueT<S>&)>& phi, double beta) {
    if (recon->shape != orig->shape)
        throw ConfigError("reconstruction_loss: shape mismatch " + shape_str(recon->shape) + " vs " +
                          shape_str(orig->shape));
    auto feat = rmse_batch_mean(phi(recon), phi(orig));
    auto pix = rmse_batch_mean(recon, orig);
    return add(feat, affine(pix, static_cast<S>(beta), S(0)));
}

template <class S>
ValueT<S> metric_loss(const std::vector<ValueT<S>>& module_scores, const std::vector<ValueT<S>>& stage_scores,
                      const ValueT<S>& labels, const LossWeights& w) {
    w.validate();
    const size_t want_modules = static_cast<size_t>(5 - w.a + 1);
    const size_t want_stages = static_cast<size_t>(5 - w.b + 1);
    if (!module_scores.empty() && module_scores.size() != want_modules)
        throw ConfigError("metric_loss: expected " + std::to_string(want_modules) + " module scores, got " +
                          std::to_string(module_scores.size()));
    if (stage_scores.size() != want_stages)
        throw ConfigError("metric_loss: expected " + std::to_string(want_stages) + " stage scores, got " +
                          std::to_string(stage_scores.size()));
    std::vector<ValueT<S>> terms;
    for (const auto& s : module_scores) terms.push_back(bce_mean(s, labels));
    for (const auto& s : stage_scores) terms.push_back(bce_mean(s, labels));
    return add_n(terms);
}

#define RRL_INSTANTIATE_LOSS(S)                                                                             \
    template ValueT<S> bce_mean<S>(const ValueT<S>&, const ValueT<S>&);                                     \
    template ValueT<S> rmse_batch_mean<S>(const ValueT<S>&, const ValueT<S>&);                              \
    template ValueT<S> perceptual_forward<S>(const PerceptualT<S>&, const ValueT<S>&);                      \
    template ValueT<S> reconstruction_loss<S>(const ValueT<S>&, const ValueT<S>&,                           \
                                              const std::function<ValueT<S>(const ValueT<S>&)>&, double);   \
    template ValueT<S> metric_loss<S>(const std::vector<ValueT<S>>&, const std::vector<ValueT<S>>&,         \
                                      const ValueT<S>&, const LossWeights&);

RRL_INSTANTIATE_LOSS(float)
RRL_INSTANTIATE_LOSS(double)

}  // namespace rrl
