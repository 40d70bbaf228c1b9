#pragma once
// Loss assembly: clamped binary cross-entropy for every metric head, the
// perceptual + pixel reconstruction penalty, and the total-loss combination.

#include <functional>

#include "rrl/model.hpp"

namespace rrl {

struct LossWeights {
    double alpha = 1.0;
    double beta = 0.1;
    int a = 3;  // first stage with a module head
    int b = 3;  // first stage with a stage head
    void validate() const {
        if (alpha <= 0 || beta <= 0) throw ConfigError("loss weights: alpha and beta must be positive");
        if (a < 1 || a > 5 || b < 1 || b > 5) throw ConfigError("loss weights: a and b must lie in 1..5");
    }
};

inline LossWeights loss_weights(const ModelConfig& cfg) {
    return LossWeights{cfg.alpha, cfg.beta, cfg.a, cfg.b};
}

// scalar forms
double bce(double y_hat, int y);  // clamps y_hat to [1e-7, 1-1e-7]
double total_loss(double metric, double recon1, double recon2, const LossWeights& w);

struct LossReport {
    double total = 0;
    double metric = 0;
    std::array<double, 2> recon{0, 0};
    std::map<std::string, double> per_head;
};

// graph forms
// scores, labels: [B]; mean of -[y log s + (1-y) log (1-s)] over the batch
template <class S>
ValueT<S> bce_mean(const ValueT<S>& scores, const ValueT<S>& labels);

// mean over the batch of per-sample root-mean-square error
template <class S>
ValueT<S> rmse_batch_mean(const ValueT<S>& x, const ValueT<S>& y);

template <class S>
ValueT<S> perceptual_forward(const PerceptualT<S>& p, const ValueT<S>& img);

// RMSE(phi(recon), phi(orig)) + beta * RMSE(recon, orig); phi is injectable
// so tests can substitute the identity map
template <class S>
ValueT<S> reconstruction_loss(const ValueT<S>& recon, const ValueT<S>& orig,
                              const std::function<ValueT<S>(const ValueT<S>&)>& phi, double beta);

// sum over module heads a..5 and stage heads b..5 of the per-head BCE.
// module_scores may be empty (interaction disabled); otherwise it must hold
// exactly 5-a+1 entries, and stage_scores exactly 5-b+1.
template <class S>
ValueT<S> metric_loss(const std::vector<ValueT<S>>& module_scores, const std::vector<ValueT<S>>& stage_scores,
                      const ValueT<S>& labels, const LossWeights& w);

}  // namespace rrl
