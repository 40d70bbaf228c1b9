#include "rrl/gradcheck.hpp"

#include <cmath>

#include "rrl/common.hpp"

namespace rrl {

namespace {

double run_once(const GradCheckFn& fn, std::vector<ValueT<double>>& point, double eps) {
    for (auto& leaf : point) leaf->zero_grad();
    auto root = fn(point);
    if (root->size() != 1) throw ConfigError("grad_check: fn must return a scalar");
    backward(root);

    double max_err = 0.0;
    for (auto& leaf : point) {
        if (!leaf->requires_grad) continue;
        if (leaf->grad.empty()) leaf->ensure_grad();
        for (size_t i = 0; i < leaf->data.size(); ++i) {
            const double saved = leaf->data[i];
            leaf->data[i] = saved + eps;
            const double up = fn(point)->data[0];
            leaf->data[i] = saved - eps;
            const double dn = fn(point)->data[0];
            leaf->data[i] = saved;
            const double numeric = (up - dn) / (2.0 * eps);
            const double analytic = leaf->grad[i];
            const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
            if (err > max_err) max_err = err;
        }
    }
    return max_err;
}

}  // namespace

double grad_check(const GradCheckFn& fn, std::vector<ValueT<double>> point, double eps, double tol) {
    Rng jitter(0x9d5ec7a1b3f8402dull);
    double err = 0.0;
    for (int attempt = 0; attempt < 3; ++attempt) {
        err = run_once(fn, point, eps);
        if (err <= tol) return err;
        // move off a potential kink and try again
        for (auto& leaf : point) {
            if (!leaf->requires_grad) continue;
            for (auto& v : leaf->data) v += jitter.uniform(-10.0 * eps, 10.0 * eps);
        }
    }
    throw NumericError("grad_check: max relative error " + std::to_string(err) + " exceeds tolerance after 3 attempts");
}

}  // namespace rrl
