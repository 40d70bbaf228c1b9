#pragma once
// Finite-difference gradient verification. Always runs in double precision
// regardless of the training scalar type.

#include <functional>
#include <vector>

#include "rrl/tensor.hpp"

namespace rrl {

// Rebuilds the graph from the given leaves and returns a scalar root.
using GradCheckFn = std::function<ValueT<double>(const std::vector<ValueT<double>>&)>;

// Central differences against the analytic backward pass, checking every
// element of every leaf that requires grad. Returns the max over elements of
// |analytic - numeric| / max(1, |numeric|). If the error exceeds tol the
// point is jittered and the check retried (non-differentiable points such as
// relu at exactly 0); throws NumericError after 3 failed attempts.
double grad_check(const GradCheckFn& fn, std::vector<ValueT<double>> point, double eps = 1e-4,
                  double tol = 1e-5);

}  // namespace rrl
