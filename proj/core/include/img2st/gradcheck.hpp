#pragma once

#include <functional>
#include <vector>

#include "img2st/tensor.hpp"

namespace img2st {

struct GradCheckOptions {
    int stencil_order = 2;  // 2 or 4-point central difference
    int threads = 1;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_elem = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// The closure may compute in any precision; returning long double lets the
// finite-difference quotient keep extended-precision residuals.
using ScalarClosure = std::function<long double(const std::vector<TensorD>&)>;

// Central finite differences of `closure` at `params`, compared against the
// caller-supplied analytic gradients. Relative error per element is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); the max over all
// elements is reported. Throws if the closure returns a non-finite value or
// epsilon <= 0.
GradCheckReport gradcheck(const ScalarClosure& closure, const std::vector<TensorD>& params,
                          const std::vector<TensorD>& analytic_grads, double epsilon,
                          const GradCheckOptions& opts = {});

// One probing pass compared against several analytic gradient sets (e.g. the
// f32 and f64 backward paths of the same model).
std::vector<GradCheckReport> gradcheck_multi(const ScalarClosure& closure,
                                             const std::vector<TensorD>& params,
                                             const std::vector<const std::vector<TensorD>*>& analytic_sets,
                                             double epsilon, const GradCheckOptions& opts = {});

}  // namespace img2st
