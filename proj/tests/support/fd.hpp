#pragma once

// Central finite-difference oracle for gradient checks. Lives in test code
// only and never touches tape internals: it re-runs the forward pass with
// perturbed parameter entries.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "saoc/tensor.hpp"

namespace saoc::test {

// forward: recomputes the scalar loss from the current parameter values.
// backward: zeroes grads, runs forward + backward once, leaves grads set.
// Returns the max relative error over all parameter entries.
inline double fd_max_rel_err(const std::vector<Tensor*>& params,
                             const std::function<double()>& forward,
                             const std::function<void()>& backward, double h = 1e-5) {
    backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) analytic.push_back(p->grad());

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        for (int64_t j = 0; j < p.numel(); ++j) {
            const double saved = p[j];
            p[j] = saved + h;
            const double up = forward();
            p[j] = saved - h;
            const double dn = forward();
            p[j] = saved;
            const double fd = (up - dn) / (2.0 * h);
            const double an = analytic[pi][static_cast<size_t>(j)];
            const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-3});
            worst = std::max(worst, std::fabs(fd - an) / denom);
        }
    }
    return worst;
}

}  // namespace saoc::test
