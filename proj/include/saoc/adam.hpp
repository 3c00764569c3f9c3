#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "saoc/errors.hpp"
#include "saoc/tensor.hpp"

namespace saoc {

// Bias-corrected Adam. Moment buffers are indexed by parameter order, so the
// caller must pass the same parameter list (same order, same shapes) on every
// step; deviations are rejected.
class AdamState {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    int64_t step_count() const { return t_; }

    void step(const std::vector<Tensor*>& params, double lr) {
        if (lr <= 0.0) throw ContractError("adam: learning rate must be positive");
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(static_cast<size_t>(params[i]->numel()), 0.0);
                v_[i].assign(static_cast<size_t>(params[i]->numel()), 0.0);
            }
        }
        if (params.size() != m_.size())
            throw DimensionError("adam: parameter count changed between steps");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            auto& g = p.grad();
            if (g.size() != m_[i].size())
                throw DimensionError("adam: shape of parameter " + std::to_string(i) +
                                     " changed between steps");
            auto& m = m_[i];
            auto& v = v_[i];
            double* pd = p.data();
            for (size_t j = 0; j < g.size(); ++j) {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                pd[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

private:
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

}  // namespace saoc
