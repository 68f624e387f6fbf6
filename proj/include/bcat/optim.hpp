#pragma once

// SGD with momentum and AdamW over a flat parameter list (canonical
// parameter order). Buffers mirror parameter shapes exactly.

#include "bcat/tensor.hpp"

namespace bcat {

struct OptimizerState {
    std::vector<Tensor> m;  // momentum / first moment
    std::vector<Tensor> v;  // second moment (AdamW only)
    int64_t step = 0;
};

inline OptimizerState init_optimizer_state(const std::vector<Tensor*>& params, bool second_moment) {
    OptimizerState s;
    for (const Tensor* p : params) {
        s.m.emplace_back(p->shape);
        if (second_moment) s.v.emplace_back(p->shape);
    }
    return s;
}

namespace detail {
inline void check_step_shapes(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                              const OptimizerState& state, const char* op) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument(std::string(op) + ": parameter/gradient/state counts disagree");
    for (size_t i = 0; i < params.size(); ++i)
        if (params[i]->shape != grads[i]->shape || params[i]->shape != state.m[i].shape)
            throw std::invalid_argument(std::string(op) + ": shape mismatch at parameter " + std::to_string(i) +
                                        ": " + shape_str(params[i]->shape) + " vs " + shape_str(grads[i]->shape));
}
}  // namespace detail

// g' = g + wd*theta; v <- momentum*v + g'; theta <- theta - lr*v.
inline void sgd_momentum_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                              OptimizerState& state, double lr, double momentum, double weight_decay) {
    detail::check_step_shapes(params, grads, state, "sgd_momentum");
    for (size_t i = 0; i < params.size(); ++i) {
        auto& theta = params[i]->data;
        const auto& g = grads[i]->data;
        auto& vel = state.m[i].data;
        for (size_t j = 0; j < theta.size(); ++j) {
            const double gj = g[j] + weight_decay * theta[j];
            vel[j] = momentum * vel[j] + gj;
            theta[j] -= lr * vel[j];
        }
    }
    state.step++;
}

// Decoupled weight decay (theta -= lr*wd*theta) followed by the
// bias-corrected Adam update.
inline void adamw_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                       OptimizerState& state, double lr, double beta1, double beta2, double eps, double weight_decay) {
    detail::check_step_shapes(params, grads, state, "adamw");
    if (state.v.size() != params.size()) throw std::invalid_argument("adamw: second-moment buffers missing");
    state.step++;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& theta = params[i]->data;
        const auto& g = grads[i]->data;
        auto& m = state.m[i].data;
        auto& v = state.v[i].data;
        for (size_t j = 0; j < theta.size(); ++j) {
            theta[j] -= lr * weight_decay * theta[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            theta[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

}  // namespace bcat
