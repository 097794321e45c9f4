#pragma once

#include <cstdint>
#include <vector>

#include "backchain/model/params.hpp"

namespace backchain::model {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.01;
    double epsilon = 1e-8;
};

// Flat first/second moments in tensor-directory order.
template <typename S>
struct OptimStateT {
    int64_t step = 0;
    std::vector<S> m, v;

    static OptimStateT zero_for(const ParametersT<S>& params) {
        OptimStateT s;
        s.m.assign(params.parameter_count(), S(0));
        s.v.assign(params.parameter_count(), S(0));
        return s;
    }
};

using OptimState = OptimStateT<float>;

// Decoupled weight decay with bias correction:
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
template <typename S>
void adamw_step(ParametersT<S>& params, const ParametersT<S>& grads, OptimStateT<S>& state,
                const AdamWConfig& config);

extern template void adamw_step<float>(ParametersT<float>&, const ParametersT<float>&,
                                       OptimStateT<float>&, const AdamWConfig&);
extern template void adamw_step<double>(ParametersT<double>&, const ParametersT<double>&,
                                        OptimStateT<double>&, const AdamWConfig&);

}  // namespace backchain::model
