#include "backchain/model/optim.hpp"

#include <cmath>

#include "backchain/errors.hpp"
#include "backchain/threading.hpp"

namespace backchain::model {

template <typename S>
void adamw_step(ParametersT<S>& params, const ParametersT<S>& grads, OptimStateT<S>& state,
                const AdamWConfig& config) {
    auto p_tensors = params.tensors();
    auto g_tensors = grads.tensors();
    if (p_tensors.size() != g_tensors.size()) throw InvalidArgument("gradient shape mismatch");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    const S beta1 = static_cast<S>(config.beta1), beta2 = static_cast<S>(config.beta2);
    const S lr = static_cast<S>(config.lr);
    const S wd = static_cast<S>(config.weight_decay);
    const S eps = static_cast<S>(config.epsilon);
    const S inv_bc1 = static_cast<S>(1.0 / bc1), inv_bc2 = static_cast<S>(1.0 / bc2);

    size_t offset = 0;
    for (size_t t = 0; t < p_tensors.size(); ++t) {
        if (p_tensors[t].size != g_tensors[t].size) throw InvalidArgument("gradient shape mismatch");
        S* __restrict__ w = p_tensors[t].data;
        const S* __restrict__ g = g_tensors[t].data;
        S* __restrict__ m = state.m.data() + offset;
        S* __restrict__ v = state.v.data() + offset;
        const size_t n = p_tensors[t].size;
        parallel_for(n, [&](size_t lo, size_t hi) {
            for (size_t i = lo; i < hi; ++i) {
                m[i] = beta1 * m[i] + (S(1) - beta1) * g[i];
                v[i] = beta2 * v[i] + (S(1) - beta2) * g[i] * g[i];
                const S m_hat = m[i] * inv_bc1;
                const S v_hat = v[i] * inv_bc2;
                w[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * w[i]);
            }
        });
        offset += n;
    }
    if (offset != state.m.size()) throw InvalidArgument("optimizer state size mismatch");
}

template void adamw_step<float>(ParametersT<float>&, const ParametersT<float>&,
                                OptimStateT<float>&, const AdamWConfig&);
template void adamw_step<double>(ParametersT<double>&, const ParametersT<double>&,
                                 OptimStateT<double>&, const AdamWConfig&);

}  // namespace backchain::model
