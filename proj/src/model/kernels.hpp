#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>

namespace backchain::model {

constexpr double kLnEps = 1e-5;

// Cephes-style expf: range reduction to 2^n * e^r plus a degree-5
// polynomial; relative error ~1e-7, branch-free and vectorizable.
inline float fast_expf(float x) {
    if (x < -87.0f) return 0.0f;  // flush to zero; exact for -inf score masks
    x = std::min(88.0f, x);
    const float z = x * 1.44269504088896341f;
    const float n = std::floor(z + 0.5f);
    float r = x - n * 0.693359375f;
    r -= n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    float y = r * r * p + r + 1.0f;
    int32_t bits;
    std::memcpy(&bits, &y, 4);
    bits += static_cast<int32_t>(n) << 23;
    std::memcpy(&y, &bits, 4);
    return y;
}

// Abramowitz-Stegun 7.1.26; absolute error <= 1.5e-7.
inline float fast_erff(float x) {
    const float ax = std::abs(x);
    const float t = 1.0f / (1.0f + 0.3275911f * ax);
    float poly = 1.061405429f;
    poly = poly * t - 1.453152027f;
    poly = poly * t + 1.421413741f;
    poly = poly * t - 0.284496736f;
    poly = poly * t + 0.254829592f;
    poly *= t;
    const float r = 1.0f - poly * fast_expf(-ax * ax);
    return x < 0 ? -r : r;
}

template <typename S>
inline S erf_of(S x) {
    return std::erf(x);
}
template <>
inline float erf_of<float>(float x) {
    return fast_erff(x);
}

template <typename S>
inline S exp_of(S x) {
    return std::exp(x);
}
template <>
inline float exp_of<float>(float x) {
    return fast_expf(x);
}

template <typename S>
inline S gelu(S x) {
    return S(0.5) * x * (S(1) + erf_of(x * S(0.7071067811865476)));
}

// d/dx gelu = Phi(x) + x * phi(x).
template <typename S>
inline S gelu_grad(S x) {
    const S phi = exp_of(S(-0.5) * x * x) * S(0.3989422804014327);
    return S(0.5) * (S(1) + erf_of(x * S(0.7071067811865476))) + x * phi;
}

// y = (x - mean) / sqrt(var + eps) * g + b; saves mean and rstd for backward.
template <typename S>
inline void layer_norm_row(const S* x, S* y, const S* g, const S* b, int d, S* save_mean,
                           S* save_rstd) {
    S mean = S(0);
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<S>(d);
    S var = S(0);
    for (int i = 0; i < d; ++i) {
        const S c = x[i] - mean;
        var += c * c;
    }
    var /= static_cast<S>(d);
    const S rstd = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    for (int i = 0; i < d; ++i) y[i] = (x[i] - mean) * rstd * g[i] + b[i];
    if (save_mean) *save_mean = mean;
    if (save_rstd) *save_rstd = rstd;
}

}  // namespace backchain::model
