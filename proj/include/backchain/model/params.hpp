#pragma once

#include <functional>
#include <string>
#include <vector>

#include "backchain/matrix.hpp"
#include "backchain/model/config.hpp"
#include "backchain/rng.hpp"

namespace backchain::model {

template <typename S>
struct LayerParamsT {
    Mat<S> w_q, w_k, w_v, w_o;          // d x d
    std::vector<S> b_q, b_k, b_v, b_o;  // d
    Mat<S> w_in;                        // d x ff
    Mat<S> w_out;                       // ff x d
    std::vector<S> b_in, b_out;
    std::vector<S> ln1_g, ln1_b, ln2_g, ln2_b;  // pre-ln only
};

// A named view used to iterate every learned tensor in a fixed order
// (optimizer, checkpointing, gradient checking all share it).
template <typename S>
struct TensorRef {
    std::string name;
    S* data;
    size_t size;
    std::vector<int> shape;
};

template <typename S>
struct ParametersT {
    ModelConfig config;
    Mat<S> w_embed;    // vocab x d
    Mat<S> w_pos;      // context x d
    std::vector<LayerParamsT<S>> layers;
    Mat<S> w_unembed;  // d x vocab
    std::vector<S> lnf_g, lnf_b;  // final norm, pre-ln only

    std::vector<TensorRef<S>> tensors();
    std::vector<TensorRef<const S>> tensors() const;
    size_t parameter_count() const;

    template <typename T>
    ParametersT<T> cast() const;
};

using Parameters = ParametersT<float>;

// Weights ~ Normal(0, init_scale^2), biases zero, norm gains one.
template <typename S>
ParametersT<S> init_params(const ModelConfig& config, Rng& rng);

// Zero-filled gradient holder shaped like `params`.
template <typename S>
ParametersT<S> zeros_like(const ParametersT<S>& params);

// Checkpoint: one-line JSON header {config, seed, step, tensor directory
// with name/shape/offset/dtype} followed by raw little-endian f32 payload
// in directory order. Round-trips bit-exactly.
void save_checkpoint(const Parameters& params, int64_t step, const std::string& path);
struct Checkpoint {
    Parameters params;
    int64_t step = 0;
};
Checkpoint load_checkpoint(const std::string& path);

extern template struct ParametersT<float>;
extern template struct ParametersT<double>;
extern template ParametersT<float> init_params<float>(const ModelConfig&, Rng&);
extern template ParametersT<double> init_params<double>(const ModelConfig&, Rng&);
extern template ParametersT<float> zeros_like<float>(const ParametersT<float>&);
extern template ParametersT<double> zeros_like<double>(const ParametersT<double>&);
extern template ParametersT<double> ParametersT<float>::cast<double>() const;
extern template ParametersT<float> ParametersT<double>::cast<float>() const;

}  // namespace backchain::model
