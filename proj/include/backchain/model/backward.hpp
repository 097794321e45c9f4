#pragma once

#include <vector>

#include "backchain/model/params.hpp"

namespace backchain::model {

// Fixed-width token batch (every sequence padded to the same length).
struct Batch {
    int batch = 0;
    int length = 0;
    std::vector<int> tokens;    // batch * length
    std::vector<uint8_t> mask;  // batch * length; true = position predicts next token

    int token_at(int b, int p) const { return tokens[static_cast<size_t>(b) * length + p]; }
    bool masked(int b, int p) const { return mask[static_cast<size_t>(b) * length + p] != 0; }
};

// Training workspace: everything the backward pass reads. batch_backward
// requires a batch_forward call on the same batch immediately before.
template <typename S>
struct TrainState {
    struct Layer {
        Mat<S> x_in;        // stream entering the block
        Mat<S> attn_input;  // ln1(x_in) under pre-ln, else x_in copy
        std::vector<S> ln1_mean, ln1_rstd;
        Mat<S> q, k, v;
        std::vector<Mat<S>> pattern;  // per example, length x length
        Mat<S> z;                     // pattern * v
        Mat<S> x_mid;
        Mat<S> mlp_input;
        std::vector<S> ln2_mean, ln2_rstd;
        Mat<S> h;  // pre-activation
        Mat<S> g;  // gelu(h)
    };
    std::vector<Layer> layers;
    Mat<S> x0;
    Mat<S> x_final;   // stream after the last block
    Mat<S> lnf_out;   // pre-ln only
    std::vector<S> lnf_mean, lnf_rstd;
    Mat<S> logits;
    Mat<S> dlogits;   // d(mean loss)/d(logits), filled during forward
    int mask_count = 0;
};

// Returns the mean masked next-token cross-entropy (nats). Throws
// NumericError on a non-finite intermediate, naming layer and site.
template <typename S>
double batch_forward(const ParametersT<S>& params, const Batch& batch, TrainState<S>& ws);

// Fills `grads` (overwrites) with d(mean batch loss)/d(params).
template <typename S>
void batch_backward(const ParametersT<S>& params, const Batch& batch, TrainState<S>& ws,
                    ParametersT<S>& grads);

extern template double batch_forward<float>(const ParametersT<float>&, const Batch&,
                                            TrainState<float>&);
extern template double batch_forward<double>(const ParametersT<double>&, const Batch&,
                                             TrainState<double>&);
extern template void batch_backward<float>(const ParametersT<float>&, const Batch&,
                                           TrainState<float>&, ParametersT<float>&);
extern template void batch_backward<double>(const ParametersT<double>&, const Batch&,
                                            TrainState<double>&, ParametersT<double>&);

}  // namespace backchain::model
