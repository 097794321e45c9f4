#pragma once

#include <cstdint>
#include <string>

#include "backchain/errors.hpp"

namespace backchain::model {

enum class Norm { None, PreLn };

std::string to_string(Norm norm);
Norm norm_from_string(const std::string& s);

// Architecture hyperparameters. Defaults are the full-scale configuration
// (6 layers, d=128, ff=512, vocab 35, context 63, one head per layer).
struct ModelConfig {
    int layers = 6;
    int heads = 1;
    int d_model = 128;
    int d_ff = 512;
    int vocab = 35;
    int context = 63;
    Norm norm = Norm::None;
    double init_scale = 0.02;
    uint64_t seed = 0;

    int head_dim() const { return d_model / heads; }

    void validate() const {
        if (layers < 1 || d_model < 1 || d_ff < 1 || vocab < 2 || context < 1)
            throw InvalidArgument("model dimensions must be positive");
        if (heads != 1) throw InvalidArgument("only one attention head per layer is supported");
        if (head_dim() * heads != d_model) throw InvalidArgument("heads must divide d_model");
    }

    // Convenience for a given task size: vocab 2n+3, context 4n-1.
    static ModelConfig for_task(int n_nodes, int layers, int d_model, int d_ff);
};

}  // namespace backchain::model
