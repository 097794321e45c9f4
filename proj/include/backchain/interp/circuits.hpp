#pragma once

#include <vector>

#include "backchain/model/forward.hpp"

namespace backchain::interp {

// Weight-product circuit matrices. Exact only without normalization; pass
// approximate=true to compute them anyway under pre-ln.

// Positional QK composition of the first layer: W_P W_QK^0 W_P^T.
Mat<float> qk_circuit_m0(const model::Parameters& params, bool approximate = false);

// Token-level QK interaction of the second layer restricted to node tokens:
// (MLP^0(E W_OV^0) + E W_OV^0) W_QK^1 E^T.
Mat<float> qk_circuit_m1(const model::Parameters& params, bool approximate = false);

// Subgoal-selection matrix: W_P W_QK^0 W_E^T (position query vs token key).
Mat<float> subgoal_matrix_rp(const model::Parameters& params, bool approximate = false);

struct DlaTable {
    int query_position = 0;
    std::vector<int> layers;
    // One block of `length` rows per requested layer: contribution of each
    // key position to the final-position logits through that layer's head.
    int length = 0;
    Mat<float> contributions;           // (layers * length) x vocab
    std::vector<std::vector<float>> head_totals;  // per layer: vocab

    const float* row(int layer_index, int key_position) const {
        return contributions.row(layer_index * length + key_position);
    }
};

// Attention-weighted value-path contribution of every source position to
// the logits at `query_position`, through the selected layers' heads.
DlaTable direct_logit_attribution(const model::Parameters& params,
                                  const model::ActivationCache& cache, std::vector<int> layers,
                                  int query_position);

}  // namespace backchain::interp
