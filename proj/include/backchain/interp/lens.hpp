#pragma once

#include <vector>

#include "backchain/interp/probes.hpp"
#include "backchain/model/forward.hpp"
#include "backchain/task.hpp"

namespace backchain::interp {

// Linear readout from x^{L-n} trained with the model's masked next-token
// objective; skipping n=0 layers reduces to the unembedding itself.
struct SkipLens {
    int skipped_layers = 0;  // n
    int source_layer = 0;    // L - n
    LogRegModel map;         // d_model -> vocab

    static SkipLens identity(const model::Parameters& params);  // n = 0
};

struct SkipLensReport {
    int skipped_layers = 0;
    double train_loss = 0;   // mean CE of the lens on its training examples
    bool converged = true;
};

SkipLens train_skip_lens(const model::Parameters& params,
                         const std::vector<task::TaskInstance>& dataset, int n,
                         const LogRegOptions& options, SkipLensReport* report = nullptr);

// Lens logits for every position of a cached run.
Mat<float> apply_skip_lens(const SkipLens& lens, const model::ActivationCache& cache);

// Per-layer argmax node prediction at one position (tree-projection views).
std::vector<int> lens_layer_argmax(const std::vector<SkipLens>& lenses,
                                   const model::ActivationCache& cache, int position);

}  // namespace backchain::interp
