#pragma once

#include <optional>
#include <vector>

#include "backchain/model/forward.hpp"
#include "backchain/task.hpp"

namespace backchain::interp {

// Eq-3 recovery: (L_scrubbed - L_random) / (L_model - L_random).
double loss_recovered(double l_scrubbed, double l_random, double l_model);

// Per-layer equivalence key: the node l-1 edges above the goal (the layer-l
// head's hypothesized output); chains shorter than l-1 key on "above root".
std::optional<int> scrub_key(const task::Tree& tree, int goal, int layer);

struct ScrubHypothesis {
    int donor_budget = 10000;          // draws per instance and layer
    bool lookahead_constraints = false;  // keep target/register contributions
                                         // through the last two layers' heads
    double register_threshold = 0.3;
    uint64_t seed = 0;
};

struct ScrubRow {
    int depth = 0;  // true path length in edges
    double l_model = 0;
    double l_scrubbed = 0;
    double l_random = 0;
    double l_cs = 0;
    int count = 0;
    int skipped = 0;  // no donor found within budget
};

struct ScrubResult {
    std::vector<ScrubRow> rows;
    double overall_l_cs = 0;
    int total = 0;
    int skipped = 0;
};

// Replaces each layer's attention output at the first prediction position
// with a donor sharing that layer's equivalence key; scores the loss of the
// first path step, grouped by true path length.
ScrubResult causal_scrub(const model::Parameters& params, const ScrubHypothesis& hypothesis,
                         const std::vector<task::TaskInstance>& dataset);

// The attention head's per-key-position contribution rows at `query`
// (each row sums with the others to the head output exactly).
Mat<float> head_position_contributions(const model::Parameters& params,
                                       const model::ActivationCache& cache, int layer, int query);

}  // namespace backchain::interp
