#pragma once

#include <map>
#include <vector>

#include "backchain/model/forward.hpp"
#include "backchain/task.hpp"

namespace backchain::interp {

struct RegisterHit {
    int position = -1;           // edge-region position acting as a register
    int subgoal = -1;            // node id it backward-chains from
    int attended_position = -1;  // layer-1 argmax key
    float weight = 0;
};

// Edge-region positions whose layer-1 attention picks a node token at or
// above `threshold`. With the content filter on, the attended node must lie
// outside the position's own edge (separator-like or redundant content);
// commas always pass the content test.
std::vector<RegisterHit> detect_register_positions(const model::ActivationCache& cache,
                                                   const task::TaskInstance& instance,
                                                   double threshold = 0.3,
                                                   bool content_filter = true);

struct SubgoalStats {
    struct PositionRow {
        int position = -1;
        std::map<int, double> subgoal_ratio;  // node -> ratio over trees
        int modal_subgoal = -1;
        double modal_ratio = 0;
        double selected_ratio = 0;  // any selection at all
    };
    std::vector<PositionRow> rows;
    int trees = 0;
    // Failure-mode counters for the modal subgoal (unfiltered pass).
    int modal_absent_before = 0;  // modal node occurs only after the register
    int modal_is_leaf = 0;
};

struct SubgoalStatsOptions {
    double threshold = 0.3;
    bool filter_modal_usable = false;  // condition on modal subgoal non-leaf & before
    uint64_t seed = 0;
};

// Ratio of register positions attending to each subgoal across the dataset;
// the filtered variant conditions on trees where the position's modal
// subgoal is a non-leaf occurring before the position.
SubgoalStats subgoal_statistics(const model::Parameters& params,
                                const std::vector<task::TaskInstance>& dataset,
                                const SubgoalStatsOptions& options);

}  // namespace backchain::interp
