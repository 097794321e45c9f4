#pragma once

#include <string>
#include <vector>

#include "backchain/interp/registers.hpp"
#include "backchain/model/forward.hpp"
#include "backchain/stats.hpp"
#include "backchain/task.hpp"

namespace backchain::interp {

// Sites whose values are swapped in from another run's cache.
struct PatchSite {
    int layer = 1;
    model::Site site = model::Site::ResidPost;
    std::vector<int> positions;
};

model::InterventionSpec spec_from_cache(const std::vector<PatchSite>& sites,
                                        const model::ActivationCache& donor);

struct PatchResult {
    double ld_baseline = 0;  // Logit(r) - Logit(r') on the unpatched run
    double ld_patched = 0;
    double effect = 0;       // ld_patched - ld_baseline
};

// Runs on `clean`, patching in the corrupt run's activations at `sites`;
// the logit difference is read at `query_position`.
PatchResult activation_patch(const model::Parameters& params, const std::vector<int>& clean,
                             const std::vector<int>& corrupt, const std::vector<PatchSite>& sites,
                             int query_position, int token_r, int token_r_prime);

struct RegisterPatchOptions {
    int runs = 10;
    int samples_per_run = 1000;
    int n_nodes = 16;
    int layer = 4;  // x^4: stream after block 4
    double register_threshold = 0.3;
    int pair_budget = 10000;  // draws to find one matching pair
    uint64_t seed = 0;
};

struct DepthEffect {
    int depth = 0;  // path length in edges
    stats::ConfidenceInterval ci;
    int samples = 0;
    bool omitted = false;
    std::string note;
};

// Resampling ablation on register-token positions, depth-stratified clean /
// corrupt pairs (long paths, branching root); reports the mean intervention
// effect per depth with a 95% CI over runs.
std::vector<DepthEffect> register_patch_experiment(const model::Parameters& params,
                                                   const RegisterPatchOptions& options);

// Forward with scores[query][key] = -inf for the listed pairs in `layers`.
model::ActivationCache attention_knockout(const model::Parameters& params,
                                          const std::vector<int>& tokens,
                                          const std::vector<std::pair<int, int>>& blocked,
                                          const std::vector<int>& layers);

struct KnockoutReport {
    int instances = 0;
    int lowered = 0;          // correct-token logit dropped vs baseline
    double mean_delta = 0;    // mean logit change of the correct token
};

// Default experiment: block final-position attention to detected register
// tokens in the last two layers and compare the correct next-step logit.
KnockoutReport register_knockout_experiment(const model::Parameters& params,
                                            const std::vector<task::TaskInstance>& dataset,
                                            double threshold = 0.3, int min_depth = 6);

}  // namespace backchain::interp
