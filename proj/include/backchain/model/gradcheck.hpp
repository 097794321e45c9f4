#pragma once

#include <string>
#include <vector>

#include "backchain/model/backward.hpp"

namespace backchain::model {

struct GradCheckCoord {
    std::string tensor;
    size_t index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_error = 0;
};

struct GradCheckReport {
    double max_rel_error = 0;
    int coords_checked = 0;
    std::vector<GradCheckCoord> worst;  // descending by error
};

// Central finite differences (double precision) on randomly selected
// coordinates against batch_backward. Throws VerificationFailure listing
// the worst coordinates when the tolerance is exceeded.
GradCheckReport check_gradients(const ModelConfig& config, uint64_t seed, double tolerance,
                                int min_coords = 200, double fd_step = 1e-5);

}  // namespace backchain::model
