#pragma once

#include <string>
#include <vector>

#include "backchain/model/forward.hpp"
#include "backchain/task.hpp"

namespace backchain::interp {

struct ActivationRequest {
    enum class Select {
        AllPositions,
        EdgeTargets,
        EdgeSources,
        Commas,
        PathPositions,
        FirstPathPosition,
    };
    std::vector<int> layers;  // residual stream indices, 0..L
    Select select = Select::AllPositions;
};

// Residual vectors keyed by (instance, layer, position).
struct ActivationTable {
    struct Key {
        int32_t instance = 0;
        int32_t layer = 0;
        int32_t position = 0;
    };
    int d_model = 0;
    std::vector<Key> keys;
    std::vector<float> features;  // keys.size() x d_model

    size_t rows() const { return keys.size(); }
    const float* row(size_t i) const { return features.data() + i * static_cast<size_t>(d_model); }

    void save(const std::string& path) const;
    static ActivationTable load(const std::string& path);
};

std::vector<int> select_positions(const task::TaskInstance& instance,
                                  ActivationRequest::Select select);

ActivationTable collect_activations(const model::Parameters& params,
                                    const std::vector<task::TaskInstance>& dataset,
                                    const ActivationRequest& request);

// Streaming variant for runs too large to hold in memory; the file format
// matches ActivationTable::save.
void collect_activations_to_file(const model::Parameters& params,
                                 const std::vector<task::TaskInstance>& dataset,
                                 const ActivationRequest& request, const std::string& path);

}  // namespace backchain::interp
