#pragma once

#include <vector>

#include "backchain/model/params.hpp"

namespace backchain::model {

// Layers are 1-based throughout the analysis API: x^0 is the embedding
// stream, x^l the stream after block l. ResidPre at layer l edits x^{l-1}
// as it enters block l; AttnScores edits the scaled, causally masked
// pre-softmax scores.
enum class Site { ResidPre, ResidPost, AttnOut, AttnScores, MlpOut };

std::string to_string(Site site);

struct InterventionAction {
    enum class Kind { Replace, Add, BlockScore };

    int layer = 1;
    Site site = Site::ResidPre;
    Kind kind = Kind::Replace;
    // Replace/Add: payload rows align with `positions` (cols = d_model for
    // stream sites, context for score rows).
    std::vector<int> positions;
    Mat<float> payload;
    // BlockScore: scores[query][key] -> -inf for the listed keys.
    int query_position = -1;
    std::vector<int> key_positions;
};

struct InterventionSpec {
    std::vector<InterventionAction> actions;

    bool empty() const { return actions.empty(); }
    void validate(const ModelConfig& config) const;

    static InterventionAction replace_at(int layer, Site site, std::vector<int> positions,
                                         Mat<float> payload);
    static InterventionAction add_at(int layer, Site site, std::vector<int> positions,
                                     Mat<float> payload);
    static InterventionAction block_score(int layer, int query, std::vector<int> keys);
};

struct ActivationCache {
    int length = 0;  // sequence length actually run
    std::vector<Mat<float>> resid;         // layers+1 entries; resid[l] = x^l
    std::vector<Mat<float>> attn_out;      // per layer, T x d
    std::vector<Mat<float>> mlp_out;       // per layer, T x d
    std::vector<Mat<float>> attn_pattern;  // per layer, T x T, rows sum to 1
    std::vector<Mat<float>> attn_scores;   // per layer, T x T, pre-softmax
    Mat<float> logits;                     // T x vocab

    const Mat<float>& stream(int layer) const { return resid[static_cast<size_t>(layer)]; }
};

// Full instrumented forward. With an empty spec the result is bit-identical
// to an un-instrumented run. Throws InvalidArgument for out-of-range
// tokens/positions and NumericError if an intervention empties a softmax row.
ActivationCache forward(const Parameters& params, const std::vector<int>& tokens,
                        const InterventionSpec& interventions = {});

// Mean next-token cross-entropy (nats) over masked positions.
double sequence_loss(const Mat<float>& logits, const std::vector<int>& tokens,
                     const std::vector<uint8_t>& loss_mask);

}  // namespace backchain::model
