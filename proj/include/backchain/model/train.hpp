#pragma once

#include <functional>
#include <string>
#include <vector>

#include "backchain/model/backward.hpp"
#include "backchain/model/forward.hpp"
#include "backchain/model/optim.hpp"
#include "backchain/task.hpp"

namespace backchain::model {

struct TrainOptions {
    AdamWConfig adamw;
    int batch_size = 64;
    int max_epochs = 50;
    int patience = 5;                  // epochs without val improvement
    double target_exact_match = 1.0;   // stop once val reaches this
    int val_subset = 1000;             // instances scored per epoch
    std::string out_dir;               // checkpoints + metrics; "" = keep in memory only
    uint64_t data_seed = 1;            // epoch shuffling stream
    // Plateau learning-rate decay (deterministic; driven by the val trace).
    double lr_decay = 0.5;
    int lr_patience = 4;               // epochs without improvement before decaying
    double min_lr = 1e-5;
    std::string init_checkpoint;       // warm start instead of random init
};

struct EpochMetrics {
    int epoch = 0;
    double mean_loss = 0;
    double val_exact_match = 0;
    double lr = 0;
};

struct TrainResult {
    Parameters params;  // best validation exact match
    std::vector<EpochMetrics> epochs;
    int64_t steps = 0;
    double best_exact_match = 0;
    std::string best_checkpoint;  // when out_dir was given
    std::string metrics_path;
};

Batch make_batch(const std::vector<task::TaskInstance>& instances,
                 const std::vector<size_t>& index);

// Mini-batch AdamW with per-epoch validation, plateau early stopping and
// per-epoch checkpoints. Loss divergence raises TrainingFailure carrying the
// last good checkpoint path.
TrainResult train_loop(const ModelConfig& config, const std::vector<task::TaskInstance>& train,
                       const std::vector<task::TaskInstance>& val, const TrainOptions& options);

struct DecodeResult {
    std::vector<int> emitted;  // token ids appended after P1
    bool malformed = false;    // a non-node token was emitted (recorded, not raised)
};

// Greedy argmax decoding from the prompt region (edges, goal, "|", P1);
// stops at the goal's source token or when the path region fills.
// Ties break toward the lowest token id.
DecodeResult greedy_decode(const Parameters& params, const std::vector<int>& prompt,
                           int goal_source_token, int max_emit);

DecodeResult decode_instance(const Parameters& params, const task::TaskInstance& instance);

// Fraction of instances whose decoded path equals the unique true path.
double evaluate_exact_match(const Parameters& params,
                            const std::vector<task::TaskInstance>& instances);

// Same scoring with an injected decoder (oracle injection, ablations).
using PathDecoder = std::function<DecodeResult(const task::TaskInstance&)>;
double evaluate_exact_match_with(const PathDecoder& decoder,
                                 const std::vector<task::TaskInstance>& instances);

}  // namespace backchain::model
