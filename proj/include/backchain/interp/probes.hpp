#pragma once

#include <optional>
#include <string>
#include <vector>

#include "backchain/matrix.hpp"
#include "backchain/model/forward.hpp"
#include "backchain/task.hpp"

namespace backchain::interp {

// Full-batch gradient descent with backtracking line search; shared by the
// probes and the skip lens.
struct LogRegOptions {
    double l2 = 1e-4;
    double tolerance = 1e-6;  // stop on gradient norm
    int max_iters = 2000;
};

struct LogRegModel {
    Mat<float> w;  // features x outputs
    std::vector<float> b;
    bool converged = true;
    int iters = 0;
};

// Multinomial softmax regression; y in [0, classes).
LogRegModel fit_softmax_regression(const Mat<float>& x, const std::vector<int>& y, int classes,
                                   const LogRegOptions& options);
// Independent per-bit logistic regression.
LogRegModel fit_multilabel_regression(const Mat<float>& x, const Mat<uint8_t>& bits,
                                      const LogRegOptions& options);

Mat<float> logreg_scores(const LogRegModel& m, const Mat<float>& x);

// Macro F1 over classes present in the reference labels.
double macro_f1(const std::vector<int>& pred, const std::vector<int>& truth, int classes);
// Micro F1 over positive bits.
double micro_f1(const Mat<uint8_t>& pred, const Mat<uint8_t>& truth);

enum class ProbeKind {
    EdgeAtTarget,
    EdgeAtSource,
    GoalAtPath,
    SubpathAtRegister,
    ChildrenAtPath,
    LeavesAtPath,
};

std::string to_string(ProbeKind kind);
ProbeKind probe_kind_from_string(const std::string& s);

struct ProbeSpec {
    ProbeKind kind = ProbeKind::EdgeAtTarget;
    int layer = 1;           // residual stream index (post-block)
    bool pre_block = false;  // probe the stream entering the block instead
    int train_size = 8000;
    int test_size = 8000;
    LogRegOptions optimizer;
    bool joint_edge_label = false;  // single 256-way edge head
    double register_threshold = 0.3;
    uint64_t seed = 0;

    void validate(const model::ModelConfig& config) const;
};

// One labeled example per instance at a kind-dependent position.
struct ProbeExamples {
    bool multilabel = false;
    int n_nodes = 16;
    Mat<float> x_train, x_test;
    // Multinomial: one or more independent heads (edge kinds use two).
    int classes = 0;
    std::vector<std::vector<int>> y_train, y_test;  // per head
    std::vector<std::string> head_names;
    // Multilabel.
    int bits = 0;
    Mat<uint8_t> bits_train, bits_test;
};

ProbeExamples build_probe_labels(const ProbeSpec& spec, const model::Parameters& params,
                                 const std::vector<task::TaskInstance>& dataset);

// Hard-attention reading of the subpath stored at a register position:
// layer-1 argmax picks the subgoal, each deduction layer's argmax climbs one
// edge while it stays consistent. Returns (parent, child) adjacency pairs;
// ties break toward the earliest key position.
std::vector<std::pair<int, int>> read_attention_chain(const model::ActivationCache& cache,
                                                      const task::TaskInstance& instance,
                                                      int position, int steps, int subgoal);

struct ProbeReport {
    std::string probe;
    int layer = 0;
    double f1 = 0;
    double baseline_f1 = 0;  // permuted labels
    std::vector<double> per_label_f1;
    bool converged = true;
    std::string note;
};

struct TrainedProbe {
    std::vector<LogRegModel> heads;  // one per head (or the single bit head)
    ProbeReport report;
};

TrainedProbe train_linear_probe(const ProbeSpec& spec, const ProbeExamples& examples);

// Convenience: labels + fit + report.
TrainedProbe run_probe(const ProbeSpec& spec, const model::Parameters& params,
                       const std::vector<task::TaskInstance>& dataset);

}  // namespace backchain::interp
