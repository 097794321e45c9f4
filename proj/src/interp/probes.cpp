#include "backchain/interp/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "backchain/errors.hpp"
#include "backchain/interp/registers.hpp"
#include "backchain/rng.hpp"
#include "backchain/threading.hpp"

namespace backchain::interp {

namespace {

// Mean loss and gradient for either head type; scores = x w + b.
struct Objective {
    const Mat<float>& x;
    const std::vector<int>* y = nullptr;  // multinomial
    const Mat<uint8_t>* bits = nullptr;   // multilabel
    int outputs = 0;
    double l2 = 0;

    double loss_at(const Mat<float>& w, const std::vector<float>& b, Mat<float>& scores) const {
        const int n = x.rows;
        gemm_nn(scores, x, w);
        double total = 0;
        std::vector<double> row_total(static_cast<size_t>(n), 0.0);
        parallel_for(static_cast<size_t>(n), [&](size_t lo, size_t hi) {
            for (size_t r = lo; r < hi; ++r) {
                float* srow = scores.row(static_cast<int>(r));
                for (int j = 0; j < outputs; ++j) srow[j] += b[static_cast<size_t>(j)];
                if (y) {
                    float mx = srow[0];
                    for (int j = 1; j < outputs; ++j) mx = std::max(mx, srow[j]);
                    double denom = 0;
                    for (int j = 0; j < outputs; ++j)
                        denom += std::exp(static_cast<double>(srow[j] - mx));
                    row_total[r] = std::log(denom) -
                                   static_cast<double>(srow[(*y)[r]] - mx);
                } else {
                    double acc = 0;
                    const uint8_t* brow = bits->row(static_cast<int>(r));
                    for (int j = 0; j < outputs; ++j) {
                        const double s = srow[j];
                        // log(1 + exp(-|s|)) + max(s,0) - s*y, stable.
                        acc += std::log1p(std::exp(-std::abs(s))) + std::max(s, 0.0) -
                               s * (brow[j] ? 1.0 : 0.0);
                    }
                    row_total[r] = acc;
                }
            }
        });
        for (double v : row_total) total += v;
        total /= n;
        double reg = 0;
        for (float v : w.d) reg += static_cast<double>(v) * v;
        return total + 0.5 * l2 * reg;
    }

    // Fills gw/gb given scores from loss_at; returns squared gradient norm.
    double gradient(const Mat<float>& w, Mat<float>& scores, Mat<float>& gw,
                    std::vector<float>& gb) const {
        const int n = x.rows;
        const float inv_n = 1.0f / static_cast<float>(n);
        // Reuse `scores` as dscores.
        parallel_for(static_cast<size_t>(n), [&](size_t lo, size_t hi) {
            for (size_t r = lo; r < hi; ++r) {
                float* srow = scores.row(static_cast<int>(r));
                if (y) {
                    float mx = srow[0];
                    for (int j = 1; j < outputs; ++j) mx = std::max(mx, srow[j]);
                    double denom = 0;
                    for (int j = 0; j < outputs; ++j)
                        denom += std::exp(static_cast<double>(srow[j] - mx));
                    const float inv_denom = static_cast<float>(1.0 / denom);
                    for (int j = 0; j < outputs; ++j) {
                        float p = std::exp(srow[j] - mx) * inv_denom;
                        if (j == (*y)[r]) p -= 1.0f;
                        srow[j] = p * inv_n;
                    }
                } else {
                    const uint8_t* brow = bits->row(static_cast<int>(r));
                    for (int j = 0; j < outputs; ++j) {
                        const float sig = 1.0f / (1.0f + std::exp(-srow[j]));
                        srow[j] = (sig - (brow[j] ? 1.0f : 0.0f)) * inv_n;
                    }
                }
            }
        });
        gemm_tn(gw, x, scores);
        for (size_t i = 0; i < gw.size(); ++i) gw.d[i] += static_cast<float>(l2) * w.d[i];
        column_sums(gb, scores);
        double norm = 0;
        for (float v : gw.d) norm += static_cast<double>(v) * v;
        for (float v : gb) norm += static_cast<double>(v) * v;
        return norm;
    }
};

LogRegModel fit(const Objective& obj, int features, const LogRegOptions& options) {
    LogRegModel model;
    model.w = Mat<float>(features, obj.outputs);
    model.b.assign(static_cast<size_t>(obj.outputs), 0.0f);

    Mat<float> scores(obj.x.rows, obj.outputs);
    Mat<float> gw(features, obj.outputs);
    std::vector<float> gb(static_cast<size_t>(obj.outputs), 0.0f);
    Mat<float> w_try(features, obj.outputs);
    std::vector<float> b_try(static_cast<size_t>(obj.outputs), 0.0f);

    double loss = obj.loss_at(model.w, model.b, scores);
    double step = 1.0;
    model.converged = false;
    for (int iter = 0; iter < options.max_iters; ++iter) {
        model.iters = iter + 1;
        const double gnorm2 = obj.gradient(model.w, scores, gw, gb);
        if (std::sqrt(gnorm2) <= options.tolerance) {
            model.converged = true;
            break;
        }
        // Backtracking line search (Armijo, c = 1e-4).
        bool accepted = false;
        for (int halving = 0; halving < 40; ++halving) {
            for (size_t i = 0; i < w_try.size(); ++i)
                w_try.d[i] = model.w.d[i] - static_cast<float>(step) * gw.d[i];
            for (size_t i = 0; i < b_try.size(); ++i)
                b_try[i] = model.b[i] - static_cast<float>(step) * gb[i];
            const double trial = obj.loss_at(w_try, b_try, scores);
            if (trial <= loss - 1e-4 * step * gnorm2) {
                model.w.d.swap(w_try.d);
                model.b.swap(b_try);
                loss = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // float precision floor
        step = std::min(step * 2.0, 1e3);
        // Refresh scores for the next gradient (loss_at already did).
    }
    return model;
}

}  // namespace

LogRegModel fit_softmax_regression(const Mat<float>& x, const std::vector<int>& y, int classes,
                                   const LogRegOptions& options) {
    if (x.rows != static_cast<int>(y.size())) throw InvalidArgument("feature/label size mismatch");
    int distinct = 0;
    std::vector<bool> seen(static_cast<size_t>(classes), false);
    for (int label : y) {
        if (label < 0 || label >= classes) throw InvalidArgument("label out of range");
        if (!seen[static_cast<size_t>(label)]) {
            seen[static_cast<size_t>(label)] = true;
            ++distinct;
        }
    }
    if (distinct < 2) throw InvalidArgument("probe needs at least 2 distinct labels");
    Objective obj{x, &y, nullptr, classes, options.l2};
    return fit(obj, x.cols, options);
}

LogRegModel fit_multilabel_regression(const Mat<float>& x, const Mat<uint8_t>& bits,
                                      const LogRegOptions& options) {
    if (x.rows != bits.rows) throw InvalidArgument("feature/label size mismatch");
    bool any0 = false, any1 = false;
    for (uint8_t b : bits.d) (b ? any1 : any0) = true;
    if (!any0 || !any1) throw InvalidArgument("probe needs at least 2 distinct labels");
    Objective obj{x, nullptr, &bits, bits.cols, options.l2};
    return fit(obj, x.cols, options);
}

Mat<float> logreg_scores(const LogRegModel& m, const Mat<float>& x) {
    Mat<float> scores(x.rows, m.w.cols);
    gemm_nn(scores, x, m.w);
    for (int r = 0; r < scores.rows; ++r) add_row_inplace(scores.row(r), m.b.data(), scores.cols);
    return scores;
}

double macro_f1(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
    if (pred.size() != truth.size()) throw InvalidArgument("prediction size mismatch");
    std::vector<int> tp(static_cast<size_t>(classes), 0), fp(static_cast<size_t>(classes), 0),
        fn(static_cast<size_t>(classes), 0);
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == truth[i]) ++tp[static_cast<size_t>(truth[i])];
        else {
            ++fp[static_cast<size_t>(pred[i])];
            ++fn[static_cast<size_t>(truth[i])];
        }
    }
    double sum = 0;
    int present = 0;
    for (int c = 0; c < classes; ++c) {
        if (tp[static_cast<size_t>(c)] + fn[static_cast<size_t>(c)] == 0) continue;  // absent from truth
        ++present;
        const double denom = 2.0 * tp[static_cast<size_t>(c)] + fp[static_cast<size_t>(c)] +
                             fn[static_cast<size_t>(c)];
        sum += denom == 0 ? 0.0 : 2.0 * tp[static_cast<size_t>(c)] / denom;
    }
    return present == 0 ? 0.0 : sum / present;
}

double micro_f1(const Mat<uint8_t>& pred, const Mat<uint8_t>& truth) {
    if (pred.rows != truth.rows || pred.cols != truth.cols)
        throw InvalidArgument("prediction shape mismatch");
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.d[i] != 0, t = truth.d[i] != 0;
        if (p && t) ++tp;
        else if (p) ++fp;
        else if (t) ++fn;
    }
    const double denom = 2.0 * tp + fp + fn;
    return denom == 0 ? 1.0 : 2.0 * tp / denom;
}

std::string to_string(ProbeKind kind) {
    switch (kind) {
        case ProbeKind::EdgeAtTarget: return "edge-at-target";
        case ProbeKind::EdgeAtSource: return "edge-at-source";
        case ProbeKind::GoalAtPath: return "goal-at-path";
        case ProbeKind::SubpathAtRegister: return "subpath-at-register";
        case ProbeKind::ChildrenAtPath: return "children-at-path";
        case ProbeKind::LeavesAtPath: return "leaves-at-path";
    }
    return "?";
}

ProbeKind probe_kind_from_string(const std::string& s) {
    for (ProbeKind k : {ProbeKind::EdgeAtTarget, ProbeKind::EdgeAtSource, ProbeKind::GoalAtPath,
                        ProbeKind::SubpathAtRegister, ProbeKind::ChildrenAtPath,
                        ProbeKind::LeavesAtPath}) {
        if (to_string(k) == s) return k;
    }
    throw InvalidArgument("unknown probe kind: " + s);
}

void ProbeSpec::validate(const model::ModelConfig& config) const {
    const int stream = pre_block ? layer - 1 : layer;
    if (stream < 0 || stream > config.layers) throw InvalidArgument("probe layer out of range");
    if (train_size < 1 || test_size < 1) throw InvalidArgument("probe sizes must be >= 1");
}

std::vector<std::pair<int, int>> read_attention_chain(const model::ActivationCache& cache,
                                                      const task::TaskInstance& instance,
                                                      int position, int steps, int subgoal) {
    const task::Vocabulary vocab(instance.tree.n_nodes);
    const task::TokenLayout layout(instance.tree.n_nodes);
    const auto seq = task::encode_instance(instance);
    std::vector<std::pair<int, int>> bits;
    int head = subgoal;
    for (int step = 0; step < steps; ++step) {
        const size_t l = static_cast<size_t>(step) + 1;  // layers 2, 3, ...
        if (l >= cache.attn_pattern.size()) break;
        const auto& pat = cache.attn_pattern[l];
        int best = 0;
        for (int k = 1; k <= position; ++k) {
            if (pat.at(position, k) > pat.at(position, best)) best = k;
        }
        if (!layout.is_target_position(best)) break;
        const int edge = best / 3;
        const int src = seq.tokens[static_cast<size_t>(3 * edge)];
        const int tgt = vocab.node_of(seq.tokens[static_cast<size_t>(3 * edge) + 1]);
        if (tgt != head) break;  // not a continuation of the chain
        bits.emplace_back(src, head);
        head = src;
    }
    return bits;
}

namespace {

struct ExampleRow {
    bool valid = false;
    std::vector<float> features;
    std::vector<int> labels;      // per head
    std::vector<uint8_t> bits;
};

}  // namespace

ProbeExamples build_probe_labels(const ProbeSpec& spec, const model::Parameters& params,
                                 const std::vector<task::TaskInstance>& dataset) {
    spec.validate(params.config);
    const int stream = spec.pre_block ? spec.layer - 1 : spec.layer;
    const int want = spec.train_size + spec.test_size;
    if (static_cast<int>(dataset.size()) < want)
        throw InvalidArgument("dataset smaller than probe train+test size");

    const int n = dataset[0].tree.n_nodes;
    ProbeExamples ex;
    ex.n_nodes = n;
    const bool needs_cache = spec.kind == ProbeKind::SubpathAtRegister;

    switch (spec.kind) {
        case ProbeKind::EdgeAtTarget:
        case ProbeKind::EdgeAtSource:
            if (spec.joint_edge_label) {
                ex.classes = n * n;
                ex.head_names = {"edge"};
            } else {
                ex.classes = n;
                ex.head_names = {"source", "target"};
            }
            break;
        case ProbeKind::GoalAtPath:
            ex.classes = n;
            ex.head_names = {"goal"};
            break;
        case ProbeKind::SubpathAtRegister:
            ex.multilabel = true;
            ex.bits = n * n;
            break;
        case ProbeKind::ChildrenAtPath:
        case ProbeKind::LeavesAtPath:
            ex.multilabel = true;
            ex.bits = n;
            break;
    }

    std::vector<ExampleRow> rows(dataset.size());
    parallel_for(dataset.size(), [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            const auto& instance = dataset[i];
            const task::TokenLayout layout(n);
            Rng rng(Rng::derive_seed(spec.seed, i));
            const auto seq = task::encode_instance(instance);
            const auto cache = model::forward(params, seq.tokens);
            ExampleRow& row = rows[i];

            int position = -1;
            switch (spec.kind) {
                case ProbeKind::EdgeAtTarget:
                case ProbeKind::EdgeAtSource: {
                    const int edge = rng.below_int(n - 1);
                    position = 3 * edge + (spec.kind == ProbeKind::EdgeAtTarget ? 1 : 0);
                    const auto edges = task::presentation_edges(instance);
                    const auto [src, tgt] = edges[static_cast<size_t>(edge)];
                    if (spec.joint_edge_label) row.labels = {src * n + tgt};
                    else row.labels = {src, tgt};
                    break;
                }
                case ProbeKind::GoalAtPath: {
                    const int j = rng.below_int(static_cast<int>(instance.path.size()));
                    position = layout.path_start + j;
                    row.labels = {instance.goal};
                    break;
                }
                case ProbeKind::SubpathAtRegister: {
                    const auto hits = detect_register_positions(cache, instance,
                                                                spec.register_threshold);
                    if (hits.empty()) continue;  // stays invalid
                    const auto& hit = hits[rng.below(hits.size())];
                    position = hit.position;
                    row.bits.assign(static_cast<size_t>(n) * static_cast<size_t>(n), 0);
                    const int steps = std::max(0, stream - 1);
                    for (const auto& [parent, child] :
                         read_attention_chain(cache, instance, position, steps, hit.subgoal)) {
                        row.bits[static_cast<size_t>(parent) * static_cast<size_t>(n) +
                                 static_cast<size_t>(child)] = 1;
                    }
                    break;
                }
                case ProbeKind::ChildrenAtPath:
                case ProbeKind::LeavesAtPath: {
                    const int j = rng.below_int(static_cast<int>(instance.path.size()));
                    position = layout.path_start + j;
                    const int current = instance.path[static_cast<size_t>(j)];
                    row.bits.assign(static_cast<size_t>(n), 0);
                    for (int c : instance.tree.children[static_cast<size_t>(current)]) {
                        if (spec.kind == ProbeKind::ChildrenAtPath || instance.tree.is_leaf(c))
                            row.bits[static_cast<size_t>(c)] = 1;
                    }
                    break;
                }
            }
            const auto& feat = cache.resid[static_cast<size_t>(stream)];
            row.features.assign(feat.row(position), feat.row(position) + feat.cols);
            row.valid = true;
        }
    });
    (void)needs_cache;

    std::vector<size_t> usable;
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].valid) usable.push_back(i);
    }
    if (usable.empty())
        throw PreconditionError("no usable probe examples (register positions absent?)");

    const size_t train_n = std::min<size_t>(static_cast<size_t>(spec.train_size), usable.size());
    const size_t test_n = std::min<size_t>(static_cast<size_t>(spec.test_size),
                                           usable.size() - train_n);
    if (train_n == 0 || test_n == 0)
        throw PreconditionError("not enough usable probe examples for a train/test split");

    const int d = params.config.d_model;
    const size_t heads = ex.multilabel ? 0 : rows[usable[0]].labels.size();
    auto fill = [&](size_t begin, size_t count, Mat<float>& x, std::vector<std::vector<int>>& y,
                    Mat<uint8_t>& bits) {
        x = Mat<float>(static_cast<int>(count), d);
        if (ex.multilabel) bits = Mat<uint8_t>(static_cast<int>(count), ex.bits);
        else y.assign(heads, std::vector<int>(count, 0));
        for (size_t r = 0; r < count; ++r) {
            const ExampleRow& row = rows[usable[begin + r]];
            std::copy(row.features.begin(), row.features.end(), x.row(static_cast<int>(r)));
            if (ex.multilabel)
                std::copy(row.bits.begin(), row.bits.end(), bits.row(static_cast<int>(r)));
            else
                for (size_t h = 0; h < heads; ++h) y[h][r] = row.labels[h];
        }
    };
    fill(0, train_n, ex.x_train, ex.y_train, ex.bits_train);
    fill(train_n, test_n, ex.x_test, ex.y_test, ex.bits_test);
    return ex;
}

namespace {

double evaluate_heads(const std::vector<LogRegModel>& heads, const ProbeExamples& ex,
                      const std::vector<std::vector<int>>& y_test,
                      const Mat<uint8_t>& bits_test, std::vector<double>* per_label) {
    if (ex.multilabel) {
        const auto scores = logreg_scores(heads[0], ex.x_test);
        Mat<uint8_t> pred(scores.rows, scores.cols);
        for (size_t i = 0; i < scores.size(); ++i) pred.d[i] = scores.d[i] > 0 ? 1 : 0;
        if (per_label) {
            per_label->clear();
            for (int j = 0; j < scores.cols; ++j) {
                Mat<uint8_t> pj(scores.rows, 1), tj(scores.rows, 1);
                for (int r = 0; r < scores.rows; ++r) {
                    pj.at(r, 0) = pred.at(r, j);
                    tj.at(r, 0) = bits_test.at(r, j);
                }
                per_label->push_back(micro_f1(pj, tj));
            }
        }
        return micro_f1(pred, bits_test);
    }
    // Multinomial: macro F1 pooled across heads.
    double sum = 0;
    if (per_label) per_label->clear();
    for (size_t h = 0; h < heads.size(); ++h) {
        const auto scores = logreg_scores(heads[h], ex.x_test);
        std::vector<int> pred(static_cast<size_t>(scores.rows), 0);
        for (int r = 0; r < scores.rows; ++r) {
            const float* row = scores.row(r);
            int best = 0;
            for (int j = 1; j < scores.cols; ++j)
                if (row[j] > row[best]) best = j;
            pred[static_cast<size_t>(r)] = best;
        }
        const double f1 = macro_f1(pred, y_test[h], ex.classes);
        if (per_label) per_label->push_back(f1);
        sum += f1;
    }
    return sum / static_cast<double>(heads.size());
}

std::vector<LogRegModel> fit_heads(const ProbeSpec& spec, const ProbeExamples& ex,
                                   const std::vector<std::vector<int>>& y_train,
                                   const Mat<uint8_t>& bits_train, bool* converged) {
    std::vector<LogRegModel> heads;
    *converged = true;
    if (ex.multilabel) {
        heads.push_back(fit_multilabel_regression(ex.x_train, bits_train, spec.optimizer));
        *converged = heads.back().converged;
    } else {
        for (const auto& y : y_train) {
            heads.push_back(fit_softmax_regression(ex.x_train, y, ex.classes, spec.optimizer));
            *converged = *converged && heads.back().converged;
        }
    }
    return heads;
}

}  // namespace

TrainedProbe train_linear_probe(const ProbeSpec& spec, const ProbeExamples& examples) {
    TrainedProbe probe;
    bool converged = true;
    probe.heads = fit_heads(spec, examples, examples.y_train, examples.bits_train, &converged);
    probe.report.probe = to_string(spec.kind);
    probe.report.layer = spec.layer;
    probe.report.converged = converged;
    if (!converged) probe.report.note = "optimizer stopped at iteration budget";
    probe.report.f1 = evaluate_heads(probe.heads, examples, examples.y_test, examples.bits_test,
                                     &probe.report.per_label_f1);

    // Permuted-label baseline: shuffle labels in both splits, refit, rescore.
    Rng rng(Rng::derive_seed(spec.seed, 0x9a17));
    ProbeExamples permuted = examples;
    auto permute_rows = [&rng](auto& labels) {
        rng.shuffle(labels.data(), labels.size());
    };
    if (examples.multilabel) {
        std::vector<int> perm(static_cast<size_t>(permuted.bits_train.rows));
        std::iota(perm.begin(), perm.end(), 0);
        permute_rows(perm);
        Mat<uint8_t> shuffled(permuted.bits_train.rows, permuted.bits_train.cols);
        for (int r = 0; r < shuffled.rows; ++r)
            std::copy(permuted.bits_train.row(perm[static_cast<size_t>(r)]),
                      permuted.bits_train.row(perm[static_cast<size_t>(r)]) + shuffled.cols,
                      shuffled.row(r));
        permuted.bits_train = std::move(shuffled);
    } else {
        for (auto& y : permuted.y_train) permute_rows(y);
    }
    bool baseline_converged = true;
    const auto baseline =
        fit_heads(spec, permuted, permuted.y_train, permuted.bits_train, &baseline_converged);
    probe.report.baseline_f1 =
        evaluate_heads(baseline, examples, examples.y_test, examples.bits_test, nullptr);
    return probe;
}

TrainedProbe run_probe(const ProbeSpec& spec, const model::Parameters& params,
                       const std::vector<task::TaskInstance>& dataset) {
    return train_linear_probe(spec, build_probe_labels(spec, params, dataset));
}

}  // namespace backchain::interp
