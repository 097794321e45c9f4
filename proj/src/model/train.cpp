#include "backchain/model/train.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "backchain/errors.hpp"
#include "backchain/threading.hpp"

namespace backchain::model {

Batch make_batch(const std::vector<task::TaskInstance>& instances,
                 const std::vector<size_t>& index) {
    if (index.empty()) throw InvalidArgument("empty batch");
    Batch batch;
    batch.batch = static_cast<int>(index.size());
    for (size_t i : index) {
        const auto seq = task::encode_instance(instances[i]);
        if (batch.length == 0) batch.length = seq.length();
        if (seq.length() != batch.length) throw InvalidArgument("mixed sequence lengths in batch");
        batch.tokens.insert(batch.tokens.end(), seq.tokens.begin(), seq.tokens.end());
        batch.mask.insert(batch.mask.end(), seq.loss_mask.begin(), seq.loss_mask.end());
    }
    return batch;
}

DecodeResult greedy_decode(const Parameters& params, const std::vector<int>& prompt,
                           int goal_source_token, int max_emit) {
    DecodeResult result;
    std::vector<int> tokens = prompt;
    const task::Vocabulary vocab((params.config.vocab - 3) / 2);
    for (int step = 0; step < max_emit; ++step) {
        const auto cache = forward(params, tokens);
        const float* row = cache.logits.row(cache.length - 1);
        int best = 0;
        for (int j = 1; j < cache.logits.cols; ++j) {
            if (row[j] > row[best]) best = j;  // ties keep the lowest id
        }
        result.emitted.push_back(best);
        tokens.push_back(best);
        if (!vocab.is_source(best)) result.malformed = true;
        if (best == goal_source_token) break;
    }
    return result;
}

DecodeResult decode_instance(const Parameters& params, const task::TaskInstance& instance) {
    const auto seq = task::encode_instance(instance);
    const task::TokenLayout layout(instance.tree.n_nodes);
    const task::Vocabulary vocab(instance.tree.n_nodes);
    std::vector<int> prompt(seq.tokens.begin(), seq.tokens.begin() + layout.path_start + 1);
    const int max_emit = layout.context - layout.path_start - 1;
    return greedy_decode(params, prompt, vocab.source_token(instance.goal), max_emit);
}

double evaluate_exact_match_with(const PathDecoder& decoder,
                                 const std::vector<task::TaskInstance>& instances) {
    if (instances.empty()) throw InvalidArgument("empty evaluation set");
    std::vector<uint8_t> hit(instances.size(), 0);
    parallel_for(instances.size(), [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            const auto& instance = instances[i];
            const auto result = decoder(instance);
            const auto& path = instance.path;
            if (result.malformed || result.emitted.size() != path.size() - 1) continue;
            bool ok = true;
            for (size_t j = 1; j < path.size(); ++j) {
                if (result.emitted[j - 1] != path[j]) {  // source token id == node id
                    ok = false;
                    break;
                }
            }
            hit[i] = ok ? 1 : 0;
        }
    });
    size_t correct = 0;
    for (uint8_t h : hit) correct += h;
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

double evaluate_exact_match(const Parameters& params,
                            const std::vector<task::TaskInstance>& instances) {
    return evaluate_exact_match_with(
        [&](const task::TaskInstance& instance) { return decode_instance(params, instance); },
        instances);
}

namespace {

void write_metrics(const std::string& path, const std::vector<EpochMetrics>& epochs,
                   int64_t steps, double best_em) {
    nlohmann::ordered_json j;
    j["steps"] = steps;
    j["best_exact_match"] = best_em;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& e : epochs) {
        arr.push_back({{"epoch", e.epoch},
                       {"mean_loss", e.mean_loss},
                       {"val_exact_match", e.val_exact_match},
                       {"lr", e.lr}});
    }
    j["epochs"] = std::move(arr);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write metrics: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace

TrainResult train_loop(const ModelConfig& config, const std::vector<task::TaskInstance>& train,
                       const std::vector<task::TaskInstance>& val, const TrainOptions& options) {
    if (train.empty()) throw InvalidArgument("training dataset is empty");
    config.validate();

    Rng init_rng(config.seed);
    auto params = init_params<float>(config, init_rng);
    if (!options.init_checkpoint.empty()) {
        auto loaded = load_checkpoint(options.init_checkpoint);
        loaded.params.config.seed = config.seed;
        if (loaded.params.config.layers != config.layers ||
            loaded.params.config.d_model != config.d_model ||
            loaded.params.config.vocab != config.vocab)
            throw InvalidArgument("warm-start checkpoint does not match the model config");
        params = std::move(loaded.params);
    }
    auto grads = zeros_like(params);
    auto optim = OptimState::zero_for(params);
    TrainState<float> ws;

    const std::vector<task::TaskInstance> val_view(
        val.begin(),
        val.begin() + std::min<size_t>(val.size(), static_cast<size_t>(options.val_subset)));

    const bool persist = !options.out_dir.empty();
    std::string last_path, best_path;
    if (persist) {
        std::filesystem::create_directories(options.out_dir);
        last_path = options.out_dir + "/ckpt_last.bin";
        best_path = options.out_dir + "/ckpt_best.bin";
    }

    TrainResult result;
    Parameters best = params;
    double best_em = -1.0;
    int epochs_since_improvement = 0;
    AdamWConfig adamw = options.adamw;

    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive_seed(config.seed ^ options.data_seed, static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order.data(), order.size());

        double loss_sum = 0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(options.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(options.batch_size));
            const std::vector<size_t> index(order.begin() + static_cast<long>(start),
                                            order.begin() + static_cast<long>(end));
            const Batch batch = make_batch(train, index);
            double loss;
            try {
                loss = batch_forward(params, batch, ws);
                batch_backward(params, batch, ws, grads);
            } catch (const NumericError& e) {
                throw TrainingFailure(std::string("training diverged: ") + e.what(),
                                      persist ? last_path : "");
            }
            adamw_step(params, grads, optim, adamw);
            loss_sum += loss;
            ++batches;
            ++result.steps;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.mean_loss = loss_sum / std::max(1, batches);
        em.val_exact_match = val_view.empty() ? 0.0 : evaluate_exact_match(params, val_view);
        em.lr = adamw.lr;
        result.epochs.push_back(em);

        if (persist) {
            save_checkpoint(params, result.steps, last_path);
            write_metrics(options.out_dir + "/metrics.json", result.epochs, result.steps,
                          std::max(best_em, em.val_exact_match));
        }
        if (em.val_exact_match > best_em) {
            best_em = em.val_exact_match;
            best = params;
            epochs_since_improvement = 0;
            if (persist) save_checkpoint(params, result.steps, best_path);
        } else {
            ++epochs_since_improvement;
            // Plateau decay: anneal while the validation trace is flat.
            if (options.lr_decay < 1.0 && epochs_since_improvement % options.lr_patience == 0 &&
                adamw.lr > options.min_lr) {
                adamw.lr = std::max(options.min_lr, adamw.lr * options.lr_decay);
            }
        }
        if (em.val_exact_match >= options.target_exact_match) break;
        if (epochs_since_improvement >= options.patience) break;
    }

    result.params = std::move(best);
    result.best_exact_match = best_em;
    if (persist) {
        result.best_checkpoint = best_path;
        result.metrics_path = options.out_dir + "/metrics.json";
        write_metrics(result.metrics_path, result.epochs, result.steps, best_em);
    }
    return result;
}

}  // namespace backchain::model
