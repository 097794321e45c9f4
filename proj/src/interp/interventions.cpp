#include "backchain/interp/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "backchain/errors.hpp"
#include "backchain/threading.hpp"

namespace backchain::interp {

model::InterventionSpec spec_from_cache(const std::vector<PatchSite>& sites,
                                        const model::ActivationCache& donor) {
    model::InterventionSpec spec;
    const int donor_layers = static_cast<int>(donor.attn_out.size());
    for (const auto& site : sites) {
        if (site.layer < 1 || site.layer > donor_layers)
            throw InvalidArgument("patch layer outside the donor cache");
        const Mat<float>* source = nullptr;
        switch (site.site) {
            case model::Site::ResidPre:
                source = &donor.resid[static_cast<size_t>(site.layer) - 1];
                break;
            case model::Site::ResidPost:
                source = &donor.resid[static_cast<size_t>(site.layer)];
                break;
            case model::Site::AttnOut:
                source = &donor.attn_out[static_cast<size_t>(site.layer) - 1];
                break;
            case model::Site::MlpOut:
                source = &donor.mlp_out[static_cast<size_t>(site.layer) - 1];
                break;
            case model::Site::AttnScores:
                throw InvalidArgument("score rows cannot be patched from a stream cache");
        }
        Mat<float> payload(static_cast<int>(site.positions.size()), source->cols);
        for (size_t i = 0; i < site.positions.size(); ++i) {
            const int p = site.positions[i];
            if (p < 0 || p >= donor.length)
                throw InvalidArgument("patch position outside the donor run");
            std::copy(source->row(p), source->row(p) + source->cols,
                      payload.row(static_cast<int>(i)));
        }
        spec.actions.push_back(
            model::InterventionSpec::replace_at(site.layer, site.site, site.positions, payload));
    }
    return spec;
}

PatchResult activation_patch(const model::Parameters& params, const std::vector<int>& clean,
                             const std::vector<int>& corrupt, const std::vector<PatchSite>& sites,
                             int query_position, int token_r, int token_r_prime) {
    if (token_r == token_r_prime)
        throw InvalidArgument("activation patch needs distinct target tokens r and r'");
    if (clean.size() != corrupt.size())
        throw InvalidArgument("clean and corrupt runs must have the same length");

    const auto corrupt_cache = model::forward(params, corrupt);
    const auto spec = spec_from_cache(sites, corrupt_cache);

    const auto baseline = model::forward(params, clean);
    const auto patched = model::forward(params, clean, spec);

    PatchResult result;
    result.ld_baseline = static_cast<double>(baseline.logits.at(query_position, token_r)) -
                         static_cast<double>(baseline.logits.at(query_position, token_r_prime));
    result.ld_patched = static_cast<double>(patched.logits.at(query_position, token_r)) -
                        static_cast<double>(patched.logits.at(query_position, token_r_prime));
    result.effect = result.ld_patched - result.ld_baseline;
    return result;
}

namespace {

// Clean/corrupt pair for one depth bucket: both trees have the target path
// length, a branching root (a real first-step decision), and different
// first-step answers.
struct Pair {
    task::TaskInstance clean, corrupt;
};

bool usable(const task::TaskInstance& inst, int depth) {
    return static_cast<int>(inst.path.size()) - 1 == depth &&
           inst.tree.children[static_cast<size_t>(inst.tree.root)].size() >= 2;
}

std::optional<Pair> sample_pair(Rng& rng, int n_nodes, int depth, int budget) {
    std::optional<task::TaskInstance> clean;
    for (int attempt = 0; attempt < budget; ++attempt) {
        auto inst = task::make_instance(rng.next_u64(), n_nodes);
        if (!usable(inst, depth)) continue;
        if (!clean) {
            clean = std::move(inst);
            continue;
        }
        if (inst.path[1] == clean->path[1]) continue;  // needs a different answer
        return Pair{std::move(*clean), std::move(inst)};
    }
    return std::nullopt;
}

}  // namespace

std::vector<DepthEffect> register_patch_experiment(const model::Parameters& params,
                                                   const RegisterPatchOptions& options) {
    if (options.layer < 1 || options.layer > params.config.layers)
        throw InvalidArgument("patch layer exceeds the model depth");
    const int n = options.n_nodes;
    const task::TokenLayout layout(n);
    const task::Vocabulary vocab(n);
    const int max_depth = n - 1;

    // depth -> run -> per-sample effects
    std::vector<std::vector<std::vector<double>>> effects(
        static_cast<size_t>(max_depth) + 1,
        std::vector<std::vector<double>>(static_cast<size_t>(options.runs)));
    std::vector<int> exhausted(static_cast<size_t>(max_depth) + 1, 0);

    for (int run = 0; run < options.runs; ++run) {
        // Depth-stratified: cycle target depths across the run's samples.
        std::vector<int> depth_of_sample;
        for (int s = 0; s < options.samples_per_run; ++s)
            depth_of_sample.push_back(2 + s % (max_depth - 1));

        std::vector<double> sample_effect(depth_of_sample.size(),
                                          std::numeric_limits<double>::quiet_NaN());
        parallel_for(depth_of_sample.size(), [&](size_t lo, size_t hi) {
            for (size_t s = lo; s < hi; ++s) {
                const int depth = depth_of_sample[s];
                Rng rng(Rng::derive_seed(options.seed,
                                         (static_cast<uint64_t>(run) << 32) | s));
                auto pair = sample_pair(rng, n, depth, options.pair_budget);
                if (!pair) continue;

                const auto clean_seq = task::encode_instance(pair->clean);
                const auto clean_cache = model::forward(params, clean_seq.tokens);
                const auto hits = detect_register_positions(clean_cache, pair->clean,
                                                            options.register_threshold);
                if (hits.empty()) continue;
                std::vector<int> positions;
                for (const auto& h : hits) positions.push_back(h.position);

                const auto corrupt_seq = task::encode_instance(pair->corrupt);
                const auto corrupt_cache = model::forward(params, corrupt_seq.tokens);
                PatchSite site{options.layer, model::Site::ResidPost, positions};
                const auto spec = spec_from_cache({site}, corrupt_cache);
                const auto patched = model::forward(params, clean_seq.tokens, spec);

                const int q = layout.path_start;
                const int r = vocab.source_token(pair->clean.path[1]);
                const int r_prime = vocab.source_token(pair->corrupt.path[1]);
                const double base =
                    static_cast<double>(clean_cache.logits.at(q, r)) -
                    static_cast<double>(clean_cache.logits.at(q, r_prime));
                const double after = static_cast<double>(patched.logits.at(q, r)) -
                                     static_cast<double>(patched.logits.at(q, r_prime));
                sample_effect[s] = after - base;
            }
        });
        for (size_t s = 0; s < depth_of_sample.size(); ++s) {
            if (std::isnan(sample_effect[s])) {
                ++exhausted[static_cast<size_t>(depth_of_sample[s])];
                continue;
            }
            effects[static_cast<size_t>(depth_of_sample[s])][static_cast<size_t>(run)].push_back(
                sample_effect[s]);
        }
    }

    std::vector<DepthEffect> rows;
    for (int depth = 2; depth <= max_depth; ++depth) {
        DepthEffect row;
        row.depth = depth;
        std::vector<double> run_means;
        int samples = 0;
        for (int run = 0; run < options.runs; ++run) {
            const auto& xs = effects[static_cast<size_t>(depth)][static_cast<size_t>(run)];
            if (xs.empty()) continue;
            run_means.push_back(stats::mean(xs));
            samples += static_cast<int>(xs.size());
        }
        row.samples = samples;
        if (run_means.size() < 2) {
            row.omitted = true;
            row.note = "insufficient samples at this depth";
        } else {
            row.ci = stats::normal_ci(run_means);
            if (exhausted[static_cast<size_t>(depth)] > 0)
                row.note = std::to_string(exhausted[static_cast<size_t>(depth)]) +
                           " draws exhausted the pair budget";
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

model::ActivationCache attention_knockout(const model::Parameters& params,
                                          const std::vector<int>& tokens,
                                          const std::vector<std::pair<int, int>>& blocked,
                                          const std::vector<int>& layers) {
    model::InterventionSpec spec;
    for (int layer : layers) {
        for (const auto& [query, key] : blocked) {
            if (key > query) throw InvalidArgument("knockout pair violates causality");
            spec.actions.push_back(model::InterventionSpec::block_score(layer, query, {key}));
        }
    }
    return model::forward(params, tokens, spec);
}

KnockoutReport register_knockout_experiment(const model::Parameters& params,
                                            const std::vector<task::TaskInstance>& dataset,
                                            double threshold, int min_depth) {
    const int L = params.config.layers;
    KnockoutReport report;
    std::vector<double> deltas(dataset.size(), std::numeric_limits<double>::quiet_NaN());
    parallel_for(dataset.size(), [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            const auto& inst = dataset[i];
            if (static_cast<int>(inst.path.size()) - 1 < min_depth) continue;
            const task::TokenLayout layout(inst.tree.n_nodes);
            const task::Vocabulary vocab(inst.tree.n_nodes);
            const auto seq = task::encode_instance(inst);
            const auto baseline = model::forward(params, seq.tokens);
            const auto hits = detect_register_positions(baseline, inst, threshold);
            if (hits.empty()) continue;
            const int q = layout.path_start;
            std::vector<std::pair<int, int>> blocked;
            for (const auto& h : hits) {
                if (h.position <= q) blocked.emplace_back(q, h.position);
            }
            const auto knocked =
                attention_knockout(params, seq.tokens, blocked, {L - 1, L});
            const int r = vocab.source_token(inst.path[1]);
            deltas[i] = static_cast<double>(knocked.logits.at(q, r)) -
                        static_cast<double>(baseline.logits.at(q, r));
        }
    });
    double sum = 0;
    for (double d : deltas) {
        if (std::isnan(d)) continue;
        ++report.instances;
        if (d < 0) ++report.lowered;
        sum += d;
    }
    report.mean_delta = report.instances ? sum / report.instances : 0.0;
    return report;
}

}  // namespace backchain::interp
