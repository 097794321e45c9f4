#include "backchain/interp/scrub.hpp"

#include <cmath>
#include <map>

#include "backchain/errors.hpp"
#include "backchain/interp/registers.hpp"
#include "backchain/oracle.hpp"
#include "backchain/threading.hpp"
#include "../model/kernels.hpp"

namespace backchain::interp {

double loss_recovered(double l_scrubbed, double l_random, double l_model) {
    const double denom = l_model - l_random;
    if (denom == 0) throw InvalidArgument("degenerate recovery: L_model equals L_random");
    return (l_scrubbed - l_random) / denom;
}

std::optional<int> scrub_key(const task::Tree& tree, int goal, int layer) {
    return oracle::ancestor_at(tree, goal, layer - 1);
}

Mat<float> head_position_contributions(const model::Parameters& params,
                                       const model::ActivationCache& cache, int layer,
                                       int query) {
    const auto& config = params.config;
    if (layer < 1 || layer > config.layers) throw InvalidArgument("layer out of range");
    if (query < 0 || query >= cache.length) throw InvalidArgument("query out of range");
    const auto& lp = params.layers[static_cast<size_t>(layer) - 1];
    const auto& stream = cache.resid[static_cast<size_t>(layer) - 1];
    const int d = config.d_model;

    Mat<float> contributions(cache.length, d);
    std::vector<float> v(static_cast<size_t>(d)), ln_row(static_cast<size_t>(d));
    for (int k = 0; k <= query; ++k) {
        const float a = cache.attn_pattern[static_cast<size_t>(layer) - 1].at(query, k);
        const float* x = stream.row(k);
        if (config.norm == model::Norm::PreLn) {
            model::layer_norm_row<float>(x, ln_row.data(), lp.ln1_g.data(), lp.ln1_b.data(), d,
                                         nullptr, nullptr);
            x = ln_row.data();
        }
        // v_k = x W_V + b_V, then through W_O with the bias share folded in:
        // contribution_k = A[q,k] * (v_k W_O + b_O); rows sum to the head
        // output exactly because attention rows sum to one.
        for (int j = 0; j < d; ++j) {
            float acc = lp.b_v[static_cast<size_t>(j)];
            for (int c = 0; c < d; ++c) acc += x[c] * lp.w_v.at(c, j);
            v[static_cast<size_t>(j)] = acc;
        }
        float* out = contributions.row(k);
        for (int j = 0; j < d; ++j) {
            float acc = lp.b_o[static_cast<size_t>(j)];
            for (int c = 0; c < d; ++c) acc += v[static_cast<size_t>(c)] * lp.w_o.at(c, j);
            out[j] = a * acc;
        }
    }
    return contributions;
}

namespace {

struct DonorOutputs {
    // Per layer: the replacement attention output row at the query position.
    std::vector<std::vector<float>> rows;
    bool complete = true;
    int attempts = 0;
};

// Draw fresh trees until one shares the layer's equivalence key; cache its
// attention output at the first prediction position.
DonorOutputs find_donors(const model::Parameters& params, const task::TaskInstance& instance,
                         const ScrubHypothesis& hyp, uint64_t stream) {
    const auto& config = params.config;
    const int n = instance.tree.n_nodes;
    const task::TokenLayout layout(n);
    const int q = layout.path_start;
    DonorOutputs out;
    out.rows.assign(static_cast<size_t>(config.layers), {});
    Rng rng(Rng::derive_seed(hyp.seed, stream));

    for (int layer = 1; layer <= config.layers; ++layer) {
        const auto want = scrub_key(instance.tree, instance.goal, layer);
        bool found = false;
        for (int attempt = 0; attempt < hyp.donor_budget; ++attempt) {
            ++out.attempts;
            const auto donor = task::make_instance(rng.next_u64(), n);
            if (scrub_key(donor.tree, donor.goal, layer) != want) continue;
            const auto seq = task::encode_instance(donor);
            const auto cache = model::forward(params, seq.tokens);
            const auto& row_src = cache.attn_out[static_cast<size_t>(layer) - 1];
            out.rows[static_cast<size_t>(layer) - 1].assign(row_src.row(q),
                                                            row_src.row(q) + row_src.cols);
            if (hyp.lookahead_constraints && layer >= config.layers - 1) {
                // Keep the clean run's contributions from target-node and
                // register positions; resample only the rest.
                const auto clean_seq = task::encode_instance(instance);
                const auto clean_cache = model::forward(params, clean_seq.tokens);
                const auto clean_contrib =
                    head_position_contributions(params, clean_cache, layer, q);
                const auto donor_contrib = head_position_contributions(params, cache, layer, q);
                std::vector<uint8_t> preserved(static_cast<size_t>(layout.context), 0);
                for (int p = 1; p < layout.edge_region_end; p += 3)
                    preserved[static_cast<size_t>(p)] = 1;  // edge targets
                for (const auto& hit : detect_register_positions(clean_cache, instance,
                                                                 hyp.register_threshold))
                    preserved[static_cast<size_t>(hit.position)] = 1;
                auto& row = out.rows[static_cast<size_t>(layer) - 1];
                for (int k = 0; k <= q; ++k) {
                    if (!preserved[static_cast<size_t>(k)]) continue;
                    for (int j = 0; j < static_cast<int>(row.size()); ++j)
                        row[static_cast<size_t>(j)] +=
                            clean_contrib.at(k, j) - donor_contrib.at(k, j);
                }
            }
            found = true;
            break;
        }
        if (!found) {
            out.complete = false;
            return out;
        }
    }
    return out;
}

}  // namespace

ScrubResult causal_scrub(const model::Parameters& params, const ScrubHypothesis& hypothesis,
                         const std::vector<task::TaskInstance>& dataset) {
    if (dataset.empty()) throw InvalidArgument("causal scrub needs a dataset");
    const auto& config = params.config;
    const int n = dataset[0].tree.n_nodes;
    const task::TokenLayout layout(n);
    const double l_random = std::log(static_cast<double>(config.vocab));
    const int q = layout.path_start;

    struct PerInstance {
        int depth = 0;
        double l_model = 0;
        double l_scrubbed = 0;
        bool skipped = false;
    };
    std::vector<PerInstance> results(dataset.size());

    parallel_for(dataset.size(), [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            const auto& instance = dataset[i];
            PerInstance& res = results[i];
            res.depth = static_cast<int>(instance.path.size()) - 1;

            const auto seq = task::encode_instance(instance);
            std::vector<uint8_t> first_only(seq.tokens.size(), 0);
            first_only[static_cast<size_t>(q)] = 1;

            const auto clean = model::forward(params, seq.tokens);
            res.l_model = model::sequence_loss(clean.logits, seq.tokens, first_only);

            const auto donors = find_donors(params, instance, hypothesis, i);
            if (!donors.complete) {
                res.skipped = true;
                continue;
            }
            model::InterventionSpec spec;
            for (int layer = 1; layer <= config.layers; ++layer) {
                Mat<float> payload(1, config.d_model);
                std::copy(donors.rows[static_cast<size_t>(layer) - 1].begin(),
                          donors.rows[static_cast<size_t>(layer) - 1].end(), payload.row(0));
                spec.actions.push_back(model::InterventionSpec::replace_at(
                    layer, model::Site::AttnOut, {q}, std::move(payload)));
            }
            const auto scrubbed = model::forward(params, seq.tokens, spec);
            res.l_scrubbed = model::sequence_loss(scrubbed.logits, seq.tokens, first_only);
        }
    });

    std::map<int, ScrubRow> by_depth;
    double model_sum = 0, scrub_sum = 0;
    int used = 0, skipped = 0;
    for (const auto& res : results) {
        ScrubRow& row = by_depth[res.depth];
        row.depth = res.depth;
        row.l_random = l_random;
        if (res.skipped) {
            ++row.skipped;
            ++skipped;
            continue;
        }
        row.l_model += res.l_model;
        row.l_scrubbed += res.l_scrubbed;
        ++row.count;
        model_sum += res.l_model;
        scrub_sum += res.l_scrubbed;
        ++used;
    }

    ScrubResult result;
    for (auto& [depth, row] : by_depth) {
        if (row.count > 0) {
            row.l_model /= row.count;
            row.l_scrubbed /= row.count;
            row.l_cs = loss_recovered(row.l_scrubbed, row.l_random, row.l_model);
        }
        result.rows.push_back(row);
    }
    result.total = used;
    result.skipped = skipped;
    if (used > 0)
        result.overall_l_cs = loss_recovered(scrub_sum / used, l_random, model_sum / used);
    return result;
}

}  // namespace backchain::interp
