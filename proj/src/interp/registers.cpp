#include "backchain/interp/registers.hpp"

#include <algorithm>

#include "backchain/errors.hpp"
#include "backchain/threading.hpp"

namespace backchain::interp {

std::vector<RegisterHit> detect_register_positions(const model::ActivationCache& cache,
                                                   const task::TaskInstance& instance,
                                                   double threshold, bool content_filter) {
    const int n = instance.tree.n_nodes;
    const task::Vocabulary vocab(n);
    const task::TokenLayout layout(n);
    const auto seq = task::encode_instance(instance);
    const auto& pattern = cache.attn_pattern[0];  // layer 1

    std::vector<RegisterHit> hits;
    for (int p = 0; p < layout.edge_region_end && p < cache.length; ++p) {
        // Strongest node-token key at layer 1 (ties toward the earliest).
        int best = -1;
        float best_w = -1.0f;
        for (int k = 0; k <= p; ++k) {
            if (!vocab.is_node(seq.tokens[static_cast<size_t>(k)])) continue;
            const float w = pattern.at(p, k);
            if (w > best_w) {
                best_w = w;
                best = k;
            }
        }
        if (best < 0 || static_cast<double>(best_w) < threshold) continue;
        if (content_filter && !layout.is_comma_position(p)) {
            // Node positions count only when the attended node lies outside
            // their own edge; attending the own edge is concatenation, not
            // working memory.
            if (best / 3 == p / 3) continue;
        }
        RegisterHit hit;
        hit.position = p;
        hit.attended_position = best;
        hit.weight = best_w;
        hit.subgoal = vocab.node_of(seq.tokens[static_cast<size_t>(best)]);
        hits.push_back(hit);
    }
    return hits;
}

SubgoalStats subgoal_statistics(const model::Parameters& params,
                                const std::vector<task::TaskInstance>& dataset,
                                const SubgoalStatsOptions& options) {
    if (dataset.empty()) throw InvalidArgument("subgoal statistics need a dataset");
    const int n = dataset[0].tree.n_nodes;
    const task::TokenLayout layout(n);

    // Per-instance selections, computed in parallel, aggregated in order.
    struct Selection {
        std::vector<std::pair<int, int>> picks;  // (position, subgoal)
    };
    std::vector<Selection> selections(dataset.size());
    parallel_for(dataset.size(), [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            const auto seq = task::encode_instance(dataset[i]);
            const auto cache = model::forward(params, seq.tokens);
            for (const auto& hit :
                 detect_register_positions(cache, dataset[i], options.threshold)) {
                selections[i].picks.emplace_back(hit.position, hit.subgoal);
            }
        }
    });

    auto aggregate = [&](const std::vector<uint8_t>& keep) {
        SubgoalStats stats;
        std::vector<std::map<int, int>> counts(static_cast<size_t>(layout.edge_region_end));
        int trees = 0;
        for (size_t i = 0; i < dataset.size(); ++i) {
            if (!keep[i]) continue;
            ++trees;
            for (const auto& [pos, sub] : selections[i].picks)
                ++counts[static_cast<size_t>(pos)][sub];
        }
        stats.trees = trees;
        for (int p = 0; p < layout.edge_region_end; ++p) {
            const auto& c = counts[static_cast<size_t>(p)];
            if (c.empty()) continue;
            SubgoalStats::PositionRow row;
            row.position = p;
            int total = 0;
            for (const auto& [sub, count] : c) {
                row.subgoal_ratio[sub] = static_cast<double>(count) / std::max(1, trees);
                total += count;
                if (count > row.modal_ratio * trees) {
                    row.modal_ratio = static_cast<double>(count) / std::max(1, trees);
                    row.modal_subgoal = sub;
                }
            }
            row.selected_ratio = static_cast<double>(total) / std::max(1, trees);
            stats.rows.push_back(std::move(row));
        }
        return stats;
    };

    std::vector<uint8_t> all(dataset.size(), 1);
    SubgoalStats unfiltered = aggregate(all);

    // Failure-mode accounting for the modal subgoal of each position.
    std::map<int, int> modal_of;
    for (const auto& row : unfiltered.rows) modal_of[row.position] = row.modal_subgoal;
    for (size_t i = 0; i < dataset.size(); ++i) {
        const auto& tree = dataset[i].tree;
        const auto seq = task::encode_instance(dataset[i]);
        const task::Vocabulary vocab(n);
        for (const auto& [pos, modal] : modal_of) {
            bool before = false;
            for (int k = 0; k <= pos; ++k) {
                if (vocab.is_node(seq.tokens[static_cast<size_t>(k)]) &&
                    vocab.node_of(seq.tokens[static_cast<size_t>(k)]) == modal) {
                    before = true;
                    break;
                }
            }
            if (!before) ++unfiltered.modal_absent_before;
            else if (tree.is_leaf(modal)) ++unfiltered.modal_is_leaf;
        }
    }
    if (!options.filter_modal_usable) return unfiltered;

    // Filtered variant: per position, keep trees where the modal subgoal is
    // a usable target (non-leaf, occurring before the position). Aggregation
    // is per position, so build row-by-row.
    SubgoalStats filtered;
    filtered.modal_absent_before = unfiltered.modal_absent_before;
    filtered.modal_is_leaf = unfiltered.modal_is_leaf;
    const task::Vocabulary vocab(n);
    for (const auto& urow : unfiltered.rows) {
        const int pos = urow.position;
        const int modal = urow.modal_subgoal;
        std::map<int, int> counts;
        int trees = 0;
        for (size_t i = 0; i < dataset.size(); ++i) {
            const auto& tree = dataset[i].tree;
            if (tree.is_leaf(modal)) continue;
            const auto seq = task::encode_instance(dataset[i]);
            bool before = false;
            for (int k = 0; k <= pos; ++k) {
                if (vocab.is_node(seq.tokens[static_cast<size_t>(k)]) &&
                    vocab.node_of(seq.tokens[static_cast<size_t>(k)]) == modal) {
                    before = true;
                    break;
                }
            }
            if (!before) continue;
            ++trees;
            for (const auto& [p, sub] : selections[i].picks) {
                if (p == pos) ++counts[sub];
            }
        }
        if (trees == 0) continue;
        SubgoalStats::PositionRow row;
        row.position = pos;
        int total = 0;
        for (const auto& [sub, count] : counts) {
            row.subgoal_ratio[sub] = static_cast<double>(count) / trees;
            total += count;
            if (row.subgoal_ratio[sub] > row.modal_ratio) {
                row.modal_ratio = row.subgoal_ratio[sub];
                row.modal_subgoal = sub;
            }
        }
        row.selected_ratio = static_cast<double>(total) / trees;
        filtered.rows.push_back(std::move(row));
        filtered.trees = std::max(filtered.trees, trees);
    }
    return filtered;
}

}  // namespace backchain::interp
