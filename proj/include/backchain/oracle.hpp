#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "backchain/task.hpp"

namespace backchain::oracle {

// Exact integers up to ~3.4e38; counting results can exceed 64 bits
// (labeled_tree_count(15) ~ 2e20).
using BigCount = unsigned __int128;

std::string to_decimal(BigCount value);

// n-th Catalan number, exact. Throws InvalidArgument past the representable
// range (a big-integer path would be required beyond that).
BigCount catalan_number(int n);
uint64_t catalan_u64(int n);  // convenience; throws if it does not fit

// Number of labeled ordered trees with n+1 nodes: (n+1)! * C(n).
BigCount labeled_tree_count(int n);

// Unique simple path a -> b via the lowest common ancestor.
std::vector<int> unique_path(const task::Tree& tree, int a, int b);

// k-th ancestor; nullopt when the chain leaves the root.
std::optional<int> ancestor_at(const task::Tree& tree, int node, int k);

struct ChildInfo {
    int node;
    bool is_leaf;
};
std::vector<ChildInfo> children_and_leaves(const task::Tree& tree, int node);

// Breadth-first path for cross-checking generated paths.
std::vector<int> bfs_path(const task::Tree& tree, int from, int to);

// Executable form of the backward-chaining causal model: chain up from the
// goal within the depth budget, merge register subpaths that overlap the
// chain, otherwise fall back to one-step lookahead (non-leaf children
// ranked above leaves).
struct HighLevelState {
    std::vector<int> main_chain;                   // deepest ancestor ... goal
    std::vector<std::vector<int>> register_chains; // each: top ancestor ... subgoal
    std::vector<int> lookahead_ranking;            // children of current, best first
};

struct HighLevelConfig {
    int depth_budget = 5;            // L-1 edges above the goal
    int register_depth = 5;          // chain length per register subgoal
};

constexpr int kUnlimitedDepth = 1 << 20;

HighLevelState high_level_state(const task::Tree& tree, int goal, int current,
                                const std::vector<int>& register_subgoals,
                                const HighLevelConfig& config);

// Ranked candidates for the next path node; front() is the prediction.
std::vector<int> high_level_next_token(const task::Tree& tree, int goal, int current,
                                       const std::vector<int>& register_subgoals,
                                       const HighLevelConfig& config);

// Uniform random subgoals for model-free analysis (non-leaf nodes).
std::vector<int> random_subgoals(Rng& rng, const task::Tree& tree, int count);

}  // namespace backchain::oracle
