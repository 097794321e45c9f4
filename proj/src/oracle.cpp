#include "backchain/oracle.hpp"

#include <algorithm>
#include <deque>
#include <limits>

#include "backchain/errors.hpp"

namespace backchain::oracle {

std::string to_decimal(BigCount value) {
    if (value == 0) return "0";
    std::string out;
    while (value > 0) {
        out.push_back(static_cast<char>('0' + static_cast<int>(value % 10)));
        value /= 10;
    }
    std::reverse(out.begin(), out.end());
    return out;
}

BigCount catalan_number(int n) {
    if (n < 0) throw InvalidArgument("catalan_number requires n >= 0");
    // C(0)=1, C(k+1) = C(k) * 2(2k+1) / (k+2); exact at every step.
    BigCount c = 1;
    constexpr BigCount kMax = ~BigCount(0);
    for (int k = 0; k < n; ++k) {
        const BigCount mul = BigCount(2) * (2 * static_cast<BigCount>(k) + 1);
        if (c > kMax / mul)
            throw InvalidArgument("catalan_number overflows 128 bits; big-integer path required");
        c = c * mul / static_cast<BigCount>(k + 2);
    }
    return c;
}

uint64_t catalan_u64(int n) {
    const BigCount c = catalan_number(n);
    if (c > std::numeric_limits<uint64_t>::max())
        throw InvalidArgument("catalan_number does not fit in 64 bits");
    return static_cast<uint64_t>(c);
}

BigCount labeled_tree_count(int n) {
    BigCount c = catalan_number(n);
    constexpr BigCount kMax = ~BigCount(0);
    for (int k = 2; k <= n + 1; ++k) {
        if (c > kMax / static_cast<BigCount>(k))
            throw InvalidArgument("labeled_tree_count overflows 128 bits; big-integer path required");
        c *= static_cast<BigCount>(k);
    }
    return c;
}

namespace {

std::vector<int> ancestors_inclusive(const task::Tree& tree, int node) {
    std::vector<int> chain{node};
    for (int cur = node; tree.parent[static_cast<size_t>(cur)] >= 0;) {
        cur = tree.parent[static_cast<size_t>(cur)];
        chain.push_back(cur);
    }
    return chain;  // node, parent, ..., root
}

void check_node(const task::Tree& tree, int node, const char* what) {
    if (node < 0 || node >= tree.n_nodes) throw InvalidArgument(std::string(what) + " out of range");
}

}  // namespace

std::vector<int> unique_path(const task::Tree& tree, int a, int b) {
    check_node(tree, a, "path endpoint");
    check_node(tree, b, "path endpoint");
    if (a == b) return {a};

    const auto up_a = ancestors_inclusive(tree, a);
    const auto up_b = ancestors_inclusive(tree, b);
    // Lowest common ancestor: walk both chains back from the root.
    size_t ia = up_a.size(), ib = up_b.size();
    while (ia > 0 && ib > 0 && up_a[ia - 1] == up_b[ib - 1]) {
        --ia;
        --ib;
    }
    // up_a[ia] == up_b[ib] is the LCA; ascend a's chain then descend b's.
    std::vector<int> path(up_a.begin(), up_a.begin() + static_cast<long>(ia) + 1);
    for (size_t i = ib; i-- > 0;) path.push_back(up_b[i]);
    return path;
}

std::optional<int> ancestor_at(const task::Tree& tree, int node, int k) {
    check_node(tree, node, "node");
    if (k < 0) throw InvalidArgument("ancestor_at requires k >= 0");
    int cur = node;
    for (int i = 0; i < k; ++i) {
        cur = tree.parent[static_cast<size_t>(cur)];
        if (cur < 0) return std::nullopt;
    }
    return cur;
}

std::vector<ChildInfo> children_and_leaves(const task::Tree& tree, int node) {
    check_node(tree, node, "node");
    std::vector<ChildInfo> out;
    for (int c : tree.children[static_cast<size_t>(node)]) out.push_back({c, tree.is_leaf(c)});
    return out;
}

std::vector<int> bfs_path(const task::Tree& tree, int from, int to) {
    check_node(tree, from, "path endpoint");
    check_node(tree, to, "path endpoint");
    std::vector<int> prev(static_cast<size_t>(tree.n_nodes), -2);
    std::deque<int> queue{from};
    prev[static_cast<size_t>(from)] = -1;
    while (!queue.empty()) {
        const int v = queue.front();
        queue.pop_front();
        if (v == to) break;
        // Undirected neighborhood: children plus parent.
        std::vector<int> nbrs = tree.children[static_cast<size_t>(v)];
        if (tree.parent[static_cast<size_t>(v)] >= 0) nbrs.push_back(tree.parent[static_cast<size_t>(v)]);
        for (int w : nbrs) {
            if (prev[static_cast<size_t>(w)] == -2) {
                prev[static_cast<size_t>(w)] = v;
                queue.push_back(w);
            }
        }
    }
    std::vector<int> path;
    for (int cur = to; cur != -1; cur = prev[static_cast<size_t>(cur)]) path.push_back(cur);
    std::reverse(path.begin(), path.end());
    return path;
}

HighLevelState high_level_state(const task::Tree& tree, int goal, int current,
                                const std::vector<int>& register_subgoals,
                                const HighLevelConfig& config) {
    check_node(tree, goal, "goal");
    check_node(tree, current, "current");

    HighLevelState state;
    // Main chain: ancestors of the goal, at most depth_budget edges up.
    const auto goal_up = ancestors_inclusive(tree, goal);
    const size_t main_len = std::min<size_t>(goal_up.size(),
                                             static_cast<size_t>(config.depth_budget) + 1);
    state.main_chain.assign(goal_up.begin(), goal_up.begin() + static_cast<long>(main_len));
    std::reverse(state.main_chain.begin(), state.main_chain.end());  // top ... goal

    for (int sub : register_subgoals) {
        if (sub < 0 || sub >= tree.n_nodes) continue;
        const auto up = ancestors_inclusive(tree, sub);
        const size_t len = std::min<size_t>(up.size(), static_cast<size_t>(config.register_depth) + 1);
        std::vector<int> chain(up.begin(), up.begin() + static_cast<long>(len));
        std::reverse(chain.begin(), chain.end());
        state.register_chains.push_back(std::move(chain));
    }

    for (const auto& info : children_and_leaves(tree, current)) {
        state.lookahead_ranking.push_back(info.node);
    }
    std::stable_sort(state.lookahead_ranking.begin(), state.lookahead_ranking.end(),
                     [&](int a, int b) {
                         const bool la = tree.is_leaf(a), lb = tree.is_leaf(b);
                         if (la != lb) return !la;  // non-leaf children first
                         return a < b;
                     });
    return state;
}

std::vector<int> high_level_next_token(const task::Tree& tree, int goal, int current,
                                       const std::vector<int>& register_subgoals,
                                       const HighLevelConfig& config) {
    const auto state = high_level_state(tree, goal, current, register_subgoals, config);

    // Known chain as child->parent links over goal ancestors; extend the top
    // with register chains that overlap until nothing merges.
    std::vector<int> chain = state.main_chain;  // top ... goal
    bool merged = true;
    while (merged) {
        merged = false;
        const int top = chain.front();
        for (const auto& reg : state.register_chains) {
            const auto hit = std::find(reg.begin(), reg.end(), top);
            if (hit == reg.end() || hit == reg.begin()) continue;
            // Nodes above `top` in the register chain are deeper ancestors.
            std::vector<int> extended(reg.begin(), hit);
            extended.insert(extended.end(), chain.begin(), chain.end());
            chain = std::move(extended);
            merged = true;
        }
    }

    const auto pos = std::find(chain.begin(), chain.end(), current);
    if (pos != chain.end() && pos + 1 != chain.end()) {
        return {*(pos + 1)};
    }
    return state.lookahead_ranking;
}

std::vector<int> random_subgoals(Rng& rng, const task::Tree& tree, int count) {
    std::vector<int> non_leaves;
    for (int v = 0; v < tree.n_nodes; ++v) {
        if (!tree.is_leaf(v)) non_leaves.push_back(v);
    }
    std::vector<int> out;
    for (int i = 0; i < count && !non_leaves.empty(); ++i) {
        out.push_back(non_leaves[rng.below(non_leaves.size())]);
    }
    return out;
}

}  // namespace backchain::oracle
