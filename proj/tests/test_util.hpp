#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <vector>

#include "backchain/task.hpp"

namespace backchain::testutil {

// Independent enumeration oracle: every plane (ordered) tree shape with
// `n` nodes, as parent/children arrays over structural indices.
struct Shape {
    std::vector<int> parent;
    std::vector<std::vector<int>> children;
};

// Recursive generation: a tree is a root plus an ordered forest.
inline std::vector<Shape> enumerate_shapes(int n) {
    if (n == 1) {
        Shape s;
        s.parent = {-1};
        s.children = {{}};
        return {s};
    }
    // Compose the root with every ordered forest filling n-1 nodes.
    std::vector<Shape> result;
    // forests(k): list of shapes-with-virtual-root where parent[0] is the root.
    std::function<void(Shape, int, std::vector<int>, std::vector<Shape>&)> rec =
        [&](Shape acc, int remaining, std::vector<int> /*unused*/, std::vector<Shape>& sink) {
            if (remaining == 0) {
                sink.push_back(std::move(acc));
                return;
            }
            for (int first = 1; first <= remaining; ++first) {
                // every shape for the first subtree of size `first`
                for (const auto& sub : enumerate_shapes(first)) {
                    Shape next = acc;
                    const int offset = static_cast<int>(next.parent.size());
                    next.children[0].push_back(offset);
                    for (size_t i = 0; i < sub.parent.size(); ++i) {
                        const int p = sub.parent[i];
                        next.parent.push_back(p < 0 ? 0 : p + offset);
                        next.children.emplace_back();
                        for (int c : sub.children[i]) next.children.back().push_back(c + offset);
                    }
                    // fix child links of subtree root recorded above
                    rec(std::move(next), remaining - first, {}, sink);
                }
            }
        };
    Shape root;
    root.parent = {-1};
    root.children = {{}};
    rec(root, n - 1, {}, result);
    return result;
}

// All labeled ordered trees with n nodes; count must equal n! * C(n-1).
inline std::vector<task::Tree> enumerate_labeled_trees(int n) {
    std::vector<task::Tree> out;
    std::vector<int> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (const auto& shape : enumerate_shapes(n)) {
        std::vector<int> p = perm;
        std::sort(p.begin(), p.end());
        do {
            task::Tree tree;
            tree.n_nodes = n;
            tree.parent.assign(static_cast<size_t>(n), -1);
            tree.children.assign(static_cast<size_t>(n), {});
            tree.root = p[0];
            for (int idx = 0; idx < n; ++idx) {
                if (shape.parent[static_cast<size_t>(idx)] >= 0)
                    tree.parent[static_cast<size_t>(p[static_cast<size_t>(idx)])] =
                        p[static_cast<size_t>(shape.parent[static_cast<size_t>(idx)])];
                for (int c : shape.children[static_cast<size_t>(idx)])
                    tree.children[static_cast<size_t>(p[static_cast<size_t>(idx)])].push_back(
                        p[static_cast<size_t>(c)]);
            }
            out.push_back(std::move(tree));
        } while (std::next_permutation(p.begin(), p.end()));
    }
    return out;
}

// Fixed-topology builder for hand-written cases: edges as (parent, child).
inline task::Tree tree_from_edges(int n, const std::vector<std::pair<int, int>>& edges) {
    task::Tree tree;
    tree.n_nodes = n;
    tree.parent.assign(static_cast<size_t>(n), -1);
    tree.children.assign(static_cast<size_t>(n), {});
    for (const auto& [p, c] : edges) {
        tree.parent[static_cast<size_t>(c)] = p;
        tree.children[static_cast<size_t>(p)].push_back(c);
    }
    for (int v = 0; v < n; ++v) {
        if (tree.parent[static_cast<size_t>(v)] < 0) tree.root = v;
    }
    return tree;
}

inline task::TaskInstance instance_from(const task::Tree& tree, int goal,
                                        std::vector<int> edge_order = {}) {
    task::TaskInstance inst;
    inst.tree = tree;
    inst.goal = goal;
    for (int cur = goal; cur >= 0; cur = tree.parent[static_cast<size_t>(cur)])
        inst.path.push_back(cur);
    std::reverse(inst.path.begin(), inst.path.end());
    if (edge_order.empty()) {
        inst.edge_order.resize(static_cast<size_t>(tree.n_nodes) - 1);
        std::iota(inst.edge_order.begin(), inst.edge_order.end(), 0);
    } else {
        inst.edge_order = std::move(edge_order);
    }
    return inst;
}

}  // namespace backchain::testutil
