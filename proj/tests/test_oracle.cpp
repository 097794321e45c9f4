#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "backchain/errors.hpp"
#include "backchain/oracle.hpp"
#include "backchain/task.hpp"
#include "test_util.hpp"

using namespace backchain;
using namespace backchain::oracle;

namespace {

// Independent binomial route: C(n) = binom(2n, n) / (n + 1).
BigCount catalan_via_binomial(int n) {
    std::vector<std::vector<BigCount>> pascal(static_cast<size_t>(2 * n + 1));
    for (size_t r = 0; r < pascal.size(); ++r) {
        pascal[r].assign(r + 1, 1);
        for (size_t c = 1; c < r; ++c) pascal[r][c] = pascal[r - 1][c - 1] + pascal[r - 1][c];
    }
    return pascal[static_cast<size_t>(2 * n)][static_cast<size_t>(n)] / BigCount(n + 1);
}

}  // namespace

TEST_CASE("catalan_number: base cases and pinned values") {
    CHECK(catalan_number(0) == 1);
    CHECK(catalan_number(1) == 1);
    CHECK(catalan_number(3) == 5);
    CHECK(catalan_u64(15) == 9694845ULL);
    CHECK(to_decimal(catalan_number(15)) == "9694845");
}

TEST_CASE("catalan_number matches enumeration of ordered shapes at small n") {
    // Plane trees with n+1 nodes are counted by C(n).
    for (int nodes = 1; nodes <= 5; ++nodes) {
        const auto shapes = testutil::enumerate_shapes(nodes);
        CHECK(BigCount(shapes.size()) == catalan_number(nodes - 1));
    }
}

TEST_CASE("catalan recurrence C(n+1) = sum C(i)C(n-i) for n <= 12") {
    for (int n = 0; n <= 12; ++n) {
        BigCount sum = 0;
        for (int i = 0; i <= n; ++i) sum += catalan_number(i) * catalan_number(n - i);
        CHECK(sum == catalan_number(n + 1));
    }
}

TEST_CASE("catalan_number agrees with the binomial formula") {
    for (int n : {2, 5, 10, 15, 20}) {
        CHECK(catalan_number(n) == catalan_via_binomial(n));
    }
}

TEST_CASE("labeled_tree_count: pinned values and enumeration cross-check") {
    CHECK(labeled_tree_count(1) == 2);
    CHECK(labeled_tree_count(3) == 120);
    for (int nodes = 2; nodes <= 4; ++nodes) {
        const auto labeled = testutil::enumerate_labeled_trees(nodes);
        CHECK(BigCount(labeled.size()) == labeled_tree_count(nodes - 1));
    }
    // (n+1)! * C(n) at n=15; ~2.03e20 motivates the no-memorization claim.
    BigCount fact16 = 1;
    for (int k = 2; k <= 16; ++k) fact16 *= BigCount(k);
    CHECK(labeled_tree_count(15) == fact16 * BigCount(9694845));
}

TEST_CASE("unique_path: endpoints, chains, reversal") {
    const auto chain = testutil::tree_from_edges(3, {{0, 1}, {1, 2}});
    CHECK(unique_path(chain, 0, 0) == std::vector<int>{0});
    CHECK(unique_path(chain, 0, 2) == std::vector<int>{0, 1, 2});

    Rng rng(21);
    for (int i = 0; i < 500; ++i) {
        const auto t = task::sample_tree(rng, 16);
        const int a = rng.below_int(16), b = rng.below_int(16);
        auto fwd = unique_path(t, a, b);
        auto rev = unique_path(t, b, a);
        std::reverse(rev.begin(), rev.end());
        CHECK(fwd == rev);
    }
}

TEST_CASE("unique_path agrees with breadth-first search") {
    Rng rng(33);
    for (int i = 0; i < 10000; ++i) {
        const auto t = task::sample_tree(rng, 16);
        const int a = rng.below_int(16), b = rng.below_int(16);
        CHECK(unique_path(t, a, b) == bfs_path(t, a, b));
    }
}

TEST_CASE("ancestor_at: basics and depth identity") {
    const auto chain = testutil::tree_from_edges(4, {{0, 1}, {1, 2}, {2, 3}});
    CHECK(ancestor_at(chain, 3, 0) == 3);
    CHECK(ancestor_at(chain, 3, 2) == 1);
    CHECK(ancestor_at(chain, 3, 3) == 0);
    CHECK(!ancestor_at(chain, 3, 4).has_value());

    Rng rng(17);
    for (int i = 0; i < 1000; ++i) {
        const auto t = task::sample_tree(rng, 12);
        for (int v = 0; v < t.n_nodes; ++v) {
            CHECK(ancestor_at(t, v, t.depth(v)) == t.root);
        }
    }
}

TEST_CASE("children_and_leaves") {
    const auto t = testutil::tree_from_edges(4, {{0, 1}, {0, 2}, {1, 3}});
    CHECK(children_and_leaves(t, 3).empty());
    const auto at_root = children_and_leaves(t, 0);
    REQUIRE(at_root.size() == 2);
    CHECK(at_root[0].node == 1);
    CHECK(at_root[0].is_leaf == false);
    CHECK(at_root[1].node == 2);
    CHECK(at_root[1].is_leaf == true);
}

TEST_CASE("high_level_next_token: complete chain always answers correctly") {
    // Within the depth budget the ancestor chain determines the parent step.
    for (int i = 0; i < 2000; ++i) {
        const auto inst = task::make_instance(static_cast<uint64_t>(i), 16);
        HighLevelConfig config;
        config.depth_budget = kUnlimitedDepth;
        for (size_t step = 0; step + 1 < inst.path.size(); ++step) {
            const auto ranked =
                high_level_next_token(inst.tree, inst.goal, inst.path[step], {}, config);
            REQUIRE(!ranked.empty());
            CHECK(ranked.front() == inst.path[step + 1]);
        }
    }
}

TEST_CASE("high_level_next_token: register subpath bridges a deep chain") {
    // Chain 0-1-2-...-9; goal 9 at depth 9, budget 3 covers ancestors {6,7,8}.
    std::vector<std::pair<int, int>> edges;
    for (int v = 0; v + 1 < 10; ++v) edges.emplace_back(v, v + 1);
    const auto t = testutil::tree_from_edges(10, edges);
    HighLevelConfig config;
    config.depth_budget = 3;
    config.register_depth = 3;

    // Without a bridge the current node 0 is off the chain; fallback ranks
    // its only child first.
    auto ranked = high_level_next_token(t, 9, 0, {}, config);
    CHECK(ranked == std::vector<int>{1});  // lookahead: single child

    // With subgoal 6 the register chain 3-4-5-6 overlaps the main chain at 6
    // and bridging reaches node 3; current node 3 answers exactly.
    ranked = high_level_next_token(t, 9, 3, {6}, config);
    CHECK(ranked.front() == 4);

    // Chaining registers: subgoals 6 and 3 extend coverage down to 0.
    ranked = high_level_next_token(t, 9, 0, {6, 3}, config);
    CHECK(ranked.front() == 1);
}

TEST_CASE("high_level_next_token: lookahead ranks non-leaf children first") {
    // Node 1 has leaf child 3 and non-leaf child 2; goal far below 2.
    const auto t = testutil::tree_from_edges(
        8, {{0, 1}, {1, 2}, {1, 3}, {2, 4}, {4, 5}, {5, 6}, {6, 7}});
    HighLevelConfig config;
    config.depth_budget = 2;  // chain covers {5, 6, 7} only
    const auto ranked = high_level_next_token(t, 7, 1, {}, config);
    REQUIRE(ranked.size() == 2);
    CHECK(ranked[0] == 2);
    CHECK(ranked[1] == 3);
}

TEST_CASE("random_subgoals picks non-leaf nodes") {
    const auto t = testutil::tree_from_edges(4, {{0, 1}, {1, 2}, {2, 3}});
    Rng rng(5);
    for (int sub : random_subgoals(rng, t, 20)) {
        CHECK(!t.is_leaf(sub));
    }
}
