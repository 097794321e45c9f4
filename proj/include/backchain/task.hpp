#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "backchain/rng.hpp"

namespace backchain::task {

// Rooted labeled tree. Children lists preserve the order produced by the
// sampler; identity for dataset dedup purposes ignores that order (see
// canonical_tree_key), uniformity accounting keeps it (ordered_tree_key).
struct Tree {
    int n_nodes = 0;
    int root = -1;
    std::vector<int> parent;                 // parent[child]; -1 for root
    std::vector<std::vector<int>> children;  // ordered

    bool is_leaf(int node) const { return children[static_cast<size_t>(node)].empty(); }
    int depth(int node) const;  // edges from root
    void validate() const;      // throws InvalidArgument on a broken invariant
};

enum class EdgeOrder { Shuffled, Backward, Forward };

std::string to_string(EdgeOrder order);
EdgeOrder edge_order_from_string(const std::string& s);

struct TaskInstance {
    Tree tree;
    int goal = -1;
    std::vector<int> path;        // root ... goal
    std::vector<int> edge_order;  // permutation over canonical_edges indices
    uint64_t seed = 0;

    void validate() const;
};

// Canonical edge list: (parent, child) for non-root children ascending.
std::vector<std::pair<int, int>> canonical_edges(const Tree& tree);
// Edges in presentation order (canonical list permuted by edge_order).
std::vector<std::pair<int, int>> presentation_edges(const TaskInstance& instance);

// Token ids for a given node count n: sources 0..n-1, targets n..2n-1
// ("->N" forms), then ",", "|", PAD. n=16 gives the 35-token vocabulary.
struct Vocabulary {
    explicit Vocabulary(int n_nodes = 16);

    int n_nodes;
    int size;

    int source_token(int node) const { return node; }
    int target_token(int node) const { return n_nodes + node; }
    int comma() const { return 2 * n_nodes; }
    int task_sep() const { return 2 * n_nodes + 1; }
    int pad() const { return 2 * n_nodes + 2; }

    bool is_source(int id) const { return id >= 0 && id < n_nodes; }
    bool is_target(int id) const { return id >= n_nodes && id < 2 * n_nodes; }
    bool is_node(int id) const { return id >= 0 && id < 2 * n_nodes; }
    int node_of(int id) const { return is_target(id) ? id - n_nodes : id; }

    std::string spell(int id) const;  // "7", "->7", ",", "|", "#"
};

// Fixed positions of the prompt: (n-1) [src, tgt, ","] triples, the goal in
// target form, "|", then the path in source form, PAD-filled to context.
struct TokenLayout {
    explicit TokenLayout(int n_nodes = 16);

    int n_nodes;
    int edge_region_end;  // 3*(n-1)
    int goal_position;    // 45 at n=16
    int sep_position;
    int path_start;       // 47 at n=16
    int context;          // 4n-1; 63 at n=16

    bool in_edge_region(int pos) const { return pos >= 0 && pos < edge_region_end; }
    bool is_source_position(int pos) const { return in_edge_region(pos) && pos % 3 == 0; }
    bool is_target_position(int pos) const { return in_edge_region(pos) && pos % 3 == 1; }
    bool is_comma_position(int pos) const { return in_edge_region(pos) && pos % 3 == 2; }
};

enum class Region : uint8_t { EdgeSource, EdgeTarget, Separator, Goal, TaskSep, Path, Pad };

struct TokenSequence {
    std::vector<int> tokens;
    std::vector<uint8_t> loss_mask;
    std::vector<Region> regions;
    int goal_position = -1;
    int path_start = -1;

    int length() const { return static_cast<int>(tokens.size()); }
};

// Uniform over labeled ordered (plane) trees with n nodes: uniform shape by
// exact Catalan-weighted splits, labels by a uniform permutation.
Tree sample_tree(Rng& rng, int n_nodes);

// Goal uniform over leaves; path recovered by parent-chain ascent.
std::pair<int, std::vector<int>> choose_goal_and_path(Rng& rng, const Tree& tree);

std::vector<int> shuffle_edges(Rng& rng, const Tree& tree);
std::vector<int> make_edge_order(Rng& rng, const Tree& tree, EdgeOrder order);

TaskInstance make_instance(uint64_t seed, int n_nodes, EdgeOrder order = EdgeOrder::Shuffled);

TokenSequence encode_instance(const TaskInstance& instance);
// Inverse of encode_instance; tolerates a truncated path (decode in
// progress). Throws ParseError at the first violating position.
TaskInstance decode_tokens(const std::vector<int>& tokens, int n_nodes = 16);

// Identity hash over the unordered labeled edge set (train/test dedup).
uint64_t canonical_tree_key(const Tree& tree);
// Hash including child order (sampling-distribution accounting).
uint64_t ordered_tree_key(const Tree& tree);

struct DatasetParams {
    uint64_t seed = 0;
    int count = 0;
    int n_nodes = 16;
    EdgeOrder order = EdgeOrder::Shuffled;
};

std::vector<TaskInstance> generate_dataset(const DatasetParams& params);

// JSONL, one instance per line; manifest JSON written next to it.
void write_dataset(const std::vector<TaskInstance>& instances, const DatasetParams& params,
                   const std::string& jsonl_path, const std::string& manifest_path);
void build_dataset(const DatasetParams& params, const std::string& jsonl_path,
                   const std::string& manifest_path);
std::vector<TaskInstance> read_dataset(const std::string& jsonl_path);

std::string instance_to_json_line(const TaskInstance& instance);
TaskInstance instance_from_json_line(const std::string& line);

}  // namespace backchain::task
