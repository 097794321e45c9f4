#include "backchain/task.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "backchain/digest.hpp"
#include "backchain/errors.hpp"
#include "backchain/oracle.hpp"

namespace backchain::task {

int Tree::depth(int node) const {
    int d = 0;
    for (int cur = node; parent[static_cast<size_t>(cur)] >= 0; cur = parent[static_cast<size_t>(cur)]) ++d;
    return d;
}

void Tree::validate() const {
    if (n_nodes < 1) throw InvalidArgument("tree must have at least one node");
    if (static_cast<int>(parent.size()) != n_nodes || static_cast<int>(children.size()) != n_nodes)
        throw InvalidArgument("tree field sizes disagree with n_nodes");
    int roots = 0;
    int edges = 0;
    for (int v = 0; v < n_nodes; ++v) {
        int p = parent[static_cast<size_t>(v)];
        if (p < 0) {
            ++roots;
            if (v != root) throw InvalidArgument("parentless node is not the declared root");
        } else {
            if (p >= n_nodes) throw InvalidArgument("parent id out of range");
            ++edges;
            const auto& sibs = children[static_cast<size_t>(p)];
            if (std::find(sibs.begin(), sibs.end(), v) == sibs.end())
                throw InvalidArgument("parent/children maps disagree");
        }
    }
    if (roots != 1) throw InvalidArgument("tree must have exactly one root");
    if (edges != n_nodes - 1) throw InvalidArgument("edge count must be n_nodes - 1");
    // Connectivity: every node must reach the root.
    for (int v = 0; v < n_nodes; ++v) {
        int cur = v;
        for (int hops = 0; parent[static_cast<size_t>(cur)] >= 0; ++hops) {
            if (hops > n_nodes) throw InvalidArgument("parent chain contains a cycle");
            cur = parent[static_cast<size_t>(cur)];
        }
        if (cur != root) throw InvalidArgument("node disconnected from root");
    }
}

std::string to_string(EdgeOrder order) {
    switch (order) {
        case EdgeOrder::Shuffled: return "shuffled";
        case EdgeOrder::Backward: return "backward";
        case EdgeOrder::Forward: return "forward";
    }
    return "shuffled";
}

EdgeOrder edge_order_from_string(const std::string& s) {
    if (s == "shuffled") return EdgeOrder::Shuffled;
    if (s == "backward") return EdgeOrder::Backward;
    if (s == "forward") return EdgeOrder::Forward;
    throw InvalidArgument("unknown edge order: " + s);
}

void TaskInstance::validate() const {
    tree.validate();
    if (goal < 0 || goal >= tree.n_nodes) throw InvalidArgument("goal out of range");
    if (goal == tree.root) throw InvalidArgument("goal must differ from root");
    if (!tree.is_leaf(goal)) throw InvalidArgument("goal must be a leaf");
    if (path.empty() || path.front() != tree.root || path.back() != goal)
        throw InvalidArgument("path must run root -> goal");
    for (size_t i = 0; i + 1 < path.size(); ++i) {
        if (tree.parent[static_cast<size_t>(path[i + 1])] != path[i])
            throw InvalidArgument("path step is not a parent->child edge");
    }
    if (static_cast<int>(edge_order.size()) != tree.n_nodes - 1)
        throw InvalidArgument("edge_order size mismatch");
    std::vector<bool> seen(edge_order.size(), false);
    for (int idx : edge_order) {
        if (idx < 0 || idx >= static_cast<int>(edge_order.size()) || seen[static_cast<size_t>(idx)])
            throw InvalidArgument("edge_order is not a permutation");
        seen[static_cast<size_t>(idx)] = true;
    }
}

std::vector<std::pair<int, int>> canonical_edges(const Tree& tree) {
    std::vector<std::pair<int, int>> edges;
    edges.reserve(static_cast<size_t>(tree.n_nodes) - 1);
    for (int v = 0; v < tree.n_nodes; ++v) {
        if (v != tree.root) edges.emplace_back(tree.parent[static_cast<size_t>(v)], v);
    }
    return edges;
}

std::vector<std::pair<int, int>> presentation_edges(const TaskInstance& instance) {
    auto canon = canonical_edges(instance.tree);
    std::vector<std::pair<int, int>> out;
    out.reserve(canon.size());
    for (int idx : instance.edge_order) out.push_back(canon[static_cast<size_t>(idx)]);
    return out;
}

Vocabulary::Vocabulary(int n) : n_nodes(n), size(2 * n + 3) {
    if (n < 2) throw InvalidArgument("vocabulary requires n_nodes >= 2");
}

std::string Vocabulary::spell(int id) const {
    if (is_source(id)) return std::to_string(id);
    if (is_target(id)) return "->" + std::to_string(id - n_nodes);
    if (id == comma()) return ",";
    if (id == task_sep()) return "|";
    if (id == pad()) return "#";
    throw InvalidArgument("token id out of range: " + std::to_string(id));
}

TokenLayout::TokenLayout(int n)
    : n_nodes(n),
      edge_region_end(3 * (n - 1)),
      goal_position(3 * (n - 1)),
      sep_position(3 * (n - 1) + 1),
      path_start(3 * (n - 1) + 2),
      context(4 * n - 1) {
    if (n < 2) throw InvalidArgument("layout requires n_nodes >= 2");
}

namespace {

// Catalan table as u64; covers recursive splits for n_nodes <= kMaxSampleNodes.
constexpr int kMaxSampleNodes = 32;

const std::vector<uint64_t>& catalan_table() {
    static const std::vector<uint64_t> table = [] {
        std::vector<uint64_t> t(kMaxSampleNodes);
        for (int i = 0; i < kMaxSampleNodes; ++i) t[static_cast<size_t>(i)] = oracle::catalan_u64(i);
        return t;
    }();
    return table;
}

// Appends a uniform plane forest with `total` nodes under `parent_idx`.
// Weight of candidate first-subtree size j: C(j-1) * C(total-j); the sum
// over j is exactly C(total).
void sample_forest(Rng& rng, int total, int parent_idx, std::vector<int>& parent_of_idx,
                   std::vector<std::vector<int>>& children_of_idx);

int sample_subtree(Rng& rng, int size, int parent_idx, std::vector<int>& parent_of_idx,
                   std::vector<std::vector<int>>& children_of_idx) {
    const int idx = static_cast<int>(parent_of_idx.size());
    parent_of_idx.push_back(parent_idx);
    children_of_idx.emplace_back();
    if (parent_idx >= 0) children_of_idx[static_cast<size_t>(parent_idx)].push_back(idx);
    sample_forest(rng, size - 1, idx, parent_of_idx, children_of_idx);
    return idx;
}

void sample_forest(Rng& rng, int total, int parent_idx, std::vector<int>& parent_of_idx,
                   std::vector<std::vector<int>>& children_of_idx) {
    const auto& cat = catalan_table();
    while (total > 0) {
        uint64_t r = rng.below(cat[static_cast<size_t>(total)]);
        int first = total;  // fallback guards rounding; loop always resolves
        for (int j = 1; j <= total; ++j) {
            const uint64_t w = cat[static_cast<size_t>(j - 1)] * cat[static_cast<size_t>(total - j)];
            if (r < w) {
                first = j;
                break;
            }
            r -= w;
        }
        sample_subtree(rng, first, parent_idx, parent_of_idx, children_of_idx);
        total -= first;
    }
}

}  // namespace

Tree sample_tree(Rng& rng, int n_nodes) {
    if (n_nodes < 2) throw InvalidArgument("sample_tree requires n_nodes >= 2");
    if (n_nodes > kMaxSampleNodes)
        throw InvalidArgument("sample_tree supports at most " + std::to_string(kMaxSampleNodes) +
                              " nodes (exact counting width)");

    // Shape over preorder indices, then a uniform label permutation.
    std::vector<int> parent_of_idx;
    std::vector<std::vector<int>> children_of_idx;
    parent_of_idx.reserve(static_cast<size_t>(n_nodes));
    sample_subtree(rng, n_nodes, -1, parent_of_idx, children_of_idx);

    std::vector<int> label(static_cast<size_t>(n_nodes));
    std::iota(label.begin(), label.end(), 0);
    rng.shuffle(label.data(), label.size());

    Tree tree;
    tree.n_nodes = n_nodes;
    tree.parent.assign(static_cast<size_t>(n_nodes), -1);
    tree.children.assign(static_cast<size_t>(n_nodes), {});
    tree.root = label[0];
    for (int idx = 0; idx < n_nodes; ++idx) {
        const int p = parent_of_idx[static_cast<size_t>(idx)];
        if (p >= 0) tree.parent[static_cast<size_t>(label[static_cast<size_t>(idx)])] = label[static_cast<size_t>(p)];
        for (int c : children_of_idx[static_cast<size_t>(idx)])
            tree.children[static_cast<size_t>(label[static_cast<size_t>(idx)])].push_back(label[static_cast<size_t>(c)]);
    }
    return tree;
}

std::pair<int, std::vector<int>> choose_goal_and_path(Rng& rng, const Tree& tree) {
    if (tree.n_nodes < 2) throw InvalidArgument("degenerate single-node tree has no goal");
    std::vector<int> leaves;
    for (int v = 0; v < tree.n_nodes; ++v) {
        if (v != tree.root && tree.is_leaf(v)) leaves.push_back(v);
    }
    if (leaves.empty()) throw InvalidArgument("tree has no leaf distinct from the root");
    const int goal = leaves[rng.below(leaves.size())];

    std::vector<int> path;
    for (int cur = goal; cur >= 0; cur = tree.parent[static_cast<size_t>(cur)]) path.push_back(cur);
    std::reverse(path.begin(), path.end());
    return {goal, path};
}

std::vector<int> shuffle_edges(Rng& rng, const Tree& tree) {
    return make_edge_order(rng, tree, EdgeOrder::Shuffled);
}

std::vector<int> make_edge_order(Rng& rng, const Tree& tree, EdgeOrder order) {
    tree.validate();
    const auto canon = canonical_edges(tree);
    std::vector<int> perm(canon.size());
    std::iota(perm.begin(), perm.end(), 0);
    if (order == EdgeOrder::Shuffled) {
        rng.shuffle(perm.data(), perm.size());
        return perm;
    }
    // Level order by child depth: backward starts at the deepest level and
    // ascends to the root, forward is the reverse.
    std::vector<int> depth_of(canon.size());
    for (size_t i = 0; i < canon.size(); ++i) depth_of[i] = tree.depth(canon[i].second);
    std::sort(perm.begin(), perm.end(), [&](int a, int b) {
        const int da = depth_of[static_cast<size_t>(a)], db = depth_of[static_cast<size_t>(b)];
        if (da != db) return order == EdgeOrder::Backward ? da > db : da < db;
        return canon[static_cast<size_t>(a)].second < canon[static_cast<size_t>(b)].second;
    });
    return perm;
}

TaskInstance make_instance(uint64_t seed, int n_nodes, EdgeOrder order) {
    Rng rng(seed);
    TaskInstance instance;
    instance.seed = seed;
    instance.tree = sample_tree(rng, n_nodes);
    auto [goal, path] = choose_goal_and_path(rng, instance.tree);
    instance.goal = goal;
    instance.path = std::move(path);
    instance.edge_order = make_edge_order(rng, instance.tree, order);
    return instance;
}

TokenSequence encode_instance(const TaskInstance& instance) {
    instance.validate();
    const int n = instance.tree.n_nodes;
    const Vocabulary vocab(n);
    const TokenLayout layout(n);
    if (static_cast<int>(instance.path.size()) > n)
        throw std::logic_error("path longer than node count");

    TokenSequence seq;
    seq.tokens.assign(static_cast<size_t>(layout.context), vocab.pad());
    seq.loss_mask.assign(static_cast<size_t>(layout.context), 0);
    seq.regions.assign(static_cast<size_t>(layout.context), Region::Pad);
    seq.goal_position = layout.goal_position;
    seq.path_start = layout.path_start;

    const auto edges = presentation_edges(instance);
    for (size_t i = 0; i < edges.size(); ++i) {
        const int base = static_cast<int>(3 * i);
        seq.tokens[static_cast<size_t>(base)] = vocab.source_token(edges[i].first);
        seq.tokens[static_cast<size_t>(base) + 1] = vocab.target_token(edges[i].second);
        seq.tokens[static_cast<size_t>(base) + 2] = vocab.comma();
        seq.regions[static_cast<size_t>(base)] = Region::EdgeSource;
        seq.regions[static_cast<size_t>(base) + 1] = Region::EdgeTarget;
        seq.regions[static_cast<size_t>(base) + 2] = Region::Separator;
    }
    seq.tokens[static_cast<size_t>(layout.goal_position)] = vocab.target_token(instance.goal);
    seq.regions[static_cast<size_t>(layout.goal_position)] = Region::Goal;
    seq.tokens[static_cast<size_t>(layout.sep_position)] = vocab.task_sep();
    seq.regions[static_cast<size_t>(layout.sep_position)] = Region::TaskSep;

    for (size_t j = 0; j < instance.path.size(); ++j) {
        const size_t pos = static_cast<size_t>(layout.path_start) + j;
        seq.tokens[pos] = vocab.source_token(instance.path[j]);
        seq.regions[pos] = Region::Path;
        if (j + 1 < instance.path.size()) seq.loss_mask[pos] = 1;
    }
    return seq;
}

TaskInstance decode_tokens(const std::vector<int>& tokens, int n_nodes) {
    const Vocabulary vocab(n_nodes);
    const TokenLayout layout(n_nodes);
    if (static_cast<int>(tokens.size()) > layout.context)
        throw ParseError("sequence longer than context", tokens.size());
    if (static_cast<int>(tokens.size()) < layout.path_start + 1)
        throw ParseError("sequence ends before the first path token", tokens.size());

    std::vector<std::pair<int, int>> edges;
    for (int pos = 0; pos < layout.edge_region_end; ++pos) {
        const int tok = tokens[static_cast<size_t>(pos)];
        if (layout.is_source_position(pos)) {
            if (!vocab.is_source(tok)) throw ParseError("expected a source node token", static_cast<size_t>(pos));
            edges.emplace_back(tok, -1);
        } else if (layout.is_target_position(pos)) {
            if (!vocab.is_target(tok)) throw ParseError("expected a target node token", static_cast<size_t>(pos));
            edges.back().second = vocab.node_of(tok);
        } else {
            if (tok != vocab.comma()) throw ParseError("expected ','", static_cast<size_t>(pos));
        }
    }
    const int goal_tok = tokens[static_cast<size_t>(layout.goal_position)];
    if (!vocab.is_target(goal_tok))
        throw ParseError("expected the goal in target form", static_cast<size_t>(layout.goal_position));
    if (tokens[static_cast<size_t>(layout.sep_position)] != vocab.task_sep())
        throw ParseError("expected '|'", static_cast<size_t>(layout.sep_position));

    std::vector<int> path;
    bool in_pad = false;
    for (int pos = layout.path_start; pos < static_cast<int>(tokens.size()); ++pos) {
        const int tok = tokens[static_cast<size_t>(pos)];
        if (tok == vocab.pad()) {
            in_pad = true;
            continue;
        }
        if (in_pad) throw ParseError("token after PAD", static_cast<size_t>(pos));
        if (!vocab.is_source(tok)) throw ParseError("expected a path node token", static_cast<size_t>(pos));
        path.push_back(tok);
    }
    if (path.empty()) throw ParseError("empty path region", static_cast<size_t>(layout.path_start));

    TaskInstance instance;
    instance.tree.n_nodes = n_nodes;
    instance.tree.parent.assign(static_cast<size_t>(n_nodes), -1);
    instance.tree.children.assign(static_cast<size_t>(n_nodes), {});
    std::vector<bool> has_parent(static_cast<size_t>(n_nodes), false);
    for (size_t i = 0; i < edges.size(); ++i) {
        const auto [src, dst] = edges[i];
        if (has_parent[static_cast<size_t>(dst)])
            throw ParseError("node repeated as edge target", static_cast<size_t>(3 * i + 1));
        has_parent[static_cast<size_t>(dst)] = true;
        instance.tree.parent[static_cast<size_t>(dst)] = src;
        instance.tree.children[static_cast<size_t>(src)].push_back(dst);
    }
    int root = -1;
    for (int v = 0; v < n_nodes; ++v) {
        if (!has_parent[static_cast<size_t>(v)]) {
            if (root >= 0) throw ParseError("multiple parentless nodes", static_cast<size_t>(layout.edge_region_end));
            root = v;
        }
    }
    instance.tree.root = root;
    instance.tree.validate();

    instance.goal = vocab.node_of(goal_tok);
    if (path.front() != root) throw ParseError("path does not start at the root", static_cast<size_t>(layout.path_start));
    for (size_t j = 0; j + 1 < path.size(); ++j) {
        if (instance.tree.parent[static_cast<size_t>(path[j + 1])] != path[j])
            throw ParseError("path step is not an edge", static_cast<size_t>(layout.path_start) + j + 1);
    }
    instance.path = std::move(path);

    // Recover the permutation taking canonical edges to presentation order.
    const auto canon = canonical_edges(instance.tree);
    instance.edge_order.clear();
    for (const auto& e : edges) {
        const auto it = std::find(canon.begin(), canon.end(), e);
        instance.edge_order.push_back(static_cast<int>(it - canon.begin()));
    }
    return instance;
}

uint64_t canonical_tree_key(const Tree& tree) {
    Fnv1a h;
    const int32_t n = tree.n_nodes;
    h.update(&n, sizeof(n));
    for (const auto& [p, c] : canonical_edges(tree)) {
        const int32_t pc[2] = {p, c};
        h.update(pc, sizeof(pc));
    }
    return h.value();
}

uint64_t ordered_tree_key(const Tree& tree) {
    Fnv1a h;
    const int32_t n = tree.n_nodes;
    h.update(&n, sizeof(n));
    // Preorder walk emitting (label, arity); captures child order.
    std::vector<int> stack{tree.root};
    while (!stack.empty()) {
        const int v = stack.back();
        stack.pop_back();
        const auto& kids = tree.children[static_cast<size_t>(v)];
        const int32_t rec[2] = {v, static_cast<int32_t>(kids.size())};
        h.update(rec, sizeof(rec));
        for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back(*it);
    }
    return h.value();
}

std::vector<TaskInstance> generate_dataset(const DatasetParams& params) {
    if (params.count < 1) throw InvalidArgument("dataset count must be >= 1");
    std::vector<TaskInstance> out;
    out.reserve(static_cast<size_t>(params.count));
    for (int i = 0; i < params.count; ++i) {
        out.push_back(make_instance(Rng::derive_seed(params.seed, static_cast<uint64_t>(i)),
                                    params.n_nodes, params.order));
    }
    return out;
}

std::string instance_to_json_line(const TaskInstance& instance) {
    nlohmann::ordered_json j;
    j["seed"] = instance.seed;
    auto edges = nlohmann::ordered_json::array();
    for (const auto& [a, b] : presentation_edges(instance)) edges.push_back({a, b});
    j["edges"] = std::move(edges);
    j["root"] = instance.tree.root;
    j["goal"] = instance.goal;
    j["path"] = instance.path;
    return j.dump();
}

TaskInstance instance_from_json_line(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    TaskInstance instance;
    instance.seed = j.at("seed").get<uint64_t>();
    const auto& edges = j.at("edges");
    const int n = static_cast<int>(edges.size()) + 1;
    instance.tree.n_nodes = n;
    instance.tree.parent.assign(static_cast<size_t>(n), -1);
    instance.tree.children.assign(static_cast<size_t>(n), {});
    std::vector<std::pair<int, int>> presentation;
    for (const auto& e : edges) {
        const int a = e.at(0).get<int>(), b = e.at(1).get<int>();
        instance.tree.parent[static_cast<size_t>(b)] = a;
        instance.tree.children[static_cast<size_t>(a)].push_back(b);
        presentation.emplace_back(a, b);
    }
    instance.tree.root = j.at("root").get<int>();
    instance.goal = j.at("goal").get<int>();
    instance.path = j.at("path").get<std::vector<int>>();

    const auto canon = canonical_edges(instance.tree);
    for (const auto& e : presentation) {
        const auto it = std::find(canon.begin(), canon.end(), e);
        if (it == canon.end()) throw InvalidArgument("edge list is not a tree");
        instance.edge_order.push_back(static_cast<int>(it - canon.begin()));
    }
    instance.validate();
    return instance;
}

void write_dataset(const std::vector<TaskInstance>& instances, const DatasetParams& params,
                   const std::string& jsonl_path, const std::string& manifest_path) {
    std::ofstream out(jsonl_path, std::ios::binary);
    if (!out) throw IoError("cannot open dataset file for writing: " + jsonl_path);
    for (const auto& instance : instances) out << instance_to_json_line(instance) << "\n";
    if (!out) throw IoError("failed writing dataset: " + jsonl_path);
    out.close();

    if (manifest_path.empty()) return;
    nlohmann::ordered_json manifest;
    manifest["seed"] = params.seed;
    manifest["count"] = params.count;
    manifest["order"] = to_string(params.order);
    manifest["n_nodes"] = params.n_nodes;
    manifest["schema_version"] = 1;
    std::ofstream mf(manifest_path, std::ios::binary);
    if (!mf) throw IoError("cannot open manifest for writing: " + manifest_path);
    mf << manifest.dump(2) << "\n";
}

void build_dataset(const DatasetParams& params, const std::string& jsonl_path,
                   const std::string& manifest_path) {
    write_dataset(generate_dataset(params), params, jsonl_path, manifest_path);
}

std::vector<TaskInstance> read_dataset(const std::string& jsonl_path) {
    std::ifstream in(jsonl_path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset file: " + jsonl_path);
    std::vector<TaskInstance> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(instance_from_json_line(line));
    }
    return out;
}

}  // namespace backchain::task
