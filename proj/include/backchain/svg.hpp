#pragma once

#include <string>
#include <vector>

#include "backchain/matrix.hpp"
#include "backchain/task.hpp"

namespace backchain::svg {

// Fig-3 style: one token row per layer; each token is tinted with the color
// of the selected query position that attends to it most strongly, with
// intensity proportional to the attention score.
struct AttentionOverlayPayload {
    std::vector<std::string> token_labels;
    std::vector<int> query_positions;        // colored queries, palette order
    std::vector<Mat<float>> patterns;        // per layer, T x T
    std::vector<std::string> layer_names;    // optional; defaults to "layer l"
};

// Per-layer argmax predictions projected onto the tree (skip-lens views).
struct TreeLensPayload {
    task::Tree tree;
    int goal = -1;
    std::vector<int> current_path;                 // highlighted path prefix
    std::vector<std::vector<int>> per_layer_argmax;  // node ids per panel
    std::vector<std::string> panel_names;
};

// Mean-with-CI curve over path depth (scrub / patching figures).
struct DepthCurvePayload {
    std::string title, x_label, y_label;
    std::vector<double> x, y, lo, hi;
};

std::string render_attention_overlay(const AttentionOverlayPayload& payload);
std::string render_tree_lens(const TreeLensPayload& payload);
std::string render_depth_curve(const DepthCurvePayload& payload);

// Kind dispatch with a JSON payload (the viz subcommand); unknown kinds or
// payload/kind mismatches raise InvalidArgument.
std::string render_svg(const std::string& kind, const std::string& payload_json);

}  // namespace backchain::svg
