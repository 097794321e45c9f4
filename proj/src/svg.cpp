#include "backchain/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include <json.hpp>

#include "backchain/errors.hpp"

namespace backchain::svg {

namespace {

std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

struct Rgb {
    int r, g, b;
};

constexpr Rgb kPalette[] = {
    {214, 39, 40},   // red
    {31, 119, 180},  // blue
    {44, 160, 44},   // green
    {255, 127, 14},  // orange
    {148, 103, 189}, // purple
    {140, 86, 75},   // brown
    {23, 190, 207},  // cyan
};
constexpr int kPaletteSize = 7;

std::string fill(const Rgb& c, double alpha) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "rgba(%d,%d,%d,%.3f)", c.r, c.g, c.b, alpha);
    return buf;
}

std::string header(double w, double h) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" +
           num(h) + "\" viewBox=\"0 0 " + num(w) + " " + num(h) +
           "\" font-family=\"monospace\" font-size=\"10\">\n";
}

// In-order x coordinates (leaves equally spaced), depth rows for y.
struct TreeLayout {
    std::vector<double> x, y;
    int max_depth = 0;
};

TreeLayout layout_tree(const task::Tree& tree) {
    TreeLayout out;
    out.x.assign(static_cast<size_t>(tree.n_nodes), 0);
    out.y.assign(static_cast<size_t>(tree.n_nodes), 0);
    double next_leaf = 0;
    std::function<double(int, int)> place = [&](int node, int depth) -> double {
        out.max_depth = std::max(out.max_depth, depth);
        out.y[static_cast<size_t>(node)] = depth;
        const auto& kids = tree.children[static_cast<size_t>(node)];
        if (kids.empty()) {
            out.x[static_cast<size_t>(node)] = next_leaf;
            return next_leaf++;
        }
        double sum = 0;
        for (int c : kids) sum += place(c, depth + 1);
        const double x = sum / static_cast<double>(kids.size());
        out.x[static_cast<size_t>(node)] = x;
        return x;
    };
    place(tree.root, 0);
    return out;
}

}  // namespace

std::string render_attention_overlay(const AttentionOverlayPayload& payload) {
    const int T = static_cast<int>(payload.token_labels.size());
    if (T == 0) throw InvalidArgument("attention overlay needs token labels");
    for (const auto& pat : payload.patterns) {
        if (pat.rows != T || pat.cols != T)
            throw InvalidArgument("attention pattern shape mismatch with token labels");
    }
    for (int q : payload.query_positions) {
        if (q < 0 || q >= T) throw InvalidArgument("query position out of range");
    }

    const double cell_w = 26, cell_h = 18, gap = 4, left = 70, top = 26;
    const double width = left + T * cell_w + 20;
    const double height = top + static_cast<double>(payload.patterns.size()) * (cell_h + gap) + 30;

    std::string out = header(width, height);
    // Legend: query positions in palette order.
    double lx = left;
    for (size_t qi = 0; qi < payload.query_positions.size(); ++qi) {
        const auto& c = kPalette[qi % kPaletteSize];
        out += "<rect x=\"" + num(lx) + "\" y=\"4\" width=\"10\" height=\"10\" fill=\"" +
               fill(c, 0.9) + "\"/>";
        out += "<text x=\"" + num(lx + 14) + "\" y=\"13\">q=" +
               std::to_string(payload.query_positions[qi]) + "</text>\n";
        lx += 70;
    }

    for (size_t l = 0; l < payload.patterns.size(); ++l) {
        const double y = top + static_cast<double>(l) * (cell_h + gap);
        const std::string label = l < payload.layer_names.size()
                                      ? payload.layer_names[l]
                                      : "layer " + std::to_string(l + 1);
        out += "<text x=\"4\" y=\"" + num(y + cell_h - 5) + "\">" + escape(label) + "</text>\n";
        for (int k = 0; k < T; ++k) {
            // Strongest selected query for this key token.
            double best = 0;
            int best_q = -1;
            for (size_t qi = 0; qi < payload.query_positions.size(); ++qi) {
                const double w = payload.patterns[l].at(payload.query_positions[qi], k);
                if (w > best) {
                    best = w;
                    best_q = static_cast<int>(qi);
                }
            }
            const double x = left + k * cell_w;
            std::string color = "rgba(0,0,0,0.04)";
            if (best_q >= 0 && best > 0)
                color = fill(kPalette[best_q % kPaletteSize], std::min(1.0, best));
            out += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(cell_w - 1) +
                   "\" height=\"" + num(cell_h) + "\" fill=\"" + color +
                   "\" stroke=\"#ccc\" stroke-width=\"0.5\"/>";
            out += "<text x=\"" + num(x + 2) + "\" y=\"" + num(y + cell_h - 5) + "\">" +
                   escape(payload.token_labels[static_cast<size_t>(k)]) + "</text>\n";
        }
    }
    out += "</svg>\n";
    return out;
}

std::string render_tree_lens(const TreeLensPayload& payload) {
    payload.tree.validate();
    const auto layout = layout_tree(payload.tree);
    const int panels = static_cast<int>(payload.per_layer_argmax.size());
    if (panels == 0) throw InvalidArgument("tree lens needs at least one panel");

    const double node_r = 11, dx = 46, dy = 44, margin = 24, title_h = 18;
    double leaves = 1;
    for (double x : layout.x) leaves = std::max(leaves, x + 1);
    const double panel_w = margin * 2 + (leaves - 1) * dx + node_r * 2;
    const double panel_h = title_h + margin * 2 + layout.max_depth * dy + node_r * 2;
    const double width = panel_w * panels;

    std::string out = header(width, panel_h);
    for (int panel = 0; panel < panels; ++panel) {
        const double ox = panel * panel_w + margin + node_r;
        const double oy = title_h + margin + node_r;
        const std::string title = panel < static_cast<int>(payload.panel_names.size())
                                      ? payload.panel_names[static_cast<size_t>(panel)]
                                      : "layer " + std::to_string(panel + 1);
        out += "<text x=\"" + num(panel * panel_w + margin) + "\" y=\"14\">" + escape(title) +
               "</text>\n";
        // Edges beneath nodes.
        for (int v = 0; v < payload.tree.n_nodes; ++v) {
            const int p = payload.tree.parent[static_cast<size_t>(v)];
            if (p < 0) continue;
            out += "<line x1=\"" + num(ox + layout.x[static_cast<size_t>(p)] * dx) + "\" y1=\"" +
                   num(oy + layout.y[static_cast<size_t>(p)] * dy) + "\" x2=\"" +
                   num(ox + layout.x[static_cast<size_t>(v)] * dx) + "\" y2=\"" +
                   num(oy + layout.y[static_cast<size_t>(v)] * dy) +
                   "\" stroke=\"#999\" stroke-width=\"1\"/>\n";
        }
        const auto& marked = payload.per_layer_argmax[static_cast<size_t>(panel)];
        for (int v = 0; v < payload.tree.n_nodes; ++v) {
            const double cx = ox + layout.x[static_cast<size_t>(v)] * dx;
            const double cy = oy + layout.y[static_cast<size_t>(v)] * dy;
            std::string fill_color = "#f2f2f2";
            if (v == payload.goal) fill_color = "#c6e2c6";
            if (std::find(payload.current_path.begin(), payload.current_path.end(), v) !=
                payload.current_path.end())
                fill_color = "#dce6f6";
            const bool hot = std::find(marked.begin(), marked.end(), v) != marked.end();
            out += "<circle cx=\"" + num(cx) + "\" cy=\"" + num(cy) + "\" r=\"" + num(node_r) +
                   "\" fill=\"" + fill_color + "\" stroke=\"" + (hot ? "#e0b400" : "#555") +
                   "\" stroke-width=\"" + (hot ? "3" : "1") + "\"/>";
            out += "<text x=\"" + num(cx - (v >= 10 ? 7 : 3.5)) + "\" y=\"" + num(cy + 3.5) +
                   "\">" + std::to_string(v) + "</text>\n";
        }
    }
    out += "</svg>\n";
    return out;
}

std::string render_depth_curve(const DepthCurvePayload& payload) {
    const size_t n = payload.x.size();
    if (n == 0 || payload.y.size() != n)
        throw InvalidArgument("depth curve needs matching x and y");
    const bool band = payload.lo.size() == n && payload.hi.size() == n;

    const double width = 460, height = 300, left = 60, right = 20, top = 34, bottom = 40;
    double x_min = payload.x[0], x_max = payload.x[0];
    double y_min = payload.y[0], y_max = payload.y[0];
    for (size_t i = 0; i < n; ++i) {
        x_min = std::min(x_min, payload.x[i]);
        x_max = std::max(x_max, payload.x[i]);
        const double lo = band ? payload.lo[i] : payload.y[i];
        const double hi = band ? payload.hi[i] : payload.y[i];
        y_min = std::min({y_min, lo});
        y_max = std::max({y_max, hi});
    }
    y_min = std::min(y_min, 0.0);
    y_max = std::max(y_max, 0.0);
    if (x_max == x_min) x_max = x_min + 1;
    if (y_max == y_min) y_max = y_min + 1;
    const auto sx = [&](double v) {
        return left + (v - x_min) / (x_max - x_min) * (width - left - right);
    };
    const auto sy = [&](double v) {
        return height - bottom - (v - y_min) / (y_max - y_min) * (height - top - bottom);
    };

    std::string out = header(width, height);
    out += "<text x=\"" + num(left) + "\" y=\"16\">" + escape(payload.title) + "</text>\n";
    out += "<line x1=\"" + num(left) + "\" y1=\"" + num(sy(y_min)) + "\" x2=\"" + num(left) +
           "\" y2=\"" + num(sy(y_max)) + "\" stroke=\"#333\"/>\n";
    out += "<line x1=\"" + num(left) + "\" y1=\"" + num(height - bottom) + "\" x2=\"" +
           num(width - right) + "\" y2=\"" + num(height - bottom) + "\" stroke=\"#333\"/>\n";
    if (y_min < 0 && y_max > 0) {
        out += "<line x1=\"" + num(left) + "\" y1=\"" + num(sy(0)) + "\" x2=\"" +
               num(width - right) + "\" y2=\"" + num(sy(0)) +
               "\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>\n";
    }
    out += "<text x=\"" + num(width / 2 - 20) + "\" y=\"" + num(height - 8) + "\">" +
           escape(payload.x_label) + "</text>\n";
    out += "<text x=\"8\" y=\"" + num(top - 8) + "\">" + escape(payload.y_label) + "</text>\n";

    if (band) {
        std::string path = "M";
        for (size_t i = 0; i < n; ++i)
            path += num(sx(payload.x[i])) + " " + num(sy(payload.hi[i])) + " L";
        for (size_t i = n; i-- > 0;)
            path += num(sx(payload.x[i])) + " " + num(sy(payload.lo[i])) + (i ? " L" : " Z");
        out += "<path d=\"" + path + "\" fill=\"rgba(31,119,180,0.18)\" stroke=\"none\"/>\n";
    }
    std::string line = "M";
    for (size_t i = 0; i < n; ++i) {
        line += num(sx(payload.x[i])) + " " + num(sy(payload.y[i]));
        if (i + 1 < n) line += " L";
    }
    out += "<path d=\"" + line + "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n";
    for (size_t i = 0; i < n; ++i) {
        out += "<circle cx=\"" + num(sx(payload.x[i])) + "\" cy=\"" + num(sy(payload.y[i])) +
               "\" r=\"2.5\" fill=\"#1f77b4\"/>\n";
    }
    // Tick labels at the extremes.
    out += "<text x=\"" + num(sx(x_min) - 4) + "\" y=\"" + num(height - bottom + 14) + "\">" +
           num(x_min) + "</text>\n";
    out += "<text x=\"" + num(sx(x_max) - 10) + "\" y=\"" + num(height - bottom + 14) + "\">" +
           num(x_max) + "</text>\n";
    out += "<text x=\"" + num(left - 34.0) + "\" y=\"" + num(sy(y_min) + 4) + "\">" + num(y_min) +
           "</text>\n";
    out += "<text x=\"" + num(left - 34.0) + "\" y=\"" + num(sy(y_max) + 4) + "\">" + num(y_max) +
           "</text>\n";
    out += "</svg>\n";
    return out;
}

std::string render_svg(const std::string& kind, const std::string& payload_json) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(payload_json);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string("bad svg payload: ") + e.what());
    }
    try {
        if (kind == "attention-overlay") {
            AttentionOverlayPayload p;
            p.token_labels = j.at("token_labels").get<std::vector<std::string>>();
            p.query_positions = j.at("query_positions").get<std::vector<int>>();
            for (const auto& rows : j.at("patterns")) {
                const int T = static_cast<int>(rows.size());
                Mat<float> m(T, T);
                for (int r = 0; r < T; ++r) {
                    for (int c = 0; c < T; ++c) m.at(r, c) = rows.at(r).at(c).get<float>();
                }
                p.patterns.push_back(std::move(m));
            }
            if (j.contains("layer_names"))
                p.layer_names = j.at("layer_names").get<std::vector<std::string>>();
            return render_attention_overlay(p);
        }
        if (kind == "tree-lens-projection") {
            TreeLensPayload p;
            const auto edges = j.at("edges").get<std::vector<std::vector<int>>>();
            p.tree.n_nodes = static_cast<int>(edges.size()) + 1;
            p.tree.parent.assign(static_cast<size_t>(p.tree.n_nodes), -1);
            p.tree.children.assign(static_cast<size_t>(p.tree.n_nodes), {});
            for (const auto& e : edges) {
                p.tree.parent[static_cast<size_t>(e.at(1))] = e.at(0);
                p.tree.children[static_cast<size_t>(e.at(0))].push_back(e.at(1));
            }
            p.tree.root = j.at("root").get<int>();
            p.goal = j.at("goal").get<int>();
            if (j.contains("current_path"))
                p.current_path = j.at("current_path").get<std::vector<int>>();
            p.per_layer_argmax = j.at("per_layer_argmax").get<std::vector<std::vector<int>>>();
            if (j.contains("panel_names"))
                p.panel_names = j.at("panel_names").get<std::vector<std::string>>();
            return render_tree_lens(p);
        }
        if (kind == "depth-curve") {
            DepthCurvePayload p;
            p.title = j.value("title", "");
            p.x_label = j.value("x_label", "");
            p.y_label = j.value("y_label", "");
            p.x = j.at("x").get<std::vector<double>>();
            p.y = j.at("y").get<std::vector<double>>();
            if (j.contains("lo")) p.lo = j.at("lo").get<std::vector<double>>();
            if (j.contains("hi")) p.hi = j.at("hi").get<std::vector<double>>();
            return render_depth_curve(p);
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string("svg payload does not match kind '") + kind +
                              "': " + e.what());
    }
    throw InvalidArgument("unknown svg kind: " + kind);
}

}  // namespace backchain::svg
