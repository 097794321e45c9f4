// backchain: dataset generation, training, and analysis for the
// tree-pathfinding transformer lab.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "backchain/digest.hpp"
#include "backchain/errors.hpp"
#include "backchain/interp/activations.hpp"
#include "backchain/interp/circuits.hpp"
#include "backchain/interp/interventions.hpp"
#include "backchain/interp/lens.hpp"
#include "backchain/interp/probes.hpp"
#include "backchain/interp/registers.hpp"
#include "backchain/interp/scrub.hpp"
#include "backchain/model/gradcheck.hpp"
#include "backchain/model/train.hpp"
#include "backchain/oracle.hpp"
#include "backchain/report.hpp"
#include "backchain/svg.hpp"
#include "backchain/task.hpp"

namespace fs = std::filesystem;
using namespace backchain;

namespace {

std::string iso_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Flat "[section] key = value" config file; flags take precedence because
// the file is applied before CLI11 parses the command line.
std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::map<std::string, std::string> values;
    std::string line, section;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("config line is not 'key = value'", line_no);
        const std::string key = trim(line.substr(0, eq));
        values[(section.empty() ? key : section + "." + key)] = trim(line.substr(eq + 1));
    }
    return values;
}

struct ManifestScope {
    report::RunManifest manifest;
    fs::path dir;

    ManifestScope(const std::string& command, const fs::path& out_dir) : dir(out_dir) {
        manifest.command = command;
        manifest.started_at = iso_now();
        fs::create_directories(dir);
    }
    void add(const fs::path& artifact) { manifest.artifacts.push_back(artifact.filename().string()); }
    void finish() {
        manifest.finished_at = iso_now();
        report::write_manifest(manifest, (dir / "manifest.json").string());
    }
};

model::ModelConfig config_from(const std::map<std::string, std::string>& file, int n_nodes) {
    auto get_int = [&](const std::string& key, int fallback) {
        const auto it = file.find(key);
        return it == file.end() ? fallback : std::stoi(it->second);
    };
    auto get_str = [&](const std::string& key, const std::string& fallback) {
        const auto it = file.find(key);
        return it == file.end() ? fallback : it->second;
    };
    model::ModelConfig config = model::ModelConfig::for_task(
        n_nodes, get_int("model.layers", 6), get_int("model.d_model", 128),
        get_int("model.d_ff", 512));
    config.norm = model::norm_from_string(get_str("model.norm", "none"));
    const auto it = file.find("model.init_scale");
    if (it != file.end()) config.init_scale = std::stod(it->second);
    return config;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

std::vector<task::TaskInstance> dataset_or_generated(const std::string& data_path, int count,
                                                     uint64_t seed, int n_nodes,
                                                     std::string* digest) {
    if (!data_path.empty()) {
        if (digest) *digest = digest_file(data_path);
        return task::read_dataset(data_path);
    }
    const task::DatasetParams params{.seed = seed, .count = count, .n_nodes = n_nodes,
                                     .order = task::EdgeOrder::Shuffled};
    if (digest) *digest = "";
    return task::generate_dataset(params);
}

std::string spell_tokens(const task::TokenSequence& seq, int n_nodes,
                         std::vector<std::string>* labels) {
    const task::Vocabulary vocab(n_nodes);
    std::string joined;
    for (int tok : seq.tokens) {
        labels->push_back(vocab.spell(tok));
        joined += labels->back();
        joined += ' ';
    }
    return joined;
}

// ---------------------------------------------------------------- generate

int cmd_generate(const std::string& out_path, int n_nodes, int count, uint64_t seed,
                 const std::string& order, const std::string& exclude_path) {
    task::DatasetParams params{.seed = seed, .count = count, .n_nodes = n_nodes,
                               .order = task::edge_order_from_string(order)};
    auto instances = task::generate_dataset(params);

    if (!exclude_path.empty()) {
        std::set<uint64_t> excluded;
        for (const auto& inst : task::read_dataset(exclude_path))
            excluded.insert(task::canonical_tree_key(inst.tree));
        uint64_t retry = 0;
        const uint64_t budget = 10000ULL * static_cast<uint64_t>(count);
        for (auto& inst : instances) {
            while (excluded.count(task::canonical_tree_key(inst.tree))) {
                if (retry >= budget)
                    throw InvalidArgument(
                        "exclusion retry budget exhausted; the tree space at this size may be "
                        "too small for a disjoint split");
                inst = task::make_instance(
                    Rng::derive_seed(seed ^ 0xfeedULL, retry++), n_nodes, params.order);
            }
        }
    }

    const fs::path out(out_path);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    const std::string meta = out_path + ".meta.json";
    task::write_dataset(instances, params, out_path, meta);

    ManifestScope scope("generate", out.has_parent_path() ? out.parent_path() : ".");
    scope.manifest.seeds = {seed};
    scope.manifest.dataset_digest = digest_file(out_path);
    scope.add(out);
    scope.add(meta);
    scope.finish();
    std::cout << "wrote " << instances.size() << " instances to " << out_path << "\n";
    return 0;
}

// ------------------------------------------------------------------- train

int cmd_train(const std::map<std::string, std::string>& file_cfg, const std::string& data_path,
              const std::string& val_path, const std::string& out_dir, uint64_t seed,
              const std::string& norm_flag, int epochs_flag, double lr_flag, int batch_flag,
              double target_em_flag, int patience_flag, int val_subset_flag) {
    auto train_set = task::read_dataset(data_path);
    if (train_set.empty()) throw InvalidArgument("training dataset is empty");
    const int n_nodes = train_set[0].tree.n_nodes;

    model::ModelConfig config = config_from(file_cfg, n_nodes);
    if (!norm_flag.empty()) config.norm = model::norm_from_string(norm_flag);
    config.seed = seed;

    model::TrainOptions options;
    auto file_get = [&](const std::string& key, double fallback) {
        const auto it = file_cfg.find(key);
        return it == file_cfg.end() ? fallback : std::stod(it->second);
    };
    options.adamw.lr = file_get("train.lr", options.adamw.lr);
    options.adamw.beta1 = file_get("train.beta1", options.adamw.beta1);
    options.adamw.beta2 = file_get("train.beta2", options.adamw.beta2);
    options.adamw.weight_decay = file_get("train.weight_decay", options.adamw.weight_decay);
    options.adamw.epsilon = file_get("train.epsilon", options.adamw.epsilon);
    options.batch_size = static_cast<int>(file_get("train.batch_size", options.batch_size));
    options.max_epochs = static_cast<int>(file_get("train.max_epochs", options.max_epochs));
    options.patience = static_cast<int>(file_get("train.patience", options.patience));
    options.target_exact_match = file_get("train.target_em", options.target_exact_match);
    options.val_subset = static_cast<int>(file_get("train.val_subset", options.val_subset));
    if (epochs_flag > 0) options.max_epochs = epochs_flag;
    if (lr_flag > 0) options.adamw.lr = lr_flag;
    if (batch_flag > 0) options.batch_size = batch_flag;
    if (target_em_flag > 0) options.target_exact_match = target_em_flag;
    if (patience_flag > 0) options.patience = patience_flag;
    if (val_subset_flag > 0) options.val_subset = val_subset_flag;
    options.out_dir = out_dir;

    std::vector<task::TaskInstance> val_set;
    if (!val_path.empty()) {
        val_set = task::read_dataset(val_path);
    } else {
        // Hold out the tail 5% when no validation file is given.
        const size_t holdout = std::max<size_t>(1, train_set.size() / 20);
        val_set.assign(train_set.end() - static_cast<long>(holdout), train_set.end());
        train_set.resize(train_set.size() - holdout);
    }

    ManifestScope scope("train", out_dir);
    scope.manifest.seeds = {seed};
    scope.manifest.dataset_digest = digest_file(data_path);
    {
        std::ostringstream cfg;
        cfg << config.layers << "/" << config.d_model << "/" << config.d_ff << "/"
            << to_string(config.norm) << "/" << config.init_scale << "/" << options.adamw.lr
            << "/" << options.batch_size;
        scope.manifest.config_digest = digest_string(cfg.str());
    }

    const auto result = model::train_loop(config, train_set, val_set, options);

    std::cout << "trained " << result.steps << " steps; best val exact match "
              << result.best_exact_match << "\n";
    scope.manifest.checkpoint_digest = digest_file(result.best_checkpoint);
    scope.add("ckpt_best.bin");
    scope.add("ckpt_last.bin");
    scope.add("metrics.json");
    scope.finish();
    return 0;
}

// -------------------------------------------------------------------- eval

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& out_dir) {
    const auto ckpt = model::load_checkpoint(ckpt_path);
    const auto dataset = task::read_dataset(data_path);
    const double accuracy = model::evaluate_exact_match(ckpt.params, dataset);
    std::cout << "exact match " << accuracy << " over " << dataset.size() << " instances\n";
    if (!out_dir.empty()) {
        ManifestScope scope("eval", out_dir);
        scope.manifest.checkpoint_digest = digest_file(ckpt_path);
        scope.manifest.dataset_digest = digest_file(data_path);
        nlohmann::ordered_json j{{"exact_match", accuracy}, {"instances", dataset.size()}};
        std::ofstream out(fs::path(out_dir) / "eval.json");
        out << j.dump(2) << "\n";
        scope.add("eval.json");
        scope.finish();
    }
    return 0;
}

// ------------------------------------------------------------------- probe

int cmd_probe(const std::string& ckpt_path, const std::string& data_path, int count,
              uint64_t seed, const std::string& kind_str, const std::string& layers_csv,
              bool pre_block, bool joint_edge, int train_size, int test_size,
              const std::string& out_dir) {
    const auto ckpt = model::load_checkpoint(ckpt_path);
    std::string data_digest;
    const int n_nodes = (ckpt.params.config.vocab - 3) / 2;
    const auto dataset =
        dataset_or_generated(data_path, count, seed, n_nodes, &data_digest);

    std::vector<interp::ProbeReport> reports;
    for (int layer : parse_int_list(layers_csv)) {
        interp::ProbeSpec spec;
        spec.kind = interp::probe_kind_from_string(kind_str);
        spec.layer = layer;
        spec.pre_block = pre_block;
        spec.joint_edge_label = joint_edge;
        spec.train_size = train_size;
        spec.test_size = test_size;
        spec.seed = seed;
        const auto probe = interp::run_probe(spec, ckpt.params, dataset);
        reports.push_back(probe.report);
        std::cout << probe.report.probe << " x^" << layer << " f1 " << probe.report.f1
                  << " (baseline " << probe.report.baseline_f1 << ")\n";
    }

    ManifestScope scope("probe", out_dir);
    scope.manifest.seeds = {seed};
    scope.manifest.checkpoint_digest = digest_file(ckpt_path);
    scope.manifest.dataset_digest = data_digest;
    report::probe_table(reports).write((fs::path(out_dir) / "probes.csv").string());
    std::ofstream js(fs::path(out_dir) / "probes.json");
    js << report::probe_reports_json(reports) << "\n";
    scope.add("probes.csv");
    scope.add("probes.json");
    scope.finish();
    return 0;
}

// ------------------------------------------------------------------- patch

int cmd_patch(const std::string& ckpt_path, int runs, int samples, uint64_t seed, int layer,
              double threshold, const std::string& out_dir) {
    const auto ckpt = model::load_checkpoint(ckpt_path);
    interp::RegisterPatchOptions options;
    options.runs = runs;
    options.samples_per_run = samples;
    options.seed = seed;
    options.layer = layer;
    options.register_threshold = threshold;
    options.n_nodes = (ckpt.params.config.vocab - 3) / 2;
    const auto rows = interp::register_patch_experiment(ckpt.params, options);

    ManifestScope scope("patch", out_dir);
    scope.manifest.seeds = {seed};
    scope.manifest.checkpoint_digest = digest_file(ckpt_path);
    report::depth_effect_table(rows).write((fs::path(out_dir) / "patch.csv").string());
    scope.add("patch.csv");

    svg::DepthCurvePayload curve;
    curve.title = "register patching effect";
    curve.x_label = "path depth";
    curve.y_label = "mean logit difference";
    for (const auto& row : rows) {
        if (row.omitted) continue;
        curve.x.push_back(row.depth);
        curve.y.push_back(row.ci.mean);
        curve.lo.push_back(row.ci.lo);
        curve.hi.push_back(row.ci.hi);
    }
    std::ofstream sv(fs::path(out_dir) / "patch.svg");
    sv << svg::render_depth_curve(curve);
    scope.add("patch.svg");
    scope.finish();
    for (const auto& row : rows) {
        if (!row.omitted)
            std::cout << "depth " << row.depth << " effect " << row.ci.mean << " ["
                      << row.ci.lo << ", " << row.ci.hi << "] n=" << row.samples << "\n";
    }
    return 0;
}

// ------------------------------------------------------------------- scrub

int cmd_scrub(const std::string& ckpt_path, const std::string& data_path, int count,
              uint64_t seed, const std::string& hypothesis, bool lookahead,
              const std::string& out_dir) {
    if (hypothesis != "backward-chaining")
        throw CLI::ValidationError("--hypothesis", "unknown hypothesis: " + hypothesis);
    const auto ckpt = model::load_checkpoint(ckpt_path);
    std::string data_digest;
    const int n_nodes = (ckpt.params.config.vocab - 3) / 2;
    const auto dataset = dataset_or_generated(data_path, count, seed, n_nodes, &data_digest);

    interp::ScrubHypothesis hyp;
    hyp.lookahead_constraints = lookahead;
    hyp.seed = seed;
    const auto result = interp::causal_scrub(ckpt.params, hyp, dataset);

    ManifestScope scope("scrub", out_dir);
    scope.manifest.seeds = {seed};
    scope.manifest.checkpoint_digest = digest_file(ckpt_path);
    scope.manifest.dataset_digest = data_digest;
    report::scrub_table(result).write((fs::path(out_dir) / "scrub.csv").string());
    scope.add("scrub.csv");

    svg::DepthCurvePayload curve;
    curve.title = lookahead ? "causal scrubbing (lookahead constrained)" : "causal scrubbing";
    curve.x_label = "path depth";
    curve.y_label = "loss recovered";
    for (const auto& row : result.rows) {
        if (row.count == 0) continue;
        curve.x.push_back(row.depth);
        curve.y.push_back(row.l_cs);
    }
    std::ofstream sv(fs::path(out_dir) / "scrub.svg");
    sv << svg::render_depth_curve(curve);
    scope.add("scrub.svg");
    scope.finish();
    for (const auto& row : result.rows) {
        if (row.count > 0)
            std::cout << "depth " << row.depth << " L_CS " << row.l_cs << " (n=" << row.count
                      << ", skipped " << row.skipped << ")\n";
    }
    std::cout << "overall L_CS " << result.overall_l_cs << "\n";
    return 0;
}

// ---------------------------------------------------------------- knockout

int cmd_knockout(const std::string& ckpt_path, const std::string& data_path, int count,
                 uint64_t seed, double threshold, int min_depth, const std::string& out_dir) {
    const auto ckpt = model::load_checkpoint(ckpt_path);
    std::string data_digest;
    const int n_nodes = (ckpt.params.config.vocab - 3) / 2;
    const auto dataset = dataset_or_generated(data_path, count, seed, n_nodes, &data_digest);
    const auto report = interp::register_knockout_experiment(ckpt.params, dataset, threshold,
                                                             min_depth);
    std::cout << "knockout lowered the correct logit in " << report.lowered << "/"
              << report.instances << " deep-path instances (mean delta " << report.mean_delta
              << ")\n";
    ManifestScope scope("knockout", out_dir);
    scope.manifest.seeds = {seed};
    scope.manifest.checkpoint_digest = digest_file(ckpt_path);
    scope.manifest.dataset_digest = data_digest;
    report::CsvTable t;
    t.header = {"instances", "lowered", "mean_delta"};
    t.rows.push_back({std::to_string(report.instances), std::to_string(report.lowered),
                      report::format_double(report.mean_delta)});
    t.write((fs::path(out_dir) / "knockout.csv").string());
    scope.add("knockout.csv");
    scope.finish();
    return 0;
}

// ---------------------------------------------------------------- circuits

int cmd_circuits(const std::string& ckpt_path, uint64_t instance_seed, bool approximate,
                 const std::string& out_dir) {
    const auto ckpt = model::load_checkpoint(ckpt_path);
    ManifestScope scope("circuits", out_dir);
    scope.manifest.checkpoint_digest = digest_file(ckpt_path);
    scope.manifest.seeds = {instance_seed};

    auto dump = [&](const Mat<float>& m, const std::string& name) {
        report::CsvTable t;
        for (int c = 0; c < m.cols; ++c) t.header.push_back("c" + std::to_string(c));
        for (int r = 0; r < m.rows; ++r) {
            std::vector<std::string> row;
            for (int c = 0; c < m.cols; ++c) row.push_back(report::format_double(m.at(r, c)));
            t.rows.push_back(std::move(row));
        }
        t.write((fs::path(out_dir) / name).string());
        scope.add(name);
    };
    dump(interp::qk_circuit_m0(ckpt.params, approximate), "m0_qk.csv");
    dump(interp::qk_circuit_m1(ckpt.params, approximate), "m1_qk.csv");
    dump(interp::subgoal_matrix_rp(ckpt.params, approximate), "r_p.csv");

    const int n_nodes = (ckpt.params.config.vocab - 3) / 2;
    const auto inst = task::make_instance(instance_seed, n_nodes);
    const auto seq = task::encode_instance(inst);
    const auto cache = model::forward(ckpt.params, seq.tokens);
    const task::TokenLayout layout(n_nodes);
    const int L = ckpt.params.config.layers;
    const auto dla = interp::direct_logit_attribution(ckpt.params, cache, {L - 1, L},
                                                      layout.path_start);
    report::CsvTable t;
    t.header = {"layer", "position", "token", "contribution"};
    const task::Vocabulary vocab(n_nodes);
    for (size_t li = 0; li < dla.layers.size(); ++li) {
        for (int k = 0; k <= layout.path_start; ++k) {
            for (int tok = 0; tok < ckpt.params.config.vocab; ++tok) {
                t.rows.push_back({std::to_string(dla.layers[li]), std::to_string(k),
                                  vocab.spell(tok),
                                  report::format_double(dla.row(static_cast<int>(li), k)[tok])});
            }
        }
    }
    t.write((fs::path(out_dir) / "dla.csv").string());
    scope.add("dla.csv");
    scope.finish();
    std::cout << "wrote circuit matrices and DLA table to " << out_dir << "\n";
    return 0;
}

// -------------------------------------------------------------------- lens

int cmd_lens(const std::string& ckpt_path, const std::string& data_path, int count,
             uint64_t seed, int examples, const std::string& out_dir) {
    const auto ckpt = model::load_checkpoint(ckpt_path);
    std::string data_digest;
    const int n_nodes = (ckpt.params.config.vocab - 3) / 2;
    const auto dataset = dataset_or_generated(data_path, count, seed, n_nodes, &data_digest);
    const int L = ckpt.params.config.layers;

    ManifestScope scope("lens", out_dir);
    scope.manifest.seeds = {seed};
    scope.manifest.checkpoint_digest = digest_file(ckpt_path);
    scope.manifest.dataset_digest = data_digest;

    interp::LogRegOptions options;
    std::vector<interp::SkipLens> lenses;
    report::CsvTable losses;
    losses.header = {"skipped_layers", "source_layer", "train_loss", "converged"};
    for (int n = L - 1; n >= 1; --n) {  // deep skips first: source layers 1..L-1
        interp::SkipLensReport lens_report;
        lenses.push_back(interp::train_skip_lens(ckpt.params, dataset, n, options, &lens_report));
        losses.rows.push_back({std::to_string(n), std::to_string(L - n),
                               report::format_double(lens_report.train_loss),
                               lens_report.converged ? "1" : "0"});
        std::cout << "lens over x^" << (L - n) << " train loss " << lens_report.train_loss
                  << "\n";
    }
    losses.write((fs::path(out_dir) / "lens_losses.csv").string());
    scope.add("lens_losses.csv");

    for (int e = 0; e < examples; ++e) {
        const auto inst = task::make_instance(Rng::derive_seed(seed ^ 0xa11ceULL,
                                                               static_cast<uint64_t>(e)),
                                              n_nodes);
        const auto seq = task::encode_instance(inst);
        const auto cache = model::forward(ckpt.params, seq.tokens);
        const task::TokenLayout layout(n_nodes);
        svg::TreeLensPayload payload;
        payload.tree = inst.tree;
        payload.goal = inst.goal;
        payload.current_path = {inst.tree.root};
        for (const auto& lens : lenses) {
            const auto logits = apply_skip_lens(lens, cache);
            const float* row = logits.row(layout.path_start);
            int best = 0;
            for (int j = 1; j < logits.cols; ++j)
                if (row[j] > row[best]) best = j;
            const task::Vocabulary vocab(n_nodes);
            payload.per_layer_argmax.push_back(
                vocab.is_node(best) ? std::vector<int>{vocab.node_of(best)} : std::vector<int>{});
            payload.panel_names.push_back("x^" + std::to_string(lens.source_layer));
        }
        const std::string name = "lens_example_" + std::to_string(e) + ".svg";
        std::ofstream sv(fs::path(out_dir) / name);
        sv << svg::render_tree_lens(payload);
        scope.add(name);
    }
    scope.finish();
    return 0;
}

// ------------------------------------------------------------------- stats

int cmd_stats(int catalan_n, int labeled_n, const std::string& ckpt_path, int count,
              uint64_t seed, double threshold, bool filtered, const std::string& out_dir) {
    bool did_something = false;
    if (catalan_n >= 0) {
        std::cout << "catalan(" << catalan_n << ") = "
                  << oracle::to_decimal(oracle::catalan_number(catalan_n)) << "\n";
        did_something = true;
    }
    if (labeled_n >= 0) {
        std::cout << "labeled_trees(" << labeled_n << ") = "
                  << oracle::to_decimal(oracle::labeled_tree_count(labeled_n)) << "\n";
        did_something = true;
    }
    if (!ckpt_path.empty()) {
        const auto ckpt = model::load_checkpoint(ckpt_path);
        const int n_nodes = (ckpt.params.config.vocab - 3) / 2;
        const auto dataset = dataset_or_generated("", count, seed, n_nodes, nullptr);
        interp::SubgoalStatsOptions options;
        options.threshold = threshold;
        options.filter_modal_usable = filtered;
        options.seed = seed;
        const auto stats_out = interp::subgoal_statistics(ckpt.params, dataset, options);
        report::CsvTable t;
        t.header = {"position", "subgoal", "ratio"};
        for (const auto& row : stats_out.rows) {
            for (const auto& [sub, ratio] : row.subgoal_ratio) {
                t.rows.push_back({std::to_string(row.position), std::to_string(sub),
                                  report::format_double(ratio)});
            }
        }
        if (out_dir.empty()) {
            std::cout << t.to_string();
        } else {
            ManifestScope scope("stats", out_dir);
            scope.manifest.seeds = {seed};
            scope.manifest.checkpoint_digest = digest_file(ckpt_path);
            const std::string name = filtered ? "subgoals_filtered.csv" : "subgoals.csv";
            t.write((fs::path(out_dir) / name).string());
            scope.add(name);
            scope.finish();
        }
        did_something = true;
    }
    if (!did_something)
        throw CLI::ValidationError("stats", "nothing to do: pass --catalan, --labeled or --ckpt");
    return 0;
}

// --------------------------------------------------------------------- viz

int cmd_viz(const std::string& kind, const std::string& payload_path,
            const std::string& ckpt_path, uint64_t instance_seed, const std::string& out_path) {
    std::string svg_text;
    if (!payload_path.empty()) {
        std::ifstream in(payload_path);
        if (!in) throw IoError("cannot open payload: " + payload_path);
        std::stringstream buf;
        buf << in.rdbuf();
        svg_text = svg::render_svg(kind, buf.str());
    } else if (kind == "attention-overlay" && !ckpt_path.empty()) {
        const auto ckpt = model::load_checkpoint(ckpt_path);
        const int n_nodes = (ckpt.params.config.vocab - 3) / 2;
        const auto inst = task::make_instance(instance_seed, n_nodes);
        const auto seq = task::encode_instance(inst);
        const auto cache = model::forward(ckpt.params, seq.tokens);
        const task::TokenLayout layout(n_nodes);
        svg::AttentionOverlayPayload payload;
        spell_tokens(seq, n_nodes, &payload.token_labels);
        payload.query_positions = {layout.path_start};
        for (const auto& hit : interp::detect_register_positions(cache, inst))
            payload.query_positions.push_back(hit.position);
        payload.patterns = cache.attn_pattern;
        svg_text = svg::render_attention_overlay(payload);
    } else {
        throw CLI::ValidationError("viz", "need --payload, or --ckpt with attention-overlay");
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("cannot open output: " + out_path);
    out << svg_text;
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tree-pathfinding transformer lab"};
    app.require_subcommand(1);

    // The config file is read before flag parsing so flags win.
    std::string config_path;
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") config_path = argv[i + 1];
    }
    std::map<std::string, std::string> file_cfg;

    try {
        if (!config_path.empty()) file_cfg = parse_config_file(config_path);

        // generate
        auto* generate = app.add_subcommand("generate", "generate a dataset");
        std::string gen_out, gen_order = "shuffled", gen_exclude;
        int gen_nodes = 16, gen_count = 1000;
        uint64_t gen_seed = 0;
        generate->add_option("--out", gen_out)->required();
        generate->add_option("--n-nodes", gen_nodes);
        generate->add_option("--count", gen_count);
        generate->add_option("--seed", gen_seed);
        generate->add_option("--order", gen_order)
            ->check(CLI::IsMember({"shuffled", "backward", "forward"}));
        generate->add_option("--exclude", gen_exclude);

        // train
        auto* train = app.add_subcommand("train", "train a model");
        std::string tr_config, tr_data, tr_val, tr_out, tr_norm;
        uint64_t tr_seed = 0;
        int tr_epochs = 0, tr_batch = 0, tr_patience = 0, tr_val_subset = 0;
        double tr_lr = 0, tr_target = 0;
        train->add_option("--config", tr_config);
        train->add_option("--data", tr_data)->required();
        train->add_option("--val", tr_val);
        train->add_option("--out", tr_out)->required();
        train->add_option("--seed", tr_seed);
        train->add_option("--norm", tr_norm)->check(CLI::IsMember({"none", "preln"}));
        train->add_option("--epochs", tr_epochs);
        train->add_option("--lr", tr_lr);
        train->add_option("--batch", tr_batch);
        train->add_option("--target-em", tr_target);
        train->add_option("--patience", tr_patience);
        train->add_option("--val-subset", tr_val_subset);

        // eval
        auto* eval = app.add_subcommand("eval", "exact-match evaluation");
        std::string ev_ckpt, ev_data, ev_out;
        eval->add_option("--ckpt", ev_ckpt)->required();
        eval->add_option("--data", ev_data)->required();
        eval->add_option("--out", ev_out);

        // probe
        auto* probe = app.add_subcommand("probe", "train linear probes");
        std::string pr_ckpt, pr_data, pr_kind, pr_layers = "1", pr_out;
        int pr_count = 16000, pr_train = 8000, pr_test = 8000;
        bool pr_pre = false, pr_joint = false;
        uint64_t pr_seed = 0;
        probe->add_option("--ckpt", pr_ckpt)->required();
        probe->add_option("--data", pr_data);
        probe->add_option("--count", pr_count);
        probe->add_option("--kind", pr_kind)->required();
        probe->add_option("--layers", pr_layers);
        probe->add_flag("--pre-block", pr_pre);
        probe->add_flag("--joint-edge", pr_joint);
        probe->add_option("--train-size", pr_train);
        probe->add_option("--test-size", pr_test);
        probe->add_option("--seed", pr_seed);
        probe->add_option("--out", pr_out)->required();

        // patch
        auto* patch = app.add_subcommand("patch", "register-token resampling ablation");
        std::string pa_ckpt, pa_out;
        int pa_runs = 10, pa_samples = 1000, pa_layer = 4;
        double pa_threshold = 0.3;
        uint64_t pa_seed = 0;
        patch->add_option("--ckpt", pa_ckpt)->required();
        patch->add_option("--runs", pa_runs);
        patch->add_option("--samples", pa_samples);
        patch->add_option("--layer", pa_layer);
        patch->add_option("--threshold", pa_threshold);
        patch->add_option("--seed", pa_seed);
        patch->add_option("--out", pa_out)->required();

        // scrub
        auto* scrub = app.add_subcommand("scrub", "causal scrubbing");
        std::string sc_ckpt, sc_data, sc_hyp = "backward-chaining", sc_out;
        int sc_count = 2000;
        bool sc_lookahead = false;
        uint64_t sc_seed = 0;
        scrub->add_option("--ckpt", sc_ckpt)->required();
        scrub->add_option("--data", sc_data);
        scrub->add_option("--count", sc_count);
        scrub->add_option("--hypothesis", sc_hyp);
        scrub->add_flag("--lookahead-constraints", sc_lookahead);
        scrub->add_option("--seed", sc_seed);
        scrub->add_option("--out", sc_out)->required();

        // knockout
        auto* knockout = app.add_subcommand("knockout", "register attention knockout");
        std::string kn_ckpt, kn_data, kn_out;
        int kn_count = 1000, kn_min_depth = 6;
        double kn_threshold = 0.3;
        uint64_t kn_seed = 0;
        knockout->add_option("--ckpt", kn_ckpt)->required();
        knockout->add_option("--data", kn_data);
        knockout->add_option("--count", kn_count);
        knockout->add_option("--threshold", kn_threshold);
        knockout->add_option("--min-depth", kn_min_depth);
        knockout->add_option("--seed", kn_seed);
        knockout->add_option("--out", kn_out)->required();

        // circuits
        auto* circuits = app.add_subcommand("circuits", "weight-product circuit matrices + DLA");
        std::string ci_ckpt, ci_out;
        uint64_t ci_seed = 0;
        bool ci_approx = false;
        circuits->add_option("--ckpt", ci_ckpt)->required();
        circuits->add_option("--instance-seed", ci_seed);
        circuits->add_flag("--approximate", ci_approx);
        circuits->add_option("--out", ci_out)->required();

        // lens
        auto* lens = app.add_subcommand("lens", "skip-lens readouts");
        std::string le_ckpt, le_data, le_out;
        int le_count = 4000, le_examples = 2;
        uint64_t le_seed = 0;
        lens->add_option("--ckpt", le_ckpt)->required();
        lens->add_option("--data", le_data);
        lens->add_option("--count", le_count);
        lens->add_option("--examples", le_examples);
        lens->add_option("--seed", le_seed);
        lens->add_option("--out", le_out)->required();

        // stats
        auto* stats_cmd = app.add_subcommand("stats", "counting and subgoal statistics");
        int st_catalan = -1, st_labeled = -1, st_count = 1000;
        std::string st_ckpt, st_out;
        double st_threshold = 0.3;
        bool st_filtered = false, st_subgoals = false;
        uint64_t st_seed = 0;
        stats_cmd->add_option("--catalan", st_catalan);
        stats_cmd->add_option("--labeled", st_labeled);
        stats_cmd->add_flag("--subgoals", st_subgoals)->needs(stats_cmd->add_option("--ckpt", st_ckpt));
        stats_cmd->add_option("--count", st_count);
        stats_cmd->add_option("--threshold", st_threshold);
        stats_cmd->add_flag("--filtered", st_filtered);
        stats_cmd->add_option("--seed", st_seed);
        stats_cmd->add_option("--out", st_out);

        // viz
        auto* viz = app.add_subcommand("viz", "render SVG figures");
        std::string vz_kind, vz_payload, vz_ckpt, vz_out;
        uint64_t vz_seed = 0;
        viz->add_option("--kind", vz_kind)->required();
        viz->add_option("--payload", vz_payload);
        viz->add_option("--ckpt", vz_ckpt);
        viz->add_option("--instance-seed", vz_seed);
        viz->add_option("--out", vz_out)->required();

        // gradcheck (verification utility)
        auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
        int gc_layers = 2, gc_d = 8, gc_ff = 16, gc_nodes = 4;
        double gc_tolerance = 1e-4;
        std::string gc_norm = "none";
        uint64_t gc_seed = 12345;
        gradcheck->add_option("--layers", gc_layers);
        gradcheck->add_option("--d-model", gc_d);
        gradcheck->add_option("--d-ff", gc_ff);
        gradcheck->add_option("--n-nodes", gc_nodes);
        gradcheck->add_option("--tolerance", gc_tolerance);
        gradcheck->add_option("--norm", gc_norm)->check(CLI::IsMember({"none", "preln"}));
        gradcheck->add_option("--seed", gc_seed);

        app.parse(argc, argv);

        if (generate->parsed())
            return cmd_generate(gen_out, gen_nodes, gen_count, gen_seed, gen_order, gen_exclude);
        if (train->parsed())
            return cmd_train(file_cfg, tr_data, tr_val, tr_out, tr_seed, tr_norm, tr_epochs,
                             tr_lr, tr_batch, tr_target, tr_patience, tr_val_subset);
        if (eval->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_out);
        if (probe->parsed())
            return cmd_probe(pr_ckpt, pr_data, pr_count, pr_seed, pr_kind, pr_layers, pr_pre,
                             pr_joint, pr_train, pr_test, pr_out);
        if (patch->parsed())
            return cmd_patch(pa_ckpt, pa_runs, pa_samples, pa_seed, pa_layer, pa_threshold,
                             pa_out);
        if (scrub->parsed())
            return cmd_scrub(sc_ckpt, sc_data, sc_count, sc_seed, sc_hyp, sc_lookahead, sc_out);
        if (knockout->parsed())
            return cmd_knockout(kn_ckpt, kn_data, kn_count, kn_seed, kn_threshold, kn_min_depth,
                                kn_out);
        if (circuits->parsed()) return cmd_circuits(ci_ckpt, ci_seed, ci_approx, ci_out);
        if (lens->parsed())
            return cmd_lens(le_ckpt, le_data, le_count, le_seed, le_examples, le_out);
        if (stats_cmd->parsed())
            return cmd_stats(st_catalan, st_labeled, st_ckpt, st_count, st_seed, st_threshold,
                             st_filtered, st_out);
        if (viz->parsed()) return cmd_viz(vz_kind, vz_payload, vz_ckpt, vz_seed, vz_out);
        if (gradcheck->parsed()) {
            model::ModelConfig config = model::ModelConfig::for_task(gc_nodes, gc_layers, gc_d,
                                                                     gc_ff);
            config.norm = model::norm_from_string(gc_norm);
            const auto report = model::check_gradients(config, gc_seed, gc_tolerance);
            std::cout << "max relative error " << report.max_rel_error << " over "
                      << report.coords_checked << " coordinates\n";
            return 0;
        }
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
