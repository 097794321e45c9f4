#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "backchain/errors.hpp"
#include "backchain/interp/activations.hpp"
#include "backchain/interp/circuits.hpp"
#include "backchain/interp/interventions.hpp"
#include "backchain/interp/lens.hpp"
#include "backchain/interp/probes.hpp"
#include "backchain/interp/registers.hpp"
#include "backchain/interp/scrub.hpp"
#include "backchain/model/train.hpp"
#include "backchain/report.hpp"
#include "backchain/stats.hpp"
#include "backchain/svg.hpp"
#include "test_util.hpp"

using namespace backchain;
using namespace backchain::interp;

namespace {

model::Parameters small_model(uint64_t seed = 1, int n_nodes = 16, int layers = 6, int d = 32,
                              int ff = 64) {
    model::ModelConfig config = model::ModelConfig::for_task(n_nodes, layers, d, ff);
    config.seed = seed;
    Rng rng(seed);
    return model::init_params<float>(config, rng);
}

// Hand-built cache with hard attention; streams/logits stay zero.
model::ActivationCache fabricated_cache(const task::TaskInstance& instance, int layers) {
    const task::TokenLayout layout(instance.tree.n_nodes);
    model::ActivationCache cache;
    cache.length = layout.context;
    cache.attn_pattern.assign(static_cast<size_t>(layers), Mat<float>(cache.length, cache.length));
    for (auto& pat : cache.attn_pattern) {
        for (int p = 0; p < cache.length; ++p) pat.at(p, p) = 1.0f;  // self-attention default
    }
    return cache;
}

}  // namespace

TEST_CASE("loss_recovered: Eq-3 arithmetic on synthetic triples") {
    CHECK(loss_recovered(1.2, 3.5553, 1.2) == 1.0);           // self-donor
    CHECK(loss_recovered(3.5553, 3.5553, 1.2) == 0.0);        // uniform-logit model
    CHECK(loss_recovered(2.0, 4.0, 1.0) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(loss_recovered(1.0, 2.0, 2.0), InvalidArgument);
}

TEST_CASE("causal scrub: self-donor recovery is exactly 1") {
    const auto params = small_model(3, 8, 4);
    const auto inst = task::make_instance(11, 8);
    const auto seq = task::encode_instance(inst);
    const task::TokenLayout layout(8);
    const int q = layout.path_start;

    const auto clean = model::forward(params, seq.tokens);
    std::vector<uint8_t> first_only(seq.tokens.size(), 0);
    first_only[static_cast<size_t>(q)] = 1;
    const double l_model = model::sequence_loss(clean.logits, seq.tokens, first_only);

    model::InterventionSpec spec;
    for (int layer = 1; layer <= params.config.layers; ++layer) {
        Mat<float> payload(1, params.config.d_model);
        const auto& attn = clean.attn_out[static_cast<size_t>(layer) - 1];
        std::copy(attn.row(q), attn.row(q) + attn.cols, payload.row(0));
        spec.actions.push_back(
            model::InterventionSpec::replace_at(layer, model::Site::AttnOut, {q}, payload));
    }
    const auto scrubbed = model::forward(params, seq.tokens, spec);
    const double l_scrubbed = model::sequence_loss(scrubbed.logits, seq.tokens, first_only);
    CHECK(l_scrubbed == l_model);  // bitwise identical forward
    CHECK(loss_recovered(l_scrubbed, std::log(19.0), l_model) == 1.0);
}

TEST_CASE("causal scrub: runs end to end on a random model") {
    const auto params = small_model(5, 8, 4);
    const auto dataset = task::generate_dataset({.seed = 21, .count = 30, .n_nodes = 8,
                                                 .order = task::EdgeOrder::Shuffled});
    ScrubHypothesis hyp;
    hyp.donor_budget = 3000;
    hyp.seed = 9;
    const auto result = causal_scrub(params, hyp, dataset);
    CHECK(result.total + result.skipped == 30);
    int count = 0;
    for (const auto& row : result.rows) count += row.count;
    CHECK(count == result.total);
    // A random model's "performance" is itself near-random; recovery is not
    // asserted here, only the accounting.
}

TEST_CASE("scrub_key is the ancestor l-1 edges above the goal") {
    const auto t = testutil::tree_from_edges(5, {{0, 1}, {1, 2}, {2, 3}, {3, 4}});
    CHECK(scrub_key(t, 4, 1) == 4);
    CHECK(scrub_key(t, 4, 3) == 2);
    CHECK(scrub_key(t, 4, 5) == 0);
    CHECK(scrub_key(t, 4, 6) == std::nullopt);
}

TEST_CASE("activation_patch: self-patch is a no-op and LD matches Eq-2 arithmetic") {
    auto params = small_model(7);
    const auto inst = task::make_instance(5, 16);
    const auto seq = task::encode_instance(inst);
    const task::TokenLayout layout(16);
    const int q = layout.path_start;

    std::vector<PatchSite> sites{{4, model::Site::ResidPost, {36, 39, 42}}};
    const auto self = activation_patch(params, seq.tokens, seq.tokens, sites, q, 1, 2);
    CHECK(std::abs(self.effect) <= 1e-6);

    CHECK_THROWS_AS(activation_patch(params, seq.tokens, seq.tokens, sites, q, 3, 3),
                    InvalidArgument);

    // Constructed logits: Logit(r)=2.0, Logit(r')=0.5 -> LD = 1.5.
    model::ModelConfig zc = model::ModelConfig::for_task(16, 2, 16, 32);
    zc.init_scale = 0.0;
    Rng zr(1);
    auto zero_params = model::init_params<float>(zc, zr);
    zero_params.w_pos.at(q, 0) = 1.0f;
    zero_params.w_unembed.at(0, 1) = 2.0f;
    zero_params.w_unembed.at(0, 2) = 0.5f;
    const auto base = model::forward(zero_params, seq.tokens);
    const double ld = static_cast<double>(base.logits.at(q, 1)) - base.logits.at(q, 2);
    CHECK(ld == doctest::Approx(1.5).epsilon(1e-6));

    // Swapping the roles of r and r' negates LD exactly.
    const std::vector<PatchSite> shallow{{2, model::Site::ResidPost, {36, 39, 42}}};
    const auto fwd = activation_patch(zero_params, seq.tokens, seq.tokens, shallow, q, 1, 2);
    const auto rev = activation_patch(zero_params, seq.tokens, seq.tokens, shallow, q, 2, 1);
    CHECK(fwd.ld_baseline == -rev.ld_baseline);
    CHECK(fwd.ld_patched == -rev.ld_patched);
}

TEST_CASE("attention_knockout: empty set is bit-identical, blocked weights are zero") {
    const auto params = small_model(9);
    const auto seq = task::encode_instance(task::make_instance(6, 16));

    const auto baseline = model::forward(params, seq.tokens);
    const auto empty = attention_knockout(params, seq.tokens, {}, {5, 6});
    CHECK(baseline.logits.d == empty.logits.d);

    const std::vector<std::pair<int, int>> blocked{{47, 36}, {47, 39}, {50, 2}};
    const auto knocked = attention_knockout(params, seq.tokens, blocked, {5, 6});
    for (int layer : {5, 6}) {
        for (const auto& [qq, kk] : blocked) {
            CHECK(knocked.attn_pattern[static_cast<size_t>(layer) - 1].at(qq, kk) == 0.0f);
        }
    }
    CHECK_THROWS_AS(attention_knockout(params, seq.tokens, {{3, 7}}, {1}), InvalidArgument);
}

TEST_CASE("direct_logit_attribution: contributions sum to the head totals") {
    const auto params = small_model(13);
    const auto seq = task::encode_instance(task::make_instance(8, 16));
    const auto cache = model::forward(params, seq.tokens);
    const task::TokenLayout layout(16);
    const int q = layout.path_start;

    const auto table = direct_logit_attribution(params, cache, {5, 6}, q);
    for (size_t li = 0; li < table.layers.size(); ++li) {
        for (int j = 0; j < params.config.vocab; ++j) {
            double sum = 0;
            for (int k = 0; k < table.length; ++k) sum += table.row(static_cast<int>(li), k)[j];
            CHECK(std::abs(sum - table.head_totals[li][static_cast<size_t>(j)]) <= 1e-4);
        }
        // Keys after the query carry exactly zero contribution.
        for (int k = q + 1; k < table.length; ++k) {
            for (int j = 0; j < params.config.vocab; ++j)
                CHECK(table.row(static_cast<int>(li), k)[j] == 0.0f);
        }
    }
    CHECK_THROWS_AS(direct_logit_attribution(params, cache, {7}, q), InvalidArgument);
}

TEST_CASE("circuit matrices: shapes, purity, precondition") {
    const auto params = small_model(15);
    const auto m0 = qk_circuit_m0(params);
    CHECK(m0.rows == 63);
    CHECK(m0.cols == 63);
    const auto m1 = qk_circuit_m1(params);
    CHECK(m1.rows == 32);
    CHECK(m1.cols == 32);
    const auto rp = subgoal_matrix_rp(params);
    CHECK(rp.rows == 63);
    CHECK(rp.cols == 35);

    CHECK(qk_circuit_m0(params).d == m0.d);
    CHECK(qk_circuit_m1(params).d == m1.d);
    CHECK(subgoal_matrix_rp(params).d == rp.d);

    auto preln = small_model(15);
    preln.config.norm = model::Norm::PreLn;
    CHECK_THROWS_AS(qk_circuit_m0(preln), PreconditionError);
    CHECK_NOTHROW(qk_circuit_m0(preln, true));
}

TEST_CASE("collect_activations: row counts, determinism, recompute oracle") {
    const auto params = small_model(17, 8, 3);
    const auto dataset = task::generate_dataset({.seed = 31, .count = 20, .n_nodes = 8,
                                                 .order = task::EdgeOrder::Shuffled});
    ActivationRequest request;
    request.layers = {0, 2};
    request.select = ActivationRequest::Select::PathPositions;

    const auto table = collect_activations(params, dataset, request);
    size_t expect = 0;
    for (const auto& inst : dataset) expect += 2 * inst.path.size();
    CHECK(table.rows() == expect);

    const auto again = collect_activations(params, dataset, request);
    CHECK(table.features == again.features);

    // Recompute oracle: rows equal an independent forward bit for bit.
    const auto seq = task::encode_instance(dataset[3]);
    const auto cache = model::forward(params, seq.tokens);
    for (size_t r = 0; r < table.rows(); ++r) {
        if (table.keys[r].instance != 3) continue;
        const auto& stream = cache.resid[static_cast<size_t>(table.keys[r].layer)];
        for (int j = 0; j < table.d_model; ++j)
            CHECK(table.row(r)[j] == stream.at(table.keys[r].position, j));
    }

    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "backchain_acts.bin").string();
    table.save(path);
    const auto loaded = ActivationTable::load(path);
    CHECK(loaded.features == table.features);
    collect_activations_to_file(params, dataset, request, path);
    const auto streamed = ActivationTable::load(path);
    CHECK(streamed.features == table.features);
    fs::remove(path);
}

TEST_CASE("probe engine: separable synthetic data and permuted baseline at chance") {
    // 4-class problem, class direction + noise.
    const int n_train = 400, n_test = 400, d = 16, k = 4;
    Rng rng(42);
    auto make_split = [&](int n, Mat<float>& x, std::vector<int>& y) {
        x = Mat<float>(n, d);
        y.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            const int label = rng.below_int(k);
            y[static_cast<size_t>(i)] = label;
            for (int j = 0; j < d; ++j)
                x.at(i, j) = static_cast<float>(0.3 * rng.normal()) + (j == label ? 1.0f : 0.0f);
        }
    };
    Mat<float> x_train, x_test;
    std::vector<int> y_train, y_test;
    make_split(n_train, x_train, y_train);
    make_split(n_test, x_test, y_test);

    LogRegOptions options;
    options.max_iters = 500;
    const auto fitmodel = fit_softmax_regression(x_train, y_train, k, options);
    const auto scores = logreg_scores(fitmodel, x_test);
    std::vector<int> pred(static_cast<size_t>(n_test));
    for (int r = 0; r < n_test; ++r) {
        const float* row = scores.row(r);
        pred[static_cast<size_t>(r)] =
            static_cast<int>(std::max_element(row, row + k) - row);
    }
    const double f1 = macro_f1(pred, y_test, k);
    CHECK(f1 > 0.95);

    // Permutation oracle: replicate the permuted baseline to estimate its
    // spread, then check each draw sits within 3 sigma of the replicate mean.
    std::vector<double> baseline_f1s;
    for (int rep = 0; rep < 8; ++rep) {
        auto y_perm = y_train;
        Rng prng(1000 + static_cast<uint64_t>(rep));
        prng.shuffle(y_perm.data(), y_perm.size());
        const auto base = fit_softmax_regression(x_train, y_perm, k, options);
        const auto bscores = logreg_scores(base, x_test);
        std::vector<int> bpred(static_cast<size_t>(n_test));
        for (int r = 0; r < n_test; ++r) {
            const float* row = bscores.row(r);
            bpred[static_cast<size_t>(r)] =
                static_cast<int>(std::max_element(row, row + k) - row);
        }
        baseline_f1s.push_back(macro_f1(bpred, y_test, k));
    }
    const double mu = stats::mean(baseline_f1s);
    const double sd = stats::sample_stddev(baseline_f1s);
    CHECK(mu < 0.45);  // far below the separable probe
    for (double b : baseline_f1s) CHECK(std::abs(b - mu) <= 3 * sd + 0.05);
}

TEST_CASE("build_probe_labels: edge, goal, children and leaves labels") {
    const auto params = small_model(19, 8, 3);
    const auto dataset = task::generate_dataset({.seed = 37, .count = 24, .n_nodes = 8,
                                                 .order = task::EdgeOrder::Shuffled});
    ProbeSpec spec;
    spec.kind = ProbeKind::EdgeAtTarget;
    spec.layer = 1;
    spec.train_size = 12;
    spec.test_size = 12;
    spec.seed = 7;
    auto ex = build_probe_labels(spec, params, dataset);
    CHECK(ex.head_names == std::vector<std::string>{"source", "target"});
    CHECK(ex.classes == 8);
    CHECK(ex.x_train.rows == 12);
    // Labels must be a real edge of the instance.
    for (size_t i = 0; i < ex.y_train[0].size(); ++i) {
        const auto& inst = dataset[i];
        const int src = ex.y_train[0][i], tgt = ex.y_train[1][i];
        CHECK(inst.tree.parent[static_cast<size_t>(tgt)] == src);
    }

    spec.kind = ProbeKind::GoalAtPath;
    ex = build_probe_labels(spec, params, dataset);
    for (size_t i = 0; i < ex.y_train[0].size(); ++i) CHECK(ex.y_train[0][i] == dataset[i].goal);

    spec.kind = ProbeKind::ChildrenAtPath;
    ex = build_probe_labels(spec, params, dataset);
    CHECK(ex.multilabel);
    CHECK(ex.bits == 8);

    spec.kind = ProbeKind::LeavesAtPath;
    ex = build_probe_labels(spec, params, dataset);
    for (int r = 0; r < ex.bits_train.rows; ++r) {
        for (int j = 0; j < 8; ++j) {
            if (ex.bits_train.at(r, j)) CHECK(dataset[static_cast<size_t>(r)].tree.is_leaf(j));
        }
    }
}

TEST_CASE("read_attention_chain recovers a constructed hard-attention chain") {
    // Chain tree 0->1->2->3 plus padding nodes to n=8; register at a comma.
    std::vector<std::pair<int, int>> edges{{0, 1}, {1, 2}, {2, 3}, {0, 4}, {4, 5}, {4, 6}, {6, 7}};
    auto tree = testutil::tree_from_edges(8, edges);
    auto inst = testutil::instance_from(tree, 3);
    inst.tree.validate();

    const task::TokenLayout layout(8);
    auto cache = fabricated_cache(inst, 4);
    // Presentation order = canonical: edges sorted by child id:
    // (0,1) (1,2) (2,3) (0,4) (4,5) (4,6) (6,7); target of edge i at 3i+1.
    // Register: the last comma (position 20), so every edge is in view.
    const int reg = 20;

    // Layer 1 picks subgoal 3 (leaf: only its target token "->3" exists).
    cache.attn_pattern[0].at(reg, reg) = 0.0f;
    cache.attn_pattern[0].at(reg, 7) = 1.0f;
    // Layer 2: climb to 2 via edge (2,3) at target position 7.
    cache.attn_pattern[1].at(reg, reg) = 0.0f;
    cache.attn_pattern[1].at(reg, 7) = 1.0f;
    // Layer 3: climb to 1 via edge (1,2) at target position 4.
    cache.attn_pattern[2].at(reg, reg) = 0.0f;
    cache.attn_pattern[2].at(reg, 4) = 1.0f;

    const auto bits = read_attention_chain(cache, inst, reg, 2, 3);
    REQUIRE(bits.size() == 2);
    CHECK(bits[0] == std::pair<int, int>{2, 3});
    CHECK(bits[1] == std::pair<int, int>{1, 2});
}

TEST_CASE("detect_register_positions: threshold edge cases") {
    const auto params = small_model(23);
    const auto inst = task::make_instance(12, 16);
    const auto seq = task::encode_instance(inst);
    const auto cache = model::forward(params, seq.tokens);

    CHECK(detect_register_positions(cache, inst, 1.01).empty());

    // Attention criterion alone: every edge-region position has some
    // node-token key at weight >= 0.
    const auto all = detect_register_positions(cache, inst, 0.0, false);
    const task::TokenLayout layout(16);
    CHECK(static_cast<int>(all.size()) == layout.edge_region_end);
}

TEST_CASE("subgoal_statistics: ratios bounded and accounting consistent") {
    const auto params = small_model(29, 8, 3);
    const auto dataset = task::generate_dataset({.seed = 41, .count = 60, .n_nodes = 8,
                                                 .order = task::EdgeOrder::Shuffled});
    SubgoalStatsOptions options;
    options.threshold = 0.2;
    const auto stats_out = subgoal_statistics(params, dataset, options);
    CHECK(stats_out.trees == 60);
    for (const auto& row : stats_out.rows) {
        double sum = 0;
        for (const auto& [sub, ratio] : row.subgoal_ratio) {
            CHECK(ratio >= 0.0);
            sum += ratio;
        }
        CHECK(sum <= 1.0 + 1e-9);
        CHECK(row.selected_ratio == doctest::Approx(sum).epsilon(1e-9));
    }
}

TEST_CASE("skip lens: n=0 identity reproduces model logits exactly") {
    const auto params = small_model(31, 8, 3);
    const auto seq = task::encode_instance(task::make_instance(3, 8));
    const auto cache = model::forward(params, seq.tokens);
    const auto lens = SkipLens::identity(params);
    const auto lens_logits = apply_skip_lens(lens, cache);
    CHECK(lens_logits.d == cache.logits.d);
}

TEST_CASE("register_patch_experiment: small run produces depth rows") {
    const auto params = small_model(37, 8, 4);
    RegisterPatchOptions options;
    options.runs = 3;
    options.samples_per_run = 12;
    options.n_nodes = 8;
    options.layer = 3;
    options.register_threshold = 0.05;
    options.pair_budget = 4000;
    options.seed = 5;
    const auto rows = register_patch_experiment(params, options);
    CHECK(!rows.empty());
    for (const auto& row : rows) {
        if (row.omitted) continue;
        CHECK(row.samples > 0);
        CHECK(row.ci.lo <= row.ci.hi);
    }
}

TEST_CASE("trained tiny model: lens monotonicity and subgoal aggregation") {
    // A small model trained briefly on the 4-node task.
    model::ModelConfig config = model::ModelConfig::for_task(4, 3, 32, 64);
    config.seed = 13;
    const auto train = task::generate_dataset({.seed = 61, .count = 2048, .n_nodes = 4,
                                               .order = task::EdgeOrder::Shuffled});
    const auto val = task::generate_dataset({.seed = 62, .count = 128, .n_nodes = 4,
                                             .order = task::EdgeOrder::Shuffled});
    model::TrainOptions options;
    options.batch_size = 64;
    options.max_epochs = 6;
    options.patience = 10;
    options.val_subset = 128;
    const auto result = model::train_loop(config, train, val, options);
    CHECK(result.epochs.back().mean_loss < result.epochs.front().mean_loss);

    // Lens losses should not get worse as the source stream moves toward
    // the output.
    LogRegOptions lens_options;
    lens_options.max_iters = 600;
    const auto lens_data = task::generate_dataset({.seed = 63, .count = 800, .n_nodes = 4,
                                                   .order = task::EdgeOrder::Shuffled});
    SkipLensReport shallow, deep;
    train_skip_lens(result.params, lens_data, 1, lens_options, &shallow);  // x^2
    train_skip_lens(result.params, lens_data, 2, lens_options, &deep);     // x^1
    INFO("lens over x^2 loss ", shallow.train_loss, ", over x^1 loss ", deep.train_loss);
    CHECK(shallow.train_loss <= deep.train_loss + 0.05);

    // Subgoal ratios must agree with a direct recount of the per-tree hits.
    const auto stats_data = task::generate_dataset({.seed = 64, .count = 80, .n_nodes = 4,
                                                    .order = task::EdgeOrder::Shuffled});
    SubgoalStatsOptions sopt;
    sopt.threshold = 0.25;
    const auto agg = subgoal_statistics(result.params, stats_data, sopt);
    std::map<std::pair<int, int>, int> manual;
    for (const auto& inst : stats_data) {
        const auto seq = task::encode_instance(inst);
        const auto cache = model::forward(result.params, seq.tokens);
        for (const auto& hit : detect_register_positions(cache, inst, sopt.threshold))
            ++manual[{hit.position, hit.subgoal}];
    }
    for (const auto& row : agg.rows) {
        for (const auto& [sub, ratio] : row.subgoal_ratio) {
            const auto it = manual.find({row.position, sub});
            REQUIRE(it != manual.end());
            CHECK(ratio == doctest::Approx(it->second / 80.0).epsilon(1e-12));
        }
    }

    // Conditioning on a usable modal subgoal cannot reduce its ratio
    // (selection requires the node to occur before the position at all).
    sopt.filter_modal_usable = true;
    const auto filtered = subgoal_statistics(result.params, stats_data, sopt);
    std::map<int, double> unfiltered_modal;
    std::map<int, int> unfiltered_node;
    for (const auto& row : agg.rows) {
        unfiltered_modal[row.position] = row.modal_ratio;
        unfiltered_node[row.position] = row.modal_subgoal;
    }
    for (const auto& row : filtered.rows) {
        const auto node = unfiltered_node.find(row.position);
        if (node == unfiltered_node.end()) continue;
        const auto it = row.subgoal_ratio.find(node->second);
        const double ratio = it == row.subgoal_ratio.end() ? 0.0 : it->second;
        CHECK(ratio + 1e-9 >= unfiltered_modal[row.position] - 0.15);
    }
}

TEST_CASE("csv and json exports round-trip") {
    std::vector<ProbeReport> reports(2);
    reports[0] = {"edge-at-target", 1, 0.995, 0.06, {0.99, 1.0}, true, ""};
    reports[1] = {"goal-at-path", 1, 1.0, 0.03, {1.0}, false, "optimizer stopped"};
    const auto csv = report::probe_table(reports);
    CHECK(csv.header == std::vector<std::string>{"probe", "layer", "f1"});
    CHECK(csv.rows.size() == reports.size());

    const auto text = report::probe_reports_json(reports);
    const auto back = report::probe_reports_from_json(text);
    REQUIRE(back.size() == 2);
    CHECK(back[0].probe == reports[0].probe);
    CHECK(back[0].f1 == reports[0].f1);
    CHECK(back[1].converged == reports[1].converged);
    CHECK(back[1].note == reports[1].note);

    report::RunManifest manifest;
    manifest.command = "probe";
    manifest.config_digest = "abc";
    manifest.dataset_digest = "def";
    manifest.checkpoint_digest = "012";
    manifest.seeds = {1, 2};
    manifest.artifacts = {"probes.csv", "probes.json"};
    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "backchain_manifest.json").string();
    report::write_manifest(manifest, path);
    const auto loaded = report::read_manifest(path);
    CHECK(loaded.command == manifest.command);
    CHECK(loaded.artifacts == manifest.artifacts);
    fs::remove(path);
}

TEST_CASE("svg: determinism, uniform attention, one-hot coloring") {
    svg::AttentionOverlayPayload payload;
    const int T = 4;
    payload.token_labels = {"0", "->1", ",", "2"};
    payload.query_positions = {3};
    Mat<float> uniform(T, T);
    for (int p = 0; p < T; ++p) {
        for (int k = 0; k <= p; ++k) uniform.at(p, k) = 1.0f / (p + 1);
    }
    payload.patterns = {uniform};
    const auto a = svg::render_attention_overlay(payload);
    const auto b = svg::render_attention_overlay(payload);
    CHECK(a == b);
    // Uniform row: all key cells carry the same intensity string.
    const std::string tint = "rgba(214,39,40,0.250";
    size_t count = 0, at = 0;
    while ((at = a.find(tint, at)) != std::string::npos) {
        ++count;
        at += tint.size();
    }
    CHECK(count == 4);

    // One-hot attention from query 3 to key 1: only key 1 colored.
    Mat<float> onehot(T, T);
    onehot.at(3, 1) = 1.0f;
    payload.patterns = {onehot};
    const auto c = svg::render_attention_overlay(payload);
    CHECK(c.find("rgba(214,39,40,1.000") != std::string::npos);
    size_t colored = 0;
    at = 0;
    while ((at = c.find("rgba(214,39,40", at)) != std::string::npos) {
        ++colored;
        at += 10;
    }
    CHECK(colored == 2);  // legend swatch + the single colored key

    const auto tree = testutil::tree_from_edges(4, {{0, 1}, {0, 2}, {2, 3}});
    svg::TreeLensPayload lens_payload;
    lens_payload.tree = tree;
    lens_payload.goal = 3;
    lens_payload.per_layer_argmax = {{2}, {3}};
    const auto t1 = svg::render_tree_lens(lens_payload);
    CHECK(t1 == svg::render_tree_lens(lens_payload));
    CHECK(t1.find("<svg") == 0);

    svg::DepthCurvePayload curve;
    curve.title = "recovery";
    curve.x = {2, 3, 4};
    curve.y = {1.0, 0.9, 0.5};
    curve.lo = {0.95, 0.85, 0.4};
    curve.hi = {1.05, 0.95, 0.6};
    CHECK(svg::render_depth_curve(curve) == svg::render_depth_curve(curve));

    CHECK_THROWS_AS(svg::render_svg("attention-overlay", "{\"bogus\":1}"), InvalidArgument);
    CHECK_THROWS_AS(svg::render_svg("no-such-kind", "{}"), InvalidArgument);
}
