#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "backchain/digest.hpp"
#include "backchain/errors.hpp"
#include "backchain/model/forward.hpp"
#include "backchain/model/gradcheck.hpp"
#include "backchain/model/optim.hpp"
#include "backchain/model/train.hpp"
#include "backchain/task.hpp"
#include "test_util.hpp"

using namespace backchain;
using namespace backchain::model;

namespace {

ModelConfig tiny_config(int layers = 2, int d = 8, int ff = 16, Norm norm = Norm::None) {
    ModelConfig c = ModelConfig::for_task(4, layers, d, ff);
    c.norm = norm;
    return c;
}

std::vector<int> tokens_for(const ModelConfig& config, uint64_t seed) {
    const int n = (config.vocab - 3) / 2;
    return task::encode_instance(task::make_instance(seed, n)).tokens;
}

}  // namespace

TEST_CASE("init_params: determinism and zero-scale degeneracy") {
    ModelConfig config = tiny_config();
    Rng a(5), b(5);
    auto pa = init_params<float>(config, a);
    auto pb = init_params<float>(config, b);
    for (size_t t = 0; t < pa.tensors().size(); ++t) {
        const auto ta = pa.tensors()[t], tb = pb.tensors()[t];
        CHECK(std::equal(ta.data, ta.data + ta.size, tb.data));
    }

    config.init_scale = 0.0;
    Rng c(5);
    auto pz = init_params<float>(config, c);
    const auto cache = forward(pz, tokens_for(config, 1));
    for (int p = 0; p < cache.logits.rows; ++p) {
        for (int j = 1; j < cache.logits.cols; ++j) {
            CHECK(cache.logits.at(p, j) == cache.logits.at(p, 0));
        }
    }
}

TEST_CASE("init_params: empirical weight stddev within 2% of 0.02") {
    ModelConfig config;  // full-size d=128 tensors
    Rng rng(11);
    auto params = init_params<float>(config, rng);
    for (const auto& t : params.tensors()) {
        if (t.name != "layer1.attn.wq" && t.name != "layer3.mlp.win") continue;
        double sum = 0, sq = 0;
        for (size_t i = 0; i < t.size; ++i) {
            sum += t.data[i];
            sq += double(t.data[i]) * double(t.data[i]);
        }
        const double mean = sum / double(t.size);
        const double sd = std::sqrt(sq / double(t.size) - mean * mean);
        CHECK(std::abs(sd - 0.02) < 0.0004);
    }
}

TEST_CASE("forward: residual decomposition and attention row invariants") {
    for (Norm norm : {Norm::None, Norm::PreLn}) {
        ModelConfig config = tiny_config(2, 8, 16, norm);
        Rng rng(3);
        const auto params = init_params<float>(config, rng);
        const auto tokens = tokens_for(config, 2);
        const auto cache = forward(params, tokens);
        const int T = cache.length;

        for (int l = 1; l <= config.layers; ++l) {
            for (int p = 0; p < T; ++p) {
                for (int j = 0; j < config.d_model; ++j) {
                    const float want = cache.resid[size_t(l) - 1].at(p, j) +
                                       cache.attn_out[size_t(l) - 1].at(p, j) +
                                       cache.mlp_out[size_t(l) - 1].at(p, j);
                    CHECK(std::abs(cache.resid[size_t(l)].at(p, j) - want) <= 1e-5f);
                }
            }
        }
        for (int l = 0; l < config.layers; ++l) {
            for (int p = 0; p < T; ++p) {
                double sum = 0;
                for (int j = 0; j < T; ++j) {
                    const float a = cache.attn_pattern[size_t(l)].at(p, j);
                    CHECK(a >= 0.0f);
                    if (j > p) CHECK(a == 0.0f);
                    sum += a;
                }
                CHECK(std::abs(sum - 1.0) <= 1e-6);
            }
        }
    }
}

TEST_CASE("forward: input validation") {
    ModelConfig config = tiny_config();
    Rng rng(3);
    const auto params = init_params<float>(config, rng);
    CHECK_THROWS_AS(forward(params, {config.vocab}), InvalidArgument);
    CHECK_THROWS_AS(forward(params, std::vector<int>(config.context + 1, 0)), InvalidArgument);
}

TEST_CASE("forward: identity interventions are no-ops; block-score pins attention") {
    ModelConfig config = tiny_config(2, 8, 16);
    Rng rng(7);
    const auto params = init_params<float>(config, rng);
    const auto tokens = tokens_for(config, 3);
    const auto clean = forward(params, tokens);
    const int T = clean.length;

    InterventionSpec spec;
    for (int l = 1; l <= config.layers; ++l) {
        std::vector<int> all(static_cast<size_t>(T));
        std::iota(all.begin(), all.end(), 0);
        auto rows = [&](const Mat<float>& src) {
            Mat<float> m(T, src.cols);
            m.d = src.d;
            return m;
        };
        spec.actions.push_back(InterventionSpec::replace_at(l, Site::ResidPre, all,
                                                            rows(clean.resid[size_t(l) - 1])));
        spec.actions.push_back(InterventionSpec::replace_at(l, Site::AttnOut, all,
                                                            rows(clean.attn_out[size_t(l) - 1])));
        spec.actions.push_back(InterventionSpec::replace_at(l, Site::MlpOut, all,
                                                            rows(clean.mlp_out[size_t(l) - 1])));
        spec.actions.push_back(InterventionSpec::replace_at(l, Site::ResidPost, all,
                                                            rows(clean.resid[size_t(l)])));
        Mat<float> scores(T, config.context);
        for (int p = 0; p < T; ++p) {
            for (int j = 0; j < T; ++j) scores.at(p, j) = clean.attn_scores[size_t(l) - 1].at(p, j);
        }
        spec.actions.push_back(InterventionSpec::replace_at(l, Site::AttnScores, all, scores));
    }
    const auto patched = forward(params, tokens, spec);
    for (size_t i = 0; i < clean.logits.size(); ++i) {
        CHECK(std::abs(patched.logits.d[i] - clean.logits.d[i]) <= 1e-6f);
    }

    // Block everything except key 0 for the last query: one-hot attention.
    InterventionSpec block;
    std::vector<int> keys;
    for (int k = 1; k < T; ++k) keys.push_back(k);
    block.actions.push_back(InterventionSpec::block_score(1, T - 1, keys));
    const auto blocked = forward(params, tokens, block);
    CHECK(blocked.attn_pattern[0].at(T - 1, 0) == 1.0f);
    for (int k = 1; k < T; ++k) CHECK(blocked.attn_pattern[0].at(T - 1, k) == 0.0f);

    // Blocking every key empties the softmax support.
    InterventionSpec starve;
    std::vector<int> all_keys(static_cast<size_t>(T));
    std::iota(all_keys.begin(), all_keys.end(), 0);
    starve.actions.push_back(InterventionSpec::block_score(1, T - 1, all_keys));
    CHECK_THROWS_AS(forward(params, tokens, starve), NumericError);
}

TEST_CASE("sequence_loss: closed forms") {
    const int vocab = 35;
    Mat<float> logits(4, vocab);
    std::vector<int> tokens{1, 2, 3, 4};
    std::vector<uint8_t> mask{1, 1, 0, 0};
    CHECK(sequence_loss(logits, tokens, mask) == doctest::Approx(std::log(35.0)).epsilon(1e-9));

    // One-hot correct logits with margin 30.
    Mat<float> hot(4, vocab);
    hot.at(0, 2) = 30.0f;
    hot.at(1, 3) = 30.0f;
    CHECK(sequence_loss(hot, tokens, mask) < 1e-9);

    // Mean is invariant to duplicating positions with identical losses.
    Mat<float> two(4, vocab);
    std::vector<uint8_t> one_pos{1, 0, 0, 0}, two_pos{1, 1, 0, 0};
    for (int j = 0; j < vocab; ++j) {
        two.at(0, j) = 0.25f * j;
        two.at(1, j) = 0.25f * j;
    }
    std::vector<int> same_target{0, 5, 5, 0};
    CHECK(sequence_loss(two, same_target, one_pos) ==
          doctest::Approx(sequence_loss(two, same_target, two_pos)).epsilon(1e-12));

    std::vector<uint8_t> none{0, 0, 0, 0};
    CHECK_THROWS_AS(sequence_loss(logits, tokens, none), InvalidArgument);
    std::vector<uint8_t> last{0, 0, 0, 1};
    CHECK_THROWS_AS(sequence_loss(logits, tokens, last), InvalidArgument);
}

TEST_CASE("backward: saturated target yields vanishing gradients") {
    ModelConfig config = tiny_config(1, 8, 16);
    config.init_scale = 0.0;
    Rng rng(4);
    auto params = init_params<double>(config, rng);
    // Classify from a fixed direction: embedding row of token 0 set so the
    // correct logit saturates the softmax.
    params.w_embed.at(0, 0) = 1.0;
    params.w_unembed.at(0, 1) = 80.0;  // token at position 1 is `1`

    Batch batch;
    batch.batch = 1;
    batch.length = 2;
    batch.tokens = {0, 1};
    batch.mask = {1, 0};
    TrainState<double> ws;
    const double loss = batch_forward(params, batch, ws);
    CHECK(loss < 1e-9);
    auto grads = zeros_like(params);
    batch_backward(params, batch, ws, grads);
    double norm = 0;
    for (const auto& t : grads.tensors()) {
        for (size_t i = 0; i < t.size; ++i) norm += t.data[i] * t.data[i];
    }
    CHECK(std::sqrt(norm) < 1e-9);
}

TEST_CASE("backward: linearity over concatenated batches") {
    ModelConfig config = tiny_config(2, 8, 16);
    Rng rng(9);
    auto params = init_params<double>(config, rng);

    const int n = (config.vocab - 3) / 2;
    auto seq_a = task::encode_instance(task::make_instance(101, n));
    auto seq_b = task::encode_instance(task::make_instance(202, n));
    // Equal mask counts so mean-loss gradients combine with weight 1/2.
    auto trim = [](task::TokenSequence& s, int keep) {
        int seen = 0;
        for (auto& m : s.loss_mask) {
            if (m && ++seen > keep) m = 0;
        }
    };
    trim(seq_a, 1);
    trim(seq_b, 1);

    auto batch_of = [&](const std::vector<task::TokenSequence*>& seqs) {
        Batch b;
        b.batch = static_cast<int>(seqs.size());
        b.length = seqs[0]->length();
        for (auto* s : seqs) {
            b.tokens.insert(b.tokens.end(), s->tokens.begin(), s->tokens.end());
            b.mask.insert(b.mask.end(), s->loss_mask.begin(), s->loss_mask.end());
        }
        return b;
    };

    TrainState<double> ws;
    auto ga = zeros_like(params), gb = zeros_like(params), gab = zeros_like(params);
    batch_forward(params, batch_of({&seq_a}), ws);
    batch_backward(params, batch_of({&seq_a}), ws, ga);
    batch_forward(params, batch_of({&seq_b}), ws);
    batch_backward(params, batch_of({&seq_b}), ws, gb);
    batch_forward(params, batch_of({&seq_a, &seq_b}), ws);
    batch_backward(params, batch_of({&seq_a, &seq_b}), ws, gab);

    const auto ta = ga.tensors(), tb = gb.tensors(), tab = gab.tensors();
    for (size_t t = 0; t < ta.size(); ++t) {
        for (size_t i = 0; i < ta[t].size; ++i) {
            const double want = 0.5 * (ta[t].data[i] + tb[t].data[i]);
            CHECK(std::abs(tab[t].data[i] - want) <= 1e-10);
        }
    }
}

TEST_CASE("check_gradients: finite differences agree for none and pre-ln") {
    for (Norm norm : {Norm::None, Norm::PreLn}) {
        ModelConfig config = tiny_config(2, 8, 16, norm);
        const auto report = check_gradients(config, 12345, 1e-4, 200);
        INFO("norm=", to_string(norm), " max_rel=", report.max_rel_error);
        CHECK(report.max_rel_error <= 1e-4);
        CHECK(report.coords_checked >= 200);
    }
}

TEST_CASE("check_gradients: absent token embedding rows have zero gradient") {
    ModelConfig config = tiny_config(1, 8, 16);
    Rng rng(6);
    auto params = init_params<double>(config, rng);
    Batch batch;
    batch.batch = 1;
    batch.length = 3;
    batch.tokens = {0, 1, 2};
    batch.mask = {1, 1, 0};
    TrainState<double> ws;
    batch_forward(params, batch, ws);
    auto grads = zeros_like(params);
    batch_backward(params, batch, ws, grads);
    // Token 5 never appears: analytic gradient is identically zero, matching
    // the finite-difference view (loss is invariant in that row).
    for (int j = 0; j < config.d_model; ++j) {
        CHECK(grads.w_embed.at(5, j) == 0.0);
        const double saved = params.w_embed.at(5, j);
        params.w_embed.at(5, j) = saved + 0.1;
        const double bumped = batch_forward(params, batch, ws);
        params.w_embed.at(5, j) = saved;
        const double base = batch_forward(params, batch, ws);
        CHECK(bumped == doctest::Approx(base).epsilon(1e-12));
    }
}

TEST_CASE("adamw_step: closed-form single steps") {
    ModelConfig config = tiny_config(1, 8, 16);
    Rng rng(8);
    auto params = init_params<double>(config, rng);
    auto before = params;
    auto grads = zeros_like(params);
    auto state = OptimStateT<double>::zero_for(params);

    AdamWConfig opt;
    opt.weight_decay = 0.0;
    adamw_step(params, grads, state, opt);
    for (size_t t = 0; t < params.tensors().size(); ++t) {
        const auto pa = params.tensors()[t], pb = before.tensors()[t];
        CHECK(std::equal(pa.data, pa.data + pa.size, pb.data));
    }

    // First step from zero moments: update = -lr * g / (|g| + eps).
    params = before;
    state = OptimStateT<double>::zero_for(params);
    grads.w_embed.at(0, 0) = 0.37;
    adamw_step(params, grads, state, opt);
    const double expect = before.w_embed.at(0, 0) - opt.lr * 0.37 / (0.37 + opt.epsilon);
    CHECK(params.w_embed.at(0, 0) == doctest::Approx(expect).epsilon(1e-12));

    // Zero grads with decay: every parameter scales by (1 - lr*wd).
    grads.w_embed.at(0, 0) = 0.0;
    params = before;
    state = OptimStateT<double>::zero_for(params);
    opt.weight_decay = 0.01;
    adamw_step(params, grads, state, opt);
    for (size_t t = 0; t < params.tensors().size(); ++t) {
        const auto pa = params.tensors()[t], pb = before.tensors()[t];
        for (size_t i = 0; i < pa.size; ++i) {
            CHECK(pa.data[i] == doctest::Approx(pb.data[i] * (1.0 - opt.lr * 0.01)).epsilon(1e-12));
        }
    }
}

TEST_CASE("checkpoint round trip is bit-exact") {
    namespace fs = std::filesystem;
    ModelConfig config = tiny_config(2, 8, 16);
    Rng rng(10);
    auto params = init_params<float>(config, rng);
    const auto dir = fs::temp_directory_path() / "backchain_model_test";
    fs::create_directories(dir);
    const auto path = (dir / "ckpt.bin").string();
    save_checkpoint(params, 7, path);
    const auto loaded = load_checkpoint(path);
    CHECK(loaded.step == 7);

    const auto tokens = tokens_for(config, 9);
    const auto a = forward(params, tokens);
    const auto b = forward(loaded.params, tokens);
    CHECK(a.logits.d == b.logits.d);

    save_checkpoint(loaded.params, 7, (dir / "ckpt2.bin").string());
    CHECK(digest_file(path) == digest_file((dir / "ckpt2.bin").string()));
    fs::remove_all(dir);
}

TEST_CASE("greedy_decode: constructed goal-emitter stops at path length 2") {
    ModelConfig config = ModelConfig::for_task(16, 2, 16, 32);
    config.init_scale = 0.0;
    Rng rng(2);
    auto params = init_params<float>(config, rng);
    const auto inst = task::make_instance(404, 16);
    const task::TokenLayout layout(16);
    const task::Vocabulary vocab(16);
    // Unembedding reads the P1 position embedding straight into the goal's
    // source-token logit.
    for (int j = 0; j < config.d_model; ++j) {
        params.w_pos.at(layout.path_start, j) = 1.0f;
        params.w_unembed.at(j, vocab.source_token(inst.goal)) = 1.0f;
    }
    const auto result = decode_instance(params, inst);
    REQUIRE(result.emitted.size() == 1);
    CHECK(result.emitted[0] == vocab.source_token(inst.goal));

    const auto again = decode_instance(params, inst);
    CHECK(again.emitted == result.emitted);
}

TEST_CASE("evaluate_exact_match: chance level for untrained, 1.0 for oracle injection") {
    ModelConfig config;  // full-size model, random weights
    config.seed = 5;
    Rng rng(config.seed);
    const auto params = init_params<float>(config, rng);
    const auto instances = task::generate_dataset({.seed = 77, .count = 200, .n_nodes = 16,
                                                   .order = task::EdgeOrder::Shuffled});
    CHECK(evaluate_exact_match(params, instances) <= 0.01);

    const auto oracle_decoder = [](const task::TaskInstance& inst) {
        DecodeResult r;
        for (size_t i = 1; i < inst.path.size(); ++i) r.emitted.push_back(inst.path[i]);
        return r;
    };
    CHECK(evaluate_exact_match_with(oracle_decoder, instances) == 1.0);
}

TEST_CASE("train_loop: divergence raises TrainingFailure with the last checkpoint") {
    namespace fs = std::filesystem;
    ModelConfig config = ModelConfig::for_task(4, 2, 16, 32);
    config.seed = 3;
    config.init_scale = 4.0;  // enormous init + lr drives the loss to inf
    const auto train = task::generate_dataset({.seed = 15, .count = 256, .n_nodes = 4,
                                               .order = task::EdgeOrder::Shuffled});
    TrainOptions options;
    options.adamw.lr = 1e4;
    options.batch_size = 64;
    options.max_epochs = 50;
    options.val_subset = 16;
    options.out_dir = (fs::temp_directory_path() / "backchain_diverge").string();
    try {
        train_loop(config, train, train, options);
        FAIL("expected TrainingFailure");
    } catch (const TrainingFailure& e) {
        CHECK(e.last_checkpoint == options.out_dir + "/ckpt_last.bin");
    }
    fs::remove_all(options.out_dir);
}

TEST_CASE("train_loop: loss decreases and metric traces are reproducible") {
    ModelConfig config = ModelConfig::for_task(4, 2, 32, 64);
    config.seed = 3;
    const auto train = task::generate_dataset({.seed = 10, .count = 512, .n_nodes = 4,
                                               .order = task::EdgeOrder::Shuffled});
    const auto val = task::generate_dataset({.seed = 11, .count = 64, .n_nodes = 4,
                                             .order = task::EdgeOrder::Shuffled});
    TrainOptions options;
    options.batch_size = 64;
    options.max_epochs = 3;
    options.patience = 10;
    options.val_subset = 64;

    const auto a = train_loop(config, train, val, options);
    REQUIRE(a.epochs.size() >= 2);
    CHECK(a.epochs.back().mean_loss < a.epochs.front().mean_loss);

    const auto b = train_loop(config, train, val, options);
    REQUIRE(b.epochs.size() == a.epochs.size());
    for (size_t i = 0; i < a.epochs.size(); ++i) {
        CHECK(a.epochs[i].mean_loss == b.epochs[i].mean_loss);
        CHECK(a.epochs[i].val_exact_match == b.epochs[i].val_exact_match);
    }
}
