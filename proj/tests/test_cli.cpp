#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "backchain/digest.hpp"
#include "backchain/report.hpp"

namespace fs = std::filesystem;
using namespace backchain;

namespace {

#ifndef BACKCHAIN_CLI
#error "BACKCHAIN_CLI must point at the CLI binary"
#endif

struct Sandbox {
    fs::path dir;
    Sandbox() {
        dir = fs::temp_directory_path() / ("backchain_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Sandbox() { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

int run(const std::string& args) {
    const std::string cmd = std::string(BACKCHAIN_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

size_t line_count(const std::string& path) {
    std::ifstream in(path);
    size_t lines = 0;
    std::string line;
    while (std::getline(in, line)) ++lines;
    return lines;
}

}  // namespace

TEST_CASE("generate: line count, manifest, repeatable digests") {
    Sandbox box;
    const auto out = box.path("d.jsonl");
    CHECK(run("generate --n-nodes 16 --count 100 --seed 7 --out " + out) == 0);
    CHECK(line_count(out) == 100);
    CHECK(fs::exists(box.path("d.jsonl.meta.json")));
    const auto manifest = report::read_manifest(box.path("manifest.json"));
    CHECK(manifest.command == "generate");
    CHECK(manifest.dataset_digest == digest_file(out));
    // Every artifact written by the run is listed.
    for (const auto& name : {"d.jsonl", "d.jsonl.meta.json"}) {
        CHECK(std::count(manifest.artifacts.begin(), manifest.artifacts.end(), name) == 1);
    }

    const auto again = box.path("d2.jsonl");
    CHECK(run("generate --n-nodes 16 --count 100 --seed 7 --out " + again) == 0);
    CHECK(digest_file(out) == digest_file(again));
}

TEST_CASE("exit codes: usage errors are 2, operation failures are 1") {
    Sandbox box;
    CHECK(run("no-such-command") == 2);
    CHECK(run("generate --bogus-flag 1 --out " + box.path("x.jsonl")) == 2);
    CHECK(run("eval --ckpt /nonexistent.bin --data /nonexistent.jsonl") == 1);
    CHECK(run("scrub --ckpt /nonexistent.bin --hypothesis wrong --out " + box.path("s")) == 2);
    CHECK(run("--help") == 0);

    // Impossible disjoint split: n=4 has 120 labeled trees in total, and a
    // 3000-draw dataset covers every one of them.
    REQUIRE(run("generate --n-nodes 4 --count 3000 --seed 1 --out " + box.path("all.jsonl")) == 0);
    CHECK(run("generate --n-nodes 4 --count 5 --seed 2 --out " + box.path("none.jsonl") +
              " --exclude " + box.path("all.jsonl")) == 1);
}

TEST_CASE("end-to-end: train, eval, probe, scrub, knockout, circuits, lens, patch, viz") {
    Sandbox box;
    const auto train_data = box.path("train.jsonl");
    const auto test_data = box.path("test.jsonl");
    // n=6: 30,240 labeled trees, so a disjoint split exists comfortably.
    REQUIRE(run("generate --n-nodes 6 --count 600 --seed 3 --out " + train_data) == 0);
    REQUIRE(run("generate --n-nodes 6 --count 120 --seed 4 --out " + test_data +
                " --exclude " + train_data) == 0);

    std::ofstream cfg(box.path("tiny.ini"));
    cfg << "[model]\nlayers = 3\nd_model = 32\nd_ff = 64\n"
        << "[train]\nbatch_size = 64\nmax_epochs = 4\npatience = 10\nval_subset = 120\n";
    cfg.close();

    const auto run_dir = box.path("run");
    REQUIRE(run("train --config " + box.path("tiny.ini") + " --data " + train_data + " --val " +
                test_data + " --out " + run_dir + " --seed 11") == 0);
    const auto ckpt = run_dir + "/ckpt_best.bin";
    REQUIRE(fs::exists(ckpt));
    CHECK(fs::exists(run_dir + "/metrics.json"));
    const auto manifest = report::read_manifest(run_dir + "/manifest.json");
    CHECK(manifest.command == "train");
    CHECK(!manifest.checkpoint_digest.empty());

    CHECK(run("eval --ckpt " + ckpt + " --data " + test_data + " --out " + box.path("eval")) == 0);
    {
        std::ifstream in(box.path("eval") + "/eval.json");
        nlohmann::json j;
        in >> j;
        CHECK(j.at("instances").get<int>() == 120);
        CHECK(j.at("exact_match").get<double>() >= 0.0);
    }

    CHECK(run("probe --ckpt " + ckpt + " --count 400 --kind goal-at-path --layers 0,1 "
              "--train-size 150 --test-size 150 --seed 5 --out " + box.path("probe")) == 0);
    {
        const auto reports_text = [&] {
            std::ifstream in(box.path("probe") + "/probes.json");
            std::stringstream ss;
            ss << in.rdbuf();
            return ss.str();
        }();
        const auto reports = report::probe_reports_from_json(reports_text);
        REQUIRE(reports.size() == 2);
        CHECK(reports[0].layer == 0);
        CHECK(reports[1].layer == 1);
        CHECK(line_count(box.path("probe") + "/probes.csv") == 3);  // header + 2 rows
    }

    CHECK(run("scrub --ckpt " + ckpt + " --count 12 --seed 6 --out " + box.path("scrub")) == 0);
    CHECK(fs::exists(box.path("scrub") + "/scrub.csv"));
    CHECK(fs::exists(box.path("scrub") + "/scrub.svg"));

    CHECK(run("knockout --ckpt " + ckpt + " --count 40 --min-depth 2 --threshold 0.05 "
              "--seed 8 --out " + box.path("ko")) == 0);
    CHECK(fs::exists(box.path("ko") + "/knockout.csv"));

    CHECK(run("circuits --ckpt " + ckpt + " --out " + box.path("circ")) == 0);
    for (const auto& name : {"m0_qk.csv", "m1_qk.csv", "r_p.csv", "dla.csv"}) {
        CHECK(fs::exists(box.path("circ") + "/" + name));
    }

    CHECK(run("lens --ckpt " + ckpt + " --count 300 --examples 1 --seed 9 --out " +
              box.path("lens")) == 0);
    CHECK(fs::exists(box.path("lens") + "/lens_losses.csv"));
    CHECK(fs::exists(box.path("lens") + "/lens_example_0.svg"));

    CHECK(run("patch --ckpt " + ckpt + " --runs 2 --samples 4 --layer 2 --threshold 0.02 "
              "--seed 10 --out " + box.path("patch")) == 0);
    CHECK(fs::exists(box.path("patch") + "/patch.csv"));
    // A layer beyond the model depth is an operation failure, not a crash.
    CHECK(run("patch --ckpt " + ckpt + " --runs 1 --samples 2 --layer 9 --out " +
              box.path("patch_bad")) == 1);

    CHECK(run("stats --subgoals --ckpt " + ckpt + " --count 50 --threshold 0.05 --out " +
              box.path("stats") + " --catalan 3") == 0);
    CHECK(fs::exists(box.path("stats") + "/subgoals.csv"));

    CHECK(run("viz --kind attention-overlay --ckpt " + ckpt + " --instance-seed 3 --out " +
              box.path("attn.svg")) == 0);
    CHECK(fs::exists(box.path("attn.svg")));

    // Repeated identical invocation produces identical artifact digests.
    const auto run_dir2 = box.path("run2");
    REQUIRE(run("train --config " + box.path("tiny.ini") + " --data " + train_data + " --val " +
                test_data + " --out " + run_dir2 + " --seed 11") == 0);
    CHECK(digest_file(run_dir + "/ckpt_best.bin") == digest_file(run_dir2 + "/ckpt_best.bin"));
    CHECK(digest_file(run_dir + "/metrics.json") == digest_file(run_dir2 + "/metrics.json"));
}

TEST_CASE("viz: payload dispatch and kind mismatch") {
    Sandbox box;
    std::ofstream payload(box.path("curve.json"));
    payload << R"({"title":"t","x":[1,2,3],"y":[0.5,0.4,0.1],"lo":[0.4,0.3,0.0],)"
            << R"("hi":[0.6,0.5,0.2],"x_label":"depth","y_label":"effect"})";
    payload.close();
    CHECK(run("viz --kind depth-curve --payload " + box.path("curve.json") + " --out " +
              box.path("curve.svg")) == 0);
    CHECK(fs::exists(box.path("curve.svg")));
    CHECK(run("viz --kind depth-curve --payload " + box.path("curve.json") + " --out " +
              box.path("curve2.svg")) == 0);
    CHECK(digest_file(box.path("curve.svg")) == digest_file(box.path("curve2.svg")));

    CHECK(run("viz --kind attention-overlay --payload " + box.path("curve.json") + " --out " +
              box.path("bad.svg")) == 1);
}

TEST_CASE("stats counting output") {
    Sandbox box;
    const std::string cmd = std::string(BACKCHAIN_CLI) + " stats --catalan 15 --labeled 15 > " +
                            box.path("stats.txt") + " 2>&1";
    REQUIRE(std::system(cmd.c_str()) == 0);
    std::ifstream in(box.path("stats.txt"));
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str().find("9694845") != std::string::npos);
    CHECK(ss.str().find("202843204931727360000") != std::string::npos);
}
