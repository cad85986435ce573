#include <doctest.h>

#include <cstdlib>
#include <regex>

#include "support.hpp"
#include "vlmtree/engine.hpp"

using namespace vlmtree;
using vlmtree::testing::data_path;
using vlmtree::testing::run;
using vlmtree::testing::TempDir;

namespace {

std::string fixture(const std::string& rel) { return (std::filesystem::path(VLMTREE_TEST_DIR) / "fixtures" / rel).string(); }
std::string data(const std::string& rel) { return data_path(rel).string(); }

double number_after(const std::string& text, const std::string& key) {
  const auto at = text.find(key + "=");
  REQUIRE_MESSAGE(at != std::string::npos, key << " missing from: " << text);
  return std::stod(text.substr(at + key.size() + 1));
}

// Scoped environment variable.
struct EnvVar {
  EnvVar(const char* name, const char* value) : name_(name) { ::setenv(name, value, 1); }
  ~EnvVar() { ::unsetenv(name_); }
  const char* name_;
};

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("validate") {
    const auto ok = run({"validate", "--tree", data("trees/cifar10.json")});
    CHECK(ok.code == 0);
    CHECK(ok.out.find("nodes=19 depth=5 leaves=10") != std::string::npos);

    const auto bad = run({"validate", "--tree", fixture("defective_tree.json")});
    CHECK(bad.code == 1);
    CHECK(bad.out.find("DuplicateQuestionOnPath") != std::string::npos);

    CHECK(run({"validate", "--tree", "/nonexistent/tree.json"}).code == 2);
    CHECK(run({"validate"}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
  }

  TEST_CASE("stats prints tree and manifest summaries") {
    const auto r = run({"stats", "--tree", data("trees/gtsrb.json"), "--manifest", data("manifests/gtsrb_sample.jsonl")});
    CHECK(r.code == 0);
    CHECK(r.out.find("nodes=65 internal=22 leaves=43 depth=16") != std::string::npos);
    CHECK(r.out.find("records=901 classes=43") != std::string::npos);
  }

  TEST_CASE("malformed inputs are usage errors") {
    TempDir dir;
    write_text_file_atomic(dir / "broken.json", "{\"name\": \"x\",\n \"classes\": [}");
    const auto r = run({"stats", "--tree", (dir / "broken.json").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("line 2") != std::string::npos);
  }

  TEST_CASE("run with a perfect mock script") {
    TempDir dir;
    const auto m = load_manifest(fixture("cifar10_mini.jsonl"));
    const auto tree = load_tree(data("trees/cifar10.json"));
    write_text_file_atomic(dir / "perfect.jsonl", render_script(make_oracle_rules(m, &tree)));
    const auto r = run({"--out", (dir / "out").string(), "run", "--manifest", fixture("cifar10_mini.jsonl"), "--tree",
                        data("trees/cifar10.json"), "--strategies", "tree", "--backend",
                        "mock:" + (dir / "perfect.jsonl").string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("mean_accuracy=1.0000") != std::string::npos);
    CHECK(std::filesystem::exists(dir / "out/transcript.jsonl"));
    CHECK(std::filesystem::exists(dir / "out/reports/tree.t0.json"));
    CHECK(read_text_file(dir / "out/reports/tree.t0.per_class.csv").rfind("class_id,class_name,n,correct,accuracy\n", 0) == 0);
  }

  TEST_CASE("run with the simulator approximates the analytic product") {
    const auto r = run({"--seed", "3", "--parallelism", "4", "run", "--synthetic-images", "100000", "--tree",
                        data("trees/demo_binary3.json"), "--strategies", "tree", "--backend", "simulator",
                        "--accuracy", "0.9"});
    CHECK(r.code == 0);
    CHECK(std::abs(number_after(r.out, "mean_accuracy") - 0.729) < 0.01);
  }

  TEST_CASE("resumed runs report cache-skipped cells") {
    TempDir dir;
    const std::vector<std::string> args{"--cache-dir", (dir / "cache").string(), "run", "--manifest",
                                        fixture("cifar10_mini.jsonl"), "--strategies", "zero-shot,tree", "--tree",
                                        data("trees/cifar10.json"), "--backend", "oracle"};
    const auto first = run(args);
    CHECK(first.code == 0);
    CHECK(number_after(first.out, "cache_skipped_cells") == 0);
    CHECK(number_after(first.out, "fresh_calls") > 0);
    const auto second = run(args);
    CHECK(number_after(second.out, "cache_skipped_cells") == 20);
    CHECK(number_after(second.out, "fresh_calls") == 0);
  }

  TEST_CASE("min-accuracy turns low accuracy into exit 1") {
    const auto r = run({"run", "--manifest", fixture("cifar10_mini.jsonl"), "--backend", "simulator", "--accuracy",
                        "0.0", "--min-accuracy", "0.5"});
    CHECK(r.code == 1);
  }

  TEST_CASE("verify") {
    const auto perfect = run({"verify", "--tree", data("trees/gtsrb.json"), "--backend", "oracle"});
    CHECK(perfect.code == 0);
    CHECK(perfect.out.find("overall_mean=100.00% perfect=43/43") != std::string::npos);

    const auto replay = run({"verify", "--tree", data("trees/gtsrb.json"), "--from-transcript",
                             data("fixtures/gtsrb_gpt4o_verify/verification.jsonl")});
    CHECK(replay.code == 0);
    CHECK(replay.out.find("overall_mean=98.20% perfect=39/43") != std::string::npos);

    const auto unknown = run({"verify", "--tree", data("trees/gtsrb.json"), "--classes", "7,99", "--backend", "oracle"});
    CHECK(unknown.code == 2);
    CHECK(unknown.err.find("99") != std::string::npos);
  }

  TEST_CASE("simulate") {
    const auto ones = run({"simulate", "--tree", data("trees/cifar10.json"), "--accuracy", "1.0", "--trials", "5000"});
    CHECK(ones.code == 0);
    std::istringstream lines(ones.out);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "p,class_id,class_name,path_length,analytic,monte_carlo,trials");
    int rows = 0;
    while (std::getline(lines, line) && line.rfind("overall", 0) != 0) {
      CHECK(line.find(",1.000000,1.000000,") != std::string::npos);
      ++rows;
    }
    CHECK(rows == 10);

    const std::vector<std::string> sweep{"--seed", "8", "simulate", "--tree", data("trees/gtsrb.json"), "--sweep",
                                         "0.8,0.9,0.95", "--trials", "20000"};
    const auto a = run(sweep);
    const auto b = run(sweep);
    CHECK(a.out == b.out);
    // analytic column is nondecreasing in p for every class
    std::map<int, std::vector<double>> by_class;
    std::istringstream in(a.out);
    std::getline(in, line);
    while (std::getline(in, line) && line.rfind("overall", 0) != 0) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
      by_class[std::stoi(f[1])].push_back(std::stod(f[f.size() - 3]));
    }
    CHECK(by_class.size() == 43);
    for (const auto& [c, v] : by_class) {
      REQUIRE(v.size() == 3);
      CHECK(v[0] <= v[1]);
      CHECK(v[1] <= v[2]);
    }
  }

  TEST_CASE("compare") {
    TempDir dir;
    const auto tree_report = data("fixtures/gtsrb_gpt4o_tree/reports/tree.t0.json");
    const auto zs_report = data("fixtures/gtsrb_gpt4o_zero_shot/reports/zero-shot.baseline.t0.json");
    const auto same = run({"compare", "--a", tree_report, "--b", tree_report});
    CHECK(same.out.find("wins_a=0 wins_b=0 ties=43") != std::string::npos);

    const auto real = run({"--out", dir.path().string(), "compare", "--a", tree_report, "--b", zs_report});
    CHECK(real.code == 0);
    CHECK(real.out.find("classes=43 wins_a=11 wins_b=32 ties=0 mean_a=52.05% mean_b=65.78%") != std::string::npos);
    CHECK(std::filesystem::exists(dir / "comparison.csv"));

    const auto cifar_report = data("fixtures/cifar10_gpt4o_tree/reports/tree.t0.json");
    CHECK(run({"compare", "--a", tree_report, "--b", cifar_report}).code == 2);
  }

  TEST_CASE("replay reproduces the shipped transcripts") {
    const auto t = run({"--parallelism", "4", "replay", "--transcript", data("fixtures/gtsrb_gpt4o_tree/transcript.jsonl"),
                        "--manifest", data("manifests/gtsrb_sample.jsonl"), "--tree", data("trees/gtsrb.json")});
    CHECK(t.code == 0);
    CHECK(t.out.find("class_mean_accuracy=0.5205") != std::string::npos);
    CHECK(t.out.find("records=901 mismatches=0") != std::string::npos);

    const auto z = run({"replay", "--transcript", data("fixtures/gtsrb_gpt4o_zero_shot/transcript.jsonl"),
                        "--manifest", data("manifests/gtsrb_sample.jsonl")});
    CHECK(z.code == 0);
    CHECK(z.out.find("class_mean_accuracy=0.6578") != std::string::npos);
  }

  TEST_CASE("replay detects a tampered transcript") {
    TempDir dir;
    auto text = read_text_file(data("fixtures/cifar10_gpt4o_zero_shot/transcript.jsonl"));
    auto recs = parse_transcript(text);
    recs[0].predicted_class_id = (recs[0].predicted_class_id.value_or(0) + 1) % 10;
    write_text_file_atomic(dir / "t.jsonl", render_transcript(recs));
    const auto r = run({"replay", "--transcript", (dir / "t.jsonl").string(), "--manifest",
                        data("manifests/cifar10_sample.jsonl")});
    CHECK(r.code == 1);
    CHECK(r.out.find("mismatches=1") != std::string::npos);
  }

  TEST_CASE("sample") {
    const auto seq = run({"sample", "--manifest", data("manifests/gtsrb_sample.jsonl")});
    CHECK(seq.code == 0);
    CHECK(std::count(seq.out.begin(), seq.out.end(), '\n') == 902);
    TempDir dir;
    const auto bal = run({"sample", "--manifest", data("manifests/cifar10_sample.jsonl"), "--mode", "balanced",
                          "--per-class", "10", "--file", (dir / "s.jsonl").string()});
    CHECK(bal.out == "records=100\n");
    CHECK(run({"sample", "--manifest", data("manifests/cifar10_sample.jsonl"), "--mode", "balanced", "--per-class",
               "101"})
              .code == 2);
  }

  TEST_CASE("emit") {
    const auto report = data("fixtures/cifar10_gpt4o_tree/reports/tree.t0.json");
    const auto csv = run({"emit", "--report", report, "--format", "csv"});
    CHECK(csv.out.rfind("class_id,class_name,n,correct,accuracy\n", 0) == 0);
    CHECK(csv.out == read_text_file(data("fixtures/cifar10_gpt4o_tree/reports/tree.t0.per_class.csv")));
    const auto depth = run({"emit", "--report", report, "--format", "depth-csv"});
    CHECK(depth.out.rfind("depth,first_error_count\n", 0) == 0);
    const auto json = run({"emit", "--report", report, "--format", "json"});
    CHECK(Json::parse(json.out)["n_images"] == 1000);
  }

  TEST_CASE("settings precedence: flag, then config file, then environment") {
    TempDir dir;
    const auto manifest = data("manifests/cifar10_sample.jsonl");
    auto sample_with = [&](std::vector<std::string> pre) {
      pre.insert(pre.end(), {"sample", "--manifest", manifest, "--mode", "balanced", "--per-class", "3"});
      return run(pre).out;
    };
    const auto seed5 = sample_with({"--seed", "5"});
    const auto seed6 = sample_with({"--seed", "6"});
    REQUIRE(seed5 != seed6);

    write_text_file_atomic(dir / "c.json", R"({"seed": 6})");
    const auto cfg = (dir / "c.json").string();
    {
      EnvVar env("VLMTREE_SEED", "5");
      CHECK(sample_with({}) == seed5);
      CHECK(sample_with({"--config", cfg}) == seed6);
      CHECK(sample_with({"--config", cfg, "--seed", "5"}) == seed5);
    }
    CHECK(sample_with({"--config", cfg}) == seed6);

    write_text_file_atomic(dir / "secret.json", R"({"api_key": "sk-123"})");
    const auto r = run({"--config", (dir / "secret.json").string(), "stats", "--tree", data("trees/cifar10.json")});
    CHECK(r.code == 2);
    CHECK(r.err.find("credential") != std::string::npos);
    CHECK(run({"--config", (dir / "missing.json").string(), "stats", "--tree", data("trees/cifar10.json")}).code == 2);
  }

  TEST_CASE("corrupted cache entries stop the run with exit 1") {
    TempDir dir;
    const std::vector<std::string> args{"--cache-dir", (dir / "cache").string(), "run", "--manifest",
                                        fixture("cifar10_mini.jsonl"), "--backend", "oracle"};
    REQUIRE(run(args).code == 0);
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir / "cache"))
      if (e.is_regular_file()) write_text_file_atomic(e.path(), "{}");
    CHECK(run(args).code == 1);
  }
}
