#include <doctest.h>

#include <random>

#include "support.hpp"
#include "vlmtree/analysis.hpp"
#include "vlmtree/engine.hpp"
#include "vlmtree/errors.hpp"

using namespace vlmtree;
using vlmtree::testing::data_path;

namespace {

const DecisionTree& gtsrb() {
  static const DecisionTree t = load_tree(data_path("trees/gtsrb.json").string());
  return t;
}

const DecisionTree& cifar() {
  static const DecisionTree t = load_tree(data_path("trees/cifar10.json").string());
  return t;
}

// Walks the tree with the given answers and records the trace.
TranscriptRecord traced(const DecisionTree& tree, const std::string& image, int truth,
                        const std::vector<std::string>& answers) {
  TranscriptRecord r;
  r.image_ref = image;
  r.truth_class_id = truth;
  r.strategy = StrategyKind::Tree;
  NodeId at = kRootNode;
  for (const auto& a : answers) {
    const auto& n = tree.node(at);
    TraceStep s;
    s.question = n.question;
    s.depth = n.depth;
    s.prompt_digest = sha256_hex(n.question);
    s.raw_response = a;
    s.extracted_answer = a;
    s.chosen_branch = a;
    r.steps.push_back(s);
    at = n.find_branch(a)->child;
  }
  if (tree.node(at).is_leaf()) r.predicted_class_id = tree.node(at).class_id;
  return r;
}

TranscriptRecord zero_shot_record(const std::string& image, int truth, std::optional<int> predicted) {
  TranscriptRecord r;
  r.image_ref = image;
  r.truth_class_id = truth;
  r.variant_id = "baseline";
  TraceStep s;
  s.prompt_digest = sha256_hex("p");
  s.raw_response = predicted ? std::to_string(*predicted) : "no idea";
  if (predicted) s.extracted_answer = std::to_string(*predicted);
  r.steps.push_back(s);
  r.predicted_class_id = predicted;
  if (!predicted) r.failure = std::string(kFailureNoMatch);
  return r;
}

DatasetManifest manifest_for(const ClassSet& classes, const std::vector<TranscriptRecord>& records) {
  DatasetManifest m;
  m.name = "fixture";
  m.classes = classes;
  for (const auto& r : records) m.records.push_back({r.image_ref, r.truth_class_id, std::nullopt});
  return m;
}

EvaluationReport report_with(const ClassSet& classes, const std::vector<std::pair<int, int>>& counts) {
  EvaluationReport r;
  r.classes = classes;
  int i = 0;
  for (const auto& c : classes) {
    r.per_class[c.id] = {counts[i].first, counts[i].second};
    r.n_images += counts[i].first;
    r.correct += counts[i].second;
    r.class_mean_accuracy += r.per_class[c.id].accuracy() / static_cast<double>(classes.size());
    ++i;
  }
  r.mean_accuracy = r.n_images == 0 ? 0.0 : static_cast<double>(r.correct) / r.n_images;
  return r;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_SUITE("analysis") {
  TEST_CASE("verification accuracy is correct over total") {
    const auto rules = make_verification_oracle_rules(gtsrb());
    ScriptedBackend perfect(rules);
    const auto r = verify_knowledge(gtsrb(), 0, perfect);
    CHECK(r.questions_total == 4);
    CHECK(r.accuracy() == 1.0);

    // wrong on the last of four
    const auto path = path_for_class(gtsrb(), 0);
    std::vector<ScriptRule> one_wrong{{std::nullopt,
                                       {"\"20 kph speed limit\"", path.steps[3].question + " Choose one of these answers:"},
                                       "30",
                                       {}}};
    for (const auto& rule : rules) one_wrong.push_back(rule);
    ScriptedBackend mock(one_wrong);
    const auto w = verify_knowledge(gtsrb(), 0, mock);
    CHECK(w.questions_correct == 3);
    CHECK(w.accuracy() == 0.75);
    CHECK_FALSE(w.steps[3].correct);
    CHECK(w.steps[3].extracted_answer == "30");
  }

  TEST_CASE("verification history carries the model's own answers") {
    const auto path = path_for_class(gtsrb(), 0);
    std::vector<ScriptRule> rules{
        {std::nullopt, {path.steps[0].question + " Choose one of these answers:"}, "A circle.", {}},
        {std::nullopt, {"Q: " + path.steps[0].question + " → A: circle"}, "red-white", {}},
    };
    ScriptedBackend mock(rules, std::string("no idea"));
    const auto r = verify_knowledge(gtsrb(), 0, mock);
    CHECK(r.steps[1].correct);
    CHECK(r.steps[2].raw_response == "red-white");  // history rule still matches deeper prompts
    CHECK(r.questions_correct == 2);
    CHECK(r.steps.size() == 4);
  }

  TEST_CASE("verification summaries, rescoring, and I/O") {
    VerificationRecord a{1, "a", {}, 4, 3, std::nullopt};
    VerificationRecord b{2, "b", {}, 5, 5, std::nullopt};
    const std::vector<VerificationRecord> both{a, b};
    const auto s = summarize_verification(both);
    CHECK(s.class_count == 2);
    CHECK(s.perfect_class_count == 1);
    CHECK(s.overall_mean == doctest::Approx(0.875));

    ScriptedBackend perfect(make_verification_oracle_rules(gtsrb()));
    const auto rec = verify_knowledge(gtsrb(), 32, perfect);
    CHECK(rescore_verification(gtsrb(), rec) == rec);
    const std::vector<VerificationRecord> one{rec};
    const auto text = render_verification_transcript(one);
    CHECK(parse_verification_transcript(text) == one);
    CHECK(split_lines(verification_csv(summarize_verification(one)))[0] ==
          "class_id,class_name,questions_total,questions_correct,accuracy");
  }

  TEST_CASE("shipped verification fixture rescoring gives 98.20% and 39 of 43") {
    const auto recs =
        parse_verification_transcript(read_text_file(data_path("fixtures/gtsrb_gpt4o_verify/verification.jsonl")));
    std::vector<VerificationRecord> rescored;
    for (const auto& r : recs) rescored.push_back(rescore_verification(gtsrb(), r));
    const auto s = summarize_verification(rescored);
    CHECK(s.class_count == 43);
    CHECK(s.perfect_class_count == 39);
    CHECK(percent2(s.overall_mean) == "98.20");
  }

  TEST_CASE("metrics on a 10-image fixture with 6 correct") {
    std::vector<TranscriptRecord> recs;
    for (int i = 0; i < 10; ++i) recs.push_back(zero_shot_record("i" + std::to_string(i), i % 2, i < 6 ? i % 2 : 1 - i % 2));
    const auto m = manifest_for(ClassSet({{0, "a"}, {1, "b"}}), recs);
    const auto r = compute_metrics(recs, m);
    CHECK(r.n_images == 10);
    CHECK(r.correct == 6);
    CHECK(r.mean_accuracy == doctest::Approx(0.6));
    CHECK(r.confusion_pairs.size() == 2);
  }

  TEST_CASE("all-NoMatch fixture") {
    std::vector<TranscriptRecord> recs;
    for (int i = 0; i < 7; ++i) recs.push_back(zero_shot_record("i" + std::to_string(i), i % 3, std::nullopt));
    const auto m = manifest_for(ClassSet({{0, "a"}, {1, "b"}, {2, "c"}}), recs);
    const auto r = compute_metrics(recs, m);
    CHECK(r.mean_accuracy == 0.0);
    CHECK(r.nomatch_count == 7);
    CHECK(r.failure_count == 7);
  }

  TEST_CASE("class mean differs from image mean on unbalanced data") {
    std::vector<TranscriptRecord> recs;
    for (int i = 0; i < 9; ++i) recs.push_back(zero_shot_record("a" + std::to_string(i), 0, 0));
    recs.push_back(zero_shot_record("b0", 1, 0));
    const auto r = compute_metrics(recs, manifest_for(ClassSet({{0, "a"}, {1, "b"}, {2, "unused"}}), recs));
    CHECK(r.mean_accuracy == doctest::Approx(0.9));
    CHECK(r.class_mean_accuracy == doctest::Approx(0.5));
  }

  TEST_CASE("first-error depths on hand-traced CIFAR-10 traces") {
    const std::vector<std::string> cat{"Yes (animal)", "No (no feathers)", "No (paws)", "No (fur)", "Yes (cat-like)"};
    std::vector<TranscriptRecord> recs;
    recs.push_back(traced(cifar(), "c0", 3, cat));
    recs.push_back(traced(cifar(), "c1", 3, cat));
    // root-level wrong turns
    recs.push_back(traced(cifar(), "w0", 3, {"No (vehicle)", "Yes (road)", "Yes (cargo)"}));
    recs.push_back(traced(cifar(), "w1", 3, {"No (vehicle)", "No (air or water)", "No (water)"}));
    recs.push_back(traced(cifar(), "w2", 4, {"No (vehicle)", "Yes (road)", "No (passenger car)"}));
    // depth-2 wrong turns
    recs.push_back(traced(cifar(), "d0", 3, {"Yes (animal)", "No (no feathers)", "Yes (hooves)", "No (no antlers)"}));
    recs.push_back(traced(cifar(), "d1", 6, {"Yes (animal)", "No (no feathers)", "Yes (hooves)", "Yes (antlers)"}));
    const auto r = compute_metrics(recs, manifest_for(cifar().classes(), recs), &cifar());
    CHECK(r.per_depth_first_error == std::map<int, int>{{0, 3}, {2, 2}});
    CHECK(r.correct == 2);
    CHECK(split_lines(per_depth_csv(r)) == std::vector<std::string>{"depth,first_error_count", "0,3", "2,2"});
  }

  TEST_CASE("a NoMatch on the truth path is not a wrong turn") {
    auto r = traced(cifar(), "n", 3, {"Yes (animal)"});
    TraceStep s;
    s.question = "Does the animal have feathers and a beak?";
    s.depth = 1;
    s.raw_response = "unclear";
    r.steps.push_back(s);
    r.predicted_class_id.reset();
    r.failure = std::string(kFailureNoMatch);
    CHECK_FALSE(first_error_depth(r, cifar()).has_value());
  }

  TEST_CASE("transcripts that disagree with the manifest are rejected") {
    std::vector<TranscriptRecord> recs{zero_shot_record("x", 0, 0)};
    auto m = manifest_for(ClassSet({{0, "a"}, {1, "b"}}), recs);
    m.records[0].class_id = 1;
    CHECK_THROWS_AS(compute_metrics(recs, m), ConfigError);
    m.records[0].image_ref = "y";
    CHECK_THROWS_AS(compute_metrics(recs, m), ConfigError);
  }

  TEST_CASE("comparisons") {
    const ClassSet three({{0, "a"}, {1, "b"}, {2, "c"}});
    const auto x = report_with(three, {{10, 7}, {10, 3}, {4, 1}});
    const auto same = compare_strategies(x, x);
    CHECK(same.ties == 3);
    CHECK(same.mean_gap == 0.0);

    const auto y = report_with(three, {{10, 5}, {10, 4}, {8, 3}});
    const auto c = compare_strategies(x, y);
    CHECK(c.wins_a == 1);
    CHECK(c.wins_b == 2);
    CHECK(c.ties == 0);

    // exact ties between different denominators
    const auto p = report_with(three, {{3, 1}, {10, 5}, {7, 7}});
    const auto q = report_with(three, {{6, 2}, {4, 2}, {1, 1}});
    CHECK(compare_strategies(p, q).ties == 3);

    const auto other = report_with(ClassSet({{0, "a"}, {1, "b"}, {5, "z"}}), {{1, 1}, {1, 1}, {1, 1}});
    CHECK_THROWS_AS(compare_strategies(x, other), ConfigError);
  }

  TEST_CASE("property: comparison is antisymmetric") {
    std::mt19937_64 rng(5);
    std::vector<ClassLabel> labels;
    for (int i = 0; i < 12; ++i) labels.push_back({i, "c" + std::to_string(i)});
    const ClassSet classes(labels);
    for (int trial = 0; trial < 300; ++trial) {
      std::vector<std::pair<int, int>> ca, cb;
      for (int i = 0; i < 12; ++i) {
        const int na = static_cast<int>(rng() % 6);
        const int nb = static_cast<int>(rng() % 6);
        ca.push_back({na, na == 0 ? 0 : static_cast<int>(rng() % (na + 1))});
        cb.push_back({nb, nb == 0 ? 0 : static_cast<int>(rng() % (nb + 1))});
      }
      const auto a = report_with(classes, ca);
      const auto b = report_with(classes, cb);
      const auto ab = compare_strategies(a, b);
      const auto ba = compare_strategies(b, a);
      CHECK(ab.wins_a == ba.wins_b);
      CHECK(ab.wins_b == ba.wins_a);
      CHECK(ab.ties == ba.ties);
      CHECK(ab.wins_a + ab.wins_b + ab.ties == 12);
      CHECK(ab.mean_gap == doctest::Approx(-ba.mean_gap));
      for (std::size_t i = 0; i < ab.rows.size(); ++i) CHECK(ab.rows[i].winner == -ba.rows[i].winner);
    }
  }

  TEST_CASE("CSV schemas") {
    const ClassSet three({{0, "a"}, {1, "b, with comma"}, {2, "c"}});
    const auto x = report_with(three, {{10, 7}, {10, 3}, {4, 1}});
    const auto lines = split_lines(per_class_csv(x));
    CHECK(lines[0] == "class_id,class_name,n,correct,accuracy");
    CHECK(lines[1] == "0,a,10,7,0.700000");
    CHECK(lines[2] == "1,\"b, with comma\",10,3,0.300000");

    EvaluationReport empty;
    CHECK(per_class_csv(empty) == "class_id,class_name,n,correct,accuracy\n");

    const auto y = report_with(three, {{10, 5}, {10, 4}, {8, 3}});
    const auto c = compare_strategies(x, y);
    const auto rows = split_lines(comparison_csv(c));
    CHECK(rows.size() == 4);
    double delta_sum = 0.0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto comma_before_delta = rows[i].rfind(',', rows[i].rfind(',') - 1);
      delta_sum += std::stod(rows[i].substr(comma_before_delta + 1, rows[i].rfind(',') - comma_before_delta - 1));
    }
    CHECK(std::abs(delta_sum - (c.mean_a - c.mean_b) * 3) < 3 * 5e-7);
  }

  TEST_CASE("report JSON round-trips") {
    std::vector<TranscriptRecord> recs;
    for (int i = 0; i < 10; ++i) recs.push_back(zero_shot_record("i" + std::to_string(i), i % 3, i % 4 == 0 ? std::nullopt : std::optional<int>(i % 3)));
    const auto m = manifest_for(ClassSet({{0, "a"}, {1, "b"}, {2, "c"}}), recs);
    const auto r = compute_metrics(recs, m);
    const auto back = report_from_json(to_json(r));
    CHECK(to_json(back).dump() == to_json(r).dump());
    CHECK(back.per_class == r.per_class);
    CHECK(back.class_mean_accuracy == r.class_mean_accuracy);
  }

  TEST_CASE("percent formatting") {
    CHECK(percent2(0.9820) == "98.20");
    CHECK(percent2(0.52054) == "52.05");
    CHECK(percent2(1.0) == "100.00");
  }

  TEST_CASE("shipped GTSRB comparison fixtures: 11 of 43, 52.05 vs 65.78") {
    const auto m = load_manifest(data_path("manifests/gtsrb_sample.jsonl"));
    const auto tree_recs = load_transcript(data_path("fixtures/gtsrb_gpt4o_tree/transcript.jsonl"));
    const auto zs_recs = load_transcript(data_path("fixtures/gtsrb_gpt4o_zero_shot/transcript.jsonl"));
    const auto t = compute_metrics(tree_recs, m, &gtsrb());
    const auto z = compute_metrics(zs_recs, m);
    CHECK(percent2(t.class_mean_accuracy) == "52.05");
    CHECK(percent2(z.class_mean_accuracy) == "65.78");
    const auto c = compare_strategies(t, z);
    CHECK(c.wins_a == 11);
    CHECK(c.rows.size() == 43);
    // the committed reports agree with the recomputation
    const auto committed = report_from_json(
        parse_json_document(read_text_file(data_path("fixtures/gtsrb_gpt4o_tree/reports/tree.t0.json")), "report"));
    CHECK(committed.per_class == t.per_class);
  }
}
