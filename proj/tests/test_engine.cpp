#include <doctest.h>

#include <set>

#include "support.hpp"
#include "vlmtree/analysis.hpp"
#include "vlmtree/cache.hpp"
#include "vlmtree/engine.hpp"
#include "vlmtree/errors.hpp"

using namespace vlmtree;
using vlmtree::testing::balanced_binary_tree;
using vlmtree::testing::data_path;
using vlmtree::testing::TempDir;

namespace {

const DecisionTree& gtsrb() {
  static const DecisionTree t = load_tree(data_path("trees/gtsrb.json").string());
  return t;
}

const DecisionTree& cifar() {
  static const DecisionTree t = load_tree(data_path("trees/cifar10.json").string());
  return t;
}

DatasetManifest synthetic(const ClassSet& classes, int n, std::string noun = "object") {
  DatasetManifest m;
  m.name = "synthetic";
  m.task_noun = std::move(noun);
  m.classes = classes;
  const auto ids = classes.ids();
  for (int i = 0; i < n; ++i)
    m.records.push_back({"synthetic/" + std::to_string(i) + ".png", ids[static_cast<std::size_t>(i) % ids.size()],
                         std::nullopt});
  return m;
}

std::string marker(const std::string& question) { return question + " Choose one of these answers:"; }

// Forwards to an inner backend, records every request key, and can simulate a
// crash after a fixed number of calls.
class Recorder : public Backend {
 public:
  explicit Recorder(Backend& inner, std::uint64_t crash_after = 0) : inner_(inner), crash_after_(crash_after) {}
  std::string id() const override { return inner_.id(); }
  std::set<std::string> keys() const {
    std::lock_guard lock(mutex_);
    return keys_;
  }

 protected:
  ChatResponse do_send(const ChatRequest& request) override {
    {
      std::lock_guard lock(mutex_);
      if (crash_after_ > 0 && keys_.size() >= crash_after_) throw std::runtime_error("process killed");
      keys_.insert(make_cache_key(inner_.id(), request).hex());
    }
    return inner_.send(request);
  }

 private:
  Backend& inner_;
  std::uint64_t crash_after_;
  mutable std::mutex mutex_;
  std::set<std::string> keys_;
};

}  // namespace

TEST_SUITE("engine") {
  TEST_CASE("perfect oracle classifies every image under every strategy") {
    const auto cifar_desc = load_descriptions(data_path("descriptions/cifar10.jsonl"), cifar().classes());
    const auto gtsrb_desc = load_descriptions(data_path("descriptions/gtsrb.jsonl"), gtsrb().classes());
    struct Case {
      const DecisionTree* tree;
      const ClassDescriptionSet* desc;
    };
    for (const auto& c : {Case{&cifar(), &cifar_desc}, Case{&gtsrb(), &gtsrb_desc}}) {
      const auto m = synthetic(c.tree->classes(), 60);
      ScriptedBackend oracle(make_oracle_rules(m, c.tree));
      Engine engine(oracle, m.classes, m.task_noun, c.tree, c.desc);
      for (const auto& img : m.records) {
        for (auto s : {StrategyKind::Tree, StrategyKind::TreeHistory, StrategyKind::TreeDesc}) {
          const auto r = engine.tree(img, s, 0.0, 0);
          REQUIRE_MESSAGE(r.correct(), img.image_ref << " " << to_string(s));
          CHECK(r.record.steps.size() == path_for_class(*c.tree, img.class_id).steps.size());
          CHECK_FALSE(r.record.variant_id.has_value());
        }
        for (auto s : {StrategyKind::ZeroShot, StrategyKind::ZeroShotDesc}) {
          const auto r = engine.zero_shot(img, s, baseline_variant(), 0.0, 0);
          REQUIRE(r.correct());
          CHECK(r.record.variant_id == "baseline");
        }
      }
    }
  }

  TEST_CASE("unparseable zero-shot reply is a NoMatch failure") {
    ScriptedBackend banana({}, std::string("banana"));
    const ImageRecord img{"x.png", 3, std::nullopt};
    const auto r = classify_zero_shot(img, cifar().classes(), "object", StrategyKind::ZeroShot, baseline_variant(),
                                      banana, 0.0, 0);
    CHECK_FALSE(r.correct());
    CHECK(r.record.failure == std::string(kFailureNoMatch));
    CHECK(r.record.steps.size() == 1);
    CHECK(r.record.steps[0].raw_response == "banana");
  }

  TEST_CASE("wrong root answer ends in the wrong subtree") {
    const ImageRecord img{"stop_ahead.ppm", 18, std::nullopt};  // general caution, a triangle
    std::vector<ScriptRule> rules{{img.image_ref, {marker(gtsrb().root().question)}, "It looks like a circle.", {}}};
    for (const auto& n : gtsrb().nodes())
      if (!n.is_leaf()) rules.push_back({std::nullopt, {marker(n.question)}, n.branches.front().answer, {}});
    ScriptedBackend mock(rules);
    const auto r = classify_tree(img, gtsrb(), StrategyKind::Tree, mock, 0.0, 0);
    REQUIRE(r.record.predicted_class_id.has_value());
    CHECK_FALSE(r.correct());
    const auto circle = classes_below(gtsrb(), *gtsrb().child(kRootNode, "circle"));
    CHECK(std::find(circle.begin(), circle.end(), *r.record.predicted_class_id) != circle.end());
    CHECK(first_error_depth(r.record, gtsrb()) == 0);
    CHECK(r.record.steps[0].extracted_answer == "circle");
  }

  TEST_CASE("captions are stored verbatim and requested once per image") {
    const auto desc = load_descriptions(data_path("descriptions/gtsrb.jsonl"), gtsrb().classes());
    const ImageRecord img{"stop.ppm", 14, std::nullopt};
    auto rules = make_oracle_rules(synthetic(gtsrb().classes(), 1), &gtsrb());
    std::vector<ScriptRule> script{{img.image_ref, {build_caption_prompt().text}, "a red octagonal sign", {}}};
    for (const auto& step : path_for_class(gtsrb(), 14).steps)
      script.push_back({img.image_ref, {marker(step.question)}, step.answer, {}});
    script.push_back({img.image_ref, {}, "14", {}});
    ScriptedBackend mock(script);
    Engine engine(mock, gtsrb().classes(), "traffic sign", &gtsrb(), &desc);
    const auto a = engine.tree(img, StrategyKind::TreeDesc, 0.0, 0);
    const auto b = engine.zero_shot(img, StrategyKind::ZeroShotDesc, baseline_variant(), 0.7, 2);
    CHECK(a.record.caption == "a red octagonal sign");
    CHECK(b.record.caption == "a red octagonal sign");
    CHECK(a.correct());
    CHECK(b.correct());
    const auto caption_calls = 1;
    CHECK(mock.call_count() == caption_calls + path_for_class(gtsrb(), 14).steps.size() + 1);
  }

  TEST_CASE("re-ask recovers an unparseable node reply") {
    const auto tree = balanced_binary_tree(2);
    const ImageRecord img{"i.png", 0, std::nullopt};
    std::vector<ScriptRule> rules{
        {img.image_ref, {marker(tree.root().question), "could not be matched"}, "yes", {}},
        {img.image_ref, {marker(tree.root().question)}, "hmm", {}},
        {std::nullopt, {}, "yes", {}},
    };
    ScriptedBackend mock(rules);
    const auto plain = classify_tree(img, tree, StrategyKind::Tree, mock, 0.0, 0);
    CHECK(plain.record.failure == std::string(kFailureNoMatch));
    CHECK(plain.record.steps.size() == 1);
    EngineOptions opts;
    opts.reask_on_nomatch = true;
    const auto again = classify_tree(img, tree, StrategyKind::Tree, mock, 0.0, 0, nullptr, opts);
    CHECK(again.correct());
    REQUIRE(again.record.steps[0].reask.has_value());
    CHECK(again.record.steps[0].reask->raw_response == "yes");
    CHECK(again.backend_calls == 3);
  }

  TEST_CASE("backend errors fail the image, not the batch") {
    const auto m = synthetic(cifar().classes(), 10);
    auto rules = make_oracle_rules(m, nullptr);
    rules.insert(rules.begin(), ScriptRule{m.records[2].image_ref, {}, "", BackendError::Kind::Transport});
    ScriptedBackend mock(rules);
    RunConfig cfg;
    cfg.strategies = {StrategyKind::ZeroShot};
    const auto out = run_batch(m, cfg, mock);
    CHECK(out.summary.cells == 10);
    CHECK(out.summary.correct == 9);
    CHECK(out.summary.backend_failures == 1);
    CHECK(out.records[2].failure == "backend:transport");
  }

  TEST_CASE("simulator at 0.9 on a depth-3 binary tree gives about 0.729") {
    const auto tree = balanced_binary_tree(3);
    const auto m = synthetic(tree.classes(), 100000);
    std::unordered_map<std::string, int> truth;
    for (const auto& r : m.records) truth.emplace(r.image_ref, r.class_id);
    ErrorModel em;
    em.default_accuracy = 0.9;
    SimulatorBackend sim(&tree, tree.classes(), truth, em, 42);
    RunConfig cfg;
    cfg.tree = &tree;
    cfg.strategies = {StrategyKind::Tree};
    cfg.parallelism = 4;
    const auto out = run_batch(m, cfg, sim);
    const double acc = static_cast<double>(out.summary.correct) / static_cast<double>(out.summary.cells);
    CHECK(std::abs(acc - 0.729) < 0.01);
    const double se = std::sqrt(0.729 * 0.271 / 100000.0);
    CHECK(std::abs(acc - 0.729) < 3 * se);
  }

  TEST_CASE("batch cardinality") {
    const auto m = synthetic(cifar().classes(), 10);
    ScriptedBackend oracle(make_oracle_rules(m, &cifar()));
    RunConfig cfg;
    cfg.tree = &cifar();
    cfg.strategies = {StrategyKind::Tree};
    cfg.runs = 3;
    CHECK(run_batch(m, cfg, oracle).records.size() == 30);
    CHECK(expand_cells(m, cfg).size() == 30);

    const auto gm = load_manifest(data_path("manifests/gtsrb_sample.jsonl"));
    ScriptedBackend g_oracle(make_oracle_rules(gm, nullptr));
    RunConfig zs;
    zs.strategies = {StrategyKind::ZeroShot};
    zs.variants = load_prompt_variants(data_path("prompts/zero_shot_variants.jsonl"));
    zs.temperatures = {0.7};
    zs.parallelism = 4;
    const auto out = run_batch(gm, zs, g_oracle);
    CHECK(out.records.size() == 9010);
    CHECK(out.summary.correct == 9010);
    std::set<std::string> variants;
    for (const auto& r : out.records) variants.insert(r.variant_id.value());
    CHECK(variants.size() == 10);
  }

  TEST_CASE("cells nest images, strategies, variants, temperatures, runs") {
    const auto m = synthetic(cifar().classes(), 2);
    RunConfig cfg;
    cfg.tree = &cifar();
    cfg.strategies = {StrategyKind::ZeroShot, StrategyKind::Tree};
    cfg.variants = {baseline_variant(), {"alt", "{task_noun}? {class_ids_and_names}"}};
    cfg.temperatures = {0.0, 0.7};
    cfg.runs = 2;
    const auto cells = expand_cells(m, cfg);
    CHECK(cells.size() == 2 * (2 * 2 * 2 + 1 * 2 * 2));
    CHECK(cells[0].variant == 0u);
    CHECK(cells[1].run_index == 1);
    CHECK(cells[2].temperature == 0.7);
    CHECK(cells[4].variant == 1u);
    CHECK(cells[8].strategy == StrategyKind::Tree);
    CHECK_FALSE(cells[8].variant.has_value());
    CHECK(cells[12].image == 1u);
  }

  TEST_CASE("configuration errors surface before any backend call") {
    const auto m = synthetic(cifar().classes(), 3);
    ScriptedBackend mock({}, std::string("0"));
    RunConfig cfg;
    cfg.strategies = {StrategyKind::Tree};
    CHECK_THROWS_AS(run_batch(m, cfg, mock), ConfigError);  // no tree
    cfg.strategies = {StrategyKind::ZeroShot};
    cfg.tree = &cifar();
    CHECK_THROWS_AS(run_batch(m, cfg, mock), ConfigError);  // tree without tree strategy
    cfg.tree = nullptr;
    cfg.strategies = {StrategyKind::ZeroShotDesc};
    CHECK_THROWS_AS(run_batch(m, cfg, mock), ConfigError);  // no descriptions
    cfg.strategies = {StrategyKind::ZeroShot};
    cfg.runs = 0;
    CHECK_THROWS_AS(run_batch(m, cfg, mock), ConfigError);
    cfg.runs = 1;
    cfg.temperatures = {3.0};
    CHECK_THROWS_AS(run_batch(m, cfg, mock), ConfigError);
    cfg.temperatures = {0.0};
    cfg.variants = {{"bad", "no placeholders"}};
    CHECK_THROWS_AS(run_batch(m, cfg, mock), ConfigError);
    cfg.variants = {};
    cfg.tree = &gtsrb();
    cfg.strategies = {StrategyKind::Tree};
    CHECK_THROWS_AS(run_batch(m, cfg, mock), ConfigError);  // tree lacks the manifest's classes
    CHECK(mock.call_count() == 0);
  }

  TEST_CASE("parallel and serial batches write identical transcripts") {
    TempDir dir;
    const auto m = synthetic(gtsrb().classes(), 200, "traffic sign");
    std::unordered_map<std::string, int> truth;
    for (const auto& r : m.records) truth.emplace(r.image_ref, r.class_id);
    ErrorModel em;
    em.default_accuracy = 0.8;
    RunConfig cfg;
    cfg.tree = &gtsrb();
    cfg.strategies = {StrategyKind::ZeroShot, StrategyKind::Tree, StrategyKind::TreeHistory};
    cfg.temperatures = {0.0, 0.7};
    cfg.runs = 2;
    std::string reference;
    for (int p : {1, 3, 8}) {
      SimulatorBackend sim(&gtsrb(), gtsrb().classes(), truth, em, 9);
      cfg.parallelism = p;
      cfg.transcript_path = dir / ("t" + std::to_string(p) + ".jsonl");
      run_batch(m, cfg, sim);
      CHECK_FALSE(std::filesystem::exists(cfg.transcript_path->string() + ".partial"));
      const auto text = read_text_file(*cfg.transcript_path);
      if (reference.empty())
        reference = text;
      else
        CHECK(text == reference);
    }
  }

  TEST_CASE("an interrupted batch resumes from the cache without repeating calls") {
    TempDir dir;
    const auto m = synthetic(cifar().classes(), 40);
    ScriptedBackend oracle(make_oracle_rules(m, &cifar()));
    RunConfig cfg;
    cfg.tree = &cifar();
    cfg.strategies = {StrategyKind::Tree, StrategyKind::ZeroShot};
    cfg.parallelism = 4;

    // uninterrupted reference
    Recorder ref_rec(oracle);
    const auto reference = render_transcript(run_batch(m, cfg, ref_rec).records);

    ResponseCache cache(dir / "cache");
    Recorder crashing(oracle, 60);
    CachedBackend first(crashing, cache);
    cfg.transcript_path = dir / "out.jsonl";
    CHECK_THROWS_AS(run_batch(m, cfg, first), std::runtime_error);
    CHECK_FALSE(std::filesystem::exists(dir / "out.jsonl"));
    CHECK(std::filesystem::exists(dir / "out.jsonl.partial"));
    const auto done_before = crashing.keys();
    CHECK(done_before.size() == 60);

    Recorder resumed(oracle);
    CachedBackend second(resumed, cache);
    const auto out = run_batch(m, cfg, second);
    CHECK(read_text_file(dir / "out.jsonl") == reference);
    for (const auto& k : resumed.keys()) CHECK(done_before.count(k) == 0);
    CHECK(done_before.size() + resumed.keys().size() == ref_rec.keys().size());
    CHECK(out.summary.fresh_calls == resumed.keys().size());
    CHECK(out.summary.cache_skipped_cells > 0);

    // a third pass is served entirely from the cache
    Recorder third(oracle);
    CachedBackend warm(third, cache);
    const auto again = run_batch(m, cfg, warm);
    CHECK(third.keys().empty());
    CHECK(again.summary.cache_skipped_cells == again.summary.cells);
  }
}
