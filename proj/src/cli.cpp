#include "vlmtree/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <random>

#include "vlmtree/analysis.hpp"
#include "vlmtree/backends.hpp"
#include "vlmtree/cache.hpp"
#include "vlmtree/datasets.hpp"
#include "vlmtree/engine.hpp"
#include "vlmtree/propagation.hpp"
#include "vlmtree/transcript.hpp"
#include "vlmtree/tree.hpp"

namespace vlmtree {

namespace {

namespace fs = std::filesystem;

// ---- settings -------------------------------------------------------------------

// Resolves a value from, in order: command-line flag, config file, environment.
class Settings {
 public:
  void load_config(const std::string& path) {
    if (path.empty()) return;
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
    config_ = parse_json_document(read_text_file(path), path);
    if (!config_.is_object()) throw ConfigError("config file must hold a JSON object");
    for (const auto& [key, value] : config_.items()) {
      if (key.find("key") != std::string::npos && key != "api_key_env")
        throw ConfigError("config key '" + key + "' looks like a credential; credentials come only from the environment");
      if (key.find("token") != std::string::npos || key.find("secret") != std::string::npos ||
          key.find("password") != std::string::npos)
        throw ConfigError("config key '" + key + "' looks like a credential; credentials come only from the environment");
    }
  }

  template <typename T>
  T get(const CLI::Option* flag, const T& flag_value, const char* key, const char* env, T fallback) const {
    if (flag != nullptr && flag->count() > 0) return flag_value;
    if (config_.contains(key)) {
      try {
        return config_[key].get<T>();
      } catch (const Json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
      }
    }
    if (const char* v = std::getenv(env); v != nullptr && *v != '\0') return from_env<T>(v, env);
    return fallback;
  }

 private:
  template <typename T>
  static T from_env(const std::string& v, const char* env) {
    try {
      if constexpr (std::is_same_v<T, std::string>)
        return v;
      else if constexpr (std::is_same_v<T, std::uint64_t>)
        return std::stoull(v);
      else if constexpr (std::is_same_v<T, int>)
        return std::stoi(v);
      else
        return static_cast<T>(std::stod(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string("cannot parse environment variable ") + env);
    }
  }

  Json config_ = Json::object();
};

struct Globals {
  std::uint64_t seed = 0;
  std::string cache_dir;
  int parallelism = 1;
  std::string out;
  std::string config;
  std::string log_level = "warn";
  CLI::Option* seed_opt = nullptr;
  CLI::Option* cache_opt = nullptr;
  CLI::Option* par_opt = nullptr;
  CLI::Option* out_opt = nullptr;
};

struct BackendOptions {
  std::string backend;
  std::string model;
  std::string endpoint;
  std::string api_key_env;
  double accuracy = 1.0;
  std::string depth_accuracy;
  std::string misroute = "uniform-other";
  int max_retries = 4;
  int max_concurrency = 4;
  int min_interval_ms = 0;
  int timeout_s = 60;
  CLI::Option* backend_opt = nullptr;
  CLI::Option* model_opt = nullptr;
  CLI::Option* endpoint_opt = nullptr;
  CLI::Option* key_env_opt = nullptr;
  CLI::Option* retries_opt = nullptr;
  CLI::Option* concurrency_opt = nullptr;
  CLI::Option* interval_opt = nullptr;
};

void add_backend_options(CLI::App* sub, BackendOptions& b) {
  b.backend_opt = sub->add_option("--backend", b.backend,
                                  "oracle | mock:<script.jsonl> | simulator | http | replay:<transcript.jsonl>");
  b.model_opt = sub->add_option("--model", b.model, "Model id sent to the backend");
  b.endpoint_opt = sub->add_option("--endpoint", b.endpoint, "Chat-completions URL for the http backend");
  b.key_env_opt = sub->add_option("--api-key-env", b.api_key_env, "Environment variable holding the API key");
  sub->add_option("--accuracy", b.accuracy, "Simulator: default per-node accuracy")->check(CLI::Range(0.0, 1.0));
  sub->add_option("--depth-accuracy", b.depth_accuracy, "Simulator: per-depth accuracies, e.g. 0=0.5,1=0.9");
  sub->add_option("--misroute", b.misroute, "Simulator: uniform-other | adjacent-answer");
  b.retries_opt = sub->add_option("--max-retries", b.max_retries, "Live backend retry cap");
  b.concurrency_opt = sub->add_option("--max-concurrency", b.max_concurrency, "Live backend in-flight bound");
  b.interval_opt = sub->add_option("--min-interval-ms", b.min_interval_ms, "Live backend spacing between requests");
  sub->add_option("--timeout-s", b.timeout_s, "Live backend request timeout");
}

void resolve_backend_options(BackendOptions& b, const Settings& s) {
  b.backend = s.get<std::string>(b.backend_opt, b.backend, "backend", "VLMTREE_BACKEND", "");
  b.model = s.get<std::string>(b.model_opt, b.model, "model", "VLMTREE_MODEL", "");
  b.endpoint = s.get<std::string>(b.endpoint_opt, b.endpoint, "endpoint", "VLMTREE_ENDPOINT", "");
  b.api_key_env = s.get<std::string>(b.key_env_opt, b.api_key_env, "api_key_env", "VLMTREE_API_KEY_ENV",
                                     "OPENAI_API_KEY");
  b.max_retries = s.get<int>(b.retries_opt, b.max_retries, "max_retries", "VLMTREE_MAX_RETRIES", 4);
  b.max_concurrency =
      s.get<int>(b.concurrency_opt, b.max_concurrency, "max_concurrency", "VLMTREE_MAX_CONCURRENCY", 4);
  b.min_interval_ms = s.get<int>(b.interval_opt, b.min_interval_ms, "min_interval_ms", "VLMTREE_MIN_INTERVAL_MS", 0);
  if (b.backend.empty()) throw ConfigError("no backend selected (--backend)");
}

ErrorModel parse_error_model(const BackendOptions& b) {
  ErrorModel m;
  m.default_accuracy = b.accuracy;
  auto rule = parse_misroute(b.misroute);
  if (!rule) throw ConfigError("unknown misroute rule '" + b.misroute + "'");
  m.misroute = *rule;
  if (!b.depth_accuracy.empty()) {
    std::stringstream ss(b.depth_accuracy);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("depth accuracy entries look like depth=p: '" + item + "'");
      try {
        m.per_depth_accuracy[std::stoi(item.substr(0, eq))] = std::stod(item.substr(eq + 1));
      } catch (const std::exception&) {
        throw ConfigError("cannot parse depth accuracy entry '" + item + "'");
      }
    }
  }
  m.validate();
  return m;
}

// Owns the backend chain: inner backend, optional cache decorator.
struct BackendStack {
  std::unique_ptr<Backend> inner;
  std::unique_ptr<ResponseCache> cache;
  std::unique_ptr<CachedBackend> cached;

  Backend& get() { return cached ? static_cast<Backend&>(*cached) : *inner; }
};

void add_replay_records(ReplayBackend& replay, const std::vector<TranscriptRecord>& records) {
  const std::string caption_digest = sha256_hex(build_caption_prompt().text);
  for (const auto& r : records) {
    if (r.caption) replay.record(r.image_ref, 0.0, 0, caption_digest, *r.caption);
    for (const auto& s : r.steps) {
      replay.record(r.image_ref, r.temperature, r.run_index, s.prompt_digest, s.raw_response);
      if (s.reask) replay.record(r.image_ref, r.temperature, r.run_index, s.reask->prompt_digest, s.reask->raw_response);
    }
  }
}

BackendStack make_backend(const BackendOptions& b, const Globals& g, const DatasetManifest* manifest,
                          const DecisionTree* tree, bool verification) {
  BackendStack stack;
  const auto& spec = b.backend;
  if (spec == "oracle") {
    std::vector<ScriptRule> rules;
    if (verification) {
      if (tree == nullptr) throw ConfigError("oracle verification needs a tree");
      rules = make_verification_oracle_rules(*tree);
    } else {
      if (manifest == nullptr) throw ConfigError("oracle backend needs a manifest");
      rules = make_oracle_rules(*manifest, tree);
    }
    stack.inner = std::make_unique<ScriptedBackend>(std::move(rules), std::nullopt, "oracle");
  } else if (spec.rfind("mock:", 0) == 0) {
    const auto path = spec.substr(5);
    if (!fs::exists(path)) throw ConfigError("script not found: " + path);
    stack.inner = load_script(path, "mock");
  } else if (spec == "simulator") {
    std::unordered_map<std::string, int> truth;
    ClassSet classes;
    if (manifest != nullptr) {
      classes = manifest->classes;
      for (const auto& r : manifest->records) truth.emplace(r.image_ref, r.class_id);
    } else if (tree != nullptr) {
      classes = tree->classes();
    }
    stack.inner = std::make_unique<SimulatorBackend>(tree, classes, std::move(truth), parse_error_model(b), g.seed);
  } else if (spec == "http") {
    HttpBackendConfig cfg;
    cfg.endpoint = b.endpoint;
    cfg.model_id = b.model;
    cfg.api_key_env = b.api_key_env;
    cfg.max_retries = b.max_retries;
    cfg.max_concurrency = b.max_concurrency;
    cfg.min_interval = std::chrono::milliseconds(b.min_interval_ms);
    cfg.timeout = std::chrono::seconds(b.timeout_s);
    if (cfg.endpoint.empty()) throw ConfigError("http backend needs --endpoint");
    stack.inner = std::make_unique<HttpBackend>(cfg);
  } else if (spec.rfind("replay:", 0) == 0) {
    const auto path = spec.substr(7);
    if (!fs::exists(path)) throw ConfigError("transcript not found: " + path);
    auto replay = std::make_unique<ReplayBackend>();
    add_replay_records(*replay, load_transcript(path));
    stack.inner = std::move(replay);
  } else {
    throw ConfigError("unknown backend '" + spec + "'");
  }
  if (!g.cache_dir.empty()) {
    stack.cache = std::make_unique<ResponseCache>(g.cache_dir);
    stack.cached = std::make_unique<CachedBackend>(*stack.inner, *stack.cache);
  }
  return stack;
}

// ---- helpers --------------------------------------------------------------------

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string(what) + " path is required");
  if (!fs::exists(path)) throw ConfigError(std::string(what) + " not found: " + path);
}

ClassSet load_class_file(const std::string& path) {
  require_file(path, "class file");
  const auto text = read_text_file(path);
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::exception&) {
    // manifests carry the class list on their first line
    doc = parse_json_document(text.substr(0, text.find('\n')), path);
  }
  if (!doc.is_object() || !doc.contains("classes")) throw ConfigError(path + " has no 'classes' list");
  std::vector<ClassLabel> labels;
  for (const auto& c : doc["classes"]) labels.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
  return ClassSet(std::move(labels));
}

std::string group_key(const TranscriptRecord& r) {
  std::string key(to_string(r.strategy));
  if (r.variant_id) key += "." + *r.variant_id;
  key += fmt::format(".t{}", r.temperature);
  return key;
}

struct Group {
  std::string key;
  std::vector<TranscriptRecord> records;
};

std::vector<Group> group_records(const std::vector<TranscriptRecord>& records) {
  std::vector<Group> groups;
  std::map<std::string, std::size_t> index;
  for (const auto& r : records) {
    const auto key = group_key(r);
    auto [it, fresh] = index.emplace(key, groups.size());
    if (fresh) groups.push_back({key, {}});
    groups[it->second].records.push_back(r);
  }
  return groups;
}

// Prints one line per group and writes per-group reports under out_dir.
std::vector<EvaluationReport> report_groups(const std::vector<TranscriptRecord>& records,
                                            const DatasetManifest& manifest, const DecisionTree* tree,
                                            const Json& config_echo, const std::string& out_dir, std::ostream& out) {
  std::vector<EvaluationReport> reports;
  for (const auto& g : group_records(records)) {
    auto report = compute_metrics(g.records, manifest, tree);
    report.config = config_echo;
    report.config["group"] = g.key;
    out << fmt::format("{} n={} mean_accuracy={:.4f} class_mean_accuracy={:.4f} nomatch={} failures={}\n", g.key,
                       report.n_images, report.mean_accuracy, report.class_mean_accuracy, report.nomatch_count,
                       report.failure_count);
    if (!out_dir.empty()) {
      const fs::path dir = fs::path(out_dir) / "reports";
      write_text_file_atomic(dir / (g.key + ".json"), to_json(report).dump(2) + "\n");
      write_text_file_atomic(dir / (g.key + ".per_class.csv"), per_class_csv(report));
      write_text_file_atomic(dir / (g.key + ".per_depth.csv"), per_depth_csv(report));
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

DatasetManifest synthetic_manifest(const ClassSet& classes, std::string task_noun, int count, std::uint64_t seed) {
  if (count < 1) throw ConfigError("synthetic image count must be at least 1");
  if (classes.empty()) throw ConfigError("synthetic images need a class set");
  DatasetManifest m;
  m.name = "synthetic";
  m.task_noun = std::move(task_noun);
  m.classes = classes;
  std::mt19937_64 rng(mix_seed(seed, std::uint64_t{0x5157}));
  std::uniform_int_distribution<std::size_t> pick(0, classes.size() - 1);
  m.records.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    m.records.push_back({fmt::format("synthetic/{:07d}", i), classes.labels()[pick(rng)].id, std::nullopt});
  return m;
}

std::vector<StrategyKind> parse_strategies(const std::string& list) {
  std::vector<StrategyKind> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto k = parse_strategy(item);
    if (!k) throw ConfigError("unknown strategy '" + item + "'");
    out.push_back(*k);
  }
  return out;
}

std::vector<int> parse_id_list(const std::string& list) {
  std::vector<int> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad class id '" + item + "'");
    }
  }
  return out;
}

// ---- commands -------------------------------------------------------------------

struct ValidateArgs {
  std::string tree;
  std::string classes;
  bool allow_duplicates = false;
};

int cmd_validate(const ValidateArgs& a, std::ostream& out, std::ostream& err) {
  if (a.tree.empty() || !fs::exists(a.tree)) {
    err << "error: tree file not found: " << a.tree << "\n";
    return kExitUsage;
  }
  std::optional<DecisionTree> tree;
  try {
    tree.emplace(load_tree(a.tree));
  } catch (const UnknownClassError& e) {
    out << "error UnknownClassId: " << e.what() << "\n";
    return kExitFailure;
  } catch (const ParseError& e) {
    out << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  if (!a.classes.empty()) tree->set_classes(load_class_file(a.classes));
  const auto issues = validate_tree(*tree, a.allow_duplicates);
  for (const auto& i : issues)
    out << (i.severity == Severity::Error ? "error " : "warning ") << to_string(i.code) << " at "
        << format_path(i.path) << ": " << i.detail << "\n";
  const auto st = tree_stats(*tree);
  out << fmt::format("nodes={} depth={} leaves={}\n", st.node_count, st.max_depth, st.leaf_count);
  return has_errors(issues) ? kExitFailure : kExitOk;
}

struct StatsArgs {
  std::string tree;
  std::string manifest;
  bool listing = false;
};

int cmd_stats(const StatsArgs& a, std::ostream& out) {
  if (a.tree.empty() && a.manifest.empty()) throw ConfigError("stats needs --tree or --manifest");
  if (!a.tree.empty()) {
    require_file(a.tree, "tree");
    const auto tree = load_tree(a.tree);
    const auto st = tree_stats(tree);
    out << fmt::format("nodes={} internal={} leaves={} depth={}\n", st.node_count, st.internal_count, st.leaf_count,
                       st.max_depth);
    for (const auto& [fan, n] : st.branching_histogram) out << fmt::format("fanout {}: {}\n", fan, n);
    for (const auto& [id, len] : st.path_lengths)
      out << fmt::format("path {} ({}): {}\n", id, tree.classes().at(id).name, len);
    if (a.listing) out << render_tree(tree, TreeFormat::Listing);
  }
  if (!a.manifest.empty()) {
    require_file(a.manifest, "manifest");
    const auto m = load_manifest(a.manifest);
    out << fmt::format("manifest={} records={} classes={}\n", m.name, m.records.size(), m.classes.size());
    for (const auto& [id, n] : class_histogram(m)) out << fmt::format("class {}: {}\n", id, n);
  }
  return kExitOk;
}

struct SampleArgs {
  std::string manifest;
  std::string mode = "sequence";
  int per_class = 100;
  std::string file;
};

int cmd_sample(const SampleArgs& a, const Globals& g, std::ostream& out) {
  require_file(a.manifest, "manifest");
  const auto m = load_manifest(a.manifest);
  DatasetManifest s;
  if (a.mode == "sequence")
    s = sample_one_per_sequence(m, g.seed);
  else if (a.mode == "balanced")
    s = sample_balanced(m, a.per_class, g.seed);
  else
    throw ConfigError("unknown sampling mode '" + a.mode + "'");
  if (a.file.empty()) {
    out << render_manifest(s);
  } else {
    write_text_file_atomic(a.file, render_manifest(s));
    out << fmt::format("records={}\n", s.records.size());
  }
  return kExitOk;
}

struct RunArgs {
  std::string manifest;
  std::string tree;
  std::string strategies = "zero-shot";
  std::string variants;
  std::vector<double> temperatures{0.0};
  int runs = 1;
  std::string descriptions;
  bool reask = false;
  int synthetic = 0;
  double min_accuracy = -1.0;
  BackendOptions backend;
};

int cmd_run(RunArgs& a, const Globals& g, const Settings& settings, std::ostream& out) {
  resolve_backend_options(a.backend, settings);
  std::optional<DecisionTree> tree;
  if (!a.tree.empty()) {
    require_file(a.tree, "tree");
    tree.emplace(load_tree(a.tree));
  }
  DatasetManifest manifest;
  if (a.synthetic > 0) {
    ClassSet classes;
    std::string noun = "object";
    if (!a.manifest.empty()) {
      require_file(a.manifest, "manifest");
      auto m = load_manifest(a.manifest);
      classes = m.classes;
      noun = m.task_noun;
    } else if (tree) {
      classes = tree->classes();
    }
    manifest = synthetic_manifest(classes, noun, a.synthetic, g.seed);
  } else {
    require_file(a.manifest, "manifest");
    manifest = load_manifest(a.manifest);
  }

  std::optional<ClassDescriptionSet> descriptions;
  if (!a.descriptions.empty()) {
    require_file(a.descriptions, "descriptions");
    descriptions = load_descriptions(a.descriptions, tree ? tree->classes() : manifest.classes);
  }

  RunConfig cfg;
  cfg.tree = tree ? &*tree : nullptr;
  cfg.strategies = parse_strategies(a.strategies);
  if (!a.variants.empty()) {
    require_file(a.variants, "variants");
    cfg.variants = load_prompt_variants(a.variants);
  }
  cfg.temperatures = a.temperatures;
  cfg.runs = a.runs;
  cfg.parallelism = g.parallelism;
  cfg.seed = g.seed;
  cfg.descriptions = descriptions ? &*descriptions : nullptr;
  cfg.options.model_id = a.backend.model;
  cfg.options.reask_on_nomatch = a.reask;
  if (!g.out.empty()) cfg.transcript_path = fs::path(g.out) / "transcript.jsonl";
  validate_run_config(cfg, manifest);  // before any backend exists

  auto stack = make_backend(a.backend, g, &manifest, cfg.tree, false);
  const auto result = run_batch(manifest, cfg, stack.get());

  Json echo;
  echo["manifest"] = a.synthetic > 0 ? "synthetic" : a.manifest;
  echo["tree"] = a.tree;
  echo["backend"] = a.backend.backend;
  echo["model"] = a.backend.model;
  echo["runs"] = a.runs;
  echo["seed"] = g.seed;
  const auto reports = report_groups(result.records, manifest, cfg.tree, echo, g.out, out);
  const auto& s = result.summary;
  out << fmt::format(
      "cells={} correct={} nomatch={} backend_failures={} backend_calls={} fresh_calls={} cache_skipped_cells={}\n",
      s.cells, s.correct, s.nomatch, s.backend_failures, s.backend_calls, s.fresh_calls, s.cache_skipped_cells);
  if (reports.size() == 1) out << fmt::format("mean_accuracy={:.4f}\n", reports.front().mean_accuracy);
  if (a.min_accuracy >= 0.0)
    for (const auto& r : reports)
      if (r.mean_accuracy < a.min_accuracy) return kExitFailure;
  return kExitOk;
}

struct VerifyArgs {
  std::string tree;
  std::string classes;
  std::string from_transcript;
  BackendOptions backend;
};

int cmd_verify(VerifyArgs& a, const Globals& g, const Settings& settings, std::ostream& out) {
  require_file(a.tree, "tree");
  const auto tree = load_tree(a.tree);
  std::vector<int> ids = a.classes.empty() ? tree.classes().ids() : parse_id_list(a.classes);
  for (int id : ids)
    if (!tree.classes().contains(id)) throw ConfigError("class " + std::to_string(id) + " is not in the tree");

  std::vector<VerificationRecord> records;
  if (!a.from_transcript.empty()) {
    require_file(a.from_transcript, "verification transcript");
    for (const auto& r : parse_verification_transcript(read_text_file(a.from_transcript), a.from_transcript))
      if (std::find(ids.begin(), ids.end(), r.class_id) != ids.end()) records.push_back(rescore_verification(tree, r));
  } else {
    resolve_backend_options(a.backend, settings);
    auto stack = make_backend(a.backend, g, nullptr, &tree, true);
    VerificationOptions opts;
    opts.model_id = a.backend.model;
    for (int id : ids) records.push_back(verify_knowledge(tree, id, stack.get(), opts));
  }
  const auto report = summarize_verification(records);
  for (const auto& [id, r] : report.per_class)
    if (r.questions_correct != r.questions_total)
      out << fmt::format("class {} ({}): {}/{} = {}%\n", id, r.class_name, r.questions_correct, r.questions_total,
                         percent2(r.accuracy()));
  out << fmt::format("overall_mean={}% perfect={}/{}\n", percent2(report.overall_mean), report.perfect_class_count,
                     report.class_count);
  if (!g.out.empty()) {
    write_text_file_atomic(fs::path(g.out) / "verification.jsonl", render_verification_transcript(records));
    write_text_file_atomic(fs::path(g.out) / "verification.csv", verification_csv(report));
  }
  return kExitOk;
}

struct SimulateArgs {
  std::string tree;
  double accuracy = 1.0;
  std::vector<double> sweep;
  std::string depth_accuracy;
  std::string misroute = "uniform-other";
  std::uint64_t trials = 100000;
};

int cmd_simulate(const SimulateArgs& a, const Globals& g, std::ostream& out) {
  require_file(a.tree, "tree");
  const auto tree = load_tree(a.tree);
  const auto stats = tree_stats(tree);
  std::vector<double> ps = a.sweep.empty() ? std::vector<double>{a.accuracy} : a.sweep;

  std::string csv = "p,class_id,class_name,path_length,analytic,monte_carlo,trials\n";
  std::string summary;
  for (double p : ps) {
    BackendOptions b;
    b.accuracy = p;
    b.depth_accuracy = a.depth_accuracy;
    b.misroute = a.misroute;
    const auto model = PropagationModel::from_error_model(parse_error_model(b));
    const auto analytic = analytic_leaf_accuracy(tree, model);
    const auto mc = monte_carlo_leaf_accuracy(tree, model, a.trials, g.seed, g.parallelism);
    for (const auto& [id, value] : analytic.per_class) {
      const auto [n, k] = mc.per_class.at(id);
      csv += fmt::format("{:.4f},{},{},{},{:.6f},{:.6f},{}\n", p, id, tree.classes().at(id).name,
                         stats.path_lengths.at(id), value, n == 0 ? 0.0 : static_cast<double>(k) / n, n);
    }
    summary += fmt::format("overall p={:.4f} analytic={:.6f} monte_carlo={:.6f} stderr={:.6f} trials={}\n", p,
                           analytic.overall, mc.estimate, mc.stderr_, mc.trials);
  }
  out << csv << summary;
  if (!g.out.empty()) write_text_file_atomic(fs::path(g.out) / "simulate.csv", csv);
  return kExitOk;
}

struct CompareArgs {
  std::string a;
  std::string b;
};

int cmd_compare(const CompareArgs& a, const Globals& g, std::ostream& out) {
  require_file(a.a, "report");
  require_file(a.b, "report");
  const auto ra = report_from_json(parse_json_document(read_text_file(a.a), a.a));
  const auto rb = report_from_json(parse_json_document(read_text_file(a.b), a.b));
  const auto c = compare_strategies(ra, rb);
  out << fmt::format("classes={} wins_a={} wins_b={} ties={} mean_a={}% mean_b={}% gap={}\n", c.rows.size(),
                     c.wins_a, c.wins_b, c.ties, percent2(c.mean_a), percent2(c.mean_b), percent2(c.mean_gap));
  if (!g.out.empty()) write_text_file_atomic(fs::path(g.out) / "comparison.csv", comparison_csv(c));
  return kExitOk;
}

struct ReplayArgs {
  std::string transcript;
  std::string manifest;
  std::string tree;
  std::string variants;
  std::string descriptions;
  bool reask = false;
};

int cmd_replay(const ReplayArgs& a, const Globals& g, std::ostream& out) {
  require_file(a.transcript, "transcript");
  require_file(a.manifest, "manifest");
  const auto records = load_transcript(a.transcript);
  const auto manifest = load_manifest(a.manifest);
  std::optional<DecisionTree> tree;
  if (!a.tree.empty()) {
    require_file(a.tree, "tree");
    tree.emplace(load_tree(a.tree));
  }
  std::optional<ClassDescriptionSet> descriptions;
  if (!a.descriptions.empty()) {
    require_file(a.descriptions, "descriptions");
    descriptions = load_descriptions(a.descriptions, manifest.classes);
  }
  std::map<std::string, PromptVariant> variants{{"baseline", baseline_variant()}};
  if (!a.variants.empty()) {
    require_file(a.variants, "variants");
    for (auto& v : load_prompt_variants(a.variants)) variants[v.variant_id] = v;
  }

  std::unordered_map<std::string, const ImageRecord*> images;
  for (const auto& r : manifest.records) images.emplace(r.image_ref, &r);
  for (const auto& r : records) {
    if (!images.contains(r.image_ref)) throw ConfigError("transcript image '" + r.image_ref + "' is not in the manifest");
    if (is_tree_strategy(r.strategy) && !tree) throw ConfigError("transcript has tree records; pass --tree");
    if (r.variant_id && !variants.contains(*r.variant_id))
      throw ConfigError("unknown prompt variant '" + *r.variant_id + "'; pass --variants");
  }

  ReplayBackend replay;
  add_replay_records(replay, records);
  EngineOptions opts;
  opts.reask_on_nomatch = a.reask;
  Engine engine(replay, manifest.classes, manifest.task_noun, tree ? &*tree : nullptr,
                descriptions ? &*descriptions : nullptr, opts);

  std::vector<TranscriptRecord> rerun(records.size());
  const auto n = static_cast<std::int64_t>(records.size());
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, g.parallelism))
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& r = records[static_cast<std::size_t>(i)];
    const auto& image = *images.at(r.image_ref);
    try {
      rerun[static_cast<std::size_t>(i)] =
          is_tree_strategy(r.strategy)
              ? engine.tree(image, r.strategy, r.temperature, r.run_index).record
              : engine.zero_shot(image, r.strategy, variants.at(*r.variant_id), r.temperature, r.run_index).record;
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!(rerun[i] == records[i])) {
      if (mismatches < 5) spdlog::error("replay diverges at record {} ({})", i + 1, records[i].image_ref);
      ++mismatches;
    }
  Json echo;
  echo["transcript"] = a.transcript;
  echo["manifest"] = a.manifest;
  report_groups(rerun, manifest, tree ? &*tree : nullptr, echo, g.out, out);
  out << fmt::format("records={} mismatches={}\n", records.size(), mismatches);
  return mismatches == 0 ? kExitOk : kExitFailure;
}

struct EmitArgs {
  std::string report;
  std::string format = "csv";
  std::string file;
};

int cmd_emit(const EmitArgs& a, std::ostream& out) {
  require_file(a.report, "report");
  const auto report = report_from_json(parse_json_document(read_text_file(a.report), a.report));
  std::string text;
  if (a.format == "csv")
    text = per_class_csv(report);
  else if (a.format == "depth-csv")
    text = per_depth_csv(report);
  else if (a.format == "json")
    text = to_json(report).dump(2) + "\n";
  else
    throw ConfigError("unknown format '" + a.format + "'");
  if (a.file.empty())
    out << text;
  else
    write_text_file_atomic(a.file, text);
  return kExitOk;
}

void init_logging(const std::string& level) {
  static std::once_flag once;
  std::call_once(once, [] {
    auto logger = spdlog::stderr_color_mt("vlmtree");
    spdlog::set_default_logger(logger);
  });
  spdlog::set_level(spdlog::level::from_str(level));
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical visual classification with vision-language model backends"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  g.seed_opt = app.add_option("--seed", g.seed, "Seed for sampling, simulation, and synthetic data");
  g.cache_opt = app.add_option("--cache-dir", g.cache_dir, "Response cache directory");
  g.par_opt = app.add_option("--parallelism", g.parallelism, "Concurrent evaluations")->check(CLI::PositiveNumber);
  g.out_opt = app.add_option("--out", g.out, "Output directory");
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error, off");

  ValidateArgs va;
  auto* validate = app.add_subcommand("validate", "Check a tree against the structural rules");
  validate->add_option("--tree", va.tree, "Tree document")->required();
  validate->add_option("--classes", va.classes, "Class list (tree, manifest, or {\"classes\": [...]})");
  validate->add_flag("--allow-duplicate-leaves", va.allow_duplicates, "Report duplicated leaf classes as warnings");

  StatsArgs sa;
  auto* stats = app.add_subcommand("stats", "Tree and manifest statistics");
  stats->add_option("--tree", sa.tree, "Tree document");
  stats->add_option("--manifest", sa.manifest, "Dataset manifest");
  stats->add_flag("--listing", sa.listing, "Also print the indented tree listing");

  SampleArgs sma;
  auto* sample = app.add_subcommand("sample", "Draw a sample from a manifest");
  sample->add_option("--manifest", sma.manifest, "Dataset manifest")->required();
  sample->add_option("--mode", sma.mode, "sequence | balanced");
  sample->add_option("--per-class", sma.per_class, "Records per class for balanced sampling");
  sample->add_option("--file", sma.file, "Write the sampled manifest here instead of stdout");

  RunArgs ra;
  auto* run = app.add_subcommand("run", "Run a classification batch and report accuracy");
  run->add_option("--manifest", ra.manifest, "Dataset manifest");
  run->add_option("--tree", ra.tree, "Tree document (required for tree strategies)");
  run->add_option("--strategies", ra.strategies, "Comma list: zero-shot, zero-shot-desc, tree, tree-history, tree-desc");
  run->add_option("--variants", ra.variants, "Zero-shot prompt variants file");
  run->add_option("--temperatures", ra.temperatures, "Sampling temperatures")->delimiter(',');
  run->add_option("--runs", ra.runs, "Repeats per setting")->check(CLI::PositiveNumber);
  run->add_option("--descriptions", ra.descriptions, "Class descriptions file");
  run->add_flag("--reask", ra.reask, "Re-ask once when a reply matches no answer");
  run->add_option("--synthetic-images", ra.synthetic, "Generate this many synthetic image records");
  run->add_option("--min-accuracy", ra.min_accuracy, "Exit 1 if any group's mean accuracy is lower");
  add_backend_options(run, ra.backend);

  VerifyArgs vfa;
  auto* verify = app.add_subcommand("verify", "Knowledge verification along each class path");
  verify->add_option("--tree", vfa.tree, "Tree document")->required();
  verify->add_option("--classes", vfa.classes, "Comma list of class ids (default: all)");
  verify->add_option("--from-transcript", vfa.from_transcript, "Rescore a recorded verification transcript");
  add_backend_options(verify, vfa.backend);

  SimulateArgs sia;
  auto* simulate = app.add_subcommand("simulate", "Analytic and Monte Carlo error propagation");
  simulate->add_option("--tree", sia.tree, "Tree document")->required();
  simulate->add_option("--accuracy", sia.accuracy, "Uniform node accuracy")->check(CLI::Range(0.0, 1.0));
  simulate->add_option("--sweep", sia.sweep, "Several uniform accuracies")->delimiter(',');
  simulate->add_option("--depth-accuracy", sia.depth_accuracy, "Per-depth overrides, e.g. 0=0.5");
  simulate->add_option("--misroute", sia.misroute, "uniform-other | adjacent-answer");
  simulate->add_option("--trials", sia.trials, "Monte Carlo trials")->check(CLI::PositiveNumber);

  CompareArgs ca;
  auto* compare = app.add_subcommand("compare", "Per-class comparison of two reports");
  compare->add_option("--a", ca.a, "First report (JSON)")->required();
  compare->add_option("--b", ca.b, "Second report (JSON)")->required();

  ReplayArgs rpa;
  auto* replay = app.add_subcommand("replay", "Re-derive a transcript from its recorded responses");
  replay->add_option("--transcript", rpa.transcript, "Transcript to replay")->required();
  replay->add_option("--manifest", rpa.manifest, "Dataset manifest")->required();
  replay->add_option("--tree", rpa.tree, "Tree document");
  replay->add_option("--variants", rpa.variants, "Zero-shot prompt variants file");
  replay->add_option("--descriptions", rpa.descriptions, "Class descriptions file");
  replay->add_flag("--reask", rpa.reask, "The transcript was recorded with re-asking enabled");

  EmitArgs ea;
  auto* emit = app.add_subcommand("emit", "Emit report data as CSV or JSON");
  emit->add_option("--report", ea.report, "Report (JSON)")->required();
  emit->add_option("--format", ea.format, "csv | depth-csv | json");
  emit->add_option("--file", ea.file, "Write here instead of stdout");

  std::vector<std::string> argv_store{"vlmtree"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    init_logging(g.log_level);
    Settings settings;
    settings.load_config(g.config);
    g.seed = settings.get<std::uint64_t>(g.seed_opt, g.seed, "seed", "VLMTREE_SEED", 0);
    g.cache_dir = settings.get<std::string>(g.cache_opt, g.cache_dir, "cache_dir", "VLMTREE_CACHE_DIR", "");
    g.parallelism = settings.get<int>(g.par_opt, g.parallelism, "parallelism", "VLMTREE_PARALLELISM", 1);
    g.out = settings.get<std::string>(g.out_opt, g.out, "out", "VLMTREE_OUT", "");
    if (g.parallelism < 1) throw ConfigError("parallelism must be at least 1");

    if (validate->parsed()) return cmd_validate(va, out, err);
    if (stats->parsed()) return cmd_stats(sa, out);
    if (sample->parsed()) return cmd_sample(sma, g, out);
    if (run->parsed()) return cmd_run(ra, g, settings, out);
    if (verify->parsed()) return cmd_verify(vfa, g, settings, out);
    if (simulate->parsed()) return cmd_simulate(sia, g, out);
    if (compare->parsed()) return cmd_compare(ca, g, out);
    if (replay->parsed()) return cmd_replay(rpa, g, out);
    if (emit->parsed()) return cmd_emit(ea, out);
  } catch (const CacheCorruptionError& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace vlmtree
