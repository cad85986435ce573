#include "vlmtree/engine.hpp"

#include <omp.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <set>

#include "vlmtree/extraction.hpp"
#include "vlmtree/util/hashing.hpp"

namespace vlmtree {

namespace {

std::string reask_suffix(const std::string& choices) {
  return "\n\nYour previous reply could not be matched to an allowed answer. Reply with exactly one of: " + choices +
         ".";
}

std::string id_list(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ", ";
    out += std::to_string(id);
  }
  return out;
}

}  // namespace

ChatRequest caption_request(const std::string& image_ref, const std::string& model_id) {
  ChatRequest req;
  req.prompt = build_caption_prompt();
  req.image_ref = image_ref;
  req.temperature = 0.0;
  req.run_index = 0;
  req.model_id = model_id;
  req.context.kind = QueryKind::Caption;
  return req;
}

std::pair<std::string, bool> CaptionStore::get(Backend& backend, const std::string& image_ref,
                                               const std::string& model_id) {
  std::promise<ChatResponse> promise;
  std::shared_future<ChatResponse> future;
  bool owner = false;
  {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(image_ref);
    if (it == entries_.end()) {
      future = promise.get_future().share();
      entries_.emplace(image_ref, future);
      owner = true;
    } else {
      future = it->second;
    }
  }
  if (owner) {
    try {
      promise.set_value(backend.send(caption_request(image_ref, model_id)));
    } catch (...) {
      promise.set_exception(std::current_exception());
      std::lock_guard lock(mutex_);
      entries_.erase(image_ref);  // let a later cell retry
    }
  }
  const ChatResponse& r = future.get();
  return {r.text, owner && !r.cached};
}

Engine::Engine(Backend& backend, const ClassSet& classes, std::string task_noun, const DecisionTree* tree,
               const ClassDescriptionSet* descriptions, EngineOptions options)
    : backend_(backend),
      classes_(classes),
      task_noun_(std::move(task_noun)),
      tree_(tree),
      descriptions_(descriptions),
      options_(std::move(options)),
      valid_ids_(classes.ids()) {}

ChatResponse Engine::call(ChatRequest request, InferenceResult& result) {
  request.model_id = options_.model_id;
  ChatResponse r = backend_.send(request);
  ++result.backend_calls;
  if (!r.cached) ++result.fresh_calls;
  return r;
}

std::string Engine::caption_for(const std::string& image_ref, InferenceResult& result) {
  auto [text, fresh] = captions_.get(backend_, image_ref, options_.model_id);
  ++result.backend_calls;
  if (fresh) ++result.fresh_calls;
  return text;
}

InferenceResult Engine::zero_shot(const ImageRecord& image, StrategyKind strategy, const PromptVariant& variant,
                                  double temperature, int run_index) {
  if (is_tree_strategy(strategy)) throw ConfigError("zero_shot called with a tree strategy");
  InferenceResult result;
  auto& rec = result.record;
  rec.image_ref = image.image_ref;
  rec.truth_class_id = image.class_id;
  rec.strategy = strategy;
  rec.variant_id = variant.variant_id;
  rec.temperature = temperature;
  rec.run_index = run_index;

  try {
    RenderedPrompt prompt;
    if (uses_descriptions(strategy)) {
      if (descriptions_ == nullptr || descriptions_->empty())
        throw ConfigError(std::string(to_string(strategy)) + " needs class descriptions");
      rec.caption = caption_for(image.image_ref, result);
      DescriptionContext ctx{descriptions_, *rec.caption};
      prompt = build_zero_shot_prompt(variant, classes_, task_noun_, &ctx, options_.prompt);
    } else {
      prompt = build_zero_shot_prompt(variant, classes_, task_noun_, nullptr, options_.prompt);
    }

    ChatRequest req{prompt, image.image_ref, temperature, run_index, {}, {QueryKind::ZeroShot, {}, {}}};
    TraceStep step;
    step.depth = 0;
    step.prompt_digest = sha256_hex(prompt.text);
    step.raw_response = call(req, result).text;
    auto id = match_class_id(step.raw_response, valid_ids_);
    if (!id && options_.reask_on_nomatch) {
      req.prompt.text += reask_suffix(id_list(valid_ids_));
      Reask again{sha256_hex(req.prompt.text), call(req, result).text};
      id = match_class_id(again.raw_response, valid_ids_);
      step.reask = std::move(again);
    }
    if (id) {
      step.extracted_answer = std::to_string(*id);
      rec.predicted_class_id = *id;
    } else {
      rec.failure = std::string(kFailureNoMatch);
    }
    rec.steps.push_back(std::move(step));
  } catch (const BackendError& e) {
    rec.failure = std::string(kFailureBackendPrefix) + std::string(to_string(e.kind()));
    spdlog::warn("{}: {} (cache key {})", image.image_ref, e.what(), e.cache_key());
  }
  return result;
}

InferenceResult Engine::tree(const ImageRecord& image, StrategyKind strategy, double temperature, int run_index) {
  if (!is_tree_strategy(strategy)) throw ConfigError("tree called with a zero-shot strategy");
  if (tree_ == nullptr) throw ConfigError("tree strategy requested without a tree");
  InferenceResult result;
  auto& rec = result.record;
  rec.image_ref = image.image_ref;
  rec.truth_class_id = image.class_id;
  rec.strategy = strategy;
  rec.temperature = temperature;
  rec.run_index = run_index;

  try {
    std::optional<DescriptionContext> desc;
    if (strategy == StrategyKind::TreeDesc) {
      if (descriptions_ == nullptr || descriptions_->empty())
        throw ConfigError("tree-desc needs class descriptions");
      rec.caption = caption_for(image.image_ref, result);
      desc = DescriptionContext{descriptions_, *rec.caption};
    }

    std::vector<QuestionAnswer> history;
    NodePath path;
    NodeId at = kRootNode;
    while (!tree_->node(at).is_leaf()) {
      const TreeNode& node = tree_->node(at);
      std::span<const QuestionAnswer> hist;
      if (strategy == StrategyKind::TreeHistory) hist = history;
      auto prompt = build_node_prompt(*tree_, at, hist, desc ? &*desc : nullptr, options_.prompt);
      const auto answers = node.answers();

      ChatRequest req{prompt, image.image_ref, temperature, run_index, {}, {QueryKind::Node, path, {}}};
      TraceStep step;
      step.question = node.question;
      step.depth = node.depth;
      step.prompt_digest = sha256_hex(prompt.text);
      step.raw_response = call(req, result).text;
      auto match = match_answer(step.raw_response, answers);
      if (!match && options_.reask_on_nomatch) {
        req.prompt.text += reask_suffix(render_answer_list(answers));
        Reask again{sha256_hex(req.prompt.text), call(req, result).text};
        match = match_answer(again.raw_response, answers);
        step.reask = std::move(again);
      }
      if (!match) {
        rec.failure = std::string(kFailureNoMatch);
        rec.steps.push_back(std::move(step));
        break;
      }
      step.extracted_answer = *match;
      step.chosen_branch = *match;
      rec.steps.push_back(std::move(step));
      history.push_back({node.question, *match});
      path.push_back(*match);
      at = node.find_branch(*match)->child;
    }
    if (tree_->node(at).is_leaf()) rec.predicted_class_id = tree_->node(at).class_id;
  } catch (const BackendError& e) {
    rec.failure = std::string(kFailureBackendPrefix) + std::string(to_string(e.kind()));
    spdlog::warn("{}: {} (cache key {})", image.image_ref, e.what(), e.cache_key());
  }
  return result;
}

InferenceResult classify_zero_shot(const ImageRecord& image, const ClassSet& classes, std::string_view task_noun,
                                   StrategyKind strategy, const PromptVariant& variant, Backend& backend,
                                   double temperature, int run_index, const ClassDescriptionSet* descriptions,
                                   const EngineOptions& options) {
  Engine engine(backend, classes, std::string(task_noun), nullptr, descriptions, options);
  return engine.zero_shot(image, strategy, variant, temperature, run_index);
}

InferenceResult classify_tree(const ImageRecord& image, const DecisionTree& tree, StrategyKind strategy,
                              Backend& backend, double temperature, int run_index,
                              const ClassDescriptionSet* descriptions, const EngineOptions& options) {
  Engine engine(backend, tree.classes(), "object", &tree, descriptions, options);
  return engine.tree(image, strategy, temperature, run_index);
}

// ---- batches ------------------------------------------------------------------

void validate_run_config(const RunConfig& config, const DatasetManifest& manifest) {
  if (config.strategies.empty()) throw ConfigError("no strategies selected");
  if (config.runs < 1) throw ConfigError("runs must be at least 1");
  if (config.parallelism < 1) throw ConfigError("parallelism must be at least 1");
  if (config.temperatures.empty()) throw ConfigError("no temperatures selected");
  for (double t : config.temperatures)
    if (!std::isfinite(t) || t < 0.0 || t > 2.0) throw ConfigError("temperature must lie in [0, 2]");
  if (manifest.records.empty()) throw ConfigError("manifest has no records");

  std::set<StrategyKind> seen;
  bool any_tree = false;
  for (auto s : config.strategies) {
    if (!seen.insert(s).second) throw ConfigError("strategy listed twice: " + std::string(to_string(s)));
    any_tree = any_tree || is_tree_strategy(s);
    if (uses_descriptions(s) && (config.descriptions == nullptr || config.descriptions->empty()))
      throw ConfigError(std::string(to_string(s)) + " needs a class description file");
    if (s == StrategyKind::ZeroShotDesc && !config.descriptions->covers(manifest.classes))
      throw ConfigError("class descriptions do not cover every class");
  }
  if (any_tree != (config.tree != nullptr))
    throw ConfigError(any_tree ? "tree strategies need a tree" : "a tree was given but no tree strategy selected");
  if (config.tree != nullptr) {
    for (const auto& c : manifest.classes)
      if (!config.tree->classes().contains(c.id))
        throw ConfigError("manifest class " + std::to_string(c.id) + " is not in the tree's class set");
      else if (config.tree->classes().at(c.id).name != c.name)
        throw ConfigError("manifest class " + std::to_string(c.id) + " (" + c.name + ") is named '" +
                          config.tree->classes().at(c.id).name + "' in the tree");
    if (has_errors(validate_tree(*config.tree, true))) throw ConfigError("tree fails validation");
  }
  std::set<std::string> ids;
  for (const auto& v : config.variants) {
    check_variant(v);
    if (!ids.insert(v.variant_id).second) throw ConfigError("duplicate prompt variant id '" + v.variant_id + "'");
  }
}

std::vector<BatchCell> expand_cells(const DatasetManifest& manifest, const RunConfig& config) {
  const std::size_t n_variants = config.variants.empty() ? 1 : config.variants.size();
  std::vector<BatchCell> cells;
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    for (auto s : config.strategies) {
      const std::size_t nv = is_tree_strategy(s) ? 1 : n_variants;
      for (std::size_t v = 0; v < nv; ++v)
        for (double t : config.temperatures)
          for (int r = 0; r < config.runs; ++r) {
            BatchCell c{i, s, std::nullopt, t, r};
            if (!is_tree_strategy(s)) c.variant = v;
            cells.push_back(c);
          }
    }
  return cells;
}

namespace {

class ProgressLog {
 public:
  explicit ProgressLog(const std::optional<std::filesystem::path>& transcript) {
    if (!transcript) return;
    path_ = *transcript;
    path_ += ".partial";
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    out_.open(path_, std::ios::binary | std::ios::trunc);
  }

  void append(const TranscriptRecord& r) {
    if (!out_.is_open()) return;
    const auto line = render_record(r);
    std::lock_guard lock(mutex_);
    out_ << line;
    out_.flush();
  }

  void finish() {
    if (!out_.is_open()) return;
    out_.close();
    std::filesystem::remove(path_);
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mutex_;
};

InferenceResult run_cell(Engine& engine, const DatasetManifest& manifest, const RunConfig& config,
                         const BatchCell& cell) {
  const auto& image = manifest.records[cell.image];
  if (is_tree_strategy(cell.strategy)) return engine.tree(image, cell.strategy, cell.temperature, cell.run_index);
  const PromptVariant variant = config.variants.empty() ? baseline_variant() : config.variants[*cell.variant];
  return engine.zero_shot(image, cell.strategy, variant, cell.temperature, cell.run_index);
}

BatchResult finish_batch(std::vector<InferenceResult>& results, const RunConfig& config, ProgressLog& progress) {
  BatchResult out;
  out.records.reserve(results.size());
  auto& s = out.summary;
  s.cells = results.size();
  for (auto& r : results) {
    s.correct += r.correct() ? 1 : 0;
    if (r.record.failure) {
      if (*r.record.failure == kFailureNoMatch)
        ++s.nomatch;
      else
        ++s.backend_failures;
    }
    s.backend_calls += static_cast<std::uint64_t>(r.backend_calls);
    s.fresh_calls += static_cast<std::uint64_t>(r.fresh_calls);
    if (r.backend_calls > 0 && r.fresh_calls == 0) ++s.cache_skipped_cells;
    out.records.push_back(std::move(r.record));
  }
  if (config.transcript_path) write_text_file_atomic(*config.transcript_path, render_transcript(out.records));
  progress.finish();
  return out;
}

}  // namespace

BatchResult run_batch_serial(const DatasetManifest& manifest, const RunConfig& config, Backend& backend) {
  validate_run_config(config, manifest);
  const auto cells = expand_cells(manifest, config);
  Engine engine(backend, manifest.classes, manifest.task_noun, config.tree, config.descriptions, config.options);
  ProgressLog progress(config.transcript_path);
  std::vector<InferenceResult> results;
  results.reserve(cells.size());
  for (const auto& cell : cells) {
    results.push_back(run_cell(engine, manifest, config, cell));
    progress.append(results.back().record);
  }
  return finish_batch(results, config, progress);
}

BatchResult run_batch(const DatasetManifest& manifest, const RunConfig& config, Backend& backend) {
  if (config.parallelism <= 1) return run_batch_serial(manifest, config, backend);
  validate_run_config(config, manifest);
  const auto cells = expand_cells(manifest, config);
  Engine engine(backend, manifest.classes, manifest.task_noun, config.tree, config.descriptions, config.options);
  ProgressLog progress(config.transcript_path);
  std::vector<InferenceResult> results(cells.size());

  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::atomic<bool> abort{false};
  const auto n = static_cast<std::int64_t>(cells.size());

#pragma omp parallel for schedule(dynamic) num_threads(config.parallelism)
  for (std::int64_t i = 0; i < n; ++i) {
    if (abort.load(std::memory_order_relaxed)) continue;
    try {
      results[static_cast<std::size_t>(i)] = run_cell(engine, manifest, config, cells[static_cast<std::size_t>(i)]);
      progress.append(results[static_cast<std::size_t>(i)].record);
    } catch (...) {
      std::lock_guard lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
      abort.store(true);
    }
  }
  if (first_error) std::rethrow_exception(first_error);
  return finish_batch(results, config, progress);
}

}  // namespace vlmtree

namespace vlmtree {

namespace {

std::string node_marker(const std::string& question) { return question + " Choose one of these answers:"; }

}  // namespace

std::vector<ScriptRule> make_oracle_rules(const DatasetManifest& manifest, const DecisionTree* tree) {
  std::map<int, ClassPath> paths;
  if (tree != nullptr)
    for (const auto& c : manifest.classes) paths.emplace(c.id, path_for_class(*tree, c.id));
  const std::string caption_text = build_caption_prompt().text;

  std::vector<ScriptRule> rules;
  for (const auto& r : manifest.records) {
    rules.push_back({r.image_ref, {caption_text}, "A photo of a " + manifest.classes.at(r.class_id).name + ".", {}});
    if (tree != nullptr)
      for (const auto& step : paths.at(r.class_id).steps)
        rules.push_back({r.image_ref, {node_marker(step.question)}, step.answer, {}});
    rules.push_back({r.image_ref, {}, std::to_string(r.class_id), {}});
  }
  return rules;
}

std::vector<ScriptRule> make_verification_oracle_rules(const DecisionTree& tree) {
  std::vector<ScriptRule> rules;
  for (const auto& c : tree.classes()) {
    const std::string named = "instance of the class \"" + c.name + "\"";
    for (const auto& step : path_for_class(tree, c.id).steps)
      rules.push_back({std::nullopt, {named, node_marker(step.question)}, step.answer, {}});
  }
  return rules;
}

}  // namespace vlmtree
