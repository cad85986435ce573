#pragma once

// Classification runs: single-shot zero-shot calls and one-branch-per-node
// tree traversal, batched over an experiment matrix.

#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "vlmtree/backends.hpp"
#include "vlmtree/datasets.hpp"
#include "vlmtree/prompting.hpp"
#include "vlmtree/transcript.hpp"
#include "vlmtree/tree.hpp"

namespace vlmtree {

struct EngineOptions {
  std::string model_id;
  PromptOptions prompt;
  bool reask_on_nomatch = false;  // one re-ask per node before failing the image
};

struct InferenceResult {
  TranscriptRecord record;
  int backend_calls = 0;
  int fresh_calls = 0;  // calls not served from the cache

  bool correct() const { return record.correct(); }
};

// One caption per image per backend, shared by every strategy that needs it.
class CaptionStore {
 public:
  // Returns the caption and whether this call produced a fresh backend reply.
  std::pair<std::string, bool> get(Backend& backend, const std::string& image_ref, const std::string& model_id);

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_future<ChatResponse>> entries_;
};

// Caption requests always use temperature 0 and run 0 so they share one cache entry.
ChatRequest caption_request(const std::string& image_ref, const std::string& model_id);

class Engine {
 public:
  Engine(Backend& backend, const ClassSet& classes, std::string task_noun, const DecisionTree* tree = nullptr,
         const ClassDescriptionSet* descriptions = nullptr, EngineOptions options = {});

  InferenceResult zero_shot(const ImageRecord& image, StrategyKind strategy, const PromptVariant& variant,
                            double temperature, int run_index);
  InferenceResult tree(const ImageRecord& image, StrategyKind strategy, double temperature, int run_index);

 private:
  std::string caption_for(const std::string& image_ref, InferenceResult& result);
  ChatResponse call(ChatRequest request, InferenceResult& result);

  Backend& backend_;
  const ClassSet& classes_;
  std::string task_noun_;
  const DecisionTree* tree_;
  const ClassDescriptionSet* descriptions_;
  EngineOptions options_;
  CaptionStore captions_;
  std::vector<int> valid_ids_;
};

// Convenience wrappers over a one-off Engine.
InferenceResult classify_zero_shot(const ImageRecord& image, const ClassSet& classes, std::string_view task_noun,
                                   StrategyKind strategy, const PromptVariant& variant, Backend& backend,
                                   double temperature, int run_index,
                                   const ClassDescriptionSet* descriptions = nullptr,
                                   const EngineOptions& options = {});
InferenceResult classify_tree(const ImageRecord& image, const DecisionTree& tree, StrategyKind strategy,
                              Backend& backend, double temperature, int run_index,
                              const ClassDescriptionSet* descriptions = nullptr, const EngineOptions& options = {});

struct RunConfig {
  const DecisionTree* tree = nullptr;
  std::vector<StrategyKind> strategies;
  std::vector<PromptVariant> variants;  // empty means the baseline only
  std::vector<double> temperatures{0.0};
  int runs = 1;
  int parallelism = 1;
  std::uint64_t seed = 0;
  const ClassDescriptionSet* descriptions = nullptr;
  EngineOptions options;
  std::optional<std::filesystem::path> transcript_path;
};

// Throws ConfigError before any backend call.
void validate_run_config(const RunConfig& config, const DatasetManifest& manifest);

struct BatchCell {
  std::size_t image = 0;
  StrategyKind strategy = StrategyKind::ZeroShot;
  std::optional<std::size_t> variant;
  double temperature = 0.0;
  int run_index = 0;
};

// images x strategies x variants (zero-shot only) x temperatures x runs, in that nesting.
std::vector<BatchCell> expand_cells(const DatasetManifest& manifest, const RunConfig& config);

struct BatchSummary {
  std::size_t cells = 0;
  std::size_t correct = 0;
  std::size_t nomatch = 0;
  std::size_t backend_failures = 0;
  std::uint64_t backend_calls = 0;
  std::uint64_t fresh_calls = 0;
  std::size_t cache_skipped_cells = 0;  // every call of the cell came from the cache
};

struct BatchResult {
  std::vector<TranscriptRecord> records;  // in cell order
  BatchSummary summary;
};

// Parallel across cells (OpenMP, up to config.parallelism threads); each
// traversal stays sequential. Output order never depends on scheduling.
BatchResult run_batch(const DatasetManifest& manifest, const RunConfig& config, Backend& backend);

// Single-threaded reference with identical output.
BatchResult run_batch_serial(const DatasetManifest& manifest, const RunConfig& config, Backend& backend);

}  // namespace vlmtree

namespace vlmtree {

// Truthful scripted answers for every image in the manifest: the caption, each
// question on the image's class path, and the class id for zero-shot prompts.
std::vector<ScriptRule> make_oracle_rules(const DatasetManifest& manifest, const DecisionTree* tree);

// Truthful answers to verification prompts for every class in the tree.
std::vector<ScriptRule> make_verification_oracle_rules(const DecisionTree& tree);

}  // namespace vlmtree
