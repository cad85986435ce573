#pragma once

// Metrics over transcripts: knowledge verification, per-class and per-depth
// accuracy, strategy comparison, and report emission.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vlmtree/backends.hpp"
#include "vlmtree/datasets.hpp"
#include "vlmtree/transcript.hpp"
#include "vlmtree/tree.hpp"
#include "vlmtree/util/jsonl.hpp"

namespace vlmtree {

// ---- knowledge verification ---------------------------------------------------

struct VerificationStep {
  std::string question;
  int depth = 0;
  std::string truth_answer;
  std::string prompt_digest;
  std::string raw_response;
  std::optional<std::string> extracted_answer;
  bool correct = false;

  bool operator==(const VerificationStep&) const = default;
};

struct VerificationRecord {
  int class_id = 0;
  std::string class_name;
  std::vector<VerificationStep> steps;
  int questions_total = 0;  // length of the class path
  int questions_correct = 0;
  std::optional<std::string> failure;  // backend error; steps so far are kept

  double accuracy() const;
  bool operator==(const VerificationRecord&) const = default;
};

struct VerificationOptions {
  std::string model_id;
  double temperature = 0.0;
};

// Asks every question on the class's path with the class named in the prompt
// and the model's own earlier answers as history.
VerificationRecord verify_knowledge(const DecisionTree& tree, int class_id, Backend& backend,
                                    const VerificationOptions& options = {});

// Recomputes extracted answers and correctness from the raw responses.
VerificationRecord rescore_verification(const DecisionTree& tree, const VerificationRecord& record);

struct VerificationReport {
  std::map<int, VerificationRecord> per_class;
  double overall_mean = 0.0;  // unweighted mean of per-class accuracies
  int perfect_class_count = 0;
  int class_count = 0;
};

VerificationReport summarize_verification(std::span<const VerificationRecord> records);

Json to_json(const VerificationRecord& record);
VerificationRecord verification_from_json(const Json& value, int line_number = 0);
std::string render_verification_transcript(std::span<const VerificationRecord> records);
std::vector<VerificationRecord> parse_verification_transcript(std::string_view text,
                                                              std::string_view source_name = "verification");

// ---- evaluation -----------------------------------------------------------------

struct ClassCount {
  int n = 0;
  int correct = 0;

  double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / n; }
  bool operator==(const ClassCount&) const = default;
};

struct ConfusionPair {
  int truth = 0;
  int predicted = 0;
  int count = 0;

  bool operator==(const ConfusionPair&) const = default;
};

struct EvaluationReport {
  Json config = Json::object();  // echo of the run settings
  ClassSet classes;
  int n_images = 0;  // transcript records counted
  int correct = 0;
  double mean_accuracy = 0.0;        // correct / n_images
  double class_mean_accuracy = 0.0;  // unweighted mean over classes with records
  std::map<int, ClassCount> per_class;
  std::map<int, int> per_depth_first_error;
  int nomatch_count = 0;
  int failure_count = 0;  // all failures, nomatch included
  std::vector<ConfusionPair> confusion_pairs;  // sorted by (truth, predicted)
};

// Throws ConfigError when a record's image or truth disagrees with the manifest.
// First-error depths need the tree; pass nullptr for zero-shot transcripts.
EvaluationReport compute_metrics(std::span<const TranscriptRecord> records, const DatasetManifest& manifest,
                                 const DecisionTree* tree = nullptr);

// Depth of the first step whose chosen branch leaves the truth path, if any.
std::optional<int> first_error_depth(const TranscriptRecord& record, const DecisionTree& tree);

Json to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const Json& value);

// ---- comparison -----------------------------------------------------------------

struct ClassComparison {
  int class_id = 0;
  std::string class_name;
  ClassCount a;
  ClassCount b;
  int winner = 0;  // +1 a, -1 b, 0 tie (exact rational comparison)
  double delta = 0.0;  // accuracy a - accuracy b
};

struct Comparison {
  std::vector<ClassComparison> rows;
  int wins_a = 0;
  int wins_b = 0;
  int ties = 0;
  double mean_a = 0.0;  // class means
  double mean_b = 0.0;
  double mean_gap = 0.0;
};

// Throws ConfigError on mismatched class sets.
Comparison compare_strategies(const EvaluationReport& a, const EvaluationReport& b);

// ---- emission -------------------------------------------------------------------

std::string per_class_csv(const EvaluationReport& report);
std::string per_depth_csv(const EvaluationReport& report);
std::string comparison_csv(const Comparison& comparison);
std::string verification_csv(const VerificationReport& report);

// Formats a fraction as a percentage with two decimals, e.g. "98.20".
std::string percent2(double fraction);

}  // namespace vlmtree
