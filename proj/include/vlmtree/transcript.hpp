#pragma once

// Line-delimited run transcripts. One record per (image, strategy, variant,
// temperature, run); field order is fixed so re-emission is byte-identical.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlmtree/prompting.hpp"
#include "vlmtree/util/jsonl.hpp"

namespace vlmtree {

// A second attempt at the same node after an unparseable reply.
struct Reask {
  std::string prompt_digest;
  std::string raw_response;

  bool operator==(const Reask&) const = default;
};

struct TraceStep {
  std::optional<std::string> question;  // null for zero-shot calls
  int depth = 0;
  std::string prompt_digest;  // sha256 hex of the rendered prompt text
  std::string raw_response;
  std::optional<std::string> extracted_answer;
  std::optional<std::string> chosen_branch;  // tree steps only
  std::optional<Reask> reask;

  bool operator==(const TraceStep&) const = default;
};

struct TranscriptRecord {
  std::string image_ref;
  int truth_class_id = 0;
  StrategyKind strategy = StrategyKind::ZeroShot;
  std::optional<std::string> variant_id;  // zero-shot strategies only
  double temperature = 0.0;
  int run_index = 0;
  std::optional<std::string> caption;
  std::vector<TraceStep> steps;
  std::optional<int> predicted_class_id;
  std::optional<std::string> failure;

  bool correct() const { return predicted_class_id && *predicted_class_id == truth_class_id; }
  bool operator==(const TranscriptRecord&) const = default;
};

Json to_json(const TranscriptRecord& record);
TranscriptRecord record_from_json(const Json& value, int line_number = 0);

// One JSON object plus a trailing newline.
std::string render_record(const TranscriptRecord& record);
std::string render_transcript(std::span<const TranscriptRecord> records);

std::vector<TranscriptRecord> parse_transcript(std::string_view text, std::string_view source_name = "transcript");
std::vector<TranscriptRecord> load_transcript(const std::filesystem::path& path);

// Failure reasons written into transcripts.
inline constexpr std::string_view kFailureNoMatch = "nomatch";
inline constexpr std::string_view kFailureBackendPrefix = "backend:";

}  // namespace vlmtree
