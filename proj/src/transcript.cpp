#include "vlmtree/transcript.hpp"

#include "vlmtree/errors.hpp"

namespace vlmtree {

namespace {

template <typename T>
Json opt(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

template <typename T>
std::optional<T> get_opt(const Json& obj, const char* key) {
  if (!obj.contains(key) || obj[key].is_null()) return std::nullopt;
  return obj[key].get<T>();
}

Json step_to_json(const TraceStep& s) {
  Json j;
  j["question"] = opt(s.question);
  j["depth"] = s.depth;
  j["prompt_digest"] = s.prompt_digest;
  j["raw_response"] = s.raw_response;
  j["extracted_answer"] = opt(s.extracted_answer);
  j["chosen_branch"] = opt(s.chosen_branch);
  if (s.reask) j["reask"] = {{"prompt_digest", s.reask->prompt_digest}, {"raw_response", s.reask->raw_response}};
  return j;
}

TraceStep step_from_json(const Json& j) {
  TraceStep s;
  s.question = get_opt<std::string>(j, "question");
  s.depth = j.at("depth").get<int>();
  s.prompt_digest = j.at("prompt_digest").get<std::string>();
  s.raw_response = j.at("raw_response").get<std::string>();
  s.extracted_answer = get_opt<std::string>(j, "extracted_answer");
  s.chosen_branch = get_opt<std::string>(j, "chosen_branch");
  if (j.contains("reask") && !j["reask"].is_null())
    s.reask = Reask{j["reask"].at("prompt_digest").get<std::string>(), j["reask"].at("raw_response").get<std::string>()};
  return s;
}

}  // namespace

Json to_json(const TranscriptRecord& r) {
  Json j;
  j["image_ref"] = r.image_ref;
  j["truth_class_id"] = r.truth_class_id;
  j["strategy"] = to_string(r.strategy);
  j["variant_id"] = opt(r.variant_id);
  j["temperature"] = r.temperature;
  j["run_index"] = r.run_index;
  if (r.caption) j["caption"] = *r.caption;
  Json steps = Json::array();
  for (const auto& s : r.steps) steps.push_back(step_to_json(s));
  j["steps"] = std::move(steps);
  j["predicted_class_id"] = opt(r.predicted_class_id);
  j["failure"] = opt(r.failure);
  return j;
}

TranscriptRecord record_from_json(const Json& j, int line_number) {
  try {
    TranscriptRecord r;
    r.image_ref = j.at("image_ref").get<std::string>();
    r.truth_class_id = j.at("truth_class_id").get<int>();
    const auto name = j.at("strategy").get<std::string>();
    auto kind = parse_strategy(name);
    if (!kind) throw ParseError("unknown strategy '" + name + "'", line_number, 1);
    r.strategy = *kind;
    r.variant_id = get_opt<std::string>(j, "variant_id");
    r.temperature = j.at("temperature").get<double>();
    r.run_index = j.at("run_index").get<int>();
    r.caption = get_opt<std::string>(j, "caption");
    for (const auto& s : j.at("steps")) r.steps.push_back(step_from_json(s));
    r.predicted_class_id = get_opt<int>(j, "predicted_class_id");
    r.failure = get_opt<std::string>(j, "failure");
    return r;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("bad transcript record: ") + e.what(), line_number, 1);
  }
}

std::string render_record(const TranscriptRecord& record) { return to_json(record).dump() + "\n"; }

std::string render_transcript(std::span<const TranscriptRecord> records) {
  std::string out;
  for (const auto& r : records) out += render_record(r);
  return out;
}

std::vector<TranscriptRecord> parse_transcript(std::string_view text, std::string_view source_name) {
  std::vector<TranscriptRecord> out;
  for (const auto& line : parse_jsonl(text, source_name)) out.push_back(record_from_json(line.value, line.line_number));
  return out;
}

std::vector<TranscriptRecord> load_transcript(const std::filesystem::path& path) {
  return parse_transcript(read_text_file(path), path.string());
}

}  // namespace vlmtree
