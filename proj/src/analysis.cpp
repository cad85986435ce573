#include "vlmtree/analysis.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <unordered_map>

#include "vlmtree/extraction.hpp"
#include "vlmtree/prompting.hpp"

namespace vlmtree {

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fixed6(double v) { return fmt::format("{:.6f}", v); }

}  // namespace

std::string percent2(double fraction) { return fmt::format("{:.2f}", fraction * 100.0); }

// ---- knowledge verification ---------------------------------------------------

double VerificationRecord::accuracy() const {
  return questions_total == 0 ? 0.0 : static_cast<double>(questions_correct) / questions_total;
}

VerificationRecord verify_knowledge(const DecisionTree& tree, int class_id, Backend& backend,
                                    const VerificationOptions& options) {
  const ClassPath path = path_for_class(tree, class_id);
  VerificationRecord rec;
  rec.class_id = class_id;
  rec.class_name = tree.classes().at(class_id).name;
  rec.questions_total = static_cast<int>(path.steps.size());

  std::vector<QuestionAnswer> history;
  NodePath locator;
  for (const auto& ps : path.steps) {
    const TreeNode& node = tree.node(ps.node);
    const auto prompt = build_verification_prompt(tree, ps.node, rec.class_name, history);
    ChatRequest req{prompt, std::nullopt, options.temperature, 0, options.model_id,
                    {QueryKind::Verify, locator, class_id}};
    VerificationStep vs;
    vs.question = node.question;
    vs.depth = node.depth;
    vs.truth_answer = ps.answer;
    vs.prompt_digest = sha256_hex(prompt.text);
    try {
      vs.raw_response = backend.send(req).text;
    } catch (const BackendError& e) {
      rec.failure = std::string(kFailureBackendPrefix) + std::string(to_string(e.kind()));
      break;
    }
    const auto answers = node.answers();
    vs.extracted_answer = match_answer(vs.raw_response, answers);
    vs.correct = vs.extracted_answer && *vs.extracted_answer == ps.answer;
    if (vs.correct) ++rec.questions_correct;
    history.push_back({node.question, vs.extracted_answer ? *vs.extracted_answer : vs.raw_response});
    locator.push_back(ps.answer);
    rec.steps.push_back(std::move(vs));
  }
  return rec;
}

VerificationRecord rescore_verification(const DecisionTree& tree, const VerificationRecord& record) {
  const ClassPath path = path_for_class(tree, record.class_id);
  VerificationRecord out = record;
  out.class_name = tree.classes().at(record.class_id).name;
  out.questions_total = static_cast<int>(path.steps.size());
  out.questions_correct = 0;
  if (record.steps.size() > path.steps.size())
    throw ConfigError("verification record for class " + std::to_string(record.class_id) + " has too many steps");
  for (std::size_t i = 0; i < out.steps.size(); ++i) {
    auto& s = out.steps[i];
    const auto& ps = path.steps[i];
    const TreeNode& node = tree.node(ps.node);
    if (s.question != node.question)
      throw ConfigError("verification step " + std::to_string(i) + " of class " + std::to_string(record.class_id) +
                        " does not match the tree");
    s.depth = node.depth;
    s.truth_answer = ps.answer;
    const auto answers = node.answers();
    s.extracted_answer = match_answer(s.raw_response, answers);
    s.correct = s.extracted_answer && *s.extracted_answer == ps.answer;
    if (s.correct) ++out.questions_correct;
  }
  return out;
}

VerificationReport summarize_verification(std::span<const VerificationRecord> records) {
  VerificationReport report;
  for (const auto& r : records) {
    if (!report.per_class.emplace(r.class_id, r).second)
      throw ConfigError("class " + std::to_string(r.class_id) + " verified twice");
  }
  double sum = 0.0;
  for (const auto& [id, r] : report.per_class) {
    sum += r.accuracy();
    if (r.questions_total > 0 && r.questions_correct == r.questions_total) ++report.perfect_class_count;
  }
  report.class_count = static_cast<int>(report.per_class.size());
  report.overall_mean = report.class_count == 0 ? 0.0 : sum / report.class_count;
  return report;
}

Json to_json(const VerificationRecord& r) {
  Json j;
  j["class_id"] = r.class_id;
  j["class_name"] = r.class_name;
  Json steps = Json::array();
  for (const auto& s : r.steps) {
    Json sj;
    sj["question"] = s.question;
    sj["depth"] = s.depth;
    sj["truth_answer"] = s.truth_answer;
    sj["prompt_digest"] = s.prompt_digest;
    sj["raw_response"] = s.raw_response;
    sj["extracted_answer"] = s.extracted_answer ? Json(*s.extracted_answer) : Json(nullptr);
    sj["correct"] = s.correct;
    steps.push_back(std::move(sj));
  }
  j["steps"] = std::move(steps);
  j["questions_total"] = r.questions_total;
  j["questions_correct"] = r.questions_correct;
  j["failure"] = r.failure ? Json(*r.failure) : Json(nullptr);
  return j;
}

VerificationRecord verification_from_json(const Json& j, int line_number) {
  try {
    VerificationRecord r;
    r.class_id = j.at("class_id").get<int>();
    r.class_name = j.at("class_name").get<std::string>();
    for (const auto& sj : j.at("steps")) {
      VerificationStep s;
      s.question = sj.at("question").get<std::string>();
      s.depth = sj.at("depth").get<int>();
      s.truth_answer = sj.at("truth_answer").get<std::string>();
      s.prompt_digest = sj.at("prompt_digest").get<std::string>();
      s.raw_response = sj.at("raw_response").get<std::string>();
      if (!sj.at("extracted_answer").is_null()) s.extracted_answer = sj["extracted_answer"].get<std::string>();
      s.correct = sj.at("correct").get<bool>();
      r.steps.push_back(std::move(s));
    }
    r.questions_total = j.at("questions_total").get<int>();
    r.questions_correct = j.at("questions_correct").get<int>();
    if (j.contains("failure") && !j["failure"].is_null()) r.failure = j["failure"].get<std::string>();
    return r;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("bad verification record: ") + e.what(), line_number, 1);
  }
}

std::string render_verification_transcript(std::span<const VerificationRecord> records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

std::vector<VerificationRecord> parse_verification_transcript(std::string_view text, std::string_view source_name) {
  std::vector<VerificationRecord> out;
  for (const auto& line : parse_jsonl(text, source_name))
    out.push_back(verification_from_json(line.value, line.line_number));
  return out;
}

// ---- evaluation -----------------------------------------------------------------

std::optional<int> first_error_depth(const TranscriptRecord& record, const DecisionTree& tree) {
  if (!tree.classes().contains(record.truth_class_id)) return std::nullopt;
  const ClassPath path = path_for_class(tree, record.truth_class_id);
  for (std::size_t i = 0; i < record.steps.size() && i < path.steps.size(); ++i) {
    const auto& step = record.steps[i];
    if (!step.chosen_branch) return std::nullopt;  // no answer is not a wrong turn
    if (*step.chosen_branch != path.steps[i].answer) return step.depth;
  }
  return std::nullopt;
}

EvaluationReport compute_metrics(std::span<const TranscriptRecord> records, const DatasetManifest& manifest,
                                 const DecisionTree* tree) {
  std::unordered_map<std::string, int> truth;
  truth.reserve(manifest.records.size());
  for (const auto& r : manifest.records) truth.emplace(r.image_ref, r.class_id);

  EvaluationReport report;
  report.classes = manifest.classes;
  for (const auto& c : manifest.classes) report.per_class[c.id] = {};

  std::map<std::pair<int, int>, int> confusion;
  for (const auto& rec : records) {
    auto it = truth.find(rec.image_ref);
    if (it == truth.end()) throw ConfigError("transcript image '" + rec.image_ref + "' is not in the manifest");
    if (it->second != rec.truth_class_id)
      throw ConfigError("transcript truth for '" + rec.image_ref + "' disagrees with the manifest");

    auto& cc = report.per_class[rec.truth_class_id];
    ++cc.n;
    ++report.n_images;
    if (rec.correct()) {
      ++cc.correct;
      ++report.correct;
      continue;
    }
    if (rec.failure) {
      ++report.failure_count;
      if (*rec.failure == kFailureNoMatch) ++report.nomatch_count;
    }
    if (rec.predicted_class_id) ++confusion[{rec.truth_class_id, *rec.predicted_class_id}];
    if (tree != nullptr && is_tree_strategy(rec.strategy))
      if (auto d = first_error_depth(rec, *tree)) ++report.per_depth_first_error[*d];
  }

  report.mean_accuracy = report.n_images == 0 ? 0.0 : static_cast<double>(report.correct) / report.n_images;
  double sum = 0.0;
  int counted = 0;
  for (const auto& [id, cc] : report.per_class)
    if (cc.n > 0) {
      sum += cc.accuracy();
      ++counted;
    }
  report.class_mean_accuracy = counted == 0 ? 0.0 : sum / counted;
  for (const auto& [key, count] : confusion) report.confusion_pairs.push_back({key.first, key.second, count});
  return report;
}

Json to_json(const EvaluationReport& r) {
  Json j;
  j["config"] = r.config;
  Json classes = Json::array();
  for (const auto& c : r.classes) classes.push_back({{"id", c.id}, {"name", c.name}});
  j["classes"] = std::move(classes);
  j["n_images"] = r.n_images;
  j["correct"] = r.correct;
  j["mean_accuracy"] = r.mean_accuracy;
  j["class_mean_accuracy"] = r.class_mean_accuracy;
  Json per_class = Json::array();
  for (const auto& [id, cc] : r.per_class)
    per_class.push_back({{"class_id", id}, {"n", cc.n}, {"correct", cc.correct}, {"accuracy", cc.accuracy()}});
  j["per_class"] = std::move(per_class);
  Json depth = Json::array();
  for (const auto& [d, n] : r.per_depth_first_error) depth.push_back({{"depth", d}, {"count", n}});
  j["per_depth_first_error"] = std::move(depth);
  j["nomatch_count"] = r.nomatch_count;
  j["failure_count"] = r.failure_count;
  Json conf = Json::array();
  for (const auto& p : r.confusion_pairs)
    conf.push_back({{"truth", p.truth}, {"predicted", p.predicted}, {"count", p.count}});
  j["confusion_pairs"] = std::move(conf);
  return j;
}

EvaluationReport report_from_json(const Json& j) {
  try {
    EvaluationReport r;
    r.config = j.value("config", Json::object());
    std::vector<ClassLabel> labels;
    for (const auto& c : j.at("classes")) labels.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
    r.classes = ClassSet(std::move(labels));
    r.n_images = j.at("n_images").get<int>();
    r.correct = j.at("correct").get<int>();
    r.mean_accuracy = j.at("mean_accuracy").get<double>();
    r.class_mean_accuracy = j.at("class_mean_accuracy").get<double>();
    for (const auto& row : j.at("per_class"))
      r.per_class[row.at("class_id").get<int>()] = {row.at("n").get<int>(), row.at("correct").get<int>()};
    for (const auto& row : j.at("per_depth_first_error"))
      r.per_depth_first_error[row.at("depth").get<int>()] = row.at("count").get<int>();
    r.nomatch_count = j.at("nomatch_count").get<int>();
    r.failure_count = j.at("failure_count").get<int>();
    for (const auto& row : j.at("confusion_pairs"))
      r.confusion_pairs.push_back(
          {row.at("truth").get<int>(), row.at("predicted").get<int>(), row.at("count").get<int>()});
    return r;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("bad report document: ") + e.what());
  }
}

// ---- comparison -----------------------------------------------------------------

Comparison compare_strategies(const EvaluationReport& a, const EvaluationReport& b) {
  if (!(a.classes == b.classes)) throw ConfigError("reports cover different class sets");
  Comparison out;
  for (const auto& c : a.classes) {
    ClassComparison row;
    row.class_id = c.id;
    row.class_name = c.name;
    if (auto it = a.per_class.find(c.id); it != a.per_class.end()) row.a = it->second;
    if (auto it = b.per_class.find(c.id); it != b.per_class.end()) row.b = it->second;
    // correct_a / n_a vs correct_b / n_b without rounding
    const long long lhs = static_cast<long long>(row.a.correct) * std::max(row.b.n, 1);
    const long long rhs = static_cast<long long>(row.b.correct) * std::max(row.a.n, 1);
    row.winner = lhs > rhs ? 1 : (lhs < rhs ? -1 : 0);
    row.delta = row.a.accuracy() - row.b.accuracy();
    if (row.winner > 0)
      ++out.wins_a;
    else if (row.winner < 0)
      ++out.wins_b;
    else
      ++out.ties;
    out.rows.push_back(std::move(row));
  }
  out.mean_a = a.class_mean_accuracy;
  out.mean_b = b.class_mean_accuracy;
  out.mean_gap = out.mean_a - out.mean_b;
  return out;
}

// ---- emission -------------------------------------------------------------------

std::string per_class_csv(const EvaluationReport& report) {
  std::string out = "class_id,class_name,n,correct,accuracy\n";
  for (const auto& [id, cc] : report.per_class) {
    const auto* label = report.classes.find(id);
    out += fmt::format("{},{},{},{},{}\n", id, csv_field(label ? label->name : std::string()), cc.n, cc.correct,
                       fixed6(cc.accuracy()));
  }
  return out;
}

std::string per_depth_csv(const EvaluationReport& report) {
  std::string out = "depth,first_error_count\n";
  for (const auto& [d, n] : report.per_depth_first_error) out += fmt::format("{},{}\n", d, n);
  return out;
}

std::string comparison_csv(const Comparison& c) {
  std::string out = "class_id,class_name,n_a,correct_a,accuracy_a,n_b,correct_b,accuracy_b,delta,winner\n";
  for (const auto& r : c.rows) {
    const char* winner = r.winner > 0 ? "a" : (r.winner < 0 ? "b" : "tie");
    out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", r.class_id, csv_field(r.class_name), r.a.n, r.a.correct,
                       fixed6(r.a.accuracy()), r.b.n, r.b.correct, fixed6(r.b.accuracy()), fixed6(r.delta), winner);
  }
  return out;
}

std::string verification_csv(const VerificationReport& report) {
  std::string out = "class_id,class_name,questions_total,questions_correct,accuracy\n";
  for (const auto& [id, r] : report.per_class)
    out += fmt::format("{},{},{},{},{}\n", id, csv_field(r.class_name), r.questions_total, r.questions_correct,
                       fixed6(r.accuracy()));
  return out;
}

}  // namespace vlmtree
