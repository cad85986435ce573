#include "vlmtree/prompting.hpp"

#include <spdlog/spdlog.h>

#include <set>

#include "vlmtree/errors.hpp"
#include "vlmtree/util/jsonl.hpp"

namespace vlmtree {

namespace {

constexpr std::string_view kTaskNoun = "{task_noun}";
constexpr std::string_view kClassList = "{class_ids_and_names}";

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size()))
    ++n;
  return n;
}

std::string trim_final_period(std::string_view s) {
  while (!s.empty() && (s.back() == '.' || s.back() == ' ')) s.remove_suffix(1);
  return std::string(s);
}

// Class lines with descriptions, dropping description text once the budget
// is spent. Class ids and names are always kept.
std::string description_lines(const std::vector<ClassLabel>& labels, const ClassDescriptionSet& descriptions,
                              std::size_t budget, std::size_t already_used) {
  std::string out;
  std::size_t used = already_used;
  std::size_t dropped = 0;
  for (const auto& c : labels) {
    std::string line = std::to_string(c.id) + ": " + c.name;
    if (const auto* d = descriptions.find(c.id)) {
      std::string with = line + " (" + trim_final_period(*d) + ")";
      if (used + with.size() + 1 <= budget)
        line = std::move(with);
      else
        ++dropped;
    }
    used += line.size() + 1;
    if (!out.empty()) out += '\n';
    out += line;
  }
  if (dropped > 0)
    spdlog::warn("description budget of {} characters reached; {} class descriptions omitted", budget, dropped);
  return out;
}

}  // namespace

std::string_view to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::ZeroShot: return "zero-shot";
    case StrategyKind::ZeroShotDesc: return "zero-shot-desc";
    case StrategyKind::Tree: return "tree";
    case StrategyKind::TreeHistory: return "tree-history";
    case StrategyKind::TreeDesc: return "tree-desc";
  }
  return "?";
}

std::optional<StrategyKind> parse_strategy(std::string_view name) {
  for (auto k : {StrategyKind::ZeroShot, StrategyKind::ZeroShotDesc, StrategyKind::Tree, StrategyKind::TreeHistory,
                 StrategyKind::TreeDesc})
    if (to_string(k) == name) return k;
  return std::nullopt;
}

bool is_tree_strategy(StrategyKind kind) {
  return kind == StrategyKind::Tree || kind == StrategyKind::TreeHistory || kind == StrategyKind::TreeDesc;
}

bool uses_descriptions(StrategyKind kind) {
  return kind == StrategyKind::ZeroShotDesc || kind == StrategyKind::TreeDesc;
}

PromptVariant baseline_variant() {
  return {"baseline",
          "Please classify the {task_noun} in the given image. It should be only one of these classes: "
          "{class_ids_and_names}. Respond with only the class ID."};
}

void check_variant(const PromptVariant& v) {
  for (auto placeholder : {kTaskNoun, kClassList}) {
    const auto n = count_occurrences(v.template_text, placeholder);
    if (n != 1)
      throw ConfigError("prompt variant '" + v.variant_id + "' must contain " + std::string(placeholder) +
                        " exactly once (found " + std::to_string(n) + ")");
  }
}

std::vector<PromptVariant> parse_prompt_variants(std::string_view text, std::string_view source_name) {
  std::vector<PromptVariant> out;
  std::set<std::string> ids;
  for (const auto& line : parse_jsonl(text, source_name)) {
    const auto& row = line.value;
    if (!row.is_object() || !row.contains("variant_id") || !row.contains("template") ||
        !row["variant_id"].is_string() || !row["template"].is_string())
      throw ParseError(std::string(source_name) + ": expected {\"variant_id\", \"template\"}", line.line_number, 1);
    PromptVariant v{row["variant_id"].get<std::string>(), row["template"].get<std::string>()};
    check_variant(v);
    if (!ids.insert(v.variant_id).second) throw ConfigError("duplicate prompt variant id '" + v.variant_id + "'");
    out.push_back(std::move(v));
  }
  if (out.empty()) throw ConfigError(std::string(source_name) + ": no prompt variants");
  return out;
}

std::vector<PromptVariant> load_prompt_variants(const std::filesystem::path& path) {
  return parse_prompt_variants(read_text_file(path), path.string());
}

std::string render_answer_list(const std::vector<std::string>& answers) {
  std::string out = "[";
  for (std::size_t i = 0; i < answers.size(); ++i) {
    if (i > 0) out += ", ";
    const auto& a = answers[i];
    const bool use_double = a.find('\'') != std::string::npos && a.find('"') == std::string::npos;
    const char q = use_double ? '"' : '\'';
    out += q;
    for (char c : a) {
      if (c == '\\' || c == q) out += '\\';
      out += c;
    }
    out += q;
  }
  out += "]";
  return out;
}

RenderedPrompt build_zero_shot_prompt(const PromptVariant& variant, const ClassSet& classes,
                                      std::string_view task_noun, const DescriptionContext* description,
                                      const PromptOptions& options) {
  check_variant(variant);
  if (classes.empty()) throw ConfigError("zero-shot prompt needs at least one class");

  std::string list;
  std::string preamble;
  if (description != nullptr) {
    if (description->descriptions == nullptr || !description->descriptions->covers(classes))
      throw ConfigError("class descriptions do not cover every class");
    preamble = "Image caption: " + description->caption + "\n\n";
    list = "\n" + description_lines(classes.labels(), *description->descriptions, options.description_budget,
                                    preamble.size());
  } else {
    for (const auto& c : classes) {
      if (!list.empty()) list += ", ";
      list += std::to_string(c.id) + ": " + c.name;
    }
  }

  // Substitute from the back so inserted text is never rescanned.
  std::string text = variant.template_text;
  const auto noun_at = text.find(kTaskNoun);
  const auto list_at = text.find(kClassList);
  if (noun_at > list_at) {
    text.replace(noun_at, kTaskNoun.size(), task_noun);
    text.replace(list_at, kClassList.size(), list);
  } else {
    text.replace(list_at, kClassList.size(), list);
    text.replace(noun_at, kTaskNoun.size(), task_noun);
  }
  return {preamble + text, {}};
}

RenderedPrompt build_node_prompt(const DecisionTree& tree, NodeId node, std::span<const QuestionAnswer> history,
                                 const DescriptionContext* description, const PromptOptions& options) {
  const auto& n = tree.node(node);
  if (n.is_leaf()) throw ConfigError("cannot build a question prompt for a leaf");

  std::string text;
  if (description != nullptr) {
    std::vector<ClassLabel> below;
    for (int id : classes_below(tree, node))
      if (const auto* c = tree.classes().find(id)) below.push_back(*c);
    const bool have_desc = description->descriptions != nullptr && !description->descriptions->empty();
    if (have_desc) {
      text += "Class descriptions:\n";
      text += description_lines(below, *description->descriptions, options.description_budget, 0);
      text += "\n";
    }
    if (!description->caption.empty()) text += "Image caption: " + description->caption + "\n";
    if (!text.empty()) text += "\n";
  }
  if (!history.empty()) {
    text += "Previous decisions:\n";
    for (const auto& step : history) text += "Q: " + step.question + " → A: " + step.answer + "\n";
    text += "\n";
  }
  text += n.question + " Choose one of these answers: " + render_answer_list(n.answers()) + ".";
  return {std::move(text), {}};
}

RenderedPrompt build_caption_prompt() {
  return {"Describe the salient visual content of this image in at most three sentences. Mention shapes, "
          "colors, symbols, and any text or numbers you can see.",
          {}};
}

RenderedPrompt build_tree_generation_prompt(const ClassSet& classes, std::string_view constraints_note) {
  std::string text = "Build a decision tree of visual questions that classifies an image into exactly one of the "
                     "following " +
                     std::to_string(classes.size()) + " classes:\n";
  for (const auto& c : classes) text += std::to_string(c.id) + ": " + c.name + "\n";
  text +=
      "\nConstraints:\n"
      "- No question may be repeated along a single path from the root to a leaf.\n"
      "- Each leaf holds exactly one class, and each class appears at exactly one leaf.\n"
      "- Every question offers at least two distinct, short answers.\n"
      "- Prefer simple visual questions (shape, color) near the root.\n";
  if (!constraints_note.empty()) text += "- " + std::string(constraints_note) + "\n";
  text +=
      "\nRespond with a single JSON document of the form\n"
      "{\"name\": str, \"classes\": [{\"id\": int, \"name\": str}, ...], \"root\": NODE}\n"
      "where NODE is {\"question\": str, \"branches\": {ANSWER: NODE or {\"class_id\": int}, ...}}.";
  return {std::move(text), {}};
}

RenderedPrompt build_verification_prompt(const DecisionTree& tree, NodeId node, std::string_view class_name,
                                         std::span<const QuestionAnswer> history) {
  std::string text = "The image shows an instance of the class \"" + std::string(class_name) +
                     "\". Answer the question for this class.\n\n";
  text += build_node_prompt(tree, node, history).text;
  return {std::move(text), {}};
}

}  // namespace vlmtree
