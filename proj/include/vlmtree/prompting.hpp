#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlmtree/datasets.hpp"
#include "vlmtree/tree.hpp"

namespace vlmtree {

enum class StrategyKind { ZeroShot, ZeroShotDesc, Tree, TreeHistory, TreeDesc };

std::string_view to_string(StrategyKind kind);
std::optional<StrategyKind> parse_strategy(std::string_view name);
bool is_tree_strategy(StrategyKind kind);
bool uses_descriptions(StrategyKind kind);

struct PromptVariant {
  std::string variant_id;
  std::string template_text;  // holds {task_noun} and {class_ids_and_names} once each
};

// The baseline single-shot template.
PromptVariant baseline_variant();

// Throws ConfigError naming the variant when a placeholder is missing or repeated.
void check_variant(const PromptVariant& variant);

std::vector<PromptVariant> parse_prompt_variants(std::string_view text, std::string_view source_name = "variants");
std::vector<PromptVariant> load_prompt_variants(const std::filesystem::path& path);

struct RenderedPrompt {
  std::string text;
  std::vector<std::string> attachments;  // image refs, at most one

  bool operator==(const RenderedPrompt&) const = default;
};

struct PromptOptions {
  // Upper bound on the characters spent on class descriptions and caption.
  std::size_t description_budget = 8000;
};

struct DescriptionContext {
  const ClassDescriptionSet* descriptions = nullptr;
  std::string caption;
};

struct QuestionAnswer {
  std::string question;
  std::string answer;
};

RenderedPrompt build_zero_shot_prompt(const PromptVariant& variant, const ClassSet& classes,
                                      std::string_view task_noun,
                                      const DescriptionContext* description = nullptr,
                                      const PromptOptions& options = {});

// "{question} Choose one of these answers: [...]." with optional history and
// description blocks in front. Descriptions cover the classes below the node.
RenderedPrompt build_node_prompt(const DecisionTree& tree, NodeId node,
                                 std::span<const QuestionAnswer> history = {},
                                 const DescriptionContext* description = nullptr,
                                 const PromptOptions& options = {});

RenderedPrompt build_caption_prompt();

// Asks an LLM to draft a tree in the canonical document format.
RenderedPrompt build_tree_generation_prompt(const ClassSet& classes, std::string_view constraints_note = {});

// Knowledge probe: the class is named up front and the running history of
// the model's own answers precedes the question.
RenderedPrompt build_verification_prompt(const DecisionTree& tree, NodeId node, std::string_view class_name,
                                         std::span<const QuestionAnswer> history);

// ['a', 'b'] with Python-style quoting.
std::string render_answer_list(const std::vector<std::string>& answers);

}  // namespace vlmtree
