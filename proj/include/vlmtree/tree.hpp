#pragma once

// Decision trees of natural-language questions. Internal nodes carry a
// question and ordered answer branches; every leaf names one class.

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vlmtree {

struct ClassLabel {
  int id = 0;
  std::string name;

  bool operator==(const ClassLabel&) const = default;
};

// Class labels kept sorted by id. Ids and names are unique.
class ClassSet {
 public:
  ClassSet() = default;
  explicit ClassSet(std::vector<ClassLabel> labels);

  const ClassLabel* find(int id) const;
  const ClassLabel* find_by_name(std::string_view name) const;
  bool contains(int id) const { return find(id) != nullptr; }
  // Throws UnknownClassError.
  const ClassLabel& at(int id) const;

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  auto begin() const { return labels_.begin(); }
  auto end() const { return labels_.end(); }
  const std::vector<ClassLabel>& labels() const { return labels_; }
  std::vector<int> ids() const;

  bool operator==(const ClassSet&) const = default;

 private:
  std::vector<ClassLabel> labels_;
};

struct NodeId {
  std::uint32_t value = 0;

  auto operator<=>(const NodeId&) const = default;
};

inline constexpr NodeId kRootNode{0};

// Locates a node by the answers taken from the root.
using NodePath = std::vector<std::string>;

std::string format_path(const NodePath& path);

struct Branch {
  std::string answer;
  NodeId child;
};

struct TreeNode {
  std::string question;           // empty on leaves
  std::vector<Branch> branches;   // branch order is significant
  std::optional<int> class_id;    // set on leaves only
  int depth = 0;                  // root is level 0
  std::optional<NodeId> parent;

  bool is_leaf() const { return class_id.has_value(); }
  std::vector<std::string> answers() const;
  const Branch* find_branch(std::string_view answer) const;
};

class DecisionTree {
 public:
  DecisionTree(std::string name, ClassSet classes, std::string root_question);

  // Appends a branch from `parent`. Answers and questions must be non-empty.
  NodeId add_node(NodeId parent, std::string answer, std::string question);
  NodeId add_leaf(NodeId parent, std::string answer, int class_id);

  const std::string& name() const { return name_; }
  const ClassSet& classes() const { return classes_; }
  const TreeNode& root() const { return nodes_.front(); }
  const TreeNode& node(NodeId id) const { return nodes_.at(id.value); }
  const std::vector<TreeNode>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  std::optional<NodeId> child(NodeId parent, std::string_view answer) const;
  std::optional<NodeId> resolve(const NodePath& path) const;
  NodePath path_to(NodeId id) const;

  // Escape hatches for building defective trees in tests and tools.
  TreeNode& mutable_node(NodeId id) { return nodes_.at(id.value); }
  void set_classes(ClassSet classes) { classes_ = std::move(classes); }

  // Structural equality: names, classes, and node shapes in branch order.
  bool operator==(const DecisionTree& other) const;

 private:
  NodeId append(NodeId parent, std::string answer, TreeNode node);

  std::string name_;
  ClassSet classes_;
  std::vector<TreeNode> nodes_;
};

// Lowercases ASCII, trims, and collapses whitespace runs to one space.
std::string normalize_text(std::string_view text);

// ---- canonical document -------------------------------------------------

DecisionTree parse_tree(std::string_view document, std::string_view source_name = "tree");
DecisionTree load_tree(const std::string& path);

enum class TreeFormat { Canonical, Listing };

std::string render_tree(const DecisionTree& tree, TreeFormat format);

// ---- validation ---------------------------------------------------------

enum class IssueCode {
  DuplicateQuestionOnPath,
  MissingClass,
  DuplicateLeafClass,
  EmptyBranchSet,
  DuplicateAnswer,
  UnknownClassId,
  SingleChildNode,
};

enum class Severity { Error, Warning };

std::string_view to_string(IssueCode code);

struct ValidationIssue {
  IssueCode code;
  NodePath path;
  std::string detail;
  Severity severity = Severity::Error;
};

std::vector<ValidationIssue> validate_tree(const DecisionTree& tree,
                                           bool allow_duplicate_leaf_classes = false);

bool has_errors(const std::vector<ValidationIssue>& issues);

// ---- queries --------------------------------------------------------------

struct TreeStats {
  int node_count = 0;
  int internal_count = 0;
  int leaf_count = 0;
  int max_depth = 0;
  std::map<int, int> branching_histogram;  // fan-out -> internal nodes
  std::map<int, int> path_lengths;         // class id -> questions on its first path
};

TreeStats tree_stats(const DecisionTree& tree);

struct PathStep {
  NodeId node;
  std::string question;
  std::string answer;
};

struct ClassPath {
  std::vector<PathStep> steps;
  NodeId leaf;
  bool duplicated = false;  // class also appears at a later leaf
};

// First leaf in branch order labelled class_id. Throws UnknownClassError.
ClassPath path_for_class(const DecisionTree& tree, int class_id);

// Class ids reachable below a node, in branch order.
std::vector<int> classes_below(const DecisionTree& tree, NodeId id);

}  // namespace vlmtree
