#include "vlmtree/tree.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <set>
#include <sstream>
#include <unordered_set>

#include "vlmtree/errors.hpp"
#include "vlmtree/util/jsonl.hpp"

namespace vlmtree {

// ---- ClassSet -------------------------------------------------------------

ClassSet::ClassSet(std::vector<ClassLabel> labels) : labels_(std::move(labels)) {
  std::sort(labels_.begin(), labels_.end(),
            [](const ClassLabel& a, const ClassLabel& b) { return a.id < b.id; });
  std::set<std::string> names;
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    const auto& label = labels_[i];
    if (label.id < 0) throw Error("class id must be non-negative: " + std::to_string(label.id));
    if (label.name.empty()) throw Error("class " + std::to_string(label.id) + " has an empty name");
    if (i > 0 && labels_[i - 1].id == label.id)
      throw Error("duplicate class id " + std::to_string(label.id));
    if (!names.insert(label.name).second) throw Error("duplicate class name '" + label.name + "'");
  }
}

const ClassLabel* ClassSet::find(int id) const {
  auto it = std::lower_bound(labels_.begin(), labels_.end(), id,
                             [](const ClassLabel& l, int v) { return l.id < v; });
  return it != labels_.end() && it->id == id ? &*it : nullptr;
}

const ClassLabel* ClassSet::find_by_name(std::string_view name) const {
  for (const auto& l : labels_)
    if (l.name == name) return &l;
  return nullptr;
}

const ClassLabel& ClassSet::at(int id) const {
  if (const auto* l = find(id)) return *l;
  throw UnknownClassError(id);
}

std::vector<int> ClassSet::ids() const {
  std::vector<int> out;
  out.reserve(labels_.size());
  for (const auto& l : labels_) out.push_back(l.id);
  return out;
}

// ---- nodes ----------------------------------------------------------------

std::string format_path(const NodePath& path) {
  if (path.empty()) return "<root>";
  std::string out;
  for (const auto& a : path) {
    if (!out.empty()) out += " > ";
    out += a;
  }
  return out;
}

std::vector<std::string> TreeNode::answers() const {
  std::vector<std::string> out;
  out.reserve(branches.size());
  for (const auto& b : branches) out.push_back(b.answer);
  return out;
}

const Branch* TreeNode::find_branch(std::string_view answer) const {
  for (const auto& b : branches)
    if (b.answer == answer) return &b;
  return nullptr;
}

DecisionTree::DecisionTree(std::string name, ClassSet classes, std::string root_question)
    : name_(std::move(name)), classes_(std::move(classes)) {
  if (root_question.empty()) throw Error("root question must be non-empty");
  TreeNode root;
  root.question = std::move(root_question);
  nodes_.push_back(std::move(root));
}

NodeId DecisionTree::append(NodeId parent, std::string answer, TreeNode node) {
  if (answer.empty()) throw Error("branch answers must be non-empty");
  auto& p = nodes_.at(parent.value);
  if (p.is_leaf()) throw Error("cannot add a branch below a leaf");
  node.depth = p.depth + 1;
  node.parent = parent;
  const NodeId id{static_cast<std::uint32_t>(nodes_.size())};
  nodes_[parent.value].branches.push_back({std::move(answer), id});
  nodes_.push_back(std::move(node));
  return id;
}

NodeId DecisionTree::add_node(NodeId parent, std::string answer, std::string question) {
  if (question.empty()) throw Error("questions must be non-empty");
  TreeNode node;
  node.question = std::move(question);
  return append(parent, std::move(answer), std::move(node));
}

NodeId DecisionTree::add_leaf(NodeId parent, std::string answer, int class_id) {
  TreeNode node;
  node.class_id = class_id;
  return append(parent, std::move(answer), std::move(node));
}

std::optional<NodeId> DecisionTree::child(NodeId parent, std::string_view answer) const {
  if (const auto* b = node(parent).find_branch(answer)) return b->child;
  return std::nullopt;
}

std::optional<NodeId> DecisionTree::resolve(const NodePath& path) const {
  NodeId at = kRootNode;
  for (const auto& answer : path) {
    auto next = child(at, answer);
    if (!next) return std::nullopt;
    at = *next;
  }
  return at;
}

NodePath DecisionTree::path_to(NodeId id) const {
  NodePath path;
  for (auto at = id; node(at).parent;) {
    const NodeId parent = *node(at).parent;
    for (const auto& b : node(parent).branches) {
      if (b.child == at) {
        path.push_back(b.answer);
        break;
      }
    }
    at = parent;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

bool DecisionTree::operator==(const DecisionTree& other) const {
  if (name_ != other.name_ || classes_ != other.classes_) return false;
  std::function<bool(NodeId, NodeId)> same = [&](NodeId a, NodeId b) {
    const auto& x = node(a);
    const auto& y = other.node(b);
    if (x.question != y.question || x.class_id != y.class_id || x.depth != y.depth ||
        x.branches.size() != y.branches.size())
      return false;
    for (std::size_t i = 0; i < x.branches.size(); ++i) {
      if (x.branches[i].answer != y.branches[i].answer) return false;
      if (!same(x.branches[i].child, y.branches[i].child)) return false;
    }
    return true;
  };
  return same(kRootNode, kRootNode);
}

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

// ---- canonical document -----------------------------------------------------

namespace {

const Json& require(const Json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw ParseError("missing field '" + std::string(key) + "' at " + where);
  return obj.at(key);
}

void parse_node_into(DecisionTree& tree, NodeId id, const Json& doc, NodePath& path) {
  const std::string where = format_path(path);
  const auto& branches = require(doc, "branches", where);
  if (!branches.is_object()) throw ParseError("'branches' must be an object at " + where);
  if (branches.empty()) throw ParseError("empty branch set at " + where);
  for (const auto& [answer, target] : branches.items()) {
    if (answer.empty()) throw ParseError("empty answer at " + where);
    if (!target.is_object()) throw ParseError("branch '" + answer + "' must be an object at " + where);
    path.push_back(answer);
    if (target.contains("class_id")) {
      const auto& cid = target.at("class_id");
      if (!cid.is_number_integer()) throw ParseError("class_id must be an integer at " + format_path(path));
      const int class_id = cid.get<int>();
      if (!tree.classes().contains(class_id))
        throw UnknownClassError(class_id, "leaf at " + format_path(path));
      tree.add_leaf(id, answer, class_id);
    } else {
      const auto& q = require(target, "question", format_path(path));
      if (!q.is_string() || q.get<std::string>().empty())
        throw ParseError("question must be a non-empty string at " + format_path(path));
      const NodeId child = tree.add_node(id, answer, q.get<std::string>());
      parse_node_into(tree, child, target, path);
    }
    path.pop_back();
  }
}

Json render_node(const DecisionTree& tree, NodeId id) {
  const auto& n = tree.node(id);
  Json out;
  if (n.is_leaf()) {
    out["class_id"] = *n.class_id;
    return out;
  }
  out["question"] = n.question;
  Json branches = Json::object();
  for (const auto& b : n.branches) branches[b.answer] = render_node(tree, b.child);
  out["branches"] = std::move(branches);
  return out;
}

// Rejects duplicate keys, which an object representation would silently merge.
Json parse_rejecting_duplicate_keys(std::string_view document, std::string_view source_name) {
  std::vector<std::set<std::string>> seen;
  std::string duplicate;
  Json::parser_callback_t cb = [&](int, Json::parse_event_t event, Json& parsed) {
    switch (event) {
      case Json::parse_event_t::object_start:
        seen.emplace_back();
        break;
      case Json::parse_event_t::object_end:
        if (!seen.empty()) seen.pop_back();
        break;
      case Json::parse_event_t::key:
        if (!seen.empty() && !seen.back().insert(parsed.get<std::string>()).second && duplicate.empty())
          duplicate = parsed.get<std::string>();
        break;
      default:
        break;
    }
    return true;
  };
  Json doc;
  try {
    doc = Json::parse(document, cb);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t at = e.byte > 0 ? e.byte - 1 : 0;
    auto [line, column] = line_column_at(document, at);
    throw ParseError(std::string(source_name) + ": " + e.what(), line, column);
  }
  if (!duplicate.empty()) throw ParseError(std::string(source_name) + ": duplicate key '" + duplicate + "'");
  return doc;
}

}  // namespace

DecisionTree parse_tree(std::string_view document, std::string_view source_name) {
  const Json doc = parse_rejecting_duplicate_keys(document, source_name);
  if (!doc.is_object()) throw ParseError(std::string(source_name) + ": top level must be an object", 1, 1);

  const auto& classes_doc = require(doc, "classes", "top level");
  if (!classes_doc.is_array()) throw ParseError("'classes' must be an array");
  std::vector<ClassLabel> labels;
  for (const auto& c : classes_doc) {
    const auto& id = require(c, "id", "classes");
    const auto& name = require(c, "name", "classes");
    if (!id.is_number_integer() || !name.is_string())
      throw ParseError("class entries need integer 'id' and string 'name'");
    labels.push_back({id.get<int>(), name.get<std::string>()});
  }
  ClassSet classes;
  try {
    classes = ClassSet(std::move(labels));
  } catch (const Error& e) {
    throw ParseError(std::string(source_name) + ": " + e.what());
  }

  const auto& name = require(doc, "name", "top level");
  const auto& root = require(doc, "root", "top level");
  const auto& question = require(root, "question", "<root>");
  if (!name.is_string()) throw ParseError("'name' must be a string");
  if (!question.is_string() || question.get<std::string>().empty())
    throw ParseError("root question must be a non-empty string");

  DecisionTree tree(name.get<std::string>(), std::move(classes), question.get<std::string>());
  NodePath path;
  parse_node_into(tree, kRootNode, root, path);
  return tree;
}

DecisionTree load_tree(const std::string& path) { return parse_tree(read_text_file(path), path); }

namespace {

void render_listing(const DecisionTree& tree, NodeId id, std::ostringstream& out) {
  const auto& n = tree.node(id);
  const std::string indent(static_cast<std::size_t>(n.depth) * 4, ' ');
  out << indent << "[L" << n.depth << "] Q: " << n.question << '\n';
  for (const auto& b : n.branches) {
    const auto& c = tree.node(b.child);
    out << indent << "  -> " << b.answer << ':';
    if (c.is_leaf()) {
      const auto* label = tree.classes().find(*c.class_id);
      out << " [L" << c.depth << "] Leaf Node: " << (label ? label->name : "?") << " (ID: " << *c.class_id
          << ")\n";
    } else {
      out << '\n';
      render_listing(tree, b.child, out);
    }
  }
}

}  // namespace

std::string render_tree(const DecisionTree& tree, TreeFormat format) {
  if (format == TreeFormat::Listing) {
    std::ostringstream out;
    render_listing(tree, kRootNode, out);
    return out.str();
  }
  Json doc;
  doc["name"] = tree.name();
  Json classes = Json::array();
  for (const auto& c : tree.classes()) classes.push_back(Json{{"id", c.id}, {"name", c.name}});
  doc["classes"] = std::move(classes);
  doc["root"] = render_node(tree, kRootNode);
  return doc.dump(2) + "\n";
}

// ---- validation -------------------------------------------------------------

std::string_view to_string(IssueCode code) {
  switch (code) {
    case IssueCode::DuplicateQuestionOnPath: return "DuplicateQuestionOnPath";
    case IssueCode::MissingClass: return "MissingClass";
    case IssueCode::DuplicateLeafClass: return "DuplicateLeafClass";
    case IssueCode::EmptyBranchSet: return "EmptyBranchSet";
    case IssueCode::DuplicateAnswer: return "DuplicateAnswer";
    case IssueCode::UnknownClassId: return "UnknownClassId";
    case IssueCode::SingleChildNode: return "SingleChildNode";
  }
  return "?";
}

std::vector<ValidationIssue> validate_tree(const DecisionTree& tree, bool allow_duplicate_leaf_classes) {
  std::vector<ValidationIssue> issues;
  std::map<int, NodeId> first_leaf;
  std::vector<std::string> ancestors;  // normalized questions on the current path

  std::function<void(NodeId)> visit = [&](NodeId id) {
    const auto& n = tree.node(id);
    if (n.is_leaf()) {
      const int cid = *n.class_id;
      if (!tree.classes().contains(cid)) {
        issues.push_back({IssueCode::UnknownClassId, tree.path_to(id), "class id " + std::to_string(cid)});
      } else if (auto [it, inserted] = first_leaf.emplace(cid, id); !inserted) {
        issues.push_back({IssueCode::DuplicateLeafClass, tree.path_to(id),
                          "class " + std::to_string(cid) + " already at " + format_path(tree.path_to(it->second)),
                          allow_duplicate_leaf_classes ? Severity::Warning : Severity::Error});
      }
      return;
    }
    const std::string q = normalize_text(n.question);
    if (std::find(ancestors.begin(), ancestors.end(), q) != ancestors.end())
      issues.push_back({IssueCode::DuplicateQuestionOnPath, tree.path_to(id), n.question});
    if (n.branches.empty())
      issues.push_back({IssueCode::EmptyBranchSet, tree.path_to(id), n.question});
    else if (n.branches.size() == 1)
      issues.push_back({IssueCode::SingleChildNode, tree.path_to(id), n.question});

    std::set<std::string> answers;
    for (const auto& b : n.branches) {
      if (!answers.insert(normalize_text(b.answer)).second)
        issues.push_back({IssueCode::DuplicateAnswer, tree.path_to(id), "answer '" + b.answer + "'"});
    }
    ancestors.push_back(q);
    for (const auto& b : n.branches) visit(b.child);
    ancestors.pop_back();
  };
  visit(kRootNode);

  for (const auto& c : tree.classes())
    if (!first_leaf.contains(c.id))
      issues.push_back({IssueCode::MissingClass, {}, "class " + std::to_string(c.id) + " (" + c.name + ")"});
  return issues;
}

bool has_errors(const std::vector<ValidationIssue>& issues) {
  return std::any_of(issues.begin(), issues.end(),
                     [](const ValidationIssue& i) { return i.severity == Severity::Error; });
}

// ---- queries ----------------------------------------------------------------

TreeStats tree_stats(const DecisionTree& tree) {
  TreeStats s;
  std::function<void(NodeId)> visit = [&](NodeId id) {
    const auto& n = tree.node(id);
    ++s.node_count;
    s.max_depth = std::max(s.max_depth, n.depth);
    if (n.is_leaf()) {
      ++s.leaf_count;
      s.path_lengths.emplace(*n.class_id, n.depth);
      return;
    }
    ++s.internal_count;
    ++s.branching_histogram[static_cast<int>(n.branches.size())];
    for (const auto& b : n.branches) visit(b.child);
  };
  visit(kRootNode);
  return s;
}

ClassPath path_for_class(const DecisionTree& tree, int class_id) {
  std::optional<NodeId> found;
  bool duplicated = false;
  std::function<void(NodeId)> visit = [&](NodeId id) {
    const auto& n = tree.node(id);
    if (n.is_leaf()) {
      if (*n.class_id == class_id) {
        if (found)
          duplicated = true;
        else
          found = id;
      }
      return;
    }
    for (const auto& b : n.branches) visit(b.child);
  };
  visit(kRootNode);
  if (!found) throw UnknownClassError(class_id, "no leaf in tree '" + tree.name() + "'");

  ClassPath out;
  out.leaf = *found;
  out.duplicated = duplicated;
  const NodePath answers = tree.path_to(*found);
  NodeId at = kRootNode;
  for (const auto& a : answers) {
    out.steps.push_back({at, tree.node(at).question, a});
    at = *tree.child(at, a);
  }
  return out;
}

std::vector<int> classes_below(const DecisionTree& tree, NodeId id) {
  std::vector<int> out;
  std::function<void(NodeId)> visit = [&](NodeId at) {
    const auto& n = tree.node(at);
    if (n.is_leaf()) {
      if (std::find(out.begin(), out.end(), *n.class_id) == out.end()) out.push_back(*n.class_id);
      return;
    }
    for (const auto& b : n.branches) visit(b.child);
  };
  visit(id);
  return out;
}

}  // namespace vlmtree
