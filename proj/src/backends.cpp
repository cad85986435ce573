#include "vlmtree/backends.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "vlmtree/util/jsonl.hpp"

namespace vlmtree {

Sha256Digest image_digest(const std::optional<std::string>& image_ref) {
  if (!image_ref) return sha256(std::string_view("no-image"));
  std::error_code ec;
  if (std::filesystem::is_regular_file(*image_ref, ec)) {
    std::ifstream in(*image_ref, std::ios::binary);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256(bytes);
  }
  return sha256("ref:" + *image_ref);
}

CacheKey make_cache_key(std::string_view backend_id, const ChatRequest& request) {
  Json fields = Json::array();
  fields.push_back(backend_id);
  fields.push_back(request.model_id);
  fields.push_back(request.prompt.text);
  fields.push_back(to_hex(image_digest(request.image_ref)));
  fields.push_back(request.temperature);
  fields.push_back(request.run_index);
  return CacheKey{sha256(fields.dump())};
}

std::string_view to_string(BackendError::Kind kind) {
  switch (kind) {
    case BackendError::Kind::Exhausted: return "exhausted";
    case BackendError::Kind::Auth: return "auth";
    case BackendError::Kind::Malformed: return "malformed";
    case BackendError::Kind::Transport: return "transport";
    case BackendError::Kind::Request: return "request";
    case BackendError::Kind::Script: return "script";
  }
  return "?";
}

namespace {

std::optional<BackendError::Kind> parse_error_kind(std::string_view name) {
  for (auto k : {BackendError::Kind::Exhausted, BackendError::Kind::Auth, BackendError::Kind::Malformed,
                 BackendError::Kind::Transport, BackendError::Kind::Request, BackendError::Kind::Script})
    if (to_string(k) == name) return k;
  return std::nullopt;
}

}  // namespace

ChatResponse Backend::send(const ChatRequest& request) {
  if (!std::isfinite(request.temperature) || request.temperature < 0.0 || request.temperature > 2.0)
    throw ConfigError("temperature must lie in [0, 2]");
  if (request.run_index < 0) throw ConfigError("run_index must be non-negative");
  calls_.fetch_add(1);
  try {
    return do_send(request);
  } catch (BackendError& e) {
    if (e.cache_key().empty()) e.set_cache_key(make_cache_key(id(), request).hex());
    throw;
  }
}

// ---- scripted mock ----------------------------------------------------------

ScriptedBackend::ScriptedBackend(std::vector<ScriptRule> rules, std::optional<std::string> default_response,
                                 std::string backend_id)
    : id_(std::move(backend_id)), default_response_(std::move(default_response)), rule_count_(rules.size()) {
  for (auto& r : rules) {
    if (r.image_ref)
      by_image_[*r.image_ref].push_back(std::move(r));
    else
      unbound_.push_back(std::move(r));
  }
}

ChatResponse ScriptedBackend::do_send(const ChatRequest& request) {
  const auto& text = request.prompt.text;
  auto matches = [&](const ScriptRule& r) {
    return std::all_of(r.match.begin(), r.match.end(),
                       [&](const std::string& m) { return text.find(m) != std::string::npos; });
  };
  const ScriptRule* hit = nullptr;
  if (request.image_ref) {
    if (auto it = by_image_.find(*request.image_ref); it != by_image_.end()) {
      for (const auto& r : it->second)
        if (matches(r)) {
          hit = &r;
          break;
        }
    }
  }
  if (hit == nullptr)
    for (const auto& r : unbound_)
      if (matches(r)) {
        hit = &r;
        break;
      }

  if (hit != nullptr && hit->error)
    throw BackendError(*hit->error, "scripted " + std::string(to_string(*hit->error)) + " failure");
  if (hit == nullptr && !default_response_)
    throw BackendError(BackendError::Kind::Script, "no scripted response for prompt");
  return ChatResponse{hit ? hit->response : *default_response_, 0, id_, false};
}

std::unique_ptr<ScriptedBackend> parse_script(std::string_view text, std::string backend_id) {
  std::vector<ScriptRule> rules;
  std::optional<std::string> fallback;
  for (const auto& line : parse_jsonl(text, "script")) {
    const auto& row = line.value;
    if (!row.is_object()) throw ParseError("script entries must be objects", line.line_number, 1);
    if (row.contains("default")) {
      fallback = row["default"].get<std::string>();
      continue;
    }
    ScriptRule r;
    if (row.contains("image_ref")) r.image_ref = row["image_ref"].get<std::string>();
    if (row.contains("match")) {
      if (row["match"].is_string())
        r.match.push_back(row["match"].get<std::string>());
      else
        r.match = row["match"].get<std::vector<std::string>>();
    }
    if (row.contains("error")) {
      r.error = parse_error_kind(row["error"].get<std::string>());
      if (!r.error) throw ParseError("unknown scripted error kind", line.line_number, 1);
    } else if (row.contains("response")) {
      r.response = row["response"].get<std::string>();
    } else {
      throw ParseError("script entry needs 'response', 'error', or 'default'", line.line_number, 1);
    }
    rules.push_back(std::move(r));
  }
  return std::make_unique<ScriptedBackend>(std::move(rules), std::move(fallback), std::move(backend_id));
}

std::unique_ptr<ScriptedBackend> load_script(const std::filesystem::path& path, std::string backend_id) {
  return parse_script(read_text_file(path), std::move(backend_id));
}

std::string render_script(const std::vector<ScriptRule>& rules) {
  std::string out;
  for (const auto& r : rules) {
    Json row;
    if (r.image_ref) row["image_ref"] = *r.image_ref;
    if (r.match.size() == 1)
      row["match"] = r.match.front();
    else if (!r.match.empty())
      row["match"] = r.match;
    if (r.error)
      row["error"] = to_string(*r.error);
    else
      row["response"] = r.response;
    out += row.dump() + "\n";
  }
  return out;
}

// ---- simulator ----------------------------------------------------------------

std::string_view to_string(MisrouteRule rule) {
  return rule == MisrouteRule::UniformOther ? "uniform-other" : "adjacent-answer";
}

std::optional<MisrouteRule> parse_misroute(std::string_view name) {
  if (name == "uniform-other") return MisrouteRule::UniformOther;
  if (name == "adjacent-answer") return MisrouteRule::AdjacentAnswer;
  return std::nullopt;
}

double ErrorModel::accuracy_at(int depth) const {
  auto it = per_depth_accuracy.find(depth);
  return it == per_depth_accuracy.end() ? default_accuracy : it->second;
}

void ErrorModel::validate() const {
  auto ok = [](double p) { return std::isfinite(p) && p >= 0.0 && p <= 1.0; };
  if (!ok(default_accuracy)) throw ConfigError("default accuracy must lie in [0, 1]");
  for (const auto& [depth, p] : per_depth_accuracy)
    if (!ok(p)) throw ConfigError("accuracy at depth " + std::to_string(depth) + " must lie in [0, 1]");
}

std::string simulate_answer(const ErrorModel& model, const TreeNode& node, std::string_view truth_answer,
                            std::mt19937_64& rng) {
  const auto& branches = node.branches;
  auto truth = std::find_if(branches.begin(), branches.end(),
                            [&](const Branch& b) { return b.answer == truth_answer; });
  if (truth == branches.end())
    throw ConfigError("truth answer '" + std::string(truth_answer) + "' is not a branch of '" + node.question + "'");

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < model.accuracy_at(node.depth) || branches.size() < 2) return truth->answer;

  const auto truth_index = static_cast<std::size_t>(truth - branches.begin());
  if (model.misroute == MisrouteRule::AdjacentAnswer) return branches[(truth_index + 1) % branches.size()].answer;

  std::uniform_int_distribution<std::size_t> pick(0, branches.size() - 2);
  std::size_t i = pick(rng);
  if (i >= truth_index) ++i;
  return branches[i].answer;
}

SimulatorBackend::SimulatorBackend(const DecisionTree* tree, ClassSet classes,
                                   std::unordered_map<std::string, int> truth, ErrorModel model, std::uint64_t seed,
                                   std::string backend_id)
    : id_(std::move(backend_id)),
      tree_(tree),
      classes_(std::move(classes)),
      truth_(std::move(truth)),
      model_(std::move(model)),
      seed_(seed) {
  model_.validate();
  if (tree_ != nullptr)
    for (int id : classes_below(*tree_, kRootNode))
      if (!paths_.contains(id)) paths_.emplace(id, path_for_class(*tree_, id));
}

std::string SimulatorBackend::answer_node(const NodePath& path, int truth_class, std::mt19937_64& rng) const {
  if (tree_ == nullptr) throw BackendError(BackendError::Kind::Request, "simulator has no tree");
  const auto id = tree_->resolve(path);
  if (!id || tree_->node(*id).is_leaf())
    throw BackendError(BackendError::Kind::Request, "node " + format_path(path) + " is not a question");
  const auto& node = tree_->node(*id);

  // On the truth path the correct answer is the next step; off it there is
  // no correct answer and the simulated model picks uniformly.
  auto it = paths_.find(truth_class);
  if (it != paths_.end()) {
    const auto& steps = it->second.steps;
    const std::size_t depth = path.size();
    const bool on_path = depth < steps.size() &&
                         std::equal(path.begin(), path.end(), steps.begin(),
                                    [](const std::string& a, const PathStep& s) { return a == s.answer; });
    if (on_path) return simulate_answer(model_, node, steps[depth].answer, rng);
  }
  std::uniform_int_distribution<std::size_t> pick(0, node.branches.size() - 1);
  return node.branches[pick(rng)].answer;
}

ChatResponse SimulatorBackend::do_send(const ChatRequest& request) {
  std::mt19937_64 rng(mix_seed(seed_, make_cache_key(id_, request).digest));
  const auto& ctx = request.context;

  int truth_class = -1;
  if (ctx.truth_class_id) {
    truth_class = *ctx.truth_class_id;
  } else if (request.image_ref) {
    auto it = truth_.find(*request.image_ref);
    if (it != truth_.end()) truth_class = it->second;
  }

  std::string text;
  switch (ctx.kind) {
    case QueryKind::Caption:
      text = "A simulated caption of the image.";
      break;
    case QueryKind::ZeroShot: {
      if (truth_class < 0 || !classes_.contains(truth_class))
        throw BackendError(BackendError::Kind::Request, "simulator has no truth for this image");
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      int answer = truth_class;
      if (classes_.size() > 1 && unit(rng) >= model_.default_accuracy) {
        std::uniform_int_distribution<std::size_t> pick(0, classes_.size() - 2);
        std::size_t i = pick(rng);
        const auto& labels = classes_.labels();
        if (labels[i].id >= truth_class) ++i;
        answer = labels[i].id;
      }
      text = std::to_string(answer);
      break;
    }
    case QueryKind::Node:
    case QueryKind::Verify:
      if (!ctx.node) throw BackendError(BackendError::Kind::Request, "node query without a node locator");
      if (truth_class < 0) throw BackendError(BackendError::Kind::Request, "simulator has no truth for this image");
      text = answer_node(*ctx.node, truth_class, rng);
      break;
    case QueryKind::Other:
      throw BackendError(BackendError::Kind::Request, "simulator cannot answer free-form prompts");
  }
  return ChatResponse{std::move(text), 0, id_, false};
}

// ---- replay -----------------------------------------------------------------

std::string ReplayBackend::key(const std::optional<std::string>& image_ref, double temperature, int run_index,
                               const std::string& prompt_digest) {
  Json k = Json::array({image_ref ? *image_ref : std::string(), temperature, run_index, prompt_digest});
  return k.dump();
}

void ReplayBackend::record(const std::optional<std::string>& image_ref, double temperature, int run_index,
                           const std::string& prompt_digest, std::string response) {
  responses_[key(image_ref, temperature, run_index, prompt_digest)] = std::move(response);
}

ChatResponse ReplayBackend::do_send(const ChatRequest& request) {
  const auto digest = sha256_hex(request.prompt.text);
  auto it = responses_.find(key(request.image_ref, request.temperature, request.run_index, digest));
  if (it == responses_.end())
    throw BackendError(BackendError::Kind::Script, "no recorded response for prompt digest " + digest);
  return ChatResponse{it->second, 0, id_, false};
}

}  // namespace vlmtree
