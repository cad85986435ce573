#pragma once

// Chat-vision backends. Every backend answers a rendered prompt plus an
// optional image; send() must be safe to call from several threads.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <semaphore>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vlmtree/errors.hpp"
#include "vlmtree/prompting.hpp"
#include "vlmtree/tree.hpp"
#include "vlmtree/util/hashing.hpp"

namespace vlmtree {

enum class QueryKind { Other, ZeroShot, Caption, Node, Verify };

// Hints for simulated backends. Not part of the cache key; live backends
// ignore them.
struct QueryContext {
  QueryKind kind = QueryKind::Other;
  std::optional<NodePath> node;
  std::optional<int> truth_class_id;  // Verify queries name the class in the prompt
};

struct ChatRequest {
  RenderedPrompt prompt;
  std::optional<std::string> image_ref;
  double temperature = 0.0;
  int run_index = 0;
  std::string model_id;
  QueryContext context;
};

struct ChatResponse {
  std::string text;
  std::int64_t latency_ms = 0;
  std::string backend_id;
  bool cached = false;
};

struct CacheKey {
  Sha256Digest digest{};

  std::string hex() const { return to_hex(digest); }
  bool operator==(const CacheKey&) const = default;
};

// Digest of the image bytes when image_ref names a readable file, otherwise
// of the reference string itself.
Sha256Digest image_digest(const std::optional<std::string>& image_ref);

CacheKey make_cache_key(std::string_view backend_id, const ChatRequest& request);

class BackendError : public Error {
 public:
  enum class Kind { Exhausted, Auth, Malformed, Transport, Request, Script };

  BackendError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }
  const std::string& cache_key() const noexcept { return cache_key_; }
  void set_cache_key(std::string key) { cache_key_ = std::move(key); }

 private:
  Kind kind_;
  std::string cache_key_;
};

std::string_view to_string(BackendError::Kind kind);

class Backend {
 public:
  virtual ~Backend() = default;

  virtual std::string id() const = 0;

  // Validates the request, counts the call, and tags errors with the cache key.
  ChatResponse send(const ChatRequest& request);

  std::uint64_t call_count() const { return calls_.load(); }

 protected:
  virtual ChatResponse do_send(const ChatRequest& request) = 0;

 private:
  std::atomic<std::uint64_t> calls_{0};
};

// ---- scripted mock --------------------------------------------------------

// Rules are tried in order: rules bound to the request's image first, then
// unbound rules. A rule matches when every one of its substrings occurs in
// the prompt text.
struct ScriptRule {
  std::optional<std::string> image_ref;
  std::vector<std::string> match;
  std::string response;
  std::optional<BackendError::Kind> error;  // raise instead of answering
};

class ScriptedBackend : public Backend {
 public:
  explicit ScriptedBackend(std::vector<ScriptRule> rules, std::optional<std::string> default_response = {},
                           std::string backend_id = "mock");

  std::string id() const override { return id_; }
  std::size_t rule_count() const { return rule_count_; }

 protected:
  ChatResponse do_send(const ChatRequest& request) override;

 private:
  std::string id_;
  std::unordered_map<std::string, std::vector<ScriptRule>> by_image_;
  std::vector<ScriptRule> unbound_;
  std::optional<std::string> default_response_;
  std::size_t rule_count_ = 0;
};

// JSONL: {"image_ref"?, "match"?: str|[str], "response"} or {"default": str}
// or {..., "error": "transport"|"auth"|...}.
std::unique_ptr<ScriptedBackend> load_script(const std::filesystem::path& path, std::string backend_id = "mock");
std::unique_ptr<ScriptedBackend> parse_script(std::string_view text, std::string backend_id = "mock");
std::string render_script(const std::vector<ScriptRule>& rules);

// ---- stochastic simulator ---------------------------------------------------

enum class MisrouteRule { UniformOther, AdjacentAnswer };

std::string_view to_string(MisrouteRule rule);
std::optional<MisrouteRule> parse_misroute(std::string_view name);

struct ErrorModel {
  std::map<int, double> per_depth_accuracy;
  double default_accuracy = 1.0;
  MisrouteRule misroute = MisrouteRule::UniformOther;

  double accuracy_at(int depth) const;
  void validate() const;  // throws ConfigError on probabilities outside [0,1]
};

// Truthful with probability accuracy_at(node.depth), otherwise a wrong branch
// picked by the misroute rule.
std::string simulate_answer(const ErrorModel& model, const TreeNode& node, std::string_view truth_answer,
                            std::mt19937_64& rng);

class SimulatorBackend : public Backend {
 public:
  // truth maps image_ref -> class id. The tree may be null for zero-shot-only use.
  SimulatorBackend(const DecisionTree* tree, ClassSet classes, std::unordered_map<std::string, int> truth,
                   ErrorModel model, std::uint64_t seed, std::string backend_id = "simulator");

  std::string id() const override { return id_; }

 protected:
  ChatResponse do_send(const ChatRequest& request) override;

 private:
  std::string answer_node(const NodePath& path, int truth_class, std::mt19937_64& rng) const;

  std::string id_;
  const DecisionTree* tree_;
  ClassSet classes_;
  std::unordered_map<std::string, int> truth_;
  ErrorModel model_;
  std::uint64_t seed_;
  std::map<int, ClassPath> paths_;
};

// ---- live HTTP ------------------------------------------------------------

struct HttpBackendConfig {
  std::string endpoint;  // full URL of the chat-completions route
  std::string model_id;
  std::string api_key_env = "OPENAI_API_KEY";
  int max_retries = 4;
  std::chrono::milliseconds initial_backoff{250};
  std::chrono::milliseconds max_backoff{8000};
  std::chrono::milliseconds retry_ceiling{30000};  // total sleep across retries
  std::chrono::seconds timeout{60};
  int max_concurrency = 4;
  std::chrono::milliseconds min_interval{0};  // spacing between request starts
};

class HttpBackend : public Backend {
 public:
  explicit HttpBackend(HttpBackendConfig config);
  ~HttpBackend() override;

  std::string id() const override;
  std::uint64_t retry_count() const { return retries_.load(); }

  // Request body in the chat-completions wire shape.
  static std::string build_body(const ChatRequest& request, const std::string& model_id);
  // Pulls choices[0].message.content; throws BackendError(Malformed).
  static std::string parse_reply(std::string_view body);

 protected:
  ChatResponse do_send(const ChatRequest& request) override;

 private:
  void pace();

  HttpBackendConfig config_;
  std::string scheme_host_port_;
  std::string path_;
  std::counting_semaphore<1024> in_flight_;
  std::mutex pace_mutex_;
  std::chrono::steady_clock::time_point next_start_{};
  std::atomic<std::uint64_t> retries_{0};
};

// ---- replay -----------------------------------------------------------------

// Serves raw responses recorded in transcripts, keyed by image, temperature,
// run index, and prompt digest.
class ReplayBackend : public Backend {
 public:
  explicit ReplayBackend(std::string backend_id = "replay") : id_(std::move(backend_id)) {}

  void record(const std::optional<std::string>& image_ref, double temperature, int run_index,
              const std::string& prompt_digest, std::string response);
  std::size_t size() const { return responses_.size(); }
  std::string id() const override { return id_; }

 protected:
  ChatResponse do_send(const ChatRequest& request) override;

 private:
  static std::string key(const std::optional<std::string>& image_ref, double temperature, int run_index,
                         const std::string& prompt_digest);

  std::string id_;
  std::unordered_map<std::string, std::string> responses_;
};

}  // namespace vlmtree
