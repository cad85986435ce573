#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <httplib.h>

#include <atomic>
#include <filesystem>
#include <functional>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "vlmtree/backends.hpp"
#include "vlmtree/cli.hpp"
#include "vlmtree/tree.hpp"
#include "vlmtree/util/jsonl.hpp"

namespace vlmtree::testing {

inline std::filesystem::path data_path(const std::string& rel) { return std::filesystem::path(VLMTREE_DATA_DIR) / rel; }

inline std::filesystem::path golden_path(const std::string& rel) {
  return std::filesystem::path(VLMTREE_TEST_DIR) / "golden" / rel;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<unsigned> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("vlmtree-test-" + std::to_string(rd()) + "-" + std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

inline CliResult run(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Balanced binary tree of the given depth. Leaf i is class i; answers are "yes"/"no".
inline DecisionTree balanced_binary_tree(int depth) {
  std::vector<ClassLabel> labels;
  for (int i = 0; i < (1 << depth); ++i) labels.push_back({i, "class " + std::to_string(i)});
  DecisionTree tree("binary" + std::to_string(depth), ClassSet(labels), "Question at depth 0, position 0?");
  std::vector<NodeId> frontier{kRootNode};
  for (int d = 1; d <= depth; ++d) {
    std::vector<NodeId> next;
    int pos = 0;
    for (NodeId parent : frontier) {
      for (const char* ans : {"yes", "no"}) {
        if (d == depth) {
          tree.add_leaf(parent, ans, pos++);
        } else {
          next.push_back(tree.add_node(parent, ans,
                                       "Question at depth " + std::to_string(d) + ", position " +
                                           std::to_string(pos) + "?"));
          ++pos;
        }
      }
    }
    frontier = std::move(next);
  }
  return tree;
}

// Local server speaking the chat-completions wire shape. The handler sees the
// prompt text and image reference pulled from the request body.
class StubServer {
 public:
  struct Reply {
    int status = 200;
    std::string content;
  };
  using Handler = std::function<Reply(const std::string& text, const std::optional<std::string>& image)>;

  explicit StubServer(Handler handler, std::string required_key = {})
      : handler_(std::move(handler)), required_key_(std::move(required_key)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(mutex_);
        ++requests_;
        if (!required_key_.empty() && req.get_header_value("Authorization") != "Bearer " + required_key_) {
          res.status = 401;
          return;
        }
      }
      const Json body = Json::parse(req.body, nullptr, false);
      std::string text;
      std::optional<std::string> image;
      if (!body.is_discarded()) {
        for (const auto& part : body["messages"][0]["content"]) {
          if (part["type"] == "text") text = part["text"].get<std::string>();
          if (part["type"] == "image_url") image = part["image_url"]["url"].get<std::string>();
        }
      }
      const Reply r = handler_(text, image);
      res.status = r.status;
      if (r.status == 200) {
        std::lock_guard lock(mutex_);
        if (!answered_.insert(req.body).second) ++duplicates_;
        ++answered_count_;
        Json reply = {{"id", "stub"},
                      {"object", "chat.completion"},
                      {"choices", Json::array({{{"index", 0},
                                                {"message", {{"role", "assistant"}, {"content", r.content}}},
                                                {"finish_reason", "stop"}}})}};
        res.set_content(reply.dump(), "application/json");
      }
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~StubServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  int port() const { return port_; }

  // Requests received, answered with 200, and answered bodies seen before.
  int requests() const {
    std::lock_guard lock(mutex_);
    return requests_;
  }
  int answered() const {
    std::lock_guard lock(mutex_);
    return answered_count_;
  }
  int duplicates() const {
    std::lock_guard lock(mutex_);
    return duplicates_;
  }

 private:
  Handler handler_;
  std::string required_key_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  mutable std::mutex mutex_;
  int requests_ = 0;
  int answered_count_ = 0;
  int duplicates_ = 0;
  std::set<std::string> answered_;
};

// Answers stub traffic from scripted rules, as if the remote model were the mock.
inline StubServer::Handler scripted_handler(std::shared_ptr<ScriptedBackend> script) {
  return [script](const std::string& text, const std::optional<std::string>& image) -> StubServer::Reply {
    ChatRequest req;
    req.prompt.text = text;
    req.image_ref = image;
    try {
      return {200, script->send(req).text};
    } catch (const BackendError&) {
      return {500, ""};
    }
  };
}

}  // namespace vlmtree::testing
