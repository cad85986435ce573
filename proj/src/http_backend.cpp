#include <httplib.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <thread>

#include "vlmtree/backends.hpp"
#include "vlmtree/util/jsonl.hpp"

namespace vlmtree {

namespace {

std::string mime_for(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".ppm") return "image/x-portable-pixmap";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "image/jpeg";
}

std::string image_url(const std::string& ref) {
  if (ref.rfind("http://", 0) == 0 || ref.rfind("https://", 0) == 0 || ref.rfind("data:", 0) == 0) return ref;
  std::error_code ec;
  if (!std::filesystem::is_regular_file(ref, ec)) return ref;
  std::ifstream in(ref, std::ios::binary);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return "data:" + mime_for(ref) + ";base64," + base64_encode(bytes);
}

struct Permit {
  explicit Permit(std::counting_semaphore<1024>& s) : sem(s) { sem.acquire(); }
  ~Permit() { sem.release(); }
  std::counting_semaphore<1024>& sem;
};

bool transient_status(int status) { return status == 429 || status >= 500; }

}  // namespace

HttpBackend::HttpBackend(HttpBackendConfig config)
    : config_(std::move(config)), in_flight_(std::clamp(config_.max_concurrency, 1, 1024)) {
  const auto& url = config_.endpoint;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint must be an absolute URL: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
  if (config_.model_id.empty()) throw ConfigError("live backend needs a model id");
  if (config_.max_retries < 0) throw ConfigError("max_retries must be non-negative");
}

HttpBackend::~HttpBackend() = default;

std::string HttpBackend::id() const { return "http:" + config_.model_id; }

std::string HttpBackend::build_body(const ChatRequest& request, const std::string& model_id) {
  Json content = Json::array();
  content.push_back({{"type", "text"}, {"text", request.prompt.text}});
  if (request.image_ref)
    content.push_back({{"type", "image_url"}, {"image_url", {{"url", image_url(*request.image_ref)}}}});
  Json body;
  body["model"] = model_id;
  body["messages"] = Json::array({{{"role", "user"}, {"content", content}}});
  body["temperature"] = request.temperature;
  return body.dump();
}

std::string HttpBackend::parse_reply(std::string_view body) {
  Json doc = Json::parse(body, nullptr, false);
  if (doc.is_discarded()) throw BackendError(BackendError::Kind::Malformed, "endpoint reply is not JSON");
  try {
    const auto& msg = doc.at("choices").at(0).at("message").at("content");
    if (msg.is_string()) return msg.get<std::string>();
    // Some servers return content parts.
    std::string text;
    for (const auto& part : msg)
      if (part.value("type", "") == "text") text += part.at("text").get<std::string>();
    if (text.empty()) throw BackendError(BackendError::Kind::Malformed, "reply has no text content");
    return text;
  } catch (const Json::exception& e) {
    throw BackendError(BackendError::Kind::Malformed, std::string("unexpected reply shape: ") + e.what());
  }
}

void HttpBackend::pace() {
  if (config_.min_interval.count() <= 0) return;
  std::chrono::steady_clock::time_point start;
  {
    std::lock_guard lock(pace_mutex_);
    start = std::max(std::chrono::steady_clock::now(), next_start_);
    next_start_ = start + config_.min_interval;
  }
  std::this_thread::sleep_until(start);
}

ChatResponse HttpBackend::do_send(const ChatRequest& request) {
  const char* key = std::getenv(config_.api_key_env.c_str());
  const std::string body = build_body(request, config_.model_id.empty() ? request.model_id : config_.model_id);

  httplib::Headers headers;
  if (key != nullptr && *key != '\0') headers.emplace("Authorization", std::string("Bearer ") + key);

  Permit permit(in_flight_);
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(config_.timeout);
  client.set_read_timeout(config_.timeout);
  client.set_write_timeout(config_.timeout);

  auto backoff = config_.initial_backoff;
  std::chrono::milliseconds slept{0};
  std::string last_problem;
  for (int attempt = 0;; ++attempt) {
    pace();
    const auto t0 = std::chrono::steady_clock::now();
    auto res = client.Post(path_, headers, body, "application/json");
    const auto latency =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();

    if (res) {
      if (res->status == 401 || res->status == 403)
        throw BackendError(BackendError::Kind::Auth, "endpoint rejected credentials (HTTP " +
                                                         std::to_string(res->status) + ")");
      if (res->status >= 200 && res->status < 300) return ChatResponse{parse_reply(res->body), latency, id(), false};
      if (!transient_status(res->status))
        throw BackendError(BackendError::Kind::Request, "endpoint returned HTTP " + std::to_string(res->status));
      last_problem = "HTTP " + std::to_string(res->status);
    } else {
      last_problem = httplib::to_string(res.error());
    }

    if (attempt >= config_.max_retries || slept + backoff > config_.retry_ceiling)
      throw BackendError(BackendError::Kind::Exhausted, "gave up after " + std::to_string(attempt + 1) +
                                                            " attempts; last error: " + last_problem);
    retries_.fetch_add(1);
    spdlog::warn("{}: {} on attempt {}, retrying in {} ms", id(), last_problem, attempt + 1, backoff.count());
    std::this_thread::sleep_for(backoff);
    slept += backoff;
    backoff = std::min(backoff * 2, config_.max_backoff);
  }
}

}  // namespace vlmtree
