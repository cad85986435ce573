#include "vlmtree/cache.hpp"

#include "vlmtree/util/jsonl.hpp"

namespace vlmtree {

ResponseCache::ResponseCache(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_);
}

std::filesystem::path ResponseCache::entry_path(const CacheKey& key) const {
  const std::string hex = key.hex();
  return root_ / hex.substr(0, 2) / (hex + ".json");
}

std::optional<ChatResponse> ResponseCache::get(const CacheKey& key) const {
  const auto path = entry_path(key);
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return std::nullopt;

  Json doc;
  try {
    doc = Json::parse(read_text_file(path));
  } catch (const std::exception& e) {
    throw CacheCorruptionError("unreadable cache entry " + path.string() + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("text") || !doc.contains("text_sha256") || !doc.contains("key"))
    throw CacheCorruptionError("cache entry " + path.string() + " is missing fields");
  const auto text = doc["text"].get<std::string>();
  if (doc["key"].get<std::string>() != key.hex() || sha256_hex(text) != doc["text_sha256"].get<std::string>())
    throw CacheCorruptionError("digest mismatch in cache entry " + path.string());

  ChatResponse r;
  r.text = text;
  r.backend_id = doc.value("backend_id", "");
  r.latency_ms = doc.value("latency_ms", std::int64_t{0});
  r.cached = true;
  return r;
}

void ResponseCache::put(const CacheKey& key, const ChatResponse& response) {
  Json doc;
  doc["key"] = key.hex();
  doc["backend_id"] = response.backend_id;
  doc["latency_ms"] = response.latency_ms;
  doc["text"] = response.text;
  doc["text_sha256"] = sha256_hex(response.text);
  write_text_file_atomic(entry_path(key), doc.dump() + "\n");
}

ChatResponse CachedBackend::do_send(const ChatRequest& request) {
  const CacheKey key = make_cache_key(inner_.id(), request);
  if (auto hit = cache_.get(key)) {
    hits_.fetch_add(1);
    return *hit;
  }
  misses_.fetch_add(1);
  ChatResponse fresh = inner_.send(request);
  cache_.put(key, fresh);
  return fresh;
}

}  // namespace vlmtree
