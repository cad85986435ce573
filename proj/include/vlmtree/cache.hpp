#pragma once

#include <atomic>
#include <filesystem>
#include <optional>

#include "vlmtree/backends.hpp"

namespace vlmtree {

// Content-addressed response store: one JSON file per key under
// <root>/<first two hex digits>/<hex>.json. Puts are atomic per entry.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path root);

  // Miss is not an error. Throws CacheCorruptionError on digest mismatch.
  std::optional<ChatResponse> get(const CacheKey& key) const;
  void put(const CacheKey& key, const ChatResponse& response);

  std::filesystem::path entry_path(const CacheKey& key) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

// Serves repeats from the cache and stores every fresh response.
class CachedBackend : public Backend {
 public:
  CachedBackend(Backend& inner, ResponseCache& cache) : inner_(inner), cache_(cache) {}

  std::string id() const override { return inner_.id(); }
  std::uint64_t hits() const { return hits_.load(); }
  std::uint64_t misses() const { return misses_.load(); }

 protected:
  ChatResponse do_send(const ChatRequest& request) override;

 private:
  Backend& inner_;
  ResponseCache& cache_;
  std::atomic<std::uint64_t> hits_{0};
  std::atomic<std::uint64_t> misses_{0};
};

}  // namespace vlmtree
