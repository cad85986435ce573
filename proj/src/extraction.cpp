#include "vlmtree/extraction.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "vlmtree/errors.hpp"

namespace vlmtree {

namespace {

bool is_word(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Earliest boundary-respecting occurrence of needle in haystack.
std::optional<std::size_t> first_bounded(std::string_view haystack, std::string_view needle) {
  for (auto pos = haystack.find(needle); pos != std::string_view::npos; pos = haystack.find(needle, pos + 1)) {
    const bool left_ok = pos == 0 || !is_word(haystack[pos - 1]);
    const std::size_t end = pos + needle.size();
    const bool right_ok = end == haystack.size() || !is_word(haystack[end]);
    if (left_ok && right_ok) return pos;
  }
  return std::nullopt;
}

}  // namespace

std::optional<std::string> match_answer(std::string_view text, std::span<const std::string> candidates) {
  if (candidates.empty()) throw ConfigError("answer extraction needs at least one candidate");
  std::set<std::string> seen;
  for (const auto& c : candidates) {
    if (c.empty()) throw ConfigError("answer candidates must be non-empty");
    if (!seen.insert(lower(c)).second) throw ConfigError("duplicate answer candidate '" + c + "'");
  }

  const std::string hay = lower(text);
  const std::string* best = nullptr;
  std::size_t best_pos = 0;
  for (const auto& c : candidates) {
    const auto pos = first_bounded(hay, lower(c));
    if (!pos) continue;
    if (best == nullptr || *pos < best_pos || (*pos == best_pos && c.size() > best->size())) {
      best = &c;
      best_pos = *pos;
    }
  }
  if (best == nullptr) return std::nullopt;
  return *best;
}

std::string extract_answer(std::string_view text, std::span<const std::string> candidates) {
  if (auto m = match_answer(text, candidates)) return *m;
  throw NoMatchError("no answer candidate found in response");
}

std::optional<int> match_class_id(std::string_view text, std::span<const int> valid_ids) {
  if (valid_ids.empty()) throw ConfigError("class id extraction needs at least one valid id");
  for (std::size_t i = 0; i < text.size();) {
    if (!std::isdigit(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    std::size_t end = i;
    while (end < text.size() && std::isdigit(static_cast<unsigned char>(text[end]))) ++end;
    const bool bounded = (i == 0 || !is_word(text[i - 1])) && (end == text.size() || !is_word(text[end]));
    if (bounded && end - i <= 9) {
      const int value = std::stoi(std::string(text.substr(i, end - i)));
      if (std::find(valid_ids.begin(), valid_ids.end(), value) != valid_ids.end()) return value;
    }
    i = end;
  }
  return std::nullopt;
}

int extract_class_id(std::string_view text, std::span<const int> valid_ids) {
  if (auto m = match_class_id(text, valid_ids)) return *m;
  throw NoMatchError("no valid class id found in response");
}

}  // namespace vlmtree
