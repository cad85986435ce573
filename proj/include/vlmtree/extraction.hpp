#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace vlmtree {

// First candidate occurring in the text. Matching is ASCII case-insensitive
// and bounded by non-alphanumeric characters; at equal start positions the
// longest candidate wins. Candidates must be non-empty and unique.
std::optional<std::string> match_answer(std::string_view text, std::span<const std::string> candidates);

// Throws NoMatchError when nothing matches.
std::string extract_answer(std::string_view text, std::span<const std::string> candidates);

// First standalone integer token that is a member of valid_ids.
std::optional<int> match_class_id(std::string_view text, std::span<const int> valid_ids);
int extract_class_id(std::string_view text, std::span<const int> valid_ids);

}  // namespace vlmtree
