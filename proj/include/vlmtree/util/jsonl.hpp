#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace vlmtree {

using Json = nlohmann::ordered_json;

struct JsonLine {
  int line_number;  // 1-based line in the source file
  Json value;
};

std::string read_text_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames over the target.
void write_text_file_atomic(const std::filesystem::path& path, std::string_view content);

// Parses line-delimited JSON. Blank lines are skipped; a malformed line raises
// ParseError carrying the line and column.
std::vector<JsonLine> parse_jsonl(std::string_view text, std::string_view source_name);
std::vector<JsonLine> read_jsonl(const std::filesystem::path& path);

// Parses a whole JSON document, mapping the failure offset to line/column.
Json parse_json_document(std::string_view text, std::string_view source_name);

// 1-based line/column of a byte offset into text.
std::pair<int, int> line_column_at(std::string_view text, std::size_t offset);

}  // namespace vlmtree
