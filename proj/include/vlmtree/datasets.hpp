#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vlmtree/tree.hpp"

namespace vlmtree {

struct ImageRecord {
  std::string image_ref;
  int class_id = 0;
  std::optional<std::string> sequence_id;  // frame grouping, e.g. one physical sign

  bool operator==(const ImageRecord&) const = default;
};

struct DatasetManifest {
  std::string name;
  std::string task_noun = "object";  // fills {task_noun} in zero-shot prompts
  ClassSet classes;
  std::vector<ImageRecord> records;
};

// Line 1 is the header {"name","classes",["task_noun"]}; every further line is
// one record {"image_ref","class_id",["sequence_id"]}.
DatasetManifest parse_manifest(std::string_view text, std::string_view source_name = "manifest");
DatasetManifest load_manifest(const std::filesystem::path& path);
std::string render_manifest(const DatasetManifest& manifest);

std::map<int, int> class_histogram(const DatasetManifest& manifest);

// Sorts by (sequence_id, image_ref). Both samplers apply this first so the
// draw does not depend on input order.
void canonical_sort(std::vector<ImageRecord>& records);

// Exactly one record per distinct sequence id; every sequence is kept.
DatasetManifest sample_one_per_sequence(const DatasetManifest& manifest, std::uint64_t seed);

// Exactly per_class records for every class in the manifest's class set.
DatasetManifest sample_balanced(const DatasetManifest& manifest, int per_class, std::uint64_t seed);

class ClassDescriptionSet {
 public:
  ClassDescriptionSet() = default;
  explicit ClassDescriptionSet(std::map<int, std::string> entries) : entries_(std::move(entries)) {}

  const std::string* find(int class_id) const;
  bool covers(const ClassSet& classes) const;
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const std::map<int, std::string>& entries() const { return entries_; }

 private:
  std::map<int, std::string> entries_;
};

// One {"class_id","description"} object per line, checked against classes.
ClassDescriptionSet parse_descriptions(std::string_view text, const ClassSet& classes,
                                       std::string_view source_name = "descriptions");
ClassDescriptionSet load_descriptions(const std::filesystem::path& path, const ClassSet& classes);

}  // namespace vlmtree
