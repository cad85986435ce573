#include "vlmtree/datasets.hpp"

#include <algorithm>
#include <random>

#include "vlmtree/errors.hpp"
#include "vlmtree/util/jsonl.hpp"

namespace vlmtree {

namespace {

std::string at_line(std::string_view source, int line) {
  return std::string(source) + " line " + std::to_string(line);
}

ClassSet parse_class_list(const Json& list, const std::string& where) {
  if (!list.is_array()) throw ParseError(where + ": 'classes' must be an array");
  std::vector<ClassLabel> labels;
  for (const auto& c : list) {
    if (!c.is_object() || !c.contains("id") || !c.contains("name") || !c["id"].is_number_integer() ||
        !c["name"].is_string())
      throw ParseError(where + ": class entries need integer 'id' and string 'name'");
    labels.push_back({c["id"].get<int>(), c["name"].get<std::string>()});
  }
  try {
    return ClassSet(std::move(labels));
  } catch (const Error& e) {
    throw ParseError(where + ": " + e.what());
  }
}

}  // namespace

DatasetManifest parse_manifest(std::string_view text, std::string_view source_name) {
  const auto lines = parse_jsonl(text, source_name);
  if (lines.empty()) throw ParseError(std::string(source_name) + ": empty manifest");

  const auto& header = lines.front();
  const std::string header_where = at_line(source_name, header.line_number);
  if (!header.value.is_object() || !header.value.contains("name") || !header.value.contains("classes"))
    throw ParseError(header_where + ": header needs 'name' and 'classes'");

  DatasetManifest m;
  m.name = header.value["name"].get<std::string>();
  if (header.value.contains("task_noun")) m.task_noun = header.value["task_noun"].get<std::string>();
  m.classes = parse_class_list(header.value["classes"], header_where);

  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto& row = lines[i].value;
    const std::string where = at_line(source_name, lines[i].line_number);
    if (!row.is_object() || !row.contains("image_ref") || !row.contains("class_id"))
      throw ParseError(where + ": record needs 'image_ref' and 'class_id'");
    if (!row["image_ref"].is_string() || row["image_ref"].get<std::string>().empty())
      throw ParseError(where + ": 'image_ref' must be a non-empty string");
    if (!row["class_id"].is_number_integer()) throw ParseError(where + ": 'class_id' must be an integer");
    ImageRecord r;
    r.image_ref = row["image_ref"].get<std::string>();
    r.class_id = row["class_id"].get<int>();
    if (!m.classes.contains(r.class_id)) throw UnknownClassError(r.class_id, where);
    if (row.contains("sequence_id") && !row["sequence_id"].is_null()) {
      if (!row["sequence_id"].is_string()) throw ParseError(where + ": 'sequence_id' must be a string");
      r.sequence_id = row["sequence_id"].get<std::string>();
    }
    m.records.push_back(std::move(r));
  }
  if (m.records.empty()) throw ParseError(std::string(source_name) + ": manifest has no records");
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_text_file(path), path.string());
}

std::string render_manifest(const DatasetManifest& m) {
  Json header;
  header["name"] = m.name;
  header["task_noun"] = m.task_noun;
  Json classes = Json::array();
  for (const auto& c : m.classes) classes.push_back(Json{{"id", c.id}, {"name", c.name}});
  header["classes"] = std::move(classes);
  std::string out = header.dump() + "\n";
  for (const auto& r : m.records) {
    Json row;
    row["image_ref"] = r.image_ref;
    row["class_id"] = r.class_id;
    if (r.sequence_id) row["sequence_id"] = *r.sequence_id;
    out += row.dump() + "\n";
  }
  return out;
}

std::map<int, int> class_histogram(const DatasetManifest& manifest) {
  std::map<int, int> h;
  for (const auto& r : manifest.records) ++h[r.class_id];
  return h;
}

void canonical_sort(std::vector<ImageRecord>& records) {
  std::sort(records.begin(), records.end(), [](const ImageRecord& a, const ImageRecord& b) {
    const std::string_view sa = a.sequence_id ? std::string_view(*a.sequence_id) : std::string_view();
    const std::string_view sb = b.sequence_id ? std::string_view(*b.sequence_id) : std::string_view();
    if (sa != sb) return sa < sb;
    if (a.image_ref != b.image_ref) return a.image_ref < b.image_ref;
    return a.class_id < b.class_id;
  });
}

DatasetManifest sample_one_per_sequence(const DatasetManifest& manifest, std::uint64_t seed) {
  auto records = manifest.records;
  for (const auto& r : records)
    if (!r.sequence_id) throw ConfigError("record '" + r.image_ref + "' has no sequence_id");
  canonical_sort(records);

  std::mt19937_64 rng(seed);
  DatasetManifest out = manifest;
  out.records.clear();
  for (std::size_t begin = 0; begin < records.size();) {
    std::size_t end = begin;
    while (end < records.size() && *records[end].sequence_id == *records[begin].sequence_id) ++end;
    std::uniform_int_distribution<std::size_t> pick(begin, end - 1);
    out.records.push_back(records[pick(rng)]);
    begin = end;
  }
  return out;
}

DatasetManifest sample_balanced(const DatasetManifest& manifest, int per_class, std::uint64_t seed) {
  if (per_class < 1) throw ConfigError("per_class must be at least 1");
  auto records = manifest.records;
  canonical_sort(records);

  std::map<int, std::vector<ImageRecord>> by_class;
  for (auto& r : records) by_class[r.class_id].push_back(std::move(r));

  std::mt19937_64 rng(seed);
  DatasetManifest out = manifest;
  out.records.clear();
  for (const auto& label : manifest.classes) {
    auto& pool = by_class[label.id];
    if (pool.size() < static_cast<std::size_t>(per_class))
      throw ConfigError("class " + std::to_string(label.id) + " (" + label.name + ") has " +
                        std::to_string(pool.size()) + " records, fewer than " + std::to_string(per_class));
    // partial Fisher-Yates: the first per_class slots become the sample
    for (std::size_t i = 0; i < static_cast<std::size_t>(per_class); ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(static_cast<std::size_t>(per_class));
    canonical_sort(pool);
    for (auto& r : pool) out.records.push_back(std::move(r));
  }
  return out;
}

const std::string* ClassDescriptionSet::find(int class_id) const {
  auto it = entries_.find(class_id);
  return it == entries_.end() ? nullptr : &it->second;
}

bool ClassDescriptionSet::covers(const ClassSet& classes) const {
  return std::all_of(classes.begin(), classes.end(),
                     [&](const ClassLabel& c) { return entries_.contains(c.id); });
}

ClassDescriptionSet parse_descriptions(std::string_view text, const ClassSet& classes,
                                       std::string_view source_name) {
  std::map<int, std::string> entries;
  for (const auto& line : parse_jsonl(text, source_name)) {
    const std::string where = at_line(source_name, line.line_number);
    const auto& row = line.value;
    if (!row.is_object() || !row.contains("class_id") || !row.contains("description") ||
        !row["class_id"].is_number_integer() || !row["description"].is_string())
      throw ParseError(where + ": expected {\"class_id\": int, \"description\": str}");
    const int id = row["class_id"].get<int>();
    if (!classes.contains(id)) throw UnknownClassError(id, where);
    auto desc = row["description"].get<std::string>();
    if (normalize_text(desc).empty()) throw ParseError(where + ": empty description");
    if (!entries.emplace(id, std::move(desc)).second)
      throw ParseError(where + ": duplicate description for class " + std::to_string(id));
  }
  return ClassDescriptionSet(std::move(entries));
}

ClassDescriptionSet load_descriptions(const std::filesystem::path& path, const ClassSet& classes) {
  return parse_descriptions(read_text_file(path), classes, path.string());
}

}  // namespace vlmtree
