#pragma once

// Embedding tables (EMB1 binary), attribute tables (CSV) and class-split
// manifests (JSON), plus the cross-checked DatasetBundle built from them.
//
// EMB1 layout, little-endian, no padding:
//   "EMB1" | u32 count | u32 dim | count x (u32 class id | dim x f32)

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cpn/binary_io.hpp"
#include "cpn/error.hpp"
#include "cpn/gradcore.hpp"

namespace cpn {

using ClassId = std::uint32_t;

// ---------------------------------------------------------------------------
// Embeddings

struct EmbeddingTable {
  Mat features;  // count x dim
  std::vector<ClassId> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }
  std::span<const double> feature(std::size_t i) const noexcept { return features.row(i); }
};

inline constexpr std::string_view kEmbeddingMagic = "EMB1";

inline io::Bytes encode_embeddings(const EmbeddingTable& table) {
  if (table.features.rows() != table.labels.size()) {
    throw Error(ErrorCode::CountMismatch, "feature rows vs labels");
  }
  io::Bytes out;
  out.reserve(12 + table.size() * (4 + 4 * table.dim()));
  io::put_bytes(out, kEmbeddingMagic);
  io::put_u32(out, static_cast<std::uint32_t>(table.size()));
  io::put_u32(out, static_cast<std::uint32_t>(table.dim()));
  for (std::size_t i = 0; i < table.size(); ++i) {
    io::put_u32(out, table.labels[i]);
    for (double x : table.feature(i)) io::put_f32(out, static_cast<float>(x));
  }
  return out;
}

inline EmbeddingTable decode_embeddings(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw Error(ErrorCode::TruncatedFile, "embedding file shorter than its magic");
  io::Reader in(bytes);
  if (in.str(4) != kEmbeddingMagic) throw Error(ErrorCode::BadMagic, "expected EMB1");
  const std::uint32_t count = in.u32();
  const std::uint32_t dim = in.u32();
  if (count == 0) throw Error(ErrorCode::CountMismatch, "embedding table declares zero records");
  if (dim == 0) throw Error(ErrorCode::CountMismatch, "embedding table declares zero dimension");
  const std::uint64_t body = static_cast<std::uint64_t>(count) * (4 + 4ULL * dim);
  if (in.remaining() < body) {
    throw Error(ErrorCode::TruncatedFile, "header declares " + std::to_string(count) + " records of dim " +
                                              std::to_string(dim) + " but body is " +
                                              std::to_string(in.remaining()) + " bytes");
  }
  if (in.remaining() > body) {
    throw Error(ErrorCode::CountMismatch, std::to_string(in.remaining() - body) + " trailing bytes after records");
  }
  EmbeddingTable t{Mat(count, dim), std::vector<ClassId>(count)};
  for (std::uint32_t i = 0; i < count; ++i) {
    t.labels[i] = in.u32();
    for (std::uint32_t k = 0; k < dim; ++k) {
      const float v = in.f32();
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::NonFinite, "record " + std::to_string(i) + " has a non-finite feature");
      }
      t.features(i, k) = v;
    }
  }
  return t;
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(io::read_file(path));
}

inline void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  io::write_file(path, encode_embeddings(table));
}

// ---------------------------------------------------------------------------
// Attributes

enum class AttributeLevel { category, image };

struct AttributeTable {
  std::size_t num_attributes = 0;
  std::map<ClassId, Vec> vectors;

  bool contains(ClassId c) const { return vectors.contains(c); }
  const Vec& at(ClassId c) const {
    auto it = vectors.find(c);
    if (it == vectors.end()) throw Error(ErrorCode::MissingAttributeVector, "class " + std::to_string(c));
    return it->second;
  }
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view f = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t')) f.remove_suffix(1);
    out.push_back(f);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) lines.push_back(line);
    start = nl + 1;
  }
  return lines;
}

template <class T>
T parse_number(std::string_view s, std::size_t line_no) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": bad number '" + std::string(s) + "'");
  }
  return v;
}

inline void check_nonzero(const AttributeTable& t) {
  for (const auto& [c, z] : t.vectors) {
    if (std::all_of(z.begin(), z.end(), [](double x) { return x == 0.0; })) {
      throw Error(ErrorCode::AllZeroClassVector, "class " + std::to_string(c));
    }
  }
}

}  // namespace detail

/// Parses attribute CSV text. With level=image, rows of the same class are
/// averaged; `labels`, when given, replaces the class_id column row by row.
inline AttributeTable parse_attributes(std::string_view text, AttributeLevel level,
                                       std::optional<std::span<const ClassId>> labels = std::nullopt) {
  const auto lines = detail::split_lines(text);
  if (lines.empty()) throw Error(ErrorCode::ParseError, "attribute CSV is empty");
  const auto header = detail::split_fields(lines[0]);
  if (header.size() < 2 || header[0] != "class_id") {
    throw Error(ErrorCode::ParseError, "attribute CSV header must be class_id,a_1,...,a_M");
  }
  const std::size_t m = header.size() - 1;
  if (labels && labels->size() != lines.size() - 1) {
    throw Error(ErrorCode::CountMismatch, "labels given for " + std::to_string(labels->size()) + " rows but CSV has " +
                                              std::to_string(lines.size() - 1));
  }

  std::map<ClassId, std::vector<double>> sums;
  std::map<ClassId, std::size_t> counts;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto fields = detail::split_fields(lines[r]);
    if (fields.size() != header.size()) {
      throw Error(ErrorCode::RaggedRows, "line " + std::to_string(r + 1) + " has " + std::to_string(fields.size()) +
                                             " fields, header has " + std::to_string(header.size()));
    }
    ClassId c = detail::parse_number<ClassId>(fields[0], r + 1);
    if (labels) c = (*labels)[r - 1];
    auto [it, inserted] = sums.try_emplace(c, std::vector<double>(m, 0.0));
    if (!inserted && level == AttributeLevel::category) {
      throw Error(ErrorCode::DuplicateClass, "class " + std::to_string(c) + " appears twice in category-level CSV");
    }
    for (std::size_t j = 0; j < m; ++j) {
      const double v = detail::parse_number<double>(fields[j + 1], r + 1);
      if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "line " + std::to_string(r + 1));
      if (v < 0.0) {
        throw Error(ErrorCode::NegativeScore, "line " + std::to_string(r + 1) + " attribute " + std::to_string(j + 1));
      }
      it->second[j] += v;
    }
    ++counts[c];
  }

  AttributeTable t{m, {}};
  for (auto& [c, sum] : sums) {
    const double n = static_cast<double>(counts[c]);
    if (counts[c] > 1) {
      for (auto& x : sum) x /= n;
    }
    t.vectors.emplace(c, Vec(std::move(sum)));
  }
  detail::check_nonzero(t);
  return t;
}

inline AttributeTable load_attributes(const std::filesystem::path& path, AttributeLevel level,
                                      std::optional<std::span<const ClassId>> labels = std::nullopt) {
  return parse_attributes(io::read_text(path), level, labels);
}

/// Category-level CSV; values printed with round-trip precision.
inline std::string format_attributes(const AttributeTable& t) {
  std::string out = "class_id";
  for (std::size_t j = 1; j <= t.num_attributes; ++j) out += ",a_" + std::to_string(j);
  out += '\n';
  char buf[64];
  for (const auto& [c, z] : t.vectors) {
    out += std::to_string(c);
    for (double x : z) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
      out += ',';
      out.append(buf, ptr);
    }
    out += '\n';
  }
  return out;
}

inline void write_attributes(const std::filesystem::path& path, const AttributeTable& t) {
  io::write_text(path, format_attributes(t));
}

/// Divides every class vector by its largest entry.
inline AttributeTable normalize_attributes_max(AttributeTable t) {
  for (auto& [c, z] : t.vectors) {
    const double mx = *std::max_element(z.begin(), z.end());
    for (auto& x : z) x /= mx;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  std::vector<ClassId> base;
  std::vector<ClassId> val;
  std::vector<ClassId> novel;
};

inline SplitSpec make_split(std::vector<ClassId> base, std::vector<ClassId> val, std::vector<ClassId> novel) {
  std::set<ClassId> seen;
  for (auto* part : {&base, &val, &novel}) {
    std::sort(part->begin(), part->end());
    if (std::adjacent_find(part->begin(), part->end()) != part->end()) {
      throw Error(ErrorCode::DuplicateClass, "class listed twice within one split");
    }
    for (ClassId c : *part) {
      if (!seen.insert(c).second) {
        throw Error(ErrorCode::OverlappingSplits, "class " + std::to_string(c) + " is in more than one split");
      }
    }
  }
  if (base.empty()) throw Error(ErrorCode::EmptySplit, "base split is empty");
  if (val.empty()) throw Error(ErrorCode::EmptySplit, "val split is empty");
  if (novel.empty()) throw Error(ErrorCode::EmptySplit, "novel split is empty");
  return SplitSpec{std::move(base), std::move(val), std::move(novel)};
}

inline SplitSpec parse_split(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("split manifest: ") + e.what());
  }
  auto ids = [&](const char* key) {
    if (!j.is_object() || !j.contains(key)) return std::vector<ClassId>{};
    try {
      return j.at(key).get<std::vector<ClassId>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseError, std::string("split manifest field '") + key + "': " + e.what());
    }
  };
  if (!j.is_object()) throw Error(ErrorCode::ParseError, "split manifest must be a JSON object");
  return make_split(ids("base"), ids("val"), ids("novel"));
}

inline SplitSpec load_split(const std::filesystem::path& path) { return parse_split(io::read_text(path)); }

inline std::string format_split(const SplitSpec& s) {
  nlohmann::json j{{"base", s.base}, {"val", s.val}, {"novel", s.novel}};
  return j.dump() + "\n";
}

inline void write_split(const std::filesystem::path& path, const SplitSpec& s) { io::write_text(path, format_split(s)); }

// ---------------------------------------------------------------------------
// Bundle

/// Cross-validated dataset. Only validate_bundle constructs one, so holding a
/// DatasetBundle means every label, attribute vector and split entry agree.
class DatasetBundle {
 public:
  const EmbeddingTable& embeddings() const noexcept { return emb_; }
  const AttributeTable& attributes() const noexcept { return attrs_; }
  const SplitSpec& split() const noexcept { return split_; }
  std::size_t dim() const noexcept { return emb_.dim(); }
  std::size_t num_attributes() const noexcept { return attrs_.num_attributes; }

  /// Record indices of class c, in file order. Empty for unknown classes.
  std::span<const std::size_t> records_of(ClassId c) const {
    auto it = by_class_.find(c);
    if (it == by_class_.end()) return {};
    return it->second;
  }

 private:
  friend DatasetBundle validate_bundle(EmbeddingTable, AttributeTable, SplitSpec);
  DatasetBundle(EmbeddingTable e, AttributeTable a, SplitSpec s)
      : emb_(std::move(e)), attrs_(std::move(a)), split_(std::move(s)) {}

  EmbeddingTable emb_;
  AttributeTable attrs_;
  SplitSpec split_;
  std::map<ClassId, std::vector<std::size_t>> by_class_;
};

inline DatasetBundle validate_bundle(EmbeddingTable emb, AttributeTable attrs, SplitSpec split) {
  if (emb.size() == 0) throw Error(ErrorCode::CountMismatch, "embedding table is empty");
  if (emb.features.rows() != emb.labels.size()) throw Error(ErrorCode::CountMismatch, "feature rows vs labels");
  for (const auto& [c, z] : attrs.vectors) {
    if (z.size() != attrs.num_attributes) throw Error(ErrorCode::RaggedRows, "class " + std::to_string(c));
  }

  std::map<ClassId, int> split_of;
  for (ClassId c : split.base) split_of[c] = 0;
  for (ClassId c : split.val) split_of[c] = 1;
  for (ClassId c : split.novel) split_of[c] = 2;

  DatasetBundle b(std::move(emb), std::move(attrs), std::move(split));
  for (std::size_t i = 0; i < b.emb_.size(); ++i) {
    const ClassId c = b.emb_.labels[i];
    if (!b.attrs_.contains(c)) {
      throw Error(ErrorCode::MissingAttributeVector, "embedding label " + std::to_string(c) + " has no attribute vector");
    }
    if (!split_of.contains(c)) {
      throw Error(ErrorCode::UnsplitClass, "embedding label " + std::to_string(c) + " is in no split");
    }
    b.by_class_[c].push_back(i);
  }
  for (const auto& [c, part] : split_of) {
    if (!b.attrs_.contains(c)) {
      throw Error(ErrorCode::MissingAttributeVector, "split class " + std::to_string(c) + " has no attribute vector");
    }
    if (!b.by_class_.contains(c)) {
      throw Error(ErrorCode::EmptyClass, "split class " + std::to_string(c) + " has no embedding records");
    }
  }
  return b;
}

struct BundlePaths {
  std::filesystem::path embeddings;
  std::filesystem::path attributes;
  std::filesystem::path split;
};

inline DatasetBundle load_bundle(const BundlePaths& paths, AttributeLevel level = AttributeLevel::category,
                                 bool normalize_max = false) {
  auto emb = load_embeddings(paths.embeddings);
  auto attrs = load_attributes(paths.attributes, level);
  if (normalize_max) attrs = normalize_attributes_max(std::move(attrs));
  auto split = load_split(paths.split);
  return validate_bundle(std::move(emb), std::move(attrs), std::move(split));
}

inline void write_bundle(const BundlePaths& paths, const DatasetBundle& b) {
  write_embeddings(paths.embeddings, b.embeddings());
  write_attributes(paths.attributes, b.attributes());
  write_split(paths.split, b.split());
}

}  // namespace cpn
