#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "diagann/questionnaire.hpp"

namespace diagann {

struct Post {
  std::string id;
  std::string title;
  std::string body;

  bool operator==(const Post&) const = default;
};

/// Total yes/no map over a questionnaire, keyed by registry slug.
struct BinaryAnnotation {
  std::string post_id;
  QuestionnaireId questionnaire = QuestionnaireId::kPhq9;
  std::map<std::string, Verdict> verdicts;

  std::size_t yes_count() const;
  bool operator==(const BinaryAnnotation&) const = default;
};

/// Evidence spans per symptom. Every registry slug is a key; a symptom is
/// present iff its list is non-empty.
struct SpanAnnotation {
  std::string post_id;
  QuestionnaireId questionnaire = QuestionnaireId::kPhq9;
  std::map<std::string, std::vector<std::string>> evidence;

  static SpanAnnotation empty(QuestionnaireId q, std::string post_id);
  bool present(const std::string& slug) const;
  std::size_t present_count() const;
  bool operator==(const SpanAnnotation&) const = default;
};

struct PrimateRecord {
  Post post;
  BinaryAnnotation annotation;
};

struct SpanRecord {
  Post post;
  SpanAnnotation annotation;
};

struct CorpusStats {
  std::string name;
  std::size_t post_count = 0;
  std::map<std::string, std::size_t> yes_counts;
};

enum class CorpusKind { kPrimate, kSpans, kEmpty };

/// Splits a document into JSON records: a top-level array, a single object,
/// or JSON-lines. Throws SchemaError on malformed JSON.
std::vector<nlohmann::json> split_records(std::string_view content);

/// Positional id: "<source>#<index>".
std::string positional_id(std::string_view source, std::size_t index);

/// Binary ground truth (post_title, post_text, annotations as [slug, yes|no]
/// pairs). Every slug must appear exactly once.
std::vector<PrimateRecord> load_primate(std::string_view content,
                                        std::string_view source,
                                        QuestionnaireId q = QuestionnaireId::kPhq9);

/// Span ground truth (annotations object keyed by slug). Missing slugs read
/// as empty lists; unknown slugs are a SchemaError.
std::vector<SpanRecord> load_span_ground_truth(std::string_view content,
                                               QuestionnaireId q,
                                               std::string_view source);

/// Single-record forms of the loaders, for callers that carry extra fields.
PrimateRecord primate_from_json(const nlohmann::json& rec, QuestionnaireId q,
                                std::string_view source, std::size_t index);
SpanRecord span_record_from_json(const nlohmann::json& rec, QuestionnaireId q,
                                 std::string_view source, std::size_t index);

nlohmann::ordered_json to_json(const PrimateRecord& r);
nlohmann::ordered_json to_json(const SpanRecord& r);
/// Bare slug → spans object in slug order.
nlohmann::ordered_json evidence_json(const SpanAnnotation& a);

/// Canonical re-serialization: slug-sorted, 2-space indent, trailing newline.
std::string serialize_primate(std::span<const PrimateRecord> records);
std::string serialize_spans(std::span<const SpanRecord> records);

CorpusKind detect_kind(std::string_view content);

CorpusStats stats(std::string name, std::span<const PrimateRecord> records);
CorpusStats stats(std::string name, std::span<const SpanRecord> records);

/// yes iff the evidence list is non-empty.
BinaryAnnotation binarize(const SpanAnnotation& s);

/// Whole-file read; throws Error when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

}  // namespace diagann
