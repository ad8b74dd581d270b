#include "diagann/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "diagann/errors.hpp"
#include "diagann/text.hpp"

namespace diagann {

using nlohmann::json;
using nlohmann::ordered_json;

std::size_t BinaryAnnotation::yes_count() const {
  return static_cast<std::size_t>(
      std::count_if(verdicts.begin(), verdicts.end(),
                    [](const auto& kv) { return kv.second == Verdict::kYes; }));
}

SpanAnnotation SpanAnnotation::empty(QuestionnaireId q, std::string post_id) {
  SpanAnnotation a;
  a.post_id = std::move(post_id);
  a.questionnaire = q;
  for (const auto& item : items(q)) a.evidence[std::string(item.slug)] = {};
  return a;
}

bool SpanAnnotation::present(const std::string& slug) const {
  const auto it = evidence.find(slug);
  return it != evidence.end() && !it->second.empty();
}

std::size_t SpanAnnotation::present_count() const {
  return static_cast<std::size_t>(
      std::count_if(evidence.begin(), evidence.end(),
                    [](const auto& kv) { return !kv.second.empty(); }));
}

std::vector<json> split_records(std::string_view content) {
  const std::string trimmed = text::trim(content);
  std::vector<json> out;
  if (trimmed.empty()) return out;
  if (trimmed.front() == '[') {
    json doc = json::parse(trimmed, nullptr, false);
    if (doc.is_discarded() || !doc.is_array())
      throw SchemaError(SchemaError::kNoRecord, "malformed JSON array");
    for (auto& rec : doc) out.push_back(std::move(rec));
    return out;
  }
  json single = json::parse(trimmed, nullptr, false);
  if (!single.is_discarded()) {
    if (!single.is_object())
      throw SchemaError(SchemaError::kNoRecord, "expected JSON object(s)");
    out.push_back(std::move(single));
    return out;
  }
  std::istringstream lines{std::string(trimmed)};
  std::string line;
  while (std::getline(lines, line)) {
    if (text::trim(line).empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded())
      throw SchemaError(out.size(), "malformed JSON line");
    out.push_back(std::move(rec));
  }
  return out;
}

std::string positional_id(std::string_view source, std::size_t index) {
  return std::string(source) + "#" + std::to_string(index);
}

namespace {

const json& require(const json& rec, std::size_t index, const char* field) {
  if (!rec.is_object()) throw SchemaError(index, "record is not an object");
  const auto it = rec.find(field);
  if (it == rec.end())
    throw SchemaError(index, std::string("missing field '") + field + "'");
  return *it;
}

Post post_from_json(const json& rec, std::string_view source,
                    std::size_t index) {
  Post p;
  const json& title = require(rec, index, "post_title");
  if (title.is_string()) {
    p.title = title.get<std::string>();
  } else if (!title.is_null()) {
    throw SchemaError(index, "post_title must be a string");
  }
  const json& body = require(rec, index, "post_text");
  if (!body.is_string() || body.get_ref<const std::string&>().empty())
    throw SchemaError(index, "post_text must be a non-empty string");
  p.body = body.get<std::string>();
  if (const auto it = rec.find("post_id");
      it != rec.end() && it->is_string() && !it->get_ref<const std::string&>().empty()) {
    p.id = it->get<std::string>();
  } else {
    p.id = positional_id(source, index);
  }
  return p;
}

const SymptomItem& slug_or_throw(QuestionnaireId q, const std::string& raw,
                                 std::size_t index) {
  const SymptomItem* item = lookup_slug(q, raw);
  if (item == nullptr)
    throw SchemaError(index, "unknown slug '" + raw + "' for " +
                                 std::string(display_name(q)));
  return *item;
}

template <class Record>
void check_unique_ids(const std::vector<Record>& records) {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!seen.insert(records[i].post.id).second)
      throw SchemaError(i, "duplicate post id '" + records[i].post.id + "'");
  }
}

}  // namespace

PrimateRecord primate_from_json(const json& rec, QuestionnaireId q,
                                std::string_view source, std::size_t index) {
  PrimateRecord r;
  r.post = post_from_json(rec, source, index);
  r.annotation.post_id = r.post.id;
  r.annotation.questionnaire = q;
  const json& pairs = require(rec, index, "annotations");
  if (!pairs.is_array())
    throw SchemaError(index, "annotations must be a list of [slug, verdict] pairs");
  for (const auto& pair : pairs) {
    if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() ||
        !pair[1].is_string())
      throw SchemaError(index, "annotation entry must be [slug, verdict]");
    const auto& item = slug_or_throw(q, pair[0].get<std::string>(), index);
    Verdict v;
    try {
      v = parse_verdict(pair[1].get<std::string>());
    } catch (const PreconditionError& e) {
      throw SchemaError(index, e.what());
    }
    if (!r.annotation.verdicts.emplace(std::string(item.slug), v).second)
      throw SchemaError(index, "slug '" + std::string(item.slug) + "' listed twice");
  }
  for (const auto& item : items(q)) {
    if (!r.annotation.verdicts.contains(std::string(item.slug)))
      throw SchemaError(index, "incomplete verdicts: missing '" +
                                   std::string(item.slug) + "'");
  }
  return r;
}

SpanRecord span_record_from_json(const json& rec, QuestionnaireId q,
                                 std::string_view source, std::size_t index) {
  SpanRecord r;
  r.post = post_from_json(rec, source, index);
  r.annotation = SpanAnnotation::empty(q, r.post.id);
  const json& ann = require(rec, index, "annotations");
  if (!ann.is_object())
    throw SchemaError(index, "annotations must be an object keyed by slug");
  std::set<std::string> seen;
  for (const auto& [key, spans] : ann.items()) {
    const auto& item = slug_or_throw(q, key, index);
    const std::string slug(item.slug);
    if (!seen.insert(slug).second)
      throw SchemaError(index, "slug '" + slug + "' listed twice");
    if (spans.is_null()) continue;
    if (!spans.is_array())
      throw SchemaError(index, "evidence for '" + slug + "' must be a list");
    auto& out = r.annotation.evidence[slug];
    for (const auto& s : spans) {
      if (!s.is_string() || s.get_ref<const std::string&>().empty())
        throw SchemaError(index, "evidence for '" + slug +
                                     "' must be non-empty strings");
      out.push_back(s.get<std::string>());
    }
  }
  return r;
}

std::vector<PrimateRecord> load_primate(std::string_view content,
                                        std::string_view source,
                                        QuestionnaireId q) {
  std::vector<PrimateRecord> out;
  const auto records = split_records(content);
  for (std::size_t i = 0; i < records.size(); ++i)
    out.push_back(primate_from_json(records[i], q, source, i));
  check_unique_ids(out);
  return out;
}

std::vector<SpanRecord> load_span_ground_truth(std::string_view content,
                                               QuestionnaireId q,
                                               std::string_view source) {
  std::vector<SpanRecord> out;
  const auto records = split_records(content);
  for (std::size_t i = 0; i < records.size(); ++i)
    out.push_back(span_record_from_json(records[i], q, source, i));
  check_unique_ids(out);
  return out;
}

ordered_json to_json(const PrimateRecord& r) {
  ordered_json j;
  j["post_id"] = r.post.id;
  j["post_title"] = r.post.title;
  j["post_text"] = r.post.body;
  j["annotations"] = ordered_json::array();
  for (const auto& [slug, v] : r.annotation.verdicts)
    j["annotations"].push_back({slug, to_string(v)});
  return j;
}

ordered_json evidence_json(const SpanAnnotation& a) {
  ordered_json out = ordered_json::object();
  for (const auto& [slug, spans] : a.evidence) out[slug] = spans;
  return out;
}

ordered_json to_json(const SpanRecord& r) {
  ordered_json j;
  j["post_id"] = r.post.id;
  j["post_title"] = r.post.title;
  j["post_text"] = r.post.body;
  j["annotations"] = evidence_json(r.annotation);
  return j;
}

namespace {

template <class Record>
std::string serialize(std::span<const Record> records) {
  ordered_json arr = ordered_json::array();
  for (const auto& r : records) arr.push_back(to_json(r));
  return arr.dump(2) + "\n";
}

}  // namespace

std::string serialize_primate(std::span<const PrimateRecord> records) {
  return serialize(records);
}

std::string serialize_spans(std::span<const SpanRecord> records) {
  return serialize(records);
}

CorpusKind detect_kind(std::string_view content) {
  const auto records = split_records(content);
  if (records.empty()) return CorpusKind::kEmpty;
  const auto& first = records.front();
  if (first.is_object()) {
    const auto it = first.find("annotations");
    if (it != first.end() && it->is_object()) return CorpusKind::kSpans;
  }
  return CorpusKind::kPrimate;
}

CorpusStats stats(std::string name, std::span<const PrimateRecord> records) {
  CorpusStats s{std::move(name), records.size(), {}};
  const QuestionnaireId q = records.empty()
                                ? QuestionnaireId::kPhq9
                                : records.front().annotation.questionnaire;
  for (const auto& item : items(q)) s.yes_counts[std::string(item.slug)] = 0;
  for (const auto& r : records) {
    for (const auto& [slug, v] : r.annotation.verdicts)
      if (v == Verdict::kYes) ++s.yes_counts[slug];
  }
  return s;
}

CorpusStats stats(std::string name, std::span<const SpanRecord> records) {
  CorpusStats s{std::move(name), records.size(), {}};
  const QuestionnaireId q = records.empty()
                                ? QuestionnaireId::kPhq9
                                : records.front().annotation.questionnaire;
  for (const auto& item : items(q)) s.yes_counts[std::string(item.slug)] = 0;
  for (const auto& r : records) {
    for (const auto& [slug, spans] : r.annotation.evidence)
      if (!spans.empty()) ++s.yes_counts[slug];
  }
  return s;
}

BinaryAnnotation binarize(const SpanAnnotation& s) {
  BinaryAnnotation b;
  b.post_id = s.post_id;
  b.questionnaire = s.questionnaire;
  for (const auto& item : items(s.questionnaire)) {
    const std::string slug(item.slug);
    b.verdicts[slug] = s.present(slug) ? Verdict::kYes : Verdict::kNo;
  }
  return b;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace diagann
