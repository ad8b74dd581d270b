#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace diagann {

enum class QuestionnaireId { kPhq9, kGad7 };

enum class Verdict { kNo, kYes };

struct SymptomItem {
  QuestionnaireId questionnaire;
  int ordinal;           // 1..n, clinical order
  std::string_view text; // human-readable item text
  std::string_view slug; // dataset-exact annotation key
};

/// "phq9" / "gad7".
std::string_view to_string(QuestionnaireId q);
/// Accepts phq9, PHQ-9, gad7, GAD-7 (case-insensitive). Throws
/// PreconditionError otherwise.
QuestionnaireId parse_questionnaire(std::string_view s);
/// Display name, "PHQ-9" / "GAD-7".
std::string_view display_name(QuestionnaireId q);

std::string_view to_string(Verdict v);
/// Trimmed, case-insensitive yes/no. Throws PreconditionError otherwise.
Verdict parse_verdict(std::string_view s);

/// Items in ordinal order. The returned span refers to static storage.
std::span<const SymptomItem> items(QuestionnaireId q);

/// Items sorted by slug (the key order of the released datasets and of the
/// fine-tuning verdict lists).
std::vector<SymptomItem> items_by_slug(QuestionnaireId q);

/// Trim, lowercase, collapse runs of hyphens.
std::string normalize_slug(std::string_view raw);

/// Exact-after-normalization lookup. Throws UnknownSlug.
const SymptomItem& resolve_slug(QuestionnaireId q, std::string_view raw);

/// resolve_slug, falling back to the alias table (hyphenated item texts and
/// other known spellings). Returns nullptr when nothing matches.
const SymptomItem* lookup_slug(QuestionnaireId q, std::string_view raw);

/// The machine-readable registry served to the review UI:
/// {"schema_version":1,"questionnaires":{"phq9":{"name":..,"items":[{ordinal,slug,text}]}}}
std::string registry_json();

}  // namespace diagann
