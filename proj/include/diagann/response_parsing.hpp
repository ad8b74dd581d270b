#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "diagann/corpus.hpp"
#include "diagann/questionnaire.hpp"

namespace diagann {

enum class OutputKind { kSpanMap, kVerdictPairs };

std::string_view to_string(OutputKind k);
OutputKind parse_output_kind(std::string_view s);

struct ParseOptions {
  // Unknown annotation keys fail the parse instead of being dropped.
  bool strict = false;
};

struct ParsedOutput {
  OutputKind kind = OutputKind::kSpanMap;
  std::variant<SpanAnnotation, BinaryAnnotation> payload;
  std::vector<std::string> salvage_notes;

  const SpanAnnotation& spans() const { return std::get<SpanAnnotation>(payload); }
  const BinaryAnnotation& verdicts() const {
    return std::get<BinaryAnnotation>(payload);
  }
};

/// Extracts the first well-formed payload of `kind` from raw model output.
/// Throws ParseFailure, or IncompleteVerdicts for a verdict list that misses
/// a slug. Never throws anything else, whatever the input bytes.
ParsedOutput parse(std::string_view output, QuestionnaireId q, OutputKind kind,
                   const ParseOptions& options = {},
                   const std::string& post_id = {});

/// Python-literal style verdict list, slug-sorted:
/// [['slug-a', 'yes'], ['slug-b', 'no']]
std::string render_verdict_pairs(const BinaryAnnotation& a);

/// Canonical span-map payload: {"annotations": {...}} with 2-space indent.
std::string render_span_map(const SpanAnnotation& a);

struct EchoVerdict {
  bool is_echo = false;
  double overlap_ratio = 0.0;
};

inline constexpr double kDefaultEchoThreshold = 0.95;
inline constexpr double kDefaultAlignmentThreshold = 0.80;

/// Token LCS of normalized output against normalized prompt, over the
/// output's token count. Outputs with no tokens score 0.
EchoVerdict detect_echo(std::string_view prompt, std::string_view output,
                        double threshold = kDefaultEchoThreshold);

struct AlignedSpan {
  std::string raw_span;
  std::size_t start = 0;  // byte offsets into the post body, half-open
  std::size_t end = 0;
  double alignment_score = 0.0;
};

/// Best-scoring token window of `body` for `span`, regardless of threshold.
/// Ties go to the earliest, then shortest, window. Score 0 with an empty
/// range when either side has no tokens.
AlignedSpan best_alignment(std::string_view span, std::string_view body);

/// best_alignment, throwing AlignmentFailure below `threshold`.
AlignedSpan align(std::string_view span, const Post& post,
                  double threshold = kDefaultAlignmentThreshold);

}  // namespace diagann
