#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "diagann/corpus.hpp"
#include "diagann/errors.hpp"
#include "diagann/questionnaire.hpp"

namespace diagann {

/// Scores how close a text is to a symptom description. Higher is closer.
class SimilarityBackend {
 public:
  virtual ~SimilarityBackend() = default;
  virtual double similarity(std::string_view a, std::string_view b) = 0;
  virtual std::string name() const = 0;
};

/// Cosine of term-frequency vectors over normalized tokens; 0 when either
/// side has no tokens.
double lexical_similarity(std::string_view a, std::string_view b);

class LexicalBackend final : public SimilarityBackend {
 public:
  double similarity(std::string_view a, std::string_view b) override {
    return lexical_similarity(a, b);
  }
  std::string name() const override { return "lexical"; }
};

inline constexpr double kDefaultMatchThreshold = 0.80;

/// Token-level similarity between a predicted and a ground-truth span meets
/// `threshold`.
bool spans_match(std::string_view predicted, std::string_view truth,
                 double threshold = kDefaultMatchThreshold);

/// Indices of `spans` ordered by descending similarity to `item_text`,
/// ties kept in original order.
std::vector<std::size_t> rank_spans(std::span<const std::string> spans,
                                    std::string_view item_text,
                                    SimilarityBackend& backend);

/// 1-based rank of the first ranked predicted span that matches any truth
/// span; nullopt when none does.
std::optional<std::size_t> first_hit_rank(
    std::span<const std::string> predicted, std::span<const std::string> truth,
    std::string_view item_text, SimilarityBackend& backend,
    double match_threshold = kDefaultMatchThreshold);

/// Throws PreconditionError when the truth has no span for `item`.
bool hits_at_k(const SpanAnnotation& predicted, const SpanAnnotation& truth,
               const SymptomItem& item, std::size_t k,
               SimilarityBackend& backend,
               double match_threshold = kDefaultMatchThreshold);

enum class Averaging { kMicro, kMacro };
std::string_view to_string(Averaging a);
Averaging parse_averaging(std::string_view s);

struct LabeledPair {
  std::string slug;
  bool predicted = false;
  bool truth = false;
};

struct ClassificationReport {
  Averaging averaging = Averaging::kMicro;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  // Some metric hit 0/0 and was reported as 0.
  bool degenerate = false;
};

/// Throws EmptyInput on no pairs.
ClassificationReport classification_metrics(std::span<const LabeledPair> pairs,
                                            Averaging averaging);

struct KappaReport {
  std::string rater_a;
  std::string rater_b;
  std::size_t items = 0;
  double observed = 0;  // po
  double expected = 0;  // pe
  double kappa = 0;
};

/// Cohen's kappa over two aligned label sequences of any ordered category
/// type. Chance agreement sums marginal products over categories in sorted
/// order, so swapping the raters gives a bit-identical result.
template <class Label>
KappaReport cohens_kappa(std::span<const Label> a, std::span<const Label> b) {
  if (a.size() != b.size())
    throw LengthMismatch("rater sequences differ in length (" +
                         std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
  if (a.empty()) throw EmptyInput("cohens_kappa needs at least one item");
  std::vector<Label> categories(a.begin(), a.end());
  categories.insert(categories.end(), b.begin(), b.end());
  std::sort(categories.begin(), categories.end());
  categories.erase(std::unique(categories.begin(), categories.end()),
                   categories.end());

  const double n = static_cast<double>(a.size());
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += (a[i] == b[i]) ? 1 : 0;
  KappaReport r;
  r.items = a.size();
  r.observed = static_cast<double>(same) / n;
  for (const auto& c : categories) {
    const auto ca = static_cast<double>(std::count(a.begin(), a.end(), c));
    const auto cb = static_cast<double>(std::count(b.begin(), b.end(), c));
    r.expected += (ca / n) * (cb / n);
  }
  // pe reaches 1 only when both raters used one and the same category.
  if (categories.size() == 1) {
    r.expected = 1.0;
    if (same != a.size())
      throw DegenerateMarginals("chance agreement is 1 but raters disagree");
    r.kappa = 1.0;
    return r;
  }
  r.kappa = (r.observed - r.expected) / (1.0 - r.expected);
  return r;
}

template <class Label>
KappaReport cohens_kappa(const std::vector<Label>& a, const std::vector<Label>& b) {
  if constexpr (std::is_same_v<Label, bool>) {
    // vector<bool> is not contiguous
    const std::vector<unsigned char> ca(a.begin(), a.end()), cb(b.begin(), b.end());
    return cohens_kappa(std::span<const unsigned char>(ca), std::span<const unsigned char>(cb));
  } else {
    return cohens_kappa(std::span<const Label>(a), std::span<const Label>(b));
  }
}

/// Unweighted mean of the pairwise kappas; EmptyInput when none.
double mean_kappa(std::span<const KappaReport> reports);

// -- run evaluation --

enum class PredictionStatus { kOk, kEcho, kParseFailure };
std::string_view to_string(PredictionStatus s);
PredictionStatus parse_prediction_status(std::string_view s);

struct Prediction {
  std::string post_id;
  PredictionStatus status = PredictionStatus::kOk;
  SpanAnnotation annotation;
};

/// How echo / parse-failure predictions enter the metrics.
enum class ExclusionPolicy {
  kCountAsNo,   // skipped for hits@k, all-no for classification
  kExcludeAll,  // skipped everywhere
};
std::string_view to_string(ExclusionPolicy p);
ExclusionPolicy parse_exclusion_policy(std::string_view s);

struct EvalOptions {
  std::string model = "model";
  double match_threshold = kDefaultMatchThreshold;
  ExclusionPolicy exclusion = ExclusionPolicy::kCountAsNo;
  Averaging primary_averaging = Averaging::kMicro;
};

struct HitsReport {
  std::string model;
  QuestionnaireId questionnaire = QuestionnaireId::kPhq9;
  double hits_at_1 = 0;
  double hits_at_5 = 0;
  std::size_t evaluated_pairs = 0;
  std::size_t hits_1 = 0;
  std::size_t hits_5 = 0;
  std::size_t skipped_pairs = 0;  // empty ground truth for the symptom
  std::size_t excluded_posts = 0; // echo or parse failure
};

struct EvaluationReport {
  HitsReport hits;
  ClassificationReport micro;
  ClassificationReport macro;
  Averaging primary_averaging = Averaging::kMicro;
  std::size_t predictions = 0;
  std::size_t echo_posts = 0;
  std::size_t parse_failure_posts = 0;
  std::string backend;
  std::string exclusion;
};

/// Joins predictions to truth by post id and computes hits@1, hits@5 and
/// both averagings. Result does not depend on prediction order.
/// Throws JoinError (unknown or duplicate post id) and EmptyInput.
EvaluationReport evaluate_run(std::span<const Prediction> predictions,
                              std::span<const SpanRecord> truth,
                              SimilarityBackend& backend,
                              const EvalOptions& options = {});

/// Canonical JSON (2-space indent, trailing newline).
std::string report_json(const EvaluationReport& r);
/// Aligned-column text tables in the hits@k / classification layout.
std::string report_table(const EvaluationReport& r);

}  // namespace diagann
