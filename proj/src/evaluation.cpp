#include "diagann/evaluation.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "diagann/text.hpp"

namespace diagann {

double lexical_similarity(std::string_view a, std::string_view b) {
  std::map<std::string, double> ta, tb;
  for (auto& t : text::normalize(a)) ta[std::move(t)] += 1.0;
  for (auto& t : text::normalize(b)) tb[std::move(t)] += 1.0;
  if (ta.empty() || tb.empty()) return 0.0;
  double dot = 0, na = 0, nb = 0;
  for (const auto& [term, f] : ta) {
    na += f * f;
    if (const auto it = tb.find(term); it != tb.end()) dot += f * it->second;
  }
  for (const auto& [term, f] : tb) nb += f * f;
  return std::clamp(dot / std::sqrt(na * nb), 0.0, 1.0);
}

bool spans_match(std::string_view predicted, std::string_view truth,
                 double threshold) {
  return text::text_similarity(predicted, truth) >= threshold;
}

std::vector<std::size_t> rank_spans(std::span<const std::string> spans,
                                    std::string_view item_text,
                                    SimilarityBackend& backend) {
  std::vector<double> score(spans.size());
  for (std::size_t i = 0; i < spans.size(); ++i)
    score[i] = backend.similarity(spans[i], item_text);
  std::vector<std::size_t> order(spans.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return score[x] > score[y];
  });
  return order;
}

std::optional<std::size_t> first_hit_rank(
    std::span<const std::string> predicted, std::span<const std::string> truth,
    std::string_view item_text, SimilarityBackend& backend,
    double match_threshold) {
  const auto order = rank_spans(predicted, item_text, backend);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& p = predicted[order[r]];
    for (const auto& t : truth) {
      if (spans_match(p, t, match_threshold)) return r + 1;
    }
  }
  return std::nullopt;
}

namespace {

const std::vector<std::string>& spans_for(const SpanAnnotation& a,
                                          const std::string& slug) {
  static const std::vector<std::string> kNone;
  const auto it = a.evidence.find(slug);
  return it == a.evidence.end() ? kNone : it->second;
}

}  // namespace

bool hits_at_k(const SpanAnnotation& predicted, const SpanAnnotation& truth,
               const SymptomItem& item, std::size_t k,
               SimilarityBackend& backend, double match_threshold) {
  const std::string slug(item.slug);
  const auto& t = spans_for(truth, slug);
  if (t.empty())
    throw PreconditionError("hits@k needs ground-truth evidence for " + slug);
  const auto rank =
      first_hit_rank(spans_for(predicted, slug), t, item.text, backend,
                     match_threshold);
  return rank.has_value() && *rank <= k;
}

std::string_view to_string(Averaging a) {
  return a == Averaging::kMicro ? "micro" : "macro";
}

Averaging parse_averaging(std::string_view s) {
  if (s == "micro") return Averaging::kMicro;
  if (s == "macro") return Averaging::kMacro;
  throw PreconditionError("averaging must be micro or macro");
}

namespace {

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  void add(bool predicted, bool truth) {
    if (predicted && truth) ++tp;
    else if (predicted) ++fp;
    else if (truth) ++fn;
    else ++tn;
  }
  std::size_t total() const { return tp + fp + fn + tn; }
};

double ratio(std::size_t num, std::size_t den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

struct Metrics {
  double accuracy, precision, recall, f1;
};

Metrics metrics_of(const Counts& c, bool& degenerate) {
  Metrics m{};
  m.accuracy = ratio(c.tp + c.tn, c.total(), degenerate);
  m.precision = ratio(c.tp, c.tp + c.fp, degenerate);
  m.recall = ratio(c.tp, c.tp + c.fn, degenerate);
  if (m.precision + m.recall == 0.0) {
    degenerate = true;
    m.f1 = 0.0;
  } else {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  }
  return m;
}

}  // namespace

ClassificationReport classification_metrics(std::span<const LabeledPair> pairs,
                                            Averaging averaging) {
  if (pairs.empty()) throw EmptyInput("classification_metrics needs pairs");
  ClassificationReport r;
  r.averaging = averaging;
  Counts pooled;
  std::map<std::string, Counts> per_slug;
  for (const auto& p : pairs) {
    pooled.add(p.predicted, p.truth);
    per_slug[p.slug].add(p.predicted, p.truth);
  }
  r.tp = pooled.tp;
  r.fp = pooled.fp;
  r.fn = pooled.fn;
  r.tn = pooled.tn;
  if (averaging == Averaging::kMicro) {
    const Metrics m = metrics_of(pooled, r.degenerate);
    r.accuracy = m.accuracy;
    r.precision = m.precision;
    r.recall = m.recall;
    r.f1 = m.f1;
    return r;
  }
  for (const auto& [slug, c] : per_slug) {
    const Metrics m = metrics_of(c, r.degenerate);
    r.accuracy += m.accuracy;
    r.precision += m.precision;
    r.recall += m.recall;
    r.f1 += m.f1;
  }
  const auto n = static_cast<double>(per_slug.size());
  r.accuracy /= n;
  r.precision /= n;
  r.recall /= n;
  r.f1 /= n;
  return r;
}

double mean_kappa(std::span<const KappaReport> reports) {
  if (reports.empty()) throw EmptyInput("no kappa reports to average");
  double sum = 0;
  for (const auto& r : reports) sum += r.kappa;
  return sum / static_cast<double>(reports.size());
}

std::string_view to_string(PredictionStatus s) {
  switch (s) {
    case PredictionStatus::kOk:
      return "ok";
    case PredictionStatus::kEcho:
      return "echo";
    case PredictionStatus::kParseFailure:
      return "parse_failure";
  }
  return "ok";
}

PredictionStatus parse_prediction_status(std::string_view s) {
  if (s == "ok") return PredictionStatus::kOk;
  if (s == "echo") return PredictionStatus::kEcho;
  if (s == "parse_failure") return PredictionStatus::kParseFailure;
  throw PreconditionError("unknown prediction status '" + std::string(s) + "'");
}

std::string_view to_string(ExclusionPolicy p) {
  return p == ExclusionPolicy::kCountAsNo ? "count-as-no" : "exclude-all";
}

ExclusionPolicy parse_exclusion_policy(std::string_view s) {
  if (s == "count-as-no") return ExclusionPolicy::kCountAsNo;
  if (s == "exclude-all") return ExclusionPolicy::kExcludeAll;
  throw PreconditionError("exclusion policy must be count-as-no or exclude-all");
}

EvaluationReport evaluate_run(std::span<const Prediction> predictions,
                              std::span<const SpanRecord> truth,
                              SimilarityBackend& backend,
                              const EvalOptions& options) {
  std::map<std::string, const SpanRecord*> truth_by_id;
  for (const auto& t : truth) truth_by_id.emplace(t.post.id, &t);

  // Keyed by post id so the result is independent of input order.
  std::map<std::string, const Prediction*> joined;
  for (const auto& p : predictions) {
    if (!truth_by_id.contains(p.post_id))
      throw JoinError("prediction for unknown post '" + p.post_id + "'");
    if (!joined.emplace(p.post_id, &p).second)
      throw JoinError("duplicate prediction for post '" + p.post_id + "'");
  }
  if (joined.empty()) throw EmptyInput("no predictions joined to the ground truth");

  const QuestionnaireId q = truth_by_id.at(joined.begin()->first)->annotation.questionnaire;
  EvaluationReport r;
  r.primary_averaging = options.primary_averaging;
  r.predictions = joined.size();
  r.backend = backend.name();
  r.exclusion = std::string(to_string(options.exclusion));
  r.hits.model = options.model;
  r.hits.questionnaire = q;

  std::vector<LabeledPair> pairs;
  for (const auto& [id, pred] : joined) {
    const SpanAnnotation& gold = truth_by_id.at(id)->annotation;
    const bool excluded = pred->status != PredictionStatus::kOk;
    if (pred->status == PredictionStatus::kEcho) ++r.echo_posts;
    if (pred->status == PredictionStatus::kParseFailure) ++r.parse_failure_posts;
    if (excluded) ++r.hits.excluded_posts;
    if (excluded && options.exclusion == ExclusionPolicy::kExcludeAll) continue;

    for (const auto& item : items(q)) {
      const std::string slug(item.slug);
      const bool predicted = !excluded && pred->annotation.present(slug);
      pairs.push_back({slug, predicted, gold.present(slug)});
      if (excluded) continue;
      const auto& t = spans_for(gold, slug);
      if (t.empty()) {
        ++r.hits.skipped_pairs;
        continue;
      }
      ++r.hits.evaluated_pairs;
      const auto rank = first_hit_rank(spans_for(pred->annotation, slug), t,
                                       item.text, backend,
                                       options.match_threshold);
      if (rank && *rank <= 1) ++r.hits.hits_1;
      if (rank && *rank <= 5) ++r.hits.hits_5;
    }
  }
  if (r.hits.evaluated_pairs > 0) {
    const auto n = static_cast<double>(r.hits.evaluated_pairs);
    r.hits.hits_at_1 = static_cast<double>(r.hits.hits_1) / n;
    r.hits.hits_at_5 = static_cast<double>(r.hits.hits_5) / n;
  }
  if (pairs.empty())
    throw EmptyInput("every joined prediction was excluded");
  r.micro = classification_metrics(pairs, Averaging::kMicro);
  r.macro = classification_metrics(pairs, Averaging::kMacro);
  return r;
}

namespace {

nlohmann::ordered_json classification_json(const ClassificationReport& c) {
  nlohmann::ordered_json j;
  j["averaging"] = to_string(c.averaging);
  j["accuracy"] = c.accuracy;
  j["precision"] = c.precision;
  j["recall"] = c.recall;
  j["f1"] = c.f1;
  j["tp"] = c.tp;
  j["fp"] = c.fp;
  j["fn"] = c.fn;
  j["tn"] = c.tn;
  j["degenerate"] = c.degenerate;
  return j;
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

}  // namespace

std::string report_json(const EvaluationReport& r) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["model"] = r.hits.model;
  j["questionnaire"] = to_string(r.hits.questionnaire);
  j["similarity_backend"] = r.backend;
  j["exclusion_policy"] = r.exclusion;
  j["predictions"] = r.predictions;
  j["echo_posts"] = r.echo_posts;
  j["parse_failure_posts"] = r.parse_failure_posts;
  auto& h = j["hits"];
  h["hits_at_1"] = r.hits.hits_at_1;
  h["hits_at_5"] = r.hits.hits_at_5;
  h["evaluated_pairs"] = r.hits.evaluated_pairs;
  h["hits_1"] = r.hits.hits_1;
  h["hits_5"] = r.hits.hits_5;
  h["skipped_pairs"] = r.hits.skipped_pairs;
  h["excluded_posts"] = r.hits.excluded_posts;
  j["primary_averaging"] = to_string(r.primary_averaging);
  j["classification"]["micro"] = classification_json(r.micro);
  j["classification"]["macro"] = classification_json(r.macro);
  return j.dump(2) + "\n";
}

std::string report_table(const EvaluationReport& r) {
  std::ostringstream out;
  const std::string& model = r.hits.model;
  const int model_w = static_cast<int>(std::max<std::size_t>(model.size(), 10));
  out << "hits@k (" << display_name(r.hits.questionnaire) << ", "
      << r.hits.evaluated_pairs << " pairs, " << r.hits.skipped_pairs
      << " skipped, " << r.hits.excluded_posts << " posts excluded)\n";
  out << std::left << std::setw(20) << "Evaluation Metric" << std::right
      << std::setw(model_w) << model << "\n";
  out << std::left << std::setw(20) << "hits@1" << std::right
      << std::setw(model_w) << fixed(100.0 * r.hits.hits_at_1, 1) + "%" << "\n";
  out << std::left << std::setw(20) << "hits@<5" << std::right
      << std::setw(model_w) << fixed(100.0 * r.hits.hits_at_5, 1) + "%" << "\n";
  out << "\n";
  out << "Classification (" << r.micro.tp + r.micro.fp + r.micro.fn + r.micro.tn
      << " symptom pairs)\n";
  out << std::left << std::setw(model_w + 8) << "Method" << std::right
      << std::setw(10) << "Accuracy" << std::setw(11) << "Precision"
      << std::setw(8) << "Recall" << std::setw(10) << "F1-score" << "\n";
  for (const auto* c : {&r.micro, &r.macro}) {
    const std::string label = model + " (" + std::string(to_string(c->averaging)) + ")";
    out << std::left << std::setw(model_w + 8) << label << std::right
        << std::setw(10) << fixed(c->accuracy, 2) << std::setw(11)
        << fixed(c->precision, 2) << std::setw(8) << fixed(c->recall, 2)
        << std::setw(10) << fixed(c->f1, 2)
        << (c->degenerate ? "  (0/0 reported as 0)" : "") << "\n";
  }
  return out.str();
}

}  // namespace diagann
