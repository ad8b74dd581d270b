#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "diagann/corpus.hpp"
#include "diagann/evaluation.hpp"
#include "diagann/llm_gateway.hpp"
#include "diagann/prompting.hpp"
#include "diagann/response_parsing.hpp"
#include "diagann/review_service.hpp"

namespace diagann {

/// Exemplar = record `index` of a PRIMATE file plus record `expected_index`
/// of a span file holding its expected output.
struct ExemplarRef {
  std::filesystem::path corpus;
  std::size_t index = 0;
  std::filesystem::path expected;
  std::size_t expected_index = 0;
};

struct RunConfig {
  std::filesystem::path base_dir;  // relative paths resolve against this

  QuestionnaireId questionnaire = QuestionnaireId::kPhq9;
  PromptMode mode = PromptMode::kExemplar;
  OutputKind output_format = OutputKind::kSpanMap;
  std::vector<ExemplarRef> exemplars;
  std::optional<std::string> guidance_preamble;
  std::string system_message;

  std::map<std::string, ModelEndpoint> endpoints;
  std::string endpoint;  // key into endpoints

  std::filesystem::path cassette;
  CassetteMode cassette_mode = CassetteMode::kReplay;

  std::filesystem::path corpus;       // posts to annotate
  std::filesystem::path truth;        // span ground truth for evaluate
  std::filesystem::path predictions;  // annotate output for evaluate
  std::filesystem::path out;          // output directory

  std::string similarity = "lexical";  // or "endpoint:<name>"
  double echo_threshold = kDefaultEchoThreshold;
  double alignment_threshold = kDefaultAlignmentThreshold;
  double match_threshold = kDefaultMatchThreshold;
  Averaging averaging = Averaging::kMicro;
  ExclusionPolicy exclusion = ExclusionPolicy::kCountAsNo;
  bool strict = false;
  RateLimitPolicy rate_limit;

  // review service
  std::filesystem::path review_log;
  std::vector<Reviewer> reviewers;  // tokens resolved from token_env at load
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path ui_dir;
  ConsensusPolicy policy = ConsensusPolicy::kUnanimous;

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  const ModelEndpoint& selected_endpoint() const;
  /// Replay needs a cassette path; referenced input files must exist.
  void validate_for_annotate() const;
};

/// Throws PreconditionError on malformed config.
RunConfig parse_config(std::string_view json_text,
                       const std::filesystem::path& base_dir);
RunConfig load_config(const std::filesystem::path& path);

PromptSpec build_prompt_spec(const RunConfig& config);

/// Posts from either corpus format.
std::vector<Post> load_posts(std::string_view content, std::string_view source,
                             QuestionnaireId q);

enum class AuditKind { kEcho, kParseFailure, kAlignmentFailure };
std::string_view to_string(AuditKind k);

struct AuditRecord {
  std::string post_id;
  std::string model;
  AuditKind kind = AuditKind::kParseFailure;
  std::string raw_text;
  std::string detail;
};

struct AnnotatedPost {
  Post post;
  PredictionStatus status = PredictionStatus::kOk;
  std::variant<SpanAnnotation, BinaryAnnotation> annotation;
};

struct AnnotationRun {
  std::string model;
  QuestionnaireId questionnaire = QuestionnaireId::kPhq9;
  OutputKind output_format = OutputKind::kSpanMap;
  std::vector<AnnotatedPost> posts;
  std::vector<AuditRecord> audit;

  std::size_t count(PredictionStatus s) const;
  std::size_t alignment_failures() const;
};

struct AnnotateOptions {
  double echo_threshold = kDefaultEchoThreshold;
  double alignment_threshold = kDefaultAlignmentThreshold;
  ParseOptions parse;
};

/// Turns raw model outputs into annotations and audit records. `outputs[i]`
/// answers `prompts[i]` for `posts[i]`.
AnnotationRun interpret_outputs(const std::vector<Post>& posts,
                                const std::vector<RenderedPrompt>& prompts,
                                const std::vector<std::string>& outputs,
                                const std::string& model, QuestionnaireId q,
                                OutputKind kind, const AnnotateOptions& options);

/// Renders, completes through the gateway and interprets every post.
/// Gateway failures (ReplayMiss, EndpointError) propagate for the first
/// failing post in corpus order.
AnnotationRun run_annotation(const std::vector<Post>& posts, const PromptSpec& spec,
                             const ModelEndpoint& endpoint, Gateway& gateway,
                             Cassette& cassette, const AnnotateOptions& options,
                             const std::function<void(std::size_t, std::size_t)>&
                                 progress = {});

/// JSON array in ground-truth format plus a per-record "status" field.
std::string serialize_annotations(const AnnotationRun& run);
/// JSON lines, corpus order.
std::string serialize_audit(const AnnotationRun& run);

/// Reads span-format annotate output back as predictions.
std::vector<Prediction> load_predictions(std::string_view content,
                                         QuestionnaireId q,
                                         std::string_view source);

}  // namespace diagann
