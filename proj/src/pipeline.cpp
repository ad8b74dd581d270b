#include "diagann/pipeline.hpp"

#include <cstdio>
#include <cstdlib>
#include <set>

#include "json.hpp"

#include "diagann/errors.hpp"

namespace diagann {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw PreconditionError(std::string("config: '") + key + "' has the wrong type");
  }
}

void reject_unknown(const json& j, std::initializer_list<std::string_view> known,
                    std::string_view where) {
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw PreconditionError("config: unknown key '" + k + "' in " + std::string(where));
  }
}

ModelEndpoint endpoint_from_json(const std::string& name, const json& j) {
  if (!j.is_object()) throw PreconditionError("config: endpoint " + name + " must be an object");
  reject_unknown(j, {"base_url", "model", "api_key_env", "temperature", "max_tokens",
                     "timeout_seconds"},
                 "endpoint " + name);
  ModelEndpoint e;
  e.name = name;
  e.base_url = get_or<std::string>(j, "base_url", "");
  e.model = get_or<std::string>(j, "model", "");
  e.api_key_env = get_or<std::string>(j, "api_key_env", "");
  e.temperature = get_or<double>(j, "temperature", 0.0);
  e.max_tokens = get_or<int>(j, "max_tokens", 2048);
  e.timeout_seconds = get_or<double>(j, "timeout_seconds", 120.0);
  e.validate();
  return e;
}

std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

Post bare_post(const json& rec, std::string_view source, std::size_t index) {
  if (!rec.is_object()) throw SchemaError(index, "record must be an object");
  Post p;
  const auto title = rec.find("post_title");
  if (title != rec.end() && title->is_string()) p.title = title->get<std::string>();
  const auto body = rec.find("post_text");
  if (body == rec.end() || !body->is_string() || body->get_ref<const std::string&>().empty())
    throw SchemaError(index, "post_text must be a non-empty string");
  p.body = body->get<std::string>();
  const auto id = rec.find("post_id");
  p.id = (id != rec.end() && id->is_string() && !id->get_ref<const std::string&>().empty())
             ? id->get<std::string>()
             : positional_id(source, index);
  return p;
}

}  // namespace

std::filesystem::path RunConfig::resolve(const std::filesystem::path& p) const {
  if (p.empty() || p.is_absolute()) return p;
  return base_dir / p;
}

const ModelEndpoint& RunConfig::selected_endpoint() const {
  if (endpoint.empty()) {
    if (endpoints.size() == 1) return endpoints.begin()->second;
    throw PreconditionError("no endpoint selected (use --endpoint-name)");
  }
  const auto it = endpoints.find(endpoint);
  if (it == endpoints.end()) throw PreconditionError("unknown endpoint '" + endpoint + "'");
  return it->second;
}

void RunConfig::validate_for_annotate() const {
  if (cassette_mode == CassetteMode::kReplay && cassette.empty())
    throw PreconditionError("replay mode requires a cassette path");
  if (corpus.empty()) throw PreconditionError("no corpus configured");
  auto must_exist = [this](const std::filesystem::path& p) {
    if (!std::filesystem::exists(resolve(p)))
      throw PreconditionError("file not found: " + resolve(p).string());
  };
  must_exist(corpus);
  if (cassette_mode == CassetteMode::kReplay) must_exist(cassette);
  for (const auto& e : exemplars) {
    must_exist(e.corpus);
    must_exist(e.expected);
  }
  selected_endpoint();
}

RunConfig parse_config(std::string_view json_text, const std::filesystem::path& base_dir) {
  const json j = json::parse(json_text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw PreconditionError("config must be a JSON object");
  reject_unknown(j, {"questionnaire", "prompt", "endpoints", "endpoint", "cassette", "corpus",
                     "truth", "predictions", "out", "similarity", "thresholds", "averaging",
                     "exclusion", "strict", "rate_limit", "review"},
                 "config");
  RunConfig c;
  c.base_dir = base_dir;
  c.questionnaire = parse_questionnaire(get_or<std::string>(j, "questionnaire", "phq9"));

  if (const auto it = j.find("prompt"); it != j.end()) {
    const json& p = *it;
    reject_unknown(p, {"mode", "output_format", "exemplars", "guidance_preamble",
                       "system_message"},
                   "prompt");
    c.mode = parse_prompt_mode(get_or<std::string>(p, "mode", "exemplar"));
    c.output_format = parse_output_kind(get_or<std::string>(p, "output_format", "span_map"));
    if (p.contains("guidance_preamble"))
      c.guidance_preamble = get_or<std::string>(p, "guidance_preamble", "");
    c.system_message = get_or<std::string>(p, "system_message", "");
    const json exemplars = p.value("exemplars", json::array());
    for (const auto& e : exemplars) {
      reject_unknown(e, {"corpus", "index", "expected", "expected_index"}, "exemplar");
      ExemplarRef ref;
      ref.corpus = get_or<std::string>(e, "corpus", "");
      ref.index = get_or<std::size_t>(e, "index", 0);
      ref.expected = get_or<std::string>(e, "expected", "");
      ref.expected_index = get_or<std::size_t>(e, "expected_index", 0);
      if (ref.corpus.empty() || ref.expected.empty())
        throw PreconditionError("config: exemplar needs corpus and expected");
      c.exemplars.push_back(std::move(ref));
    }
  }

  const json endpoints = j.value("endpoints", json::object());
  for (const auto& [name, e] : endpoints.items())
    c.endpoints.emplace(name, endpoint_from_json(name, e));
  c.endpoint = get_or<std::string>(j, "endpoint", "");

  if (const auto it = j.find("cassette"); it != j.end()) {
    reject_unknown(*it, {"path", "mode"}, "cassette");
    c.cassette = get_or<std::string>(*it, "path", "");
    c.cassette_mode = parse_cassette_mode(get_or<std::string>(*it, "mode", "replay"));
  }
  c.corpus = get_or<std::string>(j, "corpus", "");
  c.truth = get_or<std::string>(j, "truth", "");
  c.predictions = get_or<std::string>(j, "predictions", "");
  c.out = get_or<std::string>(j, "out", "");
  c.similarity = get_or<std::string>(j, "similarity", "lexical");

  if (const auto it = j.find("thresholds"); it != j.end()) {
    reject_unknown(*it, {"echo", "alignment", "match"}, "thresholds");
    c.echo_threshold = get_or<double>(*it, "echo", c.echo_threshold);
    c.alignment_threshold = get_or<double>(*it, "alignment", c.alignment_threshold);
    c.match_threshold = get_or<double>(*it, "match", c.match_threshold);
  }
  for (const double t : {c.echo_threshold, c.alignment_threshold, c.match_threshold})
    if (!(t >= 0.0 && t <= 1.0)) throw PreconditionError("config: thresholds must be in [0,1]");

  c.averaging = parse_averaging(get_or<std::string>(j, "averaging", "micro"));
  c.exclusion = parse_exclusion_policy(get_or<std::string>(j, "exclusion", "count-as-no"));
  c.strict = get_or<bool>(j, "strict", false);

  if (const auto it = j.find("rate_limit"); it != j.end()) {
    reject_unknown(*it, {"max_in_flight", "requests_per_minute", "max_attempts",
                         "backoff_base_ms", "backoff_cap_ms"},
                   "rate_limit");
    auto& r = c.rate_limit;
    r.max_in_flight = get_or<int>(*it, "max_in_flight", r.max_in_flight);
    r.requests_per_minute = get_or<double>(*it, "requests_per_minute", r.requests_per_minute);
    r.retry.max_attempts = get_or<int>(*it, "max_attempts", r.retry.max_attempts);
    r.retry.base = std::chrono::milliseconds(
        get_or<std::int64_t>(*it, "backoff_base_ms", r.retry.base.count()));
    r.retry.cap = std::chrono::milliseconds(
        get_or<std::int64_t>(*it, "backoff_cap_ms", r.retry.cap.count()));
    r.validate();
  }

  if (const auto it = j.find("review"); it != j.end()) {
    const json& r = *it;
    reject_unknown(r, {"log", "reviewers", "host", "port", "ui_dir", "policy"}, "review");
    c.review_log = get_or<std::string>(r, "log", "");
    c.host = get_or<std::string>(r, "host", c.host);
    c.port = get_or<int>(r, "port", c.port);
    c.ui_dir = get_or<std::string>(r, "ui_dir", "");
    c.policy = parse_consensus_policy(get_or<std::string>(r, "policy", "unanimous"));
    const json reviewers = r.value("reviewers", json::array());
    for (const auto& rv : reviewers) {
      reject_unknown(rv, {"id", "token", "token_env"}, "reviewer");
      Reviewer reviewer;
      reviewer.id = get_or<std::string>(rv, "id", "");
      if (reviewer.id.empty()) throw PreconditionError("config: reviewer needs an id");
      reviewer.token = get_or<std::string>(rv, "token", "");
      const auto env = get_or<std::string>(rv, "token_env", "");
      if (!env.empty()) {
        const char* v = std::getenv(env.c_str());
        if (v != nullptr) reviewer.token = v;
      }
      c.reviewers.push_back(std::move(reviewer));
    }
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_file(path), path.parent_path());
}

PromptSpec build_prompt_spec(const RunConfig& config) {
  PromptSpec spec;
  spec.mode = config.mode;
  spec.questionnaire = config.questionnaire;
  spec.output_format = config.output_format;
  spec.guidance_preamble = config.guidance_preamble;
  spec.system_message = config.system_message;
  for (const auto& ref : config.exemplars) {
    const auto corpus_path = config.resolve(ref.corpus);
    const auto expected_path = config.resolve(ref.expected);
    const auto inputs = load_primate(read_file(corpus_path),
                                     corpus_path.filename().string(), config.questionnaire);
    const auto outputs = load_span_ground_truth(read_file(expected_path), config.questionnaire,
                                                expected_path.filename().string());
    if (ref.index >= inputs.size() || ref.expected_index >= outputs.size())
      throw PreconditionError("exemplar index out of range");
    spec.exemplars.push_back({inputs[ref.index], outputs[ref.expected_index].annotation});
  }
  spec.validate();
  return spec;
}

std::vector<Post> load_posts(std::string_view content, std::string_view source,
                             QuestionnaireId q) {
  std::vector<Post> posts;
  const auto records = split_records(content);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const json& rec = records[i];
    const auto ann = rec.is_object() ? rec.find("annotations") : rec.end();
    Post p;
    if (ann == rec.end())
      p = bare_post(rec, source, i);
    else if (ann->is_object())
      p = span_record_from_json(rec, q, source, i).post;
    else
      p = primate_from_json(rec, q, source, i).post;
    if (!seen.insert(p.id).second) throw SchemaError(i, "duplicate post id '" + p.id + "'");
    posts.push_back(std::move(p));
  }
  return posts;
}

std::string_view to_string(AuditKind k) {
  switch (k) {
    case AuditKind::kEcho:
      return "echo";
    case AuditKind::kParseFailure:
      return "parse_failure";
    case AuditKind::kAlignmentFailure:
      return "alignment_failure";
  }
  return "parse_failure";
}

std::size_t AnnotationRun::count(PredictionStatus s) const {
  return static_cast<std::size_t>(std::count_if(
      posts.begin(), posts.end(), [s](const AnnotatedPost& p) { return p.status == s; }));
}

std::size_t AnnotationRun::alignment_failures() const {
  return static_cast<std::size_t>(
      std::count_if(audit.begin(), audit.end(), [](const AuditRecord& a) {
        return a.kind == AuditKind::kAlignmentFailure;
      }));
}

AnnotationRun interpret_outputs(const std::vector<Post>& posts,
                                const std::vector<RenderedPrompt>& prompts,
                                const std::vector<std::string>& outputs,
                                const std::string& model, QuestionnaireId q,
                                OutputKind kind, const AnnotateOptions& options) {
  if (posts.size() != prompts.size() || posts.size() != outputs.size())
    throw LengthMismatch("posts, prompts and outputs differ in length");
  AnnotationRun run;
  run.model = model;
  run.questionnaire = q;
  run.output_format = kind;
  for (std::size_t i = 0; i < posts.size(); ++i) {
    const Post& post = posts[i];
    const std::string& raw = outputs[i];
    AnnotatedPost ap;
    ap.post = post;
    if (kind == OutputKind::kSpanMap)
      ap.annotation = SpanAnnotation::empty(q, post.id);
    else
      ap.annotation = BinaryAnnotation{post.id, q, {}};

    const EchoVerdict echo = detect_echo(prompts[i].flat_text(), raw, options.echo_threshold);
    if (echo.is_echo) {
      ap.status = PredictionStatus::kEcho;
      run.audit.push_back({post.id, model, AuditKind::kEcho, raw,
                           "overlap_ratio=" + format_score(echo.overlap_ratio)});
      run.posts.push_back(std::move(ap));
      continue;
    }
    try {
      ParsedOutput parsed = parse(raw, q, kind, options.parse, post.id);
      ap.annotation = parsed.payload;
    } catch (const ParseFailure& e) {
      ap.status = PredictionStatus::kParseFailure;
      run.audit.push_back({post.id, model, AuditKind::kParseFailure, raw, e.what()});
      run.posts.push_back(std::move(ap));
      continue;
    }
    if (kind == OutputKind::kSpanMap) {
      for (const auto& [slug, spans] : std::get<SpanAnnotation>(ap.annotation).evidence) {
        for (const auto& s : spans) {
          const AlignedSpan a = best_alignment(s, post.body);
          if (a.alignment_score < options.alignment_threshold)
            run.audit.push_back({post.id, model, AuditKind::kAlignmentFailure, s,
                                 slug + " best_score=" + format_score(a.alignment_score)});
        }
      }
    }
    run.posts.push_back(std::move(ap));
  }
  return run;
}

AnnotationRun run_annotation(const std::vector<Post>& posts, const PromptSpec& spec,
                             const ModelEndpoint& endpoint, Gateway& gateway,
                             Cassette& cassette, const AnnotateOptions& options,
                             const std::function<void(std::size_t, std::size_t)>& progress) {
  if (posts.empty()) throw PreconditionError("corpus has no posts");
  spec.validate();
  std::vector<RenderedPrompt> prompts;
  prompts.reserve(posts.size());
  for (const auto& p : posts) prompts.push_back(render(spec, p));
  auto results = gateway.complete_all(endpoint, prompts, cassette, progress);
  std::vector<std::string> outputs;
  outputs.reserve(results.size());
  for (auto& r : results) {
    if (r.error) std::rethrow_exception(r.error);
    outputs.push_back(std::move(r.exchange->response_text));
  }
  return interpret_outputs(posts, prompts, outputs, endpoint.model, spec.questionnaire,
                           spec.output_format, options);
}

std::string serialize_annotations(const AnnotationRun& run) {
  ordered_json arr = ordered_json::array();
  for (const auto& ap : run.posts) {
    ordered_json base;
    ordered_json annotations;
    if (const auto* s = std::get_if<SpanAnnotation>(&ap.annotation)) {
      base = to_json(SpanRecord{ap.post, *s});
      annotations = base["annotations"];
    } else {
      const auto& b = std::get<BinaryAnnotation>(ap.annotation);
      if (ap.status == PredictionStatus::kOk) {
        base = to_json(PrimateRecord{ap.post, b});
        annotations = base["annotations"];
      } else {
        base = to_json(SpanRecord{ap.post, SpanAnnotation::empty(run.questionnaire, ap.post.id)});
        annotations = ordered_json::array();
      }
    }
    ordered_json rec;
    rec["post_id"] = base["post_id"];
    rec["post_title"] = base["post_title"];
    rec["post_text"] = base["post_text"];
    rec["status"] = to_string(ap.status);
    rec["annotations"] = annotations;
    arr.push_back(std::move(rec));
  }
  return arr.dump(2) + "\n";
}

std::string serialize_audit(const AnnotationRun& run) {
  std::string out;
  for (const auto& a : run.audit) {
    ordered_json j;
    j["post_id"] = a.post_id;
    j["model"] = a.model;
    j["kind"] = to_string(a.kind);
    j["raw_text"] = a.raw_text;
    j["detail"] = a.detail;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<Prediction> load_predictions(std::string_view content, QuestionnaireId q,
                                         std::string_view source) {
  std::vector<Prediction> out;
  const auto records = split_records(content);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const json& rec = records[i];
    if (!rec.is_object()) throw SchemaError(i, "record must be an object");
    Prediction p;
    try {
      p.status = parse_prediction_status(rec.value("status", "ok"));
    } catch (const Error& e) {
      throw SchemaError(i, e.what());
    }
    if (p.status == PredictionStatus::kOk) {
      if (!rec.contains("annotations") || !rec.at("annotations").is_object())
        throw SchemaError(i, "predictions must be span annotations (annotations object)");
      SpanRecord r = span_record_from_json(rec, q, source, i);
      p.post_id = r.post.id;
      p.annotation = std::move(r.annotation);
    } else {
      p.post_id = bare_post(rec, source, i).id;
      p.annotation = SpanAnnotation::empty(q, p.post_id);
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace diagann
