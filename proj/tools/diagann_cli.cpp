// diagann command-line entry point.

#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <pthread.h>

#include "CLI11.hpp"

#include "diagann/corpus.hpp"
#include "diagann/errors.hpp"
#include "diagann/evaluation.hpp"
#include "diagann/finetune_export.hpp"
#include "diagann/llm_gateway.hpp"
#include "diagann/pipeline.hpp"
#include "diagann/questionnaire.hpp"
#include "diagann/review_service.hpp"

namespace fs = std::filesystem;
using namespace diagann;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitData = 1;
constexpr int kExitUsage = 2;
constexpr int kExitEndpoint = 3;

struct Overrides {
  std::string config;
  std::string questionnaire;
  std::string mode;
  std::string prompt_mode;
  std::string cassette;
  std::string endpoint_name;
  std::string out;
  bool strict = false;
  std::string averaging;
  std::string policy;
  std::string corpus;
  std::string truth;
  std::string predictions;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run config");
  cmd->add_option("--questionnaire", o.questionnaire, "phq9 | gad7")
      ->check(CLI::IsMember({"phq9", "gad7"}));
}

RunConfig effective_config(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.config.empty()) c.base_dir = fs::current_path();
  // flags win; flag paths are relative to the working directory
  auto flag_path = [](const std::string& s) { return fs::absolute(s); };
  if (!o.questionnaire.empty()) c.questionnaire = parse_questionnaire(o.questionnaire);
  if (!o.mode.empty()) c.cassette_mode = parse_cassette_mode(o.mode);
  if (!o.prompt_mode.empty()) c.mode = parse_prompt_mode(o.prompt_mode);
  if (!o.cassette.empty()) c.cassette = flag_path(o.cassette);
  if (!o.endpoint_name.empty()) c.endpoint = o.endpoint_name;
  if (!o.out.empty()) c.out = flag_path(o.out);
  if (o.strict) c.strict = true;
  if (!o.averaging.empty()) c.averaging = parse_averaging(o.averaging);
  if (!o.policy.empty()) c.policy = parse_consensus_policy(o.policy);
  if (!o.corpus.empty()) c.corpus = flag_path(o.corpus);
  if (!o.truth.empty()) c.truth = flag_path(o.truth);
  if (!o.predictions.empty()) c.predictions = flag_path(o.predictions);
  return c;
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << content;
  f.close();
  if (!f) throw SinkError("cannot write " + path.string());
}

fs::path out_dir(const RunConfig& c) {
  if (c.out.empty()) throw PreconditionError("no output directory (use --out)");
  return c.resolve(c.out);
}

// -- validate --

int cmd_validate(const std::vector<std::string>& paths, const std::string& q_name) {
  const QuestionnaireId q = parse_questionnaire(q_name.empty() ? "phq9" : q_name);
  int rc = kExitOk;
  for (const auto& p : paths) {
    try {
      const std::string content = read_file(p);
      const std::string name = fs::path(p).filename().string();
      switch (detect_kind(content)) {
        case CorpusKind::kEmpty:
          std::cout << p << ": ok (0 records)\n";
          break;
        case CorpusKind::kPrimate:
          std::cout << p << ": ok (" << load_primate(content, name, q).size()
                    << " PRIMATE records)\n";
          break;
        case CorpusKind::kSpans:
          std::cout << p << ": ok (" << load_span_ground_truth(content, q, name).size()
                    << " span records)\n";
          break;
      }
    } catch (const SchemaError& e) {
      std::cerr << p << ": " << e.what() << "\n";
      rc = kExitData;
    } catch (const Error& e) {
      std::cerr << p << ": " << e.what() << "\n";
      rc = kExitData;
    }
  }
  return rc;
}

// -- annotate --

int cmd_annotate(const Overrides& o) {
  const RunConfig c = effective_config(o);
  c.validate_for_annotate();
  const fs::path corpus_path = c.resolve(c.corpus);
  const auto posts = load_posts(read_file(corpus_path), corpus_path.filename().string(),
                                c.questionnaire);
  if (posts.empty()) throw PreconditionError("corpus " + corpus_path.string() + " is empty");
  const PromptSpec spec = build_prompt_spec(c);
  const ModelEndpoint& endpoint = c.selected_endpoint();

  Cassette cassette = c.cassette.empty() ? Cassette::in_memory(c.cassette_mode)
                                         : Cassette::open(c.resolve(c.cassette), c.cassette_mode);
  Gateway gateway(c.rate_limit);
  AnnotateOptions opts;
  opts.echo_threshold = c.echo_threshold;
  opts.alignment_threshold = c.alignment_threshold;
  opts.parse.strict = c.strict;

  const AnnotationRun run = run_annotation(
      posts, spec, endpoint, gateway, cassette, opts, [](std::size_t done, std::size_t total) {
        std::cerr << "\rannotated " << done << "/" << total << std::flush;
      });
  std::cerr << "\n";

  const fs::path dir = out_dir(c);
  write_file(dir / "annotations.json", serialize_annotations(run));
  write_file(dir / "audit.jsonl", serialize_audit(run));
  std::cerr << "posts: " << run.posts.size() << "  ok: " << run.count(PredictionStatus::kOk)
            << "  echo: " << run.count(PredictionStatus::kEcho)
            << "  parse_failure: " << run.count(PredictionStatus::kParseFailure)
            << "  alignment_failure: " << run.alignment_failures()
            << "  network_calls: " << gateway.network_calls() << "\n";
  return kExitOk;
}

// -- evaluate --

int cmd_evaluate(const Overrides& o, const std::string& format) {
  const RunConfig c = effective_config(o);
  if (c.truth.empty()) throw PreconditionError("no truth file (use --truth)");
  fs::path pred_path = c.resolve(c.predictions);
  if (pred_path.empty()) pred_path = out_dir(c) / "annotations.json";
  const fs::path truth_path = c.resolve(c.truth);

  const auto truth = load_span_ground_truth(read_file(truth_path), c.questionnaire,
                                            truth_path.filename().string());
  const auto predictions = load_predictions(read_file(pred_path), c.questionnaire,
                                            pred_path.filename().string());

  EvalOptions opts;
  opts.match_threshold = c.match_threshold;
  opts.exclusion = c.exclusion;
  opts.primary_averaging = c.averaging;
  if (!c.endpoints.empty()) opts.model = c.selected_endpoint().model;

  std::optional<Gateway> gateway;
  std::optional<Cassette> cassette;
  std::unique_ptr<SimilarityBackend> backend;
  if (c.similarity == "lexical") {
    backend = std::make_unique<LexicalBackend>();
  } else if (c.similarity.rfind("endpoint:", 0) == 0) {
    const std::string name = c.similarity.substr(9);
    const auto it = c.endpoints.find(name);
    if (it == c.endpoints.end()) throw PreconditionError("unknown similarity endpoint " + name);
    gateway.emplace(c.rate_limit);
    cassette.emplace(c.cassette.empty() ? Cassette::in_memory(c.cassette_mode)
                                        : Cassette::open(c.resolve(c.cassette), c.cassette_mode));
    backend = std::make_unique<EmbeddingSimilarity>(*gateway, it->second, *cassette);
  } else {
    throw PreconditionError("similarity must be lexical or endpoint:<name>");
  }

  const EvaluationReport report = evaluate_run(predictions, truth, *backend, opts);
  const std::string json_text = report_json(report);
  const std::string table = report_table(report);
  if (!c.out.empty()) {
    const fs::path dir = out_dir(c);
    if (format != "table") write_file(dir / "report.json", json_text);
    if (format != "json") write_file(dir / "report.txt", table);
  }
  std::cout << (format == "json" ? json_text : table);
  return kExitOk;
}

// -- export-finetune --

int cmd_export(const std::string& corpus, const std::string& q_name, const std::string& out,
               const std::string& format, bool no_title) {
  const QuestionnaireId q = parse_questionnaire(q_name.empty() ? "phq9" : q_name);
  const std::string content = read_file(corpus);
  const auto records = load_primate(content, fs::path(corpus).filename().string(), q);
  ExportOptions opts;
  opts.format = parse_export_format(format);
  opts.include_title = !no_title;
  std::size_t n = 0;
  if (out.empty() || out == "-") {
    n = export_finetune(records, q, std::cout, opts);
  } else {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) throw SinkError("cannot open " + out);
    n = export_finetune(records, q, f, opts);
  }
  std::cerr << "exported " << n << " records\n";
  return kExitOk;
}

// -- stats --

int cmd_stats(const std::vector<std::string>& paths, const std::string& q_name) {
  std::size_t total = 0;
  for (const auto& p : paths) {
    const std::string name = fs::path(p).filename().string();
    // GAD-7 files are recognised by name unless --questionnaire is given
    QuestionnaireId q = QuestionnaireId::kPhq9;
    if (!q_name.empty())
      q = parse_questionnaire(q_name);
    else if (name.find("GAD") != std::string::npos || name.find("gad") != std::string::npos)
      q = QuestionnaireId::kGad7;
    const std::string content = read_file(p);
    CorpusStats s;
    switch (detect_kind(content)) {
      case CorpusKind::kEmpty:
        s.name = name;
        break;
      case CorpusKind::kPrimate: {
        const auto r = load_primate(content, name, q);
        s = stats(fs::path(p).stem().string(), r);
        break;
      }
      case CorpusKind::kSpans: {
        const auto r = load_span_ground_truth(content, q, name);
        s = stats(fs::path(p).stem().string(), r);
        break;
      }
    }
    total += s.post_count;
    std::cout << s.name << "\t" << display_name(q) << "\tposts=" << s.post_count << "\n";
    for (const auto& [slug, n] : s.yes_counts) std::cout << "  " << slug << "\t" << n << "\n";
  }
  std::cout << "total\tposts=" << total << "\n";
  return kExitOk;
}

// -- review --

std::vector<std::string> reviewer_ids(const RunConfig& c) {
  std::vector<std::string> ids;
  for (const auto& r : c.reviewers) ids.push_back(r.id);
  if (ids.empty()) throw PreconditionError("config lists no reviewers");
  return ids;
}

int cmd_serve(const Overrides& o, const std::vector<std::string>& enqueue, int port,
              const std::string& ui_dir) {
  RunConfig c = effective_config(o);
  if (c.review_log.empty()) throw PreconditionError("config has no review.log path");
  ReviewStore store(reviewer_ids(c), c.resolve(c.review_log), nullptr, c.alignment_threshold);
  for (const auto& path : enqueue) {
    const auto records = load_span_ground_truth(read_file(path), c.questionnaire,
                                                fs::path(path).filename().string());
    const auto ids = store.enqueue(records);
    std::cerr << "enqueued " << ids.size() << " tasks from " << path << "\n";
  }
  ServerOptions so;
  so.host = c.host;
  so.port = port >= 0 ? port : c.port;
  so.ui_dir = ui_dir.empty() ? c.resolve(c.ui_dir) : fs::path(ui_dir);
  for (const auto& r : c.reviewers)
    if (r.token.empty()) throw PreconditionError("reviewer " + r.id + " has no token");

  // Handle SIGINT/SIGTERM on a dedicated thread so stop() runs outside a
  // signal handler.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  ReviewServer server(store, c.reviewers, so);
  const int bound = server.bind();
  std::cerr << "listening on http://" << so.host << ":" << bound << "\n";
  std::atomic<bool> signalled{false};
  std::jthread waiter([&server, &signalled, signals] {
    int sig = 0;
    sigwait(&signals, &sig);
    signalled = true;
    server.stop();
  });
  server.run();
  // run() can also return on bind/listen failure; wake the waiter then
  if (!signalled) pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  std::cerr << "stopped\n";
  return kExitOk;
}

int cmd_export_validated(const Overrides& o) {
  const RunConfig c = effective_config(o);
  if (c.review_log.empty()) throw PreconditionError("config has no review.log path");
  if (!fs::exists(c.resolve(c.review_log)))
    throw PreconditionError("review log not found: " + c.resolve(c.review_log).string());
  ReviewStore store(reviewer_ids(c), c.resolve(c.review_log), nullptr, c.alignment_threshold);
  const auto records = store.export_validated(c.policy);
  const std::string text = serialize_spans(records);
  if (c.out.empty())
    std::cout << text;
  else
    write_file(c.resolve(c.out), text);
  std::cerr << "validated " << records.size() << " of " << store.size() << " tasks\n";
  return kExitOk;
}

int run(int argc, char** argv) {
  CLI::App app{"Symptom evidence annotation, evaluation and review toolkit"};
  app.require_subcommand(1);
  Overrides o;

  std::vector<std::string> paths;
  auto* validate = app.add_subcommand("validate", "Check corpus files load cleanly");
  validate->add_option("paths", paths, "corpus files")->required();
  validate->add_option("--questionnaire", o.questionnaire)->check(CLI::IsMember({"phq9", "gad7"}));

  auto* annotate = app.add_subcommand("annotate", "Annotate posts through a model endpoint");
  add_common(annotate, o);
  annotate->add_option("--mode", o.mode, "cassette mode")
      ->check(CLI::IsMember({"record", "replay", "passthrough"}));
  annotate->add_option("--prompt-mode", o.prompt_mode)
      ->check(CLI::IsMember({"naive", "exemplar", "guidance"}));
  annotate->add_option("--cassette", o.cassette);
  annotate->add_option("--endpoint-name", o.endpoint_name);
  annotate->add_option("--corpus", o.corpus);
  annotate->add_option("--out", o.out, "output directory");
  annotate->add_flag("--strict", o.strict, "fail on unknown annotation keys");

  std::string report_format = "both";
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions against span ground truth");
  add_common(evaluate, o);
  evaluate->add_option("--predictions", o.predictions);
  evaluate->add_option("--truth", o.truth);
  evaluate->add_option("--out", o.out, "output directory");
  evaluate->add_option("--endpoint-name", o.endpoint_name);
  evaluate->add_option("--cassette", o.cassette);
  evaluate->add_option("--mode", o.mode)->check(CLI::IsMember({"record", "replay", "passthrough"}));
  evaluate->add_option("--averaging", o.averaging)->check(CLI::IsMember({"micro", "macro"}));
  evaluate->add_option("--format", report_format)->check(CLI::IsMember({"json", "table", "both"}));

  std::string export_corpus, export_out, export_format = "jsonl";
  bool no_title = false;
  auto* exp = app.add_subcommand("export-finetune", "Write instruction-tuning JSON lines");
  exp->add_option("corpus", export_corpus, "PRIMATE-format corpus")->required();
  exp->add_option("--questionnaire", o.questionnaire)->check(CLI::IsMember({"phq9", "gad7"}));
  exp->add_option("--out", export_out, "output file (default stdout)");
  exp->add_option("--format", export_format)->check(CLI::IsMember({"jsonl", "text"}));
  exp->add_flag("--no-title", no_title, "omit the post title from the input");

  auto* st = app.add_subcommand("stats", "Post and per-symptom counts");
  st->add_option("paths", paths, "corpus files")->required();
  st->add_option("--questionnaire", o.questionnaire)->check(CLI::IsMember({"phq9", "gad7"}));

  std::vector<std::string> enqueue;
  int port = -1;
  std::string ui_dir;
  auto* serve = app.add_subcommand("serve", "Run the review service");
  add_common(serve, o);
  serve->add_option("--enqueue", enqueue, "span files to queue before serving");
  serve->add_option("--port", port);
  serve->add_option("--ui-dir", ui_dir);
  serve->add_option("--policy", o.policy)->check(CLI::IsMember({"unanimous", "majority"}));

  auto* validated = app.add_subcommand("export-validated", "Write the reviewer-approved subset");
  add_common(validated, o);
  validated->add_option("--policy", o.policy)->check(CLI::IsMember({"unanimous", "majority"}));
  validated->add_option("--out", o.out, "output file (default stdout)");

  app.add_subcommand("questionnaires", "Print the symptom registry");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*validate) return cmd_validate(paths, o.questionnaire);
    if (*annotate) return cmd_annotate(o);
    if (*evaluate) return cmd_evaluate(o, report_format);
    if (*exp) return cmd_export(export_corpus, o.questionnaire, export_out, export_format, no_title);
    if (*st) return cmd_stats(paths, o.questionnaire);
    if (*serve) return cmd_serve(o, enqueue, port, ui_dir);
    if (*validated) return cmd_export_validated(o);
    std::cout << registry_json();
    return kExitOk;
  } catch (const PreconditionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InvalidSpec& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ReplayMiss& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitEndpoint;
  } catch (const EndpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitEndpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
