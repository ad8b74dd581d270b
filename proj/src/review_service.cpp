#include "diagann/review_service.hpp"

#include <algorithm>
#include <mutex>
#include <set>

#include <unistd.h>

#include "httplib.h"

#include "diagann/errors.hpp"

namespace diagann {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(ReviewVerdict v) {
  return v == ReviewVerdict::kAgree ? "agree" : "disagree";
}

ReviewVerdict parse_review_verdict(std::string_view s) {
  if (s == "agree") return ReviewVerdict::kAgree;
  if (s == "disagree") return ReviewVerdict::kDisagree;
  throw PreconditionError("verdict must be agree or disagree");
}

std::string_view to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::kPending:
      return "pending";
    case TaskStatus::kPartiallyReviewed:
      return "partially_reviewed";
    case TaskStatus::kComplete:
      return "complete";
  }
  return "pending";
}

std::string_view to_string(ConsensusPolicy p) {
  return p == ConsensusPolicy::kUnanimous ? "unanimous" : "majority";
}

ConsensusPolicy parse_consensus_policy(std::string_view s) {
  if (s == "unanimous") return ConsensusPolicy::kUnanimous;
  if (s == "majority") return ConsensusPolicy::kMajority;
  throw PreconditionError("policy must be unanimous or majority");
}

std::vector<std::string> ReviewTask::required_slugs() const {
  std::vector<std::string> out;
  for (const auto& [slug, spans] : aligned) out.push_back(slug);
  return out;
}

namespace {

std::int64_t wall_clock_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string task_id_for(std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "task-%06zu", n);
  return buf;
}

}  // namespace

ReviewStore::ReviewStore(std::vector<std::string> reviewers,
                         std::filesystem::path log_path, Clock clock,
                         double alignment_threshold)
    : reviewers_(std::move(reviewers)),
      clock_(clock ? std::move(clock) : Clock(wall_clock_ms)),
      alignment_threshold_(alignment_threshold) {
  std::sort(reviewers_.begin(), reviewers_.end());
  reviewers_.erase(std::unique(reviewers_.begin(), reviewers_.end()), reviewers_.end());
  if (reviewers_.empty()) throw PreconditionError("at least one reviewer is required");
  if (log_path.empty()) return;

  if (std::filesystem::exists(log_path)) {
    const std::string content = read_file(log_path);
    std::size_t pos = 0, line_no = 0;
    while (pos < content.size()) {
      std::size_t nl = content.find('\n', pos);
      if (nl == std::string::npos) nl = content.size();
      const std::string_view line(content.data() + pos, nl - pos);
      pos = nl + 1;
      if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
      const json ev = json::parse(line, nullptr, false);
      if (ev.is_discarded() || !ev.is_object())
        throw SchemaError(line_no, "review log line is not a JSON object");
      try {
        apply(ev);
      } catch (const json::exception& e) {
        throw SchemaError(line_no, std::string("bad review log event: ") + e.what());
      }
      ++line_no;
    }
  } else if (log_path.has_parent_path()) {
    std::filesystem::create_directories(log_path.parent_path());
  }
  log_ = std::fopen(log_path.c_str(), "ab");
  if (log_ == nullptr) throw SinkError("cannot open review log " + log_path.string());
}

ReviewStore::~ReviewStore() {
  if (log_ != nullptr) std::fclose(log_);
}

std::size_t ReviewStore::size() const {
  std::shared_lock lock(mu_);
  return tasks_.size();
}

std::int64_t ReviewStore::next_timestamp() {
  last_ts_ = std::max(last_ts_ + 1, clock_());
  return last_ts_;
}

void ReviewStore::append(const ordered_json& event) {
  if (log_ == nullptr) return;
  const std::string line = event.dump() + "\n";
  if (std::fwrite(line.data(), 1, line.size(), log_) != line.size() ||
      std::fflush(log_) != 0 || ::fsync(::fileno(log_)) != 0)
    throw SinkError("review log append failed");
}

void ReviewStore::recompute(ReviewTask& t) const {
  const auto required = t.required_slugs();
  std::size_t have = 0;
  for (const auto& r : reviewers_)
    for (const auto& s : required) have += t.decisions.count({r, s});
  const std::size_t need = required.size() * reviewers_.size();
  if (have == need)
    t.status = TaskStatus::kComplete;
  else
    t.status = have == 0 ? TaskStatus::kPending : TaskStatus::kPartiallyReviewed;
}

// Shared by live writes and log replay, so replay rebuilds the same state.
void ReviewStore::apply(const json& ev) {
  const auto seq = ev.at("seq").get<std::uint64_t>();
  const auto ts = ev.at("ts").get<std::int64_t>();
  const std::string type = ev.at("type").get<std::string>();
  if (type == "enqueue") {
    const QuestionnaireId q = parse_questionnaire(ev.at("questionnaire").get<std::string>());
    ReviewTask t;
    t.id = ev.at("task_id").get<std::string>();
    t.record = span_record_from_json(ev.at("record"), q, "review-log", tasks_.size());
    for (const auto& [slug, spans] : t.record.annotation.evidence) {
      if (spans.empty()) continue;
      auto& out = t.aligned[slug];
      for (const auto& s : spans) {
        ReviewSpan rs;
        rs.span = best_alignment(s, t.record.post.body);
        rs.aligned = rs.span.alignment_score >= alignment_threshold_;
        out.push_back(std::move(rs));
      }
    }
    recompute(t);
    by_id_[t.id] = tasks_.size();
    by_post_[t.record.post.id] = tasks_.size();
    tasks_.push_back(std::move(t));
  } else if (type == "decision") {
    ReviewDecision d;
    d.reviewer = ev.at("reviewer").get<std::string>();
    d.task_id = ev.at("task_id").get<std::string>();
    d.slug = ev.at("slug").get<std::string>();
    d.verdict = parse_review_verdict(ev.at("verdict").get<std::string>());
    d.note = ev.value("note", "");
    d.timestamp_ms = ts;
    d.seq = seq;
    auto& t = tasks_.at(by_id_.at(d.task_id));
    t.decisions[{d.reviewer, d.slug}] = d;
    recompute(t);
    history_.push_back(std::move(d));
  } else {
    throw SchemaError(SchemaError::kNoRecord, "unknown review event type " + type);
  }
  seq_ = std::max(seq_, seq);
  last_ts_ = std::max(last_ts_, ts);
}

std::vector<std::string> ReviewStore::enqueue(std::span<const SpanRecord> records) {
  std::unique_lock lock(mu_);
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (by_post_.count(r.post.id) || !seen.insert(r.post.id).second)
      throw DuplicatePost("post already queued: " + r.post.id);
  }
  std::vector<std::string> ids;
  for (const auto& r : records) {
    ordered_json ev;
    ev["seq"] = seq_ + 1;
    ev["ts"] = next_timestamp();
    ev["type"] = "enqueue";
    ev["task_id"] = task_id_for(tasks_.size() + 1);
    ev["questionnaire"] = to_string(r.annotation.questionnaire);
    ev["record"] = to_json(r);
    append(ev);
    apply(json::parse(ev.dump()));
    ids.push_back(tasks_.back().id);
  }
  return ids;
}

TaskStatus ReviewStore::submit(ReviewDecision d) {
  std::unique_lock lock(mu_);
  const auto it = by_id_.find(d.task_id);
  if (it == by_id_.end()) throw UnknownTask("unknown task: " + d.task_id);
  if (!std::binary_search(reviewers_.begin(), reviewers_.end(), d.reviewer))
    throw UnknownReviewer("unknown reviewer: " + d.reviewer);
  const ReviewTask& t = tasks_[it->second];
  const std::string slug(resolve_slug(t.record.annotation.questionnaire, d.slug).slug);
  if (!t.aligned.count(slug))
    throw PreconditionError("task " + d.task_id + " has no evidence for " + slug);

  ordered_json ev;
  ev["seq"] = seq_ + 1;
  ev["ts"] = next_timestamp();
  ev["type"] = "decision";
  ev["reviewer"] = d.reviewer;
  ev["task_id"] = d.task_id;
  ev["slug"] = slug;
  ev["verdict"] = to_string(d.verdict);
  if (!d.note.empty()) ev["note"] = d.note;
  append(ev);
  apply(json::parse(ev.dump()));
  return tasks_[it->second].status;
}

ReviewTask ReviewStore::task(const std::string& id) const {
  std::shared_lock lock(mu_);
  const auto it = by_id_.find(id);
  if (it == by_id_.end()) throw UnknownTask("unknown task: " + id);
  return tasks_[it->second];
}

std::vector<ReviewTask> ReviewStore::tasks() const {
  std::shared_lock lock(mu_);
  return tasks_;
}

std::vector<ReviewTask> ReviewStore::queue(const std::string& reviewer) const {
  std::shared_lock lock(mu_);
  if (!std::binary_search(reviewers_.begin(), reviewers_.end(), reviewer))
    throw UnknownReviewer("unknown reviewer: " + reviewer);
  std::vector<ReviewTask> out;
  for (const auto& t : tasks_) {
    if (t.status == TaskStatus::kComplete) continue;
    for (const auto& s : t.required_slugs()) {
      if (!t.decisions.count({reviewer, s})) {
        out.push_back(t);
        break;
      }
    }
  }
  return out;
}

std::vector<ReviewDecision> ReviewStore::history() const {
  std::shared_lock lock(mu_);
  return history_;
}

AgreementReport ReviewStore::agreement(QuestionnaireId q) const {
  std::shared_lock lock(mu_);
  if (reviewers_.size() < 2)
    throw InsufficientOverlap("agreement needs at least two reviewers");
  AgreementReport report;
  report.questionnaire = q;
  for (std::size_t i = 0; i < reviewers_.size(); ++i) {
    for (std::size_t j = i + 1; j < reviewers_.size(); ++j) {
      std::vector<ReviewVerdict> a, b;
      for (const auto& t : tasks_) {
        if (t.status != TaskStatus::kComplete || t.record.annotation.questionnaire != q)
          continue;
        for (const auto& s : t.required_slugs()) {
          a.push_back(t.decisions.at({reviewers_[i], s}).verdict);
          b.push_back(t.decisions.at({reviewers_[j], s}).verdict);
        }
      }
      if (a.empty()) continue;
      KappaReport k = cohens_kappa(a, b);
      k.rater_a = reviewers_[i];
      k.rater_b = reviewers_[j];
      report.pairs.push_back(std::move(k));
    }
  }
  if (report.pairs.empty())
    throw InsufficientOverlap("no completed " + std::string(display_name(q)) +
                              " task with reviewed evidence");
  report.mean_kappa = mean_kappa(report.pairs);
  return report;
}

std::vector<SpanRecord> ReviewStore::export_validated(ConsensusPolicy policy) const {
  std::shared_lock lock(mu_);
  std::vector<SpanRecord> out;
  bool any_complete = false;
  for (const auto& t : tasks_) {
    if (t.status != TaskStatus::kComplete) continue;
    any_complete = true;
    bool accepted = true;
    for (const auto& s : t.required_slugs()) {
      std::size_t agree = 0;
      for (const auto& r : reviewers_)
        agree += t.decisions.at({r, s}).verdict == ReviewVerdict::kAgree ? 1 : 0;
      const bool ok = policy == ConsensusPolicy::kUnanimous
                          ? agree == reviewers_.size()
                          : 2 * agree > reviewers_.size();
      if (!ok) {
        accepted = false;
        break;
      }
    }
    if (accepted) out.push_back(t.record);
  }
  if (!any_complete) throw NothingComplete("no review task is complete");
  return out;
}

ordered_json task_json(const ReviewTask& t) {
  ordered_json j;
  j["task_id"] = t.id;
  j["post_id"] = t.record.post.id;
  j["questionnaire"] = to_string(t.record.annotation.questionnaire);
  j["status"] = to_string(t.status);
  j["post_title"] = t.record.post.title;
  j["post_text"] = t.record.post.body;
  j["annotations"] = evidence_json(t.record.annotation);
  ordered_json symptoms = ordered_json::array();
  for (const auto& item : items(t.record.annotation.questionnaire)) {
    const auto it = t.aligned.find(std::string(item.slug));
    if (it == t.aligned.end()) continue;
    ordered_json spans = ordered_json::array();
    for (const auto& rs : it->second) {
      spans.push_back({{"raw_span", rs.span.raw_span},
                       {"start", rs.span.start},
                       {"end", rs.span.end},
                       {"alignment_score", rs.span.alignment_score},
                       {"aligned", rs.aligned}});
    }
    symptoms.push_back({{"slug", item.slug}, {"text", item.text}, {"spans", spans}});
  }
  j["symptoms"] = symptoms;
  ordered_json decisions = ordered_json::array();
  for (const auto& [key, d] : t.decisions) {
    ordered_json dj;
    dj["reviewer"] = d.reviewer;
    dj["slug"] = d.slug;
    dj["verdict"] = to_string(d.verdict);
    if (!d.note.empty()) dj["note"] = d.note;
    dj["timestamp_ms"] = d.timestamp_ms;
    decisions.push_back(std::move(dj));
  }
  j["decisions"] = decisions;
  return j;
}

ordered_json agreement_json(const AgreementReport& r) {
  ordered_json j;
  j["questionnaire"] = to_string(r.questionnaire);
  ordered_json pairs = ordered_json::array();
  for (const auto& k : r.pairs) {
    pairs.push_back({{"rater_a", k.rater_a},
                     {"rater_b", k.rater_b},
                     {"items", k.items},
                     {"observed", k.observed},
                     {"expected", k.expected},
                     {"kappa", k.kappa}});
  }
  j["pairs"] = pairs;
  j["mean_kappa"] = r.mean_kappa;
  return j;
}

// -- HTTP --

struct ReviewServer::Impl {
  ReviewStore& store;
  std::map<std::string, std::string> reviewer_by_token;
  ServerOptions options;
  httplib::Server server;
  std::string registry;
  int port = -1;

  Impl(ReviewStore& s, std::vector<Reviewer> reviewers, ServerOptions o)
      : store(s), options(std::move(o)) {
    for (auto& r : reviewers) {
      if (r.token.empty()) throw PreconditionError("reviewer " + r.id + " has no token");
      if (!reviewer_by_token.emplace(r.token, r.id).second)
        throw PreconditionError("reviewer tokens must be distinct");
    }
    registry = options.registry_file.empty() ? registry_json()
                                             : read_file(options.registry_file);
    routes();
  }

  static void send(httplib::Response& res, int status, ordered_json body) {
    ordered_json out;
    out["schema_version"] = kReviewSchemaVersion;
    for (auto& [k, v] : body.items()) out[k] = v;
    res.status = status;
    res.set_content(out.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, std::string_view code,
                         const std::string& message) {
    send(res, status, {{"error", {{"code", code}, {"message", message}}}});
  }

  std::optional<std::string> reviewer_for(const httplib::Request& req) const {
    const std::string auth = req.get_header_value("Authorization");
    constexpr std::string_view kPrefix = "Bearer ";
    if (auth.rfind(kPrefix, 0) != 0) return std::nullopt;
    const auto it = reviewer_by_token.find(auth.substr(kPrefix.size()));
    if (it == reviewer_by_token.end()) return std::nullopt;
    return it->second;
  }

  // Maps library errors to status codes.
  template <class F>
  void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const UnknownTask& e) {
      send_error(res, 404, "UnknownTask", e.what());
    } catch (const UnknownReviewer& e) {
      send_error(res, 403, "UnknownReviewer", e.what());
    } catch (const UnknownSlug& e) {
      send_error(res, 422, "UnknownSlug", e.what());
    } catch (const InsufficientOverlap& e) {
      send_error(res, 409, "InsufficientOverlap", e.what());
    } catch (const NothingComplete& e) {
      send_error(res, 409, "NothingComplete", e.what());
    } catch (const DuplicatePost& e) {
      send_error(res, 409, "DuplicatePost", e.what());
    } catch (const PreconditionError& e) {
      send_error(res, 400, "BadRequest", e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, "BadRequest", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "Internal", e.what());
    }
  }

  void routes() {
    server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      send(res, 200, {{"status", "ok"}});
    });

    server.Get("/api/questionnaires", [this](const httplib::Request&, httplib::Response& res) {
      res.status = 200;
      res.set_content(registry, "application/json");
    });

    server.Get("/api/queue", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        std::string reviewer = req.get_param_value("reviewer");
        if (reviewer.empty()) {
          const auto r = reviewer_for(req);
          if (!r) throw PreconditionError("reviewer query parameter is required");
          reviewer = *r;
        }
        ordered_json tasks = ordered_json::array();
        for (const auto& t : store.queue(reviewer)) {
          tasks.push_back({{"task_id", t.id},
                           {"post_id", t.record.post.id},
                           {"post_title", t.record.post.title},
                           {"status", to_string(t.status)}});
        }
        send(res, 200, {{"reviewer", reviewer}, {"tasks", tasks}});
      });
    });

    server.Get(R"(/api/task/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send(res, 200, {{"task", task_json(store.task(req.matches[1]))}}); });
    });

    server.Post("/api/decision", [this](const httplib::Request& req, httplib::Response& res) {
      const auto reviewer = reviewer_for(req);
      if (!reviewer) {
        send_error(res, 401, "Unauthorized", "missing or unknown bearer token");
        return;
      }
      guarded(res, [&] {
        const json body = json::parse(req.body);
        if (!body.is_object()) throw PreconditionError("decision body must be an object");
        if (body.contains("reviewer") && body.at("reviewer").get<std::string>() != *reviewer)
          throw UnknownReviewer("token does not belong to reviewer " +
                                body.at("reviewer").get<std::string>());
        ReviewDecision d;
        d.reviewer = *reviewer;
        d.task_id = body.at("task_id").get<std::string>();
        d.slug = body.at("slug").get<std::string>();
        d.verdict = parse_review_verdict(body.at("verdict").get<std::string>());
        d.note = body.value("note", "");
        const TaskStatus s = store.submit(std::move(d));
        send(res, 200, {{"task_id", body.at("task_id")}, {"status", to_string(s)}});
      });
    });

    server.Get("/api/agreement", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string q = req.has_param("q") ? req.get_param_value("q") : "phq9";
        send(res, 200, agreement_json(store.agreement(parse_questionnaire(q))));
      });
    });

    server.Get("/api/export", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string p = req.has_param("policy") ? req.get_param_value("policy") : "unanimous";
        const ConsensusPolicy policy = parse_consensus_policy(p);
        const auto records = store.export_validated(policy);
        ordered_json arr = ordered_json::array();
        for (const auto& r : records) arr.push_back(to_json(r));
        send(res, 200, {{"policy", to_string(policy)}, {"records", arr}});
      });
    });

    if (!options.ui_dir.empty()) {
      if (!server.set_mount_point("/", options.ui_dir.string()))
        throw PreconditionError("ui directory not found: " + options.ui_dir.string());
    }
  }
};

ReviewServer::ReviewServer(ReviewStore& store, std::vector<Reviewer> reviewers,
                           ServerOptions options)
    : impl_(std::make_unique<Impl>(store, std::move(reviewers), std::move(options))) {}

ReviewServer::~ReviewServer() { stop(); }

int ReviewServer::bind() {
  if (impl_->port >= 0) return impl_->port;
  if (impl_->options.port == 0)
    impl_->port = impl_->server.bind_to_any_port(impl_->options.host);
  else if (impl_->server.bind_to_port(impl_->options.host, impl_->options.port))
    impl_->port = impl_->options.port;
  if (impl_->port < 0)
    throw Error("cannot bind " + impl_->options.host + ":" +
                std::to_string(impl_->options.port));
  return impl_->port;
}

void ReviewServer::run() {
  bind();
  impl_->server.listen_after_bind();
}

void ReviewServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace diagann
