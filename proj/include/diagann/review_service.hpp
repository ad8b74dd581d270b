#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "diagann/corpus.hpp"
#include "diagann/evaluation.hpp"
#include "diagann/response_parsing.hpp"

namespace diagann {

inline constexpr int kReviewSchemaVersion = 1;

enum class ReviewVerdict { kAgree, kDisagree };
std::string_view to_string(ReviewVerdict v);
ReviewVerdict parse_review_verdict(std::string_view s);

enum class TaskStatus { kPending, kPartiallyReviewed, kComplete };
std::string_view to_string(TaskStatus s);

enum class ConsensusPolicy { kUnanimous, kMajority };
std::string_view to_string(ConsensusPolicy p);
ConsensusPolicy parse_consensus_policy(std::string_view s);

/// Spans that fail to align keep `aligned = false` and carry the best
/// window found anyway.
struct ReviewSpan {
  AlignedSpan span;
  bool aligned = false;
};

struct ReviewDecision {
  std::string reviewer;
  std::string task_id;
  std::string slug;
  ReviewVerdict verdict = ReviewVerdict::kAgree;
  std::string note;
  std::int64_t timestamp_ms = 0;  // assigned by the store
  std::uint64_t seq = 0;          // assigned by the store
};

struct ReviewTask {
  std::string id;
  SpanRecord record;
  std::map<std::string, std::vector<ReviewSpan>> aligned;  // present slugs only
  TaskStatus status = TaskStatus::kPending;
  // latest decision per (reviewer, slug)
  std::map<std::pair<std::string, std::string>, ReviewDecision> decisions;

  std::vector<std::string> required_slugs() const;
};

struct AgreementReport {
  QuestionnaireId questionnaire = QuestionnaireId::kPhq9;
  std::vector<KappaReport> pairs;
  double mean_kappa = 0;
};

using Clock = std::function<std::int64_t()>;  // milliseconds since epoch

/// Event-sourced review state. Every mutation is appended to the JSON-lines
/// log (and fsync'd) before it is applied; opening an existing log replays
/// it. Readers share a lock, writers are serialized.
class ReviewStore {
 public:
  /// `log_path` empty: in-memory only.
  ReviewStore(std::vector<std::string> reviewers,
              std::filesystem::path log_path = {}, Clock clock = nullptr,
              double alignment_threshold = kDefaultAlignmentThreshold);
  ~ReviewStore();
  ReviewStore(const ReviewStore&) = delete;
  ReviewStore& operator=(const ReviewStore&) = delete;

  /// All-or-nothing. Throws DuplicatePost for a post already queued or
  /// repeated within `records`.
  std::vector<std::string> enqueue(std::span<const SpanRecord> records);

  /// Throws UnknownTask, UnknownReviewer, UnknownSlug, or
  /// PreconditionError when the slug carries no evidence in the task.
  TaskStatus submit(ReviewDecision d);

  ReviewTask task(const std::string& id) const;
  std::vector<ReviewTask> tasks() const;
  /// Incomplete tasks still waiting on `reviewer`, oldest first.
  std::vector<ReviewTask> queue(const std::string& reviewer) const;
  std::vector<ReviewDecision> history() const;

  /// Throws InsufficientOverlap.
  AgreementReport agreement(QuestionnaireId q) const;
  /// Throws NothingComplete.
  std::vector<SpanRecord> export_validated(ConsensusPolicy policy) const;

  const std::vector<std::string>& reviewers() const { return reviewers_; }
  std::size_t size() const;

 private:
  void append(const nlohmann::ordered_json& event);
  void apply(const nlohmann::json& event);
  void recompute(ReviewTask& t) const;
  std::int64_t next_timestamp();

  std::vector<std::string> reviewers_;
  Clock clock_;
  double alignment_threshold_;
  std::FILE* log_ = nullptr;

  mutable std::shared_mutex mu_;
  std::vector<ReviewTask> tasks_;
  std::map<std::string, std::size_t> by_id_;
  std::map<std::string, std::size_t> by_post_;
  std::vector<ReviewDecision> history_;
  std::uint64_t seq_ = 0;
  std::int64_t last_ts_ = 0;
};

nlohmann::ordered_json task_json(const ReviewTask& t);
nlohmann::ordered_json agreement_json(const AgreementReport& r);

struct Reviewer {
  std::string id;
  std::string token;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0: pick a free port
  std::filesystem::path ui_dir;  // optional static bundle
  std::filesystem::path registry_file;  // served at /api/questionnaires if set
};

/// JSON API over a ReviewStore. POST /api/decision authenticates with a
/// per-reviewer static bearer token.
class ReviewServer {
 public:
  ReviewServer(ReviewStore& store, std::vector<Reviewer> reviewers,
               ServerOptions options);
  ~ReviewServer();

  /// Binds and returns the port actually bound.
  int bind();
  /// Serves until stop(); in-flight requests finish before it returns.
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace diagann
