#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "diagann/errors.hpp"
#include "diagann/review_service.hpp"
#include "httplib.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace diagann;
using nlohmann::json;

namespace {

const std::vector<std::string> kSlugs = [] {
  std::vector<std::string> out;
  for (const auto& item : items(QuestionnaireId::kPhq9)) out.emplace_back(item.slug);
  return out;
}();

// Post whose body holds one sentence per slug in `present`, each cited as
// that slug's evidence.
SpanRecord record(const std::string& id, const std::vector<std::size_t>& present) {
  SpanRecord r;
  r.post.id = id;
  r.post.title = "title " + id;
  r.annotation = SpanAnnotation::empty(QuestionnaireId::kPhq9, id);
  for (const std::size_t i : present) {
    const std::string sentence = "Sentence number " + std::to_string(i) + " about post " + id + ".";
    r.post.body += (r.post.body.empty() ? "" : " ") + sentence;
    r.annotation.evidence[kSlugs[i]].push_back(sentence);
  }
  r.annotation.evidence[kSlugs[8]];  // keep the map total
  return r;
}

Clock fixed_clock() {
  return [] { return std::int64_t{1700000000000}; };
}

ReviewDecision decision(const std::string& reviewer, const std::string& task, const std::string& slug,
                        bool agree) {
  ReviewDecision d;
  d.reviewer = reviewer;
  d.task_id = task;
  d.slug = slug;
  d.verdict = agree ? ReviewVerdict::kAgree : ReviewVerdict::kDisagree;
  return d;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("diagann_review_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(ReviewStore, EnqueueAssignsIdsAndRejectsDuplicates) {
  ReviewStore store({"bob", "alice", "bob"});
  EXPECT_EQ(store.reviewers(), (std::vector<std::string>{"alice", "bob"}));
  const std::vector<SpanRecord> recs = {record("a", {0, 1}), record("b", {2})};
  const auto ids = store.enqueue(recs);
  EXPECT_EQ(ids, (std::vector<std::string>{"task-000001", "task-000002"}));
  EXPECT_EQ(store.size(), 2u);
  const std::vector<SpanRecord> again = {record("c", {0}), record("a", {0})};
  EXPECT_THROW(store.enqueue(again), DuplicatePost);
  EXPECT_EQ(store.size(), 2u);  // all or nothing
  const std::vector<SpanRecord> twice = {record("d", {0}), record("d", {0})};
  EXPECT_THROW(store.enqueue(twice), DuplicatePost);
  EXPECT_EQ(store.size(), 2u);
  EXPECT_THROW(ReviewStore(std::vector<std::string>{}), PreconditionError);
}

TEST(ReviewStore, AlignedSpansCarryOffsets) {
  ReviewStore store({"alice"});
  const auto rec = record("a", {3});
  store.enqueue(std::vector<SpanRecord>{rec});
  const auto t = store.task("task-000001");
  ASSERT_EQ(t.aligned.size(), 1u);
  const auto& rs = t.aligned.at(kSlugs[3]).front();
  EXPECT_TRUE(rs.aligned);
  EXPECT_EQ(rec.post.body.substr(rs.span.start, rs.span.end - rs.span.start),
            rec.annotation.evidence.at(kSlugs[3]).front());
  EXPECT_EQ(t.required_slugs(), std::vector<std::string>{kSlugs[3]});
}

TEST(ReviewStore, StatusProgression) {
  ReviewStore store({"alice", "bob"}, {}, fixed_clock());
  store.enqueue(std::vector<SpanRecord>{record("a", {0, 1})});
  const std::string id = "task-000001";
  EXPECT_EQ(store.task(id).status, TaskStatus::kPending);
  EXPECT_EQ(store.queue("alice").size(), 1u);
  EXPECT_EQ(store.submit(decision("alice", id, kSlugs[0], true)), TaskStatus::kPartiallyReviewed);
  EXPECT_EQ(store.submit(decision("alice", id, kSlugs[1], true)), TaskStatus::kPartiallyReviewed);
  EXPECT_TRUE(store.queue("alice").empty());
  EXPECT_EQ(store.queue("bob").size(), 1u);
  EXPECT_EQ(store.submit(decision("bob", id, kSlugs[0], false)), TaskStatus::kPartiallyReviewed);
  EXPECT_EQ(store.submit(decision("bob", id, kSlugs[1], true)), TaskStatus::kComplete);
  EXPECT_TRUE(store.queue("bob").empty());
  // resubmission replaces the earlier decision
  EXPECT_EQ(store.submit(decision("bob", id, "  little-interest-or-pleasure-in-doing ", true)),
            TaskStatus::kComplete);
  EXPECT_EQ(store.task(id).decisions.at({"bob", kSlugs[0]}).verdict, ReviewVerdict::kAgree);
  EXPECT_EQ(store.history().size(), 5u);
}

TEST(ReviewStore, SubmitErrors) {
  ReviewStore store({"alice", "bob"});
  store.enqueue(std::vector<SpanRecord>{record("a", {0})});
  EXPECT_THROW(store.submit(decision("alice", "task-999999", kSlugs[0], true)), UnknownTask);
  EXPECT_THROW(store.submit(decision("mallory", "task-000001", kSlugs[0], true)), UnknownReviewer);
  EXPECT_THROW(store.submit(decision("alice", "task-000001", "Anxiety", true)), UnknownSlug);
  EXPECT_THROW(store.submit(decision("alice", "task-000001", kSlugs[5], true)), PreconditionError);
  EXPECT_THROW(store.queue("mallory"), UnknownReviewer);
  EXPECT_THROW(store.task("nope"), UnknownTask);
  EXPECT_TRUE(store.history().empty());
}

TEST(ReviewStore, TimestampsAndSequenceAreMonotonic) {
  std::int64_t now = 5000;
  ReviewStore store({"alice"}, {}, [&] { return now; });
  store.enqueue(std::vector<SpanRecord>{record("a", {0, 1, 2})});
  store.submit(decision("alice", "task-000001", kSlugs[0], true));
  now = 1000;  // clock steps backwards
  store.submit(decision("alice", "task-000001", kSlugs[1], true));
  store.submit(decision("alice", "task-000001", kSlugs[2], true));
  const auto h = store.history();
  ASSERT_EQ(h.size(), 3u);
  for (std::size_t i = 1; i < h.size(); ++i) {
    EXPECT_GT(h[i].timestamp_ms, h[i - 1].timestamp_ms);
    EXPECT_GT(h[i].seq, h[i - 1].seq);
  }
}

TEST(ReviewStore, KappaOfFourFourTwoFixtureIsPointSix) {
  // Ten reviewed spans: 4 agree/agree, 4 disagree/disagree, 1 agree/disagree,
  // 1 disagree/agree.
  ReviewStore store({"r1", "r2"});
  store.enqueue(std::vector<SpanRecord>{record("a", {0, 1, 2, 3, 4}), record("b", {0, 1, 2, 3, 4})});
  const std::vector<std::pair<bool, bool>> table = {{1, 1}, {1, 1}, {1, 1}, {1, 1}, {0, 0},
                                                    {0, 0}, {0, 0}, {0, 0}, {1, 0}, {0, 1}};
  for (std::size_t k = 0; k < table.size(); ++k) {
    const std::string task = k < 5 ? "task-000001" : "task-000002";
    store.submit(decision("r1", task, kSlugs[k % 5], table[k].first));
    store.submit(decision("r2", task, kSlugs[k % 5], table[k].second));
  }
  const auto report = store.agreement(QuestionnaireId::kPhq9);
  ASSERT_EQ(report.pairs.size(), 1u);
  EXPECT_NEAR(report.pairs[0].kappa, 0.6, 1e-12);
  EXPECT_NEAR(report.mean_kappa, 0.6, 1e-12);
  EXPECT_EQ(report.pairs[0].items, 10u);
  EXPECT_THROW(store.agreement(QuestionnaireId::kGad7), InsufficientOverlap);
}

TEST(ReviewStore, AgreementNeedsOverlap) {
  ReviewStore solo({"only"});
  EXPECT_THROW(solo.agreement(QuestionnaireId::kPhq9), InsufficientOverlap);
  ReviewStore pair({"a", "b"});
  pair.enqueue(std::vector<SpanRecord>{record("x", {0})});
  pair.submit(decision("a", "task-000001", kSlugs[0], true));
  EXPECT_THROW(pair.agreement(QuestionnaireId::kPhq9), InsufficientOverlap);
}

TEST(ReviewStore, AgreementMatchesOracleOnRandomReviews) {
  for (int round = 0; round < 40; ++round) {
    ReviewStore store({"a", "b", "c"});
    std::vector<SpanRecord> recs;
    for (int p = 0; p < 4; ++p) recs.push_back(record("p" + std::to_string(p), {0, 2, 4}));
    const auto ids = store.enqueue(recs);
    std::map<std::string, std::vector<bool>> labels;
    for (const auto& id : ids)
      for (const std::size_t s : {0u, 2u, 4u})
        for (const std::string r : {"a", "b", "c"}) {
          const bool v = oracle::coin();
          labels[r].push_back(v);
          store.submit(decision(r, id, kSlugs[s], v));
        }
    bool degenerate = false;
    for (const auto& [r, v] : labels)
      if (std::all_of(v.begin(), v.end(), [&](bool x) { return x == v[0]; })) degenerate = true;
    if (degenerate) continue;
    const auto report = store.agreement(QuestionnaireId::kPhq9);
    ASSERT_EQ(report.pairs.size(), 3u);
    EXPECT_NEAR(report.pairs[0].kappa, oracle::kappa(labels["a"], labels["b"]), 1e-12);
    EXPECT_NEAR(report.pairs[1].kappa, oracle::kappa(labels["a"], labels["c"]), 1e-12);
    EXPECT_NEAR(report.pairs[2].kappa, oracle::kappa(labels["b"], labels["c"]), 1e-12);
    EXPECT_NEAR(report.mean_kappa,
                (report.pairs[0].kappa + report.pairs[1].kappa + report.pairs[2].kappa) / 3.0, 1e-12);
  }
}

TEST(ReviewStore, ConsensusTableForThreeReviewers) {
  for (unsigned mask = 0; mask < 8; ++mask) {
    ReviewStore store({"r1", "r2", "r3"});
    store.enqueue(std::vector<SpanRecord>{record("a", {0})});
    int agree = 0;
    for (int r = 0; r < 3; ++r) {
      const bool v = mask & (1u << r);
      agree += v;
      store.submit(decision("r" + std::to_string(r + 1), "task-000001", kSlugs[0], v));
    }
    EXPECT_EQ(store.export_validated(ConsensusPolicy::kMajority).size(), agree >= 2 ? 1u : 0u) << mask;
    EXPECT_EQ(store.export_validated(ConsensusPolicy::kUnanimous).size(), agree == 3 ? 1u : 0u) << mask;
  }
}

TEST(ReviewStore, ExportSkipsIncompleteAndRejected) {
  ReviewStore store({"a", "b"});
  store.enqueue(std::vector<SpanRecord>{record("x", {0}), record("y", {1}), record("z", {2})});
  EXPECT_THROW(store.export_validated(ConsensusPolicy::kUnanimous), NothingComplete);
  store.submit(decision("a", "task-000001", kSlugs[0], true));
  store.submit(decision("b", "task-000001", kSlugs[0], true));
  store.submit(decision("a", "task-000002", kSlugs[1], true));
  store.submit(decision("b", "task-000002", kSlugs[1], false));
  store.submit(decision("a", "task-000003", kSlugs[2], true));
  const auto out = store.export_validated(ConsensusPolicy::kUnanimous);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].post.id, "x");
  EXPECT_EQ(out[0].annotation, record("x", {0}).annotation);
}

TEST(ReviewStore, ExportIsFixedPointOfReenqueue) {
  ReviewStore store({"a"});
  store.enqueue(std::vector<SpanRecord>{record("x", {0, 3}), record("y", {1})});
  for (const auto& [id, slug] : std::vector<std::pair<std::string, std::string>>{
           {"task-000001", kSlugs[0]}, {"task-000001", kSlugs[3]}, {"task-000002", kSlugs[1]}})
    store.submit(decision("a", id, slug, true));
  const auto first = store.export_validated(ConsensusPolicy::kUnanimous);
  ReviewStore again({"a"});
  const auto ids = again.enqueue(first);
  for (const auto& t : again.tasks())
    for (const auto& s : t.required_slugs()) again.submit(decision("a", t.id, s, true));
  EXPECT_EQ(serialize_spans(again.export_validated(ConsensusPolicy::kUnanimous)), serialize_spans(first));
  EXPECT_EQ(ids.size(), 2u);
}

TEST(ReviewStore, LogReplayReproducesState) {
  const auto dir = temp_dir("replay");
  const auto log = dir / "review.jsonl";
  std::vector<ReviewTask> before;
  std::vector<ReviewDecision> history;
  {
    ReviewStore store({"a", "b"}, log, fixed_clock());
    store.enqueue(std::vector<SpanRecord>{record("x", {0, 1}), record("y", {2})});
    store.submit(decision("a", "task-000001", kSlugs[0], true));
    store.submit(decision("b", "task-000001", kSlugs[0], false));
    store.submit(decision("a", "task-000002", kSlugs[2], true));
    store.submit(decision("a", "task-000002", kSlugs[2], false));
    before = store.tasks();
    history = store.history();
  }
  {
    ReviewStore reopened({"a", "b"}, log, fixed_clock());
    const auto after = reopened.tasks();
    ASSERT_EQ(after.size(), before.size());
    for (std::size_t i = 0; i < after.size(); ++i)
      EXPECT_EQ(task_json(after[i]).dump(), task_json(before[i]).dump());
    ASSERT_EQ(reopened.history().size(), history.size());
    for (std::size_t i = 0; i < history.size(); ++i) {
      EXPECT_EQ(reopened.history()[i].seq, history[i].seq);
      EXPECT_EQ(reopened.history()[i].timestamp_ms, history[i].timestamp_ms);
    }
    // new events continue the sequence and ids
    EXPECT_EQ(reopened.enqueue(std::vector<SpanRecord>{record("z", {4})}),
              std::vector<std::string>{"task-000003"});
    EXPECT_THROW(reopened.enqueue(std::vector<SpanRecord>{record("x", {0})}), DuplicatePost);
  }
  std::ifstream in(log);
  std::size_t lines = 0;
  std::uint64_t last_seq = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    const auto ev = json::parse(line);
    EXPECT_GT(ev["seq"].get<std::uint64_t>(), last_seq);
    last_seq = ev["seq"];
  }
  EXPECT_EQ(lines, 7u);
  std::filesystem::remove_all(dir);
}

TEST(ReviewStore, ConcurrentSubmitsAllLand) {
  ReviewStore store({"a", "b", "c", "d"});
  std::vector<SpanRecord> recs;
  for (int p = 0; p < 20; ++p) recs.push_back(record("p" + std::to_string(p), {0, 1}));
  const auto ids = store.enqueue(recs);
  {
    std::vector<std::jthread> workers;
    for (const std::string r : {"a", "b", "c", "d"})
      workers.emplace_back([&, r] {
        for (const auto& id : ids)
          for (const std::size_t s : {0u, 1u}) store.submit(decision(r, id, kSlugs[s], true));
      });
  }
  EXPECT_EQ(store.history().size(), 20u * 2 * 4);
  for (const auto& t : store.tasks()) EXPECT_EQ(t.status, TaskStatus::kComplete);
  EXPECT_EQ(store.export_validated(ConsensusPolicy::kUnanimous).size(), 20u);
}

// -- HTTP --

namespace {

struct LiveServer {
  ReviewStore store{{"alice", "bob"}};
  std::unique_ptr<ReviewServer> server;
  std::thread thread;
  int port = 0;

  LiveServer() {
    ServerOptions opts;
    opts.port = 0;
    server = std::make_unique<ReviewServer>(
        store, std::vector<Reviewer>{{"alice", "tok-a"}, {"bob", "tok-b"}}, opts);
    port = server->bind();
    thread = std::thread([this] { server->run(); });
    httplib::Client c("127.0.0.1", port);
    for (int i = 0; i < 100 && !c.Get("/healthz"); ++i)
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  ~LiveServer() {
    server->stop();
    thread.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

httplib::Result post_decision(httplib::Client& c, const std::string& token, const json& body) {
  httplib::Headers h;
  if (!token.empty()) h.emplace("Authorization", "Bearer " + token);
  return c.Post("/api/decision", h, body.dump(), "application/json");
}

}  // namespace

TEST(ReviewHttp, EndToEndReviewFlow) {
  LiveServer live;
  live.store.enqueue(std::vector<SpanRecord>{record("x", {0, 2})});
  auto c = live.client();

  auto health = c.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(json::parse(health->body)["schema_version"], 1);

  auto qs = c.Get("/api/questionnaires");
  ASSERT_TRUE(qs);
  EXPECT_EQ(qs->body, registry_json());

  auto queue = c.Get("/api/queue?reviewer=alice");
  ASSERT_TRUE(queue);
  ASSERT_EQ(queue->status, 200);
  const auto qj = json::parse(queue->body);
  ASSERT_EQ(qj["tasks"].size(), 1u);
  const std::string id = qj["tasks"][0]["task_id"];

  auto task = c.Get("/api/task/" + id);
  ASSERT_TRUE(task);
  const auto tj = json::parse(task->body);
  EXPECT_EQ(tj["schema_version"], 1);
  EXPECT_EQ(tj["task"]["post_id"], "x");
  EXPECT_EQ(tj["task"]["status"], "pending");

  for (const auto& [token, agree2] : std::vector<std::pair<std::string, bool>>{{"tok-a", true}, {"tok-b", false}}) {
    for (const std::size_t s : {0u, 2u}) {
      auto r = post_decision(c, token, {{"task_id", id}, {"slug", kSlugs[s]},
                                        {"verdict", (s == 0 || agree2) ? "agree" : "disagree"}});
      ASSERT_TRUE(r);
      EXPECT_EQ(r->status, 200) << r->body;
    }
  }
  EXPECT_EQ(live.store.task(id).status, TaskStatus::kComplete);

  auto agreement = c.Get("/api/agreement?q=phq9");
  ASSERT_TRUE(agreement);
  EXPECT_EQ(agreement->status, 200);
  const auto aj = json::parse(agreement->body);
  EXPECT_EQ(aj["pairs"].size(), 1u);

  auto exported = c.Get("/api/export?policy=majority");
  ASSERT_TRUE(exported);
  EXPECT_EQ(json::parse(exported->body)["records"].size(), 0u);
  exported = c.Get("/api/export?policy=unanimous");
  EXPECT_EQ(json::parse(exported->body)["records"].size(), 0u);
}

TEST(ReviewHttp, ErrorsUseStatusCodesAndErrorObject) {
  LiveServer live;
  live.store.enqueue(std::vector<SpanRecord>{record("x", {0})});
  auto c = live.client();
  auto expect_error = [](const httplib::Result& r, int status, const std::string& code) {
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, status) << r->body;
    const auto j = json::parse(r->body);
    EXPECT_EQ(j["error"]["code"], code);
    EXPECT_EQ(j["schema_version"], 1);
  };
  expect_error(c.Get("/api/task/task-424242"), 404, "UnknownTask");
  expect_error(c.Get("/api/queue?reviewer=mallory"), 403, "UnknownReviewer");
  expect_error(post_decision(c, "", {{"task_id", "task-000001"}, {"slug", kSlugs[0]}, {"verdict", "agree"}}),
               401, "Unauthorized");
  expect_error(post_decision(c, "tok-zzz", {{"task_id", "task-000001"}, {"slug", kSlugs[0]}, {"verdict", "agree"}}),
               401, "Unauthorized");
  expect_error(post_decision(c, "tok-a", {{"task_id", "task-000001"}, {"slug", "Anxiety"}, {"verdict", "agree"}}),
               422, "UnknownSlug");
  expect_error(post_decision(c, "tok-a", {{"task_id", "task-000001"}, {"slug", kSlugs[0]}, {"verdict", "maybe"}}),
               400, "BadRequest");
  expect_error(post_decision(c, "tok-a", {{"task_id", "task-000001"}}), 400, "BadRequest");
  expect_error(post_decision(c, "tok-a",
                             {{"task_id", "task-000001"}, {"slug", kSlugs[0]}, {"verdict", "agree"}, {"reviewer", "bob"}}),
               403, "UnknownReviewer");
  expect_error(c.Get("/api/agreement?q=phq9"), 409, "InsufficientOverlap");
  expect_error(c.Get("/api/export"), 409, "NothingComplete");
  auto bad_body = c.Post("/api/decision", httplib::Headers{{"Authorization", "Bearer tok-a"}}, "{not json",
                         "application/json");
  expect_error(bad_body, 400, "BadRequest");
  EXPECT_TRUE(live.store.history().empty());
}
