#include "diagann/questionnaire.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <map>

#include "json.hpp"

#include "diagann/errors.hpp"
#include "diagann/text.hpp"

namespace diagann {
namespace {

using Q = QuestionnaireId;

// Slugs are verbatim dataset keys; PHQ-9 item 1 deliberately lacks "things".
constexpr std::array<SymptomItem, 9> kPhq9{{
    {Q::kPhq9, 1, "Little interest or pleasure in doing things",
     "Little-interest-or-pleasure-in-doing"},
    {Q::kPhq9, 2, "Feeling down, depressed, or hopeless",
     "Feeling-down-depressed-or-hopeless"},
    {Q::kPhq9, 3, "Trouble falling or staying asleep, or sleeping too much",
     "Trouble-falling-or-staying-asleep-or-sleeping-too-much"},
    {Q::kPhq9, 4, "Feeling tired or having little energy",
     "Feeling-tired-or-having-little-energy"},
    {Q::kPhq9, 5, "Poor appetite or overeating", "Poor-appetite-or-overeating"},
    {Q::kPhq9, 6,
     "Feeling bad about yourself or that you are a failure or have let "
     "yourself or your family down",
     "Feeling-bad-about-yourself-or-that-you-are-a-failure-or-have-let-"
     "yourself-or-your-family-down"},
    {Q::kPhq9, 7,
     "Trouble concentrating on things, such as reading the newspaper or "
     "watching television",
     "Trouble-concentrating-on-things-such-as-reading-the-newspaper-or-"
     "watching-television"},
    {Q::kPhq9, 8,
     "Moving or speaking so slowly that other people could have noticed. Or "
     "the opposite being so fidgety or restless that you have been moving "
     "around a lot more than usual",
     "Moving-or-speaking-so-slowly-that-other-people-could-have-noticed-Or-"
     "the-opposite-being-so-fidgety-or-restless-that-you-have-been-moving-"
     "around-a-lot-more-than-usual"},
    {Q::kPhq9, 9,
     "Thoughts that you would be better off dead, or of hurting yourself in "
     "some way",
     "Thoughts-that-you-would-be-better-off-dead-or-of-hurting-yourself-in-"
     "some-way"},
}};

constexpr std::array<SymptomItem, 7> kGad7{{
    {Q::kGad7, 1, "Feeling nervous, anxious, or on edge",
     "Feeling-nervous-anxious-or-on-edge"},
    {Q::kGad7, 2, "Not being able to stop or control worrying",
     "Not-being-able-to-stop-or-control-worrying"},
    {Q::kGad7, 3, "Worrying too much about different things",
     "Worrying-too-much-about-different-things"},
    {Q::kGad7, 4, "Trouble relaxing", "Trouble-relaxing"},
    {Q::kGad7, 5, "Being so restless that it is hard to sit still",
     "Being-so-restless-that-it-is-hard-to-sit-still"},
    {Q::kGad7, 6, "Becoming easily annoyed or irritable",
     "Becoming-easily-annoyed-or-irritable"},
    {Q::kGad7, 7, "Feeling afraid, as if something awful might happen",
     "Feeling-afraid-as-if-something-awful-might-happen"},
}};

// Known spellings that differ from both slug and item text.
struct Alias {
  Q questionnaire;
  std::string_view spelling;
  int ordinal;
};
constexpr std::array<Alias, 2> kExtraAliases{{
    {Q::kPhq9,
     "Moving or speaking so slowly that other people could have noticed. Or "
     "the opposite being so figety or restless that you have been moving "
     "around a lot more than usual",
     8},
    {Q::kPhq9, "Thoughts that you would be better off dead, or of hurting "
               "yourself", 9},
}};

// Lowercase; every run of non-alphanumeric ASCII becomes one hyphen.
std::string loose_key(std::string_view raw) {
  std::string out;
  bool pending = false;
  for (const char ch : raw) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || std::isalnum(c)) {
      if (pending && !out.empty()) out.push_back('-');
      pending = false;
      out.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    } else {
      pending = true;
    }
  }
  return out;
}

class AliasTable {
 public:
  AliasTable() {
    for (const Q q : {Q::kPhq9, Q::kGad7}) {
      for (const auto& item : items(q)) {
        add(q, item.slug, item);
        add(q, item.text, item);
      }
    }
    for (const auto& a : kExtraAliases)
      add(a.questionnaire, a.spelling, items(a.questionnaire)[a.ordinal - 1]);
  }

  const SymptomItem* find(Q q, std::string_view raw) const {
    const auto it = table_.find({q, loose_key(raw)});
    return it == table_.end() ? nullptr : it->second;
  }

 private:
  void add(Q q, std::string_view spelling, const SymptomItem& item) {
    table_.emplace(std::pair{q, loose_key(spelling)}, &item);
  }

  std::map<std::pair<Q, std::string>, const SymptomItem*> table_;
};

}  // namespace

std::string_view to_string(QuestionnaireId q) {
  return q == Q::kPhq9 ? "phq9" : "gad7";
}

std::string_view display_name(QuestionnaireId q) {
  return q == Q::kPhq9 ? "PHQ-9" : "GAD-7";
}

QuestionnaireId parse_questionnaire(std::string_view s) {
  const std::string k = loose_key(s);
  if (k == "phq9" || k == "phq-9") return Q::kPhq9;
  if (k == "gad7" || k == "gad-7") return Q::kGad7;
  throw PreconditionError("unknown questionnaire '" + std::string(s) +
                          "' (expected phq9 or gad7)");
}

std::string_view to_string(Verdict v) {
  return v == Verdict::kYes ? "yes" : "no";
}

Verdict parse_verdict(std::string_view s) {
  const std::string k = text::to_lower(text::trim(s));
  if (k == "yes") return Verdict::kYes;
  if (k == "no") return Verdict::kNo;
  throw PreconditionError("verdict must be yes or no, got '" +
                          std::string(s) + "'");
}

std::span<const SymptomItem> items(QuestionnaireId q) {
  if (q == Q::kPhq9) return kPhq9;
  return kGad7;
}

std::vector<SymptomItem> items_by_slug(QuestionnaireId q) {
  const auto all = items(q);
  std::vector<SymptomItem> out(all.begin(), all.end());
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.slug < b.slug; });
  return out;
}

std::string normalize_slug(std::string_view raw) {
  const std::string lowered = text::to_lower(text::trim(raw));
  std::string out;
  for (const char c : lowered) {
    if (c == '-' && !out.empty() && out.back() == '-') continue;
    out.push_back(c);
  }
  return out;
}

const SymptomItem& resolve_slug(QuestionnaireId q, std::string_view raw) {
  const std::string key = normalize_slug(raw);
  for (const auto& item : items(q)) {
    if (normalize_slug(item.slug) == key) return item;
  }
  throw UnknownSlug(std::string(raw));
}

const SymptomItem* lookup_slug(QuestionnaireId q, std::string_view raw) {
  const std::string key = normalize_slug(raw);
  for (const auto& item : items(q)) {
    if (normalize_slug(item.slug) == key) return &item;
  }
  static const AliasTable aliases;
  return aliases.find(q, raw);
}

std::string registry_json() {
  nlohmann::ordered_json doc;
  doc["schema_version"] = 1;
  auto& qs = doc["questionnaires"];
  for (const Q q : {Q::kPhq9, Q::kGad7}) {
    auto& entry = qs[std::string(to_string(q))];
    entry["name"] = display_name(q);
    entry["items"] = nlohmann::ordered_json::array();
    for (const auto& item : items(q)) {
      entry["items"].push_back({{"ordinal", item.ordinal},
                                {"slug", item.slug},
                                {"text", item.text}});
    }
  }
  return doc.dump(2) + "\n";
}

}  // namespace diagann
