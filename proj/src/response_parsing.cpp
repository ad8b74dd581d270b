#include "diagann/response_parsing.hpp"

#include <algorithm>
#include <cctype>
#include <optional>
#include <sstream>

#include "json.hpp"

#include "diagann/errors.hpp"
#include "diagann/text.hpp"

namespace diagann {

using nlohmann::json;

std::string_view to_string(OutputKind k) {
  return k == OutputKind::kSpanMap ? "span_map" : "verdict_pairs";
}

OutputKind parse_output_kind(std::string_view s) {
  if (s == "span_map") return OutputKind::kSpanMap;
  if (s == "verdict_pairs") return OutputKind::kVerdictPairs;
  throw PreconditionError("output format must be span_map or verdict_pairs");
}

namespace {

// Bounds on the work spent hunting for a payload in hostile input.
constexpr std::size_t kMaxCandidates = 256;
constexpr int kMaxListDepth = 16;

struct Segment {
  std::string_view text;
  bool fenced = false;
};

// Fenced blocks first (in order), then the whole output.
std::vector<Segment> segments(std::string_view out) {
  std::vector<Segment> segs;
  std::size_t pos = 0;
  while (true) {
    const std::size_t open = out.find("```", pos);
    if (open == std::string_view::npos) break;
    std::size_t body = out.find('\n', open + 3);
    if (body == std::string_view::npos) break;
    ++body;
    const std::size_t close = out.find("```", body);
    if (close == std::string_view::npos) break;
    segs.push_back({out.substr(body, close - body), true});
    pos = close + 3;
  }
  segs.push_back({out, false});
  return segs;
}

// Index one past the bracket matching text[start], skipping quoted strings
// of either quote style; npos when unbalanced.
std::size_t matching_close(std::string_view t, std::size_t start, char open,
                           char close) {
  int depth = 0;
  char quote = 0;
  for (std::size_t i = start; i < t.size(); ++i) {
    const char c = t[i];
    if (quote != 0) {
      if (c == '\\') {
        ++i;
      } else if (c == quote) {
        quote = 0;
      }
      continue;
    }
    if (c == '"') {
      quote = c;
    } else if (c == open) {
      ++depth;
    } else if (c == close) {
      if (--depth == 0) return i + 1;
    }
  }
  return std::string_view::npos;
}

std::string drop_trailing_commas(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (in_str) {
      out.push_back(c);
      if (c == '\\' && i + 1 < s.size()) {
        out.push_back(s[++i]);
      } else if (c == '"') {
        in_str = false;
      }
      continue;
    }
    if (c == '"') in_str = true;
    if (c == ',') {
      std::size_t k = i + 1;
      while (k < s.size() && std::isspace(static_cast<unsigned char>(s[k]))) ++k;
      if (k < s.size() && (s[k] == '}' || s[k] == ']')) continue;
    }
    out.push_back(c);
  }
  return out;
}

// Python-style dict: swap quote styles when no double quotes are present.
std::string single_to_double_quotes(std::string_view s) {
  std::string out(s);
  if (out.find('"') != std::string::npos) return out;
  std::replace(out.begin(), out.end(), '\'', '"');
  return out;
}

std::optional<json> parse_object(std::string_view candidate,
                                 std::vector<std::string>& notes) {
  json j = json::parse(candidate, nullptr, false);
  if (!j.is_discarded()) return j;
  std::string repaired = drop_trailing_commas(candidate);
  j = json::parse(repaired, nullptr, false);
  if (!j.is_discarded()) {
    notes.push_back("repaired trailing commas");
    return j;
  }
  repaired = drop_trailing_commas(single_to_double_quotes(candidate));
  j = json::parse(repaired, nullptr, false);
  if (!j.is_discarded()) {
    notes.push_back("converted single-quoted strings");
    return j;
  }
  return std::nullopt;
}

// The annotations object inside a candidate, or the candidate itself when
// its keys look like symptom slugs.
const json* annotations_of(const json& obj, QuestionnaireId q) {
  if (!obj.is_object()) return nullptr;
  if (const auto it = obj.find("annotations");
      it != obj.end() && it->is_object())
    return &*it;
  for (const auto& [key, value] : obj.items()) {
    if ((value.is_array() || value.is_null()) && lookup_slug(q, key) != nullptr)
      return &obj;
  }
  return nullptr;
}

SpanAnnotation build_spans(const json& ann, QuestionnaireId q,
                           const ParseOptions& opts, const std::string& post_id,
                           std::string_view raw,
                           std::vector<std::string>& notes) {
  SpanAnnotation out = SpanAnnotation::empty(q, post_id);
  std::size_t listed = 0;
  for (const auto& [key, value] : ann.items()) {
    const SymptomItem* item = lookup_slug(q, key);
    if (item == nullptr) {
      if (opts.strict)
        throw ParseFailure("unknown annotation key '" + key + "'",
                           std::string(raw));
      notes.push_back("dropped unknown key '" + key + "'");
      continue;
    }
    ++listed;
    const std::string slug(item->slug);
    if (key != slug) notes.push_back("resolved key '" + key + "' to '" + slug + "'");
    auto& spans = out.evidence[slug];
    if (value.is_null()) continue;
    if (value.is_string()) {
      notes.push_back("wrapped bare string for '" + slug + "'");
      if (!text::trim(value.get_ref<const std::string&>()).empty())
        spans.push_back(value.get<std::string>());
      continue;
    }
    if (!value.is_array()) {
      notes.push_back("ignored non-list evidence for '" + slug + "'");
      continue;
    }
    for (const auto& s : value) {
      if (!s.is_string() || text::trim(s.get_ref<const std::string&>()).empty()) {
        notes.push_back("dropped empty or non-string span for '" + slug + "'");
        continue;
      }
      spans.push_back(s.get<std::string>());
    }
  }
  if (listed < items(q).size())
    notes.push_back("filled " + std::to_string(items(q).size() - listed) +
                    " missing keys as empty");
  return out;
}

ParsedOutput parse_span_map(std::string_view output, QuestionnaireId q,
                            const ParseOptions& opts,
                            const std::string& post_id) {
  std::size_t tried = 0;
  for (const auto& seg : segments(output)) {
    for (std::size_t pos = seg.text.find('{');
         pos != std::string_view::npos && tried < kMaxCandidates;
         pos = seg.text.find('{', pos + 1)) {
      const std::size_t end = matching_close(seg.text, pos, '{', '}');
      if (end == std::string_view::npos) continue;
      ++tried;
      std::vector<std::string> notes;
      const auto obj = parse_object(seg.text.substr(pos, end - pos), notes);
      if (!obj) continue;
      const json* ann = annotations_of(*obj, q);
      if (ann == nullptr) continue;
      if (seg.fenced) notes.insert(notes.begin(), "stripped code fence");
      ParsedOutput p;
      p.kind = OutputKind::kSpanMap;
      p.payload = build_spans(*ann, q, opts, post_id, output, notes);
      p.salvage_notes = std::move(notes);
      return p;
    }
  }
  throw ParseFailure("no span-map JSON payload found", std::string(output));
}

// Minimal literal grammar for verdict lists: nested lists, quoted strings
// (either quote style, backslash escapes) and bare words. Never evaluates.
struct Literal {
  std::variant<std::string, std::vector<Literal>> v;
  bool quoted = false;
};

class LiteralParser {
 public:
  explicit LiteralParser(std::string_view t) : t_(t) {}

  std::optional<Literal> list(int depth) {
    if (depth > kMaxListDepth || !eat('[')) return std::nullopt;
    std::vector<Literal> items;
    skip_ws();
    if (eat(']')) return Literal{std::move(items), false};
    while (true) {
      skip_ws();
      if (peek() == ']' && !items.empty()) {  // trailing comma
        ++i_;
        return Literal{std::move(items), false};
      }
      auto item = value(depth + 1);
      if (!item) return std::nullopt;
      items.push_back(std::move(*item));
      skip_ws();
      if (eat(',')) continue;
      if (eat(']')) return Literal{std::move(items), false};
      return std::nullopt;
    }
  }

  std::size_t pos() const { return i_; }

 private:
  std::optional<Literal> value(int depth) {
    const char c = peek();
    if (c == '[') return list(depth);
    if (c == '\'' || c == '"') return quoted();
    return bare();
  }

  std::optional<Literal> quoted() {
    const char q = t_[i_++];
    std::string s;
    while (i_ < t_.size()) {
      const char c = t_[i_++];
      if (c == q) return Literal{std::move(s), true};
      if (c == '\\' && i_ < t_.size()) {
        const char e = t_[i_++];
        s.push_back(e == 'n' ? '\n' : e == 't' ? '\t' : e);
      } else if (c == '\n') {
        return std::nullopt;
      } else {
        s.push_back(c);
      }
    }
    return std::nullopt;
  }

  std::optional<Literal> bare() {
    const std::size_t start = i_;
    while (i_ < t_.size()) {
      const auto c = static_cast<unsigned char>(t_[i_]);
      if (!(std::isalnum(c) || c == '-' || c == '_')) break;
      ++i_;
    }
    if (i_ == start) return std::nullopt;
    return Literal{std::string(t_.substr(start, i_ - start)), false};
  }

  char peek() const { return i_ < t_.size() ? t_[i_] : '\0'; }
  bool eat(char c) {
    if (peek() != c) return false;
    ++i_;
    return true;
  }
  void skip_ws() {
    while (i_ < t_.size() && std::isspace(static_cast<unsigned char>(t_[i_])))
      ++i_;
  }

  std::string_view t_;
  std::size_t i_ = 0;
};

using Pair = std::pair<Literal, Literal>;

// A non-empty list whose every element is a two-element list of strings,
// with the symptom quoted.
std::optional<std::vector<Pair>> as_pairs(const Literal& lit) {
  const auto* outer = std::get_if<std::vector<Literal>>(&lit.v);
  if (outer == nullptr || outer->empty()) return std::nullopt;
  std::vector<Pair> pairs;
  for (const auto& e : *outer) {
    const auto* inner = std::get_if<std::vector<Literal>>(&e.v);
    if (inner == nullptr || inner->size() != 2) return std::nullopt;
    if (!std::holds_alternative<std::string>((*inner)[0].v) ||
        !std::holds_alternative<std::string>((*inner)[1].v) ||
        !(*inner)[0].quoted)
      return std::nullopt;
    pairs.emplace_back((*inner)[0], (*inner)[1]);
  }
  return pairs;
}

ParsedOutput parse_verdict_pairs(std::string_view output, QuestionnaireId q,
                                 const ParseOptions& opts,
                                 const std::string& post_id) {
  std::size_t tried = 0;
  for (const auto& seg : segments(output)) {
    for (std::size_t pos = seg.text.find('[');
         pos != std::string_view::npos && tried < kMaxCandidates;
         pos = seg.text.find('[', pos + 1)) {
      ++tried;
      LiteralParser parser(seg.text.substr(pos));
      const auto lit = parser.list(0);
      if (!lit) continue;
      const auto pairs = as_pairs(*lit);
      if (!pairs) continue;

      std::vector<std::string> notes;
      if (seg.fenced) notes.push_back("stripped code fence");
      BinaryAnnotation ann;
      ann.post_id = post_id;
      ann.questionnaire = q;
      for (const auto& [sym, ans] : *pairs) {
        const auto& key = std::get<std::string>(sym.v);
        const auto& answer = std::get<std::string>(ans.v);
        const SymptomItem* item = lookup_slug(q, key);
        if (item == nullptr) {
          if (opts.strict)
            throw ParseFailure("unknown symptom '" + key + "'", std::string(output));
          notes.push_back("dropped unknown symptom '" + key + "'");
          continue;
        }
        const std::string slug(item->slug);
        if (key != slug) notes.push_back("resolved key '" + key + "' to '" + slug + "'");
        Verdict v;
        try {
          v = parse_verdict(answer);
        } catch (const PreconditionError&) {
          if (opts.strict)
            throw ParseFailure("verdict for '" + slug + "' is '" + answer + "'",
                               std::string(output));
          notes.push_back("dropped non yes/no verdict for '" + slug + "'");
          continue;
        }
        const auto [it, inserted] = ann.verdicts.emplace(slug, v);
        if (!inserted && it->second != v)
          notes.push_back("conflicting duplicate for '" + slug + "', kept first");
      }
      for (const auto& item : items(q)) {
        if (!ann.verdicts.contains(std::string(item.slug)))
          throw IncompleteVerdicts(std::string(item.slug), std::string(output));
      }
      ParsedOutput p;
      p.kind = OutputKind::kVerdictPairs;
      p.payload = std::move(ann);
      p.salvage_notes = std::move(notes);
      return p;
    }
  }
  throw ParseFailure("no verdict list payload found", std::string(output));
}

}  // namespace

ParsedOutput parse(std::string_view output, QuestionnaireId q, OutputKind kind,
                   const ParseOptions& options, const std::string& post_id) {
  if (kind == OutputKind::kSpanMap)
    return parse_span_map(output, q, options, post_id);
  return parse_verdict_pairs(output, q, options, post_id);
}

std::string render_verdict_pairs(const BinaryAnnotation& a) {
  std::string out = "[";
  bool first = true;
  for (const auto& [slug, v] : a.verdicts) {
    if (!first) out += ", ";
    first = false;
    out += "['" + slug + "', '" + std::string(to_string(v)) + "']";
  }
  out += "]";
  return out;
}

std::string render_span_map(const SpanAnnotation& a) {
  nlohmann::ordered_json j;
  j["annotations"] = evidence_json(a);
  return j.dump(2);
}

EchoVerdict detect_echo(std::string_view prompt, std::string_view output,
                        double threshold) {
  const auto out_tokens = text::normalize(output);
  if (out_tokens.empty()) return {};
  const auto prompt_tokens = text::normalize(prompt);
  const std::size_t lcs = text::lcs_length(prompt_tokens, out_tokens);
  EchoVerdict v;
  v.overlap_ratio =
      static_cast<double>(lcs) / static_cast<double>(out_tokens.size());
  v.is_echo = v.overlap_ratio >= threshold;
  return v;
}

AlignedSpan best_alignment(std::string_view span, std::string_view body) {
  AlignedSpan best;
  best.raw_span = std::string(span);
  const auto needle = text::normalize(span);
  const auto hay = text::tokenize(body);
  if (needle.empty() || hay.empty()) return best;

  const std::size_t len = needle.size();
  std::vector<std::size_t> col(len + 1), next(len + 1);
  double best_score = -1.0;
  for (std::size_t i = 0; i < hay.size(); ++i) {
    for (std::size_t r = 0; r <= len; ++r) col[r] = r;
    for (std::size_t j = i; j < hay.size(); ++j) {
      const std::size_t width = j - i + 1;
      const std::size_t longest = std::max(len, width);
      // Wider windows can only score below len / width.
      if (width > len &&
          static_cast<double>(len) / static_cast<double>(width) < best_score)
        break;
      next[0] = width;
      for (std::size_t r = 1; r <= len; ++r) {
        const std::size_t sub = col[r - 1] + (needle[r - 1] == hay[j].norm ? 0 : 1);
        next[r] = std::min({sub, col[r] + 1, next[r - 1] + 1});
      }
      std::swap(col, next);
      const double score = 1.0 - static_cast<double>(col[len]) /
                                     static_cast<double>(longest);
      if (score > best_score) {
        best_score = score;
        best.start = hay[i].begin;
        best.end = hay[j].end;
      }
    }
  }
  best.alignment_score = std::max(best_score, 0.0);
  return best;
}

AlignedSpan align(std::string_view span, const Post& post, double threshold) {
  if (text::normalize(span).empty())
    throw PreconditionError("cannot align a span with no words");
  AlignedSpan a = best_alignment(span, post.body);
  if (a.alignment_score < threshold)
    throw AlignmentFailure(std::string(span), a.alignment_score);
  return a;
}

}  // namespace diagann
