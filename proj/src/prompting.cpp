#include "diagann/prompting.hpp"

#include "json.hpp"

#include "diagann/errors.hpp"

namespace diagann {

using nlohmann::ordered_json;

namespace {

constexpr std::string_view kSpanTask =
    "When given the below JSON formatted file content, I need you to give me "
    "the specific sentences from the text that exhibit a set of symptoms.";
constexpr std::string_view kExampleIntro =
    "Below is an example of INPUT and OUTPUT. Keep JSON Formatting for output:";
constexpr std::string_view kExpectedMarker =
    "And this is an example expected output format:";
constexpr std::string_view kNaiveFormat =
    "Keep JSON Formatting for output: return one JSON object with the keys "
    "\"post_title\", \"post_text\" and \"annotations\". \"annotations\" maps "
    "every symptom key above to a list of the sentences from the post that "
    "exhibit it, quoted as written, and to an empty list when the symptom is "
    "absent.";
constexpr std::string_view kTargetIntro =
    "Now give the output for this INPUT:";

std::string symptom_key_list(QuestionnaireId q) {
  std::string out = "The symptoms are the " + std::string(display_name(q)) +
                    " items, given as key: description:\n";
  for (const auto& item : items(q)) {
    out += "- ";
    out += item.slug;
    out += ": ";
    out += item.text;
    out += "\n";
  }
  return out;
}

ordered_json post_json(const Post& p) {
  ordered_json j;
  j["post_title"] = p.title;
  j["post_text"] = p.body;
  return j;
}

std::string exemplar_input(const PrimateRecord& r) {
  ordered_json j = post_json(r.post);
  j["annotations"] = ordered_json::array();
  for (const auto& [slug, v] : r.annotation.verdicts)
    j["annotations"].push_back({slug, to_string(v)});
  return j.dump(4);
}

std::string exemplar_output(const Exemplar& e) {
  ordered_json j = post_json(e.input.post);
  j["annotations"] = evidence_json(e.expected_output);
  return j.dump(4);
}

std::string render_span_prompt(const PromptSpec& spec, const Post& post) {
  std::string out;
  if (spec.mode == PromptMode::kGuidance) out += *spec.guidance_preamble + "\n\n";
  out += kSpanTask;
  out += " ";
  out += symptom_key_list(spec.questionnaire);
  out += "\n";
  if (spec.exemplars.empty()) {
    out += kNaiveFormat;
    out += "\n\n";
  } else {
    out += kExampleIntro;
    out += "\n\n";
    for (const auto& e : spec.exemplars) {
      out += exemplar_input(e.input) + "\n\n";
      out += kExpectedMarker;
      out += "\n\n";
      out += exemplar_output(e) + "\n\n";
    }
  }
  out += kTargetIntro;
  out += "\n\n";
  out += post_json(post).dump(4);
  out += "\n";
  return out;
}

std::string render_verdict_prompt(const PromptSpec& spec, const Post& post) {
  std::string out;
  if (spec.mode == PromptMode::kGuidance) out += *spec.guidance_preamble + "\n\n";
  out += instruction_text(spec.questionnaire);
  out += "\n\n";
  for (const auto& e : spec.exemplars) {
    out += "Example:\n### INPUT:\n" + instruction_input(e.input.post) +
           "\n\n### OUTPUT:\n" + render_verdict_pairs(binarize(e.expected_output)) +
           "\n\n";
  }
  out += "### INPUT:\n" + instruction_input(post) + "\n";
  return out;
}

}  // namespace

std::string_view to_string(PromptMode m) {
  switch (m) {
    case PromptMode::kNaive:
      return "naive";
    case PromptMode::kExemplar:
      return "exemplar";
    case PromptMode::kGuidance:
      return "guidance";
  }
  return "naive";
}

PromptMode parse_prompt_mode(std::string_view s) {
  if (s == "naive") return PromptMode::kNaive;
  if (s == "exemplar") return PromptMode::kExemplar;
  if (s == "guidance") return PromptMode::kGuidance;
  throw InvalidSpec("prompt mode must be naive, exemplar or guidance");
}

void PromptSpec::validate() const {
  switch (mode) {
    case PromptMode::kNaive:
      if (!exemplars.empty()) throw InvalidSpec("naive prompts take no exemplars");
      break;
    case PromptMode::kExemplar:
      if (exemplars.empty()) throw InvalidSpec("exemplar prompts need at least one exemplar");
      break;
    case PromptMode::kGuidance:
      if (exemplars.empty()) throw InvalidSpec("guidance prompts need at least one exemplar");
      if (!guidance_preamble || guidance_preamble->empty())
        throw InvalidSpec("guidance prompts need a non-empty preamble");
      break;
  }
  for (const auto& e : exemplars) {
    if (e.input.annotation.questionnaire != questionnaire ||
        e.expected_output.questionnaire != questionnaire)
      throw InvalidSpec("exemplar questionnaire does not match the spec");
  }
}

std::string RenderedPrompt::flat_text() const {
  std::string out;
  for (const auto& m : messages) {
    if (!out.empty()) out += "\n\n";
    out += m.content;
  }
  return out;
}

RenderedPrompt render(const PromptSpec& spec, const Post& post) {
  spec.validate();
  RenderedPrompt p;
  p.target_post_id = post.id;
  if (!spec.system_message.empty())
    p.messages.push_back({"system", spec.system_message});
  p.messages.push_back({"user", spec.output_format == OutputKind::kSpanMap
                                    ? render_span_prompt(spec, post)
                                    : render_verdict_prompt(spec, post)});
  return p;
}

std::string instruction_text(QuestionnaireId q) {
  std::string out =
      "### INSTRUCTION:\n"
      "For a given user post sentence, does it show signs of the symptom. "
      "Answer in binary \"yes\" or \"no\", for every symptom. The symptoms "
      "are as follows:\n[";
  const auto all = items(q);
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (i > 0) out += ",\n";
    out += all[i].text;
  }
  out +=
      "] .\n"
      "Give the output as a python list of lists, with the list containing "
      "the symptom and the answer, separated by a comma.";
  return out;
}

std::string instruction_input(const Post& post, bool include_title) {
  if (include_title && !post.title.empty()) return post.title + "\n" + post.body;
  return post.body;
}

RenderedPrompt render_instruction(const Post& post, QuestionnaireId q,
                                  bool include_title) {
  RenderedPrompt p;
  p.target_post_id = post.id;
  p.messages.push_back(
      {"user", instruction_text(q) + "\n\n### INPUT:\n" +
                   instruction_input(post, include_title)});
  return p;
}

std::vector<std::string> exemplar_output_blocks(std::string_view prompt) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t m = prompt.find(kExpectedMarker, pos);
    if (m == std::string_view::npos) break;
    const std::size_t start = m + kExpectedMarker.size() + 2;
    if (start > prompt.size()) break;
    const std::size_t end = prompt.find("\n\n", start);
    out.emplace_back(prompt.substr(start, end == std::string_view::npos
                                              ? std::string_view::npos
                                              : end - start));
    pos = start;
  }
  return out;
}

}  // namespace diagann
