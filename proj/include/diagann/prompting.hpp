#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "diagann/corpus.hpp"
#include "diagann/questionnaire.hpp"
#include "diagann/response_parsing.hpp"

namespace diagann {

enum class PromptMode { kNaive, kExemplar, kGuidance };

std::string_view to_string(PromptMode m);
PromptMode parse_prompt_mode(std::string_view s);

/// A worked example: a binary-annotated input record and the span output
/// the model should produce for it.
struct Exemplar {
  PrimateRecord input;
  SpanAnnotation expected_output;
};

struct PromptSpec {
  PromptMode mode = PromptMode::kExemplar;
  QuestionnaireId questionnaire = QuestionnaireId::kPhq9;
  std::vector<Exemplar> exemplars;
  std::optional<std::string> guidance_preamble;
  OutputKind output_format = OutputKind::kSpanMap;
  std::string system_message;  // empty: no system message

  /// Throws InvalidSpec when the mode/exemplar/preamble combination is not
  /// allowed.
  void validate() const;
};

struct ChatMessage {
  std::string role;  // "system" | "user" | "assistant"
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

struct RenderedPrompt {
  std::vector<ChatMessage> messages;
  std::string target_post_id;

  /// All message contents joined by blank lines, for echo detection.
  std::string flat_text() const;
};

/// Deterministic, byte-stable prompt for one post.
RenderedPrompt render(const PromptSpec& spec, const Post& post);

/// The fine-tuning instruction block: "### INSTRUCTION:" with the inline
/// symptom list and the list-of-lists output request.
std::string instruction_text(QuestionnaireId q);

/// Post body, preceded by the title on its own line when present and
/// `include_title` is set.
std::string instruction_input(const Post& post, bool include_title = true);

/// Single user message: instruction block, then "### INPUT:" and the post.
RenderedPrompt render_instruction(const Post& post, QuestionnaireId q,
                                  bool include_title = true);

/// Text between the exemplar's expected-output marker and the next section,
/// as emitted by render(). Empty when absent.
std::vector<std::string> exemplar_output_blocks(std::string_view prompt);

}  // namespace diagann
