#include "diagann/finetune_export.hpp"

#include "json.hpp"

#include "diagann/errors.hpp"
#include "diagann/prompting.hpp"
#include "diagann/response_parsing.hpp"

namespace diagann {

ExportFormat parse_export_format(std::string_view s) {
  if (s == "jsonl") return ExportFormat::kJsonl;
  if (s == "text") return ExportFormat::kTextOnly;
  throw PreconditionError("export format must be jsonl or text");
}

InstructionRecord make_instruction_record(const PrimateRecord& r,
                                          bool include_title) {
  InstructionRecord rec;
  rec.instruction = instruction_text(r.annotation.questionnaire);
  rec.input = instruction_input(r.post, include_title);
  rec.output = render_verdict_pairs(r.annotation);
  rec.text = rec.instruction + "\n\n### INPUT:\n" + rec.input +
             "\n\n### OUTPUT:\n" + rec.output;
  return rec;
}

std::size_t export_finetune(std::span<const PrimateRecord> corpus,
                            QuestionnaireId q, std::ostream& sink,
                            const ExportOptions& options) {
  if (corpus.empty()) throw PreconditionError("cannot export an empty corpus");
  std::size_t written = 0;
  for (const auto& r : corpus) {
    if (r.annotation.questionnaire != q)
      throw PreconditionError("record " + r.post.id + " is not annotated for " +
                              std::string(display_name(q)));
    const InstructionRecord rec = make_instruction_record(r, options.include_title);
    nlohmann::ordered_json j;
    if (options.format == ExportFormat::kJsonl) {
      j["instruction"] = rec.instruction;
      j["input"] = rec.input;
      j["output"] = rec.output;
    }
    j["text"] = rec.text;
    sink << j.dump() << '\n';
    if (!sink) throw SinkError("write failed after " + std::to_string(written) + " records");
    ++written;
  }
  sink.flush();
  if (!sink) throw SinkError("flush failed");
  return written;
}

}  // namespace diagann
