#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "diagann/corpus.hpp"

namespace diagann {

struct InstructionRecord {
  std::string instruction;
  std::string input;
  std::string output;  // [['slug', 'yes'], ...] in slug order
  std::string text;    // "### INSTRUCTION: ... ### INPUT: ... ### OUTPUT: ..."
};

enum class ExportFormat {
  kJsonl,     // instruction, input, output, text
  kTextOnly,  // text only
};

ExportFormat parse_export_format(std::string_view s);

struct ExportOptions {
  ExportFormat format = ExportFormat::kJsonl;
  bool include_title = true;
};

InstructionRecord make_instruction_record(const PrimateRecord& r,
                                          bool include_title = true);

/// Writes one JSON line per record in corpus order; returns the count.
/// Throws PreconditionError on an empty corpus and SinkError when the
/// stream fails.
std::size_t export_finetune(std::span<const PrimateRecord> corpus,
                            QuestionnaireId q, std::ostream& sink,
                            const ExportOptions& options = {});

}  // namespace diagann
