#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tg/backends.hpp"
#include "tg/corpus.hpp"

namespace tg::promptrw {

enum class InstructionKind { semantic, optimized, watermark, direct, custom };

struct RewriteInstruction {
  std::string text;
  InstructionKind kind = InstructionKind::custom;
};

// The built-in instructions, verbatim.
RewriteInstruction semantic_instruction();
RewriteInstruction optimized_instruction();
RewriteInstruction watermark_instruction(const std::string& trigger, const std::string& target);
RewriteInstruction direct_instruction();
RewriteInstruction custom_instruction(const std::string& text);

corpus::Provenance provenance_for(InstructionKind kind);

struct RewriteOutcome {
  corpus::Trace trace;
  bool rewritten = false;        // false: the clean input was kept
  int answer_mismatches = 0;     // responses discarded by the answer guard
  int parse_failures = 0;        // responses that did not parse as a trace
};

// Rewrites one trace through the assistant. The answer guard compares the
// rewritten final answer with the input's; on mismatch the backend is re-asked
// up to two times with a shifted seed, then the clean trace is kept.
RewriteOutcome rewrite_one(const corpus::Trace& trace, const RewriteInstruction& instruction,
                           ChatBackend& backend, const BackendConfig& cfg);

struct BatchReport {
  int attempted = 0;
  int rewritten = 0;
  int kept_clean = 0;       // answer guard or parse failure
  int backend_failures = 0;
  std::vector<std::string> errors;
};

// Rewrites the selected records (all of them when select is empty), preserving
// order and task ids. At most cfg.concurrency requests run at once.
corpus::TraceDataset rewrite_batch(const corpus::TraceDataset& data,
                                   const RewriteInstruction& instruction, ChatBackend& backend,
                                   const BackendConfig& cfg,
                                   const std::optional<std::vector<size_t>>& select = std::nullopt,
                                   BatchReport* report = nullptr);

struct DirectResult {
  corpus::Trace trace;
  bool gold_mismatch = false;  // kept but flagged
};

// Single-stage generation: the assistant answers the query from scratch.
DirectResult direct_generate(const corpus::TaskInstance& task, ChatBackend& backend,
                             const BackendConfig& cfg);

}  // namespace tg::promptrw
