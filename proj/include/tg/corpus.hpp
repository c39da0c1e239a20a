#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace tg::corpus {

enum class Op { add, sub, mul };

struct ChainStep {
  Op op;
  int operand;
};

// A modular-arithmetic chain task. The query text fully determines the
// computation, so correctness is exactly decidable.
struct TaskInstance {
  std::string id;
  std::string query;
  int start_value = 0;
  std::vector<ChainStep> chain;
  int modulus = 10;
  int gold_answer = 0;
};

enum class Provenance {
  clean,
  semantic,
  optimized,
  fo_grad,
  hb_grad,
  rhb_grad,
  hotflip,
  watermarked,
  direct,
  filtered,
};

std::string provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& name);

struct Trace {
  std::string task_id;
  std::string query;
  std::vector<std::string> steps;
  std::string answer;
  std::optional<std::vector<int>> tokens;
  Provenance provenance = Provenance::clean;
};

enum class Split { train, val, test };

struct Record {
  TaskInstance task;
  Trace trace;
};

struct TraceDataset {
  std::vector<Record> records;
  Split split = Split::train;
  uint64_t seed = 0;

  size_t size() const { return records.size(); }
};

// The marker every well-formed trace ends with.
inline constexpr const char* kAnswerMarker = "Final Answer:";

// Renders a trace's response text: "s1; s2; ...; Final Answer: a".
std::string trace_text(const Trace& t);

// Parses response text back into steps + answer. Throws FormatError when the
// marker is missing or no integer follows it.
std::pair<std::vector<std::string>, std::string> parse_trace_text(const std::string& text);

// Integer after the last "Final Answer:" marker; nullopt when absent.
std::optional<long long> extract_final_answer(const std::string& text);

// Deterministic task generation. Queries use the fixed template vocabulary;
// modulus is limited to [2, 12] so every printed value stays within it.
std::vector<TaskInstance> gen_tasks(uint64_t seed, int count, int chain_len, int modulus);

// Inverse of the query template: "Start with 2. Add 3. Answer modulo 10."
// Throws ParseError on anything else. The returned id is empty.
TaskInstance parse_query(const std::string& query);

// Rule-based teacher: one step per chain element, each showing the running
// value, reduced modulo m when the raw result leaves [0, m).
Trace teacher_trace(const TaskInstance& task);

TraceDataset make_clean_dataset(const std::vector<TaskInstance>& tasks, Split split, uint64_t seed);

TraceDataset read_jsonl(const std::string& path);
void write_jsonl(const TraceDataset& dataset, const std::string& path);

}  // namespace tg::corpus
