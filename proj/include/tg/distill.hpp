#pragma once

#include <span>
#include <string>
#include <vector>

#include "tg/corpus.hpp"
#include "tg/lm.hpp"

namespace tg::distill {

// Accuracy margins of the anti-distillation objective: delta_hat is the
// student drop caused by rewriting, epsilon_hat the teacher drop (negative
// means the rewritten teacher grades better).
struct MarginReport {
  double acc_student_clean = 0.0;
  double acc_student_rewritten = 0.0;
  double acc_teacher_clean = 0.0;
  double acc_teacher_rewritten = 0.0;
  double delta_hat = 0.0;
  double epsilon_hat = 0.0;
  double delta_threshold = 0.10;
  double epsilon_threshold = 0.02;
  bool delta_pass = false;
  bool epsilon_pass = false;
};

// Fraction of force_answer outputs equal to gold under greedy decoding.
double evaluate_accuracy(const lm::TinyLMParams& params, const lm::Vocab& vocab,
                         std::span<const corpus::TaskInstance> tasks);
size_t count_correct(const lm::TinyLMParams& params, const lm::Vocab& vocab,
                     std::span<const corpus::TaskInstance> tasks);

// Teacher-side grading: a trace counts iff its extracted final answer equals
// the task's gold answer.
double grade_traces(const corpus::TraceDataset& dataset);

MarginReport compute_margins(double acc_student_clean, double acc_student_rewritten,
                             double acc_teacher_clean, double acc_teacher_rewritten,
                             double delta_threshold = 0.10, double epsilon_threshold = 0.02);

struct SeedRow {
  std::string dataset;  // "clean" or "rewritten"
  uint64_t seed = 0;
  double accuracy = 0.0;
};

struct DistillSetup {
  lm::LMConfig student;
  lm::TrainConfig train;
  std::vector<uint64_t> seeds = {1, 2, 3};
  double delta_threshold = 0.10;
  double epsilon_threshold = 0.02;
};

struct ExperimentResult {
  MarginReport margins;
  std::vector<SeedRow> rows;
};

// Trains one student per (seed, dataset), evaluates on the test tasks, and
// aggregates margins. The two datasets must carry the same task ids in the
// same order; rewriting may not touch the query sequence.
ExperimentResult run_distillation_experiment(const corpus::TraceDataset& clean,
                                             const corpus::TraceDataset& rewritten,
                                             const DistillSetup& setup, const lm::Vocab& vocab,
                                             std::span<const corpus::TaskInstance> test_tasks);

void write_rows_csv(const std::vector<SeedRow>& rows, const std::string& path);
void write_margin_json(const MarginReport& report, const std::string& path);

}  // namespace tg::distill
