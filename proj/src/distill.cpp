#include "tg/distill.hpp"

#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "tg/errors.hpp"
#include "tg/parallel.hpp"

namespace tg::distill {

size_t count_correct(const lm::TinyLMParams& params, const lm::Vocab& vocab,
                     std::span<const corpus::TaskInstance> tasks) {
  if (tasks.empty()) throw ArgumentError("task list must be nonempty");
  std::vector<char> ok(tasks.size(), 0);
  parallel_for(tasks.size(), [&](size_t i) {
    auto res = lm::force_answer(params, vocab, tasks[i].query);
    if (!res.answer_text.empty() &&
        std::stoll(res.answer_text) == static_cast<long long>(tasks[i].gold_answer)) {
      ok[i] = 1;
    }
  });
  size_t n = 0;
  for (char c : ok) n += static_cast<size_t>(c);
  return n;
}

double evaluate_accuracy(const lm::TinyLMParams& params, const lm::Vocab& vocab,
                         std::span<const corpus::TaskInstance> tasks) {
  return static_cast<double>(count_correct(params, vocab, tasks)) /
         static_cast<double>(tasks.size());
}

double grade_traces(const corpus::TraceDataset& dataset) {
  if (dataset.records.empty()) throw ArgumentError("dataset must be nonempty");
  size_t correct = 0;
  for (const auto& rec : dataset.records) {
    auto got = corpus::extract_final_answer(corpus::trace_text(rec.trace));
    if (got && *got == rec.task.gold_answer) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.records.size());
}

MarginReport compute_margins(double acc_student_clean, double acc_student_rewritten,
                             double acc_teacher_clean, double acc_teacher_rewritten,
                             double delta_threshold, double epsilon_threshold) {
  for (double a : {acc_student_clean, acc_student_rewritten, acc_teacher_clean,
                   acc_teacher_rewritten}) {
    if (a < 0.0 || a > 1.0) throw ArgumentError("accuracy outside [0, 1]");
  }
  MarginReport r;
  r.acc_student_clean = acc_student_clean;
  r.acc_student_rewritten = acc_student_rewritten;
  r.acc_teacher_clean = acc_teacher_clean;
  r.acc_teacher_rewritten = acc_teacher_rewritten;
  r.delta_hat = acc_student_clean - acc_student_rewritten;
  r.epsilon_hat = acc_teacher_clean - acc_teacher_rewritten;
  r.delta_threshold = delta_threshold;
  r.epsilon_threshold = epsilon_threshold;
  r.delta_pass = r.delta_hat > delta_threshold;
  r.epsilon_pass = r.epsilon_hat <= epsilon_threshold;
  return r;
}

ExperimentResult run_distillation_experiment(const corpus::TraceDataset& clean,
                                             const corpus::TraceDataset& rewritten,
                                             const DistillSetup& setup, const lm::Vocab& vocab,
                                             std::span<const corpus::TaskInstance> test_tasks) {
  if (clean.records.empty() || rewritten.records.empty()) {
    throw ArgumentError("datasets must be nonempty");
  }
  if (setup.seeds.empty()) throw ArgumentError("need at least one student seed");
  if (clean.records.size() != rewritten.records.size()) {
    throw AlignmentError("datasets differ in size");
  }
  for (size_t i = 0; i < clean.records.size(); ++i) {
    if (clean.records[i].task.id != rewritten.records[i].task.id) {
      throw AlignmentError("task id mismatch at record " + std::to_string(i) +
                           ": rewriting must not reorder or resample queries");
    }
  }

  ExperimentResult out;
  // Integer hit counts keep the seed mean exact and independent of seed order.
  size_t clean_hits = 0, rewritten_hits = 0;
  const size_t n_test = test_tasks.size();
  for (uint64_t seed : setup.seeds) {
    lm::LMConfig cfg = setup.student;
    cfg.seed = seed;
    lm::TrainConfig tc = setup.train;
    tc.seed = seed;
    lm::TinyLMParams init = lm::init_params(cfg);

    lm::TinyLMParams s_clean = lm::train_sft(init, clean, tc, vocab);
    size_t h1 = count_correct(s_clean, vocab, test_tasks);
    clean_hits += h1;
    out.rows.push_back({"clean", seed, static_cast<double>(h1) / n_test});

    lm::TinyLMParams s_rw = lm::train_sft(init, rewritten, tc, vocab);
    size_t h2 = count_correct(s_rw, vocab, test_tasks);
    rewritten_hits += h2;
    out.rows.push_back({"rewritten", seed, static_cast<double>(h2) / n_test});
  }
  double denom = static_cast<double>(setup.seeds.size() * n_test);
  out.margins = compute_margins(clean_hits / denom, rewritten_hits / denom, grade_traces(clean),
                                grade_traces(rewritten), setup.delta_threshold,
                                setup.epsilon_threshold);
  return out;
}

void write_rows_csv(const std::vector<SeedRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "dataset,seed,accuracy\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", r.accuracy);
    out << r.dataset << ',' << r.seed << ',' << buf << '\n';
  }
}

void write_margin_json(const MarginReport& r, const std::string& path) {
  nlohmann::json j;
  j["acc_student_clean"] = r.acc_student_clean;
  j["acc_student_rewritten"] = r.acc_student_rewritten;
  j["acc_teacher_clean"] = r.acc_teacher_clean;
  j["acc_teacher_rewritten"] = r.acc_teacher_rewritten;
  j["delta_hat"] = r.delta_hat;
  j["epsilon_hat"] = r.epsilon_hat;
  j["delta_threshold"] = r.delta_threshold;
  j["epsilon_threshold"] = r.epsilon_threshold;
  j["delta_pass"] = r.delta_pass;
  j["epsilon_pass"] = r.epsilon_pass;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
}

}  // namespace tg::distill
