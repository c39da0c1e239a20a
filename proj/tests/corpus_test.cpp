#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "tg/corpus.hpp"
#include "tg/errors.hpp"
#include "tg/vocab.hpp"

using namespace tg;
using namespace tg::corpus;

namespace {
std::string temp_path(const std::string& name) {
  return std::string("corpus_test_") + name;
}
}  // namespace

TEST_CASE("gen_tasks zero count") {
  auto tasks = gen_tasks(1, 0, 3, 10);
  CHECK(tasks.empty());
}

TEST_CASE("gen_tasks argument validation") {
  CHECK_THROWS_AS(gen_tasks(1, -1, 3, 10), ArgumentError);
  CHECK_THROWS_AS(gen_tasks(1, 5, 0, 10), ArgumentError);
  CHECK_THROWS_AS(gen_tasks(1, 5, 3, 1), ArgumentError);
  CHECK_THROWS_AS(gen_tasks(1, 5, 3, 13), ArgumentError);
}

TEST_CASE("gen_tasks deterministic") {
  auto a = gen_tasks(7, 50, 4, 10);
  auto b = gen_tasks(7, 50, 4, 10);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].query == b[i].query);
    CHECK(a[i].gold_answer == b[i].gold_answer);
    CHECK(a[i].start_value == b[i].start_value);
    REQUIRE(a[i].chain.size() == b[i].chain.size());
    for (size_t k = 0; k < a[i].chain.size(); ++k) {
      CHECK(a[i].chain[k].op == b[i].chain[k].op);
      CHECK(a[i].chain[k].operand == b[i].chain[k].operand);
    }
  }
}

TEST_CASE("teacher trace single add") {
  TaskInstance t;
  t.id = "t0";
  t.start_value = 2;
  t.chain = {{Op::add, 3}};
  t.modulus = 10;
  t.gold_answer = 5;
  t.query = "Start with 2. Add 3. Answer modulo 10.";
  Trace tr = teacher_trace(t);
  REQUIRE(tr.steps.size() == 1);
  CHECK(tr.steps[0] == "2 + 3 = 5");
  CHECK(tr.answer == "5");
  CHECK(tr.provenance == Provenance::clean);
}

TEST_CASE("teacher trace reduces modulo in the step") {
  TaskInstance t;
  t.id = "t1";
  t.start_value = 2;
  t.chain = {{Op::add, 3}, {Op::mul, 4}};
  t.modulus = 10;
  t.gold_answer = 0;
  Trace tr = teacher_trace(t);
  REQUIRE(tr.steps.size() == 2);
  CHECK(tr.steps[0] == "2 + 3 = 5");
  CHECK(tr.steps[1] == "5 * 4 = 20 mod 10 = 0");
  CHECK(tr.answer == "0");
}

TEST_CASE("trace text ends with the marker and gold answer") {
  for (const auto& task : gen_tasks(3, 40, 3, 10)) {
    Trace tr = teacher_trace(task);
    std::string text = trace_text(tr);
    std::string tail = std::string(kAnswerMarker) + " " + std::to_string(task.gold_answer);
    REQUIRE(text.size() >= tail.size());
    CHECK(text.substr(text.size() - tail.size()) == tail);
    auto got = extract_final_answer(text);
    REQUIRE(got.has_value());
    CHECK(*got == task.gold_answer);
  }
}

TEST_CASE("teacher exactness is exhaustive over generated tasks") {
  for (const auto& task : gen_tasks(11, 300, 4, 10)) {
    Trace tr = teacher_trace(task);
    CHECK(tr.answer == std::to_string(task.gold_answer));
    CHECK(tr.steps.size() == task.chain.size());
  }
}

TEST_CASE("generated text stays within the template vocabulary") {
  const auto& vocab = lm::default_vocab();
  for (const auto& task : gen_tasks(5, 100, 4, 12)) {
    CHECK_NOTHROW(lm::tokenize(task.query, vocab));
    CHECK_NOTHROW(lm::tokenize(trace_text(teacher_trace(task)), vocab));
  }
}

TEST_CASE("jsonl roundtrip") {
  auto tasks = gen_tasks(9, 25, 3, 10);
  TraceDataset ds = make_clean_dataset(tasks, Split::val, 9);
  ds.records[3].trace.tokens = std::vector<int>{5, 6, 7};
  std::string path = temp_path("roundtrip.jsonl");
  write_jsonl(ds, path);
  TraceDataset back = read_jsonl(path);
  REQUIRE(back.records.size() == ds.records.size());
  CHECK(back.split == ds.split);
  CHECK(back.seed == ds.seed);
  for (size_t i = 0; i < ds.records.size(); ++i) {
    const auto& a = ds.records[i];
    const auto& b = back.records[i];
    CHECK(a.trace.task_id == b.trace.task_id);
    CHECK(a.trace.query == b.trace.query);
    CHECK(a.trace.steps == b.trace.steps);
    CHECK(a.trace.answer == b.trace.answer);
    CHECK(a.trace.provenance == b.trace.provenance);
    CHECK(a.trace.tokens == b.trace.tokens);
    CHECK(a.task.id == b.task.id);
    CHECK(a.task.gold_answer == b.task.gold_answer);
    CHECK(a.task.modulus == b.task.modulus);
    CHECK(a.task.start_value == b.task.start_value);
    CHECK(a.task.chain.size() == b.task.chain.size());
  }
  std::remove(path.c_str());
}

TEST_CASE("empty dataset roundtrips through a zero-line file") {
  TraceDataset ds;
  std::string path = temp_path("empty.jsonl");
  write_jsonl(ds, path);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 0);
  TraceDataset back = read_jsonl(path);
  CHECK(back.records.empty());
  std::remove(path.c_str());
}

TEST_CASE("missing answer field reports the line number") {
  std::string path = temp_path("badline.jsonl");
  {
    auto tasks = gen_tasks(2, 2, 3, 10);
    TraceDataset ds = make_clean_dataset(tasks, Split::train, 2);
    write_jsonl(ds, path);
    std::ofstream out(path, std::ios::app);
    out << R"({"task_id":"t9","query":"q","steps":[],"provenance":"clean",)"
        << R"("task":{"id":"t9","query":"q","start":0,"modulus":10,"gold_answer":0,"chain":[]},)"
        << R"("split":"train","seed":2})" << '\n';
  }
  try {
    read_jsonl(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    CHECK(std::string(e.what()).find("answer") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("parse_trace_text splits steps and validates the marker") {
  auto [steps, answer] = parse_trace_text("2 + 3 = 5; 5 * 4 = 20 mod 10 = 0; Final Answer: 0");
  REQUIRE(steps.size() == 2);
  CHECK(steps[0] == "2 + 3 = 5");
  CHECK(steps[1] == "5 * 4 = 20 mod 10 = 0");
  CHECK(answer == "0");
  CHECK_THROWS_AS(parse_trace_text("2 + 3 = 5"), FormatError);
  CHECK_THROWS_AS(parse_trace_text("steps; Final Answer: none"), FormatError);
}

TEST_CASE("extract_final_answer uses the last marker") {
  CHECK(*extract_final_answer("Final Answer: 3; more; Final Answer: 7") == 7);
  CHECK(!extract_final_answer("no marker here").has_value());
  CHECK(*extract_final_answer("Final Answer: -4") == -4);
}
