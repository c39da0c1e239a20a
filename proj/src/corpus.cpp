#include "tg/corpus.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tg/errors.hpp"
#include "tg/rng.hpp"

namespace tg::corpus {

namespace {

int apply_op(Op op, int value, int operand) {
  switch (op) {
    case Op::add: return value + operand;
    case Op::sub: return value - operand;
    case Op::mul: return value * operand;
  }
  throw ArgumentError("bad op");
}

int reduce_mod(int raw, int m) {
  int r = raw % m;
  return r < 0 ? r + m : r;
}

const char* op_symbol(Op op) {
  switch (op) {
    case Op::add: return "+";
    case Op::sub: return "-";
    case Op::mul: return "*";
  }
  return "?";
}

const char* op_query_word(Op op) {
  switch (op) {
    case Op::add: return "Add";
    case Op::sub: return "Subtract";
    case Op::mul: return "Multiply by";
  }
  return "?";
}

}  // namespace

std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::clean: return "clean";
    case Provenance::semantic: return "semantic";
    case Provenance::optimized: return "optimized";
    case Provenance::fo_grad: return "fo_grad";
    case Provenance::hb_grad: return "hb_grad";
    case Provenance::rhb_grad: return "rhb_grad";
    case Provenance::hotflip: return "hotflip";
    case Provenance::watermarked: return "watermarked";
    case Provenance::direct: return "direct";
    case Provenance::filtered: return "filtered";
  }
  throw ArgumentError("bad provenance");
}

Provenance provenance_from_name(const std::string& name) {
  static const std::pair<const char*, Provenance> table[] = {
      {"clean", Provenance::clean},         {"semantic", Provenance::semantic},
      {"optimized", Provenance::optimized}, {"fo_grad", Provenance::fo_grad},
      {"hb_grad", Provenance::hb_grad},     {"rhb_grad", Provenance::rhb_grad},
      {"hotflip", Provenance::hotflip},     {"watermarked", Provenance::watermarked},
      {"direct", Provenance::direct},       {"filtered", Provenance::filtered},
  };
  for (const auto& [n, p] : table) {
    if (name == n) return p;
  }
  throw ParseError("unknown provenance: " + name);
}

std::string trace_text(const Trace& t) {
  std::string out;
  for (const auto& s : t.steps) {
    out += s;
    out += "; ";
  }
  out += kAnswerMarker;
  out += ' ';
  out += t.answer;
  return out;
}

std::optional<long long> extract_final_answer(const std::string& text) {
  size_t pos = text.rfind(kAnswerMarker);
  if (pos == std::string::npos) return std::nullopt;
  size_t i = pos + std::string(kAnswerMarker).size();
  while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  size_t start = i;
  if (i < text.size() && text[i] == '-') ++i;
  size_t digits_from = i;
  while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
  if (i == digits_from) return std::nullopt;
  return std::stoll(text.substr(start, i - start));
}

std::pair<std::vector<std::string>, std::string> parse_trace_text(const std::string& text) {
  size_t marker = text.rfind(kAnswerMarker);
  if (marker == std::string::npos) throw FormatError("trace text lacks the answer marker");
  auto answer = extract_final_answer(text);
  if (!answer) throw FormatError("no integer follows the answer marker");

  std::string body = text.substr(0, marker);
  std::vector<std::string> steps;
  std::string cur;
  auto flush = [&] {
    size_t a = cur.find_first_not_of(" \t\n");
    size_t b = cur.find_last_not_of(" \t\n");
    if (a != std::string::npos) steps.push_back(cur.substr(a, b - a + 1));
    cur.clear();
  };
  for (char c : body) {
    if (c == ';') {
      flush();
    } else {
      cur += c;
    }
  }
  flush();
  return {steps, std::to_string(*answer)};
}

std::vector<TaskInstance> gen_tasks(uint64_t seed, int count, int chain_len, int modulus) {
  if (count < 0) throw ArgumentError("count must be >= 0");
  if (chain_len < 1) throw ArgumentError("chain_len must be >= 1");
  if (modulus < 2 || modulus > 12) {
    throw ArgumentError("modulus must be in [2, 12] (template vocabulary bound)");
  }
  Rng rng(seed);
  std::vector<TaskInstance> tasks;
  tasks.reserve(static_cast<size_t>(count));
  for (int n = 0; n < count; ++n) {
    TaskInstance t;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "t%06d", n);
    t.id = idbuf;
    t.modulus = modulus;
    t.start_value = rng.bounded_int(modulus);
    std::ostringstream q;
    q << "Start with " << t.start_value << ".";
    int value = t.start_value;
    for (int k = 0; k < chain_len; ++k) {
      // Operands are drawn so every step's raw result leaves [0, m) and the
      // teacher writes the reduction; all generated steps then share one
      // token shape, which keeps the task learnable at tiny-model scale.
      struct Choice {
        Op op;
        int lo, hi;  // feasible operand range
      };
      Choice feasible[3];
      int n_feasible = 0;
      {
        int lo = std::max(2, modulus - value);  // value + b >= m
        if (lo <= 9) feasible[n_feasible++] = {Op::add, lo, 9};
      }
      {
        int lo = std::max(2, value + 1);  // value - b < 0
        if (lo <= 9) feasible[n_feasible++] = {Op::sub, lo, 9};
      }
      if (value >= 1) {
        int lo = std::max(2, (modulus + value - 1) / value);  // value * b >= m
        if (lo <= 9) feasible[n_feasible++] = {Op::mul, lo, 9};
      }
      const Choice& c = feasible[rng.bounded_int(n_feasible)];
      ChainStep step;
      step.op = c.op;
      step.operand = c.lo + rng.bounded_int(c.hi - c.lo + 1);
      t.chain.push_back(step);
      q << ' ' << op_query_word(step.op) << ' ' << step.operand << '.';
      value = reduce_mod(apply_op(step.op, value, step.operand), modulus);
    }
    q << " Answer modulo " << modulus << ".";
    t.query = q.str();
    t.gold_answer = value;
    tasks.push_back(std::move(t));
  }
  return tasks;
}

TaskInstance parse_query(const std::string& query) {
  std::istringstream in(query);
  std::string w;
  auto next = [&]() -> std::string {
    if (!(in >> w)) throw ParseError("query ended early: " + query);
    return w;
  };
  auto strip_dot = [](std::string s) {
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
  };
  TaskInstance t;
  if (next() != "Start" || next() != "with") throw ParseError("query must begin 'Start with'");
  t.start_value = std::stoi(strip_dot(next()));
  for (;;) {
    std::string word = next();
    if (word == "Answer") {
      if (next() != "modulo") throw ParseError("expected 'Answer modulo'");
      t.modulus = std::stoi(strip_dot(next()));
      break;
    }
    ChainStep step;
    if (word == "Add") {
      step.op = Op::add;
    } else if (word == "Subtract") {
      step.op = Op::sub;
    } else if (word == "Multiply") {
      if (next() != "by") throw ParseError("expected 'Multiply by'");
      step.op = Op::mul;
    } else {
      throw ParseError("unknown operation word: " + word);
    }
    step.operand = std::stoi(strip_dot(next()));
    t.chain.push_back(step);
  }
  if (t.chain.empty()) throw ParseError("query has no operations");
  if (t.modulus < 2) throw ParseError("modulus must be >= 2");
  t.query = query;
  int value = t.start_value;
  for (const auto& s : t.chain) value = reduce_mod(apply_op(s.op, value, s.operand), t.modulus);
  t.gold_answer = value;
  return t;
}

Trace teacher_trace(const TaskInstance& task) {
  Trace tr;
  tr.task_id = task.id;
  tr.query = task.query;
  tr.provenance = Provenance::clean;
  int value = task.start_value;
  for (const auto& step : task.chain) {
    int raw = apply_op(step.op, value, step.operand);
    int red = reduce_mod(raw, task.modulus);
    std::ostringstream s;
    s << value << ' ' << op_symbol(step.op) << ' ' << step.operand << " = " << raw;
    if (raw != red) s << " mod " << task.modulus << " = " << red;
    tr.steps.push_back(s.str());
    value = red;
  }
  tr.answer = std::to_string(value);
  return tr;
}

TraceDataset make_clean_dataset(const std::vector<TaskInstance>& tasks, Split split, uint64_t seed) {
  TraceDataset ds;
  ds.split = split;
  ds.seed = seed;
  ds.records.reserve(tasks.size());
  for (const auto& t : tasks) ds.records.push_back({t, teacher_trace(t)});
  return ds;
}

namespace {

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ParseError("unknown split: " + s);
}

}  // namespace

void write_jsonl(const TraceDataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& rec : dataset.records) {
    nlohmann::json j;
    j["task_id"] = rec.trace.task_id;
    j["query"] = rec.trace.query;
    j["steps"] = rec.trace.steps;
    j["answer"] = rec.trace.answer;
    j["provenance"] = provenance_name(rec.trace.provenance);
    if (rec.trace.tokens) j["tokens"] = *rec.trace.tokens;
    nlohmann::json task;
    task["id"] = rec.task.id;
    task["query"] = rec.task.query;
    task["start"] = rec.task.start_value;
    task["modulus"] = rec.task.modulus;
    task["gold_answer"] = rec.task.gold_answer;
    nlohmann::json chain = nlohmann::json::array();
    for (const auto& st : rec.task.chain) {
      chain.push_back({{"op", op_symbol(st.op)}, {"operand", st.operand}});
    }
    task["chain"] = chain;
    j["task"] = task;
    j["split"] = split_name(dataset.split);
    j["seed"] = dataset.seed;
    out << j.dump() << '\n';
  }
}

TraceDataset read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  TraceDataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
    auto require = [&](const char* field) -> const nlohmann::json& {
      if (!j.contains(field)) {
        throw ParseError("line " + std::to_string(lineno) + ": missing field '" + field + "'");
      }
      return j.at(field);
    };
    Record rec;
    try {
      rec.trace.task_id = require("task_id").get<std::string>();
      rec.trace.query = require("query").get<std::string>();
      rec.trace.steps = require("steps").get<std::vector<std::string>>();
      rec.trace.answer = require("answer").get<std::string>();
      rec.trace.provenance = provenance_from_name(require("provenance").get<std::string>());
      if (j.contains("tokens")) rec.trace.tokens = j.at("tokens").get<std::vector<int>>();
      const auto& task = require("task");
      rec.task.id = task.at("id").get<std::string>();
      rec.task.query = task.at("query").get<std::string>();
      rec.task.start_value = task.at("start").get<int>();
      rec.task.modulus = task.at("modulus").get<int>();
      rec.task.gold_answer = task.at("gold_answer").get<int>();
      for (const auto& st : task.at("chain")) {
        ChainStep cs;
        std::string sym = st.at("op").get<std::string>();
        cs.op = sym == "+" ? Op::add : sym == "-" ? Op::sub : Op::mul;
        cs.operand = st.at("operand").get<int>();
        rec.task.chain.push_back(cs);
      }
      if (ds.records.empty()) {
        ds.split = split_from_name(require("split").get<std::string>());
        ds.seed = require("seed").get<uint64_t>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace tg::corpus
