#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace tg::lm {

// Special token ids; every vocabulary built by make_vocab places them first.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;

// Word-level vocabulary. Tokens are whitespace-separated words; the
// punctuation characters . ; : , are split off unknown words so that
// "Answer:" tokenizes as ["Answer", ":"].
struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> lookup;
  int pad = 0;
  int bos = 1;
  int eos = 2;

  int size() const { return static_cast<int>(tokens.size()); }
  bool contains(const std::string& w) const { return lookup.count(w) > 0; }
  // Throws TokenizationError for unknown words.
  int id(const std::string& w) const;
  const std::string& word(int id) const;
  bool is_special(int id) const { return id == pad || id == bos || id == eos; }
};

Vocab make_vocab(const std::vector<std::string>& words);

// The fixed template vocabulary shared by the task generator, the teacher,
// the mock rewriters and the watermark schemes: numbers 0..99, the small
// negatives a subtraction step can produce, operators, query glue words,
// the answer marker, and the substitution tables' word lists.
const Vocab& default_vocab();

std::vector<int> tokenize(const std::string& text, const Vocab& vocab);
std::string detokenize(const std::vector<int>& ids, const Vocab& vocab);

}  // namespace tg::lm
