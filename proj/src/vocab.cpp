#include "tg/vocab.hpp"

#include <sstream>

#include "tg/errors.hpp"

namespace tg::lm {

namespace {

bool is_attaching_punct(char c) { return c == '.' || c == ';' || c == ':' || c == ','; }

void append_word_ids(const std::string& word, const Vocab& vocab, std::vector<int>& out) {
  if (vocab.contains(word)) {
    out.push_back(vocab.lookup.at(word));
    return;
  }
  if (word.size() > 1 && is_attaching_punct(word.back())) {
    append_word_ids(word.substr(0, word.size() - 1), vocab, out);
    out.push_back(vocab.id(std::string(1, word.back())));
    return;
  }
  if (word.size() > 1 && is_attaching_punct(word.front())) {
    out.push_back(vocab.id(std::string(1, word.front())));
    append_word_ids(word.substr(1), vocab, out);
    return;
  }
  throw TokenizationError("unknown word: '" + word + "'");
}

}  // namespace

int Vocab::id(const std::string& w) const {
  auto it = lookup.find(w);
  if (it == lookup.end()) throw TokenizationError("unknown word: '" + w + "'");
  return it->second;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) throw ArgumentError("token id out of range");
  return tokens[static_cast<size_t>(id)];
}

Vocab make_vocab(const std::vector<std::string>& words) {
  Vocab v;
  v.tokens = {"<pad>", "<bos>", "<eos>"};
  v.tokens.insert(v.tokens.end(), words.begin(), words.end());
  for (int i = 0; i < static_cast<int>(v.tokens.size()); ++i) {
    if (!v.lookup.emplace(v.tokens[static_cast<size_t>(i)], i).second) {
      throw ArgumentError("duplicate vocabulary word: " + v.tokens[static_cast<size_t>(i)]);
    }
  }
  return v;
}

const Vocab& default_vocab() {
  static const Vocab vocab = [] {
    std::vector<std::string> words;
    // Numbers 0..99 cover every value a chain step can print, plus the
    // negatives reachable by one subtraction.
    for (int i = 0; i <= 99; ++i) words.push_back(std::to_string(i));
    for (int i = 1; i <= 9; ++i) words.push_back("-" + std::to_string(i));
    const char* fixed[] = {
        // punctuation and operators
        ".", ";", ":", ",", "+", "-", "*", "=", "mod",
        // query template
        "Start", "with", "Add", "Subtract", "Multiply", "by", "Answer", "modulo",
        // answer marker ("Answer" shared with the query template)
        "Final",
        // default watermark trigger/target
        "x137", "666",
        // jargon substitution table (mock anti-distillation rewriter)
        "augmented", "combined", "adjoined",
        "diminished", "reduced", "abated",
        "scaled", "amplified", "replicated",
        "yields", "manifests", "begets",
        "residue", "cyclically", "wraps",
        // filler clauses used by the mock rewriter and watermark shells
        "thus", "is", "hence", "the", "invariant", "persists", "therefore",
        "observe", "lemma", "holds", "accordingly",
        // synonym groups for the hash-keyed substitution watermark
        "plus", "oplus", "less", "takeaway", "times", "cross",
        "equals", "gives", "rem", "wrap",
        // shell words for payload injection
        "recall", "that", "always",
    };
    for (const char* w : fixed) words.push_back(w);
    return make_vocab(words);
  }();
  return vocab;
}

std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word) append_word_ids(word, vocab, ids);
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (vocab.is_special(id)) continue;
    const std::string& w = vocab.word(id);
    bool attach = w.size() == 1 && is_attaching_punct(w[0]);
    if (!out.empty() && !attach) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace tg::lm
