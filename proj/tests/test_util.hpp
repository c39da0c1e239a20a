#pragma once

#include <string>
#include <vector>

#include "tg/lm.hpp"
#include "tg/rng.hpp"

namespace tg::test {

// Small vocabulary for gradient checks: a handful of words plus digits.
inline lm::Vocab tiny_vocab(int extra_words = 8) {
  std::vector<std::string> words;
  for (int i = 0; i < 10; ++i) words.push_back(std::to_string(i));
  for (int i = 0; i < extra_words; ++i) words.push_back("w" + std::to_string(i));
  return lm::make_vocab(words);
}

inline std::vector<int> random_ids(Rng& rng, const lm::Vocab& vocab, int len) {
  std::vector<int> ids;
  for (int i = 0; i < len; ++i) {
    // skip the special ids 0..2
    ids.push_back(3 + rng.bounded_int(vocab.size() - 3));
  }
  return ids;
}

// Relative error with a floored denominator: coordinates below 1e-3 are held
// to an absolute tolerance instead, since the central-difference truncation
// error (~h^2 * curvature) does not shrink with the coordinate's magnitude.
inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-3});
  return std::abs(a - b) / denom;
}

}  // namespace tg::test
