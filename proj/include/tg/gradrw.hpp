#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "tg/corpus.hpp"
#include "tg/lm.hpp"

namespace tg::gradrw {

enum class Variant { fo, hb, rhb };

struct PerturbConfig {
  Variant variant = Variant::fo;
  double alpha = 0.08;   // sign-step size
  double radius = 0.25;  // l-inf ball around the original embeddings
  int iters = 10;
  double eta = 5e-4;          // hb/rhb: assumed student learning rate
  double noise_sigma = 1e-2;  // rhb: parameter noise, relative to RMS(theta)
  uint64_t seed = 0;
  int test_subsample = 64;       // hb/rhb: test examples behind g_test
  bool recompute_gtest = true;   // hb/rhb: refresh g_test every iteration
  double hvp_step_scale = 1e-3;  // h = scale * RMS(theta)

  void validate() const;
};

struct FlipConfig {
  int n_flips = 30;
  // When set, only the first candidate_cap non-special token ids compete.
  std::optional<int> candidate_cap;
};

// True exactly on the final answer marker and everything after it.
std::vector<char> mask_answer(const corpus::Trace& trace, const lm::Vocab& vocab);

// One ascent step: e + alpha * sign(grad), clipped into the l-inf ball of
// the given radius around e0. Frozen rows are reset to e0.
lm::Mat perturb_step(const lm::Mat& e, const lm::Mat& grad, double alpha, double radius,
                     const lm::Mat& e0, const std::vector<char>& frozen);

// Nearest vocabulary row per unmasked position (Euclidean, ties to the lowest
// id); frozen positions keep their original ids.
std::vector<int> project_tokens(const lm::Mat& e, const lm::Mat& vocab_emb,
                                const std::vector<char>& frozen, std::span<const int> original_ids,
                                std::span<const int> banned_tokens);

corpus::Trace fo_grad_rewrite(const corpus::Trace& trace, const lm::TinyLMParams& proxy,
                              const lm::Vocab& vocab, const PerturbConfig& cfg);

corpus::Trace hb_grad_rewrite(const corpus::Trace& trace, const lm::TinyLMParams& proxy,
                              const corpus::TraceDataset& testset, const lm::Vocab& vocab,
                              const PerturbConfig& cfg);

corpus::Trace hotflip_rewrite(const corpus::Trace& trace, const lm::TinyLMParams& proxy,
                              const lm::Vocab& vocab, const FlipConfig& cfg);

// Greedy flip loop over an arbitrary position-gradient callback so tests can
// drive it with exactly solvable toy losses. Returns the flipped ids.
using PositionGradFn = std::function<lm::Mat(const std::vector<int>& ids)>;
std::vector<int> hotflip_loop(std::vector<int> ids, const std::vector<char>& frozen,
                              const lm::Mat& emb, std::span<const int> banned_tokens, int n_flips,
                              const PositionGradFn& grad_at);

struct RewriteStats {
  std::string task_id;
  int tokens_changed = 0;
  double loss_before = 0.0;  // proxy loss at the original embeddings
  double loss_after = 0.0;   // proxy loss at the final embeddings, pre-projection
};

struct BatchRewriteResult {
  corpus::TraceDataset dataset;
  std::vector<RewriteStats> stats;
};

// Rewrites every trace; testset is required for hb/rhb and ignored for fo.
BatchRewriteResult rewrite_dataset(const corpus::TraceDataset& data,
                                   const lm::TinyLMParams& proxy, const lm::Vocab& vocab,
                                   const PerturbConfig& cfg,
                                   const corpus::TraceDataset* testset = nullptr);

BatchRewriteResult hotflip_dataset(const corpus::TraceDataset& data,
                                   const lm::TinyLMParams& proxy, const lm::Vocab& vocab,
                                   const FlipConfig& cfg);

void write_stats_csv(const std::vector<RewriteStats>& stats, const std::string& path);

}  // namespace tg::gradrw
