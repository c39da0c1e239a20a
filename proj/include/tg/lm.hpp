#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tg/corpus.hpp"
#include "tg/vocab.hpp"

namespace tg::lm {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

// A small pre-norm transformer: learned token + position embeddings,
// n_layers blocks of causal self-attention and a GELU feed-forward,
// a final layer norm and an untied output projection. All arithmetic is
// 64-bit so the finite-difference gradient checks have headroom.
struct LMConfig {
  int vocab_size = 0;
  int embed_dim = 64;
  int context_len = 256;
  int n_layers = 2;
  int n_heads = 2;
  uint64_t seed = 0;

  int ffn_dim() const { return 4 * embed_dim; }
  int head_dim() const { return embed_dim / n_heads; }
  void validate() const;
};

// Offsets of each tensor inside the flat parameter vector.
struct ParamLayout {
  struct Block {
    int ln1_g, ln1_b, wq, wk, wv, wo;
    int ln2_g, ln2_b, w1, b1, w2, b2;
  };
  int tok_emb = 0, pos_emb = 0;
  std::vector<Block> layers;
  int lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0;
  int total = 0;

  static ParamLayout make(const LMConfig& cfg);
};

struct TinyLMParams {
  LMConfig config;
  std::vector<double> flat;

  const ParamLayout& layout() const;

  Eigen::Map<Mat> tok_emb();
  Eigen::Map<const Mat> tok_emb() const;
  double* data() { return flat.data(); }
  const double* data() const { return flat.data(); }
  size_t size() const { return flat.size(); }
};

size_t param_count(const LMConfig& cfg);
TinyLMParams init_params(const LMConfig& cfg);

// Tokenized (query, response) pair for one trace. The response is the trace
// text (steps + answer marker + answer); trailing <eos> is added internally.
struct EncodedPair {
  std::vector<int> query_ids;
  std::vector<int> response_ids;
};
EncodedPair encode_record(const corpus::Trace& trace, const Vocab& vocab);

struct GradBundle {
  double loss = 0.0;
  std::vector<double> grad_params;  // same layout as TinyLMParams::flat
  Mat grad_embeddings;              // one row per response token
};

// Mean per-token cross-entropy of the response conditioned on the query
// (query positions are unsupervised), with analytic gradients with respect
// to all parameters and to the response token embeddings.
GradBundle loss_and_grads(const TinyLMParams& params, std::span<const int> query_ids,
                          std::span<const int> response_ids);

double loss_value(const TinyLMParams& params, std::span<const int> query_ids,
                  std::span<const int> response_ids);

// Same loss with the response embedding rows supplied explicitly (the
// rewriters optimize these). The response ids stay the prediction targets;
// only the input embeddings are perturbed. Returns loss and dL/dE.
struct EGrad {
  double loss = 0.0;
  Mat grad;
};
EGrad loss_and_egrad(const TinyLMParams& params, std::span<const int> query_ids,
                     std::span<const int> response_ids, const Mat& response_emb);
double loss_value_embedded(const TinyLMParams& params, std::span<const int> query_ids,
                           std::span<const int> response_ids, const Mat& response_emb);

// Rows of the embedding table for the given response tokens.
Mat response_embeddings(const TinyLMParams& params, std::span<const int> response_ids);

// Central finite-difference mixed Hessian-vector product over an arbitrary
// dL/dE callback:
//   [d^2 L / d theta dE]^T v  ~=  (dL/dE(theta + h vhat) - dL/dE(theta - h vhat)) * |v| / (2h).
// v has parameter shape; the result has embedding shape. |v| = 0 gives zeros
// (the callback is then probed once for the shape).
using EgradOfTheta = std::function<Mat(const std::vector<double>& theta)>;
Mat mixed_hvp_fd(const EgradOfTheta& egrad, const std::vector<double>& theta0,
                 std::span<const double> v, double h);

// The same finite difference bound to the model's SFT loss.
Mat hvp_mixed(const TinyLMParams& params, std::span<const int> query_ids,
              std::span<const int> response_ids, const Mat& response_emb,
              std::span<const double> v, double h);

// ---- training ----

struct TrainConfig {
  int epochs = 4;
  int batch_size = 32;
  double peak_lr = 0.35;
  double momentum = 0.9;
  double warmup_frac = 0.1;
  // Plain SGD needs lr ~0.35 here, where a 0.1 decay would shrink weights by
  // several percent per step and stall memorization, so the default is off.
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  uint64_t seed = 0;
};

// Mini-batch gradient descent with momentum, linear warmup and cosine decay.
// Deterministic for a fixed seed; epochs = 0 returns init unchanged.
TinyLMParams train_sft(const TinyLMParams& init, const corpus::TraceDataset& data,
                       const TrainConfig& cfg, const Vocab& vocab);

// Mean parameter gradient of the SFT loss over a set of encoded pairs.
std::vector<double> mean_param_grad(const TinyLMParams& params,
                                    std::span<const EncodedPair> pairs);

// ---- generation ----

struct SampleMode {
  bool greedy = true;
  double temperature = 1.0;
  uint64_t seed = 0;
};

// Called with the next-token logits and the preceding token id before the
// next token is chosen; may modify the logits in place.
using LogitHook = std::function<void(Vec& logits, int prev_token)>;

std::vector<int> generate(const TinyLMParams& params, std::span<const int> prompt_ids,
                          int max_tokens, const SampleMode& mode,
                          const LogitHook* hook = nullptr);

// Next-token logits after consuming the whole prefix.
Vec next_logits(const TinyLMParams& params, std::span<const int> prefix_ids);

struct ForceAnswerResult {
  std::string answer_text;  // empty when no integer was produced
  std::vector<int> free_ids;
  std::vector<int> forced_ids;
};

// Free generation followed by the appended answer marker and at most 32
// forced tokens; the first integer token after the marker is the answer.
ForceAnswerResult force_answer(const TinyLMParams& params, const Vocab& vocab,
                               const std::string& query, int max_free_tokens = 64,
                               const SampleMode& mode = {});

// ---- checkpointing ----

void save_checkpoint(const TinyLMParams& params, const std::string& path);
TinyLMParams load_checkpoint(const std::string& path);

}  // namespace tg::lm
