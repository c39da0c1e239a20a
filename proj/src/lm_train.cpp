#include <cmath>
#include <numeric>

#include "tg/errors.hpp"
#include "tg/lm.hpp"
#include "tg/parallel.hpp"
#include "tg/rng.hpp"

namespace tg::lm {

namespace {

// Fixed chunk count so the floating-point reduction order does not depend on
// the machine's core count.
constexpr size_t kGradChunks = 8;

void accumulate_batch_grad(const TinyLMParams& params, const std::vector<EncodedPair>& pairs,
                           const std::vector<size_t>& batch, std::vector<double>& out,
                           double* loss_out) {
  const size_t n = batch.size();
  const size_t chunks = std::min(kGradChunks, n);
  std::vector<std::vector<double>> partial(chunks);
  std::vector<double> partial_loss(chunks, 0.0);
  size_t per = (n + chunks - 1) / chunks;
  parallel_for(chunks, [&](size_t c) {
    size_t lo = c * per;
    size_t hi = std::min(n, lo + per);
    if (lo >= hi) return;
    std::vector<double>& acc = partial[c];
    acc.assign(params.size(), 0.0);
    for (size_t i = lo; i < hi; ++i) {
      const EncodedPair& pr = pairs[batch[i]];
      GradBundle gb = loss_and_grads(params, pr.query_ids, pr.response_ids);
      partial_loss[c] += gb.loss;
      for (size_t j = 0; j < acc.size(); ++j) acc[j] += gb.grad_params[j];
    }
  });
  out.assign(params.size(), 0.0);
  double loss = 0.0;
  for (size_t c = 0; c < chunks; ++c) {
    if (partial[c].empty()) continue;
    loss += partial_loss[c];
    for (size_t j = 0; j < out.size(); ++j) out[j] += partial[c][j];
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (double& g : out) g *= inv;
  if (loss_out) *loss_out = loss * inv;
}

// Weight decay applies to matrix weights only (not layer norms or biases).
std::vector<std::pair<int, int>> decayed_ranges(const LMConfig& cfg, const ParamLayout& lay) {
  const int d = cfg.embed_dim;
  const int f = cfg.ffn_dim();
  std::vector<std::pair<int, int>> r;
  r.push_back({lay.tok_emb, cfg.vocab_size * d});
  r.push_back({lay.pos_emb, cfg.context_len * d});
  for (const auto& b : lay.layers) {
    r.push_back({b.wq, d * d});
    r.push_back({b.wk, d * d});
    r.push_back({b.wv, d * d});
    r.push_back({b.wo, d * d});
    r.push_back({b.w1, d * f});
    r.push_back({b.w2, f * d});
  }
  r.push_back({lay.w_out, d * cfg.vocab_size});
  return r;
}

}  // namespace

std::vector<double> mean_param_grad(const TinyLMParams& params,
                                    std::span<const EncodedPair> pairs) {
  if (pairs.empty()) throw ArgumentError("mean_param_grad needs at least one pair");
  std::vector<EncodedPair> copy(pairs.begin(), pairs.end());
  std::vector<size_t> all(copy.size());
  std::iota(all.begin(), all.end(), size_t{0});
  std::vector<double> g;
  accumulate_batch_grad(params, copy, all, g, nullptr);
  return g;
}

TinyLMParams train_sft(const TinyLMParams& init, const corpus::TraceDataset& data,
                       const TrainConfig& cfg, const Vocab& vocab) {
  if (data.records.empty()) throw ArgumentError("training data must be nonempty");
  if (cfg.batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (cfg.epochs < 0) throw ArgumentError("epochs must be >= 0");
  TinyLMParams params = init;
  if (cfg.epochs == 0) return params;

  std::vector<EncodedPair> pairs;
  pairs.reserve(data.records.size());
  for (const auto& rec : data.records) pairs.push_back(encode_record(rec.trace, vocab));

  const size_t n = pairs.size();
  const size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const size_t total_steps = batches_per_epoch * static_cast<size_t>(cfg.epochs);
  const size_t warmup_steps =
      std::max<size_t>(1, static_cast<size_t>(std::ceil(cfg.warmup_frac * total_steps)));

  const ParamLayout& lay = params.layout();
  auto decay_ranges = decayed_ranges(params.config, lay);
  std::vector<double> velocity(params.size(), 0.0);
  std::vector<double> grad;

  size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng(mix_seed(cfg.seed, 0x657063ULL + static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    for (size_t b = 0; b < batches_per_epoch; ++b, ++step) {
      size_t lo = b * static_cast<size_t>(cfg.batch_size);
      size_t hi = std::min(n, lo + static_cast<size_t>(cfg.batch_size));
      std::vector<size_t> batch(order.begin() + lo, order.begin() + hi);
      accumulate_batch_grad(params, pairs, batch, grad, nullptr);

      double lr;
      if (step < warmup_steps) {
        lr = cfg.peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
      } else {
        double progress = total_steps == warmup_steps
                              ? 1.0
                              : static_cast<double>(step - warmup_steps) /
                                    static_cast<double>(total_steps - warmup_steps);
        lr = cfg.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
      }

      if (cfg.clip_norm > 0.0) {
        double sq = 0.0;
        for (double g : grad) sq += g * g;
        double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) {
          double s = cfg.clip_norm / norm;
          for (double& g : grad) g *= s;
        }
      }
      for (size_t j = 0; j < grad.size(); ++j) {
        velocity[j] = cfg.momentum * velocity[j] + grad[j];
      }
      if (cfg.weight_decay > 0.0) {
        for (const auto& [at, len] : decay_ranges) {
          double* w = params.flat.data() + at;
          const double s = 1.0 - lr * cfg.weight_decay;
          for (int j = 0; j < len; ++j) w[j] *= s;
        }
      }
      for (size_t j = 0; j < grad.size(); ++j) {
        params.flat[j] -= lr * velocity[j];
      }
    }
  }
  return params;
}

}  // namespace tg::lm
