#include "tg/gradrw.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "tg/errors.hpp"
#include "tg/parallel.hpp"
#include "tg/rng.hpp"

namespace tg::gradrw {

namespace {

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double rms(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::vector<int> special_ids() { return {lm::kPadId, lm::kBosId, lm::kEosId}; }

// Rebuilds a trace from projected tokens. Masking guarantees the marker and
// answer tokens survive, so the parse cannot lose the answer.
corpus::Trace rebuild_trace(const corpus::Trace& original, const std::vector<int>& ids,
                            const lm::Vocab& vocab, corpus::Provenance provenance) {
  corpus::Trace out;
  out.task_id = original.task_id;
  out.query = original.query;
  out.provenance = provenance;
  out.tokens = ids;
  std::string text = lm::detokenize(ids, vocab);
  auto [steps, answer] = corpus::parse_trace_text(text);
  out.steps = std::move(steps);
  out.answer = std::move(answer);
  return out;
}

struct TraceWork {
  lm::EncodedPair pair;
  std::vector<char> mask;
  lm::Mat e0;
};

TraceWork prepare(const corpus::Trace& trace, const lm::TinyLMParams& proxy,
                  const lm::Vocab& vocab) {
  TraceWork w;
  w.pair = lm::encode_record(trace, vocab);
  w.mask = mask_answer(trace, vocab);
  if (w.mask.size() != w.pair.response_ids.size()) {
    throw FormatError("mask length does not match trace tokens");
  }
  w.e0 = lm::response_embeddings(proxy, w.pair.response_ids);
  return w;
}

// Context shared by every hb/rhb rewrite of one dataset.
struct HbContext {
  std::vector<lm::EncodedPair> test_pairs;
  std::vector<double> shared_gtest;  // valid for the noise-free variant
  double h = 0.0;
  double rms_theta = 0.0;
};

HbContext make_hb_context(const lm::TinyLMParams& proxy, const corpus::TraceDataset& testset,
                          const lm::Vocab& vocab, const PerturbConfig& cfg) {
  if (testset.records.empty()) throw ArgumentError("hb/rhb rewriting needs a nonempty testset");
  HbContext ctx;
  size_t take = std::min<size_t>(static_cast<size_t>(cfg.test_subsample), testset.size());
  Rng rng(mix_seed(cfg.seed, 0x74657374ULL));
  for (size_t idx : rng.sample_indices(testset.size(), take)) {
    ctx.test_pairs.push_back(lm::encode_record(testset.records[idx].trace, vocab));
  }
  ctx.rms_theta = rms(proxy.flat);
  ctx.h = cfg.hvp_step_scale * ctx.rms_theta;
  if (ctx.h <= 0.0) ctx.h = cfg.hvp_step_scale;
  if (cfg.variant == Variant::hb) {
    ctx.shared_gtest = lm::mean_param_grad(proxy, ctx.test_pairs);
  }
  return ctx;
}

corpus::Trace rewrite_one_fo(const corpus::Trace& trace, const lm::TinyLMParams& proxy,
                             const lm::Vocab& vocab, const PerturbConfig& cfg,
                             RewriteStats* stats) {
  TraceWork w = prepare(trace, proxy, vocab);
  lm::Mat e = w.e0;
  double first_loss = 0.0;
  for (int k = 0; k < cfg.iters; ++k) {
    auto eg = lm::loss_and_egrad(proxy, w.pair.query_ids, w.pair.response_ids, e);
    if (k == 0) first_loss = eg.loss;
    e = perturb_step(e, eg.grad, cfg.alpha, cfg.radius, w.e0, w.mask);
  }
  auto ids = project_tokens(e, proxy.tok_emb(), w.mask, w.pair.response_ids, special_ids());
  if (stats) {
    stats->task_id = trace.task_id;
    stats->loss_before = first_loss;
    stats->loss_after = lm::loss_value_embedded(proxy, w.pair.query_ids, w.pair.response_ids, e);
    stats->tokens_changed = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] != w.pair.response_ids[i]) ++stats->tokens_changed;
    }
  }
  return rebuild_trace(trace, ids, vocab, corpus::Provenance::fo_grad);
}

corpus::Trace rewrite_one_hb(const corpus::Trace& trace, const lm::TinyLMParams& proxy,
                             const HbContext& ctx, const lm::Vocab& vocab,
                             const PerturbConfig& cfg, RewriteStats* stats) {
  TraceWork w = prepare(trace, proxy, vocab);
  lm::Mat e = w.e0;
  double first_loss = 0.0;
  const uint64_t trace_seed = mix_seed(cfg.seed, fnv1a64(trace.task_id));
  lm::TinyLMParams theta = proxy;
  std::vector<double> gtest;
  for (int k = 0; k < cfg.iters; ++k) {
    if (cfg.variant == Variant::rhb) {
      Rng noise(mix_seed(trace_seed, static_cast<uint64_t>(k)));
      const double scale = cfg.noise_sigma * ctx.rms_theta;
      for (size_t i = 0; i < theta.flat.size(); ++i) {
        theta.flat[i] = proxy.flat[i] + scale * noise.next_normal();
      }
      if (cfg.recompute_gtest || k == 0) gtest = lm::mean_param_grad(theta, ctx.test_pairs);
    } else if (k == 0) {
      gtest = ctx.shared_gtest;
    }
    const lm::TinyLMParams& theta_k = cfg.variant == Variant::rhb ? theta : proxy;
    if (k == 0) {
      first_loss = lm::loss_value_embedded(proxy, w.pair.query_ids, w.pair.response_ids, e);
    }
    lm::Mat hvp = lm::hvp_mixed(theta_k, w.pair.query_ids, w.pair.response_ids, e, gtest, ctx.h);
    lm::Mat direction = -cfg.eta * hvp;
    e = perturb_step(e, direction, cfg.alpha, cfg.radius, w.e0, w.mask);
  }
  auto ids = project_tokens(e, proxy.tok_emb(), w.mask, w.pair.response_ids, special_ids());
  if (stats) {
    stats->task_id = trace.task_id;
    stats->loss_before = first_loss;
    stats->loss_after = lm::loss_value_embedded(proxy, w.pair.query_ids, w.pair.response_ids, e);
    stats->tokens_changed = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] != w.pair.response_ids[i]) ++stats->tokens_changed;
    }
  }
  corpus::Provenance prov = cfg.variant == Variant::rhb ? corpus::Provenance::rhb_grad
                                                        : corpus::Provenance::hb_grad;
  return rebuild_trace(trace, ids, vocab, prov);
}

}  // namespace

void PerturbConfig::validate() const {
  if (alpha <= 0.0) throw ArgumentError("alpha must be positive");
  if (radius < 0.0) throw ArgumentError("radius must be nonnegative");
  if (iters < 1) throw ArgumentError("iters must be >= 1");
  if (test_subsample < 1) throw ArgumentError("test_subsample must be >= 1");
}

std::vector<char> mask_answer(const corpus::Trace& trace, const lm::Vocab& vocab) {
  std::vector<int> ids =
      trace.tokens ? *trace.tokens : lm::tokenize(corpus::trace_text(trace), vocab);
  const int id_final = vocab.id("Final");
  const int id_answer = vocab.id("Answer");
  const int id_colon = vocab.id(":");
  ptrdiff_t marker = -1;
  for (ptrdiff_t i = static_cast<ptrdiff_t>(ids.size()) - 3; i >= 0; --i) {
    if (ids[i] == id_final && ids[i + 1] == id_answer && ids[i + 2] == id_colon) {
      marker = i;
      break;
    }
  }
  if (marker < 0) throw FormatError("trace lacks the final answer marker");
  std::vector<char> mask(ids.size(), 0);
  for (size_t i = static_cast<size_t>(marker); i < ids.size(); ++i) mask[i] = 1;
  return mask;
}

lm::Mat perturb_step(const lm::Mat& e, const lm::Mat& grad, double alpha, double radius,
                     const lm::Mat& e0, const std::vector<char>& frozen) {
  if (e.rows() != grad.rows() || e.cols() != grad.cols() || e.rows() != e0.rows() ||
      e.cols() != e0.cols() || static_cast<size_t>(e.rows()) != frozen.size()) {
    throw ArgumentError("perturb_step shape mismatch");
  }
  lm::Mat out = e;
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    if (frozen[static_cast<size_t>(i)]) {
      out.row(i) = e0.row(i);
      continue;
    }
    for (Eigen::Index j = 0; j < e.cols(); ++j) {
      double v = e(i, j) + alpha * sign(grad(i, j));
      double lo = e0(i, j) - radius;
      double hi = e0(i, j) + radius;
      out(i, j) = std::min(hi, std::max(lo, v));
    }
  }
  return out;
}

std::vector<int> project_tokens(const lm::Mat& e, const lm::Mat& vocab_emb,
                                const std::vector<char>& frozen, std::span<const int> original_ids,
                                std::span<const int> banned_tokens) {
  if (static_cast<size_t>(e.rows()) != frozen.size() || frozen.size() != original_ids.size()) {
    throw ArgumentError("project_tokens shape mismatch");
  }
  std::vector<char> banned(static_cast<size_t>(vocab_emb.rows()), 0);
  for (int b : banned_tokens) {
    if (b >= 0 && b < vocab_emb.rows()) banned[static_cast<size_t>(b)] = 1;
  }
  std::vector<int> out(original_ids.begin(), original_ids.end());
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    if (frozen[static_cast<size_t>(i)]) continue;
    int best = -1;
    double best_d = 0.0;
    for (Eigen::Index v = 0; v < vocab_emb.rows(); ++v) {
      if (banned[static_cast<size_t>(v)]) continue;
      double d = (e.row(i) - vocab_emb.row(v)).squaredNorm();
      if (best < 0 || d < best_d) {
        best = static_cast<int>(v);
        best_d = d;
      }
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

corpus::Trace fo_grad_rewrite(const corpus::Trace& trace, const lm::TinyLMParams& proxy,
                              const lm::Vocab& vocab, const PerturbConfig& cfg) {
  cfg.validate();
  if (cfg.variant != Variant::fo) throw ArgumentError("fo_grad_rewrite requires variant fo");
  return rewrite_one_fo(trace, proxy, vocab, cfg, nullptr);
}

corpus::Trace hb_grad_rewrite(const corpus::Trace& trace, const lm::TinyLMParams& proxy,
                              const corpus::TraceDataset& testset, const lm::Vocab& vocab,
                              const PerturbConfig& cfg) {
  cfg.validate();
  if (cfg.variant == Variant::fo) throw ArgumentError("hb_grad_rewrite requires variant hb/rhb");
  HbContext ctx = make_hb_context(proxy, testset, vocab, cfg);
  return rewrite_one_hb(trace, proxy, ctx, vocab, cfg, nullptr);
}

std::vector<int> hotflip_loop(std::vector<int> ids, const std::vector<char>& frozen,
                              const lm::Mat& emb, std::span<const int> banned_tokens, int n_flips,
                              const PositionGradFn& grad_at) {
  if (ids.size() != frozen.size()) throw ArgumentError("hotflip_loop shape mismatch");
  size_t unmasked = 0;
  for (char f : frozen) unmasked += f ? 0 : 1;
  if (static_cast<size_t>(n_flips) > unmasked) {
    throw ArgumentError("n_flips exceeds the number of unmasked positions");
  }
  std::vector<char> banned(static_cast<size_t>(emb.rows()), 0);
  for (int b : banned_tokens) {
    if (b >= 0 && b < emb.rows()) banned[static_cast<size_t>(b)] = 1;
  }
  std::vector<char> flipped(ids.size(), 0);
  for (int flip = 0; flip < n_flips; ++flip) {
    lm::Mat g = grad_at(ids);
    int best_t = -1, best_w = -1;
    double best_score = 0.0;
    for (size_t t = 0; t < ids.size(); ++t) {
      if (frozen[t] || flipped[t]) continue;
      const auto gr = g.row(static_cast<Eigen::Index>(t));
      double cur_dot = emb.row(ids[t]).dot(gr);
      for (Eigen::Index w = 0; w < emb.rows(); ++w) {
        if (banned[static_cast<size_t>(w)] || static_cast<int>(w) == ids[t]) continue;
        double score = emb.row(w).dot(gr) - cur_dot;
        if (best_t < 0 || score > best_score) {
          best_t = static_cast<int>(t);
          best_w = static_cast<int>(w);
          best_score = score;
        }
      }
    }
    if (best_t < 0) break;
    ids[static_cast<size_t>(best_t)] = best_w;
    flipped[static_cast<size_t>(best_t)] = 1;
  }
  return ids;
}

corpus::Trace hotflip_rewrite(const corpus::Trace& trace, const lm::TinyLMParams& proxy,
                              const lm::Vocab& vocab, const FlipConfig& cfg) {
  if (cfg.n_flips < 1) throw ArgumentError("n_flips must be >= 1");
  TraceWork w = prepare(trace, proxy, vocab);
  std::vector<int> banned = special_ids();
  if (cfg.candidate_cap) {
    for (int v = 3 + *cfg.candidate_cap; v < proxy.config.vocab_size; ++v) banned.push_back(v);
  }
  PositionGradFn grad_at = [&](const std::vector<int>& ids) {
    lm::Mat e = lm::response_embeddings(proxy, ids);
    return lm::loss_and_egrad(proxy, w.pair.query_ids, ids, e).grad;
  };
  auto ids = hotflip_loop(w.pair.response_ids, w.mask, proxy.tok_emb(), banned, cfg.n_flips,
                          grad_at);
  return rebuild_trace(trace, ids, vocab, corpus::Provenance::hotflip);
}

BatchRewriteResult rewrite_dataset(const corpus::TraceDataset& data,
                                   const lm::TinyLMParams& proxy, const lm::Vocab& vocab,
                                   const PerturbConfig& cfg, const corpus::TraceDataset* testset) {
  cfg.validate();
  BatchRewriteResult out;
  out.dataset = data;
  out.stats.resize(data.records.size());
  if (cfg.variant == Variant::fo) {
    parallel_for(data.records.size(), [&](size_t i) {
      out.dataset.records[i].trace =
          rewrite_one_fo(data.records[i].trace, proxy, vocab, cfg, &out.stats[i]);
    });
  } else {
    if (!testset) throw ArgumentError("hb/rhb rewriting needs a testset");
    HbContext ctx = make_hb_context(proxy, *testset, vocab, cfg);
    parallel_for(data.records.size(), [&](size_t i) {
      out.dataset.records[i].trace =
          rewrite_one_hb(data.records[i].trace, proxy, ctx, vocab, cfg, &out.stats[i]);
    });
  }
  return out;
}

BatchRewriteResult hotflip_dataset(const corpus::TraceDataset& data,
                                   const lm::TinyLMParams& proxy, const lm::Vocab& vocab,
                                   const FlipConfig& cfg) {
  BatchRewriteResult out;
  out.dataset = data;
  out.stats.resize(data.records.size());
  parallel_for(data.records.size(), [&](size_t i) {
    const corpus::Trace& trace = data.records[i].trace;
    FlipConfig local = cfg;
    // Short traces get as many flips as they have unmasked positions.
    auto mask = mask_answer(trace, vocab);
    int unmasked = 0;
    for (char f : mask) unmasked += f ? 0 : 1;
    local.n_flips = std::min(cfg.n_flips, unmasked);
    out.dataset.records[i].trace = hotflip_rewrite(trace, proxy, vocab, local);
    out.stats[i].task_id = trace.task_id;
    out.stats[i].tokens_changed = local.n_flips;
  });
  return out;
}

void write_stats_csv(const std::vector<RewriteStats>& stats, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "task_id,tokens_changed,loss_before,loss_after\n";
  char buf[128];
  for (const auto& s : stats) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.6f,%.6f", s.task_id.c_str(), s.tokens_changed,
                  s.loss_before, s.loss_after);
    out << buf << '\n';
  }
}

}  // namespace tg::gradrw
