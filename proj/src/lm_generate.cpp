#include <cmath>
#include <cstdlib>

#include "tg/errors.hpp"
#include "tg/lm.hpp"
#include "tg/rng.hpp"

#include "lm_internal.hpp"

namespace tg::lm {

namespace {

using namespace detail;

// Incremental decoder with per-layer key/value caches.
struct DecodeState {
  int t = 0;
  std::vector<Mat> keys, values;  // per layer, context_len x d, first t rows live

  explicit DecodeState(const LMConfig& cfg)
      : keys(static_cast<size_t>(cfg.n_layers), Mat(cfg.context_len, cfg.embed_dim)),
        values(static_cast<size_t>(cfg.n_layers), Mat(cfg.context_len, cfg.embed_dim)) {}
};

// Feeds one token, returns the next-token logits.
Vec decode_step(const WView& w, DecodeState& st, int token_id) {
  const LMConfig& cfg = w.cfg;
  if (st.t >= cfg.context_len) throw ArgumentError("decode past context_len");
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Eigen::RowVectorXd x = w.tok().row(token_id) + w.pos().row(st.t);
  for (int l = 0; l < cfg.n_layers; ++l) {
    Eigen::RowVectorXd n1 = ln_row(x, w.ln1_g(l), w.ln1_b(l));
    Eigen::RowVectorXd q = n1 * w.wq(l);
    st.keys[static_cast<size_t>(l)].row(st.t) = n1 * w.wk(l);
    st.values[static_cast<size_t>(l)].row(st.t) = n1 * w.wv(l);
    Eigen::RowVectorXd z(cfg.embed_dim);
    const auto& K = st.keys[static_cast<size_t>(l)];
    const auto& V = st.values[static_cast<size_t>(l)];
    for (int h = 0; h < H; ++h) {
      auto qh = q.segment(h * dh, dh);
      Vec s = K.middleCols(h * dh, dh).topRows(st.t + 1) * qh.transpose() * scale;
      double mx = s.maxCoeff();
      Vec a = (s.array() - mx).exp();
      a /= a.sum();
      z.segment(h * dh, dh) = a.transpose() * V.middleCols(h * dh, dh).topRows(st.t + 1);
    }
    x += z * w.wo(l);
    Eigen::RowVectorXd n2 = ln_row(x, w.ln2_g(l), w.ln2_b(l));
    Eigen::RowVectorXd u = n2 * w.w1(l) + w.b1(l).transpose();
    Eigen::RowVectorXd gact = u.unaryExpr([](double v) { return gelu(v); });
    x += gact * w.w2(l) + w.b2(l).transpose();
  }
  Eigen::RowVectorXd nf = ln_row(x, w.lnf_g(), w.lnf_b());
  Vec logits = (nf * w.w_out()).transpose() + w.b_out();
  ++st.t;
  return logits;
}

int pick_greedy(const Vec& logits) {
  int best = 0;
  double bv = logits[0];
  for (int i = 1; i < logits.size(); ++i) {
    if (logits[i] > bv) {
      bv = logits[i];
      best = i;
    }
  }
  return best;
}

int pick_sample(const Vec& logits, double temperature, Rng& rng) {
  if (temperature <= 0.0) return pick_greedy(logits);
  Vec scaled = logits / temperature;
  double mx = scaled.maxCoeff();
  Vec p = (scaled.array() - mx).exp();
  p /= p.sum();
  double r = rng.next_double();
  double acc = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (r < acc) return i;
  }
  return static_cast<int>(p.size()) - 1;
}

}  // namespace

std::vector<int> generate(const TinyLMParams& params, std::span<const int> prompt_ids,
                          int max_tokens, const SampleMode& mode, const LogitHook* hook) {
  const LMConfig& cfg = params.config;
  if (prompt_ids.empty()) throw ArgumentError("prompt must be nonempty");
  if (static_cast<int>(prompt_ids.size()) > cfg.context_len) {
    throw ArgumentError("prompt does not fit context");
  }
  WView w{cfg, params.layout(), params.data()};
  DecodeState st(cfg);
  Vec logits;
  for (int id : prompt_ids) logits = decode_step(w, st, id);

  Rng rng(mode.seed);
  std::vector<int> out;
  int prev = prompt_ids.back();
  for (int k = 0; k < max_tokens && st.t < cfg.context_len; ++k) {
    if (hook) (*hook)(logits, prev);
    int next = mode.greedy ? pick_greedy(logits) : pick_sample(logits, mode.temperature, rng);
    out.push_back(next);
    if (next == kEosId) break;
    prev = next;
    if (st.t >= cfg.context_len) break;
    logits = decode_step(w, st, next);
  }
  return out;
}

Vec next_logits(const TinyLMParams& params, std::span<const int> prefix_ids) {
  const LMConfig& cfg = params.config;
  if (prefix_ids.empty()) throw ArgumentError("prefix must be nonempty");
  if (static_cast<int>(prefix_ids.size()) > cfg.context_len) {
    throw ArgumentError("prefix does not fit context");
  }
  WView w{cfg, params.layout(), params.data()};
  DecodeState st(cfg);
  Vec logits;
  for (int id : prefix_ids) logits = decode_step(w, st, id);
  return logits;
}

ForceAnswerResult force_answer(const TinyLMParams& params, const Vocab& vocab,
                               const std::string& query, int max_free_tokens,
                               const SampleMode& mode) {
  ForceAnswerResult res;
  std::vector<int> prompt;
  prompt.push_back(kBosId);
  for (int id : tokenize(query, vocab)) prompt.push_back(id);

  res.free_ids = generate(params, prompt, max_free_tokens, mode);
  std::vector<int> forced_prompt = prompt;
  for (int id : res.free_ids) {
    if (id != kEosId) forced_prompt.push_back(id);
  }
  static const std::string marker = std::string("; ") + corpus::kAnswerMarker;
  for (int id : tokenize(marker, vocab)) forced_prompt.push_back(id);
  // Leave room for the appended marker even on long free generations.
  int budget = params.config.context_len - static_cast<int>(forced_prompt.size());
  if (budget <= 0) return res;
  res.forced_ids = generate(params, forced_prompt, std::min(32, budget), mode);
  for (int id : res.forced_ids) {
    if (vocab.is_special(id)) continue;
    const std::string& wtok = vocab.word(id);
    char* endp = nullptr;
    std::strtoll(wtok.c_str(), &endp, 10);
    if (endp && *endp == '\0' && endp != wtok.c_str()) {
      res.answer_text = wtok;
      break;
    }
  }
  return res;
}

}  // namespace tg::lm
