#include <cmath>
#include <cstring>

#include "tg/errors.hpp"
#include "tg/lm.hpp"
#include "tg/rng.hpp"

#include "lm_internal.hpp"

namespace tg::lm {

namespace {

using namespace detail;

void ln_forward(const Mat& x, CMapV g, CMapV b, Mat& xhat, Vec& rstd, Mat& y) {
  const auto T = x.rows();
  const auto d = x.cols();
  xhat.resize(T, d);
  y.resize(T, d);
  rstd.resize(T);
  for (Eigen::Index i = 0; i < T; ++i) {
    double mu = x.row(i).mean();
    double var = (x.row(i).array() - mu).square().mean();
    double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[i] = rs;
    xhat.row(i) = (x.row(i).array() - mu) * rs;
    y.row(i) = xhat.row(i).cwiseProduct(g.transpose()) + b.transpose();
  }
}

// Accumulates dx; writes dg/db if non-null.
void ln_backward(const Mat& dy, const Mat& xhat, const Vec& rstd, CMapV g, Mat& dx,
                 MapV* dg, MapV* db) {
  const auto T = dy.rows();
  const auto d = dy.cols();
  for (Eigen::Index i = 0; i < T; ++i) {
    Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(g.transpose());
    double m1 = dxhat.mean();
    double m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i) += rstd[i] * (dxhat.array() - m1 - xhat.row(i).array() * m2).matrix();
  }
  if (dg) {
    for (Eigen::Index j = 0; j < d; ++j) {
      (*dg)[j] += dy.col(j).dot(xhat.col(j));
    }
  }
  if (db) *db += dy.colwise().sum().transpose();
}

struct LayerCache {
  Mat xin;           // layer input
  Mat xhat1, n1;     // pre-attn layernorm
  Vec rstd1;
  Mat q, k, v;       // projections
  std::vector<Mat> attn;  // per-head attention probabilities
  Mat z;             // concatenated head outputs
  Mat x2;            // after attention residual
  Mat xhat2, n2;
  Vec rstd2;
  Mat u, gact;       // ffn pre-activation and gelu output
};

struct Cache {
  Mat x0;
  std::vector<LayerCache> layers;
  Mat xfinal, xhatf, nf;
  Vec rstdf;
  Mat logits;
};

void forward(const WView& w, const Mat& x0, Cache& c) {
  const int L = w.cfg.n_layers;
  const int H = w.cfg.n_heads;
  const int dh = w.cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto T = x0.rows();

  c.x0 = x0;
  c.layers.resize(static_cast<size_t>(L));
  Mat x = x0;
  for (int l = 0; l < L; ++l) {
    LayerCache& lc = c.layers[static_cast<size_t>(l)];
    lc.xin = x;
    ln_forward(x, w.ln1_g(l), w.ln1_b(l), lc.xhat1, lc.rstd1, lc.n1);
    lc.q.noalias() = lc.n1 * w.wq(l);
    lc.k.noalias() = lc.n1 * w.wk(l);
    lc.v.noalias() = lc.n1 * w.wv(l);
    lc.z.resize(T, w.cfg.embed_dim);
    lc.attn.assign(static_cast<size_t>(H), Mat());
    for (int h = 0; h < H; ++h) {
      auto qh = lc.q.middleCols(h * dh, dh);
      auto kh = lc.k.middleCols(h * dh, dh);
      auto vh = lc.v.middleCols(h * dh, dh);
      Mat s = qh * kh.transpose() * scale;
      Mat& a = lc.attn[static_cast<size_t>(h)];
      a = Mat::Zero(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        double mx = s.row(i).head(i + 1).maxCoeff();
        double denom = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          double e = std::exp(s(i, j) - mx);
          a(i, j) = e;
          denom += e;
        }
        a.row(i).head(i + 1) /= denom;
      }
      lc.z.middleCols(h * dh, dh).noalias() = a * vh;
    }
    Mat attn_out = lc.z * w.wo(l);
    lc.x2 = x + attn_out;
    ln_forward(lc.x2, w.ln2_g(l), w.ln2_b(l), lc.xhat2, lc.rstd2, lc.n2);
    lc.u.noalias() = lc.n2 * w.w1(l);
    lc.u.rowwise() += w.b1(l).transpose();
    lc.gact = lc.u.unaryExpr([](double v) { return gelu(v); });
    Mat ffn_out = lc.gact * w.w2(l);
    ffn_out.rowwise() += w.b2(l).transpose();
    x = lc.x2 + ffn_out;
  }
  c.xfinal = x;
  ln_forward(x, w.lnf_g(), w.lnf_b(), c.xhatf, c.rstdf, c.nf);
  c.logits.noalias() = c.nf * w.w_out();
  c.logits.rowwise() += w.b_out().transpose();
}

// Gradient of the loss with respect to every input row; parameter gradients
// are accumulated into `grad` when non-null.
void backward(const WView& w, const Cache& c, const Mat& dlogits, GView* grad, Mat& dx0) {
  const int L = w.cfg.n_layers;
  const int H = w.cfg.n_heads;
  const int dh = w.cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto T = c.x0.rows();
  const int d = w.cfg.embed_dim;

  if (grad) {
    grad->b_out() += dlogits.colwise().sum().transpose();
    grad->w_out().noalias() += c.nf.transpose() * dlogits;
  }
  Mat dnf = dlogits * w.w_out().transpose();
  Mat dx = Mat::Zero(T, d);
  if (grad) {
    auto dg = grad->lnf_g();
    auto db = grad->lnf_b();
    ln_backward(dnf, c.xhatf, c.rstdf, w.lnf_g(), dx, &dg, &db);
  } else {
    ln_backward(dnf, c.xhatf, c.rstdf, w.lnf_g(), dx, nullptr, nullptr);
  }

  for (int l = L - 1; l >= 0; --l) {
    const LayerCache& lc = c.layers[static_cast<size_t>(l)];
    // x_out = x2 + gelu(n2 w1 + b1) w2 + b2
    const Mat& dxout = dx;
    Mat dgact = dxout * w.w2(l).transpose();
    if (grad) {
      grad->w2(l).noalias() += lc.gact.transpose() * dxout;
      grad->b2(l) += dxout.colwise().sum().transpose();
    }
    Mat du = dgact.cwiseProduct(lc.u.unaryExpr([](double v) { return gelu_grad(v); }));
    if (grad) {
      grad->w1(l).noalias() += lc.n2.transpose() * du;
      grad->b1(l) += du.colwise().sum().transpose();
    }
    Mat dn2 = du * w.w1(l).transpose();
    Mat dx2 = dxout;  // residual branch
    if (grad) {
      auto dg = grad->ln2_g(l);
      auto db = grad->ln2_b(l);
      ln_backward(dn2, lc.xhat2, lc.rstd2, w.ln2_g(l), dx2, &dg, &db);
    } else {
      ln_backward(dn2, lc.xhat2, lc.rstd2, w.ln2_g(l), dx2, nullptr, nullptr);
    }

    // x2 = xin + (attn z) wo
    Mat dz = dx2 * w.wo(l).transpose();
    if (grad) grad->wo(l).noalias() += lc.z.transpose() * dx2;
    Mat dq = Mat::Zero(T, d), dk = Mat::Zero(T, d), dv = Mat::Zero(T, d);
    for (int h = 0; h < H; ++h) {
      const Mat& a = lc.attn[static_cast<size_t>(h)];
      auto qh = lc.q.middleCols(h * dh, dh);
      auto kh = lc.k.middleCols(h * dh, dh);
      auto vh = lc.v.middleCols(h * dh, dh);
      auto dzh = dz.middleCols(h * dh, dh);
      Mat da = dzh * vh.transpose();
      dv.middleCols(h * dh, dh).noalias() = a.transpose() * dzh;
      Mat ds(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        double dot = da.row(i).head(i + 1).dot(a.row(i).head(i + 1));
        ds.row(i).head(i + 1) =
            (a.row(i).head(i + 1).array() * (da.row(i).head(i + 1).array() - dot)).matrix();
        ds.row(i).tail(T - i - 1).setZero();
      }
      ds *= scale;
      dq.middleCols(h * dh, dh).noalias() = ds * kh;
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qh;
    }
    Mat dn1 = dq * w.wq(l).transpose();
    dn1.noalias() += dk * w.wk(l).transpose();
    dn1.noalias() += dv * w.wv(l).transpose();
    if (grad) {
      grad->wq(l).noalias() += lc.n1.transpose() * dq;
      grad->wk(l).noalias() += lc.n1.transpose() * dk;
      grad->wv(l).noalias() += lc.n1.transpose() * dv;
    }
    Mat dxin = dx2;  // residual branch
    if (grad) {
      auto dg = grad->ln1_g(l);
      auto db = grad->ln1_b(l);
      ln_backward(dn1, lc.xhat1, lc.rstd1, w.ln1_g(l), dxin, &dg, &db);
    } else {
      ln_backward(dn1, lc.xhat1, lc.rstd1, w.ln1_g(l), dxin, nullptr, nullptr);
    }
    dx = dxin;
  }
  dx0 = dx;
}

struct SeqSpec {
  std::vector<int> inputs;   // [bos] + query + response (eos is target-only)
  std::vector<int> targets;  // inputs shifted left, ending in eos
  int first_supervised = 0;  // first input position whose target is supervised
  int resp_begin = 0;        // input position of the first response token
  int resp_len = 0;
};

SeqSpec build_seq(const LMConfig& cfg, std::span<const int> q, std::span<const int> r) {
  if (r.empty()) throw ArgumentError("response must be nonempty");
  SeqSpec s;
  s.inputs.reserve(1 + q.size() + r.size());
  s.inputs.push_back(kBosId);
  s.inputs.insert(s.inputs.end(), q.begin(), q.end());
  s.inputs.insert(s.inputs.end(), r.begin(), r.end());
  if (static_cast<int>(s.inputs.size()) > cfg.context_len) {
    throw ArgumentError("sequence of length " + std::to_string(s.inputs.size()) +
                        " exceeds context_len " + std::to_string(cfg.context_len) +
                        " (would truncate)");
  }
  s.targets.assign(s.inputs.begin() + 1, s.inputs.end());
  s.targets.push_back(kEosId);
  s.resp_begin = static_cast<int>(1 + q.size());
  s.resp_len = static_cast<int>(r.size());
  s.first_supervised = s.resp_begin - 1;
  return s;
}

Mat build_input(const WView& w, const SeqSpec& s, const Mat* resp_emb) {
  const auto T = static_cast<Eigen::Index>(s.inputs.size());
  Mat x(T, w.cfg.embed_dim);
  auto tok = w.tok();
  auto pos = w.pos();
  for (Eigen::Index t = 0; t < T; ++t) {
    bool in_resp = t >= s.resp_begin && t < s.resp_begin + s.resp_len;
    if (resp_emb && in_resp) {
      x.row(t) = resp_emb->row(t - s.resp_begin);
    } else {
      x.row(t) = tok.row(s.inputs[static_cast<size_t>(t)]);
    }
    x.row(t) += pos.row(t);
  }
  return x;
}

double loss_and_dlogits(const Cache& c, const SeqSpec& s, Mat* dlogits) {
  const auto T = c.logits.rows();
  const auto V = c.logits.cols();
  const int n_sup = static_cast<int>(T) - s.first_supervised;
  if (dlogits) *dlogits = Mat::Zero(T, V);
  double loss = 0.0;
  const double inv = 1.0 / n_sup;
  for (Eigen::Index i = s.first_supervised; i < T; ++i) {
    int target = s.targets[static_cast<size_t>(i)];
    double mx = c.logits.row(i).maxCoeff();
    double denom = (c.logits.row(i).array() - mx).exp().sum();
    double lse = mx + std::log(denom);
    loss += lse - c.logits(i, target);
    if (dlogits) {
      dlogits->row(i) = ((c.logits.row(i).array() - lse).exp() * inv).matrix();
      (*dlogits)(i, target) -= inv;
    }
  }
  return loss * inv;
}

}  // namespace

void LMConfig::validate() const {
  if (vocab_size <= 0) throw ArgumentError("vocab_size must be positive");
  if (embed_dim <= 0 || context_len <= 0 || n_layers <= 0 || n_heads <= 0) {
    throw ArgumentError("LMConfig fields must be positive");
  }
  if (embed_dim % n_heads != 0) throw ArgumentError("embed_dim must be divisible by n_heads");
}

ParamLayout ParamLayout::make(const LMConfig& cfg) {
  cfg.validate();
  ParamLayout lay;
  int off = 0;
  auto take = [&off](int n) {
    int at = off;
    off += n;
    return at;
  };
  const int d = cfg.embed_dim;
  const int f = cfg.ffn_dim();
  lay.tok_emb = take(cfg.vocab_size * d);
  lay.pos_emb = take(cfg.context_len * d);
  lay.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& b : lay.layers) {
    b.ln1_g = take(d);
    b.ln1_b = take(d);
    b.wq = take(d * d);
    b.wk = take(d * d);
    b.wv = take(d * d);
    b.wo = take(d * d);
    b.ln2_g = take(d);
    b.ln2_b = take(d);
    b.w1 = take(d * f);
    b.b1 = take(f);
    b.w2 = take(f * d);
    b.b2 = take(d);
  }
  lay.lnf_g = take(d);
  lay.lnf_b = take(d);
  lay.w_out = take(d * cfg.vocab_size);
  lay.b_out = take(cfg.vocab_size);
  lay.total = off;
  return lay;
}

namespace {
// Layout cache: layouts depend only on the config's shape fields.
const ParamLayout& cached_layout(const LMConfig& cfg) {
  thread_local LMConfig last;
  thread_local ParamLayout lay;
  thread_local bool have = false;
  if (!have || last.vocab_size != cfg.vocab_size || last.embed_dim != cfg.embed_dim ||
      last.context_len != cfg.context_len || last.n_layers != cfg.n_layers ||
      last.n_heads != cfg.n_heads) {
    lay = ParamLayout::make(cfg);
    last = cfg;
    have = true;
  }
  return lay;
}
}  // namespace

const ParamLayout& TinyLMParams::layout() const { return cached_layout(config); }

Eigen::Map<Mat> TinyLMParams::tok_emb() {
  return {flat.data() + layout().tok_emb, config.vocab_size, config.embed_dim};
}

Eigen::Map<const Mat> TinyLMParams::tok_emb() const {
  return {flat.data() + layout().tok_emb, config.vocab_size, config.embed_dim};
}

size_t param_count(const LMConfig& cfg) {
  return static_cast<size_t>(ParamLayout::make(cfg).total);
}

TinyLMParams init_params(const LMConfig& cfg) {
  cfg.validate();
  TinyLMParams p;
  p.config = cfg;
  const ParamLayout lay = ParamLayout::make(cfg);
  p.flat.assign(static_cast<size_t>(lay.total), 0.0);
  Rng rng(mix_seed(cfg.seed, 0x7061726d73ULL));
  GView g{cfg, lay, p.flat.data()};

  auto fill_normal = [&](MapM m, double std) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = std * rng.next_normal();
    }
  };
  const double d = cfg.embed_dim;
  // Residual-branch output projections are shrunk by sqrt(2*n_layers).
  const double resid = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  fill_normal(g.tok(), 0.1);
  fill_normal(g.pos(), 0.1);
  for (int l = 0; l < cfg.n_layers; ++l) {
    g.ln1_g(l).setOnes();
    g.ln2_g(l).setOnes();
    fill_normal(g.wq(l), 1.0 / std::sqrt(d));
    fill_normal(g.wk(l), 1.0 / std::sqrt(d));
    fill_normal(g.wv(l), 1.0 / std::sqrt(d));
    fill_normal(g.wo(l), resid / std::sqrt(d));
    fill_normal(g.w1(l), 1.0 / std::sqrt(d));
    fill_normal(g.w2(l), resid / std::sqrt(static_cast<double>(cfg.ffn_dim())));
  }
  g.lnf_g().setOnes();
  fill_normal(g.w_out(), 1.0 / std::sqrt(d));
  return p;
}

EncodedPair encode_record(const corpus::Trace& trace, const Vocab& vocab) {
  EncodedPair e;
  e.query_ids = tokenize(trace.query, vocab);
  if (trace.tokens) {
    e.response_ids = *trace.tokens;
  } else {
    e.response_ids = tokenize(corpus::trace_text(trace), vocab);
  }
  return e;
}

Mat response_embeddings(const TinyLMParams& params, std::span<const int> response_ids) {
  auto tok = params.tok_emb();
  Mat e(static_cast<Eigen::Index>(response_ids.size()), params.config.embed_dim);
  for (size_t i = 0; i < response_ids.size(); ++i) e.row(static_cast<Eigen::Index>(i)) = tok.row(response_ids[i]);
  return e;
}

GradBundle loss_and_grads(const TinyLMParams& params, std::span<const int> query_ids,
                          std::span<const int> response_ids) {
  const LMConfig& cfg = params.config;
  const ParamLayout& lay = params.layout();
  WView w{cfg, lay, params.data()};
  SeqSpec s = build_seq(cfg, query_ids, response_ids);
  Cache c;
  forward(w, build_input(w, s, nullptr), c);
  Mat dlogits;
  GradBundle out;
  out.loss = loss_and_dlogits(c, s, &dlogits);
  out.grad_params.assign(params.size(), 0.0);
  GView g{cfg, lay, out.grad_params.data()};
  Mat dx0;
  backward(w, c, dlogits, &g, dx0);
  // Input rows fold back into the embedding tables.
  auto gtok = g.tok();
  auto gpos = g.pos();
  for (Eigen::Index t = 0; t < dx0.rows(); ++t) {
    gtok.row(s.inputs[static_cast<size_t>(t)]) += dx0.row(t);
    gpos.row(t) += dx0.row(t);
  }
  out.grad_embeddings = dx0.middleRows(s.resp_begin, s.resp_len);
  return out;
}

double loss_value(const TinyLMParams& params, std::span<const int> query_ids,
                  std::span<const int> response_ids) {
  const LMConfig& cfg = params.config;
  WView w{cfg, params.layout(), params.data()};
  SeqSpec s = build_seq(cfg, query_ids, response_ids);
  Cache c;
  forward(w, build_input(w, s, nullptr), c);
  return loss_and_dlogits(c, s, nullptr);
}

EGrad loss_and_egrad(const TinyLMParams& params, std::span<const int> query_ids,
                     std::span<const int> response_ids, const Mat& response_emb) {
  const LMConfig& cfg = params.config;
  if (response_emb.cols() != cfg.embed_dim) throw ArgumentError("embedding width mismatch");
  if (response_emb.rows() != static_cast<Eigen::Index>(response_ids.size())) {
    throw ArgumentError("embedding row count does not match response length");
  }
  WView w{cfg, params.layout(), params.data()};
  SeqSpec s = build_seq(cfg, query_ids, response_ids);
  Cache c;
  forward(w, build_input(w, s, &response_emb), c);
  Mat dlogits;
  EGrad out;
  out.loss = loss_and_dlogits(c, s, &dlogits);
  Mat dx0;
  backward(w, c, dlogits, nullptr, dx0);
  out.grad = dx0.middleRows(s.resp_begin, s.resp_len);
  return out;
}

double loss_value_embedded(const TinyLMParams& params, std::span<const int> query_ids,
                           std::span<const int> response_ids, const Mat& response_emb) {
  const LMConfig& cfg = params.config;
  WView w{cfg, params.layout(), params.data()};
  SeqSpec s = build_seq(cfg, query_ids, response_ids);
  Cache c;
  forward(w, build_input(w, s, &response_emb), c);
  return loss_and_dlogits(c, s, nullptr);
}

Mat mixed_hvp_fd(const EgradOfTheta& egrad, const std::vector<double>& theta0,
                 std::span<const double> v, double h) {
  if (h <= 0.0) throw ArgumentError("hvp step h must be positive");
  if (v.size() != theta0.size()) throw ArgumentError("direction vector has wrong size");
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) {
    Mat probe = egrad(theta0);
    return Mat::Zero(probe.rows(), probe.cols());
  }
  std::vector<double> shifted(theta0.size());
  const double step = h / norm;
  for (size_t i = 0; i < v.size(); ++i) shifted[i] = theta0[i] + step * v[i];
  Mat gplus = egrad(shifted);
  for (size_t i = 0; i < v.size(); ++i) shifted[i] = theta0[i] - step * v[i];
  Mat gminus = egrad(shifted);
  return (gplus - gminus) * (norm / (2.0 * h));
}

Mat hvp_mixed(const TinyLMParams& params, std::span<const int> query_ids,
              std::span<const int> response_ids, const Mat& response_emb,
              std::span<const double> v, double h) {
  auto egrad = [&](const std::vector<double>& theta) {
    TinyLMParams p;
    p.config = params.config;
    p.flat = theta;
    return loss_and_egrad(p, query_ids, response_ids, response_emb).grad;
  };
  return mixed_hvp_fd(egrad, params.flat, v, h);
}

}  // namespace tg::lm
