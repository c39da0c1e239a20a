#pragma once

// Shared internals of the lm module: parameter views and activation math.
// Not part of the public interface.

#include <cmath>

#include "tg/lm.hpp"

namespace tg::lm::detail {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
  double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  double u = kGeluC * (x + kGeluA * x * x * x);
  double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

using MapM = Eigen::Map<Mat>;
using CMapM = Eigen::Map<const Mat>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using CMapV = Eigen::Map<const Eigen::VectorXd>;

// Read-only views over one parameter vector.
struct WView {
  const LMConfig& cfg;
  const ParamLayout& lay;
  const double* p;

  CMapM tok() const { return {p + lay.tok_emb, cfg.vocab_size, cfg.embed_dim}; }
  CMapM pos() const { return {p + lay.pos_emb, cfg.context_len, cfg.embed_dim}; }
  CMapV ln1_g(int l) const { return {p + lay.layers[l].ln1_g, cfg.embed_dim}; }
  CMapV ln1_b(int l) const { return {p + lay.layers[l].ln1_b, cfg.embed_dim}; }
  CMapM wq(int l) const { return {p + lay.layers[l].wq, cfg.embed_dim, cfg.embed_dim}; }
  CMapM wk(int l) const { return {p + lay.layers[l].wk, cfg.embed_dim, cfg.embed_dim}; }
  CMapM wv(int l) const { return {p + lay.layers[l].wv, cfg.embed_dim, cfg.embed_dim}; }
  CMapM wo(int l) const { return {p + lay.layers[l].wo, cfg.embed_dim, cfg.embed_dim}; }
  CMapV ln2_g(int l) const { return {p + lay.layers[l].ln2_g, cfg.embed_dim}; }
  CMapV ln2_b(int l) const { return {p + lay.layers[l].ln2_b, cfg.embed_dim}; }
  CMapM w1(int l) const { return {p + lay.layers[l].w1, cfg.embed_dim, cfg.ffn_dim()}; }
  CMapV b1(int l) const { return {p + lay.layers[l].b1, cfg.ffn_dim()}; }
  CMapM w2(int l) const { return {p + lay.layers[l].w2, cfg.ffn_dim(), cfg.embed_dim}; }
  CMapV b2(int l) const { return {p + lay.layers[l].b2, cfg.embed_dim}; }
  CMapV lnf_g() const { return {p + lay.lnf_g, cfg.embed_dim}; }
  CMapV lnf_b() const { return {p + lay.lnf_b, cfg.embed_dim}; }
  CMapM w_out() const { return {p + lay.w_out, cfg.embed_dim, cfg.vocab_size}; }
  CMapV b_out() const { return {p + lay.b_out, cfg.vocab_size}; }
};

// Mutable views for a gradient vector with the same layout.
struct GView {
  const LMConfig& cfg;
  const ParamLayout& lay;
  double* p;

  MapM tok() const { return {p + lay.tok_emb, cfg.vocab_size, cfg.embed_dim}; }
  MapM pos() const { return {p + lay.pos_emb, cfg.context_len, cfg.embed_dim}; }
  MapV ln1_g(int l) const { return {p + lay.layers[l].ln1_g, cfg.embed_dim}; }
  MapV ln1_b(int l) const { return {p + lay.layers[l].ln1_b, cfg.embed_dim}; }
  MapM wq(int l) const { return {p + lay.layers[l].wq, cfg.embed_dim, cfg.embed_dim}; }
  MapM wk(int l) const { return {p + lay.layers[l].wk, cfg.embed_dim, cfg.embed_dim}; }
  MapM wv(int l) const { return {p + lay.layers[l].wv, cfg.embed_dim, cfg.embed_dim}; }
  MapM wo(int l) const { return {p + lay.layers[l].wo, cfg.embed_dim, cfg.embed_dim}; }
  MapV ln2_g(int l) const { return {p + lay.layers[l].ln2_g, cfg.embed_dim}; }
  MapV ln2_b(int l) const { return {p + lay.layers[l].ln2_b, cfg.embed_dim}; }
  MapM w1(int l) const { return {p + lay.layers[l].w1, cfg.embed_dim, cfg.ffn_dim()}; }
  MapV b1(int l) const { return {p + lay.layers[l].b1, cfg.ffn_dim()}; }
  MapM w2(int l) const { return {p + lay.layers[l].w2, cfg.ffn_dim(), cfg.embed_dim}; }
  MapV b2(int l) const { return {p + lay.layers[l].b2, cfg.embed_dim}; }
  MapV lnf_g() const { return {p + lay.lnf_g, cfg.embed_dim}; }
  MapV lnf_b() const { return {p + lay.lnf_b, cfg.embed_dim}; }
  MapM w_out() const { return {p + lay.w_out, cfg.embed_dim, cfg.vocab_size}; }
  MapV b_out() const { return {p + lay.b_out, cfg.vocab_size}; }
};

// Normalizes one row vector in place semantics: returns g*xhat+b.
inline Eigen::RowVectorXd ln_row(const Eigen::RowVectorXd& x, CMapV g, CMapV b) {
  double mu = x.mean();
  double var = (x.array() - mu).square().mean();
  double rs = 1.0 / std::sqrt(var + kLnEps);
  return (((x.array() - mu) * rs) * g.transpose().array()).matrix() + b.transpose();
}

}  // namespace tg::lm::detail
