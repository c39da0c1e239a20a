#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "tg/corpus.hpp"
#include "tg/errors.hpp"
#include "tg/lm.hpp"
#include "tg/rng.hpp"
#include "test_util.hpp"

using namespace tg;
using namespace tg::lm;

TEST_CASE("tokenize roundtrip and punctuation splitting") {
  const Vocab& v = default_vocab();
  auto ids = tokenize("2 + 3 = 5", v);
  CHECK(detokenize(ids, v) == "2 + 3 = 5");
  CHECK(tokenize("", v).empty());
  CHECK_THROWS_AS(tokenize("zebra", v), TokenizationError);

  auto marker = tokenize("Final Answer: 5", v);
  REQUIRE(marker.size() == 4);
  CHECK(v.word(marker[2]) == ":");
  CHECK(detokenize(marker, v) == "Final Answer: 5");

  auto query = tokenize("Start with 2. Add 3. Answer modulo 10.", v);
  CHECK(detokenize(query, v) == "Start with 2. Add 3. Answer modulo 10.");
  // token -> text -> token is the identity
  CHECK(tokenize(detokenize(query, v), v) == query);
}

TEST_CASE("uniform-logit model loses ln V per token") {
  Vocab v = test::tiny_vocab();
  LMConfig cfg;
  cfg.vocab_size = v.size();
  cfg.embed_dim = 8;
  cfg.context_len = 32;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  TinyLMParams p = init_params(cfg);
  std::fill(p.flat.begin(), p.flat.end(), 0.0);
  Rng rng(4);
  auto q = test::random_ids(rng, v, 3);
  auto r = test::random_ids(rng, v, 5);
  double loss = loss_value(p, q, r);
  CHECK(loss == doctest::Approx(std::log(static_cast<double>(v.size()))).epsilon(1e-12));
}

TEST_CASE("loss positivity and length guard") {
  Vocab v = test::tiny_vocab();
  LMConfig cfg;
  cfg.vocab_size = v.size();
  cfg.embed_dim = 8;
  cfg.context_len = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  TinyLMParams p = init_params(cfg);
  Rng rng(5);
  auto q = test::random_ids(rng, v, 4);
  auto r = test::random_ids(rng, v, 6);
  CHECK(loss_value(p, q, r) > 0.0);
  auto too_long = test::random_ids(rng, v, 20);
  CHECK_THROWS_AS(loss_value(p, q, too_long), ArgumentError);
  std::vector<int> empty;
  CHECK_THROWS_AS(loss_value(p, q, empty), ArgumentError);
}

// The finite-difference oracle: central differences with step 1e-4 in 64-bit
// arithmetic, run on random configurations. Embedding gradients are checked
// exhaustively, parameter gradients on a stratified coordinate sample.
TEST_CASE("analytic gradients match central finite differences") {
  const double step = 1e-4;
  const double tol = 1e-4;
  double worst_e = 0.0, worst_p = 0.0;
  for (int trial = 0; trial < 6; ++trial) {
    Rng rng(100 + static_cast<uint64_t>(trial));
    Vocab v = test::tiny_vocab(4);
    LMConfig cfg;
    cfg.vocab_size = v.size();
    cfg.embed_dim = trial % 2 == 0 ? 8 : 12;
    cfg.context_len = 24;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.seed = 1000 + static_cast<uint64_t>(trial);
    TinyLMParams p = init_params(cfg);
    auto q = test::random_ids(rng, v, 2 + rng.bounded_int(3));
    auto r = test::random_ids(rng, v, 3 + rng.bounded_int(4));

    GradBundle gb = loss_and_grads(p, q, r);

    // d loss / d embeddings, every coordinate
    Mat e0 = response_embeddings(p, r);
    for (Eigen::Index i = 0; i < e0.rows(); ++i) {
      for (Eigen::Index j = 0; j < e0.cols(); ++j) {
        Mat ep = e0, em = e0;
        ep(i, j) += step;
        em(i, j) -= step;
        double fd = (loss_value_embedded(p, q, r, ep) - loss_value_embedded(p, q, r, em)) /
                    (2.0 * step);
        worst_e = std::max(worst_e, test::rel_err(gb.grad_embeddings(i, j), fd));
      }
    }

    // d loss / d params on 400 sampled coordinates
    for (int s = 0; s < 400; ++s) {
      size_t idx = rng.bounded(p.size());
      TinyLMParams pp = p, pm = p;
      pp.flat[idx] += step;
      pm.flat[idx] -= step;
      double fd = (loss_value(pp, q, r) - loss_value(pm, q, r)) / (2.0 * step);
      worst_p = std::max(worst_p, test::rel_err(gb.grad_params[idx], fd));
    }
  }
  CHECK(worst_e < tol);
  CHECK(worst_p < tol);
}

TEST_CASE("hvp_mixed: zero direction gives a zero matrix") {
  Vocab v = test::tiny_vocab();
  LMConfig cfg;
  cfg.vocab_size = v.size();
  cfg.embed_dim = 8;
  cfg.context_len = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  TinyLMParams p = init_params(cfg);
  Rng rng(6);
  auto q = test::random_ids(rng, v, 3);
  auto r = test::random_ids(rng, v, 4);
  Mat e = response_embeddings(p, r);
  std::vector<double> zero(p.size(), 0.0);
  Mat out = hvp_mixed(p, q, r, e, zero, 1e-3);
  CHECK(out.rows() == e.rows());
  CHECK(out.norm() == 0.0);
}

// Symbolic oracle on a one-parameter model: L(theta, e) = (theta*e)^2 has
// mixed second derivative 4*theta*e, and central differences are exact on it
// up to roundoff.
TEST_CASE("mixed_hvp_fd matches the quadratic toy symbolically") {
  double e = 0.7;
  auto egrad = [e](const std::vector<double>& th) {
    Mat g(1, 1);
    g(0, 0) = 2.0 * th[0] * th[0] * e;  // dL/de
    return g;
  };
  std::vector<double> theta0 = {1.3};
  std::vector<double> v = {2.5};  // scaling must cancel through normalization
  Mat out = mixed_hvp_fd(egrad, theta0, v, 1e-3);
  double expected = 4.0 * theta0[0] * e * v[0];
  CHECK(out(0, 0) == doctest::Approx(expected).epsilon(1e-9));
}

// Convergence order needs a nonzero third derivative in theta, so the toy is
// quartic here: L = (theta*e)^4, dL/de = 4 theta^4 e^3, mixed = 16 theta^3 e^3.
TEST_CASE("mixed_hvp_fd halving h shrinks the error by about 4") {
  double e = 0.9;
  auto egrad = [e](const std::vector<double>& th) {
    Mat g(1, 1);
    double t = th[0];
    g(0, 0) = 4.0 * t * t * t * t * e * e * e;
    return g;
  };
  std::vector<double> theta0 = {1.1};
  std::vector<double> v = {1.0};
  double exact = 16.0 * theta0[0] * theta0[0] * theta0[0] * e * e * e;
  double err_h = std::abs(mixed_hvp_fd(egrad, theta0, v, 0.1)(0, 0) - exact);
  double err_h2 = std::abs(mixed_hvp_fd(egrad, theta0, v, 0.05)(0, 0) - exact);
  CHECK(err_h / err_h2 == doctest::Approx(4.0).epsilon(0.15));
}

TEST_CASE("train_sft: zero epochs returns init, same seed is bit-identical") {
  const Vocab& v = default_vocab();
  auto tasks = corpus::gen_tasks(21, 12, 2, 10);
  corpus::TraceDataset ds = corpus::make_clean_dataset(tasks, corpus::Split::train, 21);
  LMConfig cfg;
  cfg.vocab_size = v.size();
  cfg.embed_dim = 16;
  cfg.context_len = 64;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.seed = 3;
  TinyLMParams init = init_params(cfg);
  TrainConfig tc;
  tc.epochs = 0;
  TinyLMParams same = train_sft(init, ds, tc, v);
  CHECK(same.flat == init.flat);

  tc.epochs = 1;
  tc.seed = 17;
  TinyLMParams a = train_sft(init, ds, tc, v);
  TinyLMParams b = train_sft(init, ds, tc, v);
  CHECK(a.flat == b.flat);
  CHECK(a.flat != init.flat);

  corpus::TraceDataset empty;
  CHECK_THROWS_AS(train_sft(init, empty, tc, v), ArgumentError);
}

TEST_CASE("generate: max_tokens 0, greedy dominance, sampling determinism") {
  Vocab v = test::tiny_vocab();
  LMConfig cfg;
  cfg.vocab_size = v.size();
  cfg.embed_dim = 8;
  cfg.context_len = 32;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  TinyLMParams p = init_params(cfg);
  std::fill(p.flat.begin(), p.flat.end(), 0.0);
  // bias the output toward one token
  const ParamLayout& lay = p.layout();
  int favored = v.id("7");
  p.flat[static_cast<size_t>(lay.b_out + favored)] = 5.0;

  std::vector<int> prompt = {kBosId, v.id("1")};
  CHECK(generate(p, prompt, 0, SampleMode{}).empty());

  auto out = generate(p, prompt, 4, SampleMode{});
  REQUIRE(out.size() == 4);
  for (int id : out) CHECK(id == favored);

  SampleMode sm;
  sm.greedy = false;
  sm.temperature = 1.2;
  sm.seed = 99;
  auto s1 = generate(p, prompt, 8, sm);
  auto s2 = generate(p, prompt, 8, sm);
  CHECK(s1 == s2);
}

TEST_CASE("logit hook can redirect generation") {
  Vocab v = test::tiny_vocab();
  LMConfig cfg;
  cfg.vocab_size = v.size();
  cfg.embed_dim = 8;
  cfg.context_len = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  TinyLMParams p = init_params(cfg);
  std::fill(p.flat.begin(), p.flat.end(), 0.0);
  int redirected = v.id("3");
  LogitHook hook = [redirected](Vec& logits, int) { logits[redirected] += 10.0; };
  std::vector<int> prompt = {kBosId};
  auto out = generate(p, prompt, 3, SampleMode{}, &hook);
  REQUIRE(out.size() == 3);
  for (int id : out) CHECK(id == redirected);
}

TEST_CASE("force_answer extracts the first integer after the marker") {
  const Vocab& v = default_vocab();
  LMConfig cfg;
  cfg.vocab_size = v.size();
  cfg.embed_dim = 16;
  cfg.context_len = 128;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  TinyLMParams p = init_params(cfg);
  std::fill(p.flat.begin(), p.flat.end(), 0.0);
  const ParamLayout& lay = p.layout();

  SUBCASE("model that always emits 7") {
    p.flat[static_cast<size_t>(lay.b_out + v.id("7"))] = 8.0;
    auto res = force_answer(p, v, "Start with 2. Add 3. Answer modulo 10.", 8);
    CHECK(res.answer_text == "7");
  }
  SUBCASE("model that never emits a digit") {
    p.flat[static_cast<size_t>(lay.b_out + v.id("thus"))] = 8.0;
    auto res = force_answer(p, v, "Start with 2. Add 3. Answer modulo 10.", 8);
    CHECK(res.answer_text.empty());
  }
}

TEST_CASE("checkpoint roundtrip is bit exact") {
  LMConfig cfg;
  cfg.vocab_size = 31;
  cfg.embed_dim = 8;
  cfg.context_len = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.seed = 77;
  TinyLMParams p = init_params(cfg);
  std::string path = "lm_test_ckpt.bin";
  save_checkpoint(p, path);
  TinyLMParams q = load_checkpoint(path);
  CHECK(q.config.vocab_size == cfg.vocab_size);
  CHECK(q.config.seed == cfg.seed);
  CHECK(q.flat == p.flat);
  std::remove(path.c_str());
}

TEST_CASE("init is reproducible and parameter count matches the layout") {
  LMConfig cfg;
  cfg.vocab_size = 41;
  cfg.embed_dim = 12;
  cfg.context_len = 20;
  cfg.n_layers = 2;
  cfg.n_heads = 3;
  cfg.seed = 5;
  TinyLMParams a = init_params(cfg);
  TinyLMParams b = init_params(cfg);
  CHECK(a.flat == b.flat);
  CHECK(a.size() == param_count(cfg));
  LMConfig bad = cfg;
  bad.n_heads = 5;
  CHECK_THROWS_AS(init_params(bad), ArgumentError);
}
