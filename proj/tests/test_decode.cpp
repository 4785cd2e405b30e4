#include "doctest.h"

#include "refine/decode.hpp"
#include "refine/tasks.hpp"

#include <algorithm>
#include <random>
#include <set>

using namespace refine;

namespace {

ModelConfig small_config(Architecture arch) {
  ModelConfig c;
  c.arch = arch;
  c.d_model = 16;
  c.d_hidden = 24;
  c.n_layers = 1;
  c.n_heads = 2;
  c.vocab_src = 12;
  c.vocab_tgt = 12;
  c.max_len = 16;
  c.max_len_offset = 6;
  c.dropout = 0.0;
  return c;
}

TokenSequence random_source(std::mt19937_64& rng, int min_len = 2, int max_len = 8) {
  std::uniform_int_distribution<int> len(min_len, max_len);
  std::uniform_int_distribution<Token> tok(kFirstContent, 11);
  TokenSequence s(static_cast<std::size_t>(len(rng)));
  for (auto& t : s) t = tok(rng);
  return s;
}

void set_length_peak(Model& m, Index klass) {
  Tensor w = m.parameters().at("length_head.weight");
  Tensor b = m.parameters().at("length_head.bias");
  w.mutable_value().setZero();
  b.mutable_value().setZero();
  b.mutable_value()(0, klass) = 5.0;
}

}  // namespace

TEST_CASE("argmax breaks ties toward the lowest index") {
  Matrix l(3, 4);
  l << 1, 3, 3, 0,  //
      2, 2, 2, 2,   //
      0, 0, 0, 1;
  CHECK(argmax_rows(l) == TokenSequence{1, 0, 3});
}

TEST_CASE("length prediction") {
  Model m(small_config(Architecture::Refinement), 1);
  const Index off = m.config().max_len_offset;
  set_length_peak(m, off);
  const TokenSequence src{4, 5, 6, 7, 8};
  CHECK(predict_length(m, src) == 5);
  set_length_peak(m, off - 5);
  CHECK(predict_length(m, TokenSequence{4}) == 1);
  set_length_peak(m, off + 3);
  CHECK(predict_length(m, src) == 8);

  DecodeConfig cfg;
  cfg.mode = DecodeMode::NarFixed;
  cfg.use_reference_length = true;
  const RefinementTrace t = nar_decode(m, src, cfg, 3);
  CHECK(t.predicted_length == 3);
  CHECK(t.iterations[0].size() == 3);
  CHECK_THROWS_AS(nar_decode(m, src, cfg), std::invalid_argument);
}

TEST_CASE("fixed and adaptive refinement contracts") {
  Model m(small_config(Architecture::Refinement), 2);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const TokenSequence src = random_source(rng);
    for (int i_dec : {1, 2, 5}) {
      DecodeConfig cfg;
      cfg.mode = DecodeMode::NarFixed;
      cfg.i_dec = i_dec;
      cfg.collapse_repetitions = false;
      const RefinementTrace t = nar_decode(m, src, cfg);
      CHECK(t.iterations_used == i_dec);
      CHECK(t.iterations.size() == static_cast<std::size_t>(i_dec));
      CHECK(t.logprobs.size() == t.iterations.size());
      for (const auto& y : t.iterations) CHECK(static_cast<Index>(y.size()) == t.predicted_length);
      CHECK(t.output == t.iterations.back());
      const RefinementTrace again = nar_decode(m, src, cfg);
      CHECK(again.iterations == t.iterations);
      CHECK(again.logprobs == t.logprobs);
    }
    DecodeConfig ad;
    ad.mode = DecodeMode::NarAdaptive;
    ad.max_iters = 6;
    ad.collapse_repetitions = false;
    const RefinementTrace t = nar_decode(m, src, ad);
    CHECK(t.iterations_used <= 6);
    CHECK(t.iterations_used == static_cast<int>(t.iterations.size()));
    for (std::size_t l = 1; l + 1 < t.iterations.size(); ++l) CHECK(t.iterations[l] != t.iterations[l - 1]);
    if (t.iterations_used < 6) {
      REQUIRE(t.iterations.size() >= 2);
      CHECK(t.iterations.back() == t.iterations[t.iterations.size() - 2]);
    }
    // The adaptive trace is a prefix of the fixed-budget trace.
    DecodeConfig fx = ad;
    fx.mode = DecodeMode::NarFixed;
    fx.i_dec = 6;
    const RefinementTrace full = nar_decode(m, src, fx);
    for (std::size_t l = 0; l < t.iterations.size(); ++l) CHECK(full.iterations[l] == t.iterations[l]);
  }
}

TEST_CASE("collapse applies to the final output only") {
  Model m(small_config(Architecture::Refinement), 4);
  DecodeConfig cfg;
  cfg.mode = DecodeMode::NarFixed;
  cfg.i_dec = 3;
  cfg.use_reference_length = true;
  const TokenSequence src{4, 5, 6, 7};
  const RefinementTrace plain = [&] {
    DecodeConfig c = cfg;
    c.collapse_repetitions = false;
    return nar_decode(m, src, c, 12);
  }();
  const RefinementTrace collapsed = nar_decode(m, src, cfg, 12);
  CHECK(plain.iterations == collapsed.iterations);
  CHECK(collapsed.output == collapse_repetitions(plain.output));
}

TEST_CASE("jaccard distance") {
  const TokenSequence a{4, 5, 6}, b{4, 5, 7};
  CHECK(jaccard_distance(a, a) == 0.0);
  CHECK(jaccard_distance(a, b) == doctest::Approx(0.5));
  CHECK(jaccard_distance(a, TokenSequence{8, 9}) == 1.0);
  CHECK(jaccard_distance(TokenSequence{}, TokenSequence{}) == 0.0);
  CHECK(jaccard_distance(TokenSequence{4, 4, 5}, TokenSequence{4, 5, 5}) == doctest::Approx(0.5));

  std::mt19937_64 rng(5);
  for (int i = 0; i < 2000; ++i) {
    const TokenSequence x = random_source(rng, 1, 6), y = random_source(rng, 1, 6);
    const double d = jaccard_distance(x, y);
    CHECK(d == jaccard_distance(y, x));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    TokenSequence sx = x, sy = y;
    std::sort(sx.begin(), sx.end());
    std::sort(sy.begin(), sy.end());
    CHECK((d == 0.0) == (sx == sy));
  }
}

TEST_CASE("log-probability delta criterion") {
  RefinementTrace t;
  t.logprobs = {-3.0};
  CHECK_FALSE(logprob_delta_criterion(t, 10.0));
  t.logprobs = {-3.0, -3.0};
  CHECK(logprob_delta_criterion(t, 0.0));
  t.logprobs = {-3.0, -2.5};
  CHECK_FALSE(logprob_delta_criterion(t, 0.1));

  RefinementTrace conv;
  bool fired = false;
  for (int l = 0; l < 60 && !fired; ++l) {
    conv.logprobs.push_back(-1.0 - std::pow(0.5, l));
    fired = logprob_delta_criterion(conv, 1e-6);
  }
  CHECK(fired);
}

TEST_CASE("collapse_repetitions") {
  CHECK(collapse_repetitions(TokenSequence{4, 4, 5, 5, 4}) == TokenSequence{4, 5, 4});
  CHECK(collapse_repetitions(TokenSequence{4, 5, 6}) == TokenSequence{4, 5, 6});
  CHECK(collapse_repetitions(TokenSequence{}).empty());

  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> len(0, 30);
  std::uniform_int_distribution<Token> tok(4, 7);
  for (int i = 0; i < 10000; ++i) {
    TokenSequence y(static_cast<std::size_t>(len(rng)));
    for (auto& t : y) t = tok(rng);
    const TokenSequence once = collapse_repetitions(y);
    CHECK(collapse_repetitions(once) == once);
    CHECK(once.size() <= y.size());
    const std::set<Token> before(y.begin(), y.end()), after(once.begin(), once.end());
    CHECK(before == after);
  }
}

TEST_CASE("autoregressive greedy and beam") {
  Model m(small_config(Architecture::Autoregressive), 7);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 25; ++i) {
    const TokenSequence src = random_source(rng);
    const ArDecodeResult g = ar_greedy(m, src);
    const ArDecodeResult b = ar_beam(m, src, 1);
    CHECK(g.output == b.output);
    CHECK(static_cast<Index>(g.output.size()) <= m.config().max_len);
    if (static_cast<Index>(g.output.size()) < m.config().max_len) CHECK(g.steps == static_cast<int>(g.output.size()) + 1);
    for (Token t : g.output) CHECK(t != kEos);

    DecodeConfig cfg;
    cfg.mode = DecodeMode::ArBeam;
    cfg.beam = 3;
    const RefinementTrace tr = decode(m, src, cfg);
    CHECK(tr.iterations.size() == 1);
    CHECK(tr.output == ar_beam(m, src, 3).output);
  }
  CHECK_THROWS_AS(ar_beam(m, TokenSequence{4}, 0), std::invalid_argument);
}

TEST_CASE("decode config validation") {
  DecodeConfig c;
  c.i_dec = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.max_iters = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.epsilon = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.beam = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
