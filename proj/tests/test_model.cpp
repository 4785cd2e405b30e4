#include "doctest.h"

#include "refine/checkpoint.hpp"
#include "refine/model.hpp"
#include "refine/objective.hpp"
#include "support/gradcheck.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

using namespace refine;
using refine::testing::random_matrix;

namespace {

ModelConfig tiny_config(Architecture arch = Architecture::Refinement) {
  ModelConfig c;
  c.arch = arch;
  c.d_model = 8;
  c.d_hidden = 12;
  c.n_layers = 2;
  c.n_heads = 2;
  c.vocab_src = 10;
  c.vocab_tgt = 9;
  c.max_len = 12;
  c.max_len_offset = 4;
  c.dropout = 0.0;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("refine_test_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("sinusoidal positions") {
  const Matrix pe = sinusoidal_positions(5, 6);
  for (Index i = 0; i < 6; ++i) CHECK(pe(0, i) == (i % 2 == 0 ? 0.0 : 1.0));
  CHECK(pe.cwiseAbs().maxCoeff() <= 1.0);
  CHECK(pe(3, 0) == doctest::Approx(std::sin(3.0)).epsilon(1e-15));
  CHECK(pe(2, 2) == doctest::Approx(std::sin(2.0 / std::pow(10000.0, 2.0 / 6.0))).epsilon(1e-15));
}

TEST_CASE("attention examples") {
  std::mt19937_64 rng(1);
  ParameterSet ps;
  const auto mha = MultiHeadAttention::create(ps, "a", 4, rng);

  // One position: softmax over a single key is 1, so the result is the
  // projected value row.
  Tensor x(random_matrix(1, 4, rng));
  AttentionLayout one;
  one.heads = 2;
  const Matrix out = mha(x, x, x, one).value();
  const Matrix want = mha.output(mha.value(x)).value();
  CHECK((out - want).cwiseAbs().maxCoeff() < 1e-12);

  AttentionLayout layout;
  layout.query_len = 3;
  layout.key_len = 5;
  layout.heads = 2;
  Matrix w;
  attention(Tensor(Matrix::Zero(3, 4)), Tensor(Matrix::Zero(5, 4)), Tensor(random_matrix(5, 4, rng)), layout, &w);
  CHECK(w.rows() == 6);
  CHECK((w.array() - 0.2).abs().maxCoeff() < 1e-15);

  // Causal: perturbing position 2 leaves rows 0 and 1 untouched.
  layout.key_len = 3;
  layout.causal = true;
  const Matrix q = random_matrix(3, 4, rng), k = random_matrix(3, 4, rng), v = random_matrix(3, 4, rng);
  const Matrix base = attention(Tensor(q), Tensor(k), Tensor(v), layout).value();
  Matrix k2 = k, v2 = v;
  k2.row(2).setRandom();
  v2.row(2).setRandom();
  const Matrix moved = attention(Tensor(q), Tensor(k2), Tensor(v2), layout).value();
  CHECK(moved.topRows(2) == base.topRows(2));
  CHECK(moved.row(2) != base.row(2));
}

TEST_CASE("highway examples") {
  std::mt19937_64 rng(2);
  ParameterSet ps;
  Highway hw = Highway::create(ps, "h", 3, rng);
  const Tensor x(random_matrix(2, 3, rng)), h(random_matrix(2, 3, rng));

  hw.gate.weight.mutable_value().setZero();
  hw.gate.bias.mutable_value().setConstant(-50.0);
  CHECK((hw(x, h).value() - x.value()).cwiseAbs().maxCoeff() < 1e-20);
  hw.gate.bias.mutable_value().setConstant(50.0);
  CHECK((hw(x, h).value() - h.value()).cwiseAbs().maxCoeff() < 1e-15);
  hw.gate.bias.mutable_value().setZero();
  CHECK((hw(x, h).value() - 0.5 * (x.value() + h.value())).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("positional attention weights depend on positions only") {
  std::mt19937_64 rng(3);
  ParameterSet ps;
  const auto mha = MultiHeadAttention::create(ps, "p", 6, rng);
  const Matrix hidden = random_matrix(4, 6, rng);
  Matrix permuted(4, 6);
  const int perm[] = {2, 0, 3, 1};
  for (int i = 0; i < 4; ++i) permuted.row(i) = hidden.row(perm[i]);
  Matrix w1, w2;
  const Tensor out = positional_attention(mha, Tensor(hidden), 1, 4, 2, &w1);
  positional_attention(mha, Tensor(permuted), 1, 4, 2, &w2);
  CHECK(w1 == w2);
  CHECK(out.rows() == 4);
  CHECK(out.cols() == 6);

  Matrix single_w;
  const Matrix single = random_matrix(1, 6, rng);
  const Matrix got = positional_attention(mha, Tensor(single), 1, 1, 2, &single_w).value();
  CHECK((got - mha.output(mha.value(Tensor(single))).value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("project_source_to_length") {
  const TokenSequence x{4, 5, 6, 7};
  CHECK(project_source_to_length(x, 4) == x);
  CHECK(project_source_to_length(TokenSequence{4, 5}, 4) == TokenSequence{4, 4, 5, 5});
  CHECK(project_source_to_length(x, 2) == TokenSequence{4, 6});
  for (Index src = 1; src <= 7; ++src) {
    TokenSequence s(static_cast<std::size_t>(src));
    for (Index i = 0; i < src; ++i) s[static_cast<std::size_t>(i)] = static_cast<Token>(i);
    for (Index t = 1; t <= 9; ++t) {
      const TokenSequence p = project_source_to_length(s, t);
      REQUIRE(static_cast<Index>(p.size()) == t);
      for (Index i = 0; i < t; ++i) CHECK(p[static_cast<std::size_t>(i)] == (src * i) / t);
    }
  }
}

TEST_CASE("encoder contract") {
  Model m(tiny_config(), 5);
  const std::vector<TokenSequence> src{{4, 5, 6, 7}};
  const EncoderOutput enc = m.encode(src);
  CHECK(enc.states.rows() == 4);
  CHECK(enc.states.cols() == 8);
  CHECK(enc.per_layer_sums.cols() == 8);
  CHECK_FALSE(enc.per_layer_sums.requires_grad());

  const std::vector<TokenSequence> rev{{7, 6, 5, 4}};
  CHECK(m.encode(rev).states.value() != enc.states.value());

  const std::vector<TokenSequence> bad{{4, 10}};
  CHECK_THROWS_AS(m.encode(bad), std::out_of_range);
}

TEST_CASE("decoder 1 and decoder 2 contracts") {
  Model m(tiny_config(), 6);
  const std::vector<TokenSequence> src{{4, 5, 6}};
  const EncoderOutput enc = m.encode(src);
  const std::vector<TokenSequence> in{{4, 4, 5, 6, 6}};
  const DecoderStepOutput d1 = m.decoder1_forward(in, enc);
  CHECK(d1.logits.rows() == 5);
  CHECK(d1.logits.cols() == 9);
  CHECK(d1.activations.rows() == 5);
  CHECK(d1.activations.cols() == 8);

  // No causal mask: changing the last input token moves the first position.
  const std::vector<TokenSequence> edited{{4, 4, 5, 6, 9}};
  CHECK(m.decoder1_forward(edited, enc).logits.value().row(0) != d1.logits.value().row(0));

  const std::vector<TokenSequence> prev{{5, 6, 7, 8, 4}};
  const DecoderStepOutput a = m.decoder2_forward(prev, d1.activations, enc);
  const DecoderStepOutput b = m.decoder2_forward(prev, d1.activations, enc);
  CHECK(a.logits.value() == b.logits.value());
  CHECK(a.activations.value() == b.activations.value());

  CHECK_THROWS_AS(m.decoder2_forward(prev, Tensor(Matrix::Zero(4, 8)), enc), ShapeError);

  const std::vector<TokenSequence> too_long{TokenSequence(13, 4)};
  CHECK_THROWS_AS(m.decoder1_forward(too_long, enc), std::length_error);

  CHECK(m.length_logits(enc).cols() == 9);
}

TEST_CASE("zero previous activations reduce decoder 2 input to embedding plus position") {
  Model m(tiny_config(), 7);
  const std::vector<TokenSequence> src{{4, 5, 6}};
  const EncoderOutput enc = m.encode(src);
  const std::vector<TokenSequence> prev{{5, 6, 7}};
  const DecoderStepOutput zero = m.decoder2_forward(prev, Tensor(Matrix::Zero(3, 8)), enc);
  std::mt19937_64 rng(1);
  const DecoderStepOutput other = m.decoder2_forward(prev, Tensor(random_matrix(3, 8, rng)), enc);
  CHECK(zero.logits.value() != other.logits.value());
  CHECK(zero.logits.value().allFinite());
}

TEST_CASE("decoder 2 parameters are shared across refinement steps") {
  Model m(tiny_config(), 8);
  const std::vector<TokenSequence> src{{4, 5, 6}};
  const std::vector<TokenSequence> tgt{{5, 6, 7, 8}};

  auto touched_by_step = [&](int step) {
    m.parameters().zero_grad();
    ComputationRecord record;
    RecordScope scope(record);
    const EncoderOutput enc = m.encode(src);
    std::vector<TokenSequence> cur{project_source_to_length(src[0], 4)};
    DecoderStepOutput out = m.decoder1_forward(cur, enc);
    for (int l = 1; l <= step; ++l) out = m.decoder2_forward(tgt, out.activations, enc);
    record.backward(cross_entropy(out.logits, tgt[0]));
    std::set<std::string> names;
    const auto& ps = m.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (ps.names()[i].rfind("decoder2", 0) == 0 && ps.tensors()[i].has_grad() &&
          ps.tensors()[i].grad().cwiseAbs().maxCoeff() > 0)
        names.insert(ps.names()[i]);
    return names;
  };
  const auto one = touched_by_step(1);
  CHECK_FALSE(one.empty());
  CHECK(touched_by_step(2) == one);
  CHECK(touched_by_step(3) == one);

  const auto d1 = m.parameter_names("decoder1.");
  const auto d2 = m.parameter_names("decoder2.");
  CHECK(d1.size() == d2.size());
  for (const auto& n : d1) CHECK(std::find(d2.begin(), d2.end(), n) == d2.end());
}

TEST_CASE("length loss leaves the encoder untouched") {
  Model m(tiny_config(), 9);
  const std::vector<TokenSequence> src{{4, 5, 6}, {7, 8}};
  const std::vector<Index> lengths{4, 2};
  ComputationRecord record;
  {
    RecordScope scope(record);
    const EncoderOutput enc = m.encode(src);
    record.backward(length_loss(m, enc, lengths));
  }
  const auto& ps = m.parameters();
  bool head_moved = false;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const bool has = ps.tensors()[i].has_grad() && ps.tensors()[i].grad().cwiseAbs().maxCoeff() > 0;
    if (ps.names()[i].rfind("length_head", 0) == 0) head_moved = head_moved || has;
    else CHECK_MESSAGE(!has, ps.names()[i]);
  }
  CHECK(head_moved);
}

TEST_CASE("autoregressive decoder is causal") {
  Model m(tiny_config(Architecture::Autoregressive), 10);
  const std::vector<TokenSequence> src{{4, 5, 6}};
  const EncoderOutput enc = m.encode(src);
  const std::vector<TokenSequence> bos{{kBos}};
  const Matrix first = m.ar_decoder_forward(bos, enc).value();
  CHECK(first.rows() == 1);
  CHECK(first.allFinite());

  const std::vector<TokenSequence> p{{kBos, 5, 6}};
  const std::vector<TokenSequence> q{{kBos, 5, 7}};
  const Matrix a = m.ar_decoder_forward(p, enc).value();
  const Matrix b = m.ar_decoder_forward(q, enc).value();
  CHECK(a.topRows(2) == b.topRows(2));
  CHECK(a.row(2) != b.row(2));

  // Zero Jacobian from later inputs to earlier logits, by finite differences
  // through the embedding table.
  Tensor table = m.parameters().at("tgt_embed");
  Matrix& tv = table.mutable_value();
  const Scalar saved = tv(6, 0);
  tv(6, 0) = saved + 1e-3;
  const Matrix c = m.ar_decoder_forward(p, enc).value();
  tv(6, 0) = saved;
  CHECK(c.topRows(2) == a.topRows(2));
  CHECK(c.row(2) != a.row(2));
}

TEST_CASE("forward passes are pure") {
  Model a(tiny_config(), 11), b(tiny_config(), 11);
  const std::vector<TokenSequence> src{{4, 5, 6, 7}};
  const std::vector<TokenSequence> in{{4, 5, 6}};
  CHECK(a.decoder1_forward(in, a.encode(src)).logits.value() == b.decoder1_forward(in, b.encode(src)).logits.value());
}

TEST_CASE("checkpoint round trip is bitwise") {
  Model m(tiny_config(), 12);
  TrainingState st;
  st.adam = make_adam_state(m.parameters().tensors());
  st.adam.step = 7;
  st.adam.m[0].setConstant(0.1);
  st.epoch = 3;
  const std::string path = temp_path("roundtrip.ckpt");
  save_checkpoint(m, path, {{"note", "x y"}}, &st);
  const std::string before = slurp(path);
  const LoadedCheckpoint back = load_checkpoint(path);
  CHECK(slurp(path) == before);
  CHECK(back.metadata.at("note") == "x y");
  REQUIRE(back.state.has_value());
  CHECK(back.state->epoch == 3);
  CHECK(back.state->adam.step == 7);
  CHECK(back.state->adam.m[0] == st.adam.m[0]);
  const auto& p0 = m.parameters().tensors();
  const auto& p1 = back.model.parameters().tensors();
  REQUIRE(p0.size() == p1.size());
  for (std::size_t i = 0; i < p0.size(); ++i)
    CHECK(std::memcmp(p0[i].value().data(), p1[i].value().data(), sizeof(Scalar) * p0[i].size()) == 0);
  CHECK(serialize_config(back.model.config()) == serialize_config(m.config()));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint errors") {
  Model m(tiny_config(), 13);
  const std::string path = temp_path("errors.ckpt");
  save_checkpoint(m, path);
  const std::string full = slurp(path);

  {
    std::ofstream out(path, std::ios::binary);
    out << full.substr(0, full.size() - 100);
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  std::string wrong = full;
  wrong.replace(wrong.find("version=1"), 9, "version=9");
  {
    std::ofstream out(path, std::ios::binary);
    out << wrong;
  }
  try {
    load_checkpoint(path);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  std::string shape = full;
  const auto at = shape.find("array=param/src_embed 10 8");
  REQUIRE(at != std::string::npos);
  shape.replace(at, 26, "array=param/src_embed 11 8");
  {
    std::ofstream out(path, std::ios::binary);
    out << shape;
  }
  try {
    load_checkpoint(path);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("src_embed") != std::string::npos);
  }
  std::filesystem::remove(path);
}
