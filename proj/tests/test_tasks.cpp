#include "doctest.h"

#include "refine/tasks.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

using namespace refine;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("refine_tasks_" + name)).string();
}

TaskSpec spec_for(TaskKind kind, std::int64_t n, std::uint64_t seed = 1) {
  TaskSpec s;
  s.kind = kind;
  s.n_pairs = n;
  s.seed = seed;
  return s;
}

std::vector<SequencePair> sorted_pairs(std::vector<SequencePair> v) {
  std::sort(v.begin(), v.end(), [](const SequencePair& a, const SequencePair& b) {
    return std::tie(a.source, a.target) < std::tie(b.source, b.target);
  });
  return v;
}

}  // namespace

TEST_CASE("copy, reverse and sort targets") {
  for (const auto& p : gen_task(spec_for(TaskKind::Copy, 200)).pairs) CHECK(p.target == p.source);
  for (const auto& p : gen_task(spec_for(TaskKind::Reverse, 200)).pairs) {
    TokenSequence r(p.source.rbegin(), p.source.rend());
    CHECK(p.target == r);
  }
  for (const auto& p : gen_task(spec_for(TaskKind::Sort, 200)).pairs) {
    CHECK(std::is_sorted(p.target.begin(), p.target.end()));
    TokenSequence s = p.source;
    std::sort(s.begin(), s.end());
    CHECK(p.target == s);
  }
}

TEST_CASE("source lengths stay inside the range") {
  TaskSpec s = spec_for(TaskKind::Reverse, 3000);
  s.min_len = 4;
  s.max_len = 9;
  const Dataset ds = gen_task(s);
  for (const auto& p : ds.pairs) {
    CHECK(p.source.size() >= 4);
    CHECK(p.source.size() <= 9);
  }
  s.min_len = 0;
  CHECK_THROWS_AS(gen_task(s), std::invalid_argument);
}

TEST_CASE("toylex length statistics") {
  const Dataset ds = gen_task(spec_for(TaskKind::Toylex, 10000, 7));
  double ratio = 0.0;
  for (const auto& p : ds.pairs)
    ratio += static_cast<double>(p.target.size()) / static_cast<double>(p.source.size());
  ratio /= static_cast<double>(ds.size());
  CHECK(ratio == doctest::Approx(1.2).epsilon(0.02 / 1.2));
}

TEST_CASE("toylex follows the lexicon recovered from the seed") {
  const TaskSpec spec = spec_for(TaskKind::Toylex, 2000, 11);
  const Dataset ds = gen_task(spec);
  const ToyLexicon lex = toylex_lexicon(spec.vocab_size, spec.seed);
  TokenSequence image(lex.translation.begin() + kFirstContent, lex.translation.end());
  std::sort(image.begin(), image.end());
  CHECK(std::adjacent_find(image.begin(), image.end()) == image.end());

  int unexpanded = 0;
  for (const auto& p : ds.pairs) {
    TokenSequence translated;
    for (Token s : p.source) translated.push_back(lex.translation[static_cast<std::size_t>(s)]);
    std::sort(translated.begin(), translated.end());
    TokenSequence target = p.target;
    std::sort(target.begin(), target.end());
    CHECK(std::includes(target.begin(), target.end(), translated.begin(), translated.end()));
    if (p.target.size() == p.source.size()) {
      ++unexpanded;
      CHECK(target == translated);
    }
  }
  CHECK(unexpanded > 0);
  CHECK(gen_task(spec).pairs == ds.pairs);
}

TEST_CASE("dataset files") {
  const Dataset ds = gen_task(spec_for(TaskKind::Toylex, 50, 3));
  const std::string path = temp_path("ds.tsv");
  save_dataset(ds, path);
  const Dataset back = load_dataset(path, ds.source_vocab, ds.target_vocab);
  CHECK(back.pairs == ds.pairs);

  {
    std::ofstream out(path);
    out << "s1 s2\ts3\ns4 s5 s6\n";
  }
  try {
    load_dataset(path, ds.source_vocab, ds.target_vocab);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }

  { std::ofstream out(path); }
  CHECK(load_dataset(path, ds.source_vocab, ds.target_vocab).size() == 0);

  {
    std::ofstream out(path);
    out << "s1 zz s2\tt1 t3\n";
  }
  std::int64_t unknown = 0;
  const Dataset u = load_dataset(path, ds.source_vocab, ds.target_vocab, &unknown);
  CHECK(unknown == 1);
  CHECK(u.pairs[0].source[1] == kUnk);
  std::filesystem::remove(path);
}

TEST_CASE("vocab files") {
  const Vocab v = Vocab::with_content("s", 5);
  CHECK(v.size() == 9);
  CHECK(v.token(kPad) == "<pad>");
  CHECK(v.find("s3") == std::optional<Token>(7));
  const std::string path = temp_path("v.vocab");
  v.save(path);
  CHECK(Vocab::load(path) == v);
  {
    std::ofstream out(path);
    out << "a\nb\n";
  }
  CHECK_THROWS_AS(Vocab::load(path), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("split") {
  const Dataset ds = gen_task(spec_for(TaskKind::Reverse, 1000, 5));
  const Splits a = split(ds, {0.8, 0.1, 0.1}, 9);
  CHECK(a.train.size() == 800);
  CHECK(a.dev.size() == 100);
  CHECK(a.test.size() == 100);
  const Splits b = split(ds, {0.8, 0.1, 0.1}, 9);
  CHECK(a.train.pairs == b.train.pairs);
  CHECK(a.dev.pairs == b.dev.pairs);

  std::vector<SequencePair> all = a.train.pairs;
  all.insert(all.end(), a.dev.pairs.begin(), a.dev.pairs.end());
  all.insert(all.end(), a.test.pairs.begin(), a.test.pairs.end());
  CHECK(sorted_pairs(all) == sorted_pairs(ds.pairs));

  CHECK_THROWS_AS(split(ds, {0.5, 0.1, 0.1}, 1), std::invalid_argument);
  CHECK_THROWS_AS(split(ds, {1.2, -0.1, -0.1}, 1), std::invalid_argument);
}
