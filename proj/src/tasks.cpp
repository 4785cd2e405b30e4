#include "refine/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace refine {

Vocab::Vocab() {
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(s);
}

Vocab Vocab::with_content(const std::string& prefix, int count) {
  Vocab v;
  for (int i = 0; i < count; ++i) v.add(prefix + std::to_string(i));
  return v;
}

Token Vocab::add(const std::string& token) {
  if (token.empty() || token.find_first_of(" \t\n") != std::string::npos)
    throw DataError("vocab: invalid token '" + token + "'");
  if (index_.count(token)) throw DataError("vocab: duplicate token '" + token + "'");
  const auto id = static_cast<Token>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

std::optional<Token> Vocab::find(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(Token id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenSequence Vocab::encode(const std::string& line, std::int64_t* unknown) const {
  TokenSequence out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    auto id = find(tok);
    if (!id) {
      if (unknown) ++*unknown;
      out.push_back(kUnk);
    } else {
      out.push_back(*id);
    }
  }
  return out;
}

std::string Vocab::decode(std::span<const Token> seq) const {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += token(seq[i]);
  }
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("vocab: cannot write '" + path + "'");
  for (const auto& t : tokens_) out << t << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("vocab: cannot read '" + path + "'");
  Vocab v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    if (lineno < 4) {
      if (line != v.tokens_[lineno])
        throw DataError("vocab: line " + std::to_string(lineno + 1) + " must be special token " + v.tokens_[lineno]);
    } else {
      v.add(line);
    }
    ++lineno;
  }
  if (lineno < 4) throw DataError("vocab: '" + path + "' lacks the special tokens");
  return v;
}

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::Sort: return "sort";
    case TaskKind::Toylex: return "toylex";
  }
  return "?";
}

TaskKind task_from_string(const std::string& s) {
  if (s == "copy") return TaskKind::Copy;
  if (s == "reverse") return TaskKind::Reverse;
  if (s == "sort") return TaskKind::Sort;
  if (s == "toylex") return TaskKind::Toylex;
  throw std::invalid_argument("unknown task '" + s + "'");
}

ToyLexicon toylex_lexicon(int vocab_size, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  ToyLexicon lex;
  const auto n = static_cast<std::size_t>(vocab_size + kFirstContent);
  lex.translation.assign(n, kUnk);
  lex.companion.assign(n, kUnk);
  std::vector<Token> perm(static_cast<std::size_t>(vocab_size));
  std::iota(perm.begin(), perm.end(), kFirstContent);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::uniform_int_distribution<Token> any(kFirstContent, static_cast<Token>(kFirstContent + vocab_size - 1));
  for (int i = 0; i < vocab_size; ++i) {
    lex.translation[static_cast<std::size_t>(kFirstContent + i)] = perm[static_cast<std::size_t>(i)];
    lex.companion[static_cast<std::size_t>(kFirstContent + i)] = any(rng);
  }
  return lex;
}

Dataset gen_task(const TaskSpec& spec) {
  if (spec.min_len < 1) throw std::invalid_argument("gen_task: minimum length must be at least 1");
  if (spec.max_len < spec.min_len) throw std::invalid_argument("gen_task: empty length range");
  if (spec.vocab_size < 1) throw std::invalid_argument("gen_task: vocabulary size must be positive");
  if (spec.n_pairs < 0) throw std::invalid_argument("gen_task: negative pair count");

  Dataset ds;
  ds.name = to_string(spec.kind);
  ds.source_vocab = Vocab::with_content("s", spec.vocab_size);
  ds.target_vocab = spec.kind == TaskKind::Toylex ? Vocab::with_content("t", spec.vocab_size) : ds.source_vocab;

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> length(spec.min_len, spec.max_len);
  std::uniform_int_distribution<Token> token(kFirstContent, static_cast<Token>(kFirstContent + spec.vocab_size - 1));
  std::bernoulli_distribution expand(spec.expansion_rate);
  std::bernoulli_distribution swap(spec.swap_rate);
  const ToyLexicon lex = spec.kind == TaskKind::Toylex ? toylex_lexicon(spec.vocab_size, spec.seed) : ToyLexicon{};

  ds.pairs.reserve(static_cast<std::size_t>(spec.n_pairs));
  for (std::int64_t i = 0; i < spec.n_pairs; ++i) {
    SequencePair p;
    p.source.resize(static_cast<std::size_t>(length(rng)));
    for (auto& t : p.source) t = token(rng);
    switch (spec.kind) {
      case TaskKind::Copy:
        p.target = p.source;
        break;
      case TaskKind::Reverse:
        p.target.assign(p.source.rbegin(), p.source.rend());
        break;
      case TaskKind::Sort:
        p.target = p.source;
        std::sort(p.target.begin(), p.target.end());
        break;
      case TaskKind::Toylex:
        for (Token s : p.source) {
          p.target.push_back(lex.translation[static_cast<std::size_t>(s)]);
          if (expand(rng)) p.target.push_back(lex.companion[static_cast<std::size_t>(s)]);
        }
        for (std::size_t t = 0; t + 1 < p.target.size(); ++t) {
          if (swap(rng)) {
            std::swap(p.target[t], p.target[t + 1]);
            ++t;
          }
        }
        break;
    }
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("dataset: cannot write '" + path + "'");
  for (const auto& p : ds.pairs)
    out << ds.source_vocab.decode(p.source) << "\t" << ds.target_vocab.decode(p.target) << "\n";
}

Dataset load_dataset(const std::string& path, const Vocab& source_vocab, const Vocab& target_vocab,
                     std::int64_t* unknown) {
  std::ifstream in(path);
  if (!in) throw DataError("dataset: cannot read '" + path + "'");
  Dataset ds;
  ds.name = path;
  ds.source_vocab = source_vocab;
  ds.target_vocab = target_vocab;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError(path + ":" + std::to_string(lineno) + ": missing tab separator");
    SequencePair p{source_vocab.encode(line.substr(0, tab), unknown),
                   target_vocab.encode(line.substr(tab + 1), unknown)};
    if (p.source.empty() || p.target.empty())
      throw DataError(path + ":" + std::to_string(lineno) + ": empty sequence");
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

Splits split(const Dataset& ds, std::array<Scalar, 3> fractions, std::uint64_t seed) {
  Scalar total = 0.0;
  for (Scalar f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("split: fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");

  std::vector<std::size_t> order(ds.pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n = static_cast<Scalar>(ds.pairs.size());
  const auto n_train = static_cast<std::size_t>(std::floor(n * fractions[0] + 1e-9));
  const auto n_dev = std::min(order.size() - n_train, static_cast<std::size_t>(std::floor(n * fractions[1] + 1e-9)));

  Splits out;
  for (Dataset* d : {&out.train, &out.dev, &out.test}) {
    d->source_vocab = ds.source_vocab;
    d->target_vocab = ds.target_vocab;
  }
  out.train.name = ds.name + ".train";
  out.dev.name = ds.name + ".dev";
  out.test.name = ds.name + ".test";
  for (std::size_t i = 0; i < order.size(); ++i) {
    Dataset& d = i < n_train ? out.train : (i < n_train + n_dev ? out.dev : out.test);
    d.pairs.push_back(ds.pairs[order[i]]);
  }
  return out;
}

}  // namespace refine
