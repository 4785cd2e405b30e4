#pragma once

// Synthetic sequence-to-sequence tasks, vocabularies and dataset files.

#include "refine/corruption.hpp"
#include "refine/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace refine {

inline constexpr Token kPad = 0;
inline constexpr Token kBos = 1;
inline constexpr Token kEos = 2;
inline constexpr Token kUnk = 3;
inline constexpr Token kFirstContent = 4;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Vocab {
 public:
  Vocab();  // the four specials only
  static Vocab with_content(const std::string& prefix, int count);

  Token add(const std::string& token);
  std::optional<Token> find(const std::string& token) const;
  const std::string& token(Token id) const;
  Index size() const { return static_cast<Index>(tokens_.size()); }
  TokenRange content_range() const { return {kFirstContent, static_cast<Token>(tokens_.size())}; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Unknown strings map to kUnk and bump `unknown` when given.
  TokenSequence encode(const std::string& line, std::int64_t* unknown = nullptr) const;
  std::string decode(std::span<const Token> seq) const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, Token> index_;
};

struct SequencePair {
  TokenSequence source;
  TokenSequence target;
  bool operator==(const SequencePair&) const = default;
};

struct Dataset {
  std::string name;
  std::vector<SequencePair> pairs;
  Vocab source_vocab;
  Vocab target_vocab;

  std::size_t size() const { return pairs.size(); }
};

enum class TaskKind { Copy, Reverse, Sort, Toylex };

std::string to_string(TaskKind k);
TaskKind task_from_string(const std::string& s);

struct TaskSpec {
  TaskKind kind = TaskKind::Reverse;
  std::int64_t n_pairs = 1000;
  int min_len = 3;
  int max_len = 20;
  int vocab_size = 32;
  std::uint64_t seed = 1;
  Scalar expansion_rate = 0.2;  // toylex only
  Scalar swap_rate = 0.2;       // toylex only
};

// Fixed source->target maps of the toylex task, recoverable from the seed.
struct ToyLexicon {
  std::vector<Token> translation;  // indexed by source content token
  std::vector<Token> companion;    // second token of a two-token expansion
};

ToyLexicon toylex_lexicon(int vocab_size, std::uint64_t seed);

Dataset gen_task(const TaskSpec& spec);

void save_dataset(const Dataset& ds, const std::string& path);
// Lines "src tokens<TAB>tgt tokens". Unknown tokens map to unk and are
// counted in `unknown`.
Dataset load_dataset(const std::string& path, const Vocab& source_vocab, const Vocab& target_vocab,
                     std::int64_t* unknown = nullptr);

struct Splits {
  Dataset train, dev, test;
};

// Shuffled disjoint partition; fractions must be non-negative and sum to 1.
Splits split(const Dataset& ds, std::array<Scalar, 3> fractions, std::uint64_t seed);

}  // namespace refine
