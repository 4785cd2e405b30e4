#pragma once

// Run configuration: every field has a default, a key=value config file
// overrides defaults, and command-line flags (one per key, `--some-key`
// for `some_key`) override the file.

#include "refine/decode.hpp"
#include "refine/model.hpp"
#include "refine/objective.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace refine {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TrainMode { ArTeacher, Nar };

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  TrainMode mode = TrainMode::Nar;
  std::string data_dir = "data";
  std::string checkpoint = "model.ckpt";
  std::string teacher;
  std::string log;  // defaults to <checkpoint>.log
  int distill_beam = 4;
  bool resume = false;
  std::uint64_t seed = 1;

  RunConfig();
  // Sets one field from its textual key/value; throws UsageError for unknown
  // keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  void load_file(const std::string& path);
  std::string to_text() const;

  // Resolves seeds and derived defaults, then validates every section.
  void finalize();
};

std::string flag_for_key(const std::string& key);

}  // namespace refine
