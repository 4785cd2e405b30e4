#pragma once

// Checkpoint file: a text header of key=value lines (format version, model
// config, free-form metadata, then one `array=<name> <rows> <cols> <offset>`
// line per stored array), a blank line, then the raw little-endian 64-bit
// float payload of every array in manifest order. Offsets are in bytes from
// the start of the payload.

#include "refine/adam.hpp"
#include "refine/model.hpp"

#include <map>
#include <optional>
#include <string>

namespace refine {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Optimizer progress stored alongside the parameters so training can resume.
struct TrainingState {
  AdamState adam;
  std::int64_t epoch = 0;
};

void save_checkpoint(const Model& model, const std::string& path,
                     const std::map<std::string, std::string>& metadata = {},
                     const TrainingState* state = nullptr);

struct LoadedCheckpoint {
  Model model;
  std::map<std::string, std::string> metadata;
  std::optional<TrainingState> state;
};

// Validates version, config fields and the full manifest before touching any
// parameter; throws CheckpointError naming the offending field.
LoadedCheckpoint load_checkpoint(const std::string& path);

std::string serialize_config(const ModelConfig& config);

}  // namespace refine
