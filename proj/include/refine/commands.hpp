#pragma once

// Subcommand implementations behind the `refine` executable. Each one is
// reproducible from its arguments and seed alone.

#include "refine/checkpoint.hpp"
#include "refine/config.hpp"
#include "refine/decode.hpp"
#include "refine/metrics.hpp"
#include "refine/objective.hpp"
#include "refine/tasks.hpp"

#include <string>
#include <vector>

namespace refine {

// Exit codes of the executable.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

struct GenOptions {
  TaskKind kind = TaskKind::Reverse;
  std::int64_t n = 5000;
  std::string out_dir = "data";
  std::uint64_t seed = 1;
  int min_len = 3;
  int max_len = 20;
  int vocab_size = 32;
  bool force = false;
};

// Writes src.vocab, tgt.vocab and train/dev/test.tsv (80/10/10).
void cmd_gen(const GenOptions& opts);

struct DataDir {
  Dataset train, dev, test;
};
DataDir load_data_dir(const std::string& dir);

struct TrainResult {
  std::vector<EpochLog> log;
  DistillStats distill;
};

// Trains per cfg.mode, writing the checkpoint after every epoch and the
// per-epoch log to cfg.log.
TrainResult cmd_train(RunConfig cfg);

// The model and vocabularies stored in a checkpoint written by cmd_train.
struct TrainedModel {
  Model model;
  Vocab source_vocab, target_vocab;
  std::map<std::string, std::string> metadata;
};
TrainedModel load_trained(const std::string& checkpoint);

struct DecodeRequest {
  std::string checkpoint;
  std::string input;   // dataset TSV
  std::string output;  // source<TAB>hypothesis<TAB>iterations_used<TAB>wall_seconds
  std::string trace;   // optional per-iteration dump
  DecodeConfig decode;
  bool nar_flags = false;   // i_dec/adaptive/epsilon/max_iters/ref_length were given
  bool beam_flag = false;   // beam was given
  bool measure_latency = false;
};

struct DecodeResult {
  std::vector<RefinementTrace> traces;
  EfficiencyReport efficiency;
};

DecodeResult cmd_decode(const DecodeRequest& req);

// BLEU and length metrics of hyp_file (decode output or dataset TSV; the
// hypothesis is the second column when tabs are present) against the second
// column of ref_file.
EvalReport cmd_eval(const std::string& hyp_file, const std::string& ref_file);

// Parsed "key=v1,v2;key=v1" grid. Keys: i_train, p_dae, distill, approx.
struct AblationGrid {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  std::size_t rows() const;
};
AblationGrid parse_grid(const std::string& spec);
AblationGrid default_ablation_grid();

struct AblationRow {
  std::vector<std::string> values;  // one per axis
  double bleu_rep = 0.0;            // without collapsing
  double bleu_no_rep = 0.0;         // with collapsing
};

// Trains and evaluates one student per grid row under out_dir/row<k>/ via
// cmd_train, cmd_decode and cmd_eval on the dev split; trains a teacher
// first when a row distills and cfg.teacher is empty. Writes
// out_dir/ablation.tsv.
std::vector<AblationRow> cmd_ablate(RunConfig cfg, const AblationGrid& grid, const std::string& out_dir);
std::string format_ablation(const AblationGrid& grid, const std::vector<AblationRow>& rows);

struct PlotRequest {
  std::string checkpoint;     // refinement model
  std::string ar_checkpoint;  // optional autoregressive baseline
  std::string input;          // dataset TSV
  std::string out_dir;
  int max_i_dec = 10;
  int latency_i_dec = 4;
};

// Writes bleu_vs_idec.csv (i_dec,bleu) and latency.csv
// (mode,length,seconds,iterations).
void cmd_plot_data(const PlotRequest& req);

}  // namespace refine
