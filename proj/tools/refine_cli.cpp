#include "refine/commands.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

using namespace refine;

namespace {

const std::set<std::string> kBoolKeys{"resume", "distill", "train_length_head", "adaptive", "ref_length", "collapse"};
const std::set<std::string> kNarDecodeKeys{"i_dec", "adaptive", "epsilon", "max_iters", "stop_criterion", "ref_length"};

// One flag per RunConfig key; values given on the command line are applied
// after the config file.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> text;
  std::map<std::string, bool> flags;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app, const std::vector<std::string>& keys) {
    app->add_option("--config", config_file, "key=value config file")->check(CLI::ExistingFile);
    for (const auto& key : keys) {
      const std::string flag = flag_for_key(key);
      if (kBoolKeys.count(key)) {
        flags[key] = false;
        options[key] = app->add_flag("--" + flag + ",!--no-" + flag, flags[key], key);
      } else {
        text[key];
        options[key] = app->add_option("--" + flag, text[key], key);
      }
    }
  }

  bool given(const std::string& key) const {
    const auto it = options.find(key);
    return it != options.end() && it->second->count() > 0;
  }

  RunConfig build() const {
    RunConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& [key, opt] : options) {
      if (opt->count() == 0) continue;
      cfg.set(key, kBoolKeys.count(key) ? (flags.at(key) ? "true" : "false") : text.at(key));
    }
    return cfg;
  }
};

std::vector<std::string> all_keys() { return RunConfig::keys(); }

int run(int argc, char** argv) {
  CLI::App app{"Iterative-refinement sequence models on synthetic tasks"};
  app.require_subcommand(1);

  GenOptions gen;
  std::string task = "reverse";
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen_cmd->add_option("--task", task, "copy, reverse, sort or toylex");
  gen_cmd->add_option("--n", gen.n, "number of pairs");
  gen_cmd->add_option("--out", gen.out_dir, "output directory");
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--min-len", gen.min_len);
  gen_cmd->add_option("--max-len", gen.max_len);
  gen_cmd->add_option("--vocab-size", gen.vocab_size);
  gen_cmd->add_flag("--force", gen.force, "overwrite an existing directory");

  ConfigFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train the autoregressive teacher or the refinement model");
  train_flags.attach(train_cmd, all_keys());

  ConfigFlags decode_flags;
  DecodeRequest dreq;
  auto* decode_cmd = app.add_subcommand("decode", "Decode a dataset file with a trained checkpoint");
  decode_flags.attach(decode_cmd, {"i_dec", "adaptive", "epsilon", "max_iters", "stop_criterion", "beam",
                                   "ref_length", "collapse"});
  decode_cmd->add_option("--checkpoint", dreq.checkpoint)->required();
  decode_cmd->add_option("--input", dreq.input, "dataset TSV")->required();
  decode_cmd->add_option("--output", dreq.output, "hypotheses TSV")->required();
  decode_cmd->add_option("--trace", dreq.trace, "per-iteration dump");
  decode_cmd->add_flag("--measure-latency", dreq.measure_latency, "also write <output>.latency.csv");

  std::string hyp_file, ref_file, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Score hypotheses against references");
  eval_cmd->add_option("--hyp", hyp_file)->required();
  eval_cmd->add_option("--ref", ref_file)->required();
  eval_cmd->add_option("--output", eval_out, "also write the report here");

  ConfigFlags ablate_flags;
  std::string grid_spec, ablate_out = "ablation";
  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep training settings and tabulate dev BLEU");
  ablate_flags.attach(ablate_cmd, all_keys());
  ablate_cmd->add_option("--grid", grid_spec, "e.g. \"i_train=1,2,4;p_dae=0,0.5,1;distill=false,true\"");
  ablate_cmd->add_option("--out", ablate_out, "output directory");

  PlotRequest plot;
  auto* plot_cmd = app.add_subcommand("plot-data", "Write BLEU-vs-iterations and latency-vs-length CSVs");
  plot_cmd->add_option("--checkpoint", plot.checkpoint)->required();
  plot_cmd->add_option("--ar-checkpoint", plot.ar_checkpoint);
  plot_cmd->add_option("--input", plot.input)->required();
  plot_cmd->add_option("--out", plot.out_dir)->required();
  plot_cmd->add_option("--max-i-dec", plot.max_i_dec);
  plot_cmd->add_option("--latency-i-dec", plot.latency_i_dec);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (gen_cmd->parsed()) {
    try {
      gen.kind = task_from_string(task);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    cmd_gen(gen);
  } else if (train_cmd->parsed()) {
    const TrainResult r = cmd_train(train_flags.build());
    for (const auto& e : r.log) std::cout << format_epoch_log(e) << '\n';
    if (r.distill.kept_reference > 0)
      std::cerr << "distillation kept " << r.distill.kept_reference << " references for empty teacher outputs\n";
  } else if (decode_cmd->parsed()) {
    RunConfig cfg = decode_flags.build();
    dreq.decode = cfg.decode;
    for (const auto& key : kNarDecodeKeys) dreq.nar_flags = dreq.nar_flags || decode_flags.given(key);
    dreq.beam_flag = decode_flags.given("beam");
    cmd_decode(dreq);
  } else if (eval_cmd->parsed()) {
    const std::string report = cmd_eval(hyp_file, ref_file).to_key_values();
    std::cout << report;
    if (!eval_out.empty()) {
      std::ofstream out(eval_out);
      if (!out) throw DataError("eval: cannot write '" + eval_out + "'");
      out << report;
    }
  } else if (ablate_cmd->parsed()) {
    const AblationGrid grid = grid_spec.empty() ? default_ablation_grid() : parse_grid(grid_spec);
    const auto rows = cmd_ablate(ablate_flags.build(), grid, ablate_out);
    std::cout << format_ablation(grid, rows);
  } else if (plot_cmd->parsed()) {
    cmd_plot_data(plot);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
}
