#include "refine/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace refine {

namespace fs = std::filesystem;

namespace {

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

Vocab vocab_from_metadata(const std::map<std::string, std::string>& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw CheckpointError("checkpoint: missing metadata field '" + key + "'");
  std::istringstream in(it->second);
  std::vector<std::string> tokens;
  for (std::string t; in >> t;) tokens.push_back(t);
  Vocab v;
  if (tokens.size() < v.tokens().size() ||
      !std::equal(v.tokens().begin(), v.tokens().end(), tokens.begin()))
    throw CheckpointError("checkpoint: metadata field '" + key + "' lacks the special tokens");
  for (std::size_t i = v.tokens().size(); i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

std::ofstream open_output(const std::string& path) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    cols.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return cols;
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::vector<std::vector<std::string>> read_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path + "'");
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    rows.push_back(split_tabs(line));
  }
  return rows;
}

Index batches_per_epoch(const Dataset& data, Index batch_tokens) {
  std::mt19937_64 rng(0);
  return static_cast<Index>(make_batches(data, batch_tokens, rng).size());
}

}  // namespace

void cmd_gen(const GenOptions& opts) {
  if (opts.n <= 0) throw UsageError("gen: --n must be positive");
  if (fs::exists(opts.out_dir) && !opts.force)
    throw UsageError("gen: '" + opts.out_dir + "' already exists (use --force to overwrite)");
  TaskSpec spec;
  spec.kind = opts.kind;
  spec.n_pairs = opts.n;
  spec.seed = opts.seed;
  spec.min_len = opts.min_len;
  spec.max_len = opts.max_len;
  spec.vocab_size = opts.vocab_size;
  Dataset all;
  try {
    all = gen_task(spec);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("gen: ") + e.what());
  }
  const Splits parts = split(all, {0.8, 0.1, 0.1}, derive_seed(opts.seed, SeedStream::Data));
  fs::create_directories(opts.out_dir);
  const fs::path dir(opts.out_dir);
  all.source_vocab.save((dir / "src.vocab").string());
  all.target_vocab.save((dir / "tgt.vocab").string());
  save_dataset(parts.train, (dir / "train.tsv").string());
  save_dataset(parts.dev, (dir / "dev.tsv").string());
  save_dataset(parts.test, (dir / "test.tsv").string());
}

DataDir load_data_dir(const std::string& dir) {
  const fs::path d(dir);
  const Vocab src = Vocab::load((d / "src.vocab").string());
  const Vocab tgt = Vocab::load((d / "tgt.vocab").string());
  DataDir out;
  out.train = load_dataset((d / "train.tsv").string(), src, tgt);
  out.dev = load_dataset((d / "dev.tsv").string(), src, tgt);
  out.test = load_dataset((d / "test.tsv").string(), src, tgt);
  return out;
}

TrainedModel load_trained(const std::string& checkpoint) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  Vocab src = vocab_from_metadata(ck.metadata, "source_vocab");
  Vocab tgt = vocab_from_metadata(ck.metadata, "target_vocab");
  if (src.size() != ck.model.config().vocab_src || tgt.size() != ck.model.config().vocab_tgt)
    throw CheckpointError("checkpoint: vocabulary metadata disagrees with the model config");
  return {std::move(ck.model), std::move(src), std::move(tgt), std::move(ck.metadata)};
}

TrainResult cmd_train(RunConfig cfg) {
  cfg.finalize();
  const DataDir data = load_data_dir(cfg.data_dir);
  const bool nar = cfg.mode == TrainMode::Nar;
  if (!nar && cfg.train.distill) throw UsageError("train: distill applies to --mode nar only");
  if (nar && cfg.train.distill && cfg.teacher.empty())
    throw UsageError("train: distill requires a teacher checkpoint (--teacher)");

  ModelConfig mc = cfg.model;
  mc.arch = nar ? Architecture::Refinement : Architecture::Autoregressive;
  mc.vocab_src = data.train.source_vocab.size();
  mc.vocab_tgt = data.train.target_vocab.size();

  TrainResult result;
  Dataset train = data.train;
  if (nar && cfg.train.distill) {
    const TrainedModel teacher = load_trained(cfg.teacher);
    if (teacher.model.config().arch != Architecture::Autoregressive)
      throw UsageError("train: teacher '" + cfg.teacher + "' is not an autoregressive checkpoint");
    if (!(teacher.source_vocab == data.train.source_vocab) || !(teacher.target_vocab == data.train.target_vocab))
      throw DataError("train: teacher vocabularies differ from the data directory");
    train = distill_dataset(teacher.model, data.train, cfg.distill_beam, &result.distill);
  }

  TrainConfig tc = cfg.train;
  tc.schedule.d_model = mc.d_model;
  if (tc.schedule.total_steps <= 0) tc.schedule.total_steps = tc.epochs * batches_per_epoch(train, tc.batch_tokens);

  std::map<std::string, std::string> meta;
  meta["source_vocab"] = join_tokens(data.train.source_vocab.tokens());
  meta["target_vocab"] = join_tokens(data.train.target_vocab.tokens());
  for (const auto& key : {"mode", "seed", "i_train", "p_dae", "approx", "beta", "distill", "epochs"})
    meta[std::string("train.") + key] = cfg.get(key);

  TrainingState state;
  std::optional<Model> model;
  const bool resuming = cfg.resume && fs::exists(cfg.checkpoint);
  if (resuming) {
    LoadedCheckpoint ck = load_checkpoint(cfg.checkpoint);
    if (!ck.state) throw CheckpointError("train: '" + cfg.checkpoint + "' holds no optimizer state to resume from");
    if (serialize_config(ck.model.config()) != serialize_config(mc))
      throw UsageError("train: checkpoint config differs from the requested config; cannot resume");
    state = std::move(*ck.state);
    model.emplace(std::move(ck.model));
  } else {
    model.emplace(mc, derive_seed(cfg.seed, SeedStream::Init));
  }

  std::ofstream log_out(cfg.log, resuming ? std::ios::app : std::ios::trunc);
  if (!log_out) throw DataError("train: cannot write log '" + cfg.log + "'");
  if (!resuming) log_out << "epoch\ttrain_loss\tlength_loss\tdev_bleu_i1\tdev_bleu_itrain\twall_seconds\n";

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e, const Model& m, const TrainingState& s) {
    save_checkpoint(m, cfg.checkpoint, meta, &s);
    log_out << format_epoch_log(e) << '\n';
    log_out.flush();
  };
  result.log = train_loop(*model, train, &data.dev, tc, state, hooks);
  if (result.log.empty() && !resuming) save_checkpoint(*model, cfg.checkpoint, meta, &state);
  return result;
}

DecodeResult cmd_decode(const DecodeRequest& req) {
  const TrainedModel tm = load_trained(req.checkpoint);
  DecodeConfig dc = req.decode;
  if (tm.model.config().arch == Architecture::Autoregressive) {
    if (req.nar_flags)
      throw UsageError("decode: refinement flags (--i-dec, --adaptive, --epsilon, --max-iters, --ref-length) "
                       "do not apply to an autoregressive checkpoint");
    dc.mode = dc.beam > 1 ? DecodeMode::ArBeam : DecodeMode::ArGreedy;
  } else {
    if (req.beam_flag) throw UsageError("decode: --beam applies to autoregressive checkpoints only");
    if (dc.is_autoregressive()) dc.mode = DecodeMode::NarFixed;
  }
  try {
    dc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const Dataset input = load_dataset(req.input, tm.source_vocab, tm.target_vocab);

  DecodeResult result;
  double total_seconds = 0.0;
  Index total_tokens = 0;
  for (const auto& pair : input.pairs) {
    RefinementTrace trace = decode(tm.model, pair.source, dc, static_cast<Index>(pair.target.size()));
    result.efficiency.samples.push_back(
        {static_cast<Index>(pair.source.size()), trace.wall_seconds, trace.iterations_used});
    total_seconds += trace.wall_seconds;
    total_tokens += static_cast<Index>(pair.source.size());
    result.traces.push_back(std::move(trace));
  }
  result.efficiency.tokens_per_second = total_seconds > 0.0 ? static_cast<double>(total_tokens) / total_seconds : 0.0;

  std::ofstream out = open_output(req.output);
  out << std::setprecision(6);
  for (std::size_t i = 0; i < input.pairs.size(); ++i) {
    const auto& t = result.traces[i];
    out << tm.source_vocab.decode(input.pairs[i].source) << '\t' << tm.target_vocab.decode(t.output) << '\t'
        << t.iterations_used << '\t' << t.wall_seconds << '\n';
  }
  if (!req.trace.empty()) {
    std::ofstream tr = open_output(req.trace);
    tr << std::setprecision(10);
    for (std::size_t i = 0; i < input.pairs.size(); ++i) {
      const auto& t = result.traces[i];
      tr << "# " << i << '\t' << tm.source_vocab.decode(input.pairs[i].source) << "\tlength=" << t.predicted_length
         << '\n';
      for (std::size_t l = 0; l < t.iterations.size(); ++l) {
        tr << l << '\t' << tm.target_vocab.decode(t.iterations[l]);
        if (l < t.logprobs.size()) tr << '\t' << t.logprobs[l];
        tr << '\n';
      }
      tr << '\n';
    }
  }
  if (req.measure_latency) {
    std::ofstream lat = open_output(req.output + ".latency.csv");
    lat << result.efficiency.to_csv();
  }
  return result;
}

EvalReport cmd_eval(const std::string& hyp_file, const std::string& ref_file) {
  const auto hyp_rows = read_rows(hyp_file);
  const auto ref_rows = read_rows(ref_file);
  if (hyp_rows.size() != ref_rows.size())
    throw DataError("eval: " + std::to_string(hyp_rows.size()) + " hypotheses vs " +
                    std::to_string(ref_rows.size()) + " references");
  std::vector<std::vector<std::string>> hyps, refs;
  std::vector<Index> hyp_len, ref_len;
  double iterations = 0.0, seconds = 0.0, source_tokens = 0.0;
  bool timed = true;
  for (std::size_t i = 0; i < hyp_rows.size(); ++i) {
    const auto& h = hyp_rows[i];
    const auto& r = ref_rows[i];
    hyps.push_back(words(h.size() >= 2 ? h[1] : h[0]));
    refs.push_back(words(r.size() >= 2 ? r[1] : r[0]));
    hyp_len.push_back(static_cast<Index>(hyps.back().size()));
    ref_len.push_back(static_cast<Index>(refs.back().size()));
    if (h.size() >= 4) {
      try {
        iterations += std::stod(h[2]);
        seconds += std::stod(h[3]);
      } catch (const std::exception&) {
        throw DataError(hyp_file + ":" + std::to_string(i + 1) + ": bad iterations or seconds column");
      }
      source_tokens += static_cast<double>(words(h[0]).size());
    } else {
      timed = false;
    }
  }
  EvalReport report;
  report.sentences = static_cast<std::int64_t>(hyps.size());
  report.bleu = corpus_bleu<std::vector<std::string>>(hyps, refs);
  if (timed && !hyps.empty()) {
    report.mean_iterations = iterations / static_cast<double>(hyps.size());
    report.tokens_per_second = seconds > 0.0 ? source_tokens / seconds : 0.0;
  }
  const LengthAccuracy acc = length_accuracy(hyp_len, ref_len);
  report.length_exact_pct = acc.exact_pct;
  report.length_within5_pct = acc.within5_pct;
  return report;
}

std::size_t AblationGrid::rows() const {
  std::size_t n = axes.empty() ? 0 : 1;
  for (const auto& [key, values] : axes) n *= values.size();
  return n;
}

AblationGrid parse_grid(const std::string& spec) {
  static const std::set<std::string> allowed{"i_train", "p_dae", "distill", "approx"};
  AblationGrid grid;
  std::set<std::string> seen;
  std::string item;
  std::istringstream in(spec);
  while (std::getline(in, item, ';')) {
    const auto w = words(item);
    if (w.empty()) continue;
    const std::string entry = join_tokens(w);
    const auto eq = entry.find('=');
    if (eq == std::string::npos) throw UsageError("ablate: grid entry '" + entry + "' lacks '='");
    const std::string key = entry.substr(0, eq);
    if (!allowed.count(key)) throw UsageError("ablate: unknown grid key '" + key + "'");
    if (!seen.insert(key).second) throw UsageError("ablate: grid key '" + key + "' given twice");
    std::vector<std::string> values;
    std::string v;
    std::istringstream vs(entry.substr(eq + 1));
    while (std::getline(vs, v, ',')) {
      if (v.empty()) throw UsageError("ablate: ragged grid, empty value for '" + key + "'");
      values.push_back(v);
    }
    if (values.empty()) throw UsageError("ablate: ragged grid, no values for '" + key + "'");
    grid.axes.emplace_back(key, std::move(values));
  }
  if (grid.axes.empty()) throw UsageError("ablate: empty grid");
  return grid;
}

AblationGrid default_ablation_grid() { return parse_grid("i_train=1,2,4;p_dae=0,0.5,1;distill=false,true"); }

std::vector<AblationRow> cmd_ablate(RunConfig cfg, const AblationGrid& grid, const std::string& out_dir) {
  if (grid.axes.empty()) throw UsageError("ablate: empty grid");
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  const std::size_t n_rows = grid.rows();

  std::vector<std::vector<std::string>> combos(n_rows);
  for (std::size_t r = 0; r < n_rows; ++r) {
    std::size_t rest = r;
    for (std::size_t a = grid.axes.size(); a-- > 0;) {
      const auto& values = grid.axes[a].second;
      combos[r].insert(combos[r].begin(), values[rest % values.size()]);
      rest /= values.size();
    }
  }

  bool any_distill = false;
  for (const auto& combo : combos) {
    RunConfig probe = cfg;
    for (std::size_t a = 0; a < grid.axes.size(); ++a) probe.set(grid.axes[a].first, combo[a]);
    any_distill = any_distill || probe.train.distill;
  }
  if (any_distill && cfg.teacher.empty()) {
    RunConfig t = cfg;
    t.mode = TrainMode::ArTeacher;
    t.train.distill = false;
    t.resume = false;
    t.checkpoint = (dir / "teacher.ckpt").string();
    t.log.clear();
    cmd_train(t);
    cfg.teacher = t.checkpoint;
  }

  const std::string dev = (fs::path(cfg.data_dir) / "dev.tsv").string();
  std::vector<AblationRow> rows;
  for (std::size_t r = 0; r < n_rows; ++r) {
    RunConfig rc = cfg;
    rc.mode = TrainMode::Nar;
    rc.resume = false;
    for (std::size_t a = 0; a < grid.axes.size(); ++a) rc.set(grid.axes[a].first, combos[r][a]);
    const std::string stem = (dir / ("row" + std::to_string(r))).string();
    rc.checkpoint = stem + ".ckpt";
    rc.log.clear();
    cmd_train(rc);

    AblationRow row;
    row.values = combos[r];
    for (const bool collapse : {false, true}) {
      DecodeRequest req;
      req.checkpoint = rc.checkpoint;
      req.input = dev;
      req.output = stem + (collapse ? ".norep.tsv" : ".rep.tsv");
      req.decode = rc.decode;
      req.decode.collapse_repetitions = collapse;
      cmd_decode(req);
      (collapse ? row.bleu_no_rep : row.bleu_rep) = cmd_eval(req.output, dev).bleu;
    }
    rows.push_back(row);
    std::ofstream table = open_output((dir / "ablation.tsv").string());
    table << format_ablation(grid, rows);
  }
  return rows;
}

std::string format_ablation(const AblationGrid& grid, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  for (const auto& [key, values] : grid.axes) os << key << '\t';
  os << "rep\tno_rep\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& row : rows) {
    for (const auto& v : row.values) os << v << '\t';
    os << row.bleu_rep << '\t' << row.bleu_no_rep << '\n';
  }
  return os.str();
}

void cmd_plot_data(const PlotRequest& req) {
  if (req.max_i_dec < 1 || req.latency_i_dec < 1) throw UsageError("plot-data: iteration counts must be >= 1");
  const TrainedModel nar = load_trained(req.checkpoint);
  if (nar.model.config().arch != Architecture::Refinement)
    throw UsageError("plot-data: --checkpoint must hold a refinement model");
  const Dataset input = load_dataset(req.input, nar.source_vocab, nar.target_vocab);
  fs::create_directories(req.out_dir);
  const fs::path dir(req.out_dir);

  std::ofstream bleu_out = open_output((dir / "bleu_vs_idec.csv").string());
  bleu_out << "i_dec,bleu\n";
  std::vector<TokenSequence> refs;
  for (const auto& p : input.pairs) refs.push_back(p.target);
  for (int i = 1; i <= req.max_i_dec; ++i) {
    DecodeConfig dc;
    dc.mode = DecodeMode::NarFixed;
    dc.i_dec = i;
    std::vector<TokenSequence> hyps;
    for (const auto& p : input.pairs) hyps.push_back(decode(nar.model, p.source, dc).output);
    bleu_out << i << ',' << corpus_bleu<TokenSequence>(hyps, refs) << '\n';
  }

  std::ofstream lat = open_output((dir / "latency.csv").string());
  lat << "mode,length,seconds,iterations\n";
  auto emit = [&](const Model& model, const DecodeConfig& dc, const std::string& label) {
    const EfficiencyReport rep = measure_efficiency(
        [&](const TokenSequence& src) {
          const RefinementTrace t = decode(model, src, dc);
          return TimedDecode{t.output, t.iterations_used};
        },
        input);
    for (const auto& s : rep.samples) lat << label << ',' << s.length << ',' << s.seconds << ',' << s.iterations << '\n';
  };
  DecodeConfig fixed;
  fixed.mode = DecodeMode::NarFixed;
  fixed.i_dec = req.latency_i_dec;
  emit(nar.model, fixed, "nar_fixed_" + std::to_string(req.latency_i_dec));
  DecodeConfig adaptive;
  adaptive.mode = DecodeMode::NarAdaptive;
  emit(nar.model, adaptive, "nar_adaptive");
  if (!req.ar_checkpoint.empty()) {
    const TrainedModel ar = load_trained(req.ar_checkpoint);
    if (ar.model.config().arch != Architecture::Autoregressive)
      throw UsageError("plot-data: --ar-checkpoint must hold an autoregressive model");
    DecodeConfig greedy;
    greedy.mode = DecodeMode::ArGreedy;
    emit(ar.model, greedy, "ar_greedy");
    DecodeConfig beam;
    beam.mode = DecodeMode::ArBeam;
    beam.beam = 4;
    emit(ar.model, beam, "ar_beam4");
  }
}

}  // namespace refine
