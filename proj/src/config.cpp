#include "refine/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace refine {

namespace {

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto r = std::from_chars(first, last, out);
  if (r.ec != std::errc{} || r.ptr != last || value.empty())
    throw UsageError("config: bad value '" + value + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw UsageError("config: bad boolean '" + value + "' for " + key);
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

#define NUM_FIELD(expr, T)                                                                            \
  Field {                                                                                             \
    [](RunConfig& c, const std::string& v) { c.expr = static_cast<decltype(c.expr)>(parse_number<T>(#expr, v)); }, \
        [](const RunConfig& c) {                                                                      \
          if constexpr (std::is_floating_point_v<T>) return format_double(c.expr);                    \
          else return std::to_string(c.expr);                                                         \
        }                                                                                             \
  }

#define BOOL_FIELD(expr)                                                                 \
  Field {                                                                                \
    [](RunConfig& c, const std::string& v) { c.expr = parse_bool(#expr, v); },           \
        [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); }        \
  }

#define STRING_FIELD(expr)                                                    \
  Field {                                                                     \
    [](RunConfig& c, const std::string& v) { c.expr = v; },                   \
        [](const RunConfig& c) { return c.expr; }                             \
  }

const std::vector<std::pair<std::string, Field>>& field_table() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"mode",
       {[](RunConfig& c, const std::string& v) {
          if (v == "nar") c.mode = TrainMode::Nar;
          else if (v == "ar_teacher" || v == "ar") c.mode = TrainMode::ArTeacher;
          else throw UsageError("config: mode must be nar or ar_teacher, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(c.mode == TrainMode::Nar ? "nar" : "ar_teacher"); }}},
      {"data", STRING_FIELD(data_dir)},
      {"checkpoint", STRING_FIELD(checkpoint)},
      {"teacher", STRING_FIELD(teacher)},
      {"log", STRING_FIELD(log)},
      {"seed", NUM_FIELD(seed, std::uint64_t)},
      {"resume", BOOL_FIELD(resume)},
      {"distill_beam", NUM_FIELD(distill_beam, int)},
      {"d_model", NUM_FIELD(model.d_model, Index)},
      {"d_hidden", NUM_FIELD(model.d_hidden, Index)},
      {"n_layers", NUM_FIELD(model.n_layers, Index)},
      {"n_heads", NUM_FIELD(model.n_heads, Index)},
      {"max_len", NUM_FIELD(model.max_len, Index)},
      {"max_len_offset", NUM_FIELD(model.max_len_offset, Index)},
      {"dropout", NUM_FIELD(model.dropout, double)},
      {"i_train", NUM_FIELD(train.i_train, int)},
      {"p_dae", NUM_FIELD(train.p_dae, double)},
      {"approx",
       {[](RunConfig& c, const std::string& v) {
          try {
            c.train.approximation = approximation_from_string(v);
          } catch (const std::exception& e) {
            throw UsageError(std::string("config: ") + e.what());
          }
        },
        [](const RunConfig& c) { return to_string(c.train.approximation); }}},
      {"beta", NUM_FIELD(train.beta, double)},
      {"distill", BOOL_FIELD(train.distill)},
      {"lr_schedule",
       {[](RunConfig& c, const std::string& v) {
          if (v == "linear") c.train.schedule.kind = LrSchedule::Kind::Linear;
          else if (v == "warmup") c.train.schedule.kind = LrSchedule::Kind::Warmup;
          else throw UsageError("config: lr_schedule must be linear or warmup, got '" + v + "'");
        },
        [](const RunConfig& c) {
          return std::string(c.train.schedule.kind == LrSchedule::Kind::Linear ? "linear" : "warmup");
        }}},
      {"lr_start", NUM_FIELD(train.schedule.start, double)},
      {"lr_end", NUM_FIELD(train.schedule.end, double)},
      {"lr_total_steps", NUM_FIELD(train.schedule.total_steps, Index)},
      {"warmup_steps", NUM_FIELD(train.schedule.warmup_steps, Index)},
      {"batch_tokens", NUM_FIELD(train.batch_tokens, Index)},
      {"epochs", NUM_FIELD(train.epochs, int)},
      {"train_length_head", BOOL_FIELD(train.train_length_head)},
      {"dev_limit", NUM_FIELD(train.dev_limit, std::size_t)},
      {"i_dec", NUM_FIELD(decode.i_dec, int)},
      {"adaptive",
       {[](RunConfig& c, const std::string& v) {
          c.decode.mode = parse_bool("adaptive", v) ? DecodeMode::NarAdaptive : DecodeMode::NarFixed;
        },
        [](const RunConfig& c) {
          return std::string(c.decode.mode == DecodeMode::NarAdaptive ? "true" : "false");
        }}},
      {"epsilon", NUM_FIELD(decode.epsilon, double)},
      {"max_iters", NUM_FIELD(decode.max_iters, int)},
      {"stop_criterion",
       {[](RunConfig& c, const std::string& v) {
          if (v == "jaccard") c.decode.criterion = StopCriterion::Jaccard;
          else if (v == "logprob_delta") c.decode.criterion = StopCriterion::LogProbDelta;
          else throw UsageError("config: stop_criterion must be jaccard or logprob_delta, got '" + v + "'");
        },
        [](const RunConfig& c) {
          return std::string(c.decode.criterion == StopCriterion::Jaccard ? "jaccard" : "logprob_delta");
        }}},
      {"beam", NUM_FIELD(decode.beam, int)},
      {"ref_length", BOOL_FIELD(decode.use_reference_length)},
      {"collapse", BOOL_FIELD(decode.collapse_repetitions)},
  };
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& [k, f] : field_table())
    if (k == key) return f;
  throw UsageError("config: unknown key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
  decode.mode = DecodeMode::NarFixed;
  decode.beam = 1;
  train.schedule.total_steps = 0;  // 0: derived from the data at train time
}

void RunConfig::set(const std::string& key, const std::string& value) { find_field(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return find_field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [k, f] : field_table()) out.push_back(k);
    return out;
  }();
  return names;
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config: " + path + ":" + std::to_string(lineno) + ": expected key=value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& key : keys()) out += key + "=" + get(key) + "\n";
  return out;
}

void RunConfig::finalize() {
  train.seed = seed;
  if (log.empty()) log = checkpoint + ".log";
  try {
    model.validate();
    train.validate();
    decode.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (distill_beam < 1) throw UsageError("config: distill_beam must be >= 1");
}

std::string flag_for_key(const std::string& key) {
  std::string out = key;
  for (char& c : out)
    if (c == '_') c = '-';
  return out;
}

}  // namespace refine
