#include "refine/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

namespace refine {

namespace {

constexpr const char* kFormatName = "refine-checkpoint";

struct ArrayEntry {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  std::uint64_t offset = 0;
};

std::string format_scalar(Scalar v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void append_le(std::string& out, const Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(m.data()[i]);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    char buf[8];
    std::memcpy(buf, &bits, 8);
    out.append(buf, 8);
  }
}

void read_le(const char* src, Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, src + 8 * i, 8);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    m.data()[i] = std::bit_cast<Scalar>(bits);
  }
}

template <typename T>
T parse_number(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("checkpoint: missing field '" + key + "'");
  std::istringstream is(it->second);
  T v{};
  if (!(is >> v) || !is.eof()) throw CheckpointError("checkpoint: malformed field '" + key + "' = " + it->second);
  return v;
}

}  // namespace

std::string serialize_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "arch=" << to_string(c.arch) << "\n"
     << "d_model=" << c.d_model << "\n"
     << "d_hidden=" << c.d_hidden << "\n"
     << "n_layers=" << c.n_layers << "\n"
     << "n_heads=" << c.n_heads << "\n"
     << "vocab_src=" << c.vocab_src << "\n"
     << "vocab_tgt=" << c.vocab_tgt << "\n"
     << "max_len=" << c.max_len << "\n"
     << "max_len_offset=" << c.max_len_offset << "\n"
     << "dropout=" << format_scalar(c.dropout) << "\n";
  return os.str();
}

void save_checkpoint(const Model& model, const std::string& path, const std::map<std::string, std::string>& metadata,
                     const TrainingState* state) {
  const auto& ps = model.parameters();
  std::vector<std::pair<std::string, const Matrix*>> arrays;
  for (std::size_t i = 0; i < ps.size(); ++i) arrays.emplace_back("param/" + ps.names()[i], &ps.tensors()[i].value());
  if (state != nullptr) {
    if (state->adam.m.size() != ps.size() || state->adam.v.size() != ps.size())
      throw CheckpointError("checkpoint: optimizer state does not match parameter count");
    for (std::size_t i = 0; i < ps.size(); ++i) arrays.emplace_back("adam.m/" + ps.names()[i], &state->adam.m[i]);
    for (std::size_t i = 0; i < ps.size(); ++i) arrays.emplace_back("adam.v/" + ps.names()[i], &state->adam.v[i]);
  }

  std::ostringstream header;
  header << "format=" << kFormatName << "\n"
         << "version=" << kCheckpointVersion << "\n"
         << serialize_config(model.config());
  for (const auto& [k, v] : metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw CheckpointError("checkpoint: metadata key/value may not contain '=' or newlines: " + k);
    header << "meta." << k << "=" << v << "\n";
  }
  if (state != nullptr) {
    header << "state.epoch=" << state->epoch << "\n"
           << "state.adam_step=" << state->adam.step << "\n"
           << "state.adam_beta1=" << format_scalar(state->adam.beta1) << "\n"
           << "state.adam_beta2=" << format_scalar(state->adam.beta2) << "\n"
           << "state.adam_epsilon=" << format_scalar(state->adam.epsilon) << "\n";
  }
  std::uint64_t offset = 0;
  for (const auto& [name, m] : arrays) {
    header << "array=" << name << " " << m->rows() << " " << m->cols() << " " << offset << "\n";
    offset += 8 * static_cast<std::uint64_t>(m->size());
  }
  header << "\n";

  std::string payload;
  payload.reserve(offset);
  for (const auto& entry : arrays) append_le(payload, *entry.second);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");

  std::map<std::string, std::string> kv;
  std::map<std::string, std::string> metadata;
  std::vector<ArrayEntry> manifest;
  std::string line;
  bool header_done = false;
  while (std::getline(in, line)) {
    if (line.empty()) {
      header_done = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("checkpoint: malformed header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "array") {
      std::istringstream is(value);
      ArrayEntry e;
      if (!(is >> e.name >> e.rows >> e.cols >> e.offset))
        throw CheckpointError("checkpoint: malformed array entry '" + value + "'");
      manifest.push_back(std::move(e));
    } else if (key.rfind("meta.", 0) == 0) {
      metadata[key.substr(5)] = value;
    } else {
      kv[key] = value;
    }
  }
  if (!header_done) throw CheckpointError("checkpoint: truncated header in '" + path + "'");
  if (kv["format"] != kFormatName) throw CheckpointError("checkpoint: field 'format' is not " + std::string(kFormatName));
  const int version = parse_number<int>(kv, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: field 'version' = " + std::to_string(version) + " is not supported");

  ModelConfig config;
  try {
    config.arch = architecture_from_string(kv["arch"]);
  } catch (const std::invalid_argument&) {
    throw CheckpointError("checkpoint: field 'arch' has unknown value '" + kv["arch"] + "'");
  }
  config.d_model = parse_number<Index>(kv, "d_model");
  config.d_hidden = parse_number<Index>(kv, "d_hidden");
  config.n_layers = parse_number<Index>(kv, "n_layers");
  config.n_heads = parse_number<Index>(kv, "n_heads");
  config.vocab_src = parse_number<Index>(kv, "vocab_src");
  config.vocab_tgt = parse_number<Index>(kv, "vocab_tgt");
  config.max_len = parse_number<Index>(kv, "max_len");
  config.max_len_offset = parse_number<Index>(kv, "max_len_offset");
  config.dropout = parse_number<Scalar>(kv, "dropout");
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }

  Model model(config, 0);
  const auto& names = model.parameters().names();
  const bool has_state = kv.count("state.epoch") != 0;
  const std::size_t expected = names.size() * (has_state ? 3 : 1);
  if (manifest.size() != expected)
    throw CheckpointError("checkpoint: manifest lists " + std::to_string(manifest.size()) + " arrays, expected " +
                          std::to_string(expected));

  std::vector<Matrix> arrays;
  arrays.reserve(manifest.size());
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& e = manifest[i];
    const std::size_t pi = i % names.size();
    const char* prefix = i < names.size() ? "param/" : (i < 2 * names.size() ? "adam.m/" : "adam.v/");
    const std::string want = prefix + names[pi];
    if (e.name != want) throw CheckpointError("checkpoint: manifest entry '" + e.name + "', expected '" + want + "'");
    const Tensor& p = model.parameters().tensors()[pi];
    if (e.rows != p.rows() || e.cols != p.cols())
      throw CheckpointError("checkpoint: array '" + e.name + "' has shape " + shape_string(e.rows, e.cols) +
                            ", expected " + shape_string(p.rows(), p.cols()));
    if (e.offset != offset) throw CheckpointError("checkpoint: array '" + e.name + "' has inconsistent offset");
    offset += 8 * static_cast<std::uint64_t>(e.rows * e.cols);
    arrays.emplace_back(e.rows, e.cols);
  }

  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (payload.size() != offset)
    throw CheckpointError("checkpoint: payload holds " + std::to_string(payload.size()) + " bytes, manifest needs " +
                          std::to_string(offset));
  for (std::size_t i = 0; i < manifest.size(); ++i) read_le(payload.data() + manifest[i].offset, arrays[i]);

  auto& tensors = model.parameters().tensors();
  for (std::size_t i = 0; i < names.size(); ++i) tensors[i].mutable_value() = std::move(arrays[i]);

  const std::size_t n = names.size();
  LoadedCheckpoint result{std::move(model), std::move(metadata), std::nullopt};
  if (has_state) {
    TrainingState st;
    st.epoch = parse_number<std::int64_t>(kv, "state.epoch");
    st.adam.step = parse_number<std::int64_t>(kv, "state.adam_step");
    st.adam.beta1 = parse_number<Scalar>(kv, "state.adam_beta1");
    st.adam.beta2 = parse_number<Scalar>(kv, "state.adam_beta2");
    st.adam.epsilon = parse_number<Scalar>(kv, "state.adam_epsilon");
    for (std::size_t i = 0; i < n; ++i) st.adam.m.push_back(std::move(arrays[n + i]));
    for (std::size_t i = 0; i < n; ++i) st.adam.v.push_back(std::move(arrays[2 * n + i]));
    result.state = std::move(st);
  }
  return result;
}

}  // namespace refine
