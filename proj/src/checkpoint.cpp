#include <bit>
#include <cstring>
#include <map>

#include "ibmea/digest.hpp"
#include "ibmea/training.hpp"

namespace ibmea {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'I', 'B', 'M', 'E', 'A', 'C', 'K', '1'};
constexpr const char* kParamsFile = "params.bin";
constexpr const char* kManifestFile = "manifest.json";

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw ValidationError("checkpoint tensor archive is truncated");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

std::string encode_tensors(const std::vector<std::pair<std::string, const Matrix*>>& tensors) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, m] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m->rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m->cols()));
    out.append(reinterpret_cast<const char*>(m->data()), sizeof(double) * static_cast<std::size_t>(m->size()));
  }
  return out;
}

std::map<std::string, Matrix> decode_tensors(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
    throw ValidationError("not a checkpoint tensor archive");
  const auto count = r.get<std::uint64_t>();
  std::map<std::string, Matrix> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.bytes(len);
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (rows > (1u << 30) || cols > (1u << 30)) throw ValidationError("implausible tensor shape");
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    const std::string data = r.bytes(sizeof(double) * rows * cols);
    std::memcpy(m.data(), data.data(), data.size());
    if (!out.emplace(std::move(name), std::move(m)).second)
      throw ValidationError("duplicate tensor in checkpoint");
  }
  if (!r.done()) throw ValidationError("trailing bytes in checkpoint tensor archive");
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const TrainState& state, const TrainConfig& cfg) {
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  visit_model_params(
      [&](const std::string& name, const Matrix& p, const Matrix& m, const Matrix& v) {
        tensors.emplace_back("param/" + name, &p);
        tensors.emplace_back("adam_m/" + name, &m);
        tensors.emplace_back("adam_v/" + name, &v);
      },
      state.params, state.adam_m, state.adam_v);
  const std::string blob = encode_tensors(tensors);

  json pseudo = json::array(), mnn = json::array();
  for (const auto& p : state.pseudo_pairs) pseudo.push_back({p.e1, p.e2, p.confidence});
  for (auto [a, b] : state.previous_mnn) mnn.push_back({a, b});
  const json manifest = {
      {"format", 1},
      {"config", to_json(cfg)},
      {"input_dims",
       {{"d_v", state.input_dims.d_v}, {"d_a", state.input_dims.d_a}, {"d_r", state.input_dims.d_r}}},
      {"epoch", state.epoch},
      {"adam_step", state.adam_step},
      {"rng", {{"sampling", serialize_rng(state.sampling_rng)}, {"batch", serialize_rng(state.batch_rng)}}},
      {"pseudo_pairs", pseudo},
      {"previous_mnn", mnn},
      {"params_sha256", sha256_hex(blob)},
  };
  write_file_atomic(dir / kParamsFile, blob);
  write_file_atomic(dir / kManifestFile, manifest.dump(2) + "\n");
}

std::pair<TrainState, TrainConfig> load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / kManifestFile));
  } catch (const json::exception& e) {
    throw ValidationError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  const std::string blob = read_file(dir / kParamsFile);

  try {
    if (manifest.at("format").get<int>() != 1) throw ValidationError("unsupported checkpoint format");
    if (manifest.at("params_sha256").get<std::string>() != sha256_hex(blob))
      throw ValidationError("checkpoint tensors do not match the manifest checksum");
    TrainConfig cfg = config_from_json(manifest.at("config"), {}, true);

    TrainState s;
    const auto& dims = manifest.at("input_dims");
    s.input_dims = {dims.at("d_v").get<int>(), dims.at("d_a").get<int>(), dims.at("d_r").get<int>()};
    s.epoch = manifest.at("epoch").get<int>();
    s.adam_step = manifest.at("adam_step").get<long>();
    s.sampling_rng = deserialize_rng(manifest.at("rng").at("sampling").get<std::string>());
    s.batch_rng = deserialize_rng(manifest.at("rng").at("batch").get<std::string>());
    for (const auto& p : manifest.at("pseudo_pairs"))
      s.pseudo_pairs.push_back({p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<double>()});
    for (const auto& p : manifest.at("previous_mnn"))
      s.previous_mnn.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());

    auto tensors = decode_tensors(blob);
    Rng scratch(0);
    s.params = init_model_params(s.input_dims, cfg, scratch);
    s.adam_m = s.params;
    s.adam_v = s.params;
    // node feature tables are not part of init_model_params; their shapes come from the archive
    auto take = [&](const std::string& key, Matrix& dst, bool check_shape) {
      auto it = tensors.find(key);
      if (it == tensors.end()) throw ValidationError("checkpoint lacks tensor " + key);
      if (check_shape && (it->second.rows() != dst.rows() || it->second.cols() != dst.cols()))
        throw ValidationError("tensor " + key + " has an unexpected shape");
      dst = std::move(it->second);
      tensors.erase(it);
    };
    visit_model_params(
        [&](const std::string& name, Matrix& p, Matrix& m, Matrix& v) {
          const bool check = name.rfind("x_g.", 0) != 0;
          take("param/" + name, p, check);
          take("adam_m/" + name, m, check);
          take("adam_v/" + name, v, check);
          if (!check && (p.cols() != cfg.model.d_g || m.rows() != p.rows() || v.rows() != p.rows() ||
                         m.cols() != p.cols() || v.cols() != p.cols()))
            throw ValidationError("tensor " + name + " has an unexpected shape");
        },
        s.params, s.adam_m, s.adam_v);
    if (!tensors.empty()) throw ValidationError("checkpoint has unexpected tensor " + tensors.begin()->first);
    return {std::move(s), std::move(cfg)};
  } catch (const json::exception& e) {
    throw ValidationError("malformed checkpoint manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw ValidationError("checkpoint config is invalid: " + std::string(e.what()));
  }
}

}  // namespace ibmea
