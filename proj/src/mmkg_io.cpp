#include <algorithm>
#include <bit>
#include <limits>
#include <numeric>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "ibmea/mmkg.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ibmea {

namespace {

std::string where(const fs::path& path, long line) {
  return path.string() + ":" + std::to_string(line);
}

std::ifstream open_in(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  return out;
}

/// Parses a line of exactly `expected` non-negative integers. Blank lines yield false.
bool parse_ints(const std::string& line, int expected, std::vector<int>& out,
                const fs::path& path, long lineno) {
  out.clear();
  const char* p = line.data();
  const char* end = p + line.size();
  auto skip_ws = [&] {
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
  };
  skip_ws();
  if (p == end) return false;
  while (p < end) {
    long long v = 0;
    auto [next, ec] = std::from_chars(p, end, v);
    if (ec != std::errc() || (next < end && *next != ' ' && *next != '\t' && *next != '\r'))
      throw ParseError(where(path, lineno) + ": expected non-negative integers");
    if (v < 0 || v > std::numeric_limits<int>::max())
      throw ParseError(where(path, lineno) + ": id out of range");
    out.push_back(static_cast<int>(v));
    p = next;
    skip_ws();
  }
  if (static_cast<int>(out.size()) != expected)
    throw ParseError(where(path, lineno) + ": expected " + std::to_string(expected) +
                     " fields, got " + std::to_string(out.size()));
  return true;
}

template <typename Fn>
void for_each_record(const fs::path& path, int fields, Fn&& fn) {
  auto in = open_in(path);
  std::string line;
  std::vector<int> vals;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (parse_ints(line, fields, vals, path, lineno)) fn(vals, lineno);
  }
}

void write_f32_le(std::ostream& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

float read_f32_le(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, sizeof bits);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

json read_json(const fs::path& path) {
  auto in = open_in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::ios_base::failure("write failed: " + path.string());
}

}  // namespace

MMKG load_mmkg(const fs::path& triples_path, const fs::path& attrs_path,
               const fs::path& img_feats_path, const std::optional<KgShape>& declared) {
  MMKG kg;
  int max_entity = -1, max_rel = -1, max_attr = -1;
  auto check_entity = [&](int e, const fs::path& p, long line) {
    if (declared && e >= declared->num_entities)
      throw ValidationError(where(p, line) + ": entity " + std::to_string(e) +
                            " outside declared range");
    max_entity = std::max(max_entity, e);
  };

  for_each_record(triples_path, 3, [&](const std::vector<int>& v, long line) {
    check_entity(v[0], triples_path, line);
    check_entity(v[2], triples_path, line);
    if (declared && v[1] >= declared->relation_vocab_size)
      throw ValidationError(where(triples_path, line) + ": relation outside declared range");
    max_rel = std::max(max_rel, v[1]);
    kg.triples.push_back({v[0], v[1], v[2]});
  });

  std::vector<std::pair<int, int>> assignments;
  for_each_record(attrs_path, 2, [&](const std::vector<int>& v, long line) {
    check_entity(v[0], attrs_path, line);
    if (declared && v[1] >= declared->attribute_vocab_size)
      throw ValidationError(where(attrs_path, line) + ": attribute outside declared range");
    max_attr = std::max(max_attr, v[1]);
    assignments.emplace_back(v[0], v[1]);
  });

  std::vector<int> img_entities;
  std::vector<float> img_values;
  int dim = 0;
  if (!img_feats_path.empty()) {
    fs::path sidecar = img_feats_path;
    sidecar.replace_extension(".json");
    const json index = read_json(sidecar);
    try {
      dim = index.at("dim").get<int>();
      img_entities = index.at("entities").get<std::vector<int>>();
    } catch (const json::exception& e) {
      throw ParseError(sidecar.string() + ": " + e.what());
    }
    if (dim < 0) throw ValidationError(sidecar.string() + ": negative dim");
    for (int e : img_entities) {
      if (e < 0) throw ValidationError(sidecar.string() + ": negative entity id");
      check_entity(e, sidecar, 0);
    }
    auto in = open_in(img_feats_path, std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t expected = img_entities.size() * static_cast<std::size_t>(dim) * 4;
    if (blob.size() != expected)
      throw ValidationError(img_feats_path.string() + ": blob holds " +
                            std::to_string(blob.size()) + " bytes, index implies " +
                            std::to_string(expected) + " (dimension mismatch)");
    img_values.resize(blob.size() / 4);
    for (std::size_t i = 0; i < img_values.size(); ++i) img_values[i] = read_f32_le(blob.data() + 4 * i);
  }

  kg.num_entities = declared ? declared->num_entities : max_entity + 1;
  kg.relation_vocab_size = declared ? declared->relation_vocab_size : max_rel + 1;
  kg.attribute_vocab_size = declared ? declared->attribute_vocab_size : max_attr + 1;
  kg.attributes.assign(kg.num_entities, {});
  for (auto [e, a] : assignments) kg.attributes[e].push_back(a);
  for (auto& a : kg.attributes) std::sort(a.begin(), a.end());

  kg.image_dim = dim;
  std::vector<std::size_t> order(img_entities.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return img_entities[a] < img_entities[b]; });
  kg.image_features.resize(static_cast<Index>(img_entities.size()), dim);
  for (std::size_t r = 0; r < order.size(); ++r) {
    kg.image_entities.push_back(img_entities[order[r]]);
    for (int c = 0; c < dim; ++c)
      kg.image_features(static_cast<Index>(r), c) = img_values[order[r] * dim + c];
  }
  if (std::adjacent_find(kg.image_entities.begin(), kg.image_entities.end()) !=
      kg.image_entities.end())
    throw ValidationError("image index lists an entity twice");
  kg.validate();
  return kg;
}

MMKG load_mmkg(const fs::path& dir) {
  std::optional<KgShape> shape;
  if (fs::exists(dir / files::kMeta)) {
    const json meta = read_json(dir / files::kMeta);
    try {
      shape = KgShape{meta.at("num_entities").get<int>(), meta.at("relation_vocab_size").get<int>(),
                      meta.at("attribute_vocab_size").get<int>()};
    } catch (const json::exception& e) {
      throw ParseError((dir / files::kMeta).string() + ": " + e.what());
    }
  }
  const fs::path img = dir / files::kImages;
  return load_mmkg(dir / files::kTriples, dir / files::kAttributes,
                   fs::exists(img) ? img : fs::path{}, shape);
}

void save_mmkg(const MMKG& kg, const fs::path& dir) {
  kg.validate();
  fs::create_directories(dir);
  {
    auto out = open_out(dir / files::kTriples);
    for (const auto& t : kg.triples) out << t.head << ' ' << t.relation << ' ' << t.tail << '\n';
    if (!out) throw std::ios_base::failure("write failed: triples");
  }
  {
    auto out = open_out(dir / files::kAttributes);
    for (int e = 0; e < kg.num_entities; ++e)
      for (int a : kg.attributes[e]) out << e << ' ' << a << '\n';
    if (!out) throw std::ios_base::failure("write failed: attributes");
  }
  {
    auto out = open_out(dir / files::kImages, std::ios::binary);
    for (Index r = 0; r < kg.image_features.rows(); ++r)
      for (Index c = 0; c < kg.image_features.cols(); ++c) write_f32_le(out, kg.image_features(r, c));
    if (!out) throw std::ios_base::failure("write failed: images");
  }
  write_json({{"dim", kg.image_dim}, {"entities", kg.image_entities}}, dir / files::kImageIndex);
  write_json({{"num_entities", kg.num_entities},
              {"relation_vocab_size", kg.relation_vocab_size},
              {"attribute_vocab_size", kg.attribute_vocab_size}},
             dir / files::kMeta);
}

std::vector<EntityPair> load_alignment(const fs::path& path) {
  std::vector<EntityPair> pairs;
  for_each_record(path, 2, [&](const std::vector<int>& v, long) { pairs.emplace_back(v[0], v[1]); });
  return pairs;
}

void save_alignment(std::span<const EntityPair> pairs, const fs::path& path) {
  auto out = open_out(path);
  for (auto [a, b] : pairs) out << a << ' ' << b << '\n';
  if (!out) throw std::ios_base::failure("write failed: " + path.string());
}

void save_task(const AlignmentTask& task, const fs::path& dir) {
  task.validate();
  fs::create_directories(dir);
  save_mmkg(task.kg1, dir / "kg1");
  save_mmkg(task.kg2, dir / "kg2");
  save_alignment(task.train_pairs, dir / files::kTrain);
  save_alignment(task.test_pairs, dir / files::kTest);
  write_json({{"seed_ratio", task.seed_ratio}}, dir / files::kTask);
}

AlignmentTask load_task(const fs::path& dir) {
  AlignmentTask task;
  task.kg1 = load_mmkg(dir / "kg1");
  task.kg2 = load_mmkg(dir / "kg2");
  task.train_pairs = load_alignment(dir / files::kTrain);
  task.test_pairs = load_alignment(dir / files::kTest);
  const double total = static_cast<double>(task.train_pairs.size() + task.test_pairs.size());
  if (fs::exists(dir / files::kTask)) {
    try {
      task.seed_ratio = read_json(dir / files::kTask).at("seed_ratio").get<double>();
    } catch (const json::exception& e) {
      throw ParseError((dir / files::kTask).string() + ": " + e.what());
    }
  } else if (total > 0) {
    task.seed_ratio = static_cast<double>(task.train_pairs.size()) / total;
  }
  task.validate();
  return task;
}

}  // namespace ibmea
