#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "finerec/error.hpp"
#include "finerec/model.hpp"

namespace finerec {

// Layout:
//   "FINERECK" | u8 version (1) | u32 header length | header JSON
//   | u32 block count | per block: u32 name length, name, u64 rows, u64 cols,
//     rows*cols f64 (row-major)
// All integers and floats are little-endian.
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

inline constexpr char kCheckpointMagic[8] = {'F', 'I', 'N', 'E', 'R', 'E', 'C', 'K'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  // Free-form extras (seed, epoch, validation metric) carried in the header.
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

namespace detail {

template <typename T>
void put(std::ostream& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& source) {
  char buf[sizeof(T)];
  if (!in.read(buf, sizeof(T))) throw ParseError(source, 0, "truncated checkpoint");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline std::string checkpoint_header(const Checkpoint& ck) {
  nlohmann::ordered_json h;
  h["model"] = to_json(ck.config);
  h["num_users"] = ck.params.num_users();
  h["num_items"] = ck.params.num_items();
  h["meta"] = ck.meta;
  return h.dump();
}

// Writes to a temporary file then renames, so an interrupted write never
// clobbers the previous checkpoint.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<std::uint8_t>(out, kCheckpointVersion);
    const auto header = checkpoint_header(ck);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::vector<std::pair<std::string, const Matrix*>> blocks;
    ck.params.for_each_block(
        [&](const std::string& name, const Matrix& m) { blocks.emplace_back(name, &m); });
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(blocks.size()));
    for (const auto& [name, m] : blocks) {
      detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(m->rows()));
      detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(m->cols()));
      out.write(reinterpret_cast<const char*>(m->data()),
                static_cast<std::streamsize>(m->size() * sizeof(double)));
    }
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// Reads a checkpoint and checks every block against the shapes implied by
// the stored config.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string source = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + source);
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw ParseError(source, 0, "not a checkpoint (bad magic)");
  }
  const auto version = detail::get<std::uint8_t>(in, source);
  if (version != kCheckpointVersion) {
    throw ParseError(source, 0, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = detail::get<std::uint32_t>(in, source);
  std::string header(header_len, '\0');
  if (!in.read(header.data(), header_len)) throw ParseError(source, 0, "truncated header");
  Checkpoint ck;
  std::size_t num_users = 0, num_items = 0;
  try {
    auto h = nlohmann::ordered_json::parse(header);
    update_from_json(ck.config, h.at("model"));
    num_users = h.at("num_users").get<std::size_t>();
    num_items = h.at("num_items").get<std::size_t>();
    if (h.contains("meta")) ck.meta = h["meta"];
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source, 0, std::string("bad header: ") + e.what());
  }
  ck.config.validate();

  const auto G = ck.config.num_graphs();
  const auto gd = ck.config.graph_dim();
  const auto D = ck.config.fused_dim();
  std::map<std::string, std::pair<std::size_t, std::size_t>> expected;
  for (std::size_t n = 0; n < G; ++n) {
    expected["user_emb." + std::to_string(n)] = {num_users, gd};
    expected["item_emb." + std::to_string(n)] = {num_items, gd};
  }
  expected["attr_vec"] = {G, gd};
  for (const char* w : {"W1", "W2", "W3", "W4"}) expected[w] = {D, D};
  expected["fusion_bias"] = {1, D};

  std::map<std::string, Matrix> loaded;
  const auto count = detail::get<std::uint32_t>(in, source);
  for (std::uint32_t b = 0; b < count; ++b) {
    const auto name_len = detail::get<std::uint32_t>(in, source);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw ParseError(source, 0, "truncated block name");
    const auto rows = detail::get<std::uint64_t>(in, source);
    const auto cols = detail::get<std::uint64_t>(in, source);
    auto it = expected.find(name);
    if (it == expected.end()) throw ShapeError(source + ": unexpected parameter block '" + name + "'");
    if (it->second.first != rows || it->second.second != cols) {
      throw ShapeError(source + ": block '" + name + "' is " + std::to_string(rows) + "x" +
                       std::to_string(cols) + ", config implies " +
                       std::to_string(it->second.first) + "x" + std::to_string(it->second.second));
    }
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    if (!in.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(rows * cols * sizeof(double)))) {
      throw ParseError(source, 0, "truncated data in block '" + name + "'");
    }
    loaded.emplace(name, std::move(m));
  }
  for (const auto& [name, shape] : expected) {
    if (!loaded.count(name)) throw ShapeError(source + ": missing parameter block '" + name + "'");
  }
  for (std::size_t n = 0; n < G; ++n) {
    ck.params.user_emb.push_back(std::move(loaded["user_emb." + std::to_string(n)]));
    ck.params.item_emb.push_back(std::move(loaded["item_emb." + std::to_string(n)]));
  }
  ck.params.attr_vec = std::move(loaded["attr_vec"]);
  ck.params.w1 = std::move(loaded["W1"]);
  ck.params.w2 = std::move(loaded["W2"]);
  ck.params.w3 = std::move(loaded["W3"]);
  ck.params.w4 = std::move(loaded["W4"]);
  ck.params.fusion_bias = std::move(loaded["fusion_bias"]);
  return ck;
}

}  // namespace finerec
