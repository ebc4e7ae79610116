// SPDX-License-Identifier: Apache-2.0
/**
 * @file   checkpoint.hpp
 * @brief  Named-tensor model snapshots.
 *
 * Layout (text header, then raw payload):
 *
 *   RANKHIER-CHECKPOINT
 *   version 1
 *   config <n>
 *   key=value                         × n
 *   manifest <m>
 *   name<TAB>d0xd1…<TAB>offset<TAB>crc32  × m   (offset in floats)
 *   payload <total floats>
 *   <little-endian float32 values in manifest order>
 */
#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rankhier/encoders.hpp"

namespace rankhier {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char *kCheckpointMagic = "RANKHIER-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::vector<unsigned char> to_le_bytes(std::span<const float> values) {
  std::vector<unsigned char> out(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &values[i], 4);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return out;
}

inline float from_le_bytes(const unsigned char *p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= std::uint32_t(p[b]) << (8 * b);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline std::uint32_t crc32_of(const std::vector<unsigned char> &bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

inline std::size_t parse_size(const std::string &s, const std::string &key) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception &) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || s[0] == '-')
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

inline double parse_real(const std::string &s, const std::string &key) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception &) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

}  // namespace detail

/// Model configuration from its key-value form (see ModelConfig::to_kv).
inline ModelConfig model_config_from_kv(const ConfigMap &kv) {
  auto get = [&](const std::string &k) -> const std::string & {
    auto it = kv.find(k);
    if (it == kv.end()) throw ConfigError("missing config key '" + k + "'");
    return it->second;
  };
  ModelConfig c;
  c.kind = parse_model_kind(get("model"));
  c.vocab_size = detail::parse_size(get("vocab-size"), "vocab-size");
  c.embed_dim = detail::parse_size(get("embed-dim"), "embed-dim");
  c.hidden = detail::parse_size(get("hidden"), "hidden");
  c.chunk_hidden = detail::parse_size(get("chunk-hidden"), "chunk-hidden");
  c.memory_dim = detail::parse_size(get("memory-dim"), "memory-dim");
  c.clusters = detail::parse_size(get("clusters"), "clusters");
  c.ltc_side = parse_side(get("ltc-side"));
  c.embed_dropout = detail::parse_real(get("embed-dropout"), "embed-dropout");
  c.memory_dropout = detail::parse_real(get("memory-dropout"), "memory-dropout");
  return c;
}

/// Writes the model's parameters as float32 plus `extra` config entries
/// (model keys always come from the model itself).
template <typename T>
void save_checkpoint(const DualEncoder<T> &model, const std::string &path, ConfigMap extra = {}) {
  for (auto &[k, v] : model.config().to_kv()) extra[k] = v;
  std::ostringstream header;
  header << kCheckpointMagic << '\n' << "version " << kCheckpointVersion << '\n';
  header << "config " << extra.size() << '\n';
  for (const auto &[k, v] : extra) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw CheckpointError("config entry '" + k + "' cannot be stored");
    header << k << '=' << v << '\n';
  }
  const auto params = model.parameters();
  header << "manifest " << params.size() << '\n';
  std::vector<unsigned char> payload;
  std::size_t offset = 0;
  for (const auto *p : params) {
    std::vector<float> values(p->value.values().begin(), p->value.values().end());
    const auto bytes = detail::to_le_bytes(values);
    std::string shape;
    for (std::size_t i = 0; i < p->value.rank(); ++i)
      shape += (i ? "x" : "") + std::to_string(p->value.shape()[i]);
    if (shape.empty()) shape = "scalar";
    char crc[16];
    std::snprintf(crc, sizeof crc, "%08x", detail::crc32_of(bytes));
    header << p->name << '\t' << shape << '\t' << offset << '\t' << crc << '\n';
    payload.insert(payload.end(), bytes.begin(), bytes.end());
    offset += values.size();
  }
  header << "payload " << offset << '\n';
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path);
  const auto text = header.str();
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(reinterpret_cast<const char *>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!os) throw CheckpointError("failed writing checkpoint " + path);
}

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::uint32_t crc = 0;
};

struct CheckpointHeader {
  int version = 0;
  ConfigMap config;
  std::vector<ManifestEntry> manifest;
  std::size_t payload_floats = 0;
};

namespace detail {

inline std::string read_line(std::istream &is, const std::string &path) {
  std::string line;
  if (!std::getline(is, line)) throw CheckpointError(path + ": truncated header");
  return line;
}

inline std::size_t read_count(std::istream &is, const std::string &path, const std::string &tag) {
  const auto line = read_line(is, path);
  if (line.rfind(tag + " ", 0) != 0) throw CheckpointError(path + ": expected '" + tag + "' line");
  try {
    return parse_size(line.substr(tag.size() + 1), tag);
  } catch (const ConfigError &) {
    throw CheckpointError(path + ": bad '" + tag + "' line");
  }
}

}  // namespace detail

/// Parses the text header, leaving `is` at the first payload byte.
inline CheckpointHeader read_checkpoint_header(std::istream &is, const std::string &path) {
  CheckpointHeader h;
  if (detail::read_line(is, path) != kCheckpointMagic)
    throw CheckpointError(path + ": not a checkpoint file");
  const auto vline = detail::read_line(is, path);
  if (vline.rfind("version ", 0) != 0) throw CheckpointError(path + ": missing version tag");
  h.version = std::atoi(vline.c_str() + 8);
  if (h.version != kCheckpointVersion)
    throw CheckpointError(path + ": unsupported checkpoint version " + vline.substr(8) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto n_config = detail::read_count(is, path, "config");
  for (std::size_t i = 0; i < n_config; ++i) {
    const auto line = detail::read_line(is, path);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError(path + ": malformed config entry");
    h.config[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto n_params = detail::read_count(is, path, "manifest");
  for (std::size_t i = 0; i < n_params; ++i) {
    const auto f = detail::split_tabs(detail::read_line(is, path));
    if (f.size() != 4) throw CheckpointError(path + ": malformed manifest entry");
    ManifestEntry e;
    e.name = f[0];
    if (f[1] != "scalar") {
      std::stringstream ss(f[1]);
      std::string dim;
      while (std::getline(ss, dim, 'x')) e.shape.push_back(std::stoull(dim));
    }
    e.offset = std::stoull(f[2]);
    e.crc = static_cast<std::uint32_t>(std::stoul(f[3], nullptr, 16));
    h.manifest.push_back(std::move(e));
  }
  h.payload_floats = detail::read_count(is, path, "payload");
  return h;
}

inline CheckpointHeader read_checkpoint_header(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint " + path);
  return read_checkpoint_header(is, path);
}

template <typename T> struct Checkpoint {
  ConfigMap config;
  DualEncoder<T> model;
};

/// Restores a model; every manifest entry must match the parameter layout
/// implied by the stored configuration and pass its checksum.
template <typename T> Checkpoint<T> load_checkpoint(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint " + path);
  const auto header = read_checkpoint_header(is, path);
  std::vector<unsigned char> payload(header.payload_floats * 4);
  is.read(reinterpret_cast<char *>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(is.gcount()) != payload.size())
    throw CheckpointError(path + ": truncated payload");
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError(path + ": trailing bytes after payload");

  Rng rng(0);
  Checkpoint<T> ck{header.config, DualEncoder<T>(model_config_from_kv(header.config), rng)};
  auto params = ck.model.parameters();
  if (params.size() != header.manifest.size())
    throw CheckpointError(path + ": manifest lists " + std::to_string(header.manifest.size()) +
                          " tensors, model expects " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto &e = header.manifest[i];
    auto &p = *params[i];
    if (e.name != p.name || e.shape != p.value.shape())
      throw CheckpointError(path + ": manifest entry '" + e.name + "' " + shape_str(e.shape) +
                            " does not match parameter '" + p.name + "' " + shape_str(p.value.shape()));
    const std::size_t n = p.value.size();
    if (e.offset + n > header.payload_floats) throw CheckpointError(path + ": entry '" + e.name + "' exceeds payload");
    std::vector<unsigned char> bytes(payload.begin() + static_cast<std::ptrdiff_t>(e.offset * 4),
                                     payload.begin() + static_cast<std::ptrdiff_t>((e.offset + n) * 4));
    if (detail::crc32_of(bytes) != e.crc)
      throw CheckpointError(path + ": checksum mismatch for '" + e.name + "' (corrupt payload)");
    for (std::size_t j = 0; j < n; ++j) p.value[j] = static_cast<T>(detail::from_le_bytes(&bytes[j * 4]));
    p.zero_grad();
  }
  return ck;
}

}  // namespace rankhier
