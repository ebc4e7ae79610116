// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.hpp
 * @brief  Run configuration: a flat key-value set with defaults, an optional
 *         config file, and command-line overrides (flag > file > default).
 */
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rankhier/checkpoint.hpp"
#include "rankhier/encoders.hpp"
#include "rankhier/textprep.hpp"
#include "rankhier/training.hpp"

namespace rankhier {

struct ConfigKey {
  const char *name;
  const char *fallback;
  const char *help;
};

/// Every key accepted in a config file or as a `--flag`.
inline const std::vector<ConfigKey> &config_keys() {
  static const std::vector<ConfigKey> keys = {
      // paths
      {"input", "", "raw question<TAB>answer pairs (preprocess)"},
      {"train", "", "training data: raw pairs (preprocess) or triples TSV (train)"},
      {"valid", "", "validation data: raw pairs (preprocess) or grouped TSV (train)"},
      {"test", "", "test data: raw pairs (preprocess) or grouped TSV (eval)"},
      {"out-dir", "", "output directory (preprocess)"},
      {"vocab", "", "vocabulary file"},
      {"embeddings", "", "pretrained embedding text file"},
      {"checkpoint", "", "checkpoint path"},
      {"history", "", "per-epoch history output (train)"},
      {"output", "", "report output path; stdout when empty"},
      {"question", "", "question text (rank)"},
      {"candidates", "", "candidate file, one per line (rank)"},
      {"samples", "", "labeled samples, category<TAB>text (cluster-report)"},
      {"cluster-report", "", "labeled samples for an extra cluster table (eval)"},
      // model
      {"model", "rde", "rde | rde-ltc | hrde | hrde-ltc"},
      {"vocab-size", "0", "recorded vocabulary size (derived from the vocabulary)"},
      {"embed-dim", "300", "word embedding size"},
      {"hidden", "300", "RDE hidden size / HRDE word-level size"},
      {"chunk-hidden", "300", "HRDE chunk-level size"},
      {"memory-dim", "256", "LTC topic vector size"},
      {"clusters", "3", "LTC topic count K"},
      {"ltc-side", "answer", "side the LTC module is applied to: question | answer"},
      {"embed-dropout", "", "word input dropout; 0.2 for rde*, 0.3 for hrde* when empty"},
      {"memory-dropout", "0.8", "LTC memory dropout"},
      // training
      {"lr", "0.001", "Adam learning rate"},
      {"clip", "1", "global gradient norm bound"},
      {"batch-size", "64", "mini-batch size"},
      {"epochs", "10", "maximum epochs"},
      {"patience", "3", "epochs without validation gain before stopping"},
      {"seed", "1", "random seed"},
      {"seeds", "", "comma-separated seeds for multi-run evaluation"},
      {"max-words", "40", "tokens kept per chunk (head)"},
      {"max-chunks", "14", "chunks kept per text (tail)"},
      // data
      {"delimiter", "_eos_", "chunk delimiter: _eos_ | _eot_ | punct"},
      {"neg", "1", "negatives per training pair"},
      {"eval-neg", "9", "negatives per evaluation group"},
      {"min-count", "1", "minimum token count for the vocabulary"},
      // evaluation
      {"metrics", "1in2@1,1in10@1,1in10@2,1in10@5", "comma-separated 1in<n>@<k> metrics"},
      {"degradation", "false", "add R@1 by question chunk count (eval)"},
  };
  return keys;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto &k : config_keys()) values_[k.name] = k.fallback;
  }

  static bool known(const std::string &key) {
    for (const auto &k : config_keys())
      if (key == k.name) return true;
    return false;
  }

  void set(const std::string &key, const std::string &value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string &get(const std::string &key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  bool has(const std::string &key) const { return !get(key).empty(); }

  std::size_t size(const std::string &key) const { return detail::parse_size(get(key), key); }
  double real(const std::string &key) const { return detail::parse_real(get(key), key); }
  bool flag(const std::string &key) const {
    const auto &v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no" || v.empty()) return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }

  /// Applies a file of `key=value` lines ('#' starts a comment). A
  /// checkpoint is accepted too; its stored configuration is applied.
  void merge_file(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot read config " + path);
    std::string first;
    std::getline(is, first);
    if (first == kCheckpointMagic) {
      for (const auto &[k, v] : read_checkpoint_header(path).config) set(k, v);
      return;
    }
    is.seekg(0);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto start = line.find_first_not_of(" \t");
      if (start == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t");
        const auto b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      const auto key = trim(line.substr(0, eq));
      if (!known(key)) throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
      values_[key] = trim(line.substr(eq + 1));
    }
  }

  const std::map<std::string, std::string> &values() const { return values_; }

  void write(std::ostream &os) const {
    for (const auto &[k, v] : values_) os << k << '=' << v << '\n';
  }

  Delimiter delimiter() const { return Delimiter::parse(get("delimiter")); }

  std::vector<std::uint64_t> seeds() const {
    std::vector<std::uint64_t> out;
    std::stringstream ss(get("seeds"));
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(detail::parse_size(item, "seeds"));
    return out;
  }

  ModelConfig model_config(std::size_t vocab_size) const {
    ModelConfig m;
    m.kind = parse_model_kind(get("model"));
    m.vocab_size = vocab_size;
    m.embed_dim = size("embed-dim");
    m.hidden = size("hidden");
    m.chunk_hidden = size("chunk-hidden");
    m.memory_dim = size("memory-dim");
    m.clusters = size("clusters");
    m.ltc_side = parse_side(get("ltc-side"));
    m.embed_dropout = has("embed-dropout") ? real("embed-dropout") : ModelConfig::default_embed_dropout(m.kind);
    m.memory_dropout = real("memory-dropout");
    m.validate();
    return m;
  }

  TrainConfig train_config(std::size_t vocab_size) const {
    TrainConfig t;
    t.model = model_config(vocab_size);
    t.learning_rate = real("lr");
    t.clip_norm = real("clip");
    t.batch_size = size("batch-size");
    t.epochs = size("epochs");
    t.patience = size("patience");
    t.seed = size("seed");
    t.max_words = size("max-words");
    t.max_chunks = size("max-chunks");
    t.validate();
    return t;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace rankhier
