// SPDX-License-Identifier: Apache-2.0
/**
 * @file   rankhier.cpp
 * @brief  Command-line front end: preprocess, train, eval, rank,
 *         cluster-report.
 */
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "rankhier/commands.hpp"

namespace {

struct Subcommand {
  CLI::App *app = nullptr;
  std::string config_file;
  std::map<std::string, std::string> flags;
  std::map<std::string, CLI::Option *> options;
};

void add_config_options(Subcommand &sc) {
  sc.app->add_option("--config", sc.config_file, "key=value config file or checkpoint");
  for (const auto &k : rankhier::config_keys()) {
    std::string help = k.help;
    if (*k.fallback) help += std::string(" (default: ") + k.fallback + ")";
    sc.options[k.name] = sc.app->add_option(std::string("--") + k.name, sc.flags[k.name], help);
  }
}

rankhier::RunConfig resolve(const Subcommand &sc) {
  rankhier::RunConfig cfg;
  if (!sc.config_file.empty()) cfg.merge_file(sc.config_file);
  for (const auto &[name, opt] : sc.options)
    if (opt->count() > 0) cfg.set(name, sc.flags.at(name));
  return cfg;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Answer ranking with recurrent dual encoders"};
  app.require_subcommand(1);

  std::map<std::string, Subcommand> subs;
  const std::map<std::string, std::string> about = {
      {"preprocess", "build vocabulary, training triples and evaluation groups"},
      {"train", "train a model and write a checkpoint and history"},
      {"eval", "report 1-in-n Recall@k for a checkpoint"},
      {"rank", "rank candidate answers for one question"},
      {"cluster-report", "per-category topic cluster proportions"},
  };
  for (const auto &[name, desc] : about) {
    auto &sc = subs[name];
    sc.app = app.add_subcommand(name, desc);
    add_config_options(sc);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    for (auto &[name, sc] : subs) {
      if (!sc.app->parsed()) continue;
      const auto cfg = resolve(sc);
      if (name == "preprocess") {
        for (const auto &[split, n] : rankhier::cmd_preprocess(cfg))
          rankhier::log_line("info", split + ": " + std::to_string(n) + " lines written");
      } else if (name == "train") {
        const auto h = rankhier::cmd_train(cfg);
        rankhier::log_line("info", "best epoch " + std::to_string(h.best_epoch) +
                                       (h.stopped_early ? " (stopped early)" : ""));
      } else if (name == "eval") {
        rankhier::cmd_eval(cfg);
      } else if (name == "rank") {
        rankhier::cmd_rank(cfg);
      } else if (name == "cluster-report") {
        rankhier::cmd_cluster_report(cfg);
      }
    }
  } catch (const std::exception &e) {
    rankhier::log_line("error", e.what());
    return 1;
  }
  return 0;
}
