// SPDX-License-Identifier: Apache-2.0
// Run configuration and the command-line subcommands, in process and through
// the installed binary.

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "rankhier/commands.hpp"
#include "support.hpp"

using namespace rankhier;
using rhtest::TempDir;

namespace {

std::string slurp(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void spit(const std::string &path, const std::string &text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
}

std::size_t count_lines(const std::string &path) {
  const auto s = slurp(path);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

const char *kColors[] = {"red", "green", "blue", "amber", "violet", "teal"};

// Pairs whose question and answer share a colour word.
std::string pairs_text(std::size_t n, std::size_t offset = 0) {
  std::ostringstream os;
  for (std::size_t i = 0; i < n; ++i) {
    const char *c = kColors[(i + offset) % 6];
    os << "which " << c << " item ? _eos_ tell me " << i % 4 << "\t" << c << " is here . _eos_ ok\n";
  }
  return os.str();
}

// A preprocessed workspace with small model settings.
struct Workspace {
  TempDir dir{"cli"};
  RunConfig cfg;

  Workspace() {
    spit(dir.file("train.txt"), pairs_text(30));
    spit(dir.file("valid.txt"), pairs_text(6, 1));
    spit(dir.file("test.txt"), pairs_text(12, 2));
    RunConfig pre;
    pre.set("train", dir.file("train.txt"));
    pre.set("valid", dir.file("valid.txt"));
    pre.set("test", dir.file("test.txt"));
    pre.set("out-dir", dir.file("data"));
    pre.set("eval-neg", "4");
    cmd_preprocess(pre);
    for (auto [k, v] : std::vector<std::pair<std::string, std::string>>{
             {"train", dir.file("data/train.tsv")},
             {"valid", dir.file("data/valid.tsv")},
             {"test", dir.file("data/test.tsv")},
             {"vocab", dir.file("data/vocab.txt")},
             {"checkpoint", dir.file("model.ckpt")},
             {"model", "hrde-ltc"},
             {"embed-dim", "6"},
             {"hidden", "6"},
             {"chunk-hidden", "6"},
             {"memory-dim", "4"},
             {"epochs", "2"},
             {"batch-size", "8"},
             {"lr", "0.01"},
             {"metrics", "1in2@1,1in5@1"}})
      cfg.set(k, v);
  }
};

}  // namespace

TEST(Config, DefaultsAndUnknownKeys) {
  RunConfig cfg;
  EXPECT_EQ(cfg.get("model"), "rde");
  EXPECT_EQ(cfg.size("max-chunks"), 14u);
  EXPECT_DOUBLE_EQ(cfg.real("memory-dropout"), 0.8);
  EXPECT_THROW(cfg.set("learning-rate", "1"), ConfigError);
  EXPECT_THROW(cfg.get("nope"), ConfigError);
}

TEST(Config, FileThenFlagPrecedence) {
  TempDir dir("cfg");
  spit(dir.file("run.cfg"), "# comment\nepochs = 7\n\nlr=0.5  # trailing\nmodel=hrde\n");
  RunConfig cfg;
  cfg.merge_file(dir.file("run.cfg"));
  EXPECT_EQ(cfg.size("epochs"), 7u);
  EXPECT_DOUBLE_EQ(cfg.real("lr"), 0.5);
  cfg.set("epochs", "3");  // a flag given on the command line
  EXPECT_EQ(cfg.size("epochs"), 3u);
  EXPECT_EQ(cfg.get("model"), "hrde");
  EXPECT_EQ(cfg.size("batch-size"), 64u);
}

TEST(Config, FileErrorsNameTheLine) {
  TempDir dir("cfg");
  spit(dir.file("bad.cfg"), "epochs=2\nbogus=1\n");
  RunConfig cfg;
  try {
    cfg.merge_file(dir.file("bad.cfg"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError &e) {
    EXPECT_NE(std::string(e.what()).find("bad.cfg:2: unknown key 'bogus'"), std::string::npos);
  }
  spit(dir.file("bad.cfg"), "epochs\n");
  EXPECT_THROW(cfg.merge_file(dir.file("bad.cfg")), ConfigError);
  EXPECT_THROW(cfg.merge_file(dir.file("missing.cfg")), ConfigError);
}

TEST(Config, TypedAccessorsValidate) {
  RunConfig cfg;
  cfg.set("epochs", "ten");
  EXPECT_THROW(cfg.size("epochs"), ConfigError);
  cfg.set("degradation", "maybe");
  EXPECT_THROW(cfg.flag("degradation"), ConfigError);
  cfg.set("degradation", "yes");
  EXPECT_TRUE(cfg.flag("degradation"));
  cfg.set("seeds", "1,2,,5");
  EXPECT_EQ(cfg.seeds(), (std::vector<std::uint64_t>{1, 2, 5}));
  cfg.set("model", "transformer");
  EXPECT_THROW(cfg.model_config(10), ConfigError);
}

TEST(Config, EmbedDropoutDefaultsByKind) {
  RunConfig cfg;
  cfg.set("model", "rde-ltc");
  EXPECT_DOUBLE_EQ(cfg.model_config(10).embed_dropout, 0.2);
  cfg.set("model", "hrde");
  EXPECT_DOUBLE_EQ(cfg.model_config(10).embed_dropout, 0.3);
  cfg.set("embed-dropout", "0.05");
  EXPECT_DOUBLE_EQ(cfg.model_config(10).embed_dropout, 0.05);
}

TEST(Config, CheckpointServesAsConfig) {
  TempDir dir("cfg");
  RunConfig cfg;
  cfg.set("model", "rde-ltc");
  cfg.set("lr", "0.02");
  cfg.set("embed-dim", "4");
  cfg.set("hidden", "4");
  cfg.set("memory-dim", "3");
  Rng rng(1);
  DualEncoder<float> model(cfg.model_config(12), rng);
  save_checkpoint(model, dir.file("m.ckpt"), cfg.values());
  RunConfig back;
  back.merge_file(dir.file("m.ckpt"));
  EXPECT_EQ(back.get("lr"), "0.02");
  EXPECT_EQ(back.get("model"), "rde-ltc");
  EXPECT_EQ(back.model_config(12).to_kv(), model.config().to_kv());
}

TEST(Preprocess, TwoPairsOneNegativeGiveFourTriples) {
  TempDir dir("pre");
  spit(dir.file("train.txt"), "q one\ta one\nq two\ta two\n");
  spit(dir.file("test.txt"), "unseen words\tonly here\nq one\ta two\n");
  RunConfig cfg;
  cfg.set("train", dir.file("train.txt"));
  cfg.set("test", dir.file("test.txt"));
  cfg.set("out-dir", dir.file("out"));
  cfg.set("eval-neg", "1");
  const auto written = cmd_preprocess(cfg);
  EXPECT_EQ(written.at("train"), 4u);
  EXPECT_EQ(written.at("test"), 4u);
  const auto triples = read_triples(dir.file("out/train.tsv"));
  ASSERT_EQ(triples.size(), 4u);
  EXPECT_EQ(triples[0].flag, 1);
  EXPECT_EQ(triples[1].flag, 0);
  EXPECT_EQ(triples[1].answer, "a two");
  const auto vocab = Vocabulary::load(dir.file("out/vocab.txt"));
  EXPECT_TRUE(vocab.contains("one"));
  EXPECT_FALSE(vocab.contains("unseen"));
  EXPECT_FALSE(vocab.contains("only"));
  EXPECT_EQ(read_groups(dir.file("out/test.tsv")).size(), 2u);
}

TEST(Preprocess, RequiresInputsAndOutDir) {
  RunConfig cfg;
  cfg.set("out-dir", "/tmp/x");
  EXPECT_THROW(cmd_preprocess(cfg), ConfigError);
  cfg.set("train", "/nonexistent/train.txt");
  EXPECT_THROW(cmd_preprocess(cfg), std::exception);
}

TEST(Train, WritesCheckpointAndHistory) {
  Workspace ws;
  const auto h = cmd_train(ws.cfg);
  EXPECT_EQ(h.epochs.size(), 2u);
  EXPECT_EQ(count_lines(ws.dir.file("model.ckpt.history")), 3u);
  const auto header = read_checkpoint_header(ws.dir.file("model.ckpt"));
  EXPECT_EQ(header.config.at("model"), "hrde-ltc");
  EXPECT_EQ(header.config.at("vocab"), ws.dir.file("data/vocab.txt"));
}

TEST(Train, RepeatRunsAreByteIdentical) {
  Workspace ws;
  cmd_train(ws.cfg);
  const auto ck_a = slurp(ws.dir.file("model.ckpt"));
  const auto hist_a = slurp(ws.dir.file("model.ckpt.history"));
  std::filesystem::remove(ws.dir.file("model.ckpt"));
  cmd_train(ws.cfg);
  EXPECT_EQ(hist_a, slurp(ws.dir.file("model.ckpt.history")));
  EXPECT_EQ(ck_a, slurp(ws.dir.file("model.ckpt")));
}

TEST(Train, MissingInputsAreReported) {
  Workspace ws;
  auto cfg = ws.cfg;
  cfg.set("train", ws.dir.file("nope.tsv"));
  EXPECT_THROW(cmd_train(cfg), ConfigError);
  cfg = ws.cfg;
  cfg.set("embeddings", ws.dir.file("nope.vec"));
  EXPECT_THROW(cmd_train(cfg), ConfigError);
  cfg = ws.cfg;
  cfg.set("checkpoint", ws.dir.file("no/such/dir/m.ckpt"));
  EXPECT_THROW(cmd_train(cfg), ConfigError);
}

TEST(Train, UsesEmbeddingFile) {
  Workspace ws;
  spit(ws.dir.file("emb.vec"), "red 1 2 3 4 5 6\nblue 6 5 4 3 2 1\n");
  ws.cfg.set("embeddings", ws.dir.file("emb.vec"));
  ws.cfg.set("epochs", "1");
  EXPECT_NO_THROW(cmd_train(ws.cfg));
  spit(ws.dir.file("emb.vec"), "red 1 2\n");
  EXPECT_THROW(cmd_train(ws.cfg), std::exception);
}

TEST(Eval, CheckpointReport) {
  Workspace ws;
  cmd_train(ws.cfg);
  auto cfg = ws.cfg;
  cfg.set("output", ws.dir.file("report.tsv"));
  cfg.set("degradation", "true");
  const auto rep = cmd_eval(cfg);
  EXPECT_EQ(rep.metrics.size(), 2u);
  for (const auto &m : rep.metrics) {
    EXPECT_GE(m.mean, 0.0);
    EXPECT_LE(m.mean, 1.0);
  }
  EXPECT_FALSE(rep.breakdown.empty());
  const auto text = slurp(ws.dir.file("report.tsv"));
  EXPECT_EQ(text.rfind("metric\tmean\tstd\tvalues\n1in2_R@1\t", 0), 0u);
  EXPECT_NE(text.find("chunks\tgroups\tR@1"), std::string::npos);
}

TEST(Eval, MetricLargerThanGroupIsRejected) {
  Workspace ws;
  cmd_train(ws.cfg);
  auto cfg = ws.cfg;
  cfg.set("metrics", "1in10@1");
  cfg.set("output", ws.dir.file("report.tsv"));
  EXPECT_THROW(cmd_eval(cfg), DataError);
}

TEST(Eval, MultiSeedRuns) {
  Workspace ws;
  auto cfg = ws.cfg;
  cfg.set("seeds", "1,2");
  cfg.set("epochs", "1");
  cfg.set("output", ws.dir.file("report.tsv"));
  const auto rep = cmd_eval(cfg);
  EXPECT_EQ(rep.metric("1in5_R@1").values.size(), 2u);
  EXPECT_TRUE(rep.failures.empty());
}

TEST(Eval, AppendsClusterTable) {
  Workspace ws;
  cmd_train(ws.cfg);
  spit(ws.dir.file("samples.txt"), "warm\tred is here\ncool\tblue is here\nwarm\tamber item\n");
  auto cfg = ws.cfg;
  cfg.set("output", ws.dir.file("report.tsv"));
  cfg.set("cluster-report", ws.dir.file("samples.txt"));
  cmd_eval(cfg);
  EXPECT_NE(slurp(ws.dir.file("report.tsv")).find("category\tsamples\tcluster1\tcluster2\tcluster3\nwarm\t2\t"),
            std::string::npos);
}

TEST(Rank, OrdersCandidates) {
  Workspace ws;
  cmd_train(ws.cfg);
  spit(ws.dir.file("cands.txt"), "red is here\nblue is here\n\nteal is here\n");
  auto cfg = ws.cfg;
  cfg.set("question", "which red item ?");
  cfg.set("candidates", ws.dir.file("cands.txt"));
  cfg.set("output", ws.dir.file("ranked.txt"));
  const auto ranked = cmd_rank(cfg);
  ASSERT_EQ(ranked.size(), 3u);
  for (std::size_t i = 1; i < ranked.size(); ++i) EXPECT_GE(ranked[i - 1].score, ranked[i].score);
  EXPECT_EQ(count_lines(ws.dir.file("ranked.txt")), 3u);
  EXPECT_EQ(slurp(ws.dir.file("ranked.txt")).rfind("1\t", 0), 0u);
}

TEST(Rank, SingletonAndDuplicates) {
  Workspace ws;
  cmd_train(ws.cfg);
  auto cfg = ws.cfg;
  cfg.set("question", "which red item ?");
  cfg.set("output", ws.dir.file("ranked.txt"));
  spit(ws.dir.file("one.txt"), "red is here\n");
  cfg.set("candidates", ws.dir.file("one.txt"));
  EXPECT_EQ(cmd_rank(cfg).size(), 1u);
  spit(ws.dir.file("dup.txt"), "green thing\nsame text\nsame text\n");
  cfg.set("candidates", ws.dir.file("dup.txt"));
  const auto ranked = cmd_rank(cfg);
  std::vector<std::size_t> dup;
  for (const auto &r : ranked)
    if (r.text == "same text") dup.push_back(r.index);
  ASSERT_EQ(dup.size(), 2u);
  EXPECT_EQ(dup[0], 1u);
  EXPECT_EQ(dup[1], 2u);
  EXPECT_EQ(ranked[1].score == ranked[2].score || ranked[0].score == ranked[1].score, true);
}

TEST(Rank, EmptyCandidatesRejected) {
  Workspace ws;
  cmd_train(ws.cfg);
  auto cfg = ws.cfg;
  spit(ws.dir.file("empty.txt"), "\n\n");
  cfg.set("question", "anything");
  cfg.set("candidates", ws.dir.file("empty.txt"));
  EXPECT_THROW(cmd_rank(cfg), DataError);
}

TEST(ClusterReport, NeedsLtcCheckpoint) {
  Workspace ws;
  ws.cfg.set("model", "hrde");
  cmd_train(ws.cfg);
  spit(ws.dir.file("samples.txt"), "warm\tred is here\n");
  auto cfg = ws.cfg;
  cfg.set("samples", ws.dir.file("samples.txt"));
  EXPECT_THROW(cmd_cluster_report(cfg), ConfigError);
}

#ifdef RANKHIER_CLI
namespace {
int run(const std::string &args) {
  const int status = std::system((std::string(RANKHIER_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
}  // namespace

TEST(Binary, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("train --help"), 0);
  EXPECT_NE(run(""), 0);
  EXPECT_NE(run("frobnicate"), 0);
  EXPECT_NE(run("train --no-such-flag 1"), 0);
  EXPECT_EQ(run("train --train /nonexistent/x.tsv --vocab /nonexistent/v --checkpoint /tmp/m.ckpt"), 1);
}

TEST(Binary, EndToEnd) {
  Workspace ws;
  std::ostringstream args;
  args << "train";
  for (const auto &[k, v] : ws.cfg.values())
    if (!v.empty() && v != RunConfig().get(k)) args << " --" << k << " '" << v << "'";
  ASSERT_EQ(run(args.str()), 0);
  ASSERT_EQ(run("eval --config " + ws.dir.file("model.ckpt") + " --output " + ws.dir.file("r.tsv")), 0);
  EXPECT_EQ(slurp(ws.dir.file("r.tsv")).rfind("metric\t", 0), 0u);
}
#endif
