#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "uconv/cli.hpp"
#include "uconv/ctc.hpp"
#include "uconv/io.hpp"
#include "uconv/model.hpp"
#include "uconv/train.hpp"

using namespace uconv;

namespace {

struct RunResult {
  int code;
  std::string out;
  std::string err;
};

RunResult run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"uconv"};
  for (const std::string& a : args) argv.push_back(a.c_str());

  std::ostringstream out, err;
  std::streambuf* so = std::cout.rdbuf(out.rdbuf());
  std::streambuf* se = std::cerr.rdbuf(err.rdbuf());
  const int code =
      cli::cli_main(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(so);
  std::cerr.rdbuf(se);
  return {code, out.str(), err.str()};
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("uconv_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string str() const { return path.string(); }
};

model::EncoderConfig small_config(int64_t vocab) {
  model::EncoderConfig cfg;
  cfg.policy = reduction::parse_policy("x4-x8", "1-1");
  cfg.layer.attn_dim = 32;
  cfg.layer.heads = 2;
  cfg.layer.ffn_dim = 64;
  cfg.layer.conv_kernel = 3;
  cfg.layer.dropout = 0.0;
  cfg.vocab_size = vocab;
  cfg.frontend_channels = 8;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("describe prints architecture facts for presets") {
  RunResult r = run({"describe", "--config", "uconv-d16-f8-v1", "--frames",
                     "2998"});
  CHECK(r.code == 0);
  CHECK(r.out.find("policy: x4-x8-x16-x8") != std::string::npos);
  CHECK(r.out.find("params: 24,601,793") != std::string::npos);
  CHECK(r.out.find("750 375 188 375") != std::string::npos);
  CHECK(r.out.find("output frames: 375") != std::string::npos);

  RunResult s = run({"describe", "--config", "conformer-s"});
  CHECK(s.code == 0);
  CHECK(s.out.find("policy: x4") != std::string::npos);
  CHECK(s.out.find("params: 21,879,441") != std::string::npos);
}

TEST_CASE("describe reports config problems on stderr") {
  TempDir dir;
  const std::string bad = dir.str() + "/bad.cfg";
  io::write_text(bad, "policy=x4-x9\nlayers=1-1\nattn_dim=32\nheads=2\n"
                      "ffn_dim=64\nconv_kernel=3\nvocab_size=11\n");
  RunResult r = run({"describe", "--config", bad});
  CHECK(r.code == 2);
  CHECK(!r.err.empty());

  RunResult missing = run({"describe", "--config", dir.str() + "/none.cfg"});
  CHECK(missing.code == 3);
  CHECK(!missing.err.empty());
}

TEST_CASE("usage errors exit with code 1 and help with 0") {
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"describe"}).code == 1);  // missing required --config
  CHECK(run({"describe", "--config", "conformer-s", "--bogus"}).code == 1);
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"decode", "--help"}).code == 0);
  CHECK(run({"check", "--suite", "nonsense"}).code == 1);
}

TEST_CASE("train-toy with zero steps writes the initialization") {
  TempDir dir;
  train::write_toy_dataset(dir.str(), 2, 12);
  const std::string cfg_path = dir.str() + "/toy.cfg";
  io::write_text(cfg_path, small_config(9).to_kv());
  const std::string ckpt = dir.str() + "/model.ckpt";

  RunResult r = run({"train-toy", "--config", cfg_path, "--data", dir.str(),
                     "--steps", "0", "--out", ckpt});
  CHECK(r.code == 0);
  CHECK(r.out.find("trained 0 step(s)") != std::string::npos);
  REQUIRE(std::filesystem::exists(ckpt));
  REQUIRE(std::filesystem::exists(ckpt + ".trace.csv"));
  CHECK(io::read_text(ckpt + ".trace.csv") == "step,lr,loss");

  model::Encoder<double> loaded = model::load_checkpoint<double>(ckpt);
  model::Encoder<double> fresh;
  fresh.build(small_config(9));
  auto lp = loaded.parameters();
  auto fp = fresh.parameters();
  REQUIRE(lp.size() == fp.size());
  for (size_t i = 0; i < lp.size(); ++i) {
    REQUIRE(lp[i]->value.numel() == fp[i]->value.numel());
    CHECK(std::memcmp(lp[i]->value.data(), fp[i]->value.data(),
                      sizeof(double) * lp[i]->value.numel()) == 0);
  }
}

TEST_CASE("train-toy rejects missing data and vocabulary mismatches") {
  TempDir dir;
  const std::string cfg_path = dir.str() + "/toy.cfg";
  io::write_text(cfg_path, small_config(9).to_kv());

  RunResult missing = run({"train-toy", "--config", cfg_path, "--data",
                           dir.str() + "/nowhere", "--steps", "1", "--out",
                           dir.str() + "/m.ckpt"});
  CHECK(missing.code == 3);

  train::write_toy_dataset(dir.str(), 1, 12);
  io::write_text(cfg_path, small_config(11).to_kv());
  RunResult mismatch = run({"train-toy", "--config", cfg_path, "--data",
                            dir.str(), "--steps", "1", "--out",
                            dir.str() + "/m.ckpt"});
  CHECK(mismatch.code == 2);
  CHECK(mismatch.err.find("vocabulary") != std::string::npos);
}

TEST_CASE("decode reproduces the transcript of an overfit utterance") {
  TempDir dir;
  const io::Vocab vocab = train::write_toy_dataset(dir.str(), 1, 31);
  const auto data = train::load_dataset(dir.str() + "/manifest.tsv", vocab);
  REQUIRE(data.size() == 1);
  const std::string cfg_path = dir.str() + "/toy.cfg";
  io::write_text(cfg_path, small_config(9).to_kv());
  const std::string ckpt = dir.str() + "/model.ckpt";

  // single-utterance overfit lands well before 150 steps at these dims
  RunResult t = run({"train-toy", "--config", cfg_path, "--data", dir.str(),
                     "--steps", "150", "--out", ckpt});
  REQUIRE(t.code == 0);
  CHECK(t.out.find("exact greedy matches: 1/1") != std::string::npos);

  RunResult d = run({"decode", "--model", ckpt, "--input",
                     dir.str() + "/utt0.feat", "--vocab",
                     dir.str() + "/vocab.txt"});
  CHECK(d.code == 0);
  CHECK(d.out == data[0].transcript + "\n");

  RunResult g = run({"decode", "--model", ckpt, "--input",
                     dir.str() + "/utt0.feat", "--vocab",
                     dir.str() + "/vocab.txt", "--beam", "1"});
  CHECK(g.code == 0);
  CHECK(g.out == d.out);
}

TEST_CASE("decode validates the vocabulary and accepts silence") {
  TempDir dir;
  train::write_toy_dataset(dir.str(), 1, 31);
  const std::string cfg_path = dir.str() + "/toy.cfg";
  io::write_text(cfg_path, small_config(9).to_kv());
  const std::string ckpt = dir.str() + "/model.ckpt";
  REQUIRE(run({"train-toy", "--config", cfg_path, "--data", dir.str(),
               "--steps", "0", "--out", ckpt})
              .code == 0);

  io::Vocab wide;
  for (char c = 'a'; c <= 'l'; ++c) wide.units.push_back(std::string(1, c));
  io::write_vocab(dir.str() + "/wide.txt", wide);
  RunResult bad = run({"decode", "--model", ckpt, "--input",
                       dir.str() + "/utt0.feat", "--vocab",
                       dir.str() + "/wide.txt"});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("model expects") != std::string::npos);

  io::write_feat(dir.str() + "/silence.feat", Tensor<double>(Shape{60, 80}));
  RunResult sil = run({"decode", "--model", ckpt, "--input",
                       dir.str() + "/silence.feat", "--vocab",
                       dir.str() + "/vocab.txt"});
  CHECK(sil.code == 0);
  RunResult sil2 = run({"decode", "--model", ckpt, "--input",
                        dir.str() + "/silence.feat", "--vocab",
                        dir.str() + "/vocab.txt"});
  CHECK(sil2.out == sil.out);
}

TEST_CASE("check subcommand reports suite results") {
  RunResult r = run({"check", "--suite", "lengths"});
  CHECK(r.code == 0);
  CHECK(r.out.find("[PASS]") != std::string::npos);
  CHECK(r.out.find("[FAIL]") == std::string::npos);
  CHECK(r.out.find("0 failed") != std::string::npos);
}

TEST_CASE("bench subcommand writes the comparison reports") {
  TempDir dir;
  const std::string cfg_path = dir.str() + "/tiny.cfg";
  model::EncoderConfig tiny = small_config(11);
  tiny.layer.attn_dim = 16;
  tiny.layer.ffn_dim = 24;
  tiny.frontend_channels = 4;
  io::write_text(cfg_path, tiny.to_kv());
  const std::string csv_path = dir.str() + "/report.csv";

  RunResult r = run({"bench", "--baseline", cfg_path, "--candidate", cfg_path,
                     "--seconds", "2", "--repeats", "5", "--out", csv_path});
  CHECK(r.code == 0);
  CHECK(r.out.find("| model |") != std::string::npos);
  CHECK(r.out.find("| tiny |") != std::string::npos);
  REQUIRE(std::filesystem::exists(csv_path));
  const std::string csv = io::read_text(csv_path);
  CHECK(csv.find("model,params,policy,layers,median_ms,mean_ms,std_ms,"
                 "delta_vs_baseline_pct") == 0);

  RunResult few = run({"bench", "--baseline", cfg_path, "--candidate",
                       cfg_path, "--seconds", "2", "--repeats", "3"});
  CHECK(few.code == 2);
}
