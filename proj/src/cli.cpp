#include "uconv/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uconv/bench.hpp"
#include "uconv/checks.hpp"
#include "uconv/ctc.hpp"
#include "uconv/error.hpp"
#include "uconv/frontend.hpp"
#include "uconv/io.hpp"
#include "uconv/model.hpp"
#include "uconv/train.hpp"

namespace uconv::cli {
namespace {

// A config argument is either a preset name or a key=value file.
model::EncoderConfig resolve_config(const std::string& text) {
  const auto& names = model::preset_names();
  if (std::find(names.begin(), names.end(), text) != names.end()) {
    return model::preset(text);
  }
  return model::EncoderConfig::from_kv(io::read_text(text));
}

std::string config_label(const std::string& text) {
  const auto& names = model::preset_names();
  if (std::find(names.begin(), names.end(), text) != names.end()) return text;
  return std::filesystem::path(text).stem().string();
}

std::string with_commas(int64_t n) {
  std::string digits = std::to_string(n);
  std::string out;
  int count = 0;
  for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
    if (count && count % 3 == 0) out += ',';
    out += *it;
    ++count;
  }
  std::reverse(out.begin(), out.end());
  return out;
}

Tensor<double> load_features(const std::string& path) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".wav") == 0) {
    frontend::AudioBuffer audio{io::read_wav_mono16k(path)};
    return frontend::normalize(frontend::extract_logmel(audio));
  }
  return io::read_feat(path);
}

int do_describe(const std::string& config_text, int64_t frames) {
  const model::EncoderConfig cfg = resolve_config(config_text);
  cfg.validate();
  model::Encoder<float> enc;
  enc.build(cfg);

  std::cout << "policy: " << cfg.policy.levels_str() << "\n"
            << "layers: " << cfg.policy.layers_str() << " ("
            << cfg.policy.total_layers() << " total)\n"
            << "depth: x" << cfg.policy.depth() << ", final: x"
            << cfg.policy.final_reduction() << "\n";
  for (size_t s = 0; s < cfg.policy.stages(); ++s) {
    std::cout << "  stage " << s + 1 << ": x" << cfg.policy.levels[s] << ", "
              << cfg.policy.layers_per_level[s] << " layer"
              << (cfg.policy.layers_per_level[s] == 1 ? "" : "s") << "\n";
  }
  std::cout << "attn_dim " << cfg.layer.attn_dim << ", heads "
            << cfg.layer.heads << ", ffn_dim " << cfg.layer.ffn_dim
            << ", conv_kernel " << cfg.layer.conv_kernel << ", "
            << (cfg.layer.rel_pos ? "rel" : "abs") << " positions\n"
            << "vocab: " << cfg.vocab_size << " classes, intermediate ctc "
            << (cfg.intermediate_ctc ? "on" : "off") << "\n"
            << "params: " << with_commas(enc.count_params()) << "\n";

  if (frames > 0) {
    const auto lens = reduction::stage_lengths(cfg.policy, frames);
    std::cout << "stage lengths at " << frames << " frames:";
    for (int64_t l : lens) std::cout << " " << l;
    std::cout << "\noutput frames: " << lens.back() << "\n";
  }
  return 0;
}

int do_bench(const std::string& baseline,
             const std::vector<std::string>& candidates, double seconds,
             int64_t repeats, const std::string& out_csv,
             const std::string& out_md, uint64_t seed) {
  std::vector<bench::NamedConfig> models;
  models.push_back({config_label(baseline), resolve_config(baseline)});
  for (const std::string& c : candidates) {
    models.push_back({config_label(c), resolve_config(c)});
  }
  const bench::BenchReport report =
      bench::compare(models, seconds, repeats, seed);
  std::cout << report.markdown();
  if (!out_csv.empty()) io::write_text(out_csv, report.csv());
  if (!out_md.empty()) io::write_text(out_md, report.markdown());
  return 0;
}

int do_train(const std::string& config_text, const std::string& data_dir,
             int64_t steps, uint64_t seed, const std::string& out_ckpt,
             std::string trace_path, bool augment) {
  const io::Vocab vocab = io::read_vocab(data_dir + "/vocab.txt");
  const auto dataset =
      train::load_dataset(data_dir + "/manifest.tsv", vocab);
  model::EncoderConfig cfg = resolve_config(config_text);
  if (cfg.vocab_size != vocab.size()) {
    throw ConfigError("config expects " + std::to_string(cfg.vocab_size) +
                      " classes but the vocabulary defines " +
                      std::to_string(vocab.size()) +
                      " (blank included)");
  }

  train::TrainOptions opts;
  opts.steps = steps;
  opts.seed = seed;
  opts.schedule.total_steps = std::max<int64_t>(steps, 1);
  opts.schedule.warmup_steps = std::min<int64_t>(opts.schedule.total_steps, 25);
  opts.augment = augment;

  model::Encoder<double> enc;
  enc.build(cfg);
  const train::TrainResult res = train::train(enc, dataset, opts, &std::cerr);

  model::save_checkpoint(enc, out_ckpt);
  if (trace_path.empty()) trace_path = out_ckpt + ".trace.csv";
  std::ostringstream csv;
  csv << "step,lr,loss\n";
  csv.precision(17);
  for (size_t i = 0; i < res.loss_trace.size(); ++i) {
    csv << i + 1 << ',' << res.lr_trace[i] << ',' << res.loss_trace[i]
        << '\n';
  }
  io::write_text(trace_path, csv.str());

  const int64_t hits = train::count_exact_matches(enc, dataset);
  std::cout << "trained " << steps << " step(s), dropped " << res.dropped
            << " infeasible utterance(s)\n";
  if (!res.loss_trace.empty()) {
    std::cout << "final loss: " << res.loss_trace.back() << "\n";
  }
  std::cout << "exact greedy matches: " << hits << "/" << dataset.size()
            << "\n"
            << "checkpoint: " << out_ckpt << "\n"
            << "loss trace: " << trace_path << "\n";
  return 0;
}

int do_decode(const std::string& model_path, const std::string& input,
              const std::string& vocab_path, int64_t beam) {
  model::Encoder<double> enc = model::load_checkpoint<double>(model_path);
  const io::Vocab vocab = io::read_vocab(vocab_path);
  if (vocab.size() != enc.cfg.vocab_size) {
    throw ConfigError("vocabulary defines " + std::to_string(vocab.size()) +
                      " classes (blank included) but the model expects " +
                      std::to_string(enc.cfg.vocab_size));
  }

  const Tensor<double> raw = load_features(input);
  Tensor<double> feats(Shape{1, raw.dim(0), raw.dim(1)});
  std::copy(raw.data(), raw.data() + raw.numel(), feats.data());

  Ctx<double> ctx{nullptr, false, nullptr};
  const model::EncoderOutput<double> out =
      enc.forward(ctx, Var<double>(feats), {raw.dim(0)});
  Tensor<double> logits(Shape{out.out_lens[0], enc.cfg.vocab_size});
  for (int64_t t = 0; t < out.out_lens[0]; ++t) {
    for (int64_t v = 0; v < enc.cfg.vocab_size; ++v) {
      logits.at(t, v) = out.final_logits.value.at(0, t, v);
    }
  }

  // beam 1 degenerates to the greedy path
  const ctc::Labels labels = beam == 1
                                 ? ctc::greedy_decode(logits)
                                 : ctc::beam_search(logits, beam)[0].labels;
  std::cout << vocab.join(labels) << "\n";
  return 0;
}

int do_check(const std::string& suite, uint64_t seed) {
  std::vector<checks::CheckResult> results;
  if (suite == "oracle") {
    results = checks::run_oracle_suite(seed);
  } else if (suite == "grad") {
    results = checks::run_grad_suite(seed);
  } else if (suite == "lengths") {
    results = checks::run_lengths_suite(seed);
  } else if (suite == "params") {
    results = checks::run_params_suite();
  } else if (suite == "feasibility") {
    results = checks::run_feasibility_suite();
  } else {
    results = checks::run_all(seed);
  }
  return checks::print_results(results, std::cout) == 0 ? 0 : 2;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Sequence encoder with temporal U-net reduction policies"};
  app.require_subcommand(1);
  uint64_t seed = 42;
  app.add_option("--seed", seed, "Seed for every random draw")
      ->capture_default_str();

  auto* describe =
      app.add_subcommand("describe", "Print architecture facts for a config");
  std::string d_config;
  int64_t d_frames = 0;
  describe->add_option("--config", d_config, "Preset name or config file")
      ->required();
  describe->add_option("--frames", d_frames,
                       "Also print stage lengths for this many frames");

  auto* benchc =
      app.add_subcommand("bench", "Time inference against a baseline");
  std::string b_baseline, b_csv, b_md;
  std::vector<std::string> b_candidates;
  double b_seconds = 30.0;
  int64_t b_repeats = 10;
  benchc->add_option("--baseline", b_baseline, "Baseline preset or config")
      ->required();
  benchc
      ->add_option("--candidate", b_candidates,
                   "Candidate preset(s) or config(s)")
      ->required();
  benchc->add_option("--seconds", b_seconds, "Synthetic utterance duration")
      ->capture_default_str();
  benchc->add_option("--repeats", b_repeats, "Timed passes per model")
      ->capture_default_str();
  benchc->add_option("--out", b_csv, "Write the CSV report here");
  benchc->add_option("--md", b_md, "Write the Markdown report here");

  auto* traint =
      app.add_subcommand("train-toy", "Overfit a small dataset end to end");
  std::string t_config, t_data, t_out, t_trace;
  int64_t t_steps = 400;
  bool t_augment = false;
  traint->add_option("--config", t_config, "Preset name or config file")
      ->required();
  traint->add_option("--data", t_data, "Dataset directory")->required();
  traint->add_option("--steps", t_steps, "Optimizer steps")
      ->capture_default_str();
  traint->add_option("--out", t_out, "Checkpoint output path")->required();
  traint->add_option("--trace", t_trace,
                     "Loss trace CSV (default: <out>.trace.csv)");
  traint->add_flag("--augment", t_augment, "Apply feature masking");

  auto* decode = app.add_subcommand("decode", "Decode one utterance");
  std::string dec_model, dec_input, dec_vocab;
  int64_t dec_beam = 20;
  decode->add_option("--model", dec_model, "Checkpoint file")->required();
  decode->add_option("--input", dec_input, "WAV or FEAT file")->required();
  decode->add_option("--vocab", dec_vocab, "Vocabulary file")->required();
  decode->add_option("--beam", dec_beam, "Beam width (1 = greedy)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  auto* check = app.add_subcommand("check", "Run the property suites");
  std::string c_suite;
  check->add_option("--suite", c_suite,
                    "oracle, grad, lengths, params, or feasibility")
      ->check(CLI::IsMember(
          {"oracle", "grad", "lengths", "params", "feasibility"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (describe->parsed()) return do_describe(d_config, d_frames);
    if (benchc->parsed()) {
      return do_bench(b_baseline, b_candidates, b_seconds, b_repeats, b_csv,
                      b_md, seed);
    }
    if (traint->parsed()) {
      return do_train(t_config, t_data, t_steps, seed, t_out, t_trace,
                      t_augment);
    }
    if (decode->parsed()) {
      return do_decode(dec_model, dec_input, dec_vocab, dec_beam);
    }
    if (check->parsed()) return do_check(c_suite, seed);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace uconv::cli
