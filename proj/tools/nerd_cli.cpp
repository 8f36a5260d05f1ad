// nerd-rain: corpus synthesis, training, inference, evaluation and gradient
// checks from the command line.
//
// Exit codes: 0 ok, 2 usage or configuration, 3 I/O, 4 numeric failure.
// NERD_THREADS sets the number of images `eval` processes concurrently.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include "nerd/config.hpp"
#include "nerd/data.hpp"
#include "nerd/metrics.hpp"
#include "nerd/model_check.hpp"
#include "nerd/trainer.hpp"

using namespace nerd;

namespace {

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kIo = 3, kNumeric = 4 };

std::size_t thread_count() {
  if (const char* s = std::getenv("NERD_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(s, &end, 10);
    if (end != s && *end == '\0' && n >= 1) return static_cast<std::size_t>(n);
    throw ConfigError("NERD_THREADS must be a positive integer, got '" + std::string(s) + "'");
  }
  return 1;
}

/// Model from a checkpoint, or freshly initialised from a configuration.
NerdRain<float> load_model(const std::string& ckpt, const std::string& config) {
  if (!ckpt.empty()) return model_from_checkpoint(load_checkpoint(ckpt));
  const auto rc = load_config(config);
  return NerdRain<float>(rc.model, rc.train.seed);
}

std::vector<NamedPair> load_pairs(const std::string& dir) { return load_dataset(scan_dataset(dir)); }

struct SynthArgs {
  std::string out;
  CorpusOptions corpus;
};

int run_synth(const SynthArgs& a) {
  write_corpus(a.out, a.corpus);
  std::cout << "wrote " << a.corpus.count << " pairs to " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config, data, val, out, resume;
  std::size_t max_steps = 0;
};

int run_train(const TrainArgs& a) {
  const auto rc = load_config(a.config);
  auto train = load_pairs(a.data);
  auto val = a.val.empty() ? std::vector<NamedPair>{} : load_pairs(a.val);
  Trainer t(rc, std::move(train), std::move(val));
  if (!a.resume.empty()) t.resume(load_checkpoint(a.resume));
  std::cout << kLogHeader;
  t.run(a.out, a.max_steps, [](const EpochLog& e) { std::cout << format_log_row(e) << std::flush; });
  std::cout << "step " << t.step() << " of " << t.total_steps() << "\n";
  return kOk;
}

struct InferArgs {
  std::string ckpt, config, in, out;
  bool scale_outputs = false;
};

int run_infer(const InferArgs& a) {
  const auto model = load_model(a.ckpt, a.config);
  const auto img = load_image(a.in);
  ForwardOutputs<float> out;
  {
    NoGradGuard ng;
    out = model.forward(img);
  }
  save_image(out.restored(), a.out);
  if (a.scale_outputs) {
    const fs::path base = fs::path(a.out).replace_extension();
    const std::string ext = fs::path(a.out).extension().string();
    save_image(out.derained[0], base.string() + "_s1" + ext);
    save_image(out.derained[1], base.string() + "_s2" + ext);
    for (std::size_t k = 0; k < out.inr_recons.size(); ++k)
      save_image(out.inr_recons[k], base.string() + "_inr" + std::to_string(k + 1) + ext);
  }
  return kOk;
}

struct EvalArgs {
  std::string ckpt, config, data, report;
};

int run_eval(const EvalArgs& a) {
  const auto model = load_model(a.ckpt, a.config);
  const auto pairs = load_pairs(a.data);
  std::vector<MetricRow> rows(pairs.size());
  const std::size_t workers = std::min(thread_count(), std::max<std::size_t>(1, pairs.size()));
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < pairs.size(); i += workers) {
          auto pred = derain(model, pairs[i].pair.rainy);
          rows[i] = {pairs[i].name, psnr(pred, pairs[i].pair.clean), ssim(pred, pairs[i].pair.clean)};
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  if (a.report.empty()) {
    write_report(std::cout, rows);
  } else {
    std::ostringstream os;
    write_report(os, rows);
    detail::write_file_atomic(a.report, os.str());
    std::cout << os.str();
  }
  return kOk;
}

struct GradArgs {
  std::string config;
  ModelGradCheckOptions opt;
};

int run_gradcheck(const GradArgs& a) {
  const auto rc = load_config(a.config);
  const auto report = model_gradcheck(rc.model, a.opt);
  for (const auto& g : report.groups)
    std::printf("%s\t%.3e\t%zu\t%s\n", g.name.c_str(), g.max_rel_error, g.checked,
                g.max_rel_error <= a.opt.tol ? "ok" : "FAIL");
  std::printf("max_rel_error\t%.3e\ttol\t%.1e\t%s\n", report.max_error(), a.opt.tol, report.pass ? "PASS" : "FAIL");
  return report.pass ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rain removal with multi-scale transformers and implicit neural representations"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a paired synthetic rain corpus");
  synth->add_option("--out", sa.out, "Output dataset root")->required();
  synth->add_option("--count", sa.corpus.count, "Number of pairs")->required();
  synth->add_option("--size", sa.corpus.size, "Image extent in pixels")->default_val(64)->check(CLI::Range(8, 4096));
  synth->add_option("--seed", sa.corpus.seed, "Random seed")->default_val(0);
  synth->add_option("--intensity", sa.corpus.intensity, "Streak intensity")->default_val(0.4)->check(CLI::Range(0.0, 1.0));
  synth->add_option("--streaks", sa.corpus.streaks, "Streaks per image (0: area / 100)")->default_val(0);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", ta.config, "Run configuration file")->required();
  train->add_option("--data", ta.data, "Training dataset root")->required();
  train->add_option("--out", ta.out, "Directory for checkpoints and log.tsv")->required();
  train->add_option("--val", ta.val, "Validation dataset root");
  train->add_option("--resume", ta.resume, "Checkpoint to continue from");
  train->add_option("--max-steps", ta.max_steps, "Stop after this many steps (0: full schedule)")->default_val(0);

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Derain one image");
  auto* ick = infer->add_option("--ckpt", ia.ckpt, "Checkpoint");
  auto* icf = infer->add_option("--config", ia.config, "Use a freshly initialised model instead");
  ick->excludes(icf);
  infer->add_option("--in", ia.in, "Input PNG")->required();
  infer->add_option("--out", ia.out, "Output PNG")->required();
  infer->add_flag("--scale-outputs", ia.scale_outputs, "Also write S1/S2 outputs and INR reconstructions");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Y-channel PSNR/SSIM over a dataset");
  auto* eck = eval->add_option("--ckpt", ea.ckpt, "Checkpoint");
  auto* ecf = eval->add_option("--config", ea.config, "Use a freshly initialised model instead");
  eck->excludes(ecf);
  eval->add_option("--data", ea.data, "Dataset root")->required();
  eval->add_option("--report", ea.report, "Also write the report to this file");

  GradArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every parameter group");
  grad->add_option("--config", ga.config, "Run configuration file")->required();
  grad->add_option("--tol", ga.opt.tol, "Relative tolerance")->default_val(1e-3);
  grad->add_option("--size", ga.opt.size, "Input extent")->default_val(16)->check(CLI::Range(8, 256));
  grad->add_option("--coords", ga.opt.max_coords, "Coordinates probed per tensor")->default_val(2);
  grad->add_option("--seed", ga.opt.seed, "Seed for parameters and input")->default_val(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if ((*infer) && ia.ckpt.empty() && ia.config.empty()) throw ConfigError("infer needs --ckpt or --config");
    if ((*eval) && ea.ckpt.empty() && ea.config.empty()) throw ConfigError("eval needs --ckpt or --config");
    if (*synth) return run_synth(sa);
    if (*train) return run_train(ta);
    if (*infer) return run_infer(ia);
    if (*eval) return run_eval(ea);
    if (*grad) return run_gradcheck(ga);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
