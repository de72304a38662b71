// lpf: generate benchmark splits, train, evaluate, sweep gamma and convert reports.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lpf/lpf.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct Options {
  // shared
  std::uint64_t seed = 0;
  double gamma = 1.0;
  std::string variant = "lpf";
  double lr = 3e-4;
  std::size_t batch_size = 256;
  std::size_t epochs = 21;
  std::string out;
  std::string format = "json";

  // benchmark
  lpf::BenchmarkConfig bench;

  // model
  lpf::ModelConfig dims;

  // subcommand inputs
  std::string split;
  std::string checkpoint;
  std::string run_log;
  std::string train_split;
  std::string data_dir;
  std::string label;
  std::vector<double> gammas{0, 1, 2, 3, 4, 5};
  std::vector<std::string> inputs;
};

lpf::ReportFormat report_format(const std::string& s) {
  return s == "csv" ? lpf::ReportFormat::Csv : lpf::ReportFormat::Json;
}

lpf::TrainConfig train_config(const Options& o, const lpf::BenchmarkConfig& bench) {
  lpf::TrainConfig t;
  t.variant = lpf::LossVariant{lpf::parse_loss_kind(o.variant), o.gamma};
  if (t.variant.kind == lpf::LossKind::CE) t.variant.gamma = 0.0;
  t.lr = o.lr;
  t.batch_size = o.batch_size;
  t.epochs = o.epochs;
  t.seed = o.seed;
  t.model = lpf::model_config_for(bench, o.dims);
  t.model.seed = o.seed;
  return t;
}

int run_gen(const Options& o) {
  lpf::BenchmarkConfig cfg = o.bench;
  cfg.seed = o.seed;
  const lpf::Benchmark b = lpf::generate_benchmark(cfg);
  fs::create_directories(o.out);
  const fs::path dir(o.out);
  lpf::write_split(b.train, (dir / "train.split").string());
  lpf::write_split(b.id_test, (dir / "id_test.split").string());
  lpf::write_split(b.ood_test, (dir / "ood_test.split").string());
  std::printf("wrote %zu/%zu/%zu samples to %s (fingerprint %s)\n", b.train.size(), b.id_test.size(),
              b.ood_test.size(), o.out.c_str(), cfg.fingerprint().c_str());
  std::printf("question-only ceiling %.4f, prior trap on ood %.4f\n", lpf::question_only_ceiling(b.priors.train),
              lpf::prior_trap_accuracy(b.priors.train, b.priors.test));
  return 0;
}

int run_train(const Options& o) {
  const lpf::Split split = lpf::read_split(o.split);
  const lpf::TrainConfig cfg = train_config(o, split.config);
  const lpf::TrainResult r = lpf::train(split, cfg);
  lpf::write_checkpoint(r.params, o.out);
  const std::string log_path = o.run_log.empty() ? o.out + ".log.csv" : o.run_log;
  lpf::write_file(log_path, lpf::serialize_run_log(r.log));
  if (!r.log.epochs.empty()) {
    const auto& last = r.log.epochs.back();
    std::printf("%s gamma=%g: %zu steps, final l_lpf %.4f l_qo %.4f train acc %.4f\n",
                std::string(lpf::to_string(cfg.variant.kind)).c_str(), cfg.variant.gamma, r.log.steps,
                last.mean_l_lpf, last.mean_l_qo, last.train_accuracy);
  }
  return 0;
}

int run_eval(const Options& o, bool variant_given, bool gamma_given) {
  const lpf::VqaModelParams params = lpf::read_checkpoint(o.checkpoint);
  const lpf::Split split = lpf::read_split(o.split);
  std::optional<lpf::PriorTable> train_prior;
  if (!o.train_split.empty()) train_prior = lpf::empirical_prior(lpf::read_split(o.train_split));
  lpf::EvalReport rep = lpf::evaluate(params, split, train_prior ? &*train_prior : nullptr);
  rep.label = o.label.empty() ? fs::path(o.split).stem().string() : o.label;
  if (variant_given) rep.variant = o.variant;
  if (gamma_given) rep.gamma = o.gamma;
  const std::vector<lpf::EvalReport> reps{rep};
  if (o.out.empty()) {
    std::cout << lpf::serialize_reports(reps, report_format(o.format));
  } else {
    lpf::emit_report(reps, o.out, report_format(o.format));
  }
  std::fprintf(stderr, "%s: accuracy %.4f, mean KL to split %.4f\n", rep.label.c_str(), rep.accuracy,
               rep.mean_kl_to_split);
  return 0;
}

int run_sweep(const Options& o) {
  const fs::path dir(o.data_dir);
  const lpf::Split train_split = lpf::read_split((dir / "train.split").string());
  const lpf::Split id_test = lpf::read_split((dir / "id_test.split").string());
  const lpf::Split ood_test = lpf::read_split((dir / "ood_test.split").string());
  const auto rows = lpf::sweep_gamma(o.gammas, train_config(o, train_split.config), train_split, id_test, ood_test);
  std::vector<lpf::EvalReport> reps;
  std::printf("%8s %10s %10s %10s\n", "gamma", "id_acc", "ood_acc", "ood_kl");
  for (const auto& row : rows) {
    std::printf("%8g %10.4f %10.4f %10.4f\n", row.gamma, row.in_distribution.accuracy,
                row.out_of_distribution.accuracy, row.out_of_distribution.mean_kl_to_split);
    reps.push_back(row.in_distribution);
    reps.push_back(row.out_of_distribution);
  }
  if (!o.out.empty()) lpf::emit_report(reps, o.out, report_format(o.format));
  return 0;
}

int run_report(const Options& o) {
  std::vector<lpf::EvalReport> all;
  for (const auto& path : o.inputs) {
    auto reps = lpf::read_reports(path);
    all.insert(all.end(), reps.begin(), reps.end());
  }
  if (o.out.empty()) {
    std::cout << lpf::serialize_reports(all, report_format(o.format));
  } else {
    lpf::emit_report(all, o.out, report_format(o.format));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-prior feedback training on a synthetic VQA benchmark"};
  app.set_config("--config", "", "Key-value config file; command-line flags take precedence");
  app.require_subcommand(1);
  app.fallthrough();

  Options o;
  const std::vector<std::string> variants{"ce", "lpf", "focal", "precomputed"};
  app.add_option("--seed", o.seed, "Seed for data, initialisation and shuffling");
  auto* gamma_opt = app.add_option("--gamma", o.gamma, "Focusing exponent")->check(CLI::NonNegativeNumber);
  auto* variant_opt =
      app.add_option("--variant", o.variant, "Loss variant")->check(CLI::IsMember(variants));
  app.add_option("--lr", o.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  app.add_option("--batch-size", o.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
  app.add_option("--epochs", o.epochs, "Training epochs");
  app.add_option("--format", o.format, "Report format")->check(CLI::IsMember({"json", "csv"}));

  app.add_option("--num-qtypes", o.bench.num_qtypes, "Question types");
  app.add_option("--answers-per-qtype", o.bench.answers_per_qtype, "Answers per question type");
  app.add_option("--v-in-dim", o.bench.v_in_dim, "Visual feature dimension");
  app.add_option("--noise-std", o.bench.noise_std, "Feature noise standard deviation");
  app.add_option("--zipf-s", o.bench.zipf_s, "Zipf exponent of the answer priors");
  app.add_option("--n-train", o.bench.n_train, "Training samples");
  app.add_option("--n-test", o.bench.n_test, "Samples per test split");

  app.add_option("--embed-dim", o.dims.embed_dim, "Token embedding width");
  app.add_option("--q-dim", o.dims.q_dim, "Question encoding width");
  app.add_option("--v-dim", o.dims.v_dim, "Visual encoding width");
  app.add_option("--joint-dim", o.dims.joint_dim, "Fusion width");
  app.add_option("--hidden-dim", o.dims.hidden_dim, "Classifier hidden width");
  app.add_option("--qo-hidden-dim", o.dims.qo_hidden_dim, "Question-only hidden width");

  auto* gen = app.add_subcommand("gen", "Write train, id_test and ood_test split files");
  gen->add_option("--out", o.out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model on a split file");
  tr->add_option("--split", o.split, "Training split")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", o.out, "Checkpoint path")->required();
  tr->add_option("--log", o.run_log, "Run log CSV (default: <out>.log.csv)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", o.split, "Split to evaluate")->required()->check(CLI::ExistingFile);
  ev->add_option("--train-split", o.train_split, "Training split, for KL to the training prior")
      ->check(CLI::ExistingFile);
  ev->add_option("--label", o.label, "Report label (default: split file stem)");
  ev->add_option("--out", o.out, "Report path (default: stdout)");

  auto* sw = app.add_subcommand("sweep", "Train one LPF model per gamma and report both test splits");
  sw->add_option("--data", o.data_dir, "Directory written by gen")->required()->check(CLI::ExistingDirectory);
  sw->add_option("--gammas", o.gammas, "Gamma values")->delimiter(',');
  sw->add_option("--out", o.out, "Report path");

  auto* rp = app.add_subcommand("report", "Merge report files and convert between formats");
  rp->add_option("inputs", o.inputs, "Structured report files")->required()->check(CLI::ExistingFile);
  rp->add_option("--out", o.out, "Output path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) return run_gen(o);
    if (tr->parsed()) return run_train(o);
    if (ev->parsed()) return run_eval(o, variant_opt->count() > 0, gamma_opt->count() > 0);
    if (sw->parsed()) return run_sweep(o);
    if (rp->parsed()) return run_report(o);
  } catch (const lpf::NumericalError& e) {
    std::fprintf(stderr, "lpf: numerical failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const lpf::InvalidArgument& e) {
    std::fprintf(stderr, "lpf: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "lpf: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
