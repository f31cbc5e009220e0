// evprobe command-line driver.
//
//   evprobe compare --config cfg.json [--out DIR]
//   evprobe sweep   --config cfg.json [--out DIR]
//   evprobe ard     --config cfg.json [--out DIR]
//   evprobe toy     --out DIR [--seed N]
//   evprobe report  --dir DIR [--out DIR]
//
// Exit status is 0 only when every job succeeded, 1 when some job failed
// and 2 on usage or input errors.

#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "evprobe/experiments.hpp"

namespace {

using namespace evprobe;

fs::path output_dir(const ExperimentConfig& cfg, const std::string& override_dir) {
  return override_dir.empty() ? fs::path(cfg.output_dir) : fs::path(override_dir);
}

void print_table(const ComparisonTable& table) {
  for (const auto& c : table.cells) {
    std::cout << c.task << " / " << c.representation << ": ";
    if (c.depth < 0) {
      std::cout << "failed\n";
      continue;
    }
    std::cout << "logZ/N " << c.mean_log_evidence_per_example << " +- " << c.spread << ", depth " << c.depth
              << (c.best ? "  [best]" : "") << (c.failed ? "  (" + std::to_string(c.failed) + " failed)" : "")
              << '\n';
  }
}

int cmd_compare(const std::string& config, const std::string& out) {
  const auto cfg = load_experiment_config(config);
  if (cfg.tasks.empty()) throw Error("compare: config lists no tasks");
  const auto dir = output_dir(cfg, out);
  const auto run = run_comparison(cfg);
  write_comparison(dir, run);
  write_text(dir / "config.resolved.json", config_to_json(cfg).dump(2) + "\n");
  print_table(run.table);
  for (const auto& c : run.table.cells) {
    for (const auto& e : c.errors) std::cerr << "job failed: " << c.task << " / " << c.representation << ", " << e << '\n';
  }
  std::cout << "wrote " << (dir / "comparison.json").string() << '\n';
  return run.table.all_succeeded() ? 0 : 1;
}

int cmd_sweep(const std::string& config, const std::string& out) {
  const auto cfg = load_experiment_config(config);
  if (!cfg.sweep) throw Error("sweep: config has no sweep section");
  const auto& s = *cfg.sweep;
  const auto task = materialize(s.task, cfg.representations, s.representation, s.seed);
  const ProbeArchitecture arch{s.depth, cfg.hidden_width, static_cast<int>(task.x_train.cols()), task.num_classes};
  TrainConfig train = cfg.train;
  train.init_seed = s.seed;
  train.shuffle_seed = s.seed;
  const auto points = run_decay_sweep(task, arch, s.lambdas, train, s.curvature);
  const auto dir = output_dir(cfg, out);
  write_text(dir / "sweep.csv", render_sweep_csv(points));
  const auto& sel = points[evidence_argmax(points)];
  std::cout << "evidence-selected lambda " << sel.lambda << ": train CE " << sel.train_ce << ", test CE "
            << sel.test_ce << '\n'
            << "wrote " << (dir / "sweep.csv").string() << '\n';
  return 0;
}

int cmd_ard(const std::string& config, const std::string& out) {
  const auto cfg = load_experiment_config(config);
  if (!cfg.ard) throw Error("ard: config has no ard section");
  const auto dir = output_dir(cfg, out);
  std::ostringstream summary;
  summary << "run,weights,fraction_at_upper,zero_out_threshold,log_evidence,bimodal\n";
  int status = 0;
  for (const auto& run : cfg.ard->runs) {
    try {
      const auto task = materialize(run.task, cfg.representations, run.representation, cfg.ard->seed);
      const auto r = run_ard(task, cfg.ard->options, cfg.ard->seed);
      write_text(dir / ("ard_" + run.name + "_histogram.csv"), render_histogram_csv(r));
      write_text(dir / ("ard_" + run.name + "_precisions.csv"), render_precisions_csv(r));
      std::ostringstream trace;
      write_trace_csv(trace, r.trace);
      write_text(dir / ("ard_" + run.name + "_trace.csv"), trace.str());
      const bool bimodal = histogram_is_bimodal(r.weight_counts());
      summary << run.name << ',' << r.weight_count << ',' << format_double(r.weight_fraction_at_upper) << ','
              << format_double(r.zero_out_threshold) << ',' << format_double(r.fit.log_evidence) << ','
              << (bimodal ? 1 : 0) << '\n';
      std::cout << run.name << ": " << r.weight_fraction_at_upper * 100.0 << "% of weights at the upper mode, logZ "
                << r.fit.log_evidence << '\n';
    } catch (const std::exception& e) {
      std::cerr << "ard run " << run.name << " failed: " << e.what() << '\n';
      status = 1;
    }
  }
  write_text(dir / "ard_summary.csv", summary.str());
  return status;
}

int cmd_toy(const std::string& out, std::uint64_t seed) {
  const auto r = run_toy(seed);
  write_toy(out, r, seed);
  for (const auto& f : r.fits) {
    std::cout << f.representation << " + " << f.probe << ": logZ " << f.fit.log_evidence << '\n';
  }
  return 0;
}

int cmd_report(const std::string& in, const std::string& out) {
  const auto table = report(in, out.empty() ? in : out);
  print_table(table);
  return table.all_succeeded() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evidence-based probing: compare representations by the marginal likelihood of probes"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::string in_dir;
  std::uint64_t seed = 0;

  auto* compare = app.add_subcommand("compare", "Select a probe per (task, representation, seed) and tabulate");
  compare->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  compare->add_option("--out", out, "Output directory (overrides output_dir)");

  auto* sweep = app.add_subcommand("sweep", "Fixed-precision weight-decay sweep");
  sweep->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", out, "Output directory (overrides output_dir)");

  auto* ard = app.add_subcommand("ard", "Per-parameter precision histograms");
  ard->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  ard->add_option("--out", out, "Output directory (overrides output_dir)");

  auto* toy = app.add_subcommand("toy", "Two-cluster toy: informative vs random representation, linear vs neural probe");
  toy->add_option("--out", out, "Output directory")->required();
  toy->add_option("--seed", seed, "Data and training seed");

  auto* rep = app.add_subcommand("report", "Re-render comparison tables from job records");
  rep->add_option("--dir", in_dir, "Directory written by compare")->required()->check(CLI::ExistingDirectory);
  rep->add_option("--out", out, "Output directory (default: --dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version come through here too, with exit code 0.
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*compare) return cmd_compare(config, out);
    if (*sweep) return cmd_sweep(config, out);
    if (*ard) return cmd_ard(config, out);
    if (*toy) return cmd_toy(out, seed);
    if (*rep) return cmd_report(in_dir, out);
  } catch (const std::exception& e) {
    std::cerr << "evprobe: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
