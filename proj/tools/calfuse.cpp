// calfuse command-line driver.
//
//   calfuse synth            generate a synthetic CFEB benchmark
//   calfuse run              run a class-incremental experiment
//   calfuse export-features  dump calibrated features from a saved state as CSV
//   calfuse metrics          recompute and verify Avg/Last of a report
//
// Exit codes: 0 success, 1 validation error, 2 I/O or file-format error.

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "calfuse/data.hpp"
#include "calfuse/harness.hpp"

namespace {

using namespace calfuse;

constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;

std::vector<std::uint32_t> parse_class_list(const std::string& text, std::size_t num_classes) {
  std::vector<std::uint32_t> out;
  if (text == "all") {
    for (std::size_t c = 0; c < num_classes; ++c) out.push_back(static_cast<std::uint32_t>(c));
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto dash = item.find('-');
    try {
      if (dash != std::string::npos && dash > 0) {
        const auto lo = std::stoul(item.substr(0, dash));
        const auto hi = std::stoul(item.substr(dash + 1));
        if (hi < lo) throw ValidationError("bad class range '" + item + "'");
        for (auto c = lo; c <= hi; ++c) out.push_back(static_cast<std::uint32_t>(c));
      } else {
        out.push_back(static_cast<std::uint32_t>(std::stoul(item)));
      }
    } catch (const std::logic_error&) {
      throw ValidationError("bad class list entry '" + item + "'");
    }
  }
  return out;
}

void print_report(const MetricsReport& r) {
  std::printf("%-6s %-6s %-6s %-9s %-8s %-8s\n", "phase", "new", "seen", "acc(%)", "lambda", "sec");
  for (const auto& p : r.phases) {
    std::printf("%-6zu %-6zu %-6zu %-9.2f %-8.4f %-8.2f\n", p.phase, p.new_classes, p.seen_classes, p.accuracy,
                p.lambda, p.seconds);
  }
  std::printf("phases: %zu  Avg: %.2f  Last: %.2f\n", r.phases.size(), r.avg, r.last);
}

std::string default_state_path(const std::string& report_path) {
  std::filesystem::path p(report_path);
  p.replace_extension(".state.json");
  return p.string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning with feature calibration and QR parameter fusion on frozen embeddings"};
  app.require_subcommand(1);

  // synth
  SyntheticSpec synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic Gaussian-cluster CFEB dataset");
  synth_cmd->add_option("--classes", synth.num_classes, "Number of classes")->capture_default_str();
  synth_cmd->add_option("--per-class-train", synth.per_class_train, "Training samples per class")->capture_default_str();
  synth_cmd->add_option("--per-class-test", synth.per_class_test, "Test samples per class")->capture_default_str();
  synth_cmd->add_option("--dim", synth.dim, "Embedding dimension")->capture_default_str();
  synth_cmd->add_option("--spread", synth.cluster_spread, "Cluster noise scale")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  synth_cmd->add_option("--anisotropy", synth.anisotropy, "Decay rate of the shared per-dimension noise variance (0 = isotropic)")
      ->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "Output CFEB path")->required();

  // run
  ExperimentConfig cfg;
  std::string protocol = "b0";
  std::string variant = "literal";
  std::string report_out;
  std::string state_out;
  bool no_fc = false, no_pf = false, no_distill = false, eval_raw = false;
  auto* run_cmd = app.add_subcommand("run", "Run a class-incremental experiment on a CFEB dataset");
  run_cmd->add_option("--data", cfg.data_path, "Input CFEB dataset")->required();
  run_cmd->add_option("--protocol", protocol, "Task protocol: b0 or b50")
      ->check(CLI::IsMember({"b0", "b50", "B0", "B50"}))
      ->capture_default_str();
  run_cmd->add_option("--inc", cfg.increment, "Classes per incremental task")->capture_default_str();
  run_cmd->add_option("--alpha", cfg.calibration.alpha, "Weight of the frozen features in calibration")->capture_default_str();
  run_cmd->add_option("--beta", cfg.fusion.beta, "Weight of the new task in parameter fusion")->capture_default_str();
  run_cmd->add_option("--fusion-variant", variant, "literal or r-inclusive")
      ->check(CLI::IsMember({"literal", "r-inclusive"}))
      ->capture_default_str();
  run_cmd->add_option("--tau", cfg.objective.tau, "Softmax temperature")->capture_default_str();
  run_cmd->add_option("--replay", cfg.replay_total, "Gaussian replay samples per task")->capture_default_str();
  run_cmd->add_option("--epochs", cfg.train.epochs, "Epochs per task")->capture_default_str();
  run_cmd->add_option("--lr", cfg.train.learning_rate, "Initial learning rate")->capture_default_str();
  run_cmd->add_option("--decay-epochs", cfg.train.decay_epochs, "Epochs at which the learning rate decays")
      ->delimiter(',')
      ->capture_default_str();
  run_cmd->add_option("--decay-factor", cfg.train.decay_factor, "Learning-rate decay factor")->capture_default_str();
  run_cmd->add_option("--batch", cfg.train.batch_size, "Batch size")->capture_default_str();
  run_cmd->add_option("--hidden", cfg.hidden_dim, "Adapter hidden width (0 = feature dimension)")->capture_default_str();
  run_cmd->add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
  run_cmd->add_flag("--no-fc", no_fc, "Disable feature calibration (zero-shot path)");
  run_cmd->add_flag("--no-pf", no_pf, "Disable parameter fusion");
  run_cmd->add_flag("--no-distill", no_distill, "Disable distillation");
  run_cmd->add_flag("--eval-raw", eval_raw, "Evaluate with trained rather than fused parameters");
  run_cmd->add_option("--out", report_out, "Output JSON report")->required();
  run_cmd->add_option("--state-out", state_out, "Output state file (default: <out>.state.json)");

  // export-features
  std::string state_in;
  std::string classes_text;
  std::string csv_out;
  std::string data_override;
  std::string split_name = "test";
  auto* export_cmd = app.add_subcommand("export-features", "Export calibrated features of a saved run as CSV");
  export_cmd->add_option("--state", state_in, "State file written by 'run'")->required();
  export_cmd->add_option("--classes", classes_text, "Class ids: comma list, ranges a-b, or 'all'")->required();
  export_cmd->add_option("--out", csv_out, "Output CSV path")->required();
  export_cmd->add_option("--data", data_override, "Dataset path (default: the one recorded in the state)");
  export_cmd->add_option("--split", split_name, "train or test")->check(CLI::IsMember({"train", "test"}))->capture_default_str();

  // metrics
  std::string report_in;
  auto* metrics_cmd = app.add_subcommand("metrics", "Recompute and verify Avg/Last of a report");
  metrics_cmd->add_option("--report", report_in, "JSON report written by 'run'")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*synth_cmd) {
      const auto ds = generate_synthetic(synth);
      write_dataset(ds, synth_out);
      std::printf("wrote %s: %zu classes, %zu train, %zu test, d=%zu\n", synth_out.c_str(), ds.num_classes(),
                  ds.train_labels.size(), ds.test_labels.size(), static_cast<std::size_t>(ds.feature_dim()));
      return 0;
    }

    if (*run_cmd) {
      cfg.protocol = parse_protocol(protocol);
      cfg.fusion.variant = parse_fusion_variant(variant);
      cfg.ablation = {!no_fc, !no_pf, !no_distill};
      cfg.eval_with_fused = !eval_raw;
      const auto ds = read_dataset(cfg.data_path);
      const auto flush = [&](const MetricsReport& r) { write_json(report_to_json(r), report_out); };
      const auto result = run_experiment(cfg, ds, flush);
      write_json(report_to_json(result.report), report_out);

      ExperimentState state;
      state.data_path = std::filesystem::absolute(cfg.data_path).string();
      state.calibration = cfg.ablation.fc ? cfg.calibration : CalibrationConfig{1.0};
      state.objective = cfg.objective;
      if (!result.eval_params.empty()) state.adapter = result.eval_params.back();
      write_json(state_to_json(state), state_out.empty() ? default_state_path(report_out) : state_out);
      print_report(result.report);
      return 0;
    }

    if (*export_cmd) {
      const auto state = state_from_json(read_json(state_in));
      const auto ds = read_dataset(data_override.empty() ? state.data_path : data_override);
      const auto classes = parse_class_list(classes_text, ds.num_classes());
      const Split split = split_name == "train" ? Split::train : Split::test;
      export_features(state.adapter ? &*state.adapter : nullptr, state.calibration, ds, classes, csv_out, split);
      std::printf("wrote %s\n", csv_out.c_str());
      return 0;
    }

    if (*metrics_cmd) {
      const auto report = report_from_json(read_json(report_in));
      const auto acc = report.accuracies();
      const auto m = compute_metrics(acc);
      std::printf("phases: %zu  Avg: %.4f  Last: %.4f\n", acc.size(), m.avg, m.last);
      const bool ok = std::abs(m.avg - report.avg) <= 1e-9 && m.last == report.last;
      if (!ok) {
        std::fprintf(stderr, "report inconsistent: recorded Avg %.6f Last %.6f\n", report.avg, report.last);
        return kExitValidation;
      }
      return 0;
    }
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitIo;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kExitIo;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kExitValidation;
  }
  return 0;
}
