// SPDX-License-Identifier: Apache-2.0
//
// pamoe: train, compare-routing, ablate, report, selfcheck.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "pamoe/config.hpp"
#include "pamoe/errors.hpp"
#include "pamoe/experiment.hpp"
#include "pamoe/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace pamoe;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON configuration file (defaults when omitted)");
  cmd->add_option("-s,--set", c.overrides, "Dotted-path override key=value, repeatable");
  cmd->add_option("-o,--out", c.out_dir, "Run directory (default: $PAMOE_OUTPUT_ROOT/<output_dir>)");
  cmd->add_flag("-v,--verbose", c.verbose, "Progress on stderr");
}

ExperimentConfig resolve_config(const Common& c) {
  nlohmann::json doc = to_json(ExperimentConfig{});
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw ConfigError("cannot open config '" + c.config_path + "'");
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  apply_overrides(doc, c.overrides);
  return config_from_json(doc);
}

fs::path run_directory(const Common& c, const ExperimentConfig& config, const std::string& suffix = "") {
  if (!c.out_dir.empty()) return c.out_dir;
  fs::path p = output_root() / config.output_dir;
  return suffix.empty() ? p : p / suffix;
}

std::string arm_name(const ExperimentConfig& c) {
  if (c.surgery != SurgeryMode::Off) return std::string(to_string(c.surgery));
  return std::string(to_string(c.routing));
}

std::vector<std::string> names(const std::vector<Arm>& arms) {
  std::vector<std::string> out;
  for (const Arm& a : arms) out.push_back(a.name);
  return out;
}

std::vector<RunResult> run_with_manifest(const fs::path& dir, const ExperimentConfig& config,
                                         const std::vector<Arm>& arms, bool verbose) {
  write_manifest(dir, config, names(arms), config.training.seeds);
  BackboneCache cache;
  return run_arms(dir, arms, config.training.seeds, cache, verbose);
}

void print_summary(std::ostream& out, const std::vector<RunResult>& runs) {
  std::map<std::string, std::vector<const RunResult*>> by_arm;
  std::vector<std::string> order;
  for (const RunResult& r : runs) {
    if (by_arm[r.arm].empty()) order.push_back(r.arm);
    by_arm[r.arm].push_back(&r);
  }
  out << std::left << std::setw(20) << "arm" << std::setw(22) << "success" << std::setw(22) << "step switches"
      << "kl collapse\n";
  for (const std::string& arm : order) {
    std::vector<double> s, sw, kl;
    for (const RunResult* r : by_arm[arm]) {
      s.push_back(r->eval.overall_success);
      sw.push_back(r->mean_step_switches);
      kl.push_back(r->eval.kl_collapse_fraction);
    }
    auto fmt = [](const MeanStd& m) {
      std::ostringstream o;
      o << std::fixed << std::setprecision(3) << m.mean << " +- " << m.std;
      return o.str();
    };
    out << std::setw(20) << arm << std::setw(22) << fmt(mean_std(s)) << std::setw(22) << fmt(mean_std(sw))
        << fmt(mean_std(kl)) << '\n';
  }
}

int cmd_train(const Common& c) {
  const ExperimentConfig config = resolve_config(c);
  const fs::path dir = run_directory(c, config);
  const std::vector<RunResult> runs = run_with_manifest(dir, config, {{arm_name(config), config}}, c.verbose);
  print_summary(std::cout, runs);
  std::cout << "outputs: " << dir.string() << '\n';
  return 0;
}

int cmd_compare(const Common& c) {
  const ExperimentConfig config = resolve_config(c);
  const fs::path dir = run_directory(c, config, "compare-routing");
  const std::vector<RunResult> runs = run_with_manifest(dir, config, routing_arms(config), c.verbose);
  {
    std::ofstream out(dir / "comparison.csv", std::ios::binary);
    out << "arm,seed,success,step_switches,token_switches\n";
    for (const RunResult& r : runs) {
      out << r.arm << ',' << r.seed << ',' << format_number(r.eval.overall_success) << ','
          << format_number(r.mean_step_switches) << ',' << format_number(r.mean_token_switches) << '\n';
    }
  }
  {
    std::vector<SwitchRow> rows;
    for (const RunResult& r : runs) {
      for (SwitchRow& s : r.switch_rows()) rows.push_back(std::move(s));
    }
    std::ofstream out(dir / "switches.csv", std::ios::binary);
    write_switches_csv(out, rows);
  }
  print_summary(std::cout, runs);
  std::cout << "outputs: " << dir.string() << '\n';
  return 0;
}

int cmd_ablate(const Common& c, const std::string& axis) {
  const ExperimentConfig config = resolve_config(c);
  const fs::path dir = run_directory(c, config, "ablate-" + axis);
  const std::vector<RunResult> runs = run_with_manifest(dir, config, ablation_arms(config, axis), c.verbose);
  std::ofstream out(dir / "ablation.csv", std::ios::binary);
  write_report(out, build_report({dir}));
  print_summary(std::cout, runs);
  std::cout << "outputs: " << dir.string() << '\n';
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out_dir) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const std::vector<ReportRow> rows = build_report(paths);
  const fs::path out = out_dir.empty() ? output_root() / "report" : fs::path(out_dir);
  fs::create_directories(out);
  {
    std::ofstream f(out / "summary.csv", std::ios::binary);
    write_report(f, rows);
  }
  write_figure_data(out, paths);
  write_report(std::cout, rows);
  return 0;
}

int cmd_selfcheck(int cases, std::uint64_t seed) {
  bool ok = true;
  for (const CheckResult& r : run_selfcheck(cases, seed)) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Phase-aware mixture-of-experts RL experiments"};
  app.require_subcommand(1);

  Common train_opts, compare_opts, ablate_opts;
  CLI::App* train = app.add_subcommand("train", "Train every configured seed");
  add_common(train, train_opts);

  CLI::App* compare = app.add_subcommand("compare-routing", "Token, trajectory and phase routing arms");
  add_common(compare, compare_opts);

  CLI::App* ablate = app.add_subcommand("ablate", "Sweep one ablation axis");
  add_common(ablate, ablate_opts);
  std::string axis;
  ablate->add_option("axis", axis, "K, router_components, regularizers or surgery")
      ->required()
      ->check(CLI::IsMember({"K", "router_components", "regularizers", "surgery"}));

  CLI::App* report = app.add_subcommand("report", "Aggregate seeds of finished runs");
  std::vector<std::string> report_dirs;
  std::string report_out;
  report->add_option("runs", report_dirs, "Run directories");
  report->add_option("-o,--out", report_out, "Report directory (default: $PAMOE_OUTPUT_ROOT/report)");

  CLI::App* selfcheck = app.add_subcommand("selfcheck", "Gradient and expert-isolation checks");
  int cases = 100;
  std::uint64_t seed = 0;
  selfcheck->add_option("--cases", cases, "Random cases per op")->check(CLI::PositiveNumber);
  selfcheck->add_option("--seed", seed, "Root seed");

  CLI11_PARSE(app, argc, argv);

  fs::path dump_dir = output_root();
  try {
    if (*train) {
      dump_dir = train_opts.out_dir.empty() ? dump_dir : fs::path(train_opts.out_dir);
      return cmd_train(train_opts);
    }
    if (*compare) {
      dump_dir = compare_opts.out_dir.empty() ? dump_dir : fs::path(compare_opts.out_dir);
      return cmd_compare(compare_opts);
    }
    if (*ablate) {
      dump_dir = ablate_opts.out_dir.empty() ? dump_dir : fs::path(ablate_opts.out_dir);
      return cmd_ablate(ablate_opts, axis);
    }
    if (*report) return cmd_report(report_dirs, report_out);
    if (*selfcheck) return cmd_selfcheck(cases, seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalAbort& e) {
    std::error_code ec;
    fs::create_directories(dump_dir, ec);
    const fs::path dump = dump_dir / "numerical_dump.txt";
    std::ofstream(dump) << e.dump();
    std::cerr << "numerical abort: " << e.what() << "\ndiagnostics: " << dump.string() << '\n';
    return kExitNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
