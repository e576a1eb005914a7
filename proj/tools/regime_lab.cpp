// regime_lab command-line driver.
//
//   regime_lab simulate  [--config F] [--seed N] [--out DIR]
//   regime_lab backtest  [--config F] [--seed N] [--out DIR] [--model NAME] [--prices F] [--index F]
//   regime_lab rv        [--config F] [--seed N] [--out DIR] [--prices F] [--index F]
//   regime_lab gradcheck [--seeds N] [--tolerance T]
//
// Exit codes: 0 success, 1 gradcheck tolerance exceeded, 2 configuration or
// usage error, 3 input data error, 4 any other runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "regime_lab/config.hpp"
#include "regime_lab/gradcheck.hpp"

namespace {

using namespace regime_lab;

constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

struct CommonArgs {
  std::string config;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::string out;
  std::string model;
  std::string prices;
  std::string index;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_data) {
  cmd->add_option("--config", a.config, "JSON run configuration")->check(CLI::ExistingFile);
  a.seed_opt = cmd->add_option("--seed", a.seed, "Seed (overrides the config)");
  cmd->add_option("--out", a.out, "Output directory (overrides the config)");
  if (with_data) {
    cmd->add_option("--prices", a.prices, "Stock price CSV (overrides data.prices)");
    cmd->add_option("--index", a.index, "Index/VIX CSV (overrides data.index)");
  }
}

RunConfig resolve(const CommonArgs& a) {
  RunConfig c = a.config.empty() ? parse_run_config(nlohmann::json::object(), a.model)
                                 : load_run_config(a.config, a.model);
  if (a.seed_opt && a.seed_opt->count() > 0) c.seed = a.seed;
  if (!a.out.empty()) c.output_dir = a.out;
  if (!a.prices.empty()) c.data.prices = a.prices;
  if (!a.index.empty()) c.data.index = a.index;
  c.validate();
  return c;
}

void prepare_output(const RunConfig& c) {
  std::error_code ec;
  std::filesystem::create_directories(c.output_dir, ec);
  if (ec || !std::filesystem::is_directory(c.output_dir)) {
    throw std::runtime_error(c.output_dir + ": cannot create output directory");
  }
  write_resolved_config(c, c.output_dir + "/config.json");
}

int cmd_simulate(const CommonArgs& a) {
  const RunConfig c = resolve(a);
  prepare_output(c);
  const SimPanel sim = simulate(c.simulate.regime, c.simulate.n_stocks, c.simulate.n_days, c.seed);
  const std::string prices = c.output_dir + "/prices.csv", index = c.output_dir + "/index.csv";
  write_panel(sim.panel, prices, index);
  write_regimes(sim, c.output_dir + "/regimes.csv");
  std::cout << "simulated " << sim.panel.n_tickers() << " stocks x " << sim.panel.n_days() << " days ("
            << format_date(sim.panel.dates.front()) << " .. " << format_date(sim.panel.dates.back()) << ") -> "
            << c.output_dir << '\n';
  return 0;
}

int cmd_backtest(const CommonArgs& a) {
  const RunConfig c = resolve(a);
  const PricePanel panel = load_panel(c.data.prices, c.data.index);
  prepare_output(c);
  const BacktestReport r = run_experiment(panel, c.experiment());
  write_report(r, c.output_dir);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  if (r.drops.candidates > 0) {
    std::cerr << "dropped rows: " << r.drops.missing_features << " missing features, " << r.drops.missing_forward
              << " missing forward returns, " << r.drops.degenerate_dates << " degenerate dates (of "
              << r.drops.candidates << " candidates)\n";
  }
  std::printf("%s: %zu windows, %zu samples, annualized return %.4f, sharpe %.3f, out-of-sample CE %.4f\n",
              r.model.c_str(), r.windows.size(), r.samples, r.aggregate.annualized_return, r.aggregate.sharpe,
              r.aggregate.out_sample_cross_entropy);
  if (r.diagnostics) {
    const auto& d = *r.diagnostics;
    auto show = [](const Correlation& x) { return x.defined ? std::to_string(x.value) : std::string("undefined"); };
    std::cout << "mask correlations: vix/reversal " << show(d.vix_reversal) << ", vix/momentum "
              << show(d.vix_momentum) << ", reversal/momentum " << show(d.reversal_momentum) << '\n';
  }
  return 0;
}

int cmd_rv(const CommonArgs& a) {
  const RunConfig c = resolve(a);
  PricePanel panel;
  if (c.rv.source == "data") {
    panel = load_panel(c.data.prices, c.data.index);
  } else {
    panel = simulate_vol_index(c.rv.vol_index, c.rv.n_months, c.seed).panel;
  }
  prepare_output(c);
  const RvEvalReport r = run_rv_experiment(panel, c.rv_config());
  write_rv_report(r, c.output_dir + "/rv_report.csv");
  {
    std::ofstream out(c.output_dir + "/rv_report.json");
    out << rv_report_to_json(r).dump(2) << '\n';
    if (!out) throw std::runtime_error(c.output_dir + "/rv_report.json: write failed");
  }
  if (r.degenerate) std::cerr << "warning: target has zero variance; R^2 undefined for every model\n";
  std::printf("%-18s %10s %10s\n", "model", "in R^2", "out R^2");
  for (const auto& m : r.models) {
    if (m.defined) {
      std::printf("%-18s %10.4f %10.4f\n", m.model.c_str(), m.in_sample_r2, m.out_sample_r2);
    } else {
      std::printf("%-18s %10s %10s\n", m.model.c_str(), "-", "-");
    }
  }
  return 0;
}

int cmd_gradcheck(std::size_t seeds, double tolerance) {
  bool ok = true;
  for (const auto& c : gradcheck_cases()) {
    const GradCheckSummary s = run_gradcheck_case(c, seeds);
    const bool pass = s.max_relative_error <= tolerance;
    ok = ok && pass;
    std::printf("%-18s seeds=%zu params=%zu max_rel_err=%.3e (%s) %s\n", s.name.c_str(), s.seeds, s.checked,
                s.max_relative_error, s.worst.c_str(), pass ? "ok" : "FAIL");
  }
  return ok ? 0 : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Regime-switching cross-sectional equity models: simulation, backtests, RV forecasting"};
  app.require_subcommand(1);

  CommonArgs sim_args, bt_args, rv_args;
  auto* sim = app.add_subcommand("simulate", "Write a synthetic two-regime market panel");
  add_common(sim, sim_args, false);

  auto* bt = app.add_subcommand("backtest", "Rolling-window train/test and long-short backtest");
  add_common(bt, bt_args, true);
  bt->add_option("--model", bt_args.model, "linear | ann | attention_resnet | switching_resnet");

  auto* rv = app.add_subcommand("rv", "Next-month realized variance forecasting comparison");
  add_common(rv, rv_args, true);

  std::size_t gc_seeds = 20;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  gc->add_option("--seeds", gc_seeds, "Random seeds per architecture")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", gc_tol, "Maximum relative error")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (sim->parsed()) return cmd_simulate(sim_args);
    if (bt->parsed()) return cmd_backtest(bt_args);
    if (rv->parsed()) return cmd_rv(rv_args);
    if (gc->parsed()) return cmd_gradcheck(gc_seeds, gc_tol);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}
