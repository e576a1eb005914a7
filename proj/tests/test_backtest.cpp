#include "regime_lab/backtest.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "regime_lab/marketsim.hpp"

namespace regime_lab {
namespace {

std::vector<int> calendar_months(int y, unsigned m, int months) {
  return distinct_months(oracle::weekday_calendar(y, m, months));
}

std::vector<std::string> names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "T%04zu", i);
    out.emplace_back(buf);
  }
  return out;
}

TEST(RollWindowsTest, SixYearsGiveOneWindow) {
  RollingWindow w;  // 60 / 12 / 12
  const std::vector<int> months = calendar_months(2008, 1, 72);
  ASSERT_EQ(months.size(), 72u);
  const WindowPlan plan = roll_windows(months.size(), w);
  ASSERT_EQ(plan.windows.size(), 1u);
  EXPECT_EQ(plan.windows[0].train_begin, 0u);
  EXPECT_EQ(plan.windows[0].validation_begin, 54u);
  EXPECT_EQ(plan.windows[0].test_end, 72u);
}

TEST(RollWindowsTest, PaperCalendarTestsFrom2013ToMid2017) {
  const std::vector<int> months = calendar_months(2008, 1, 114);  // Jan 2008 .. Jun 2017
  const WindowPlan plan = roll_windows(months.size(), RollingWindow{});
  ASSERT_EQ(plan.windows.size(), 5u);
  const int jan2013 = 2013 * 12;
  std::set<std::size_t> covered;
  for (std::size_t k = 0; k < 5; ++k) {
    const auto& s = plan.windows[k];
    EXPECT_EQ(months[s.train_end], jan2013 + 12 * static_cast<int>(k));
    EXPECT_LE(s.train_end, s.test_end);
    EXPECT_LT(s.validation_begin, s.train_end);
    for (std::size_t m = s.train_end; m < s.test_end; ++m) EXPECT_TRUE(covered.insert(m).second);
  }
  EXPECT_EQ(plan.windows.back().test_end - plan.windows.back().train_end, 6u);
  EXPECT_EQ(covered.size(), 114u - 60u);
  EXPECT_FALSE(plan.warnings.empty());
}

TEST(RollWindowsTest, InsufficientHistoryAndBadStep) {
  const WindowPlan plan = roll_windows(50, RollingWindow{});
  EXPECT_TRUE(plan.windows.empty());
  EXPECT_FALSE(plan.warnings.empty());
  RollingWindow w;
  w.step_months = 6;
  EXPECT_THROW(roll_windows(100, w), ConfigError);
}

TEST(PortfolioTest, DecileCounts) {
  Rng rng(3);
  std::vector<double> p(20);
  for (double& v : p) v = rng.uniform();
  PortfolioSnapshot s = form_portfolio(p, names(20));
  ASSERT_EQ(s.longs.size(), 2u);
  ASSERT_EQ(s.shorts.size(), 2u);
  for (const auto& x : s.longs) EXPECT_EQ(x.weight, 0.5);
  for (const auto& x : s.shorts) EXPECT_EQ(x.weight, -0.5);

  std::vector<double> big(2000);
  for (double& v : big) v = rng.uniform();
  s = form_portfolio(big, names(2000));
  EXPECT_EQ(s.longs.size(), 200u);
  EXPECT_EQ(s.shorts.size(), 200u);

  EXPECT_THROW(form_portfolio(std::vector<double>{0.5}, names(1)), DataError);
}

TEST(PortfolioTest, TiesBreakByTickerAndLegsStayDisjoint) {
  std::vector<double> p(20, 0.5);
  const PortfolioSnapshot s = form_portfolio(p, names(20));
  EXPECT_EQ(s.longs[0].ticker, "T0000");
  EXPECT_EQ(s.longs[1].ticker, "T0001");
  EXPECT_EQ(s.shorts[0].ticker, "T0019");
  EXPECT_EQ(s.shorts[1].ticker, "T0018");
}

TEST(PortfolioTest, DeltaNeutralOnRandomInputs) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 10 + rng.below(300);
    std::vector<double> p(n);
    for (double& v : p) v = std::floor(rng.uniform() * 5) / 5;  // many ties
    const PortfolioSnapshot s = form_portfolio(p, names(n));
    double net = 0.0, lsum = 0.0;
    std::set<std::string> seen;
    for (const auto& x : s.longs) {
      net += x.weight;
      lsum += x.weight;
      EXPECT_TRUE(seen.insert(x.ticker).second);
    }
    for (const auto& x : s.shorts) {
      net += x.weight;
      EXPECT_TRUE(seen.insert(x.ticker).second);
    }
    EXPECT_NEAR(net, 0.0, 1e-12);
    EXPECT_NEAR(lsum, 1.0, 1e-12);
  }
}

PortfolioSnapshot two_by_two(const char* day) {
  PortfolioSnapshot s;
  s.date = *parse_date(day);
  s.longs = {{"A", 0.5}, {"B", 0.5}};
  s.shorts = {{"C", -0.5}, {"D", -0.5}};
  return s;
}

TEST(PnlTest, ArithmeticCases) {
  const std::vector<PortfolioSnapshot> snaps{two_by_two("2020-01-31")};
  PnlSeries a = compute_pnl(snaps, {{{"A", 0.1}, {"B", 0.1}, {"C", -0.1}, {"D", -0.1}}});
  ASSERT_EQ(a.pnl.size(), 1u);
  EXPECT_NEAR(a.pnl[0], 0.10, 1e-15);
  PnlSeries b = compute_pnl(snaps, {{{"A", 0.07}, {"B", 0.07}, {"C", 0.07}, {"D", 0.07}}});
  EXPECT_EQ(b.pnl[0], 0.0);
}

TEST(PnlTest, ThreeDateHandFixture) {
  const std::vector<PortfolioSnapshot> snaps{two_by_two("2020-01-31"), two_by_two("2020-02-28"),
                                             two_by_two("2020-03-31")};
  const std::vector<std::map<std::string, double>> r{
      {{"A", 0.04}, {"B", 0.02}, {"C", -0.01}, {"D", 0.03}},
      {{"A", 0.01}, {"B", -0.02}, {"C", 0.02}, {"D", 0.04}},
      {{"A", 0.05}, {"B", 0.03}, {"C", -0.02}, {"D", 0.00}}};
  const PnlSeries s = compute_pnl(snaps, r);
  ASSERT_EQ(s.pnl.size(), 3u);
  // Legs average (0.03, 0.01), (-0.005, 0.03), (0.04, -0.01); half of capital each.
  EXPECT_NEAR(s.pnl[0], 0.01, 1e-15);
  EXPECT_NEAR(s.pnl[1], -0.0175, 1e-15);
  EXPECT_NEAR(s.pnl[2], 0.025, 1e-15);
  EXPECT_NEAR(s.cumulative()[2], 0.0175, 1e-15);
  // In units of 1/2400: 24, -42, 60; mean 14; deviations 10, -56, 46.
  EXPECT_NEAR(annualized_return(s.pnl), 0.07, 1e-15);
  EXPECT_NEAR(sharpe_ratio(s.pnl, 0.0), 168.0 / std::sqrt(32112.0), 1e-12);
  EXPECT_NEAR(sharpe_ratio(s.pnl, 0.07), 0.0, 1e-12);
}

TEST(PnlTest, MissingReturnRenormalizesLeg) {
  const std::vector<PortfolioSnapshot> snaps{two_by_two("2020-01-31")};
  const PnlSeries s = compute_pnl(snaps, {{{"A", 0.04}, {"C", 0.01}, {"D", 0.03}}});
  ASSERT_EQ(s.pnl.size(), 1u);
  EXPECT_NEAR(s.pnl[0], 0.5 * 0.04 - 0.5 * 0.02, 1e-15);
  ASSERT_EQ(s.log.size(), 1u);
  EXPECT_NE(s.log[0].find("B dropped from long leg"), std::string::npos);
}

TEST(SharpeTest, FootnoteFormulaAndGuards) {
  EXPECT_NEAR(sharpe_from_moments(0.10, 0.02, 0.04), 2.0, 1e-15);
  EXPECT_THROW(sharpe_ratio(std::vector<double>{0.01, 0.01, 0.01}), DataError);
  EXPECT_THROW(sharpe_ratio(std::vector<double>{0.01}), DataError);
}

TEST(CrossEntropyTest, Cases) {
  EXPECT_NEAR(evaluate_cross_entropy(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<double>{1, 0, 1, 0}),
              std::log(2.0), 1e-15);
  EXPECT_NEAR(evaluate_cross_entropy(std::vector<double>{1.0, 0.0}, std::vector<double>{1, 0}), 0.0, 1e-11);
  const double hand = -(std::log(0.9) + std::log(1 - 0.2) + std::log(0.6) + std::log(1 - 0.7)) / 4.0;
  EXPECT_NEAR(evaluate_cross_entropy(std::vector<double>{0.9, 0.2, 0.6, 0.7}, std::vector<double>{1, 0, 1, 0}), hand,
              1e-15);
  EXPECT_THROW(evaluate_cross_entropy(std::vector<double>{}, std::vector<double>{}), DataError);
}

TEST(MaskDiagnosticsTest, GuardsAndConstructedCorrelation) {
  const std::vector<Date> dates{*parse_date("2020-01-31"), *parse_date("2020-02-28"), *parse_date("2020-03-31"),
                                *parse_date("2020-04-30")};
  Matrix uniform(4, 33, 1.0 / 33.0);
  const std::vector<double> vix{0.2, 0.35, 0.25, 0.5};
  const MaskDiagnostics flat = mask_diagnostics(dates, uniform, vix, FeatureGroups::standard());
  EXPECT_FALSE(flat.vix_reversal.defined);
  EXPECT_FALSE(flat.vix_momentum.defined);

  // Reversal weight equal to the vix series, momentum taking the remainder.
  Matrix m(4, 33, 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 12; c < 32; ++c) m(r, c) = vix[r] / 20.0;
    for (std::size_t c = 0; c < 12; ++c) m(r, c) = (1.0 - vix[r] - 0.01) / 12.0;
    m(r, 32) = 0.01;
  }
  const MaskDiagnostics d = mask_diagnostics(dates, m, vix, FeatureGroups::standard());
  ASSERT_TRUE(d.vix_reversal.defined);
  EXPECT_NEAR(d.vix_reversal.value, 1.0, 1e-12);
  EXPECT_NEAR(d.vix_momentum.value, -1.0, 1e-12);
  EXPECT_NEAR(d.reversal_momentum.value, -1.0, 1e-12);

  EXPECT_THROW(mask_diagnostics({dates[0], dates[1]}, Matrix(2, 33, 1.0 / 33), std::vector<double>{1, 2},
                                FeatureGroups::standard()),
               DataError);
}

ExperimentConfig small_config(Architecture arch) {
  ExperimentConfig cfg;
  if (arch == Architecture::linear) cfg.model = linear_spec(33);
  else cfg.model = switching_resnet_spec(33, 41, 1, 1);
  cfg.train.batch_size = 128;
  cfg.train.epochs = 8;
  cfg.train.lambda_init = 1e-3;
  cfg.train.dropout_rate = 0.1;
  cfg.train.validate_every = 20;
  cfg.train.seed = 42;
  cfg.window.train_months = 24;
  cfg.window.test_months = 12;
  cfg.window.step_months = 12;
  cfg.universe = UniverseFilter{0.0, 0.0};
  return cfg;
}

const SimPanel& momentum_panel() {
  static const SimPanel sim = [] {
    RegimeParams rp;
    for (auto& r : rp.regimes) {
      r.mode = AnomalyMode::momentum;
      r.strength = 0.5;
    }
    return simulate(rp, 40, 1500, 17);
  }();
  return sim;
}

TEST(ExperimentTest, LinearModelEarnsMomentumPremium) {
  const BacktestReport r = run_experiment(momentum_panel().panel, small_config(Architecture::linear));
  ASSERT_GE(r.windows.size(), 2u);
  EXPECT_TRUE(r.hygiene_ok());
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& w : r.windows) {
    for (double v : w.pnl.pnl) {
      total += v;
      ++n;
    }
    EXPECT_GT(w.hygiene_checked, 0u);
  }
  EXPECT_GT(total / static_cast<double>(n), 0.0);
  EXPECT_FALSE(r.diagnostics.has_value());
}

TEST(ExperimentTest, AggregatesAreMeansOfWindows) {
  const BacktestReport r = run_experiment(momentum_panel().panel, small_config(Architecture::linear));
  double ce = 0.0, ar = 0.0;
  for (const auto& w : r.windows) {
    ce += w.out_sample_cross_entropy;
    ar += w.annualized_return;
  }
  EXPECT_NEAR(r.aggregate.out_sample_cross_entropy, ce / static_cast<double>(r.windows.size()), 1e-15);
  EXPECT_NEAR(r.aggregate.annualized_return, ar / static_cast<double>(r.windows.size()), 1e-15);
}

TEST(ExperimentTest, DeterministicAcrossRunsAndThreadCounts) {
  ExperimentConfig cfg = small_config(Architecture::switching_resnet);
  cfg.train.epochs = 2;
  const std::string a = report_to_json(run_experiment(momentum_panel().panel, cfg)).dump();
  cfg.threads = 3;
  const std::string b = report_to_json(run_experiment(momentum_panel().panel, cfg)).dump();
  EXPECT_EQ(a, b);
}

TEST(ExperimentTest, SchemasMatchAcrossModels) {
  ExperimentConfig lin = small_config(Architecture::linear);
  ExperimentConfig sw = small_config(Architecture::switching_resnet);
  lin.train.epochs = sw.train.epochs = 1;
  const nlohmann::json a = report_to_json(run_experiment(momentum_panel().panel, lin));
  const nlohmann::json b = report_to_json(run_experiment(momentum_panel().panel, sw));
  std::vector<std::string> ka, kb;
  for (auto it = a.begin(); it != a.end(); ++it) ka.push_back(it.key());
  for (auto it = b.begin(); it != b.end(); ++it) kb.push_back(it.key());
  EXPECT_EQ(ka, kb);
  EXPECT_FALSE(a["mask_correlations"]["vix_reversal"]["defined"].get<bool>());
  EXPECT_EQ(a["mask_correlations"]["dates"], 0);
  EXPECT_GT(b["mask_correlations"]["dates"].get<int>(), 0);
}

TEST(ExperimentTest, InsufficientHistoryIsDataError) {
  ExperimentConfig cfg = small_config(Architecture::linear);
  cfg.window.train_months = 200;
  EXPECT_THROW(run_experiment(momentum_panel().panel, cfg), DataError);
}

}  // namespace
}  // namespace regime_lab
