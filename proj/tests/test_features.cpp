#include "regime_lab/features.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"

namespace regime_lab {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("regime_lab_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& body) {
  std::ofstream(p) << body;
}

std::string load_error(const fs::path& prices, const fs::path& index) {
  try {
    load_panel(prices.string(), index.string());
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

/// Flat panel on a weekday calendar with the given per-ticker close function.
template <class F>
PricePanel flat_panel(int months, std::size_t n_tickers, F price) {
  PricePanel p;
  p.dates = oracle::weekday_calendar(2011, 1, months);
  for (std::size_t t = 0; t < n_tickers; ++t) {
    p.tickers.push_back("T" + std::to_string(10 + t));
    std::vector<double> c;
    for (std::size_t d = 0; d < p.dates.size(); ++d) c.push_back(price(t, d));
    p.close.push_back(c);
  }
  p.index_close.assign(p.dates.size(), 100.0);
  p.vix.assign(p.dates.size(), 20.0);
  return p;
}

TEST(DateTest, ParseAndFormat) {
  auto d = parse_date("2016-02-29");
  ASSERT_TRUE(d);
  EXPECT_EQ(format_date(*d), "2016-02-29");
  EXPECT_FALSE(parse_date("2015-02-29"));
  EXPECT_FALSE(parse_date("2015-2-01"));
  EXPECT_FALSE(parse_date("20150201xx"));
  EXPECT_EQ(month_key(*parse_date("2016-01-31")) + 1, month_key(*parse_date("2016-02-01")));
}

TEST(PanelIoTest, RoundTripIsExact) {
  const fs::path dir = temp_dir("roundtrip");
  PricePanel p = oracle::five_ticker_fixture();
  write_panel(p, (dir / "prices.csv").string(), (dir / "index.csv").string());
  PricePanel q = load_panel((dir / "prices.csv").string(), (dir / "index.csv").string());
  ASSERT_EQ(q.tickers, p.tickers);
  ASSERT_EQ(q.dates, p.dates);
  EXPECT_EQ(q.index_close, p.index_close);
  for (std::size_t t = 0; t < p.n_tickers(); ++t) {
    for (std::size_t d = 0; d < p.n_days(); ++d) {
      const double a = p.close[t][d], b = q.close[t][d];
      ASSERT_TRUE((std::isnan(a) && std::isnan(b)) || a == b);
    }
  }
  // The two blank VIX days come back forward-filled.
  EXPECT_EQ(q.vix[400], p.vix[399]);
  EXPECT_EQ(q.vix[401], p.vix[399]);
}

TEST(PanelIoTest, VixForwardFillStopsAfterThreeDays) {
  const fs::path dir = temp_dir("vixfill");
  write_file(dir / "index.csv",
             "date,index_close,vix\n2020-01-01,100,20\n2020-01-02,101,\n2020-01-03,102,\n"
             "2020-01-06,103,\n2020-01-07,104,\n2020-01-08,105,22\n");
  write_file(dir / "prices.csv", "date,ticker,adj_close\n2020-01-01,X,10\n");
  PricePanel p = load_panel((dir / "prices.csv").string(), (dir / "index.csv").string());
  EXPECT_EQ(p.vix[3], 20.0);
  EXPECT_TRUE(std::isnan(p.vix[4]));
  EXPECT_EQ(p.vix[5], 22.0);
}

TEST(PanelIoTest, ErrorsCarryFileAndLine) {
  const fs::path dir = temp_dir("errors");
  const fs::path idx = dir / "index.csv", px = dir / "prices.csv";
  write_file(idx, "date,index_close,vix\n2020-01-01,100,20\n2020-01-02,101,21\n2020-01-03,102,21\n");

  write_file(px, "date,ticker,adj_close\n2020-01-01,X,10\n2020-01-02,X,-3\n");
  EXPECT_NE(load_error(px, idx).find("prices.csv:3:"), std::string::npos);

  write_file(px, "date,ticker,adj_close\n2020-01-01,X,10\n2020-13-02,X,3\n");
  EXPECT_NE(load_error(px, idx).find("prices.csv:3: bad date"), std::string::npos);

  write_file(px, "date,ticker,adj_close\n2020-01-04,X,10\n");
  EXPECT_NE(load_error(px, idx).find("not in index calendar"), std::string::npos);

  write_file(px, "date,ticker,close\n");
  EXPECT_NE(load_error(px, idx).find("prices.csv:1:"), std::string::npos);

  write_file(px, "date,ticker,adj_close\n2020-01-01,X,10\n2020-01-03,X,11\n");
  EXPECT_NE(load_error(px, idx).find("gap in listed range of X on 2020-01-02"), std::string::npos);

  write_file(px, "date,ticker,adj_close\n2020-01-01,X,10\n2020-01-01,X,11\n");
  EXPECT_NE(load_error(px, idx).find("duplicate"), std::string::npos);

  write_file(idx, "date,index_close,vix\n2020-01-02,100,20\n2020-01-01,101,21\n");
  EXPECT_NE(load_error(px, idx).find("index.csv:3: dates must be strictly increasing"), std::string::npos);

  write_file(idx, "date,index_close,vix\n2020-01-01,100,20\n");
  EXPECT_NE(load_error(dir / "missing.csv", idx).find("missing.csv: cannot open"), std::string::npos);
}

TEST(PanelIoTest, MarketCapColumnIsOptionalPerRow) {
  const fs::path dir = temp_dir("mcap");
  write_file(dir / "index.csv", "date,index_close,vix\n2020-01-01,100,20\n2020-01-02,101,21\n");
  write_file(dir / "prices.csv",
             "date,ticker,adj_close,market_cap\n2020-01-01,X,10,2e9\n2020-01-02,X,11,\n");
  PricePanel p = load_panel((dir / "prices.csv").string(), (dir / "index.csv").string());
  ASSERT_TRUE(p.has_market_cap());
  EXPECT_EQ(p.market_cap[0][0], 2e9);
  EXPECT_TRUE(std::isnan(p.market_cap[0][1]));
}

TEST(MonthlyReturnsTest, ConstantAndDoubling) {
  PricePanel constant = flat_panel(20, 1, [](std::size_t, std::size_t) { return 50.0; });
  MonthCalendar cal(constant);
  auto r = monthly_returns(constant, cal, 0, 15);
  ASSERT_TRUE(r);
  for (double v : *r) EXPECT_EQ(v, 0.0);

  PricePanel doubling = flat_panel(20, 1, [](std::size_t, std::size_t) { return 1.0; });
  MonthCalendar cal2(doubling);
  for (std::size_t d = 0; d < doubling.n_days(); ++d) doubling.close[0][d] = std::ldexp(1.0, static_cast<int>(cal2.month_of_day[d]));
  auto r2 = monthly_returns(doubling, cal2, 0, 15);
  ASSERT_TRUE(r2);
  for (double v : *r2) EXPECT_EQ(v, 1.0);

  EXPECT_FALSE(monthly_returns(constant, cal, 0, 13));
}

TEST(NormalizeTest, Cases) {
  EXPECT_EQ(cross_sectional_normalize(std::vector<double>{1, 3}), (std::vector<double>{-1, 1}));
  EXPECT_EQ(cross_sectional_normalize(std::vector<double>{4, 4, 4}), (std::vector<double>{0, 0, 0}));
  EXPECT_THROW(cross_sectional_normalize(std::vector<double>{1}), DataError);

  Rng rng(1);
  std::vector<double> v(100);
  for (double& x : v) x = 3.0 + 2.0 * rng.normal();
  const std::vector<double> z = cross_sectional_normalize(v);
  double mean = 0, ss = 0;
  for (double x : z) mean += x;
  mean /= 100;
  for (double x : z) ss += (x - mean) * (x - mean);
  EXPECT_LT(std::abs(mean), 1e-12);
  EXPECT_NEAR(std::sqrt(ss / 100), 1.0, 1e-12);
}

TEST(RealizedVolTest, Cases) {
  std::vector<double> flat(23, 100.0);
  EXPECT_EQ(realized_volatility(flat).value, 0.0);
  std::vector<double> alt{100.0};
  for (int i = 0; i < 22; ++i) alt.push_back(alt.back() * std::exp(i % 2 ? -0.01 : 0.01));
  const RealizedVariance rv = realized_volatility(alt);
  EXPECT_NEAR(rv.value, 1e-4, 1e-16);
  EXPECT_EQ(rv.count, 22u);
  EXPECT_NEAR(rv.sum(), 22e-4, 1e-15);
}

TEST(RealizedVolTest, MonthWindowMatchesBruteForce) {
  PricePanel p = oracle::five_ticker_fixture(3);
  MonthCalendar cal(p);
  for (std::size_t m = 1; m < cal.n_months(); ++m) {
    const std::chrono::year_month_day ymd{p.dates[cal.ends[m]]};
    EXPECT_NEAR(month_realized_volatility(p, cal, m).value,
                oracle::month_rv(p, static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month())), 1e-15);
  }
}

TEST(VrpTest, Cases) {
  EXPECT_EQ(variance_risk_premium(0.003, 0.003), 0.0);
  EXPECT_NEAR(variance_risk_premium(0.004, 0.003), 0.001, 1e-18);
  EXPECT_NEAR(vix_monthly_variance(20.0), 0.04 / 12.0, 1e-18);
}

TEST(VrpTest, ConstructedPremiumIsConstant) {
  // Daily log returns alternate +/-1%, so every full month has a known realized
  // variance; set VIX so that implied = realized + 0.001.
  PricePanel p = flat_panel(24, 2, [](std::size_t t, std::size_t) { return 10.0 + t; });
  for (std::size_t d = 1; d < p.n_days(); ++d) p.index_close[d] = p.index_close[d - 1] * std::exp(d % 2 ? 0.01 : -0.01);
  MonthCalendar cal(p);
  for (std::size_t m = 1; m < cal.n_months(); ++m) {
    const double realized = month_realized_volatility(p, cal, m).sum();
    p.vix[cal.ends[m]] = 100.0 * std::sqrt(12.0 * (realized + 0.001));
  }
  for (std::size_t m = 14; m < cal.n_months(); ++m) {
    auto f = market_features(p, cal, m);
    ASSERT_TRUE(f);
    for (std::size_t k = 0; k < kVrpLags; ++k) EXPECT_NEAR((*f)[kVarianceLags + kVixLags + k], 0.001, 1e-15);
  }
}

TEST(LabelTest, MedianSplit) {
  EXPECT_EQ(build_labels(std::vector<double>{0.01, 0.02, 0.03, 0.04}), (std::vector<double>{0, 0, 1, 1}));
  EXPECT_EQ(build_labels(std::vector<double>{0.05, 0.05}), (std::vector<double>{0, 0}));
  Rng rng(4);
  std::vector<double> r(101);
  for (double& x : r) x = rng.normal();
  const std::vector<double> labels = build_labels(r);
  EXPECT_EQ(std::accumulate(labels.begin(), labels.end(), 0.0), 50.0);
}

TEST(UniverseTest, PriceAndCapBoundaries) {
  PricePanel p = flat_panel(1, 10, [](std::size_t t, std::size_t) { return 4.0 + 0.5 * static_cast<double>(t); });
  p.close[2][0] = 4.99;
  p.close[3][0] = 5.01;
  // T10 4.0, T11 4.5, T12 4.99, T13 5.01, T14 6.0, ..., T19 8.5
  std::vector<std::size_t> expect{3, 4, 5, 6, 7, 8, 9};
  EXPECT_EQ(universe_filter(p, 0), expect);

  p.market_cap.assign(10, std::vector<double>(p.n_days(), 2e9));
  p.market_cap[5][0] = 1e9;         // not strictly above threshold
  p.market_cap[6][0] = kMissing;    // unknown cap: kept
  p.close[7][0] = kMissing;         // not trading
  expect = {3, 4, 6, 8, 9};
  EXPECT_EQ(universe_filter(p, 0), expect);
}

TEST(AssembleTest, MatchesBruteForceOracle) {
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    PricePanel p = oracle::five_ticker_fixture(seed);
    const SampleSet s = assemble_samples(p);
    const std::vector<oracle::Row> want = oracle::brute_force_samples(p);
    ASSERT_EQ(s.size(), want.size());
    ASSERT_GT(s.size(), 40u);
    for (std::size_t i = 0; i < want.size(); ++i) {
      ASSERT_EQ(format_date(s.date[i]), want[i].date);
      ASSERT_EQ(s.ticker[i], want[i].ticker);
      EXPECT_EQ(s.label[i], want[i].label);
      EXPECT_NEAR(s.forward_return[i], want[i].forward_return, 1e-12);
      for (std::size_t c = 0; c < kStockFeatureWidth; ++c) EXPECT_NEAR(s.stock(i, c), want[i].stock[c], 1e-12);
      for (std::size_t c = 0; c < kMarketFeatureWidth; ++c) EXPECT_NEAR(s.market(i, c), want[i].market[c], 1e-12);
    }
    EXPECT_GT(s.drops.missing_features, 0u);  // the VIX gap and CCC's short history
    EXPECT_GT(s.drops.missing_forward, 0u);   // DDD delisting
  }
}

TEST(AssembleTest, JoinSemanticsAndEmptyRange) {
  PricePanel p = oracle::five_ticker_fixture();
  const SampleSet all = assemble_samples(p);
  ASSERT_GE(all.size(), 2u);
  ASSERT_EQ(all.date[0], all.date[1]);
  for (std::size_t c = 0; c < kMarketFeatureWidth; ++c) EXPECT_EQ(all.market(0, c), all.market(1, c));

  const SampleSet none = assemble_samples(p, p.dates.back() + std::chrono::days{1}, p.dates.back() + std::chrono::days{40});
  EXPECT_TRUE(none.empty());
  EXPECT_EQ(none.stock.cols(), kStockFeatureWidth);
}

TEST(AssembleTest, NormalizedColumnsPerDate) {
  PricePanel p = oracle::five_ticker_fixture(11);
  const SampleSet s = assemble_samples(p);
  // Normalization is over the tradable set at t, which equals the labeled set on
  // dates where nobody lacks a forward window.
  std::size_t checked = 0;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    while (j < s.size() && s.date[j] == s.date[i]) ++j;
    if (s.label_end_day[i] + 90 < p.n_days()) {
      const double n = static_cast<double>(j - i);
      for (std::size_t c = 0; c + 1 < kStockFeatureWidth; ++c) {
        double mean = 0, ss = 0;
        for (std::size_t r = i; r < j; ++r) mean += s.stock(r, c);
        mean /= n;
        for (std::size_t r = i; r < j; ++r) ss += (s.stock(r, c) - mean) * (s.stock(r, c) - mean);
        EXPECT_LT(std::abs(mean), 1e-10);
        EXPECT_NEAR(std::sqrt(ss / n), 1.0, 1e-10);
      }
      double label_mean = 0;
      for (std::size_t r = i; r < j; ++r) label_mean += s.label[r];
      EXPECT_LE(std::abs(label_mean / n - 0.5), 1.0 / n + 1e-12);
      ++checked;
    }
    i = j;
  }
  EXPECT_GT(checked, 5u);
}

TEST(AssembleTest, NoLookAhead) {
  PricePanel p = oracle::five_ticker_fixture(5);
  const SampleSet full = assemble_samples(p);
  MonthCalendar cal(p);
  for (std::size_t m = kMinMonthHistory; m + 2 < cal.n_months(); m += 3) {
    const std::size_t t = cal.ends[m];
    // Keep t itself (the universe filter reads it) plus the holding window so
    // labels exist, then scramble everything after t+20.
    PricePanel cut = p.truncated(t + kHoldingDays + 1);
    for (auto& c : cut.close) {
      for (std::size_t d = t + 1; d < t + kHoldingDays; ++d) {
        if (is_present(c[d])) c[d] *= 1.5;
      }
    }
    const SampleSet part = assemble_samples(cut, p.dates[t], p.dates[t]);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < full.size(); ++i) {
      if (full.formation_day[i] == t) rows.push_back(i);
    }
    ASSERT_EQ(part.size(), rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      for (std::size_t c = 0; c < kStockFeatureWidth; ++c) EXPECT_EQ(part.stock(k, c), full.stock(rows[k], c));
      for (std::size_t c = 0; c < kMarketFeatureWidth; ++c) EXPECT_EQ(part.market(k, c), full.market(rows[k], c));
      EXPECT_LT(part.feature_start_day[k], t);
    }
  }
}

TEST(StandardizerTest, FitsAndGuardsConstantColumns) {
  Matrix m{{1, 5}, {3, 5}};
  ColumnStandardizer s = ColumnStandardizer::fit(m);
  EXPECT_EQ(s.apply(m), (Matrix{{-1, 0}, {1, 0}}));
  EXPECT_EQ(s.apply(Matrix{{2, 9}}), (Matrix{{0, 0}}));
}

TEST(SampleCsvTest, WritesHeaderAndRows) {
  const fs::path dir = temp_dir("samples");
  const SampleSet s = assemble_samples(oracle::five_ticker_fixture());
  write_samples_csv(s, (dir / "s.csv").string());
  std::ifstream in(dir / "s.csv");
  std::string line;
  std::size_t lines = 0;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("date,ticker,label,forward_return,s0", 0), 0u);
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, s.size());
}

}  // namespace
}  // namespace regime_lab
