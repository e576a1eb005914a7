#pragma once

// Model inputs and targets built from a PricePanel at month-end formation
// dates. Stock features (33): twelve monthly returns for months m-2..m-13,
// twenty daily returns for days t-1..t-20, and a January flag. Market features
// (41): twelve monthly index variances for months m-2..m-13, 23 squared VIX
// values for days t-1..t-23, and six variance risk premia for months m-1..m-6.
// Everything except the universe filter reads data strictly before t.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "regime_lab/panel.hpp"

namespace regime_lab {

inline constexpr std::size_t kMonthlyLags = 12;
inline constexpr std::size_t kDailyLags = 20;
inline constexpr std::size_t kStockFeatureWidth = kMonthlyLags + kDailyLags + 1;
inline constexpr std::size_t kVarianceLags = 12;
inline constexpr std::size_t kVixLags = 23;
inline constexpr std::size_t kVrpLags = 6;
inline constexpr std::size_t kMarketFeatureWidth = kVarianceLags + kVixLags + kVrpLags;
inline constexpr std::size_t kHoldingDays = 20;
/// Month positions before the formation month needed by the longest lookback.
inline constexpr std::size_t kMinMonthHistory = 14;

/// Month-end day indices and the month position of every day.
struct MonthCalendar {
  std::vector<std::size_t> ends;
  std::vector<std::size_t> month_of_day;

  explicit MonthCalendar(const PricePanel& panel) : ends(panel.month_ends()) {
    month_of_day.resize(panel.n_days());
    std::size_t m = 0;
    for (std::size_t d = 0; d < panel.n_days(); ++d) {
      if (d > ends[m]) ++m;
      month_of_day[d] = m;
    }
  }

  std::size_t n_months() const noexcept { return ends.size(); }
  /// First day index of month position m.
  std::size_t first_day(std::size_t m) const noexcept { return m == 0 ? 0 : ends[m - 1] + 1; }
};

/// P(end of m-k) / P(end of m-k-1) - 1 for k = 2..13.
inline std::optional<std::array<double, kMonthlyLags>> monthly_returns(const PricePanel& panel,
                                                                       const MonthCalendar& cal,
                                                                       std::size_t ticker, std::size_t m) {
  if (m < kMinMonthHistory || m >= cal.n_months()) return std::nullopt;
  std::array<double, kMonthlyLags> out{};
  for (std::size_t k = 2; k <= kMonthlyLags + 1; ++k) {
    const double now = panel.price(ticker, cal.ends[m - k]);
    const double before = panel.price(ticker, cal.ends[m - k - 1]);
    if (!is_present(now) || !is_present(before)) return std::nullopt;
    out[k - 2] = now / before - 1.0;
  }
  return out;
}

/// Daily simple returns ending on days t-1, t-2, ..., t-20.
inline std::optional<std::array<double, kDailyLags>> daily_returns(const PricePanel& panel, std::size_t ticker,
                                                                   std::size_t t) {
  if (t < kDailyLags + 1 || t >= panel.n_days()) return std::nullopt;
  std::array<double, kDailyLags> out{};
  for (std::size_t j = 1; j <= kDailyLags; ++j) {
    const double now = panel.price(ticker, t - j);
    const double before = panel.price(ticker, t - j - 1);
    if (!is_present(now) || !is_present(before)) return std::nullopt;
    out[j - 1] = now / before - 1.0;
  }
  return out;
}

/// Population z-score. A constant cross-section maps to zeros.
inline std::vector<double> cross_sectional_normalize(std::span<const double> values) {
  if (values.size() < 2) {
    throw DataError("cross_sectional_normalize: degenerate cross-section of size " + std::to_string(values.size()));
  }
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / n);
  std::vector<double> out(values.size(), 0.0);
  if (!(sd > 1e-14 * std::max(1.0, std::abs(mean)))) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - mean) / sd;
  return out;
}

struct RealizedVariance {
  double value = 0.0;     // mean of squared daily log returns
  std::size_t count = 0;  // number of returns used
  double sum() const noexcept { return value * static_cast<double>(count); }
};

/// Mean of squared log returns of consecutive closes.
inline RealizedVariance realized_volatility(std::span<const double> closes) {
  RealizedVariance rv;
  if (closes.size() < 2) return rv;
  double s = 0.0;
  for (std::size_t i = 1; i < closes.size(); ++i) {
    const double r = std::log(closes[i] / closes[i - 1]);
    s += r * r;
  }
  rv.count = closes.size() - 1;
  rv.value = s / static_cast<double>(rv.count);
  return rv;
}

/// Realized variance of the index over calendar month position m, from the
/// previous month's last close through this month's last close. The first
/// month of the calendar uses only its own days.
inline RealizedVariance month_realized_volatility(const PricePanel& panel, const MonthCalendar& cal,
                                                  std::size_t m) {
  const std::size_t start = m == 0 ? 0 : cal.ends[m - 1];
  const std::size_t end = cal.ends[m];
  return realized_volatility(std::span<const double>(panel.index_close.data() + start, end - start + 1));
}

/// VIX in annualized percent to one-month variance.
inline double vix_monthly_variance(double vix) {
  const double v = vix / 100.0;
  return v * v / 12.0;
}

inline double variance_risk_premium(double implied_monthly_variance, double realized_monthly_variance) {
  return implied_monthly_variance - realized_monthly_variance;
}

/// Raw (unnormalized) market features for formation month m.
inline std::optional<std::array<double, kMarketFeatureWidth>> market_features(const PricePanel& panel,
                                                                              const MonthCalendar& cal,
                                                                              std::size_t m) {
  if (m < kMinMonthHistory || m >= cal.n_months()) return std::nullopt;
  const std::size_t t = cal.ends[m];
  if (t < kVixLags) return std::nullopt;
  std::array<double, kMarketFeatureWidth> out{};
  std::size_t k = 0;
  for (std::size_t lag = 2; lag <= kVarianceLags + 1; ++lag) {
    out[k++] = month_realized_volatility(panel, cal, m - lag).value;
  }
  for (std::size_t j = 1; j <= kVixLags; ++j) {
    const double vix = panel.vix[t - j];
    if (!is_present(vix)) return std::nullopt;
    const double v = vix / 100.0;
    out[k++] = v * v;
  }
  for (std::size_t lag = 1; lag <= kVrpLags; ++lag) {
    const double vix = panel.vix[cal.ends[m - lag]];
    if (!is_present(vix)) return std::nullopt;
    out[k++] = variance_risk_premium(vix_monthly_variance(vix), month_realized_volatility(panel, cal, m - lag).sum());
  }
  return out;
}

/// P(t + holding) / P(t) - 1, absent when the window runs past the data or the
/// ticker stops trading inside it.
inline std::optional<double> forward_return(const PricePanel& panel, std::size_t ticker, std::size_t t,
                                            std::size_t holding = kHoldingDays) {
  if (t + holding >= panel.n_days()) return std::nullopt;
  const double p0 = panel.price(ticker, t);
  const double p1 = panel.price(ticker, t + holding);
  if (!is_present(p0) || !is_present(p1)) return std::nullopt;
  return p1 / p0 - 1.0;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw DataError("median: empty input");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

/// 1 for returns strictly above the cross-sectional median, else 0.
inline std::vector<double> build_labels(std::span<const double> forward_returns) {
  const double med = median(std::vector<double>(forward_returns.begin(), forward_returns.end()));
  std::vector<double> labels(forward_returns.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = forward_returns[i] > med ? 1.0 : 0.0;
  return labels;
}

struct UniverseFilter {
  double min_price = 5.0;
  double min_market_cap = 1e9;
};

/// Tickers tradable at formation day t. Market cap is only enforced when the
/// panel carries it and the value for that day is present.
inline std::vector<std::size_t> universe_filter(const PricePanel& panel, std::size_t t,
                                                const UniverseFilter& filter = {}) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < panel.n_tickers(); ++i) {
    const double p = panel.price(i, t);
    if (!is_present(p) || !(p > filter.min_price)) continue;
    if (panel.has_market_cap()) {
      const double cap = panel.market_cap[i][t];
      if (is_present(cap) && !(cap > filter.min_market_cap)) continue;
    }
    out.push_back(i);
  }
  return out;
}

struct DropStats {
  std::size_t candidates = 0;          // tickers passing the universe filter on a considered date
  std::size_t missing_features = 0;    // insufficient history or missing VIX
  std::size_t degenerate_dates = 0;    // fewer than two usable tickers
  std::size_t missing_forward = 0;     // no complete holding window
  std::vector<std::string> log;

  double drop_rate() const noexcept {
    return candidates == 0 ? 0.0 : static_cast<double>(missing_features) / static_cast<double>(candidates);
  }
  void note(std::string msg) {
    if (log.size() < 1000) log.push_back(std::move(msg));
  }
};

struct SampleSet {
  Matrix stock;   // n x 33, cross-sectionally normalized
  Matrix market;  // n x 41, raw
  std::vector<double> label;
  std::vector<double> forward_return;
  std::vector<Date> date;
  std::vector<std::string> ticker;
  std::vector<std::size_t> formation_day;
  std::vector<std::size_t> feature_start_day;  // earliest panel day read by the features
  std::vector<std::size_t> label_end_day;
  DropStats drops;

  std::size_t size() const noexcept { return label.size(); }
  bool empty() const noexcept { return label.empty(); }

  /// Distinct formation dates in row order (rows are grouped by date).
  std::vector<Date> dates() const {
    std::vector<Date> out;
    for (Date d : date) {
      if (out.empty() || out.back() != d) out.push_back(d);
    }
    return out;
  }

  SampleSet subset(std::span<const std::size_t> idx) const {
    SampleSet s;
    s.stock = gather_rows(stock, idx);
    s.market = gather_rows(market, idx);
    for (std::size_t i : idx) {
      s.label.push_back(label[i]);
      s.forward_return.push_back(forward_return[i]);
      s.date.push_back(date[i]);
      s.ticker.push_back(ticker[i]);
      s.formation_day.push_back(formation_day[i]);
      s.feature_start_day.push_back(feature_start_day[i]);
      s.label_end_day.push_back(label_end_day[i]);
    }
    return s;
  }
};

/// Builds labeled samples for every month-end formation date in [from, to].
inline SampleSet assemble_samples(const PricePanel& panel, Date from, Date to, const UniverseFilter& filter = {}) {
  SampleSet out;
  std::vector<double> stock_vals, market_vals;
  const MonthCalendar cal(panel);
  for (std::size_t m = 0; m < cal.n_months(); ++m) {
    const std::size_t t = cal.ends[m];
    const Date d = panel.dates[t];
    if (d < from || to < d) continue;
    const std::vector<std::size_t> universe = universe_filter(panel, t, filter);
    out.drops.candidates += universe.size();
    const std::string when = format_date(d);

    auto mkt = market_features(panel, cal, m);
    if (!mkt) {
      out.drops.missing_features += universe.size();
      out.drops.note(when + ": market features unavailable");
      continue;
    }
    std::vector<std::size_t> tickers;
    std::vector<std::array<double, kStockFeatureWidth>> raw;
    for (std::size_t i : universe) {
      auto mr = monthly_returns(panel, cal, i, m);
      auto dr = daily_returns(panel, i, t);
      if (!mr || !dr) {
        ++out.drops.missing_features;
        out.drops.note(when + " " + panel.tickers[i] + ": insufficient history");
        continue;
      }
      std::array<double, kStockFeatureWidth> row{};
      std::copy(mr->begin(), mr->end(), row.begin());
      std::copy(dr->begin(), dr->end(), row.begin() + kMonthlyLags);
      row[kStockFeatureWidth - 1] = calendar_month(d) == 1 ? 1.0 : 0.0;
      tickers.push_back(i);
      raw.push_back(row);
    }
    if (tickers.size() < 2) {
      ++out.drops.degenerate_dates;
      out.drops.note(when + ": fewer than two usable tickers");
      continue;
    }
    // Normalize over everything tradable at t, before looking at the future.
    std::vector<std::array<double, kStockFeatureWidth>> norm = raw;
    std::vector<double> col(tickers.size());
    for (std::size_t c = 0; c + 1 < kStockFeatureWidth; ++c) {
      for (std::size_t r = 0; r < raw.size(); ++r) col[r] = raw[r][c];
      const std::vector<double> z = cross_sectional_normalize(col);
      for (std::size_t r = 0; r < raw.size(); ++r) norm[r][c] = z[r];
    }
    std::vector<std::size_t> keep;
    std::vector<double> fwd;
    for (std::size_t r = 0; r < tickers.size(); ++r) {
      auto f = forward_return(panel, tickers[r], t);
      if (!f) {
        ++out.drops.missing_forward;
        out.drops.note(when + " " + panel.tickers[tickers[r]] + ": no forward window");
        continue;
      }
      keep.push_back(r);
      fwd.push_back(*f);
    }
    if (keep.empty()) continue;
    const std::vector<double> labels = build_labels(fwd);
    const std::size_t feature_start = cal.ends[m - kMinMonthHistory];
    for (std::size_t k = 0; k < keep.size(); ++k) {
      const std::size_t r = keep[k];
      stock_vals.insert(stock_vals.end(), norm[r].begin(), norm[r].end());
      market_vals.insert(market_vals.end(), mkt->begin(), mkt->end());
      out.label.push_back(labels[k]);
      out.forward_return.push_back(fwd[k]);
      out.date.push_back(d);
      out.ticker.push_back(panel.tickers[tickers[r]]);
      out.formation_day.push_back(t);
      out.feature_start_day.push_back(std::min(feature_start, t - kVixLags));
      out.label_end_day.push_back(t + kHoldingDays);
    }
  }
  out.stock = Matrix(out.label.size(), kStockFeatureWidth, std::move(stock_vals));
  out.market = Matrix(out.label.size(), kMarketFeatureWidth, std::move(market_vals));
  return out;
}

inline SampleSet assemble_samples(const PricePanel& panel, const UniverseFilter& filter = {}) {
  return assemble_samples(panel, panel.dates.front(), panel.dates.back(), filter);
}

/// Per-column z-score fitted on one set of rows and applied to others.
/// Constant columns map to zero.
struct ColumnStandardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static ColumnStandardizer fit(const Matrix& rows) {
    if (rows.rows() == 0) throw DataError("ColumnStandardizer: no rows to fit");
    ColumnStandardizer s;
    s.mean.assign(rows.cols(), 0.0);
    s.scale.assign(rows.cols(), 0.0);
    const double n = static_cast<double>(rows.rows());
    for (std::size_t c = 0; c < rows.cols(); ++c) {
      double sum = 0.0;
      for (std::size_t r = 0; r < rows.rows(); ++r) sum += rows(r, c);
      const double mu = sum / n;
      double ss = 0.0;
      for (std::size_t r = 0; r < rows.rows(); ++r) ss += (rows(r, c) - mu) * (rows(r, c) - mu);
      s.mean[c] = mu;
      s.scale[c] = std::sqrt(ss / n);
    }
    return s;
  }

  Matrix apply(const Matrix& rows) const {
    if (rows.cols() != mean.size()) throw ShapeError("ColumnStandardizer: column count mismatch");
    Matrix out(rows.rows(), rows.cols());
    for (std::size_t r = 0; r < rows.rows(); ++r) {
      for (std::size_t c = 0; c < rows.cols(); ++c) {
        out(r, c) = scale[c] > 1e-14 * std::max(1.0, std::abs(mean[c])) ? (rows(r, c) - mean[c]) / scale[c] : 0.0;
      }
    }
    return out;
  }
};

/// Fits a standardizer on the market block using one row per distinct date,
/// so dates with wider cross-sections do not dominate.
inline ColumnStandardizer fit_market_standardizer(const SampleSet& samples) {
  std::vector<std::size_t> first_rows;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (i == 0 || samples.date[i] != samples.date[i - 1]) first_rows.push_back(i);
  }
  return ColumnStandardizer::fit(gather_rows(samples.market, first_rows));
}

inline void write_samples_csv(const SampleSet& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << "date,ticker,label,forward_return";
  for (std::size_t i = 0; i < kStockFeatureWidth; ++i) out << ",s" << i;
  for (std::size_t i = 0; i < kMarketFeatureWidth; ++i) out << ",m" << i;
  out << '\n';
  for (std::size_t r = 0; r < s.size(); ++r) {
    out << format_date(s.date[r]) << ',' << s.ticker[r] << ',' << s.label[r] << ',' << format_double(s.forward_return[r]);
    for (double v : s.stock.row(r)) out << ',' << format_double(v);
    for (double v : s.market.row(r)) out << ',' << format_double(v);
    out << '\n';
  }
}

}  // namespace regime_lab
