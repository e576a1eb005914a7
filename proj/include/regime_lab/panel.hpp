#pragma once

// Trading calendar, price panel, and the two input CSV formats:
//   prices: date,ticker,adj_close[,market_cap]
//   index:  date,index_close,vix
// Validation failures raise DataError with "path:line: reason".

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "regime_lab/matrix.hpp"

namespace regime_lab {

using Date = std::chrono::sys_days;

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_present(double v) noexcept { return !std::isnan(v); }

inline std::optional<Date> parse_date(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0;
  unsigned m = 0, d = 0;
  auto num = [&](std::size_t pos, std::size_t len, auto& out) {
    auto r = std::from_chars(s.data() + pos, s.data() + pos + len, out);
    return r.ec == std::errc{} && r.ptr == s.data() + pos + len;
  };
  if (!num(0, 4, y) || !num(5, 2, m) || !num(8, 2, d)) return std::nullopt;
  std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) return std::nullopt;
  return Date{ymd};
}

inline std::string format_date(Date d) {
  std::chrono::year_month_day ymd{d};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

/// Months since year 0, for grouping days into calendar months.
inline int month_key(Date d) {
  std::chrono::year_month_day ymd{d};
  return static_cast<int>(ymd.year()) * 12 + static_cast<int>(static_cast<unsigned>(ymd.month())) - 1;
}

inline unsigned calendar_month(Date d) {
  return static_cast<unsigned>(std::chrono::year_month_day{d}.month());
}

/// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct PricePanel {
  std::vector<Date> dates;           // trading calendar, strictly increasing
  std::vector<std::string> tickers;  // sorted
  std::vector<std::vector<double>> close;       // [ticker][day], NaN when not listed
  std::vector<std::vector<double>> market_cap;  // empty, or same shape as close
  std::vector<double> index_close;
  std::vector<double> vix;  // annualized percent, NaN when unavailable

  std::size_t n_days() const noexcept { return dates.size(); }
  std::size_t n_tickers() const noexcept { return tickers.size(); }
  bool has_market_cap() const noexcept { return !market_cap.empty(); }

  double price(std::size_t ticker, std::size_t day) const { return close[ticker][day]; }

  std::optional<std::size_t> ticker_index(std::string_view t) const {
    auto it = std::lower_bound(tickers.begin(), tickers.end(), t);
    if (it == tickers.end() || *it != t) return std::nullopt;
    return static_cast<std::size_t>(it - tickers.begin());
  }

  std::optional<std::size_t> day_index(Date d) const {
    auto it = std::lower_bound(dates.begin(), dates.end(), d);
    if (it == dates.end() || *it != d) return std::nullopt;
    return static_cast<std::size_t>(it - dates.begin());
  }

  /// Index of the last trading day of each calendar month in the calendar.
  std::vector<std::size_t> month_ends() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < dates.size(); ++i) {
      if (i + 1 == dates.size() || month_key(dates[i + 1]) != month_key(dates[i])) out.push_back(i);
    }
    return out;
  }

  /// Copy restricted to days [0, end).
  PricePanel truncated(std::size_t end) const {
    PricePanel p = *this;
    p.dates.resize(end);
    for (auto& c : p.close) c.resize(end);
    for (auto& c : p.market_cap) c.resize(end);
    p.index_close.resize(end);
    p.vix.resize(end);
    return p;
  }

  /// Checks the structural invariants; throws DataError.
  void validate() const {
    if (dates.empty()) throw DataError("panel: empty calendar");
    for (std::size_t i = 1; i < dates.size(); ++i) {
      if (!(dates[i - 1] < dates[i])) throw DataError("panel: dates not strictly increasing at " + format_date(dates[i]));
    }
    if (!std::is_sorted(tickers.begin(), tickers.end())) throw DataError("panel: tickers not sorted");
    if (close.size() != tickers.size()) throw DataError("panel: close rows != tickers");
    if (index_close.size() != dates.size() || vix.size() != dates.size()) {
      throw DataError("panel: index series length mismatch");
    }
    for (std::size_t d = 0; d < dates.size(); ++d) {
      if (!(index_close[d] > 0.0) || !std::isfinite(index_close[d])) {
        throw DataError("panel: index close must be positive on " + format_date(dates[d]));
      }
    }
    for (std::size_t t = 0; t < tickers.size(); ++t) {
      if (close[t].size() != dates.size()) throw DataError("panel: ticker " + tickers[t] + " length mismatch");
      std::size_t first = dates.size(), last = 0;
      for (std::size_t d = 0; d < dates.size(); ++d) {
        const double p = close[t][d];
        if (!is_present(p)) continue;
        if (!(p > 0.0) || !std::isfinite(p)) {
          throw DataError("panel: non-positive price for " + tickers[t] + " on " + format_date(dates[d]));
        }
        first = std::min(first, d);
        last = d;
      }
      for (std::size_t d = first; d < last; ++d) {
        if (!is_present(close[t][d])) {
          throw DataError("panel: gap in listed range of " + tickers[t] + " on " + format_date(dates[d]));
        }
      }
    }
  }
};

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (end != tmp.c_str() + tmp.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

class LineReader {
 public:
  explicit LineReader(const std::string& path) : path_(path), in_(path) {
    if (!in_) throw DataError(path + ": cannot open file");
  }
  bool next(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw DataError(path_ + ":" + std::to_string(line_no_) + ": " + why);
  }
  std::size_t line_no() const noexcept { return line_no_; }

 private:
  std::string path_;
  std::ifstream in_;
  std::size_t line_no_ = 0;
};

}  // namespace detail

inline constexpr int kMaxVixForwardFill = 3;

/// Reads both CSVs into a validated panel. The index file defines the trading
/// calendar; every stock row must fall on a calendar date. Missing VIX values
/// (empty field) are forward-filled for up to three days.
inline PricePanel load_panel(const std::string& prices_path, const std::string& index_path) {
  if (!std::ifstream(prices_path)) throw DataError(prices_path + ": cannot open file");
  PricePanel panel;
  {
    detail::LineReader r(index_path);
    std::string line;
    if (!r.next(line)) r.fail("empty file");
    if (line != "date,index_close,vix") r.fail("expected header 'date,index_close,vix'");
    int stale = 0;
    double last_vix = kMissing;
    while (r.next(line)) {
      if (line.empty()) continue;
      auto f = detail::split_csv(line);
      if (f.size() != 3) r.fail("expected 3 fields, got " + std::to_string(f.size()));
      auto d = parse_date(f[0]);
      if (!d) r.fail("bad date '" + std::string(f[0]) + "'");
      if (!panel.dates.empty() && !(panel.dates.back() < *d)) r.fail("dates must be strictly increasing");
      auto c = detail::parse_double(f[1]);
      if (!c || !(*c > 0.0)) r.fail("index_close must be a positive number");
      double v = kMissing;
      if (f[2].empty()) {
        if (is_present(last_vix) && stale < kMaxVixForwardFill) {
          v = last_vix;
          ++stale;
        }
      } else {
        auto pv = detail::parse_double(f[2]);
        if (!pv || !(*pv > 0.0)) r.fail("vix must be a positive number or empty");
        v = *pv;
        last_vix = v;
        stale = 0;
      }
      panel.dates.push_back(*d);
      panel.index_close.push_back(*c);
      panel.vix.push_back(v);
    }
    if (panel.dates.empty()) r.fail("no data rows");
  }

  struct Row {
    std::size_t day;
    double close;
    double mcap;
  };
  std::map<std::string, std::vector<Row>> by_ticker;
  bool with_mcap = false;
  {
    detail::LineReader r(prices_path);
    std::string line;
    if (!r.next(line)) r.fail("empty file");
    if (line == "date,ticker,adj_close,market_cap") {
      with_mcap = true;
    } else if (line != "date,ticker,adj_close") {
      r.fail("expected header 'date,ticker,adj_close[,market_cap]'");
    }
    const std::size_t nf = with_mcap ? 4 : 3;
    while (r.next(line)) {
      if (line.empty()) continue;
      auto f = detail::split_csv(line);
      if (f.size() != nf) r.fail("expected " + std::to_string(nf) + " fields, got " + std::to_string(f.size()));
      auto d = parse_date(f[0]);
      if (!d) r.fail("bad date '" + std::string(f[0]) + "'");
      auto day = panel.day_index(*d);
      if (!day) r.fail("date " + std::string(f[0]) + " not in index calendar");
      if (f[1].empty()) r.fail("empty ticker");
      auto c = detail::parse_double(f[2]);
      if (!c || !(*c > 0.0)) r.fail("adj_close must be a positive number");
      double mcap = kMissing;
      if (with_mcap && !f[3].empty()) {
        auto m = detail::parse_double(f[3]);
        if (!m || !(*m >= 0.0)) r.fail("market_cap must be a non-negative number or empty");
        mcap = *m;
      }
      by_ticker[std::string(f[1])].push_back({*day, *c, mcap});
    }
  }

  for (auto& [ticker, rows] : by_ticker) {
    panel.tickers.push_back(ticker);
    std::vector<double> closes(panel.n_days(), kMissing), caps;
    if (with_mcap) caps.assign(panel.n_days(), kMissing);
    for (const Row& row : rows) {
      if (is_present(closes[row.day])) {
        throw DataError(prices_path + ": duplicate row for " + ticker + " on " + format_date(panel.dates[row.day]));
      }
      closes[row.day] = row.close;
      if (with_mcap) caps[row.day] = row.mcap;
    }
    panel.close.push_back(std::move(closes));
    if (with_mcap) panel.market_cap.push_back(std::move(caps));
  }
  try {
    panel.validate();
  } catch (const DataError& e) {
    throw DataError(prices_path + ": " + e.what());
  }
  return panel;
}

inline void write_panel(const PricePanel& panel, const std::string& prices_path, const std::string& index_path) {
  {
    std::ofstream out(index_path);
    if (!out) throw std::runtime_error(index_path + ": cannot open for writing");
    out << "date,index_close,vix\n";
    for (std::size_t d = 0; d < panel.n_days(); ++d) {
      out << format_date(panel.dates[d]) << ',' << format_double(panel.index_close[d]) << ',';
      if (is_present(panel.vix[d])) out << format_double(panel.vix[d]);
      out << '\n';
    }
    if (!out) throw std::runtime_error(index_path + ": write failed");
  }
  std::ofstream out(prices_path);
  if (!out) throw std::runtime_error(prices_path + ": cannot open for writing");
  out << (panel.has_market_cap() ? "date,ticker,adj_close,market_cap\n" : "date,ticker,adj_close\n");
  for (std::size_t d = 0; d < panel.n_days(); ++d) {
    const std::string date = format_date(panel.dates[d]);
    for (std::size_t t = 0; t < panel.n_tickers(); ++t) {
      const double p = panel.close[t][d];
      if (!is_present(p)) continue;
      out << date << ',' << panel.tickers[t] << ',' << format_double(p);
      if (panel.has_market_cap()) {
        out << ',';
        if (is_present(panel.market_cap[t][d])) out << format_double(panel.market_cap[t][d]);
      }
      out << '\n';
    }
  }
  if (!out) throw std::runtime_error(prices_path + ": write failed");
}

}  // namespace regime_lab
