#pragma once

// Rolling walk-forward experiment: train on a block of formation months,
// validate on its tail, test on the following months, form decile long-short
// portfolios from predicted probabilities, and collect PNL, Sharpe,
// cross-entropy and (for the switching model) conditional-mask diagnostics.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "regime_lab/features.hpp"
#include "regime_lab/snapshot.hpp"
#include "regime_lab/train.hpp"

namespace regime_lab {

struct RollingWindow {
  std::size_t train_months = 60;
  double validation_fraction = 0.1;
  std::size_t test_months = 12;
  std::size_t step_months = 12;

  std::size_t validation_months() const {
    if (validation_fraction <= 0.0) return 0;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(validation_fraction * static_cast<double>(train_months))));
  }

  void validate() const {
    if (train_months < 2) throw ConfigError("window.train_months must be >= 2");
    if (test_months == 0) throw ConfigError("window.test_months must be >= 1");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw ConfigError("window.validation_fraction must be in [0,1)");
    }
    if (validation_months() >= train_months) throw ConfigError("window: validation leaves no training months");
    if (step_months != test_months) {
      throw ConfigError("window.step_months must equal window.test_months so each test month is covered once");
    }
  }
};

/// Half-open ranges of positions in a month list.
struct WindowSpan {
  std::size_t id = 0;
  std::size_t train_begin = 0;
  std::size_t validation_begin = 0;  // == train_end when there is no validation
  std::size_t train_end = 0;         // == test_begin
  std::size_t test_end = 0;
};

struct WindowPlan {
  std::vector<WindowSpan> windows;
  std::vector<std::string> warnings;
};

/// Windows over `months` (any sorted month labels). The final test span may be
/// shorter than test_months.
inline WindowPlan roll_windows(std::size_t n_months, const RollingWindow& w) {
  w.validate();
  WindowPlan plan;
  if (n_months <= w.train_months) {
    plan.warnings.push_back("only " + std::to_string(n_months) + " months available; need more than " +
                            std::to_string(w.train_months) + " for one window");
    return plan;
  }
  std::size_t id = 0;
  for (std::size_t test_begin = w.train_months; test_begin < n_months; test_begin += w.step_months) {
    WindowSpan s;
    s.id = id++;
    s.train_begin = test_begin - w.train_months;
    s.train_end = test_begin;
    s.validation_begin = test_begin - w.validation_months();
    s.test_end = std::min(n_months, test_begin + w.test_months);
    plan.windows.push_back(s);
  }
  if (plan.windows.back().test_end - plan.windows.back().train_end < w.test_months) {
    plan.warnings.push_back("final test span is partial (" +
                            std::to_string(plan.windows.back().test_end - plan.windows.back().train_end) + " months)");
  }
  return plan;
}

/// Distinct calendar months of a date list, in order.
inline std::vector<int> distinct_months(const std::vector<Date>& dates) {
  std::vector<int> out;
  for (Date d : dates) {
    const int k = month_key(d);
    if (out.empty() || out.back() != k) out.push_back(k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Portfolios and performance

struct Position {
  std::string ticker;
  double weight = 0.0;
};

struct PortfolioSnapshot {
  Date date{};
  std::vector<Position> longs;   // weights sum to +1
  std::vector<Position> shorts;  // weights sum to -1
  double gross_exposure() const {
    double g = 0.0;
    for (const auto& p : longs) g += std::abs(p.weight);
    for (const auto& p : shorts) g += std::abs(p.weight);
    return g;
  }
};

/// Long the top decile of probabilities and short the bottom decile, equal
/// weighted. Ties rank by ticker so the result is deterministic.
inline PortfolioSnapshot form_portfolio(std::span<const double> probabilities, std::span<const std::string> tickers,
                                        double decile = 0.1, Date date = {}) {
  if (probabilities.size() != tickers.size()) throw ShapeError("form_portfolio: probabilities/tickers length mismatch");
  const std::size_t n = probabilities.size();
  if (n < 2) throw DataError("form_portfolio: need at least 2 scored tickers, got " + std::to_string(n));
  if (!(decile > 0.0 && decile <= 0.5)) throw ConfigError("form_portfolio: decile must be in (0, 0.5]");
  const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(n) * decile + 1e-9)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (probabilities[a] != probabilities[b]) return probabilities[a] > probabilities[b];
    return tickers[a] < tickers[b];
  });
  PortfolioSnapshot snap;
  snap.date = date;
  const double w = 1.0 / static_cast<double>(k);
  for (std::size_t i = 0; i < k; ++i) snap.longs.push_back({tickers[order[i]], w});
  for (std::size_t i = 0; i < k; ++i) snap.shorts.push_back({tickers[order[n - 1 - i]], -w});
  return snap;
}

struct PnlSeries {
  std::vector<Date> dates;
  std::vector<double> pnl;
  std::vector<std::string> log;

  std::vector<double> cumulative() const {
    std::vector<double> c(pnl.size());
    std::partial_sum(pnl.begin(), pnl.end(), c.begin());
    return c;
  }
};

/// Additive period PNL on unit gross capital:
///   (sum_long w r - sum_short |w| r) / gross.
/// Tickers without a forward return leave their leg, which is renormalized.
inline PnlSeries compute_pnl(const std::vector<PortfolioSnapshot>& snapshots,
                             const std::vector<std::map<std::string, double>>& forward_returns) {
  if (snapshots.size() != forward_returns.size()) throw ShapeError("compute_pnl: one return map per snapshot required");
  PnlSeries out;
  for (std::size_t s = 0; s < snapshots.size(); ++s) {
    const auto& snap = snapshots[s];
    const auto& rets = forward_returns[s];
    auto leg = [&](const std::vector<Position>& positions, const char* side) -> std::optional<double> {
      double wsum = 0.0, acc = 0.0;
      for (const auto& p : positions) {
        auto it = rets.find(p.ticker);
        if (it == rets.end()) {
          out.log.push_back(format_date(snap.date) + ": " + p.ticker + " dropped from " + side + " leg (no forward return)");
          continue;
        }
        wsum += std::abs(p.weight);
        acc += std::abs(p.weight) * it->second;
      }
      if (wsum == 0.0) return std::nullopt;
      return acc / wsum;
    };
    auto lr = leg(snap.longs, "long");
    auto sr = leg(snap.shorts, "short");
    if (!lr || !sr) {
      out.log.push_back(format_date(snap.date) + ": empty leg, period skipped");
      continue;
    }
    // Each leg is renormalized to half of unit gross capital.
    out.dates.push_back(snap.date);
    out.pnl.push_back(0.5 * *lr - 0.5 * *sr);
  }
  return out;
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) throw DataError("mean of empty series");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1).
inline double sample_std(std::span<const double> v) {
  if (v.size() < 2) throw DataError("standard deviation needs at least 2 values");
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline constexpr double kPeriodsPerYear = 12.0;

inline double annualized_return(std::span<const double> monthly) { return kPeriodsPerYear * mean_of(monthly); }

/// (mu - r) / s with annualized inputs.
inline double sharpe_from_moments(double annual_mean, double risk_free, double annual_std) {
  if (!(annual_std > 0.0)) throw DataError("sharpe: zero variance, Sharpe undefined");
  return (annual_mean - risk_free) / annual_std;
}

inline double sharpe_ratio(std::span<const double> monthly, double risk_free = 0.0) {
  if (monthly.size() < 2) throw DataError("sharpe: need at least 2 periods");
  const double m = mean_of(monthly);
  const double s = sample_std(monthly);
  if (!(s > 1e-12 * std::abs(m)) || s == 0.0) throw DataError("sharpe: zero variance, Sharpe undefined");
  return sharpe_from_moments(kPeriodsPerYear * m, risk_free, std::sqrt(kPeriodsPerYear) * s);
}

inline double evaluate_cross_entropy(std::span<const double> probabilities, std::span<const double> labels) {
  if (labels.empty()) throw DataError("evaluate_cross_entropy: empty test set");
  return bce_data_loss(probabilities, labels);
}

inline double evaluate_cross_entropy(const Network& net, const Dataset& test) {
  if (test.size() == 0) throw DataError("evaluate_cross_entropy: empty test set");
  const Matrix p = net.predict(test.x, test.switch_ptr());
  return evaluate_cross_entropy(p.values(), test.y);
}

// ---------------------------------------------------------------------------
// Mask diagnostics

struct Correlation {
  double value = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;
};

inline Correlation pearson_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("pearson_correlation: length mismatch");
  Correlation c;
  if (a.size() < 2) return c;
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return c;
  c.value = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
  c.defined = true;
  return c;
}

struct MaskDiagnostics {
  std::vector<Date> dates;
  std::vector<double> vix;
  GroupWeights weights;
  Matrix masks;                        // one row per date
  Correlation vix_reversal;
  Correlation vix_momentum;
  Correlation reversal_momentum;
};

inline MaskDiagnostics mask_diagnostics(const std::vector<Date>& dates, const Matrix& masks,
                                        std::span<const double> vix, const FeatureGroups& groups) {
  if (masks.rows() != dates.size() || vix.size() != dates.size()) {
    throw ShapeError("mask_diagnostics: dates, masks and vix must align");
  }
  if (dates.size() < 3) throw DataError("mask_diagnostics: need at least 3 shared dates");
  MaskDiagnostics d;
  d.dates = dates;
  d.vix.assign(vix.begin(), vix.end());
  d.masks = masks;
  d.weights = mask_summary(masks, groups);
  d.vix_reversal = pearson_correlation(d.vix, d.weights.reversal);
  d.vix_momentum = pearson_correlation(d.vix, d.weights.momentum);
  d.reversal_momentum = pearson_correlation(d.weights.reversal, d.weights.momentum);
  return d;
}

// ---------------------------------------------------------------------------
// Experiment

struct ExperimentConfig {
  ModelSpec model = switching_resnet_spec();
  TrainConfig train;
  RollingWindow window;
  UniverseFilter universe;
  double risk_free = 0.0;
  double decile = 0.1;
  std::size_t threads = 1;

  void validate() const {
    model.validate();
    train.validate();
    window.validate();
    if (model.input_width != kStockFeatureWidth) {
      throw ConfigError("model.input_width must be " + std::to_string(kStockFeatureWidth) + " for the backtest");
    }
    if (model.uses_switch() && model.switch_input_width != kMarketFeatureWidth) {
      throw ConfigError("model.switch_input_width must be " + std::to_string(kMarketFeatureWidth));
    }
    if (!(decile > 0.0 && decile <= 0.5)) throw ConfigError("backtest.decile must be in (0, 0.5]");
    if (!std::isfinite(risk_free)) throw ConfigError("backtest.risk_free must be finite");
    if (threads == 0) throw ConfigError("threads must be >= 1");
  }
};

struct WindowResult {
  std::size_t id = 0;
  std::string train_start, train_end, test_start, test_end;  // formation months, inclusive
  std::size_t train_rows = 0, validation_rows = 0, test_rows = 0, purged_rows = 0;
  std::size_t steps = 0, best_step = 0;
  double in_sample_cross_entropy = 0.0;
  double out_sample_cross_entropy = 0.0;
  double annualized_return = std::numeric_limits<double>::quiet_NaN();
  double sharpe = std::numeric_limits<double>::quiet_NaN();
  bool sharpe_defined = false;
  bool hygiene_ok = false;
  std::size_t hygiene_checked = 0;
  PnlSeries pnl;
  std::vector<Date> mask_dates;
  Matrix masks;
  std::vector<double> mask_vix;
  std::optional<Network> model;  // best-validation network
};

struct AggregateMetrics {
  double annualized_return = std::numeric_limits<double>::quiet_NaN();
  double sharpe = std::numeric_limits<double>::quiet_NaN();
  std::size_t sharpe_windows = 0;
  double in_sample_cross_entropy = std::numeric_limits<double>::quiet_NaN();
  double out_sample_cross_entropy = std::numeric_limits<double>::quiet_NaN();
};

struct BacktestReport {
  std::string model;
  std::uint64_t seed = 0;
  std::size_t samples = 0;
  DropStats drops;
  std::vector<std::string> warnings;
  std::vector<WindowResult> windows;
  AggregateMetrics aggregate;
  std::optional<MaskDiagnostics> diagnostics;

  bool hygiene_ok() const {
    return std::all_of(windows.begin(), windows.end(), [](const WindowResult& w) { return w.hygiene_ok; });
  }
};

namespace detail {

inline std::string month_label(int key) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02d", key / 12, key % 12 + 1);
  return buf;
}

inline Dataset make_dataset(const SampleSet& s, const ColumnStandardizer& market, bool with_switch) {
  Dataset d;
  d.x = s.stock;
  if (with_switch) d.switch_x = market.apply(s.market);
  d.y = s.label;
  return d;
}

/// Rethrows the active exception with window/phase context, keeping its class.
[[noreturn]] inline void rethrow_with_context(std::size_t id, const std::string& phase) {
  const std::string ctx = "window " + std::to_string(id) + " (" + phase + "): ";
  try {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigError(ctx + e.what());
  } catch (const DataError& e) {
    throw DataError(ctx + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(ctx + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(ctx + e.what());
  }
}

}  // namespace detail

inline std::size_t thread_limit_from_env(std::size_t fallback) {
  if (const char* v = std::getenv("REGIME_LAB_THREADS")) {
    char* end = nullptr;
    const unsigned long n = std::strtoul(v, &end, 10);
    if (end != v && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
    throw ConfigError(std::string("REGIME_LAB_THREADS must be a positive integer, got '") + v + "'");
  }
  return fallback;
}

/// Trains and tests one window. `samples` rows are grouped by formation date.
inline WindowResult run_window(const PricePanel& panel, const SampleSet& samples, const std::vector<int>& months,
                               const std::vector<int>& row_month_pos, const WindowSpan& span,
                               const ExperimentConfig& cfg) {
  WindowResult res;
  res.id = span.id;
  std::string phase = "split";
  try {
    res.train_start = detail::month_label(months[span.train_begin]);
    res.train_end = detail::month_label(months[span.train_end - 1]);
    res.test_start = detail::month_label(months[span.train_end]);
    res.test_end = detail::month_label(months[span.test_end - 1]);

    std::vector<std::size_t> train_idx, val_idx, test_idx;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto m = static_cast<std::size_t>(row_month_pos[i]);
      if (m >= span.train_begin && m < span.validation_begin) train_idx.push_back(i);
      else if (m >= span.validation_begin && m < span.train_end) val_idx.push_back(i);
      else if (m >= span.train_end && m < span.test_end) test_idx.push_back(i);
    }
    if (test_idx.empty()) throw DataError("empty test span");
    const std::size_t test_first_day = samples.formation_day[test_idx.front()];
    const std::size_t val_first_day = val_idx.empty() ? test_first_day : samples.formation_day[val_idx.front()];

    // Purge rows whose label window reaches into the next segment.
    auto purge = [&](std::vector<std::size_t>& idx, std::size_t boundary) {
      const std::size_t before = idx.size();
      std::erase_if(idx, [&](std::size_t i) { return samples.label_end_day[i] >= boundary; });
      res.purged_rows += before - idx.size();
    };
    purge(train_idx, val_first_day);
    purge(val_idx, test_first_day);
    if (train_idx.size() < 2) throw DataError("fewer than 2 training rows after purging");

    res.hygiene_ok = true;
    for (const auto* idx : {&train_idx, &val_idx}) {
      for (std::size_t i : *idx) {
        ++res.hygiene_checked;
        if (samples.formation_day[i] >= test_first_day || samples.label_end_day[i] >= test_first_day) {
          res.hygiene_ok = false;
        }
      }
    }
    if (!res.hygiene_ok) throw StateError("training data overlaps the test span");

    const SampleSet train_s = samples.subset(train_idx);
    const SampleSet val_s = samples.subset(val_idx);
    const SampleSet test_s = samples.subset(test_idx);
    const ColumnStandardizer market = fit_market_standardizer(train_s);
    const bool sw = cfg.model.uses_switch();
    const Dataset train = detail::make_dataset(train_s, market, sw);
    const Dataset val = val_s.empty() ? Dataset{} : detail::make_dataset(val_s, market, sw);
    const Dataset test = detail::make_dataset(test_s, market, sw);
    res.train_rows = train.size();
    res.validation_rows = val.size();
    res.test_rows = test.size();

    phase = "train";
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(cfg.train.seed, 1000 + span.id);
    Network net(cfg.model);
    Rng init_rng(mix_seed(tc.seed, 7));
    net.initialize(init_rng);
    const TrainResult tr = fit(net, train, val, tc);
    res.steps = tr.steps;
    res.best_step = tr.best_step;
    res.model = net;

    phase = "test";
    res.in_sample_cross_entropy = evaluate_cross_entropy(net, train);
    const Matrix probs = net.predict(test.x, test.switch_ptr());
    res.out_sample_cross_entropy = evaluate_cross_entropy(probs.values(), test.y);

    std::vector<PortfolioSnapshot> snaps;
    std::vector<std::map<std::string, double>> fwd;
    for (std::size_t i = 0; i < test_s.size();) {
      std::size_t j = i;
      while (j < test_s.size() && test_s.date[j] == test_s.date[i]) ++j;
      std::vector<double> p(probs.values().begin() + static_cast<std::ptrdiff_t>(i),
                            probs.values().begin() + static_cast<std::ptrdiff_t>(j));
      std::vector<std::string> names(test_s.ticker.begin() + static_cast<std::ptrdiff_t>(i),
                                     test_s.ticker.begin() + static_cast<std::ptrdiff_t>(j));
      if (names.size() >= 2) {
        snaps.push_back(form_portfolio(p, names, cfg.decile, test_s.date[i]));
        std::map<std::string, double> r;
        for (std::size_t k = i; k < j; ++k) r.emplace(test_s.ticker[k], test_s.forward_return[k]);
        fwd.push_back(std::move(r));
      }
      if (sw) {
        res.mask_dates.push_back(test_s.date[i]);
        res.mask_vix.push_back(panel.vix[test_s.formation_day[i]]);
      }
      i = j;
    }
    res.pnl = compute_pnl(snaps, fwd);
    if (!res.pnl.pnl.empty()) res.annualized_return = annualized_return(res.pnl.pnl);
    if (res.pnl.pnl.size() >= 2) {
      try {
        res.sharpe = sharpe_ratio(res.pnl.pnl, cfg.risk_free);
        res.sharpe_defined = true;
      } catch (const DataError&) {
        res.sharpe_defined = false;
      }
    }
    if (sw) {
      std::vector<std::size_t> first_rows;
      for (std::size_t i = 0; i < test_s.size(); ++i) {
        if (i == 0 || test_s.date[i] != test_s.date[i - 1]) first_rows.push_back(i);
      }
      res.masks = net.conditional_mask(gather_rows(test.switch_x, first_rows));
    }
  } catch (...) {
    detail::rethrow_with_context(span.id, phase);
  }
  return res;
}

inline BacktestReport run_experiment(const PricePanel& panel, const ExperimentConfig& cfg) {
  cfg.validate();
  BacktestReport report;
  report.model = to_string(cfg.model.arch);
  report.seed = cfg.train.seed;

  const SampleSet samples = assemble_samples(panel, cfg.universe);
  report.samples = samples.size();
  report.drops = samples.drops;
  const std::vector<int> months = distinct_months(samples.date);
  std::vector<int> row_month_pos(samples.size());
  for (std::size_t i = 0, m = 0; i < samples.size(); ++i) {
    while (months[m] != month_key(samples.date[i])) ++m;
    row_month_pos[i] = static_cast<int>(m);
  }
  const WindowPlan plan = roll_windows(months.size(), cfg.window);
  report.warnings = plan.warnings;
  if (plan.windows.empty()) throw DataError("backtest: insufficient history for a single window");

  report.windows.resize(plan.windows.size());
  std::vector<std::exception_ptr> errors(plan.windows.size());
  const std::size_t n_threads = std::min(cfg.threads, plan.windows.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t k = next++; k < plan.windows.size(); k = next++) {
      try {
        report.windows[k] = run_window(panel, samples, months, row_month_pos, plan.windows[k], cfg);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AggregateMetrics& agg = report.aggregate;
  std::vector<double> ar, sh, ins, outs;
  for (const auto& w : report.windows) {
    if (std::isfinite(w.annualized_return)) ar.push_back(w.annualized_return);
    if (w.sharpe_defined) sh.push_back(w.sharpe);
    ins.push_back(w.in_sample_cross_entropy);
    outs.push_back(w.out_sample_cross_entropy);
  }
  if (!ar.empty()) agg.annualized_return = mean_of(ar);
  if (!sh.empty()) agg.sharpe = mean_of(sh);
  agg.sharpe_windows = sh.size();
  agg.in_sample_cross_entropy = mean_of(ins);
  agg.out_sample_cross_entropy = mean_of(outs);

  if (cfg.model.uses_switch()) {
    std::vector<Date> dates;
    std::vector<double> vix, mask_vals;
    for (const auto& w : report.windows) {
      dates.insert(dates.end(), w.mask_dates.begin(), w.mask_dates.end());
      vix.insert(vix.end(), w.mask_vix.begin(), w.mask_vix.end());
      mask_vals.insert(mask_vals.end(), w.masks.values().begin(), w.masks.values().end());
    }
    if (dates.size() >= 3) {
      Matrix masks(dates.size(), cfg.model.input_width, std::move(mask_vals));
      report.diagnostics = mask_diagnostics(dates, masks, vix, FeatureGroups::standard());
    } else {
      report.warnings.push_back("fewer than 3 mask dates; diagnostics skipped");
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report files

namespace detail {

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json correlation_json(const Correlation& c) {
  return {{"value", number_or_null(c.value)}, {"defined", c.defined}};
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  return out;
}

}  // namespace detail

inline nlohmann::json report_to_json(const BacktestReport& r) {
  using nlohmann::json;
  json j;
  j["schema"] = "regime_lab.backtest/1";
  j["model"] = r.model;
  j["seed"] = r.seed;
  j["samples"] = r.samples;
  j["drops"] = {{"candidates", r.drops.candidates},
                {"missing_features", r.drops.missing_features},
                {"degenerate_dates", r.drops.degenerate_dates},
                {"missing_forward", r.drops.missing_forward},
                {"drop_rate", r.drops.drop_rate()}};
  j["warnings"] = r.warnings;
  j["hygiene_ok"] = r.hygiene_ok();
  json windows = json::array();
  for (const auto& w : r.windows) {
    json pnl = json::array();
    for (std::size_t i = 0; i < w.pnl.pnl.size(); ++i) {
      pnl.push_back({{"date", format_date(w.pnl.dates[i])}, {"pnl", w.pnl.pnl[i]}});
    }
    windows.push_back({{"id", w.id},
                       {"train_start", w.train_start},
                       {"train_end", w.train_end},
                       {"test_start", w.test_start},
                       {"test_end", w.test_end},
                       {"train_rows", w.train_rows},
                       {"validation_rows", w.validation_rows},
                       {"test_rows", w.test_rows},
                       {"purged_rows", w.purged_rows},
                       {"steps", w.steps},
                       {"best_step", w.best_step},
                       {"in_sample_cross_entropy", w.in_sample_cross_entropy},
                       {"out_sample_cross_entropy", w.out_sample_cross_entropy},
                       {"annualized_return", detail::number_or_null(w.annualized_return)},
                       {"sharpe", detail::number_or_null(w.sharpe)},
                       {"sharpe_defined", w.sharpe_defined},
                       {"hygiene_ok", w.hygiene_ok},
                       {"hygiene_checked", w.hygiene_checked},
                       {"pnl", pnl},
                       {"pnl_log", w.pnl.log}});
  }
  j["windows"] = windows;
  j["aggregate"] = {{"annualized_return", detail::number_or_null(r.aggregate.annualized_return)},
                    {"sharpe", detail::number_or_null(r.aggregate.sharpe)},
                    {"sharpe_windows", r.aggregate.sharpe_windows},
                    {"in_sample_cross_entropy", detail::number_or_null(r.aggregate.in_sample_cross_entropy)},
                    {"out_sample_cross_entropy", detail::number_or_null(r.aggregate.out_sample_cross_entropy)}};
  // Same shape for every model; without a switch module nothing is defined.
  const MaskDiagnostics none{};
  const MaskDiagnostics& d = r.diagnostics ? *r.diagnostics : none;
  j["mask_correlations"] = {{"vix_reversal", detail::correlation_json(d.vix_reversal)},
                            {"vix_momentum", detail::correlation_json(d.vix_momentum)},
                            {"reversal_momentum", detail::correlation_json(d.reversal_momentum)},
                            {"dates", d.dates.size()}};
  return j;
}

/// Writes report.json, pnl_monthly.csv, metrics_by_window.csv, mask_weights.csv
/// and mask_correlations.csv into `dir`, plus models/window_<id>.snapshot for
/// each trained window. The mask files carry only a header for models without
/// a switch module.
inline void write_report(const BacktestReport& r, const std::string& dir) {
  {
    auto out = detail::open_out(dir + "/report.json");
    out << report_to_json(r).dump(2) << '\n';
  }
  {
    auto out = detail::open_out(dir + "/pnl_monthly.csv");
    out << "window,date,pnl,cumulative_pnl\n";
    double cum = 0.0;
    for (const auto& w : r.windows) {
      for (std::size_t i = 0; i < w.pnl.pnl.size(); ++i) {
        cum += w.pnl.pnl[i];
        out << w.id << ',' << format_date(w.pnl.dates[i]) << ',' << format_double(w.pnl.pnl[i]) << ','
            << format_double(cum) << '\n';
      }
    }
  }
  {
    auto out = detail::open_out(dir + "/metrics_by_window.csv");
    out << "window,train_start,train_end,test_start,test_end,train_rows,validation_rows,test_rows,purged_rows,"
           "in_sample_cross_entropy,out_sample_cross_entropy,annualized_return,sharpe\n";
    auto num = [](double v) { return std::isfinite(v) ? format_double(v) : std::string(); };
    for (const auto& w : r.windows) {
      out << w.id << ',' << w.train_start << ',' << w.train_end << ',' << w.test_start << ',' << w.test_end << ','
          << w.train_rows << ',' << w.validation_rows << ',' << w.test_rows << ',' << w.purged_rows << ','
          << num(w.in_sample_cross_entropy) << ',' << num(w.out_sample_cross_entropy) << ','
          << num(w.annualized_return) << ',' << num(w.sharpe) << '\n';
    }
    out << "mean,,,,,,,,," << num(r.aggregate.in_sample_cross_entropy) << ','
        << num(r.aggregate.out_sample_cross_entropy) << ',' << num(r.aggregate.annualized_return) << ','
        << num(r.aggregate.sharpe) << '\n';
  }
  {
    auto out = detail::open_out(dir + "/mask_weights.csv");
    out << "date,vix";
    for (std::size_t i = 0; i < kStockFeatureWidth; ++i) out << ",w" << i;
    out << ",momentum,reversal,january\n";
    if (r.diagnostics) {
      const auto& d = *r.diagnostics;
      for (std::size_t i = 0; i < d.dates.size(); ++i) {
        out << format_date(d.dates[i]) << ',' << format_double(d.vix[i]);
        for (double v : d.masks.row(i)) out << ',' << format_double(v);
        out << ',' << format_double(d.weights.momentum[i]) << ',' << format_double(d.weights.reversal[i]) << ','
            << format_double(d.weights.january[i]) << '\n';
      }
    }
  }
  {
    auto out = detail::open_out(dir + "/mask_correlations.csv");
    out << "pair,correlation,defined\n";
    if (r.diagnostics) {
      const auto& d = *r.diagnostics;
      auto row = [&](const char* name, const Correlation& c) {
        out << name << ',' << (c.defined ? format_double(c.value) : std::string()) << ',' << (c.defined ? 1 : 0) << '\n';
      };
      row("vix_reversal", d.vix_reversal);
      row("vix_momentum", d.vix_momentum);
      row("reversal_momentum", d.reversal_momentum);
    }
  }
  for (const auto& w : r.windows) {
    if (!w.model) continue;
    std::filesystem::create_directories(dir + "/models");
    save_snapshot(dir + "/models/window_" + std::to_string(w.id) + ".snapshot", *w.model);
  }
}

}  // namespace regime_lab
