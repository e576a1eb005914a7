#pragma once

// Synthetic two-regime equity market. A daily Markov chain picks the regime;
// each regime sets index drift and volatility, idiosyncratic volatility, and
// which cross-sectional anomaly is active:
//   momentum: drift increasing in the trailing 12-month return (skipping the
//             most recent ~2 months)
//   reversal: drift decreasing in the trailing 20-day return
// The anomaly is scaled so that over a 20-day holding period the expected
// excess return is strength * idio_vol * sqrt(20) per unit of signal z-score,
// i.e. a signal-to-noise ratio of `strength`.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "regime_lab/panel.hpp"

namespace regime_lab {

enum class AnomalyMode { momentum, reversal };

inline std::string to_string(AnomalyMode m) { return m == AnomalyMode::momentum ? "momentum" : "reversal"; }

inline AnomalyMode parse_anomaly_mode(const std::string& s) {
  if (s == "momentum") return AnomalyMode::momentum;
  if (s == "reversal") return AnomalyMode::reversal;
  throw ConfigError("unknown anomaly mode '" + s + "' (expected momentum or reversal)");
}

struct RegimeSpec {
  double index_drift = 0.0;  // daily log drift
  double index_vol = 0.01;   // daily
  double idio_vol = 0.015;   // daily
  AnomalyMode mode = AnomalyMode::momentum;
  double strength = 0.5;
};

struct RegimeParams {
  // Regime 0 is bullish (calm), regime 1 bearish (volatile).
  std::array<RegimeSpec, 2> regimes{
      RegimeSpec{0.0004, 0.007, 0.015, AnomalyMode::momentum, 0.5},
      RegimeSpec{-0.0004, 0.02, 0.02, AnomalyMode::reversal, 0.5}};
  std::array<std::array<double, 2>, 2> transition{{{0.99, 0.01}, {0.02, 0.98}}};
  double implied_vol_premium = 0.1;
  int initial_regime = 0;
  std::size_t vix_window = 10;        // days of index returns behind the implied-vol proxy
  double vol_persistence = 0.98;      // AR(1) coefficient of daily log-vol shocks
  double vol_of_vol = 0.05;           // innovation std of the log-vol AR(1)
  double beta_spread = 0.2;           // betas uniform in [1 - spread, 1 + spread]
  double convexity = 0.0;             // adds convexity * (z_rev^2 - 1) to the anomaly signal, z_rev clipped to +-3
  std::size_t momentum_skip = 42;     // days
  std::size_t momentum_lookback = 252;
  std::size_t reversal_lookback = 20;
  std::size_t burn_in = 320;          // simulated but not emitted
  std::string start_date = "2008-01-02";

  void validate() const {
    for (int r = 0; r < 2; ++r) {
      const auto& row = transition[r];
      if (row[0] < 0.0 || row[1] < 0.0 || std::abs(row[0] + row[1] - 1.0) > 1e-12) {
        throw ConfigError("sim.transition row " + std::to_string(r) + " must be nonnegative and sum to 1");
      }
      const RegimeSpec& s = regimes[r];
      if (!(s.index_vol > 0.0) || !(s.idio_vol > 0.0)) {
        throw ConfigError("sim regime " + std::to_string(r) + ": volatilities must be > 0");
      }
      if (!(s.strength >= 0.0)) throw ConfigError("sim regime " + std::to_string(r) + ": strength must be >= 0");
      if (!std::isfinite(s.index_drift)) throw ConfigError("sim regime drift must be finite");
    }
    if (initial_regime != 0 && initial_regime != 1) throw ConfigError("sim.initial_regime must be 0 or 1");
    if (!(implied_vol_premium >= 0.0)) throw ConfigError("sim.implied_vol_premium must be >= 0");
    if (vix_window < 2) throw ConfigError("sim.vix_window must be >= 2");
    if (!(vol_persistence >= 0.0 && vol_persistence < 1.0)) throw ConfigError("sim.vol_persistence must be in [0,1)");
    if (!(vol_of_vol >= 0.0)) throw ConfigError("sim.vol_of_vol must be >= 0");
    if (!(beta_spread >= 0.0 && beta_spread < 1.0)) throw ConfigError("sim.beta_spread must be in [0,1)");
    if (!std::isfinite(convexity)) throw ConfigError("sim.convexity must be finite");
    if (momentum_lookback < 2 || reversal_lookback < 2) throw ConfigError("sim lookbacks must be >= 2");
    if (burn_in < momentum_skip + momentum_lookback) {
      throw ConfigError("sim.burn_in must cover momentum_skip + momentum_lookback");
    }
    if (!parse_date(start_date)) throw ConfigError("sim.start_date must be an ISO date");
  }

  /// Stationary probability of each regime.
  std::array<double, 2> stationary() const {
    const double a = transition[0][1], b = transition[1][0];
    if (a + b == 0.0) return {initial_regime == 0 ? 1.0 : 0.0, initial_regime == 1 ? 1.0 : 0.0};
    return {b / (a + b), a / (a + b)};
  }
};

struct SimPanel {
  PricePanel panel;
  std::vector<int> regime;           // per emitted day
  std::vector<double> index_vol;     // per emitted day, the daily vol actually used
  RegimeParams params;

  AnomalyMode anomaly(std::size_t day) const { return params.regimes[regime.at(day)].mode; }
};

/// Markov chain path of length n started in `initial`.
inline std::vector<int> simulate_regime_path(const std::array<std::array<double, 2>, 2>& transition, int initial,
                                             std::size_t n, Rng& rng) {
  std::vector<int> path;
  path.reserve(n);
  int state = initial;
  for (std::size_t d = 0; d < n; ++d) {
    if (d > 0) state = rng.uniform() < transition[state][1] ? 1 : 0;
    path.push_back(state);
  }
  return path;
}

/// Weekdays starting on `start` (moved forward to a weekday if needed).
inline std::vector<Date> weekday_dates(Date start, std::size_t n) {
  using namespace std::chrono;
  std::vector<Date> out;
  out.reserve(n);
  for (Date d = start; out.size() < n; d += days{1}) {
    const weekday wd{d};
    if (wd != Saturday && wd != Sunday) out.push_back(d);
  }
  return out;
}

namespace detail {

inline void zscore_in_place(std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / n);
  for (double& x : v) x = sd > 0.0 ? (x - mean) / sd : 0.0;
}

}  // namespace detail

inline SimPanel simulate(const RegimeParams& params, std::size_t n_stocks, std::size_t n_days, std::uint64_t seed) {
  params.validate();
  if (n_stocks < 20) throw ConfigError("sim.n_stocks must be >= 20");
  if (n_days < 300) throw ConfigError("sim.n_days must be >= 300");

  const std::size_t burn = params.burn_in;
  const std::size_t total = burn + n_days;
  Rng regime_rng(mix_seed(seed, 11)), index_rng(mix_seed(seed, 12)), stock_rng(mix_seed(seed, 13)),
      setup_rng(mix_seed(seed, 14));

  // Start the chain so that the first emitted day is in the configured regime.
  std::vector<int> path = simulate_regime_path(params.transition, params.initial_regime, n_days, regime_rng);
  std::vector<int> regime(total);
  for (std::size_t d = 0; d < total; ++d) regime[d] = d < burn ? params.initial_regime : path[d - burn];

  std::vector<double> beta(n_stocks), log_px(n_stocks);
  for (std::size_t i = 0; i < n_stocks; ++i) {
    beta[i] = 1.0 - params.beta_spread + 2.0 * params.beta_spread * setup_rng.uniform();
    log_px[i] = std::log(40.0) + 1.2 * setup_rng.uniform();
  }
  std::vector<std::vector<double>> hist(n_stocks, std::vector<double>(total));
  std::vector<double> index_ret(total, 0.0), vol_used(total, 0.0), index_level(total);
  double log_index = std::log(1000.0);
  double h = 0.0;
  const double h_var = params.vol_persistence < 1.0
                           ? params.vol_of_vol * params.vol_of_vol / (1.0 - params.vol_persistence * params.vol_persistence)
                           : 0.0;

  std::vector<double> mom(n_stocks), rev(n_stocks);
  const double sqrt_hold = std::sqrt(20.0);
  for (std::size_t d = 0; d < total; ++d) {
    const RegimeSpec& rs = params.regimes[regime[d]];
    h = params.vol_persistence * h + params.vol_of_vol * index_rng.normal();
    const double vol = rs.index_vol * std::exp(h - 0.5 * h_var);
    const double r_index = rs.index_drift + vol * index_rng.normal();
    index_ret[d] = r_index;
    vol_used[d] = vol;
    log_index += r_index;
    index_level[d] = log_index;

    // Signals from prices strictly before d.
    const bool mom_ready = d >= params.momentum_skip + params.momentum_lookback + 1;
    const bool rev_ready = d >= params.reversal_lookback + 1;
    for (std::size_t i = 0; i < n_stocks; ++i) {
      const auto& lp = hist[i];
      mom[i] = mom_ready ? lp[d - 1 - params.momentum_skip] - lp[d - 1 - params.momentum_skip - params.momentum_lookback] : 0.0;
      rev[i] = rev_ready ? lp[d - 1] - lp[d - 1 - params.reversal_lookback] : 0.0;
    }
    if (mom_ready) detail::zscore_in_place(mom);
    if (rev_ready) detail::zscore_in_place(rev);
    const double scale = rs.strength * rs.idio_vol / sqrt_hold;
    for (std::size_t i = 0; i < n_stocks; ++i) {
      double signal = rs.mode == AnomalyMode::momentum ? mom[i] : -rev[i];
      if (rev_ready) {
        // Clipped so that one extreme name cannot feed its own signal.
        const double z = std::clamp(rev[i], -3.0, 3.0);
        signal += params.convexity * (z * z - 1.0);
      }
      const double ret = beta[i] * r_index + scale * signal + rs.idio_vol * stock_rng.normal()
                         - 0.5 * rs.idio_vol * rs.idio_vol;
      log_px[i] += ret;
      hist[i][d] = log_px[i];
    }
  }

  SimPanel sim;
  sim.params = params;
  PricePanel& p = sim.panel;
  p.dates = weekday_dates(*parse_date(params.start_date), n_days);
  const int width = n_stocks > 1000 ? 4 : 3;
  for (std::size_t i = 0; i < n_stocks; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "S%0*zu", width, i);
    p.tickers.emplace_back(buf);
    std::vector<double> c(n_days);
    for (std::size_t d = 0; d < n_days; ++d) c[d] = std::exp(hist[i][burn + d]);
    p.close.push_back(std::move(c));
  }
  p.index_close.resize(n_days);
  p.vix.resize(n_days);
  const double annual = std::sqrt(252.0);
  for (std::size_t d = 0; d < n_days; ++d) {
    const std::size_t g = burn + d;
    p.index_close[d] = std::exp(index_level[g]);
    double ss = 0.0;
    for (std::size_t k = 0; k < params.vix_window; ++k) ss += index_ret[g - k] * index_ret[g - k];
    p.vix[d] = 100.0 * annual * std::sqrt(ss / static_cast<double>(params.vix_window)) * (1.0 + params.implied_vol_premium);
    sim.regime.push_back(regime[g]);
    sim.index_vol.push_back(vol_used[g]);
  }
  p.validate();
  return sim;
}

/// Ground-truth regime on a calendar date of the simulation.
inline int regime_oracle(const SimPanel& sim, Date date) {
  auto day = sim.panel.day_index(date);
  if (!day) throw std::out_of_range("regime_oracle: " + format_date(date) + " outside simulated calendar");
  return sim.regime[*day];
}

inline void write_regimes(const SimPanel& sim, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << "date,regime,anomaly,index_vol\n";
  for (std::size_t d = 0; d < sim.regime.size(); ++d) {
    out << format_date(sim.panel.dates[d]) << ',' << sim.regime[d] << ',' << to_string(sim.anomaly(d)) << ','
        << format_double(sim.index_vol[d]) << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

// ---------------------------------------------------------------------------
// Index-only market with nonlinear monthly variance dynamics. Each month draws
// a latent stress score z that shows up in implied volatility at once and in
// realized variance only the following month, as a jump when z clears a
// threshold:
//   h[m+1] = mu + phi (h[m] - mu) + jump (1{z[m] > threshold} - P(z > threshold)) + shock_sd eta
// with h the log daily variance. VIX on each day of month m is the trailing
// realized index volatility scaled by (1 + premium) exp(loading z[m]).

struct VolIndexParams {
  double base_daily_vol = 0.01;
  double persistence = 0.8;
  double shock_sd = 0.15;
  double stress_threshold = 1.0;
  double stress_jump = 1.2;
  double stress_loading = 0.5;
  double implied_vol_premium = 0.1;
  double vix_noise = 0.02;
  std::size_t vix_window = 10;
  std::string start_date = "1960-01-01";

  void validate() const {
    if (!(base_daily_vol > 0.0)) throw ConfigError("vol_index.base_daily_vol must be > 0");
    if (!(persistence > -1.0 && persistence < 1.0)) throw ConfigError("vol_index.persistence must be in (-1,1)");
    if (!(shock_sd >= 0.0)) throw ConfigError("vol_index.shock_sd must be >= 0");
    if (!(stress_jump >= 0.0)) throw ConfigError("vol_index.stress_jump must be >= 0");
    if (!(stress_loading >= 0.0)) throw ConfigError("vol_index.stress_loading must be >= 0");
    if (!(implied_vol_premium > -1.0)) throw ConfigError("vol_index.implied_vol_premium must be > -1");
    if (!(vix_noise >= 0.0)) throw ConfigError("vol_index.vix_noise must be >= 0");
    if (vix_window == 0) throw ConfigError("vol_index.vix_window must be >= 1");
    if (!parse_date(start_date)) throw ConfigError("vol_index.start_date '" + start_date + "' is not YYYY-MM-DD");
  }
};

struct VolIndexPanel {
  PricePanel panel;
  std::vector<double> month_log_variance;  // h per calendar month
  std::vector<double> stress;              // z per calendar month
};

inline VolIndexPanel simulate_vol_index(const VolIndexParams& params, std::size_t n_months, std::uint64_t seed) {
  params.validate();
  if (n_months < 24) throw ConfigError("vol_index.n_months must be >= 24");
  using namespace std::chrono;
  const year_month_day start{*parse_date(params.start_date)};
  const year_month first{start.year(), start.month()};
  VolIndexPanel out;
  PricePanel& p = out.panel;
  for (Date d = sys_days{first / 1}; d < sys_days{(first + months{static_cast<int>(n_months)}) / 1}; d += days{1}) {
    const weekday wd{d};
    if (wd != Saturday && wd != Sunday) p.dates.push_back(d);
  }
  Rng state_rng(mix_seed(seed, 21)), ret_rng(mix_seed(seed, 22)), vix_rng(mix_seed(seed, 23));
  const double mu = 2.0 * std::log(params.base_daily_vol);
  // P(z > threshold) for a standard normal.
  const double p_stress = 0.5 * std::erfc(params.stress_threshold / std::sqrt(2.0));
  double h = mu;
  for (std::size_t m = 0; m < n_months; ++m) {
    out.month_log_variance.push_back(h);
    const double z = state_rng.normal();
    out.stress.push_back(z);
    const double jump = params.stress_jump * ((z > params.stress_threshold ? 1.0 : 0.0) - p_stress);
    h = mu + params.persistence * (h - mu) + jump + params.shock_sd * state_rng.normal();
  }
  double level = 1000.0;
  std::vector<double> sq;
  int cur_key = month_key(p.dates.front());
  std::size_t m = 0;
  for (std::size_t d = 0; d < p.dates.size(); ++d) {
    if (month_key(p.dates[d]) != cur_key) {
      cur_key = month_key(p.dates[d]);
      ++m;
    }
    const double var = std::exp(out.month_log_variance[m]);
    if (d > 0) {
      const double r = std::sqrt(var) * ret_rng.normal() - 0.5 * var;
      level *= std::exp(r);
      sq.push_back(r * r);
    }
    p.index_close.push_back(level);
    double trailing = var;
    if (!sq.empty()) {
      const std::size_t w = std::min(params.vix_window, sq.size());
      trailing = 0.0;
      for (std::size_t k = sq.size() - w; k < sq.size(); ++k) trailing += sq[k];
      trailing /= static_cast<double>(w);
    }
    const double scale = (1.0 + params.implied_vol_premium) *
                         std::exp(params.stress_loading * out.stress[m] + params.vix_noise * vix_rng.normal());
    p.vix.push_back(100.0 * std::sqrt(252.0 * trailing) * scale);
  }
  p.validate();
  return out;
}

}  // namespace regime_lab
