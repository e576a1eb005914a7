#pragma once

// Next-month realized variance of the index from the 41 market features.
// Eight models share one chronological split: last-value persistence, OLS,
// plain ANNs with 1-3 hidden layers of width 41, and ResNets with 1-3
// residual blocks (2, 4, 6 layers), the networks trained with squared error.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "regime_lab/features.hpp"
#include "regime_lab/train.hpp"

namespace regime_lab {

/// 1 - SS_res / SS_tot with SS_tot taken around `baseline_mean`.
inline double r_squared(std::span<const double> predictions, std::span<const double> targets, double baseline_mean) {
  if (predictions.size() != targets.size()) throw ShapeError("r_squared: length mismatch");
  if (targets.size() < 2) throw DataError("r_squared: need at least 2 targets");
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    ss_res += (targets[i] - predictions[i]) * (targets[i] - predictions[i]);
    ss_tot += (targets[i] - baseline_mean) * (targets[i] - baseline_mean);
  }
  if (!(ss_tot > 0.0)) throw DataError("r_squared: zero total variance, R^2 undefined");
  return 1.0 - ss_res / ss_tot;
}

/// Prediction for period t+1 is the value at t; returns n-1 predictions
/// aligned with series[1..].
inline std::vector<double> persistence_baseline(std::span<const double> series) {
  if (series.size() < 2) throw DataError("persistence_baseline: need at least 2 values");
  return std::vector<double>(series.begin(), series.end() - 1);
}

struct LinearModel {
  std::vector<double> coef;
  double intercept = 0.0;
  bool ridge_fallback = false;

  std::vector<double> predict(const Matrix& x) const {
    if (x.cols() != coef.size()) throw ShapeError("LinearModel: feature width mismatch");
    std::vector<double> out(x.rows(), intercept);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < coef.size(); ++c) out[r] += coef[c] * x(r, c);
    }
    return out;
  }
};

inline constexpr double kRidgeFallback = 1e-8;

/// Ordinary least squares with intercept via the normal equations on centered
/// data. A singular or badly conditioned design gets a 1e-8 ridge.
inline LinearModel linear_baseline(const Matrix& x, std::span<const double> y) {
  if (x.rows() != y.size()) throw ShapeError("linear_baseline: rows/targets mismatch");
  if (x.rows() < x.cols() + 1) {
    throw DataError("linear_baseline: need at least " + std::to_string(x.cols() + 1) + " rows, got " +
                    std::to_string(x.rows()));
  }
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto k = static_cast<Eigen::Index>(x.cols());
  Eigen::MatrixXd X(n, k);
  Eigen::VectorXd Y(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < k; ++c) X(r, c) = x(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    Y(r) = y[static_cast<std::size_t>(r)];
  }
  const Eigen::RowVectorXd xm = X.colwise().mean();
  const double ym = Y.mean();
  X.rowwise() -= xm;
  Y.array() -= ym;
  Eigen::MatrixXd xtx = X.transpose() * X;
  const Eigen::VectorXd xty = X.transpose() * Y;

  LinearModel model;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(xtx);
  Eigen::VectorXd beta;
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.rcond() > 1e-12) {
    beta = ldlt.solve(xty);
  } else {
    model.ridge_fallback = true;
    xtx.diagonal().array() += kRidgeFallback;
    Eigen::LDLT<Eigen::MatrixXd> ridge(xtx);
    if (ridge.info() != Eigen::Success) throw DataError("linear_baseline: degenerate design");
    beta = ridge.solve(xty);
  }
  if (!beta.allFinite()) throw DataError("linear_baseline: non-finite solution");
  model.coef.assign(beta.data(), beta.data() + beta.size());
  model.intercept = ym - xm.dot(beta);
  return model;
}

struct RvDataset {
  std::vector<Date> dates;         // formation month ends
  Matrix features;                 // n x 41 raw market features
  std::vector<double> current_rv;  // realized variance of the formation month
  std::vector<double> target;      // realized variance of the following month
};

/// One row per formation month with complete features and a complete next
/// month. The final calendar month is treated as possibly incomplete.
inline RvDataset build_rv_dataset(const PricePanel& panel) {
  const MonthCalendar cal(panel);
  RvDataset ds;
  std::vector<double> vals;
  for (std::size_t m = 0; m + 2 < cal.n_months(); ++m) {
    auto f = market_features(panel, cal, m);
    if (!f) continue;
    ds.dates.push_back(panel.dates[cal.ends[m]]);
    vals.insert(vals.end(), f->begin(), f->end());
    ds.current_rv.push_back(month_realized_volatility(panel, cal, m).value);
    ds.target.push_back(month_realized_volatility(panel, cal, m + 1).value);
  }
  ds.features = Matrix(ds.dates.size(), kMarketFeatureWidth, std::move(vals));
  return ds;
}

struct RvConfig {
  std::size_t train_months = 120;  // 0: everything before the test span
  std::size_t test_months = 36;
  double validation_fraction = 0.1;
  std::size_t hidden_width = 41;
  TrainConfig train = [] {
    TrainConfig t;
    t.batch_size = 32;
    t.epochs = 100;
    t.lambda_init = 1e-2;
    t.lambda_decay = 0.999;
    t.dropout_rate = 0.1;
    t.noise_std = 0.1;
    t.validate_every = 10;
    return t;
  }();
  std::size_t threads = 1;

  void validate() const {
    train.validate();
    if (test_months < 2) throw ConfigError("rv.test_months must be >= 2");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw ConfigError("rv.validation_fraction must be in [0,1)");
    }
    if (hidden_width == 0) throw ConfigError("rv.hidden_width must be >= 1");
    if (threads == 0) throw ConfigError("threads must be >= 1");
  }
};

struct RvModelScore {
  std::string model;
  double in_sample_r2 = std::numeric_limits<double>::quiet_NaN();
  double out_sample_r2 = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;
};

struct RvEvalReport {
  std::vector<RvModelScore> models;
  std::string split_hash;
  std::size_t in_sample_rows = 0;
  std::size_t test_rows = 0;
  std::string in_sample_start, in_sample_end, test_start, test_end;
  bool degenerate = false;
  std::uint64_t seed = 0;

  const RvModelScore& score(const std::string& name) const {
    for (const auto& m : models) {
      if (m.model == name) return m;
    }
    throw std::out_of_range("no model named " + name);
  }
};

inline const std::vector<std::string>& rv_model_names() {
  static const std::vector<std::string> names{"Simple Strategy", "Linear Regression", "1-layer ANN", "2-layer ANN",
                                              "3-layer ANN",     "2-layer ResNet",    "4-layer ResNet", "6-layer ResNet"};
  return names;
}

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline ModelSpec rv_network_spec(std::size_t model_index, std::size_t width) {
  ModelSpec s;
  if (model_index >= 2 && model_index <= 4) {
    s = ann_spec(kMarketFeatureWidth, std::vector<std::size_t>(model_index - 1, width));
  } else {
    s = resnet_spec(kMarketFeatureWidth, model_index - 4);
  }
  s.output = OutputKind::identity;
  return s;
}

}  // namespace detail

inline RvEvalReport run_rv_experiment(const PricePanel& panel, const RvConfig& cfg) {
  cfg.validate();
  const RvDataset ds = build_rv_dataset(panel);
  const std::size_t n = ds.dates.size();
  if (n < cfg.test_months + 2) {
    throw DataError("rv: insufficient history, " + std::to_string(n) + " usable months");
  }
  const std::size_t test_begin = n - cfg.test_months;
  const std::size_t in_begin = cfg.train_months == 0 ? 0 : (cfg.train_months > test_begin ? n : test_begin - cfg.train_months);
  if (in_begin == n || test_begin - in_begin < kMarketFeatureWidth + 1) {
    throw DataError("rv: insufficient history for " + std::to_string(cfg.train_months) + " training months plus " +
                    std::to_string(cfg.test_months) + " test months (" + std::to_string(n) + " usable)");
  }
  std::vector<std::size_t> in_idx, test_idx;
  for (std::size_t i = in_begin; i < test_begin; ++i) in_idx.push_back(i);
  for (std::size_t i = test_begin; i < n; ++i) test_idx.push_back(i);

  RvEvalReport rep;
  rep.seed = cfg.train.seed;
  rep.in_sample_rows = in_idx.size();
  rep.test_rows = test_idx.size();
  rep.in_sample_start = format_date(ds.dates[in_idx.front()]);
  rep.in_sample_end = format_date(ds.dates[in_idx.back()]);
  rep.test_start = format_date(ds.dates[test_idx.front()]);
  rep.test_end = format_date(ds.dates[test_idx.back()]);

  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* idx : {&in_idx, &test_idx}) {
    for (std::size_t i : *idx) {
      const auto days = ds.dates[i].time_since_epoch().count();
      h = detail::fnv1a(h, &days, sizeof days);
      h = detail::fnv1a(h, &ds.target[i], sizeof(double));
      for (double v : ds.features.row(i)) h = detail::fnv1a(h, &v, sizeof v);
    }
    const std::uint64_t sep = 0xffULL;
    h = detail::fnv1a(h, &sep, sizeof sep);
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  rep.split_hash = hex;

  auto pick = [&](const std::vector<std::size_t>& idx, const std::vector<double>& v) {
    std::vector<double> out;
    for (std::size_t i : idx) out.push_back(v[i]);
    return out;
  };
  const std::vector<double> y_in = pick(in_idx, ds.target), y_test = pick(test_idx, ds.target);
  const double base = std::accumulate(y_in.begin(), y_in.end(), 0.0) / static_cast<double>(y_in.size());
  double ss = 0.0;
  for (double v : y_in) ss += (v - base) * (v - base);
  const double y_sd = std::sqrt(ss / static_cast<double>(y_in.size()));
  rep.degenerate = !(y_sd > 1e-14 * std::max(std::abs(base), 1e-300));

  const ColumnStandardizer scaler = ColumnStandardizer::fit(gather_rows(ds.features, in_idx));
  const Matrix x_in = scaler.apply(gather_rows(ds.features, in_idx));
  const Matrix x_test = scaler.apply(gather_rows(ds.features, test_idx));

  const auto& names = rv_model_names();
  rep.models.resize(names.size());
  std::vector<std::exception_ptr> errors(names.size());

  auto score = [&](std::size_t k, const std::vector<double>& p_in, const std::vector<double>& p_test) {
    RvModelScore& s = rep.models[k];
    if (rep.degenerate) return;
    try {
      s.in_sample_r2 = r_squared(p_in, y_in, base);
      s.out_sample_r2 = r_squared(p_test, y_test, base);
      s.defined = true;
    } catch (const DataError&) {
      s.defined = false;
    }
  };

  auto run_model = [&](std::size_t k) {
    rep.models[k].model = names[k];
    if (k == 0) {
      score(k, pick(in_idx, ds.current_rv), pick(test_idx, ds.current_rv));
      return;
    }
    if (k == 1) {
      const LinearModel lm = linear_baseline(x_in, y_in);
      score(k, lm.predict(x_in), lm.predict(x_test));
      return;
    }
    if (rep.degenerate) return;
    // Networks fit a standardized target; the validation tail picks the snapshot.
    const std::size_t n_val = cfg.validation_fraction > 0.0
                                  ? std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(
                                                                 cfg.validation_fraction * static_cast<double>(in_idx.size()))))
                                  : 0;
    const std::size_t n_fit = in_idx.size() - n_val;
    Dataset fit_set, val_set;
    std::vector<std::size_t> fit_rows(n_fit), val_rows(n_val);
    std::iota(fit_rows.begin(), fit_rows.end(), std::size_t{0});
    std::iota(val_rows.begin(), val_rows.end(), n_fit);
    fit_set.x = gather_rows(x_in, fit_rows);
    for (std::size_t i : fit_rows) fit_set.y.push_back((y_in[i] - base) / y_sd);
    if (n_val > 0) {
      val_set.x = gather_rows(x_in, val_rows);
      for (std::size_t i : val_rows) val_set.y.push_back((y_in[i] - base) / y_sd);
    }
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(cfg.train.seed, 500 + k);
    Network net(detail::rv_network_spec(k, cfg.hidden_width));
    Rng init(mix_seed(tc.seed, 3));
    net.initialize(init);
    fit(net, fit_set, val_set, tc);
    auto unscale = [&](const Matrix& m) {
      std::vector<double> out;
      for (double v : m.values()) out.push_back(base + y_sd * v);
      return out;
    };
    score(k, unscale(net.predict(x_in)), unscale(net.predict(x_test)));
  };

  const std::size_t n_threads = std::min(cfg.threads, names.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t k = next++; k < names.size(); k = next++) {
      try {
        run_model(k);
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
  return rep;
}

inline void write_rv_report(const RvEvalReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << "model,in_sample_r2,out_sample_r2,defined\n";
  for (const auto& m : r.models) {
    out << m.model << ',' << (m.defined ? format_double(m.in_sample_r2) : std::string()) << ','
        << (m.defined ? format_double(m.out_sample_r2) : std::string()) << ',' << (m.defined ? 1 : 0) << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

inline nlohmann::json rv_report_to_json(const RvEvalReport& r) {
  nlohmann::json j;
  j["schema"] = "regime_lab.rv/1";
  j["seed"] = r.seed;
  j["split_hash"] = r.split_hash;
  j["degenerate"] = r.degenerate;
  j["in_sample"] = {{"rows", r.in_sample_rows}, {"start", r.in_sample_start}, {"end", r.in_sample_end}};
  j["test"] = {{"rows", r.test_rows}, {"start", r.test_start}, {"end", r.test_end}};
  j["models"] = nlohmann::json::array();
  for (const auto& m : r.models) {
    nlohmann::json e{{"model", m.model}, {"defined", m.defined}};
    e["in_sample_r2"] = m.defined ? nlohmann::json(m.in_sample_r2) : nlohmann::json(nullptr);
    e["out_sample_r2"] = m.defined ? nlohmann::json(m.out_sample_r2) : nlohmann::json(nullptr);
    j["models"].push_back(std::move(e));
  }
  return j;
}

}  // namespace regime_lab
