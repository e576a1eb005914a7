#pragma once

// Run configuration for the command-line driver, read from JSON. Every key is
// optional; anything not listed here is rejected with its dotted path. The
// resolved form (all defaults filled in) is what gets written next to outputs.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "regime_lab/backtest.hpp"
#include "regime_lab/marketsim.hpp"
#include "regime_lab/volpredict.hpp"

namespace regime_lab {

struct ModelChoice {
  std::string name = "switching_resnet";
  std::size_t n_blocks = 3;
  std::size_t switch_blocks = 3;
  std::vector<std::size_t> hidden_widths;

  /// Architecture defaults for `name`.
  static ModelChoice defaults_for(const std::string& name) {
    ModelChoice m;
    m.name = name;
    if (name == "linear") {
      m.n_blocks = 0;
      m.switch_blocks = 0;
    } else if (name == "ann") {
      m.n_blocks = 0;
      m.switch_blocks = 0;
      m.hidden_widths = {kStockFeatureWidth, kStockFeatureWidth, kStockFeatureWidth};
    } else if (name == "attention_resnet") {
      m.n_blocks = 11;
      m.switch_blocks = 0;
    } else if (name == "switching_resnet") {
      m.n_blocks = 3;
      m.switch_blocks = 3;
    } else {
      throw ConfigError("model.name must be one of linear, ann, attention_resnet, switching_resnet; got '" + name + "'");
    }
    return m;
  }

  ModelSpec spec() const {
    if (name == "linear") return linear_spec(kStockFeatureWidth);
    if (name == "ann") return ann_spec(kStockFeatureWidth, hidden_widths);
    if (name == "attention_resnet") return attention_resnet_spec(kStockFeatureWidth, n_blocks);
    if (name == "switching_resnet") {
      return switching_resnet_spec(kStockFeatureWidth, kMarketFeatureWidth, n_blocks, switch_blocks);
    }
    throw ConfigError("unknown model '" + name + "'");
  }
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::size_t threads = 0;  // 0: REGIME_LAB_THREADS, else 1
  std::string output_dir = "out";
  struct {
    std::string prices = "data/prices.csv";
    std::string index = "data/index.csv";
  } data;
  struct {
    std::size_t n_stocks = 50;
    std::size_t n_days = 2016;
    RegimeParams regime;
  } simulate;
  ModelChoice model;
  TrainConfig train;
  RollingWindow window;
  UniverseFilter universe;
  struct {
    double risk_free = 0.0;
    double decile = 0.1;
  } backtest;
  struct {
    std::string source = "simulate";  // or "data"
    std::size_t n_months = 600;
    VolIndexParams vol_index;
    RvConfig eval;
  } rv;

  std::size_t resolved_threads() const { return threads > 0 ? threads : thread_limit_from_env(1); }

  ExperimentConfig experiment() const {
    ExperimentConfig e;
    e.model = model.spec();
    e.train = train;
    e.train.seed = seed;
    e.window = window;
    e.universe = universe;
    e.risk_free = backtest.risk_free;
    e.decile = backtest.decile;
    e.threads = resolved_threads();
    return e;
  }

  RvConfig rv_config() const {
    RvConfig c = rv.eval;
    c.train.seed = seed;
    c.threads = resolved_threads();
    return c;
  }

  void validate() const {
    experiment().validate();
    rv_config().validate();
    simulate.regime.validate();
    rv.vol_index.validate();
    if (rv.source != "simulate" && rv.source != "data") {
      throw ConfigError("rv.source must be 'simulate' or 'data', got '" + rv.source + "'");
    }
  }
};

namespace detail {

/// Reads typed keys from one JSON object and rejects the ones nobody asked for.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + dotted(key) + "' has the wrong type");
    }
  }

  /// Subsection, or an empty object when absent.
  Section sub(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, dotted(key));
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + dotted(key) + "'");
    }
  }

  std::string dotted(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config: " : "config key '" + path_ + "' "; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_train(Section s, TrainConfig& t) {
  s.get("batch_size", t.batch_size);
  s.get("lr_init", t.lr_init);
  s.get("lr_decay", t.lr_decay);
  s.get("lambda_init", t.lambda_init);
  s.get("lambda_decay", t.lambda_decay);
  s.get("dropout_rate", t.dropout_rate);
  s.get("noise_std", t.noise_std);
  s.get("leaky_slope", t.leaky_slope);
  s.get("epochs", t.epochs);
  s.get("validate_every", t.validate_every);
  s.finish();
}

inline nlohmann::ordered_json train_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size},     {"lr_init", t.lr_init},         {"lr_decay", t.lr_decay},
          {"lambda_init", t.lambda_init},   {"lambda_decay", t.lambda_decay}, {"dropout_rate", t.dropout_rate},
          {"noise_std", t.noise_std},       {"leaky_slope", t.leaky_slope}, {"epochs", t.epochs},
          {"validate_every", t.validate_every}};
}

inline void read_regime(Section s, RegimeSpec& r) {
  s.get("index_drift", r.index_drift);
  s.get("index_vol", r.index_vol);
  s.get("idio_vol", r.idio_vol);
  std::string mode = to_string(r.mode);
  s.get("mode", mode);
  r.mode = parse_anomaly_mode(mode);
  s.get("strength", r.strength);
  s.finish();
}

inline void read_regime_params(Section s, RegimeParams& p) {
  if (s.has("regimes")) {
    const auto& arr = s.raw("regimes");
    if (!arr.is_array() || arr.size() != 2) throw ConfigError("config key '" + s.dotted("regimes") + "' must be a list of 2");
    for (std::size_t i = 0; i < 2; ++i) read_regime(Section(arr[i], s.dotted("regimes") + "[" + std::to_string(i) + "]"), p.regimes[i]);
  }
  s.get("transition", p.transition);
  s.get("implied_vol_premium", p.implied_vol_premium);
  s.get("initial_regime", p.initial_regime);
  s.get("vix_window", p.vix_window);
  s.get("vol_persistence", p.vol_persistence);
  s.get("vol_of_vol", p.vol_of_vol);
  s.get("beta_spread", p.beta_spread);
  s.get("convexity", p.convexity);
  s.get("momentum_skip", p.momentum_skip);
  s.get("momentum_lookback", p.momentum_lookback);
  s.get("reversal_lookback", p.reversal_lookback);
  s.get("burn_in", p.burn_in);
  s.get("start_date", p.start_date);
  s.finish();
}

inline nlohmann::ordered_json regime_params_json(const RegimeParams& p) {
  nlohmann::ordered_json regimes = nlohmann::ordered_json::array();
  for (const auto& r : p.regimes) {
    regimes.push_back({{"index_drift", r.index_drift},
                       {"index_vol", r.index_vol},
                       {"idio_vol", r.idio_vol},
                       {"mode", to_string(r.mode)},
                       {"strength", r.strength}});
  }
  return {{"regimes", regimes},
          {"transition", p.transition},
          {"implied_vol_premium", p.implied_vol_premium},
          {"initial_regime", p.initial_regime},
          {"vix_window", p.vix_window},
          {"vol_persistence", p.vol_persistence},
          {"vol_of_vol", p.vol_of_vol},
          {"beta_spread", p.beta_spread},
          {"convexity", p.convexity},
          {"momentum_skip", p.momentum_skip},
          {"momentum_lookback", p.momentum_lookback},
          {"reversal_lookback", p.reversal_lookback},
          {"burn_in", p.burn_in},
          {"start_date", p.start_date}};
}

inline void read_vol_index(Section s, VolIndexParams& v) {
  s.get("base_daily_vol", v.base_daily_vol);
  s.get("persistence", v.persistence);
  s.get("shock_sd", v.shock_sd);
  s.get("stress_threshold", v.stress_threshold);
  s.get("stress_jump", v.stress_jump);
  s.get("stress_loading", v.stress_loading);
  s.get("implied_vol_premium", v.implied_vol_premium);
  s.get("vix_noise", v.vix_noise);
  s.get("vix_window", v.vix_window);
  s.get("start_date", v.start_date);
  s.finish();
}

inline nlohmann::ordered_json vol_index_json(const VolIndexParams& v) {
  return {{"base_daily_vol", v.base_daily_vol},   {"persistence", v.persistence},
          {"shock_sd", v.shock_sd},               {"stress_threshold", v.stress_threshold},
          {"stress_jump", v.stress_jump},         {"stress_loading", v.stress_loading},
          {"implied_vol_premium", v.implied_vol_premium}, {"vix_noise", v.vix_noise},
          {"vix_window", v.vix_window},           {"start_date", v.start_date}};
}

}  // namespace detail

/// Parses a config document. `model_override` (the --model flag) replaces
/// model.name before architecture defaults are applied.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::string& model_override = {}) {
  RunConfig c;
  detail::Section root(j, "");
  root.get("seed", c.seed);
  root.get("threads", c.threads);
  root.get("output_dir", c.output_dir);
  {
    auto s = root.sub("data");
    s.get("prices", c.data.prices);
    s.get("index", c.data.index);
    s.finish();
  }
  {
    auto s = root.sub("simulate");
    s.get("n_stocks", c.simulate.n_stocks);
    s.get("n_days", c.simulate.n_days);
    detail::read_regime_params(s.sub("regime"), c.simulate.regime);
    s.finish();
  }
  {
    auto s = root.sub("model");
    std::string name = c.model.name;
    s.get("name", name);
    if (!model_override.empty()) name = model_override;
    c.model = ModelChoice::defaults_for(name);
    s.get("n_blocks", c.model.n_blocks);
    s.get("switch_blocks", c.model.switch_blocks);
    s.get("hidden_widths", c.model.hidden_widths);
    s.finish();
  }
  detail::read_train(root.sub("train"), c.train);
  {
    auto s = root.sub("window");
    s.get("train_months", c.window.train_months);
    s.get("validation_fraction", c.window.validation_fraction);
    s.get("test_months", c.window.test_months);
    s.get("step_months", c.window.step_months);
    s.finish();
  }
  {
    auto s = root.sub("universe");
    s.get("min_price", c.universe.min_price);
    s.get("min_market_cap", c.universe.min_market_cap);
    s.finish();
  }
  {
    auto s = root.sub("backtest");
    s.get("risk_free", c.backtest.risk_free);
    s.get("decile", c.backtest.decile);
    s.finish();
  }
  {
    auto s = root.sub("rv");
    s.get("source", c.rv.source);
    s.get("n_months", c.rv.n_months);
    detail::read_vol_index(s.sub("vol_index"), c.rv.vol_index);
    s.get("train_months", c.rv.eval.train_months);
    s.get("test_months", c.rv.eval.test_months);
    s.get("validation_fraction", c.rv.eval.validation_fraction);
    s.get("hidden_width", c.rv.eval.hidden_width);
    detail::read_train(s.sub("train"), c.rv.eval.train);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path, const std::string& model_override = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  try {
    return parse_run_config(j, model_override);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["output_dir"] = c.output_dir;
  j["data"] = {{"prices", c.data.prices}, {"index", c.data.index}};
  j["simulate"] = {{"n_stocks", c.simulate.n_stocks},
                   {"n_days", c.simulate.n_days},
                   {"regime", detail::regime_params_json(c.simulate.regime)}};
  j["model"] = {{"name", c.model.name},
                {"n_blocks", c.model.n_blocks},
                {"switch_blocks", c.model.switch_blocks},
                {"hidden_widths", c.model.hidden_widths}};
  j["train"] = detail::train_json(c.train);
  j["window"] = {{"train_months", c.window.train_months},
                 {"validation_fraction", c.window.validation_fraction},
                 {"test_months", c.window.test_months},
                 {"step_months", c.window.step_months}};
  j["universe"] = {{"min_price", c.universe.min_price}, {"min_market_cap", c.universe.min_market_cap}};
  j["backtest"] = {{"risk_free", c.backtest.risk_free}, {"decile", c.backtest.decile}};
  j["rv"] = {{"source", c.rv.source},
             {"n_months", c.rv.n_months},
             {"vol_index", detail::vol_index_json(c.rv.vol_index)},
             {"train_months", c.rv.eval.train_months},
             {"test_months", c.rv.eval.test_months},
             {"validation_fraction", c.rv.eval.validation_fraction},
             {"hidden_width", c.rv.eval.hidden_width},
             {"train", detail::train_json(c.rv.eval.train)}};
  return j;
}

inline void write_resolved_config(const RunConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << run_config_to_json(c).dump(2) << '\n';
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace regime_lab
