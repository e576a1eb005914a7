#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "regime_lab/blocks.hpp"

namespace regime_lab {

struct TrainConfig {
  std::size_t batch_size = 512;
  double lr_init = 1e-3;
  double lr_decay = 0.995;  // per epoch
  double lambda_init = 50.0;
  double lambda_decay = 0.999;  // per optimizer step
  double dropout_rate = 0.5;
  double noise_std = 0.1;
  double leaky_slope = kDefaultLeakySlope;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
  std::size_t validate_every = 200;

  void validate() const {
    if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
    if (!(lr_init > 0.0)) throw ConfigError("train.lr_init must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("train.lr_decay must be in (0,1]");
    if (!(lambda_init >= 0.0)) throw ConfigError("train.lambda_init must be >= 0");
    if (!(lambda_decay > 0.0 && lambda_decay <= 1.0)) throw ConfigError("train.lambda_decay must be in (0,1]");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("train.dropout_rate must be in [0,1)");
    if (!(noise_std >= 0.0)) throw ConfigError("train.noise_std must be >= 0");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("train.leaky_slope must be in (0,1)");
    if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (validate_every == 0) throw ConfigError("train.validate_every must be >= 1");
  }
};

/// Rows of model input. `switch_x` is empty unless the model has a switch module.
struct Dataset {
  Matrix x;
  Matrix switch_x;
  std::vector<double> y;

  std::size_t size() const noexcept { return y.size(); }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.x = gather_rows(x, idx);
    if (!switch_x.empty()) d.switch_x = gather_rows(switch_x, idx);
    d.y.reserve(idx.size());
    for (std::size_t i : idx) d.y.push_back(y[i]);
    return d;
  }

  const Matrix* switch_ptr() const noexcept { return switch_x.empty() ? nullptr : &switch_x; }
};

/// Unregularized loss matching the network's head: binary cross-entropy for
/// sigmoid outputs, mean squared error for identity outputs.
inline double data_loss(const Network& net, std::span<const double> outputs, std::span<const double> y) {
  return net.spec().output == OutputKind::sigmoid ? bce_data_loss(outputs, y) : mse_loss(outputs, y);
}

inline double evaluate_loss(const Network& net, const Dataset& data) {
  if (data.size() == 0) throw ShapeError("evaluate_loss: empty dataset");
  Matrix out = net.predict(data.x, data.switch_ptr());
  return data_loss(net, out.values(), data.y);
}

/// dL/dlogits for the unregularized data loss.
inline Matrix loss_gradient(const Network& net, const Matrix& outputs, std::span<const double> y) {
  const std::size_t m = y.size();
  Matrix d(m, 1);
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double p = outputs(i, 0);
    if (net.spec().output == OutputKind::sigmoid) {
      // Clamped probabilities make the loss flat.
      const bool clamped = p < kProbClamp || p > 1.0 - kProbClamp;
      d(i, 0) = clamped ? 0.0 : (p - y[i]) * inv;
    } else {
      d(i, 0) = 2.0 * (p - y[i]) * inv;
    }
  }
  return d;
}

/// Adds d/dW of lambda * sum ||W||_F^2 to the gradient network.
inline void add_weight_penalty_gradient(const Network& net, Network& grad, double lambda) {
  if (lambda == 0.0) return;
  std::vector<const Matrix*> weights = net.regularized_weights();
  std::size_t k = 0;
  grad.for_each_param([&](const std::string&, Matrix& g, bool reg) {
    if (!reg) return;
    const Matrix& w = *weights[k++];
    for (std::size_t i = 0; i < g.size(); ++i) g.values()[i] += 2.0 * lambda * w.values()[i];
  });
}

inline double weight_penalty(const Network& net) {
  double s = 0.0;
  for (const Matrix* w : net.regularized_weights()) s += frobenius_sq(*w);
  return s;
}

struct TrainResult {
  std::size_t steps = 0;
  std::size_t best_step = 0;
  double best_validation_loss = std::numeric_limits<double>::quiet_NaN();
  double final_lambda = 0.0;
  double final_lr = 0.0;
  std::vector<std::pair<std::size_t, double>> validation_history;
};

/// Mini-batch training with Adam. The learning rate decays once per epoch and
/// lambda once per step. When `validation` is non-empty the network ends at the
/// best-validation snapshot (checked every `validate_every` steps and at the
/// end). `adam` carries optimizer state across calls.
inline TrainResult fit(Network& net, const Dataset& train, const Dataset& validation,
                       const TrainConfig& cfg, AdamState& adam) {
  cfg.validate();
  if (train.size() < 2) throw ShapeError("fit: need at least 2 training rows");
  Rng rng(cfg.seed);
  ForwardContext ctx;
  ctx.training = true;
  ctx.dropout_rate = cfg.dropout_rate;
  ctx.noise_std = cfg.noise_std;
  ctx.rng.reseed(mix_seed(cfg.seed, 1));

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  double lambda = cfg.lambda_init;
  double lr = cfg.lr_init;
  Network best = net;
  double best_loss = std::numeric_limits<double>::infinity();
  const bool has_val = validation.size() > 0;

  auto check_validation = [&](std::size_t step) {
    if (!has_val) return;
    const double v = evaluate_loss(net, validation);
    result.validation_history.emplace_back(step, v);
    if (v < best_loss) {
      best_loss = v;
      best = net;
      result.best_step = step;
    }
  };

  Tape tape;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) continue;  // batch norm needs two rows
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Dataset batch = train.subset(idx);
      Matrix out = net.forward(batch.x, batch.switch_ptr(), ctx, tape);
      Network grad = net.zeros_like();
      net.backward(tape, loss_gradient(net, out, batch.y), grad);
      add_weight_penalty_gradient(net, grad, lambda);
      net.update_running_stats(tape);

      std::vector<Matrix*> params;
      std::vector<const Matrix*> grads;
      net.for_each_param([&](const std::string&, Matrix& m, bool) { params.push_back(&m); });
      grad.for_each_param([&](const std::string&, Matrix& m, bool) { grads.push_back(&m); });
      adam_step(adam, params, grads, lr);

      lambda *= cfg.lambda_decay;
      ++result.steps;
      if (result.steps % cfg.validate_every == 0) check_validation(result.steps);
    }
    lr *= cfg.lr_decay;
  }
  if (result.steps == 0 || result.steps % cfg.validate_every != 0) check_validation(result.steps);
  if (has_val) {
    net = std::move(best);
    result.best_validation_loss = best_loss;
  }
  result.final_lambda = lambda;
  result.final_lr = lr;
  return result;
}

inline TrainResult fit(Network& net, const Dataset& train, const Dataset& validation,
                       const TrainConfig& cfg) {
  AdamState adam;
  return fit(net, train, validation, cfg, adam);
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

/// Regularized training loss of `net` on `batch`, with a reseeded context so
/// every call sees the same dropout and noise draws.
inline double training_loss(const Network& net, const Dataset& batch, double lambda,
                            const ForwardContext& proto, Tape& tape) {
  ForwardContext ctx = proto;
  Matrix out = net.forward(batch.x, batch.switch_ptr(), ctx, tape);
  return data_loss(net, out.values(), batch.y) + lambda * weight_penalty(net);
}

/// Compares reverse-mode gradients with central differences on every
/// parameter. Relative error is |a - n| / max(|a|, |n|, floor * max(1, |L|)):
/// central-difference round-off grows with the loss value L, so gradients that
/// are exactly zero (biases feeding batch norm) are judged against that scale.
inline GradCheckResult gradient_check(const Network& net, const Dataset& batch, double lambda,
                                      const ForwardContext& proto, double h = 1e-5,
                                      double floor = 1e-6) {
  Tape tape;
  const double loss = training_loss(net, batch, lambda, proto, tape);
  const double denom_floor = floor * std::max(1.0, std::abs(loss));
  Network grad = net.zeros_like();
  net.backward(tape, loss_gradient(net, tape.output, batch.y), grad);
  add_weight_penalty_gradient(net, grad, lambda);

  std::vector<const Matrix*> analytic;
  std::vector<std::string> names;
  grad.for_each_param([&](const std::string& n, const Matrix& m, bool) {
    analytic.push_back(&m);
    names.push_back(n);
  });

  GradCheckResult res;
  Network probe = net;
  std::size_t k = 0;
  probe.for_each_param([&](const std::string&, Matrix& p, bool) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p.values()[i];
      p.values()[i] = saved + h;
      const double up = training_loss(probe, batch, lambda, proto, tape);
      p.values()[i] = saved - h;
      const double down = training_loss(probe, batch, lambda, proto, tape);
      p.values()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k]->values()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), denom_floor});
      if (rel > res.max_relative_error) {
        res.max_relative_error = rel;
        res.worst_param = names[k] + "[" + std::to_string(i) + "]";
      }
      ++res.checked;
    }
    ++k;
  });
  return res;
}

}  // namespace regime_lab
