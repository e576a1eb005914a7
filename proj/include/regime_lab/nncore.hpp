#pragma once

// Dense-network numerics: affine layers, activations, batch norm, dropout,
// input noise, the regularized cross-entropy loss and the Adam update. Every
// forward op has a matching backward used by the block assemblies.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "regime_lab/matrix.hpp"

namespace regime_lab {

inline constexpr double kDefaultLeakySlope = 0.01;
inline constexpr double kProbClamp = 1e-12;

struct DenseLayer {
  std::string name;
  Matrix weight;  // out x in
  Matrix bias;    // 1 x out

  DenseLayer() = default;
  DenseLayer(std::string n, Matrix w, Matrix b) : name(std::move(n)), weight(std::move(w)), bias(std::move(b)) {
    if (bias.rows() != 1 || bias.cols() != weight.rows()) {
      throw ShapeError("layer " + name + ": bias " + bias.shape() + " does not match weight " +
                       weight.shape());
    }
  }
  DenseLayer(std::string n, std::size_t in, std::size_t out)
      : name(std::move(n)), weight(out, in), bias(1, out) {}

  std::size_t in_width() const noexcept { return weight.cols(); }
  std::size_t out_width() const noexcept { return weight.rows(); }
};

/// input is batch x in; returns batch x out with out[b] = W in[b] + bias.
inline Matrix dense_forward(const DenseLayer& layer, const Matrix& input) {
  if (input.cols() != layer.weight.cols()) {
    throw ShapeError("dense " + layer.name + ": input " + input.shape() + " vs weight " +
                     layer.weight.shape());
  }
  const std::size_t batch = input.rows(), in = input.cols(), out = layer.weight.rows();
  Matrix result(batch, out);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* x = input.row(b).data();
    double* y = result.row(b).data();
    for (std::size_t o = 0; o < out; ++o) {
      const double* w = layer.weight.row(o).data();
      double acc = layer.bias(0, o);
      for (std::size_t i = 0; i < in; ++i) acc += w[i] * x[i];
      y[o] = acc;
    }
  }
  return result;
}

/// Accumulates dW, db into `grad`; returns d input.
inline Matrix dense_backward(const DenseLayer& layer, const Matrix& input, const Matrix& dout,
                             DenseLayer& grad) {
  const std::size_t batch = input.rows(), in = input.cols(), out = layer.weight.rows();
  Matrix dinput(batch, in);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* x = input.row(b).data();
    const double* g = dout.row(b).data();
    double* dx = dinput.row(b).data();
    for (std::size_t o = 0; o < out; ++o) {
      const double go = g[o];
      if (go == 0.0) continue;
      grad.bias(0, o) += go;
      double* dw = grad.weight.row(o).data();
      const double* w = layer.weight.row(o).data();
      for (std::size_t i = 0; i < in; ++i) {
        dw[i] += go * x[i];
        dx[i] += go * w[i];
      }
    }
  }
  return dinput;
}

inline Matrix leaky_relu(const Matrix& x, double slope = kDefaultLeakySlope) {
  Matrix out = x;
  for (double& v : out.values()) v = v > 0.0 ? v : slope * v;
  return out;
}

inline Matrix leaky_relu_backward(const Matrix& x, const Matrix& dout, double slope) {
  Matrix dx = dout;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (!(x.values()[i] > 0.0)) dx.values()[i] *= slope;
  }
  return dx;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& z) {
  if (z.cols() == 0) throw ShapeError("softmax_rows: zero columns");
  Matrix out(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto in = z.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

/// Given softmax output y and dL/dy, returns dL/dz.
inline Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy) {
  Matrix dz(y.rows(), y.cols());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto yr = y.row(r);
    auto gr = dy.row(r);
    double dot = 0.0;
    for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
    auto out = dz.row(r);
    for (std::size_t c = 0; c < yr.size(); ++c) out[c] = yr[c] * (gr[c] - dot);
  }
  return dz;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

struct BatchNormState {
  Matrix gamma;  // 1 x n
  Matrix beta;   // 1 x n
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.99;
  double epsilon = 1e-5;
  // Running statistics are seeded from the first training batch.
  bool initialized = false;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t n)
      : gamma(1, n, 1.0), beta(1, n, 0.0), running_mean(n, 0.0), running_var(n, 1.0) {}

  std::size_t width() const noexcept { return gamma.cols(); }
};

struct BatchNormCache {
  Matrix xhat;
  std::vector<double> inv_std;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
  bool training = false;
};

/// Normalizes without touching running statistics. Training mode uses batch
/// statistics (population variance); inference uses the running ones.
inline Matrix batchnorm_apply(const BatchNormState& state, const Matrix& input, bool training,
                              BatchNormCache* cache = nullptr) {
  const std::size_t n = state.width();
  if (input.cols() != n) {
    throw ShapeError("batchnorm: input " + input.shape() + " vs width " + std::to_string(n));
  }
  if (training && input.rows() < 2) {
    throw ShapeError("batchnorm: degenerate batch of " + std::to_string(input.rows()) +
                     " row(s) in training mode");
  }
  const std::size_t batch = input.rows();
  std::vector<double> mean(n), var(n), inv_std(n);
  if (training) {
    for (std::size_t b = 0; b < batch; ++b) {
      auto r = input.row(b);
      for (std::size_t c = 0; c < n; ++c) mean[c] += r[c];
    }
    for (double& m : mean) m /= static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      auto r = input.row(b);
      for (std::size_t c = 0; c < n; ++c) {
        const double d = r[c] - mean[c];
        var[c] += d * d;
      }
    }
    for (double& v : var) v /= static_cast<double>(batch);
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  for (std::size_t c = 0; c < n; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + state.epsilon);

  Matrix xhat(batch, n), out(batch, n);
  for (std::size_t b = 0; b < batch; ++b) {
    auto r = input.row(b);
    auto xh = xhat.row(b);
    auto o = out.row(b);
    for (std::size_t c = 0; c < n; ++c) {
      xh[c] = (r[c] - mean[c]) * inv_std[c];
      o[c] = state.gamma(0, c) * xh[c] + state.beta(0, c);
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->batch_mean = std::move(mean);
    cache->batch_var = std::move(var);
    cache->training = training;
  }
  return out;
}

inline void batchnorm_update_running(BatchNormState& state, const BatchNormCache& cache) {
  if (!cache.training) return;
  if (!state.initialized) {
    state.running_mean = cache.batch_mean;
    state.running_var = cache.batch_var;
    state.initialized = true;
    return;
  }
  const double m = state.momentum;
  for (std::size_t c = 0; c < state.width(); ++c) {
    state.running_mean[c] = m * state.running_mean[c] + (1.0 - m) * cache.batch_mean[c];
    state.running_var[c] = m * state.running_var[c] + (1.0 - m) * cache.batch_var[c];
  }
}

/// Forward pass that also folds the batch statistics into the running ones.
inline Matrix batchnorm_forward(BatchNormState& state, const Matrix& input, bool training) {
  BatchNormCache cache;
  Matrix out = batchnorm_apply(state, input, training, &cache);
  batchnorm_update_running(state, cache);
  return out;
}

/// Accumulates dgamma/dbeta into `grad`; returns d input.
inline Matrix batchnorm_backward(const BatchNormState& state, const BatchNormCache& cache,
                                 const Matrix& dout, BatchNormState& grad) {
  const std::size_t batch = dout.rows(), n = state.width();
  Matrix dx(batch, n);
  std::vector<double> sum_g(n, 0.0), sum_gx(n, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    auto g = dout.row(b);
    auto xh = cache.xhat.row(b);
    for (std::size_t c = 0; c < n; ++c) {
      sum_g[c] += g[c];
      sum_gx[c] += g[c] * xh[c];
    }
  }
  for (std::size_t c = 0; c < n; ++c) {
    grad.beta(0, c) += sum_g[c];
    grad.gamma(0, c) += sum_gx[c];
  }
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    auto g = dout.row(b);
    auto xh = cache.xhat.row(b);
    auto d = dx.row(b);
    for (std::size_t c = 0; c < n; ++c) {
      const double k = state.gamma(0, c) * cache.inv_std[c];
      if (cache.training) {
        d[c] = k * (g[c] - inv_batch * sum_g[c] - xh[c] * inv_batch * sum_gx[c]);
      } else {
        d[c] = k * g[c];
      }
    }
  }
  return dx;
}

struct DropoutResult {
  Matrix output;
  Matrix mask;  // 0 or 1/(1-rate) per entry
};

/// Inverted dropout: inference and rate 0 are the identity.
inline DropoutResult dropout_forward(const Matrix& input, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must be in [0,1)");
  if (!training || rate == 0.0) return {input, Matrix(input.rows(), input.cols(), 1.0)};
  const double keep_scale = 1.0 / (1.0 - rate);
  DropoutResult r{Matrix(input.rows(), input.cols()), Matrix(input.rows(), input.cols())};
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : keep_scale;
    r.mask.values()[i] = m;
    r.output.values()[i] = input.values()[i] * m;
  }
  return r;
}

inline Matrix gaussian_noise(const Matrix& input, double stddev, Rng& rng) {
  if (stddev < 0.0) throw std::invalid_argument("noise stddev must be >= 0");
  if (stddev == 0.0) return input;
  Matrix out = input;
  for (double& v : out.values()) v += stddev * rng.normal();
  return out;
}

/// Mean binary cross-entropy over the batch; probabilities are clamped to
/// [eps, 1-eps] before the logs.
inline double bce_data_loss(std::span<const double> prob, std::span<const double> label) {
  if (prob.size() != label.size()) {
    throw ShapeError("bce_loss: " + std::to_string(prob.size()) + " probabilities vs " +
                     std::to_string(label.size()) + " labels");
  }
  if (prob.empty()) throw ShapeError("bce_loss: empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const double p = std::clamp(prob[i], kProbClamp, 1.0 - kProbClamp);
    s += label[i] * std::log(p) + (1.0 - label[i]) * std::log(1.0 - p);
  }
  return -s / static_cast<double>(prob.size());
}

/// Data loss plus lambda times the summed squared Frobenius norms of `weights`.
inline double bce_loss(std::span<const double> prob, std::span<const double> label,
                       std::span<const Matrix* const> weights, double lambda) {
  double penalty = 0.0;
  for (const Matrix* w : weights) penalty += frobenius_sq(*w);
  return bce_data_loss(prob, label) + lambda * penalty;
}

inline double mse_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw ShapeError("mse_loss: length mismatch");
  if (pred.empty()) throw ShapeError("mse_loss: empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

struct AdamState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update. Moment buffers are allocated on the first
/// call and must match the parameter shapes afterwards.
inline void adam_step(AdamState& state, std::span<Matrix* const> params,
                      std::span<const Matrix* const> grads, double lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads count mismatch");
  if (state.first_moment.empty() && state.step_count == 0) {
    for (const Matrix* p : params) {
      state.first_moment.emplace_back(p->rows(), p->cols());
      state.second_moment.emplace_back(p->rows(), p->cols());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                     " tensors, got " + std::to_string(params.size()));
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k];
    const Matrix& g = *grads[k];
    Matrix& m = state.first_moment[k];
    Matrix& v = state.second_moment[k];
    require_same_shape(p, g, "adam_step grad");
    require_same_shape(p, m, "adam_step moment");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.values()[i];
      double& mi = m.values()[i];
      double& vi = v.values()[i];
      mi = state.beta1 * mi + (1.0 - state.beta1) * gi;
      vi = state.beta2 * vi + (1.0 - state.beta2) * gi * gi;
      p.values()[i] -= lr * (mi / c1) / (std::sqrt(vi / c2) + state.epsilon);
    }
  }
}

}  // namespace regime_lab
