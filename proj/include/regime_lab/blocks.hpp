#pragma once

// Residual blocks, self-attention masks, and the networks built from them:
// plain ANN, (attention-enhanced) ResNet and the switching ResNet whose
// market-condition module gates the main module's last hidden layer.

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "regime_lab/nncore.hpp"

namespace regime_lab {

/// Options for one forward pass. Dropout and noise draws come from `rng`, so
/// reseeding reproduces the same masks.
struct ForwardContext {
  bool training = false;
  double dropout_rate = 0.0;
  double noise_std = 0.0;
  Rng rng{0};
};

// ---------------------------------------------------------------------------
// Residual block

struct ResidualBlock {
  DenseLayer layer1;
  DenseLayer layer2;
  BatchNormState norm1;
  BatchNormState norm2;

  ResidualBlock() = default;
  ResidualBlock(const std::string& prefix, std::size_t width)
      : layer1(prefix + ".l1", width, width),
        layer2(prefix + ".l2", width, width),
        norm1(width),
        norm2(width) {}

  std::size_t width() const noexcept { return layer1.in_width(); }
};

struct ResidualCache {
  Matrix input;
  Matrix pre1;  // layer1 output
  BatchNormCache bn1;
  Matrix norm1;
  Matrix dropout_mask;
  Matrix hidden;  // after activation and dropout
  BatchNormCache bn2;
  Matrix sum;  // norm2 output + shortcut
  Matrix output;
};

/// sigma(BN(W2 . drop(sigma(BN(W1 x + b1))) + b2) + x). Dropout acts on the
/// inner hidden layer only; the shortcut is never dropped.
inline Matrix residual_block_forward(const ResidualBlock& block, const Matrix& input,
                                     ForwardContext& ctx, double slope,
                                     ResidualCache* cache = nullptr) {
  if (input.cols() != block.width()) {
    throw ShapeError("residual block " + block.layer1.name + ": input " + input.shape() +
                     " vs width " + std::to_string(block.width()));
  }
  ResidualCache local;
  ResidualCache& c = cache ? *cache : local;
  c.input = input;
  c.pre1 = dense_forward(block.layer1, input);
  c.norm1 = batchnorm_apply(block.norm1, c.pre1, ctx.training, &c.bn1);
  auto drop = dropout_forward(leaky_relu(c.norm1, slope), ctx.dropout_rate, ctx.training, ctx.rng);
  c.dropout_mask = std::move(drop.mask);
  c.hidden = std::move(drop.output);
  Matrix pre2 = dense_forward(block.layer2, c.hidden);
  c.sum = add(batchnorm_apply(block.norm2, pre2, ctx.training, &c.bn2), input);
  c.output = leaky_relu(c.sum, slope);
  return c.output;
}

/// Convenience overload for tests: single forward with its own context.
inline Matrix residual_block_forward(const ResidualBlock& block, const Matrix& input,
                                     bool training, double slope = kDefaultLeakySlope) {
  ForwardContext ctx;
  ctx.training = training;
  return residual_block_forward(block, input, ctx, slope);
}

inline Matrix residual_block_backward(const ResidualBlock& block, const ResidualCache& c,
                                      const Matrix& dout, double slope, ResidualBlock& grad) {
  Matrix dsum = leaky_relu_backward(c.sum, dout, slope);
  Matrix dpre2 = batchnorm_backward(block.norm2, c.bn2, dsum, grad.norm2);
  Matrix dhidden = dense_backward(block.layer2, c.hidden, dpre2, grad.layer2);
  Matrix dact = hadamard(dhidden, c.dropout_mask);
  Matrix dnorm1 = leaky_relu_backward(c.norm1, dact, slope);
  Matrix dpre1 = batchnorm_backward(block.norm1, c.bn1, dnorm1, grad.norm1);
  Matrix dinput = dense_backward(block.layer1, c.input, dpre1, grad.layer1);
  add_in_place(dinput, dsum);
  return dinput;
}

inline void residual_block_update_running(ResidualBlock& block, const ResidualCache& c) {
  batchnorm_update_running(block.norm1, c.bn1);
  batchnorm_update_running(block.norm2, c.bn2);
}

// ---------------------------------------------------------------------------
// Self-attention mask

struct AttentionModule {
  DenseLayer layer1;
  DenseLayer layer2;

  AttentionModule() = default;
  AttentionModule(const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out)
      : layer1(prefix + ".a1", in, hidden), layer2(prefix + ".a2", hidden, out) {}
};

struct AttentionCache {
  Matrix input;
  Matrix pre1;
  Matrix hidden;
  Matrix mask;
};

/// softmax(Wa2 . sigma(Wa1 x + ba1) + ba2), row-normalized.
inline Matrix self_attention_mask(const AttentionModule& att, const Matrix& input, double slope,
                                  AttentionCache* cache = nullptr) {
  AttentionCache local;
  AttentionCache& c = cache ? *cache : local;
  c.input = input;
  c.pre1 = dense_forward(att.layer1, input);
  c.hidden = leaky_relu(c.pre1, slope);
  c.mask = softmax_rows(dense_forward(att.layer2, c.hidden));
  return c.mask;
}

inline Matrix self_attention_mask(const AttentionModule& att, const Matrix& input) {
  return self_attention_mask(att, input, kDefaultLeakySlope);
}

inline Matrix self_attention_backward(const AttentionModule& att, const AttentionCache& c,
                                      const Matrix& dmask, double slope, AttentionModule& grad) {
  Matrix dz2 = softmax_rows_backward(c.mask, dmask);
  Matrix dhidden = dense_backward(att.layer2, c.hidden, dz2, grad.layer2);
  Matrix dpre1 = leaky_relu_backward(c.pre1, dhidden, slope);
  return dense_backward(att.layer1, c.input, dpre1, grad.layer1);
}

/// Residual block output (after its activation) times the self-attention mask
/// computed from the same block input.
inline Matrix attention_block_forward(const ResidualBlock& block, const AttentionModule& att,
                                      const Matrix& input, ForwardContext& ctx, double slope,
                                      ResidualCache* rcache = nullptr,
                                      AttentionCache* acache = nullptr) {
  if (att.layer2.out_width() != block.width() || att.layer1.in_width() != block.width()) {
    throw ShapeError("attention block: attention " + att.layer1.name + " widths " +
                     std::to_string(att.layer1.in_width()) + "->" +
                     std::to_string(att.layer2.out_width()) + " vs block width " +
                     std::to_string(block.width()));
  }
  Matrix f = residual_block_forward(block, input, ctx, slope, rcache);
  Matrix m = self_attention_mask(att, input, slope, acache);
  return hadamard(f, m);
}

inline Matrix attention_block_forward(const ResidualBlock& block, const AttentionModule& att,
                                      const Matrix& input, bool training,
                                      double slope = kDefaultLeakySlope) {
  ForwardContext ctx;
  ctx.training = training;
  return attention_block_forward(block, att, input, ctx, slope);
}

// ---------------------------------------------------------------------------
// Network specification

enum class Architecture { linear, ann, resnet, attention_resnet, switching_resnet };
enum class OutputKind { sigmoid, identity };

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::linear: return "linear";
    case Architecture::ann: return "ann";
    case Architecture::resnet: return "resnet";
    case Architecture::attention_resnet: return "attention_resnet";
    case Architecture::switching_resnet: return "switching_resnet";
  }
  return "?";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "linear") return Architecture::linear;
  if (s == "ann") return Architecture::ann;
  if (s == "resnet") return Architecture::resnet;
  if (s == "attention_resnet") return Architecture::attention_resnet;
  if (s == "switching_resnet") return Architecture::switching_resnet;
  throw ConfigError("unknown model architecture '" + s + "'");
}

struct ModelSpec {
  Architecture arch = Architecture::linear;
  std::size_t input_width = 33;
  // ann: hidden layer widths.
  std::vector<std::size_t> hidden_widths;
  // resnet family: residual blocks of width input_width.
  std::size_t n_blocks = 0;
  // 1-based block indices carrying a self-attention module.
  std::vector<std::size_t> attention_blocks;
  // 0 means "same as block width".
  std::size_t attention_hidden_width = 0;
  // switching_resnet: market-condition module.
  std::size_t switch_input_width = 41;
  std::size_t switch_blocks = 0;
  OutputKind output = OutputKind::sigmoid;
  double leaky_slope = kDefaultLeakySlope;

  bool uses_switch() const noexcept { return arch == Architecture::switching_resnet; }

  void validate() const {
    if (input_width == 0) throw ConfigError("model: input_width must be positive");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("model: leaky_slope must be in (0,1)");
    std::set<std::size_t> seen;
    for (std::size_t b : attention_blocks) {
      if (arch != Architecture::attention_resnet) {
        throw ConfigError("model: attention_blocks only valid for attention_resnet");
      }
      if (b == 0 || b > n_blocks) {
        throw ConfigError("model: attention block index " + std::to_string(b) + " outside 1.." +
                          std::to_string(n_blocks));
      }
      if (!seen.insert(b).second) throw ConfigError("model: duplicate attention block " + std::to_string(b));
    }
    if (arch == Architecture::ann && hidden_widths.empty()) {
      throw ConfigError("model: ann needs at least one hidden layer");
    }
    if ((arch == Architecture::resnet || arch == Architecture::attention_resnet ||
         arch == Architecture::switching_resnet) &&
        n_blocks == 0) {
      throw ConfigError("model: " + to_string(arch) + " needs n_blocks >= 1");
    }
    if (uses_switch() && (switch_input_width == 0)) {
      throw ConfigError("model: switch_input_width must be positive");
    }
  }
};

/// 11 residual blocks (22 layers) of width 33, attention on blocks 1,3,...,11
/// (6 modules, 12 layers), sigmoid head.
inline ModelSpec attention_resnet_spec(std::size_t width = 33, std::size_t n_blocks = 11) {
  ModelSpec s;
  s.arch = Architecture::attention_resnet;
  s.input_width = width;
  s.n_blocks = n_blocks;
  for (std::size_t b = 1; b <= n_blocks; b += 2) s.attention_blocks.push_back(b);
  return s;
}

/// 3 main blocks of width 33 gated by a 3-block width-41 switch module.
inline ModelSpec switching_resnet_spec(std::size_t width = 33, std::size_t switch_width = 41,
                                       std::size_t main_blocks = 3, std::size_t switch_blocks = 3) {
  ModelSpec s;
  s.arch = Architecture::switching_resnet;
  s.input_width = width;
  s.n_blocks = main_blocks;
  s.switch_input_width = switch_width;
  s.switch_blocks = switch_blocks;
  return s;
}

inline ModelSpec ann_spec(std::size_t width, std::vector<std::size_t> hidden) {
  ModelSpec s;
  s.arch = Architecture::ann;
  s.input_width = width;
  s.hidden_widths = std::move(hidden);
  return s;
}

inline ModelSpec resnet_spec(std::size_t width, std::size_t n_blocks) {
  ModelSpec s;
  s.arch = Architecture::resnet;
  s.input_width = width;
  s.n_blocks = n_blocks;
  return s;
}

inline ModelSpec linear_spec(std::size_t width) {
  ModelSpec s;
  s.arch = Architecture::linear;
  s.input_width = width;
  return s;
}

// ---------------------------------------------------------------------------
// Network

struct AnnLayer {
  DenseLayer dense;
  BatchNormState norm;
};

struct AnnCache {
  Matrix input;
  Matrix pre;
  BatchNormCache bn;
  Matrix norm;
  Matrix dropout_mask;
  Matrix output;
};

/// Everything a forward pass records for the reverse pass.
struct Tape {
  bool recorded = false;
  bool training = false;
  Matrix input;
  Matrix switch_input;
  std::vector<AnnCache> ann;
  std::vector<ResidualCache> blocks;
  std::vector<AttentionCache> attention;  // indexed like Network::attention
  std::vector<Matrix> block_outputs;      // after optional attention gating
  std::vector<ResidualCache> switch_blocks;
  Matrix switch_hidden;
  Matrix mask;
  Matrix main_hidden;  // before gating
  Matrix head_input;
  Matrix logits;
  Matrix output;
};

class Network {
 public:
  Network() = default;

  explicit Network(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const std::size_t w = spec_.input_width;
    std::size_t last = w;
    switch (spec_.arch) {
      case Architecture::linear:
        break;
      case Architecture::ann: {
        std::size_t in = w;
        for (std::size_t i = 0; i < spec_.hidden_widths.size(); ++i) {
          const std::size_t out = spec_.hidden_widths[i];
          ann_.push_back({DenseLayer("ann." + std::to_string(i), in, out), BatchNormState(out)});
          in = out;
        }
        last = in;
        break;
      }
      case Architecture::resnet:
      case Architecture::attention_resnet:
      case Architecture::switching_resnet: {
        attention_slot_.assign(spec_.n_blocks, -1);
        for (std::size_t b = 0; b < spec_.n_blocks; ++b) {
          blocks_.emplace_back("block." + std::to_string(b), w);
        }
        const std::size_t ah = spec_.attention_hidden_width ? spec_.attention_hidden_width : w;
        for (std::size_t b1 : spec_.attention_blocks) {
          attention_slot_[b1 - 1] = static_cast<int>(attention_.size());
          attention_.emplace_back("att." + std::to_string(b1 - 1), w, ah, w);
        }
        if (spec_.uses_switch()) {
          const std::size_t sw = spec_.switch_input_width;
          for (std::size_t b = 0; b < spec_.switch_blocks; ++b) {
            switch_blocks_.emplace_back("switch." + std::to_string(b), sw);
          }
          switch_projection_ = DenseLayer("switch.proj", sw, w);
        }
        break;
      }
    }
    head_ = DenseLayer("head", last, 1);
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  const DenseLayer& head() const noexcept { return head_; }
  DenseLayer& head() noexcept { return head_; }
  std::vector<ResidualBlock>& blocks() noexcept { return blocks_; }
  const std::vector<ResidualBlock>& blocks() const noexcept { return blocks_; }
  std::vector<AttentionModule>& attention() noexcept { return attention_; }
  const std::vector<AttentionModule>& attention() const noexcept { return attention_; }
  std::vector<ResidualBlock>& switch_blocks() noexcept { return switch_blocks_; }
  const std::vector<ResidualBlock>& switch_blocks() const noexcept { return switch_blocks_; }
  DenseLayer& switch_projection() noexcept { return switch_projection_; }
  const DenseLayer& switch_projection() const noexcept { return switch_projection_; }
  std::vector<AnnLayer>& ann_layers() noexcept { return ann_; }

  /// Visits every trainable tensor in a fixed order:
  /// f(name, Matrix&, regularized). Only dense weights are regularized.
  template <typename F>
  void for_each_param(F&& f) {
    visit_params(*this, f);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    visit_params(*this, f);
  }

  template <typename F>
  void for_each_norm(F&& f) {
    visit_norms(*this, f);
  }
  template <typename F>
  void for_each_norm(F&& f) const {
    visit_norms(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Matrix& m, bool) { n += m.size(); });
    return n;
  }

  std::vector<const Matrix*> regularized_weights() const {
    std::vector<const Matrix*> out;
    for_each_param([&](const std::string&, const Matrix& m, bool reg) {
      if (reg) out.push_back(&m);
    });
    return out;
  }

  /// A network of identical structure with every tensor zeroed; used as the
  /// gradient accumulator.
  Network zeros_like() const {
    Network g = *this;
    g.for_each_param([](const std::string&, Matrix& m, bool) { m.fill(0.0); });
    return g;
  }

  /// He-normal hidden weights; the head, the attention output layers and the
  /// switch projection start at zero, so masks start uniform and outputs at
  /// the head's neutral value.
  void initialize(Rng& rng) {
    auto he = [&](DenseLayer& l) {
      const double sd = std::sqrt(2.0 / static_cast<double>(l.in_width()));
      for (double& v : l.weight.values()) v = sd * rng.normal();
      l.bias.fill(0.0);
    };
    for (auto& l : ann_) he(l.dense);
    for (auto& b : blocks_) {
      he(b.layer1);
      he(b.layer2);
    }
    for (auto& a : attention_) {
      he(a.layer1);
      a.layer2.weight.fill(0.0);
      a.layer2.bias.fill(0.0);
    }
    for (auto& b : switch_blocks_) {
      he(b.layer1);
      he(b.layer2);
    }
    switch_projection_.weight.fill(0.0);
    switch_projection_.bias.fill(0.0);
    head_.weight.fill(0.0);
    head_.bias.fill(0.0);
  }

  /// Every trainable tensor drawn from N(0, scale^2); batch-norm gammas are
  /// drawn around 1. Used by gradient checks.
  void randomize(Rng& rng, double scale = 0.5) {
    for_each_param([&](const std::string& name, Matrix& m, bool) {
      const bool gamma = name.size() >= 5 && name.compare(name.size() - 5, 5, "gamma") == 0;
      for (double& v : m.values()) v = (gamma ? 1.0 : 0.0) + scale * rng.normal();
    });
  }

  /// Full forward pass. `switch_input` is required for the switching network
  /// and ignored otherwise. Returns batch x 1 outputs.
  Matrix forward(const Matrix& input, const Matrix* switch_input, ForwardContext& ctx,
                 Tape& tape) const {
    check_inputs(input, switch_input);
    tape = Tape{};
    tape.training = ctx.training;
    tape.input = ctx.training ? gaussian_noise(input, ctx.noise_std, ctx.rng) : input;
    const double slope = spec_.leaky_slope;
    Matrix h = tape.input;

    switch (spec_.arch) {
      case Architecture::linear:
        break;
      case Architecture::ann:
        tape.ann.resize(ann_.size());
        for (std::size_t i = 0; i < ann_.size(); ++i) {
          AnnCache& c = tape.ann[i];
          c.input = h;
          c.pre = dense_forward(ann_[i].dense, h);
          c.norm = batchnorm_apply(ann_[i].norm, c.pre, ctx.training, &c.bn);
          auto drop = dropout_forward(leaky_relu(c.norm, slope), ctx.dropout_rate, ctx.training, ctx.rng);
          c.dropout_mask = std::move(drop.mask);
          c.output = std::move(drop.output);
          h = c.output;
        }
        break;
      case Architecture::resnet:
      case Architecture::attention_resnet:
      case Architecture::switching_resnet:
        tape.blocks.resize(blocks_.size());
        tape.attention.resize(attention_.size());
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
          const int slot = attention_slot_[b];
          if (slot >= 0) {
            h = attention_block_forward(blocks_[b], attention_[slot], h, ctx, slope, &tape.blocks[b],
                                        &tape.attention[slot]);
          } else {
            h = residual_block_forward(blocks_[b], h, ctx, slope, &tape.blocks[b]);
          }
          tape.block_outputs.push_back(h);
        }
        break;
    }

    if (spec_.uses_switch()) {
      tape.switch_input =
          ctx.training ? gaussian_noise(*switch_input, ctx.noise_std, ctx.rng) : *switch_input;
      tape.mask = switch_mask(tape.switch_input, ctx, &tape);
      tape.main_hidden = h;
      h = hadamard(h, tape.mask);
    }

    tape.head_input = h;
    tape.logits = dense_forward(head_, h);
    tape.output = tape.logits;
    if (spec_.output == OutputKind::sigmoid) {
      for (double& v : tape.output.values()) v = sigmoid(v);
    }
    tape.recorded = true;
    return tape.output;
  }

  /// Inference-mode outputs; does not touch any state.
  Matrix predict(const Matrix& input, const Matrix* switch_input = nullptr) const {
    ForwardContext ctx;
    Tape tape;
    return forward(input, switch_input, ctx, tape);
  }

  /// Conditional weight mask rows (batch x input_width) from market-condition
  /// inputs, inference mode.
  Matrix conditional_mask(const Matrix& switch_input) const {
    if (!spec_.uses_switch()) throw StateError("conditional_mask: network has no switch module");
    if (switch_input.cols() != spec_.switch_input_width) {
      throw ShapeError("conditional_mask: input " + switch_input.shape() + " vs switch width " +
                       std::to_string(spec_.switch_input_width));
    }
    ForwardContext ctx;
    return switch_mask(switch_input, ctx, nullptr);
  }

  /// Reverse pass from dL/dlogits (batch x 1). Accumulates into `grad`, which
  /// must come from zeros_like(). Returns dL/dinput.
  Matrix backward(const Tape& tape, const Matrix& dlogits, Network& grad) const {
    if (!tape.recorded) throw StateError("backward called without a recorded forward pass");
    const double slope = spec_.leaky_slope;
    Matrix dh = dense_backward(head_, tape.head_input, dlogits, grad.head_);

    if (spec_.uses_switch()) {
      Matrix dmask = hadamard(dh, tape.main_hidden);
      dh = hadamard(dh, tape.mask);
      Matrix dz = softmax_rows_backward(tape.mask, dmask);
      Matrix ds = dense_backward(switch_projection_, tape.switch_hidden, dz, grad.switch_projection_);
      for (std::size_t b = switch_blocks_.size(); b-- > 0;) {
        ds = residual_block_backward(switch_blocks_[b], tape.switch_blocks[b], ds, slope,
                                     grad.switch_blocks_[b]);
      }
    }

    switch (spec_.arch) {
      case Architecture::linear:
        break;
      case Architecture::ann:
        for (std::size_t i = ann_.size(); i-- > 0;) {
          const AnnCache& c = tape.ann[i];
          Matrix dact = hadamard(dh, c.dropout_mask);
          Matrix dnorm = leaky_relu_backward(c.norm, dact, slope);
          Matrix dpre = batchnorm_backward(ann_[i].norm, c.bn, dnorm, grad.ann_[i].norm);
          dh = dense_backward(ann_[i].dense, c.input, dpre, grad.ann_[i].dense);
        }
        break;
      case Architecture::resnet:
      case Architecture::attention_resnet:
      case Architecture::switching_resnet:
        for (std::size_t b = blocks_.size(); b-- > 0;) {
          const int slot = attention_slot_[b];
          if (slot >= 0) {
            const AttentionCache& ac = tape.attention[slot];
            const ResidualCache& rc = tape.blocks[b];
            Matrix dmask = hadamard(dh, rc.output);
            Matrix df = hadamard(dh, ac.mask);
            Matrix dx = residual_block_backward(blocks_[b], rc, df, slope, grad.blocks_[b]);
            add_in_place(dx, self_attention_backward(attention_[slot], ac, dmask, slope,
                                                     grad.attention_[slot]));
            dh = std::move(dx);
          } else {
            dh = residual_block_backward(blocks_[b], tape.blocks[b], dh, slope, grad.blocks_[b]);
          }
        }
        break;
    }
    return dh;
  }

  /// Folds the batch statistics recorded in a training-mode tape into the
  /// batch-norm running statistics.
  void update_running_stats(const Tape& tape) {
    if (!tape.training) return;
    for (std::size_t i = 0; i < ann_.size(); ++i) batchnorm_update_running(ann_[i].norm, tape.ann[i].bn);
    for (std::size_t b = 0; b < blocks_.size(); ++b) residual_block_update_running(blocks_[b], tape.blocks[b]);
    for (std::size_t b = 0; b < switch_blocks_.size(); ++b) {
      residual_block_update_running(switch_blocks_[b], tape.switch_blocks[b]);
    }
  }

 private:
  void check_inputs(const Matrix& input, const Matrix* switch_input) const {
    if (input.cols() != spec_.input_width) {
      throw ShapeError("network input " + input.shape() + " vs expected width " +
                       std::to_string(spec_.input_width));
    }
    if (spec_.uses_switch()) {
      if (!switch_input) throw ShapeError("switching network needs market-condition input");
      if (switch_input->cols() != spec_.switch_input_width) {
        throw ShapeError("switch input " + switch_input->shape() + " vs expected width " +
                         std::to_string(spec_.switch_input_width));
      }
      if (switch_input->rows() != input.rows()) {
        throw ShapeError("alignment: " + std::to_string(input.rows()) + " stock rows vs " +
                         std::to_string(switch_input->rows()) + " market rows");
      }
    }
  }

  Matrix switch_mask(const Matrix& switch_input, ForwardContext& ctx, Tape* tape) const {
    Matrix s = switch_input;
    std::vector<ResidualCache> caches(switch_blocks_.size());
    for (std::size_t b = 0; b < switch_blocks_.size(); ++b) {
      s = residual_block_forward(switch_blocks_[b], s, ctx, spec_.leaky_slope, &caches[b]);
    }
    Matrix mask = softmax_rows(dense_forward(switch_projection_, s));
    if (tape) {
      tape->switch_blocks = std::move(caches);
      tape->switch_hidden = std::move(s);
    }
    return mask;
  }

  template <typename Self, typename F>
  static void visit_params(Self& self, F& f) {
    auto dense = [&](auto& l) {
      f(l.name + ".weight", l.weight, true);
      f(l.name + ".bias", l.bias, false);
    };
    auto norm = [&](const std::string& name, auto& n) {
      f(name + ".gamma", n.gamma, false);
      f(name + ".beta", n.beta, false);
    };
    auto block = [&](auto& b) {
      dense(b.layer1);
      norm(b.layer1.name + ".bn", b.norm1);
      dense(b.layer2);
      norm(b.layer2.name + ".bn", b.norm2);
    };
    for (auto& l : self.ann_) {
      dense(l.dense);
      norm(l.dense.name + ".bn", l.norm);
    }
    for (auto& b : self.blocks_) block(b);
    for (auto& a : self.attention_) {
      dense(a.layer1);
      dense(a.layer2);
    }
    for (auto& b : self.switch_blocks_) block(b);
    if (self.spec_.uses_switch()) dense(self.switch_projection_);
    dense(self.head_);
  }

  template <typename Self, typename F>
  static void visit_norms(Self& self, F& f) {
    for (auto& l : self.ann_) f(l.dense.name + ".bn", l.norm);
    for (auto& b : self.blocks_) {
      f(b.layer1.name + ".bn", b.norm1);
      f(b.layer2.name + ".bn", b.norm2);
    }
    for (auto& b : self.switch_blocks_) {
      f(b.layer1.name + ".bn", b.norm1);
      f(b.layer2.name + ".bn", b.norm2);
    }
  }

  ModelSpec spec_;
  std::vector<AnnLayer> ann_;
  std::vector<ResidualBlock> blocks_;
  std::vector<int> attention_slot_;
  std::vector<AttentionModule> attention_;
  std::vector<ResidualBlock> switch_blocks_;
  DenseLayer switch_projection_;
  DenseLayer head_;
};

/// Probabilities of an Attention-ResNet (or any single-input network).
inline Matrix attention_resnet_forward(const Network& net, const Matrix& x, bool training,
                                       std::uint64_t seed = 0) {
  ForwardContext ctx;
  ctx.training = training;
  ctx.rng.reseed(seed);
  Tape tape;
  return net.forward(x, nullptr, ctx, tape);
}

inline Matrix switching_resnet_forward(const Network& net, const Matrix& x, const Matrix& xs,
                                       bool training, std::uint64_t seed = 0) {
  ForwardContext ctx;
  ctx.training = training;
  ctx.rng.reseed(seed);
  Tape tape;
  return net.forward(x, &xs, ctx, tape);
}

inline Matrix conditional_mask(const Network& net, const Matrix& xs) { return net.conditional_mask(xs); }

// ---------------------------------------------------------------------------
// Mask summaries

/// Partition of the gated hidden units into predictor groups. Positions follow
/// the input feature layout, which the identity shortcuts preserve.
struct FeatureGroups {
  std::vector<std::size_t> momentum;
  std::vector<std::size_t> reversal;
  std::vector<std::size_t> january;

  static FeatureGroups standard() {
    FeatureGroups g;
    for (std::size_t i = 0; i < 12; ++i) g.momentum.push_back(i);
    for (std::size_t i = 12; i < 32; ++i) g.reversal.push_back(i);
    g.january.push_back(32);
    return g;
  }

  void validate(std::size_t width) const {
    std::vector<int> hits(width, 0);
    for (const auto* grp : {&momentum, &reversal, &january}) {
      for (std::size_t i : *grp) {
        if (i >= width) throw ConfigError("feature group index " + std::to_string(i) + " outside mask width");
        hits[i] += 1;
      }
    }
    for (std::size_t i = 0; i < width; ++i) {
      if (hits[i] != 1) {
        throw ConfigError("feature groups do not partition the mask: index " + std::to_string(i) +
                          " covered " + std::to_string(hits[i]) + " times");
      }
    }
  }
};

struct GroupWeights {
  std::vector<double> momentum;
  std::vector<double> reversal;
  std::vector<double> january;
};

inline GroupWeights mask_summary(const Matrix& masks, const FeatureGroups& groups) {
  groups.validate(masks.cols());
  GroupWeights out;
  auto sum = [](std::span<const double> row, const std::vector<std::size_t>& idx) {
    double s = 0.0;
    for (std::size_t i : idx) s += row[i];
    return s;
  };
  for (std::size_t r = 0; r < masks.rows(); ++r) {
    auto row = masks.row(r);
    out.momentum.push_back(sum(row, groups.momentum));
    out.reversal.push_back(sum(row, groups.reversal));
    out.january.push_back(sum(row, groups.january));
  }
  return out;
}

}  // namespace regime_lab
