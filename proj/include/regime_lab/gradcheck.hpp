#pragma once

// Finite-difference suite over the four architectures that matter for
// training: a plain ANN, one attention-enhanced residual block, a 3-block
// Attention-ResNet and a 1+1 block Switching-ResNet. Each case runs with
// dropout, input noise and the weight penalty switched on.

#include <string>
#include <vector>

#include "regime_lab/train.hpp"

namespace regime_lab {

struct GradCheckCase {
  std::string name;
  ModelSpec spec;
};

inline std::vector<GradCheckCase> gradcheck_cases() {
  return {{"ann", ann_spec(8, {8, 8})},
          {"attention_block", attention_resnet_spec(8, 1)},
          {"attention_resnet", attention_resnet_spec(8, 3)},
          {"switching_resnet", switching_resnet_spec(8, 10, 1, 1)}};
}

struct GradCheckSummary {
  std::string name;
  double max_relative_error = 0.0;
  std::string worst;  // "seed N: param[i]"
  std::size_t seeds = 0;
  std::size_t checked = 0;
};

inline GradCheckSummary run_gradcheck_case(const GradCheckCase& c, std::size_t n_seeds, std::size_t batch_rows = 6) {
  GradCheckSummary s;
  s.name = c.name;
  for (std::uint64_t seed = 1; seed <= n_seeds; ++seed) {
    Rng rng(mix_seed(seed, 77));
    Network net(c.spec);
    net.randomize(rng, 0.5);
    Dataset batch;
    batch.x = Matrix(batch_rows, c.spec.input_width);
    for (double& v : batch.x.values()) v = rng.normal();
    if (c.spec.uses_switch()) {
      batch.switch_x = Matrix(batch_rows, c.spec.switch_input_width);
      for (double& v : batch.switch_x.values()) v = rng.normal();
    }
    for (std::size_t i = 0; i < batch_rows; ++i) batch.y.push_back(static_cast<double>(rng.below(2)));
    ForwardContext ctx;
    ctx.training = true;
    ctx.dropout_rate = 0.2;
    ctx.noise_std = 0.1;
    ctx.rng.reseed(mix_seed(seed, 78));
    const GradCheckResult r = gradient_check(net, batch, 0.01, ctx);
    s.checked += r.checked;
    if (r.max_relative_error >= s.max_relative_error) {
      s.max_relative_error = r.max_relative_error;
      s.worst = "seed " + std::to_string(seed) + ": " + r.worst_param;
    }
    ++s.seeds;
  }
  return s;
}

inline std::vector<GradCheckSummary> run_gradcheck_suite(std::size_t n_seeds) {
  std::vector<GradCheckSummary> out;
  for (const auto& c : gradcheck_cases()) out.push_back(run_gradcheck_case(c, n_seeds));
  return out;
}

}  // namespace regime_lab
