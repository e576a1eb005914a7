#include "regime_lab/snapshot.hpp"

#include <gtest/gtest.h>

#include "regime_lab/train.hpp"

namespace regime_lab {
namespace {

Dataset toy_data(std::size_t n, Rng& rng) {
  Dataset d;
  d.x = Matrix(n, 8);
  d.switch_x = Matrix(n, 10);
  for (double& v : d.x.values()) v = rng.normal();
  for (double& v : d.switch_x.values()) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) d.y.push_back(d.x(i, 0) * d.switch_x(i, 1) > 0 ? 1.0 : 0.0);
  return d;
}

std::vector<double> flat_params(const Network& net) {
  std::vector<double> out;
  net.for_each_param([&](const std::string&, const Matrix& m, bool) {
    out.insert(out.end(), m.values().begin(), m.values().end());
  });
  net.for_each_norm([&](const std::string&, const BatchNormState& n) {
    out.insert(out.end(), n.running_mean.begin(), n.running_mean.end());
    out.insert(out.end(), n.running_var.begin(), n.running_var.end());
  });
  return out;
}

TrainConfig short_config(std::uint64_t seed) {
  TrainConfig tc;
  tc.batch_size = 16;
  tc.epochs = 2;
  tc.lambda_init = 1e-3;
  tc.seed = seed;
  return tc;
}

TEST(SnapshotTest, RoundTripIsBitExactIncludingOptimizer) {
  Rng rng(5);
  const Dataset data = toy_data(64, rng);
  Network net(switching_resnet_spec(8, 10, 1, 1));
  Rng init(6);
  net.initialize(init);
  AdamState adam;
  fit(net, data, Dataset{}, short_config(1), adam);

  std::stringstream buf;
  write_snapshot(buf, net, &adam);
  const std::string text = buf.str();
  Snapshot snap = read_snapshot(buf);
  ASSERT_TRUE(snap.adam.has_value());
  EXPECT_EQ(flat_params(snap.network), flat_params(net));
  EXPECT_EQ(snap.adam->step_count, adam.step_count);
  ASSERT_EQ(snap.adam->first_moment.size(), adam.first_moment.size());
  for (std::size_t k = 0; k < adam.first_moment.size(); ++k) {
    EXPECT_EQ(snap.adam->first_moment[k].values(), adam.first_moment[k].values());
    EXPECT_EQ(snap.adam->second_moment[k].values(), adam.second_moment[k].values());
  }
  EXPECT_EQ(snap.network.predict(data.x, &data.switch_x).values(), net.predict(data.x, &data.switch_x).values());

  // Writing the loaded copy reproduces the same bytes.
  std::stringstream again;
  write_snapshot(again, snap.network, &*snap.adam);
  EXPECT_EQ(again.str(), text);

  // Resuming from the snapshot matches resuming from memory.
  fit(net, data, Dataset{}, short_config(2), adam);
  fit(snap.network, data, Dataset{}, short_config(2), *snap.adam);
  EXPECT_EQ(flat_params(snap.network), flat_params(net));
}

TEST(SnapshotTest, EveryArchitectureRoundTrips) {
  for (const ModelSpec& spec : {linear_spec(5), ann_spec(5, {4, 3}), resnet_spec(5, 2), attention_resnet_spec(5, 3),
                                switching_resnet_spec(5, 6, 2, 1)}) {
    Network net(spec);
    Rng init(9);
    net.initialize(init);
    std::stringstream buf;
    write_snapshot(buf, net);
    const Snapshot snap = read_snapshot(buf);
    EXPECT_FALSE(snap.adam.has_value());
    EXPECT_EQ(spec_to_json(snap.network.spec()), spec_to_json(spec));
    EXPECT_EQ(flat_params(snap.network), flat_params(net));
  }
}

TEST(SnapshotTest, RejectsMalformedInput) {
  Network net(ann_spec(4, {3}));
  Rng init(1);
  net.initialize(init);
  std::stringstream buf;
  write_snapshot(buf, net);
  const std::string text = buf.str();

  auto load = [](const std::string& s) {
    std::istringstream in(s);
    return read_snapshot(in, "model.snap");
  };
  EXPECT_THROW(load("regime_lab.snapshot 2\n"), DataError);
  EXPECT_THROW(load(text.substr(0, text.size() / 2)), DataError);
  std::string wrong_shape = text;
  wrong_shape.replace(wrong_shape.find("param ann.0.weight 3 4"), 22, "param ann.0.weight 4 3");
  try {
    load(wrong_shape);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("model.snap:3:"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace regime_lab
