#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <fstream>

#include "panda/gradient_check.hpp"
#include "panda/net.hpp"
#include "test_util.hpp"

using namespace panda;
using panda::test::random_tensor;
using panda::test::TempDir;

namespace {

/// Small enough for exhaustive finite differences.
NetworkSpec tiny_spec(std::vector<std::string> attrs = {"a", "b", "c"}) {
  NetworkSpec s;
  s.channels = 2;
  s.height = 8;
  s.width = 8;
  s.conv_stages = {{3, 3, 1, 1, 2, 2, true}, {4, 3, 1, 1, 2, 2, false}};
  s.trunk_fc_units = 6;
  s.head_hidden_units = 5;
  s.attributes = std::move(attrs);
  s.lrn = {3, 2.0, 0.5, 0.75};
  return s;
}

void zero_heads(Network& net) {
  for (std::size_t a = 0; a < net.attribute_count(); ++a)
    for (std::size_t j = 0; j < 4; ++j) net.params[net.head_index(a) + j].fill(0.0);
}

AttributeLabel labels(std::initializer_list<Label> l) { return AttributeLabel(l); }

constexpr Label P = Label::positive;
constexpr Label N = Label::negative;
constexpr Label U = Label::unknown;

}  // namespace

TEST(NetworkSpec, PartDefaultTrunkIs576) {
  const auto spec = NetworkSpec::part_default({"male", "hat"});
  spec.validate();
  EXPECT_EQ(spec.conv_stages.size(), 4u);
  EXPECT_EQ(spec.trunk_fc_units, 576u);
  EXPECT_EQ(spec.head_hidden_units, 128u);
  const auto net = build_network(spec, 1);
  const auto tap = tap_activation(net, random_tensor({3, 64, 64}, 2, 0, 1));
  EXPECT_EQ(tap.size(), 576u);
}

TEST(NetworkSpec, HolisticDefaultNineHeads) {
  const auto spec = NetworkSpec::holistic_default();
  EXPECT_EQ(spec.channels, 12u);
  EXPECT_EQ(spec.conv_stages.size(), 2u);
  EXPECT_EQ(spec.trunk_fc_units, 512u);
  const auto net = build_network(spec, 1);
  const auto out = forward(net, random_tensor({1, 12, 64, 64}, 3, 0, 1));
  EXPECT_EQ(out.probabilities.shape(), (Shape{1, 9}));
  EXPECT_EQ(out.tap.shape(), (Shape{1, 512}));
  EXPECT_EQ(net.param("head.male.out.weight").shape(), (Shape{1, 128}));
}

TEST(NetworkSpec, Validation) {
  auto s = tiny_spec({});
  EXPECT_THROW(s.validate(), SpecError);
  s = tiny_spec({"a", "a"});
  EXPECT_THROW(s.validate(), SpecError);
  s = tiny_spec();
  s.conv_stages.push_back({4, 3, 1, 1, 2, 2, false});
  s.conv_stages.push_back({4, 3, 1, 0, 2, 2, false});
  try {
    s.validate();
    FAIL();
  } catch (const SpecError& e) {
    EXPECT_NE(std::string(e.what()).find("conv stage 4"), std::string::npos) << e.what();
  }
}

TEST(NetworkSpec, TextRoundTrip) {
  const auto s = NetworkSpec::part_default({"x", "y"});
  EXPECT_EQ(NetworkSpec::from_text(s.to_text()), s);
  EXPECT_EQ(NetworkSpec::from_text(s.to_text()).to_text(), s.to_text());
}

TEST(Network, SameSeedBitIdentical) {
  EXPECT_EQ(build_network(tiny_spec(), 9), build_network(tiny_spec(), 9));
  EXPECT_NE(build_network(tiny_spec(), 9).params, build_network(tiny_spec(), 10).params);
}

TEST(Network, InitialisationRange) {
  const auto net = build_network(NetworkSpec::part_default({"a"}), 3);
  const auto& w = net.param("conv2.weight");
  const double bound = std::sqrt(3.0 / (16 * 25));
  double max_abs = 0;
  for (double v : w.values()) max_abs = std::max(max_abs, std::abs(v));
  EXPECT_LE(max_abs, bound);
  EXPECT_GT(max_abs, 0.9 * bound);
  for (double v : net.param("trunk.bias").values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, ProbabilitiesInsideUnitInterval) {
  const auto net = build_network(tiny_spec(), 1);
  const auto out = forward(net, random_tensor({4, 2, 8, 8}, 7, -5, 5));
  for (double p : out.probabilities.values()) {
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

TEST(Forward, ZeroHeadsGiveOneHalf) {
  auto net = build_network(tiny_spec(), 1);
  zero_heads(net);
  const auto out = forward(net, random_tensor({3, 2, 8, 8}, 8));
  for (double p : out.probabilities.values()) EXPECT_EQ(p, 0.5);
}

TEST(Forward, BatchMatchesSingles) {
  const auto net = build_network(tiny_spec(), 2);
  const auto batch = random_tensor({2, 2, 8, 8}, 9);
  const auto joint = forward(net, batch);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto single = forward(net, batch_row(batch, b).reshaped({1, 2, 8, 8}));
    for (std::size_t a = 0; a < 3; ++a)
      EXPECT_NEAR(joint.probabilities.at(b, a), single.probabilities.at(0, a), 1e-6);
  }
}

TEST(Forward, ShapeMismatch) {
  const auto net = build_network(tiny_spec(), 2);
  EXPECT_THROW(forward(net, Tensor({1, 3, 8, 8})), InvalidArgument);
  EXPECT_THROW(forward(net, Tensor({2, 8, 8})), InvalidArgument);
}

TEST(Forward, HeadIsolation) {
  const auto net = build_network(tiny_spec(), 4);
  const auto x = random_tensor({2, 2, 8, 8}, 10);
  const auto base = forward(net, x);
  auto perturbed = net;
  for (std::size_t j = 0; j < 4; ++j)
    for (auto& v : perturbed.params[perturbed.head_index(1) + j].values()) v += 0.3;
  const auto out = forward(perturbed, x);
  for (std::size_t b = 0; b < 2; ++b) {
    EXPECT_EQ(out.probabilities.at(b, 0), base.probabilities.at(b, 0));
    EXPECT_NE(out.probabilities.at(b, 1), base.probabilities.at(b, 1));
    EXPECT_EQ(out.probabilities.at(b, 2), base.probabilities.at(b, 2));
  }
  EXPECT_EQ(out.tap, base.tap);
}

TEST(Forward, TrunkSharingIndependentOfHeads) {
  const auto x = random_tensor({2, 2, 8, 8}, 11);
  const auto three = forward(build_network(tiny_spec({"a", "b", "c"}), 5), x).tap;
  const auto one = forward(build_network(tiny_spec({"z"}), 5), x).tap;
  EXPECT_EQ(three, one);
}

TEST(Loss, SinglePositiveIsMinusLogP) {
  const auto net = build_network(tiny_spec({"a"}), 6);
  const auto x = random_tensor({1, 2, 8, 8}, 12);
  const double p = forward(net, x).probabilities[0];
  const auto r = loss_and_grad(net, x, {labels({P})});
  EXPECT_NEAR(r.loss, -std::log(p), 1e-12);
  EXPECT_EQ(r.known_labels, 1u);
  EXPECT_FALSE(r.all_unknown);
}

TEST(Loss, AllUnknownGivesZero) {
  const auto net = build_network(tiny_spec(), 6);
  const auto r = loss_and_grad(net, random_tensor({2, 2, 8, 8}, 13), {labels({U, U, U}), labels({U, U, U})});
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_TRUE(r.all_unknown);
  for (const auto& g : r.grads)
    for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Loss, LabelCountMismatch) {
  const auto net = build_network(tiny_spec(), 6);
  EXPECT_THROW(loss_and_grad(net, random_tensor({2, 2, 8, 8}, 13), {labels({P, N, U})}), InvalidArgument);
  EXPECT_THROW(loss_and_grad(net, random_tensor({1, 2, 8, 8}, 13), {labels({P, N})}), InvalidArgument);
}

TEST(Loss, MonotoneInLogitForPositive) {
  double prev = INFINITY;
  for (double z = -30; z <= 30; z += 0.5) {
    const double l = detail::log_loss(z, true);
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_NEAR(detail::log_loss(0.0, true), std::log(2.0), 1e-15);
  EXPECT_NEAR(detail::log_loss(3.0, false), std::log1p(std::exp(3.0)), 1e-12);
}

TEST(Loss, MaskedGradientIsSumOfPerAttribute) {
  const auto net = build_network(tiny_spec(), 7);
  const auto x = random_tensor({2, 2, 8, 8}, 14);
  const auto full = loss_and_grad(net, x, {labels({P, U, N}), labels({N, U, P})});
  const auto only_a = loss_and_grad(net, x, {labels({P, U, U}), labels({N, U, U})});
  const auto only_c = loss_and_grad(net, x, {labels({U, U, N}), labels({U, U, P})});
  EXPECT_NEAR(full.loss, only_a.loss + only_c.loss, 1e-12);
  for (std::size_t i = 0; i < full.grads.size(); ++i)
    for (std::size_t j = 0; j < full.grads[i].size(); ++j)
      EXPECT_NEAR(full.grads[i][j], only_a.grads[i][j] + only_c.grads[i][j], 1e-6);
  // Head b had no known labels: its gradient is exactly zero.
  for (std::size_t j = 0; j < 4; ++j)
    for (double v : full.grads[net.head_index(1) + j].values()) EXPECT_EQ(v, 0.0);
}

TEST(Loss, GradientMatchesFiniteDifferencesTinyNet) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto net = build_network(tiny_spec(), 100 + seed);
    net.input_mean = {0.1, -0.2};
    // Nonzero biases keep rectifier inputs away from the kink at exactly zero.
    for (std::size_t i = 1; i < net.params.size(); i += 2)
      net.params[i] = random_tensor(net.params[i].shape(), 300 + seed + i, -0.2, 0.2);
    const auto x = random_tensor({2, 2, 8, 8}, 200 + seed);
    const std::vector<AttributeLabel> y{labels({P, N, U}), labels({N, P, P})};
    const auto r = loss_and_grad(net, x, y);
    auto objective = [&](const std::vector<Tensor>& params) {
      Network n = net;
      n.params = params;
      return loss_and_grad(n, x, y).loss;
    };
    const auto res = check_scalar_gradient(objective, net.params, r.grads, 1e-5, {}, net.param_names);
    EXPECT_LT(res.max_relative_error, 1e-3) << "seed " << seed << " worst " << res.worst;
  }
}

TEST(ModelFile, RoundTripBitIdentical) {
  TempDir dir("model");
  auto net = build_network(tiny_spec(), 42);
  net.input_mean = {0.25, 0.75};
  net.epoch = 3;
  save_network(net, dir.path() / "m.bin");
  const auto loaded = load_network(dir.path() / "m.bin");
  EXPECT_EQ(loaded, net);
  EXPECT_EQ(serialize_network(loaded), serialize_network(net));
  const auto x = random_tensor({2, 2, 8, 8}, 15);
  EXPECT_EQ(forward(loaded, x).probabilities, forward(net, x).probabilities);
}

TEST(ModelFile, TruncationReportsOffset) {
  const auto bytes = serialize_network(build_network(tiny_spec(), 1));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{13}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<char> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    try {
      deserialize_network(part);
      FAIL() << "cut " << cut;
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), cut);
    }
  }
}

TEST(ModelFile, VersionMismatch) {
  auto bytes = serialize_network(build_network(tiny_spec(), 1));
  bytes[8] = 9;  // format version lives right after the magic
  EXPECT_THROW(deserialize_network(bytes), VersionError);
  bytes = serialize_network(build_network(tiny_spec(), 1));
  bytes[0] = 'X';
  EXPECT_THROW(deserialize_network(bytes), FormatError);
}

TEST(ModelFile, GoldenLayout) {
  // Byte-level layout of the header: magic, little-endian version, spec length.
  NetworkSpec s = tiny_spec({"a"});
  auto net = build_network(s, 0x0102030405060708ULL);
  const auto bytes = serialize_network(net);
  ASSERT_GT(bytes.size(), 20u);
  EXPECT_EQ(std::string(bytes.data(), 8), "PANDANET");
  EXPECT_EQ(std::vector<char>(bytes.begin() + 8, bytes.begin() + 12), (std::vector<char>{1, 0, 0, 0}));
  const std::string text = s.to_text();
  const auto len = static_cast<std::uint32_t>(text.size());
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), len & 0xff);
  EXPECT_EQ(std::string(bytes.data() + 16, text.size()), text);
  const std::size_t seed_at = 16 + text.size();
  EXPECT_EQ(static_cast<unsigned char>(bytes[seed_at]), 0x08);
  EXPECT_EQ(static_cast<unsigned char>(bytes[seed_at + 7]), 0x01);
  EXPECT_EQ(text,
            "activation = rectifier\n"
            "attributes = a\n"
            "conv_stages = 3,3,1,1,2,2,1;4,3,1,1,2,2,0\n"
            "head_hidden_units = 5\n"
            "input_shape = 2,8,8\n"
            "lrn = 3,2,0.5,0.75\n"
            "spec_version = 1\n"
            "tap_name = fc_attr\n"
            "trunk_fc_units = 6\n");
}

TEST(Timing, DefaultPartNetSample) {
  const auto net = build_network(NetworkSpec::part_default({"a", "b", "c", "d"}), 1);
  const auto x = random_tensor({8, 3, 64, 64}, 2, 0, 1);
  std::vector<AttributeLabel> y(8, labels({P, N, P, N}));
  const auto t0 = std::chrono::steady_clock::now();
  loss_and_grad(net, x, y);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "part net fwd+bwd per sample: " << s / 8 * 1e3 << " ms\n";
  const auto hnet = build_network(NetworkSpec::holistic_default(), 1);
  const auto hx = random_tensor({4, 12, 64, 64}, 2, 0, 1);
  std::vector<AttributeLabel> hy(4, AttributeLabel(9, P));
  const auto t1 = std::chrono::steady_clock::now();
  loss_and_grad(hnet, hx, hy);
  const double s1 = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  std::cout << "holistic net fwd+bwd per sample: " << s1 / 4 * 1e3 << " ms\n";
}
