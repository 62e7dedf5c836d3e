#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "nowcast/unet.hpp"

using namespace nowcast;
using namespace nowcast::ad;
using gradcheck::random_tensor;

namespace {

using TD = Tensor<double>;

UNetConfig small_config(std::size_t depth = 2, std::size_t base = 8) {
  UNetConfig c;
  c.depth = depth;
  c.base_filters = base;
  return c;
}

std::size_t conv_count(std::size_t cin, std::size_t cout, std::size_t k) {
  return cout * cin * k * k + cout;
}

/// Closed-form parameter count of the architecture described in unet.hpp.
std::size_t expected_parameter_count(const UNetConfig& c) {
  const auto f = c.filters();
  auto basic = [](std::size_t cin, std::size_t cout) {
    return conv_count(cin, cout, 3) + 2 * cout + conv_count(cout, cout, 3) +
           (cin != cout ? conv_count(cin, cout, 1) : 0);
  };
  std::size_t n = basic(c.input_channels, c.base_filters);
  std::size_t ch = c.base_filters;
  for (std::size_t i = 0; i < c.depth; ++i) {
    n += 4 * ch + conv_count(ch, f[i], 3) + (ch != f[i] ? conv_count(ch, f[i], 1) : 0);
    ch = f[i];
  }
  n += basic(ch, ch);
  for (std::size_t j = c.depth; j >= 1; --j) {
    const std::size_t skip = j >= 2 ? f[j - 2] : c.base_filters;
    const std::size_t merged = ch + skip;
    n += 2 * merged + conv_count(merged, skip, 3) + 2 * skip + conv_count(skip, skip, 3) +
         conv_count(merged, skip, 1);
    ch = skip;
  }
  return n + conv_count(ch, c.class_count, 1);
}

}  // namespace

TEST(UNetConfig, DefaultScheduleDoublesAndCaps) {
  const UNetConfig c;
  EXPECT_EQ(c.filters(), (std::vector<std::size_t>{64, 128, 256, 512, 512, 512, 512}));
  auto d = c;
  d.schedule = {1, 2};
  EXPECT_THROW(d.validate(), InvalidArgument);
  d.depth = 0;
  d.schedule.clear();
  EXPECT_THROW(d.validate(), InvalidArgument);
}

TEST(UNetConfig, HashTracksArchitecture) {
  const UNetConfig a;
  auto b = a;
  EXPECT_EQ(a.hash(), b.hash());
  b.leaky_slope = 0.1;
  EXPECT_NE(a.hash(), b.hash());
  auto c = a;
  c.init_seed = 5;  // initialization seed is not architecture
  EXPECT_EQ(a.hash(), c.hash());
  EXPECT_NE(a.canonical_text().find("unet.leaky_slope=0.2"), std::string::npos);
}

TEST(UNetModel, ParameterCountMatchesClosedForm) {
  UNetConfig tiny;
  tiny.depth = 1;
  tiny.base_filters = 2;
  tiny.input_channels = 3;
  EXPECT_EQ(UNetModel<float>(tiny).parameter_count(), 696u);  // counted by hand
  for (std::size_t depth : {1u, 2u, 3u, 7u}) {
    for (std::size_t base : {4u, 16u, 32u}) {
      const auto c = small_config(depth, base);
      EXPECT_EQ(UNetModel<float>(c).parameter_count(), expected_parameter_count(c))
          << "depth " << depth << " base " << base;
    }
  }
}

TEST(UNetModel, ParameterNamesUnique) {
  UNetModel<float> m(UNetConfig{});
  std::set<std::string> names;
  for (auto* p : m.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  for (auto* b : m.buffers()) EXPECT_TRUE(names.insert(b->name).second) << b->name;
}

TEST(UNetModel, MirrorShapesForEveryDepth) {
  std::mt19937_64 rng(1);
  for (std::size_t depth = 1; depth <= 4; ++depth) {
    UNetConfig c = small_config(depth, 4);
    c.input_channels = 3;
    UNetModel<double> m(c);
    const std::size_t side = (std::size_t{1} << depth) * 2;
    auto logits = m.predict_logits(random_tensor(rng, {2, 3, side, side + (std::size_t{1} << depth)}));
    EXPECT_EQ(logits.shape(), (Shape{2, 4, side, side + (std::size_t{1} << depth)}));
    EXPECT_THROW(m.predict_logits(TD({1, 3, side + 1, side})), InvalidArgument);
    EXPECT_THROW(m.predict_logits(TD({1, 2, side, side})), InvalidArgument);
  }
}

TEST(UNetModel, DefaultConfigProducesFourClassFullTile) {
  UNetModel<float> m(UNetConfig{});
  std::mt19937_64 rng(2);
  Tensor<float> x({1, 28, 256, 256});
  std::uniform_real_distribution<float> d(0.0f, 3.0f);
  for (auto& v : x.values()) v = d(rng);
  const auto logits = m.predict_logits(x);
  EXPECT_EQ(logits.shape(), (Shape{1, 4, 256, 256}));
  const auto p = softmax_channels(logits);
  for (std::size_t i = 0; i < 256 * 256; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += p[c * 256 * 256 + i];
    ASSERT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(BasicBlock, ZeroedConvolutionsLeaveSkipPath) {
  std::mt19937_64 rng(3);
  BasicBlock<double> block("b", 5, 5, rng);
  for (auto* p : {&block.conv1.kernel, &block.conv2.kernel}) std::fill(p->value.values().begin(), p->value.values().end(), 0.0);
  Tape<double> tape;
  const auto x = random_tensor(rng, {2, 5, 6, 6});
  auto y = block(tape.constant(x), Mode::infer, UNetConfig{});
  EXPECT_EQ(y.value(), x);
  EXPECT_EQ(y.shape(), x.shape());
}

TEST(BasicBlock, GradientFlowsThroughBothPaths) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    BasicBlock<double> same("s", 3, 3, rng), proj("p", 2, 4, rng);
    for (auto* b : {&same, &proj}) {
      const std::size_t cin = b == &same ? 3 : 2;
      const auto r = gradcheck::check(
          [&](Tape<double>&, const std::vector<Var<double>>& v) { return (*b)(v[0], Mode::train, UNetConfig{}); },
          {random_tensor(rng, {2, cin, 4, 4})}, seed, 1e-6);
      EXPECT_LT(r.error, 1e-4);
    }
  }
}

TEST(DownsampleBlock, HalvesResolutionAndFollowsSchedule) {
  std::mt19937_64 rng(4);
  DownsampleBlock<float> block("d", 4, 8, rng);
  Tape<float> tape;
  auto y = block(tape.constant(Tensor<float>({1, 4, 256, 256}, 0.5f)), Mode::train, UNetConfig{});
  EXPECT_EQ(y.shape(), (Shape{1, 8, 128, 128}));
  Tape<float> t2;
  EXPECT_THROW(block(t2.constant(Tensor<float>({1, 4, 6, 5})), Mode::train, UNetConfig{}), InvalidArgument);
}

TEST(DownsampleBlock, SevenLevelsReachTwoByTwo) {
  UNetModel<float> m(UNetConfig{});
  std::mt19937_64 rng(5);
  std::size_t c = 4, side = 256;
  Tape<float> tape;
  Var<float> x = tape.constant(Tensor<float>({1, 4, 256, 256}, 1.0f));
  for (int i = 0; i < 7; ++i) {
    DownsampleBlock<float> block("d" + std::to_string(i), c, c, rng);
    x = block(x, Mode::infer, UNetConfig{});
    side /= 2;
  }
  EXPECT_EQ(side, 2u);
  EXPECT_EQ(x.shape(), (Shape{1, 4, 2, 2}));
}

TEST(DownsampleBlock, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    DownsampleBlock<double> block("d", 2, 3, rng);
    const auto r = gradcheck::check(
        [&](Tape<double>&, const std::vector<Var<double>>& v) { return block(v[0], Mode::train, UNetConfig{}); },
        {random_tensor(rng, {2, 2, 4, 4})}, seed);
    EXPECT_LT(r.error, 1e-3);
  }
}

TEST(UpsampleBlock, ShapeContractAndSkipConnectivity) {
  std::mt19937_64 rng(6);
  UpsampleBlock<double> block("u", 4, 3, 3, rng);
  const auto x = random_tensor(rng, {1, 4, 2, 2});
  auto skip = random_tensor(rng, {1, 3, 4, 4});
  Tape<double> tape;
  auto y = block(tape.constant(x), tape.constant(skip), Mode::infer, UNetConfig{});
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 4}));
  skip[5] += 0.5;
  auto y2 = block(tape.constant(x), tape.constant(skip), Mode::infer, UNetConfig{});
  EXPECT_NE(y.value(), y2.value());
  EXPECT_THROW(block(tape.constant(x), tape.constant(TD({1, 3, 6, 6})), Mode::infer, UNetConfig{}),
               InvalidArgument);
}

TEST(UNetModel, WholeNetworkGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto c = small_config(2, 8);
    c.init_seed = seed;
    UNetModel<double> m(c);
    std::mt19937_64 rng(seed + 100);
    const auto x = random_tensor(rng, {2, 28, 16, 16});
    std::vector<std::uint8_t> labels(2 * 16 * 16);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng() % 4);
    const auto r = gradcheck::check_parameters(
        m.parameters(),
        [&](Tape<double>& tape) {
          return softmax_cross_entropy(m.forward(tape.constant(x), Mode::train), labels);
        },
        seed, 3, 1e-6, 1e-5);
    EXPECT_LT(r.worst_group_error, 1e-3) << r.worst_group;
    EXPECT_LT(r.directional_error, 1e-3);
    EXPECT_LE(r.skipped * 20, r.probed) << r.skipped << " of " << r.probed + r.skipped;
  }
}

TEST(Exceedance, TailSums) {
  auto from = [](std::vector<double> p) {
    return exceedance_from_probs(TD({1, 4, 1, 1}, std::move(p))).values();
  };
  EXPECT_EQ(from({1, 0, 0, 0}), (std::vector<double>{0, 0, 0}));
  const auto e = from({0.1, 0.2, 0.3, 0.4});
  EXPECT_NEAR(e[0], 0.9, 1e-15);
  EXPECT_NEAR(e[1], 0.7, 1e-15);
  EXPECT_NEAR(e[2], 0.4, 1e-15);
  const auto u = exceedance_probs(TD({1, 4, 1, 1})).values();
  EXPECT_NEAR(u[0], 0.75, 1e-15);
  EXPECT_NEAR(u[1], 0.5, 1e-15);
  EXPECT_NEAR(u[2], 0.25, 1e-15);
  EXPECT_THROW(exceedance_probs(TD({1, 3, 1, 1})), InvalidArgument);
}

TEST(Exceedance, NestedForRandomLogits) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_tensor(rng, {2, 4, 5, 5}, -40, 40);
    const auto e = exceedance_probs(z);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 25; ++i) {
        const double p0 = e[(n * 3 + 0) * 25 + i], p1 = e[(n * 3 + 1) * 25 + i], p2 = e[(n * 3 + 2) * 25 + i];
        EXPECT_GE(p0, p1);
        EXPECT_GE(p1, p2);
        EXPECT_GE(p2, 0.0);
        EXPECT_LE(p0, 1.0);
      }
  }
}

TEST(Checkpoint, RoundTripRestoresModelBitExactly) {
  auto c = small_config(2, 4);
  c.init_seed = 1;
  UNetModel<float> a(c);
  std::mt19937_64 rng(8);
  Tensor<float> x({1, 28, 8, 8});
  for (auto& v : x.values()) v = static_cast<float>(rng() % 100) / 50.0f;
  {
    Tape<float> tape;
    a.forward(tape.constant(x), Mode::train);  // move running stats off their defaults
  }
  std::stringstream s;
  write_checkpoint(a.to_checkpoint(17), s);
  const auto bytes = s.str();
  auto c2 = c;
  c2.init_seed = 2;
  UNetModel<float> b(c2);
  EXPECT_NE(a.predict_logits(x), b.predict_logits(x));
  std::istringstream in(bytes);
  const auto ck = read_checkpoint(in, c.hash());
  EXPECT_EQ(ck.step, 17u);
  b.load_checkpoint(ck);
  EXPECT_EQ(a.predict_logits(x), b.predict_logits(x));
  std::stringstream again;
  write_checkpoint(b.to_checkpoint(17), again);
  EXPECT_EQ(again.str(), bytes);
}

TEST(Checkpoint, RefusesDifferentArchitecture) {
  UNetModel<float> a(small_config(2, 4)), b(small_config(2, 8));
  EXPECT_THROW(b.load_checkpoint(a.to_checkpoint()), ConfigMismatch);
  std::stringstream s;
  write_checkpoint(a.to_checkpoint(), s);
  EXPECT_THROW(read_checkpoint(s, small_config(2, 8).hash()), ConfigMismatch);
}

TEST(Checkpoint, TruncatedStreamReportsOffset) {
  UNetModel<float> a(small_config(1, 2));
  std::stringstream s;
  write_checkpoint(a.to_checkpoint(), s);
  auto bytes = s.str();
  bytes.resize(bytes.size() - 3);
  std::istringstream in(bytes);
  EXPECT_THROW(read_checkpoint(in), FormatError);
  std::istringstream junk("NWCX");
  EXPECT_THROW(read_checkpoint(junk), FormatError);
}

TEST(MakeBatch, StacksExamplesInOrder) {
  Example a, b;
  for (auto* e : {&a, &b}) {
    e->channels = 2;
    e->size = 2;
    e->label = {2, 2, {0, 1, 2, 3}};
  }
  a.values = {1, 2, 3, 4, 5, 6, 7, 8};
  b.values = {9, 10, 11, 12, 13, 14, 15, 16};
  b.label.classes = {3, 2, 1, 0};
  const auto [x, labels] = make_batch<double>({&a, &b});
  EXPECT_EQ(x.shape(), (Shape{2, 2, 2, 2}));
  EXPECT_EQ(x.at(1, 0, 0, 0), 9.0);
  EXPECT_EQ(labels, (std::vector<std::uint8_t>{0, 1, 2, 3, 3, 2, 1, 0}));
  Example odd = a;
  odd.size = 1;
  EXPECT_THROW(make_batch<double>({&a, &odd}), InvalidArgument);
}
