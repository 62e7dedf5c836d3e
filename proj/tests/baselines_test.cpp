#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nowcast/baselines.hpp"
#include "support.hpp"

using namespace nowcast;

namespace {

const QuantizationScheme kScheme;

double total(const RadarFrame& f) { return std::accumulate(f.rates().begin(), f.rates().end(), 0.0); }

double median(std::vector<double> x) {
  std::nth_element(x.begin(), x.begin() + x.size() / 2, x.end());
  return x[x.size() / 2];
}

/// F1 of a hard map against the truth frame at one threshold, by direct counting.
double f1_against(const std::vector<float>& map, const RadarFrame& truth, double threshold) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const bool predicted = map[i] >= 0.5f;
    const bool actual = truth.rates()[i] >= static_cast<float>(threshold);
    tp += predicted && actual;
    fp += predicted && !actual;
    fn += !predicted && actual;
  }
  return tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
}

SynthConfig textured_scene(std::uint64_t seed, double u, double v) {
  SynthConfig c;
  c.height = c.width = 96;
  c.frame_count = 10;
  c.cell_count = 12;
  c.sigma_min = 2.5;
  c.sigma_max = 5.0;
  c.u = u;
  c.v = v;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Persistence, ZeroFrameGivesZeroMaps) {
  const auto p = persistence_predict(RadarFrame::zeros(6, 7), kScheme);
  ASSERT_EQ(p.maps.maps.size(), 3u);
  for (const auto& m : p.maps.maps) EXPECT_EQ(m, std::vector<float>(42, 0.0f));
  EXPECT_EQ(p.source, BaselineKind::persistence);
}

TEST(Persistence, OneMillimetreMeetsSecondThresholdOnly) {
  std::vector<float> v(4, 0.0f);
  v[2] = 1.0f;
  const auto p = persistence_predict(RadarFrame(2, 2, 600, {}, v), kScheme);
  EXPECT_EQ(p.maps.maps[0][2], 1.0f);
  EXPECT_EQ(p.maps.maps[1][2], 1.0f);
  EXPECT_EQ(p.maps.maps[2][2], 0.0f);
  EXPECT_EQ(p.maps.timestamp, 600);
  EXPECT_TRUE(p.maps.nested());
}

TEST(Persistence, StaticWorldIsPerfect) {
  std::mt19937_64 rng(1);
  const auto f = testing_support::random_frame(rng, 20, 20, 5.0);
  const auto p = persistence_predict(f, kScheme);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto mask = exceedance_mask(quantize(f, kScheme), k, 3);
    EXPECT_EQ(p.maps.maps[k], std::vector<float>(mask.bits.begin(), mask.bits.end()));
  }
}

TEST(Flow, IdenticalFramesGiveZeroDisplacement) {
  const auto frames = generate_sequence(textured_scene(2, 0.0, 0.0));
  const std::vector<RadarFrame> pair{frames[0], frames[0]};
  const auto flow = estimate_flow(pair);
  for (std::size_t i = 0; i < flow.u.size(); ++i) {
    ASSERT_EQ(flow.u[i], 0.0);
    ASSERT_EQ(flow.v[i], 0.0);
  }
}

TEST(Flow, EmptyFramesGiveZeroFlowAndConfidence) {
  const std::vector<RadarFrame> pair{RadarFrame::zeros(16, 16), RadarFrame::zeros(16, 16)};
  const auto flow = estimate_flow(pair);
  for (std::size_t i = 0; i < 256; ++i) {
    EXPECT_EQ(flow.u[i], 0.0);
    EXPECT_EQ(flow.v[i], 0.0);
    EXPECT_EQ(flow.confidence[i], 0.0);
  }
}

TEST(Flow, RecoversIntegerShift) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto frames = generate_sequence(textured_scene(seed, 3.0, 0.0));
    const auto flow = estimate_flow(std::span(frames).subspan(0, 2));
    std::vector<double> u, v;
    for (std::size_t i = 0; i < flow.u.size(); ++i) {
      if (frames[0].rates()[i] > 0.1f) {
        u.push_back(flow.u[i]);
        v.push_back(flow.v[i]);
      }
    }
    ASSERT_FALSE(u.empty());
    EXPECT_NEAR(median(u), 3.0, 0.5) << "seed " << seed;
    EXPECT_NEAR(median(v), 0.0, 0.5) << "seed " << seed;
    for (double c : flow.confidence) EXPECT_TRUE(c >= 0.0 && c <= 1.0);
  }
}

TEST(Flow, PyramidReachesLargerDisplacements) {
  const auto frames = generate_sequence(textured_scene(7, -6.0, 4.0));
  FlowOptions opt;
  opt.pyramid_levels = 3;
  const auto flow = estimate_flow(std::span(frames).subspan(0, 2), opt);
  std::vector<double> u, v;
  for (std::size_t i = 0; i < flow.u.size(); ++i) {
    if (frames[0].rates()[i] > 0.5f) {
      u.push_back(flow.u[i]);
      v.push_back(flow.v[i]);
    }
  }
  EXPECT_NEAR(median(u), -6.0, 0.75);
  EXPECT_NEAR(median(v), 4.0, 0.75);
}

TEST(Flow, InvalidInputsRejected) {
  const std::vector<RadarFrame> one{RadarFrame::zeros(4, 4)};
  EXPECT_THROW(estimate_flow(one), InvalidArgument);
  const std::vector<RadarFrame> mixed{RadarFrame::zeros(4, 4), RadarFrame::zeros(4, 5)};
  EXPECT_THROW(estimate_flow(mixed), InvalidArgument);
  const std::vector<RadarFrame> pair{RadarFrame::zeros(4, 4), RadarFrame::zeros(4, 4)};
  FlowOptions even;
  even.window = 16;
  EXPECT_THROW(estimate_flow(pair, even), InvalidArgument);
  const auto flow = estimate_flow(pair);
  EXPECT_THROW(flow_extrapolate(RadarFrame::zeros(5, 4), flow, 1.0), InvalidArgument);
  EXPECT_THROW(flow_extrapolate(RadarFrame::zeros(4, 4), flow, -1.0), InvalidArgument);
}

TEST(Extrapolate, ZeroFlowIsPersistence) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto f = testing_support::random_frame(rng, 17, 23, 6.0);
    FlowField zero{17, 23, std::vector<double>(17 * 23, 0.0), std::vector<double>(17 * 23, 0.0),
                   std::vector<double>(17 * 23, 0.0)};
    const auto of = flow_predict(f, zero, 6.0, kScheme);
    EXPECT_EQ(of.maps, persistence_predict(f, kScheme).maps);
    EXPECT_EQ(of.source, BaselineKind::optical_flow);
  }
}

TEST(Extrapolate, ConservesInDomainMass) {
  const std::vector<StormCell> cell{{40.0, 40.0, 5.0, 4.0, 1.0}};
  const auto f = render_cells(cell, 96, 96, 0);
  for (auto [u, v] : {std::pair{1.5, 0.5}, std::pair{-0.3, 1.7}, std::pair{2.0, -2.0}}) {
    FlowField flow{96, 96, std::vector<double>(96 * 96, u), std::vector<double>(96 * 96, v), {}};
    const auto out = flow_extrapolate(f, flow, 6.0);
    EXPECT_NEAR(total(out) / total(f), 1.0, 1e-3);
  }
}

TEST(Extrapolate, TranslationMatchesFutureFrame) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const int u = static_cast<int>(seed % 5) + 1, v = -static_cast<int>(seed % 3);
    auto c = textured_scene(seed, u, v);
    c.frame_count = 8;
    const auto frames = generate_sequence(c);
    const auto flow = estimate_flow(std::span(frames).subspan(0, 2));
    const auto out = flow_extrapolate(frames[1], flow, 6.0);
    double mae = 0.0, peak = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      mae += std::abs(out.rates()[i] - frames[7].rates()[i]);
      peak = std::max(peak, static_cast<double>(frames[7].rates()[i]));
    }
    mae /= static_cast<double>(out.size());
    EXPECT_LE(mae, 0.05 * peak) << "seed " << seed;
  }
}

TEST(Extrapolate, BeatsPersistenceOnMovingRain) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto frames = generate_sequence(textured_scene(100 + seed, 2.0 + seed % 3, 1.0));
    const auto flow = estimate_flow(std::span(frames).subspan(0, 2));
    const auto of = flow_predict(frames[1], flow, 6.0, kScheme);
    const auto pe = persistence_predict(frames[1], kScheme);
    wins += f1_against(of.maps.maps[0], frames[7], 0.1) > f1_against(pe.maps.maps[0], frames[7], 0.1);
  }
  EXPECT_GE(wins, 9);
}

TEST(Extrapolate, GrowthIsInvisibleToBothBaselines) {
  auto c = textured_scene(5, 0.0, 0.0);
  c.growth_min = c.growth_max = 1.2;
  c.amplitude_min = 1.0;
  c.amplitude_max = 2.0;
  const auto frames = generate_sequence(c);
  const auto flow = estimate_flow(std::span(frames).subspan(0, 2));
  const auto of = flow_predict(frames[1], flow, 6.0, kScheme);
  const auto pe = persistence_predict(frames[1], kScheme);
  const auto truth = exceedance_mask(quantize(frames[7], kScheme), 2, 3);
  const auto heavy_true = std::count(truth.bits.begin(), truth.bits.end(), 1);
  for (const auto* p : {&of, &pe}) {
    const auto& heavy = p->maps.maps[2];
    EXPECT_LT(std::count(heavy.begin(), heavy.end(), 1.0f) * 2, heavy_true);
  }
  EXPECT_LT(total(flow_extrapolate(frames[1], flow, 6.0)), total(frames[7]));
  EXPECT_LT(total(frames[1]), total(frames[7]));
}
