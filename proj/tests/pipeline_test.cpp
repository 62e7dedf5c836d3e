#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "nowcast/pipeline.hpp"
#include "nowcast/synthgen.hpp"
#include "support.hpp"

using namespace nowcast;

namespace {

std::vector<RadarFrame> hour_of_frames(std::mt19937_64& rng, std::size_t h, std::size_t w,
                                       std::int64_t t0, std::size_t count = 7,
                                       float max_rate = 3.0f) {
  std::vector<RadarFrame> out;
  for (std::size_t k = 0; k < count; ++k) {
    out.push_back(testing_support::random_frame(rng, h, w, max_rate,
                                                t0 + static_cast<std::int64_t>(k) * kCadenceSeconds));
  }
  return out;
}

std::vector<ManifestEntry> mixed_entries(std::size_t rainy, std::size_t dry) {
  std::vector<ManifestEntry> e;
  for (std::size_t i = 0; i < rainy + dry; ++i) {
    e.push_back({"s", 0, 0, static_cast<std::int64_t>(i) * 600, i < rainy});
  }
  return e;
}

}  // namespace

TEST(Tiling, ExactDivision) {
  const auto tiles = tile_mosaic(512, 512, 256);
  ASSERT_EQ(tiles.size(), 4u);
  EXPECT_EQ(tiles[0], (TileSpec{0, 0, 256}));
  EXPECT_EQ(tiles[1], (TileSpec{0, 256, 256}));
  EXPECT_EQ(tiles[2], (TileSpec{256, 0, 256}));
  EXPECT_EQ(tiles[3], (TileSpec{256, 256, 256}));
}

TEST(Tiling, RemainderDroppedAndSingleTile) {
  EXPECT_EQ(tile_mosaic(300, 300, 256), (std::vector<TileSpec>{{0, 0, 256}}));
  EXPECT_EQ(tile_mosaic(256, 256, 256), (std::vector<TileSpec>{{0, 0, 256}}));
  EXPECT_THROW(tile_mosaic(200, 300, 256), InvalidArgument);
  EXPECT_THROW(tile_mosaic(10, 10, 0), InvalidArgument);
}

TEST(Tiling, TilesAreDisjointAndCoverCroppedMosaic) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t size = 1 + rng() % 9;
    const std::size_t h = size + rng() % 30, w = size + rng() % 30;
    const auto tiles = tile_mosaic(h, w, size);
    std::vector<int> cover(h * w, 0);
    for (const auto& t : tiles) {
      ASSERT_LE(t.row + t.size, h);
      ASSERT_LE(t.col + t.size, w);
      for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) ++cover[(t.row + r) * w + t.col + c];
      }
    }
    const std::size_t hh = h / size * size, ww = w / size * size;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        EXPECT_EQ(cover[r * w + c], (r < hh && c < ww) ? 1 : 0);
      }
    }
  }
}

TEST(Assemble, LayoutIsRateTodLatLonPerFrameOldestFirst) {
  std::mt19937_64 rng(1);
  const std::int64_t t0 = 1527811200 + 6 * 3600;  // 06:00 UTC
  const auto frames = hour_of_frames(rng, 12, 10, t0);
  const auto label = testing_support::random_frame(rng, 12, 10, 3.0f, frames.back().timestamp() + 3600);
  const TileSpec tile{2, 4, 6};
  const auto ex = assemble_example(frames, tile, {}, label);
  ASSERT_EQ(ex.channels, 28u);
  ASSERT_EQ(ex.values.size(), 28u * 36);
  EXPECT_EQ(ex.label_timestamp - ex.t_last_input, 3600);
  for (std::size_t k = 0; k < 7; ++k) {
    const auto rate = ex.plane(4 * k), tod = ex.plane(4 * k + 1);
    const auto lat = ex.plane(4 * k + 2), lon = ex.plane(4 * k + 3);
    const float expect_tod = static_cast<float>(static_cast<double>(6 * 3600 + 600 * k) / 86400.0);
    for (std::size_t r = 0; r < 6; ++r) {
      for (std::size_t c = 0; c < 6; ++c) {
        const auto i = r * 6 + c;
        EXPECT_EQ(rate[i], frames[k].at(2 + r, 4 + c));
        EXPECT_EQ(tod[i], expect_tod);
        EXPECT_FLOAT_EQ(lat[i], static_cast<float>((40.0 - 0.01 * (2 + r + 0.5)) / 90.0));
        EXPECT_FLOAT_EQ(lon[i], static_cast<float>((-100.0 + 0.01 * (4 + c + 0.5)) / 180.0));
      }
    }
  }
  EXPECT_FLOAT_EQ(ex.plane(1)[0], 0.25f);
  EXPECT_EQ(ex.label, quantize(crop(label, 2, 4, 6), {}));
}

TEST(Assemble, AuxChannelsIndependentOfRates) {
  std::mt19937_64 rng(2);
  auto frames = hour_of_frames(rng, 8, 8, 1527811200);
  std::vector<RadarFrame> zeros;
  for (const auto& f : frames) zeros.push_back(RadarFrame::zeros(8, 8, f.timestamp()));
  const auto label = RadarFrame::zeros(8, 8, frames.back().timestamp() + 3600);
  const auto a = assemble_example(frames, {0, 0, 8}, {}, label);
  const auto b = assemble_example(zeros, {0, 0, 8}, {}, label);
  for (std::size_t k = 0; k < 7; ++k) {
    for (float x : b.plane(4 * k)) EXPECT_EQ(x, 0.0f);
    for (std::size_t aux = 1; aux < 4; ++aux) {
      const auto pa = a.plane(4 * k + aux), pb = b.plane(4 * k + aux);
      EXPECT_TRUE(std::equal(pa.begin(), pa.end(), pb.begin()));
    }
  }
  EXPECT_FALSE(b.rainy());
}

TEST(Assemble, SingleTracePixelMakesLabelRainy) {
  std::mt19937_64 rng(3);
  const auto frames = hour_of_frames(rng, 4, 4, 0);
  std::vector<float> v(16, 0.0f);
  v[5] = 0.1f;
  const RadarFrame label(4, 4, frames.back().timestamp() + 3600, {}, v);
  EXPECT_TRUE(assemble_example(frames, {0, 0, 4}, {}, label).rainy());
  auto all = frames;
  all.push_back(label);
  const auto entries = index_sequence("x", all, 4, {});
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_TRUE(entries[0].rainy);
}

TEST(Assemble, RejectsCadenceLeadAndBounds) {
  std::mt19937_64 rng(4);
  auto frames = hour_of_frames(rng, 8, 8, 0);
  const auto label = RadarFrame::zeros(8, 8, frames.back().timestamp() + 3600);
  auto bad = frames;
  bad[3] = bad[3].with_timestamp(bad[3].timestamp() + 1);
  EXPECT_THROW(assemble_example(bad, {0, 0, 8}, {}, label), InvalidArgument);
  EXPECT_THROW(assemble_example(frames, {0, 0, 8}, {}, label.with_timestamp(label.timestamp() - 600)),
               InvalidArgument);
  EXPECT_THROW(assemble_example(frames, {4, 0, 8}, {}, label), InvalidArgument);
  EXPECT_THROW(assemble_example(std::span(frames).first(6), {0, 0, 8}, {}, label), InvalidArgument);
}

TEST(IndexSequence, OneEntryPerCompleteHourAndTile) {
  SynthConfig c;
  c.height = c.width = 16;
  c.frame_count = 20;
  c.cell_count = 2;
  const auto frames = generate_sequence(c);
  const auto entries = index_sequence("seq", frames, 8, {});
  // last inputs at frames 6..13 (label needs +6 frames), 4 tiles each
  ASSERT_EQ(entries.size(), 8u * 4);
  for (const auto& e : entries) {
    const auto k = static_cast<std::size_t>((e.t_last_input - c.start_time) / 600);
    EXPECT_GE(k, 6u);
    EXPECT_LE(k, 13u);
    const auto ex = assemble_example(std::span(frames).subspan(k - 6, 7),
                                     {e.tile_row, e.tile_col, 8}, {}, frames[k + 6]);
    EXPECT_EQ(e.rainy, ex.rainy());
  }
}

TEST(Manifest, RoundTripAndHeader) {
  DatasetManifest m;
  m.split = "test";
  m.tile_size = 64;
  m.provenance.seed = 77;
  m.provenance.config_hash = "00000000deadbeef";
  m.entries = {{"a", 0, 64, 1527811200, true}, {"b-2", 128, 0, 1527814800, false}};
  std::stringstream s;
  write_manifest(m, s);
  const auto text = s.str();
  EXPECT_NE(text.find("# split=test"), std::string::npos);
  EXPECT_NE(text.find("# thresholds=0.1,1,2.5"), std::string::npos);
  EXPECT_NE(text.find(std::string("# channels=") + kChannelDescriptor), std::string::npos);
  EXPECT_NE(text.find("# seed=77"), std::string::npos);
  EXPECT_NE(text.find("sequence_id,tile_row,tile_col,t_last_input,rainy"), std::string::npos);
  EXPECT_EQ(read_manifest(s), m);
}

TEST(Manifest, MalformedRowsRejected) {
  std::istringstream in("# split=train\nsequence_id,tile_row,tile_col,t_last_input,rainy\na,0,0,x,1\n");
  EXPECT_THROW(read_manifest(in), Error);
  std::istringstream none("# split=train\n");
  EXPECT_THROW(read_manifest(none), FormatError);
}

TEST(FrameStore, WriteAndReloadSequences) {
  const auto root = std::filesystem::temp_directory_path() / "nowcast_store_test";
  std::filesystem::remove_all(root);
  SynthConfig c;
  c.height = c.width = 8;
  c.frame_count = 3;
  const auto frames = generate_sequence(c);
  write_sequences(root, {{"alpha", frames}}, Provenance{}, "synth.seed=0\n");
  const auto store = FrameStore::load(root);
  EXPECT_EQ(store.ids(), (std::vector<std::string>{"alpha"}));
  EXPECT_EQ(store.sequence("alpha"), frames);
  EXPECT_TRUE(store.has("alpha", frames[1].timestamp()));
  EXPECT_FALSE(store.has("alpha", frames[1].timestamp() + 1));
  EXPECT_THROW(store.frame("beta", 0), Error);
  std::filesystem::remove_all(root);
}

TEST(Oversampler, DegenerateTargets) {
  const auto e = mixed_entries(5, 5);
  const Oversampler all_rain(e, 1.0, 1), no_rain(e, 0.0, 1);
  for (auto i : all_rain.take(0, 500)) EXPECT_TRUE(e[i].rainy);
  for (auto i : no_rain.take(0, 500)) EXPECT_FALSE(e[i].rainy);
}

TEST(Oversampler, MissingStratumRejected) {
  EXPECT_THROW(Oversampler(mixed_entries(0, 5), 0.8, 1), InvalidArgument);
  EXPECT_THROW(Oversampler(mixed_entries(5, 0), 0.8, 1), InvalidArgument);
  EXPECT_NO_THROW(Oversampler(mixed_entries(5, 0), 1.0, 1));
  EXPECT_THROW(Oversampler(mixed_entries(5, 5), 1.5, 1), InvalidArgument);
}

TEST(Oversampler, RainyFractionWithinThreeSigma) {
  const auto e = mixed_entries(3, 50);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Oversampler s(e, 0.8, seed);
    std::size_t rainy = 0;
    for (auto i : s.take(0, 10000)) rainy += e[i].rainy;
    EXPECT_NEAR(rainy / 10000.0, 0.8, 0.012);
  }
}

TEST(Oversampler, UniformWithinStratumAndResumable) {
  const auto e = mixed_entries(4, 4);
  const Oversampler s(e, 0.5, 9);
  std::vector<int> counts(8, 0);
  const auto draws = s.take(0, 40000);
  for (auto i : draws) ++counts[i];
  for (int c : counts) EXPECT_NEAR(c / 40000.0, 1.0 / 8, 0.01);
  const auto tail = s.take(12345, 100);
  EXPECT_TRUE(std::equal(tail.begin(), tail.end(), draws.begin() + 12345));
  EXPECT_EQ(Oversampler(e, 0.5, 9).take(0, 100), s.take(0, 100));
  EXPECT_NE(Oversampler(e, 0.5, 10).take(0, 100), s.take(0, 100));
}

TEST(Split, YearsRoutedByRule) {
  DatasetManifest all;
  for (int y : {2017, 2018, 2019}) {
    const auto r = utc_year(y);
    for (int i = 0; i < 3; ++i) {
      all.entries.push_back({"y" + std::to_string(y), 0, 0, r.begin + 86400 * (10 + i), i % 2 == 0});
    }
  }
  const auto [train, test] = split(all, SplitRule::by_years({2018}, {}));
  EXPECT_EQ(train.entries.size(), 3u);
  EXPECT_EQ(test.entries.size(), 6u);
  for (const auto& e : train.entries) EXPECT_EQ(utc_year_of(e.t_last_input), 2018);
  for (const auto& e : test.entries) EXPECT_NE(utc_year_of(e.t_last_input), 2018);
  EXPECT_EQ(train.split, "train");
  EXPECT_EQ(test.split, "test");
}

TEST(Split, EmptyRulePutsEverythingInTrain) {
  DatasetManifest all;
  all.entries = mixed_entries(2, 2);
  const auto [train, test] = split(all, SplitRule{});
  EXPECT_EQ(train.entries, all.entries);
  EXPECT_TRUE(test.entries.empty());
}

TEST(Split, OverlappingRulesRejected) {
  SplitRule r;
  r.train_ranges = {{1000, 1001}};
  r.test_ranges = {{1000, 1001}};
  DatasetManifest all;
  EXPECT_THROW(split(all, r), InvalidArgument);
  EXPECT_THROW(split(all, SplitRule::by_sequences({"a", "b"}, {"b"})), InvalidArgument);
}

TEST(Split, NoFrameSharedAcrossSplit) {
  SynthConfig c;
  c.height = c.width = 8;
  c.frame_count = 40;
  const auto frames = generate_sequence(c);
  DatasetManifest all;
  all.tile_size = 8;
  all.entries = index_sequence("s", frames, 8, {});
  SplitRule r;
  const auto mid = frames[20].timestamp();
  r.train_ranges = {{0, mid}};
  r.test_ranges = {{mid, mid + 86400}};
  const auto [train, test] = split(all, r);
  EXPECT_FALSE(train.entries.empty());
  EXPECT_FALSE(test.entries.empty());
  std::set<std::int64_t> used;
  auto frames_of = [](const ManifestEntry& e) {
    std::vector<std::int64_t> ts{e.t_last_input + 3600};
    for (int k = 0; k < 7; ++k) ts.push_back(e.t_last_input - 600 * k);
    return ts;
  };
  for (const auto& e : train.entries) for (auto t : frames_of(e)) used.insert(t);
  for (const auto& e : test.entries) for (auto t : frames_of(e)) EXPECT_FALSE(used.contains(t));
}

TEST(Split, BySequenceId) {
  DatasetManifest all;
  all.entries = {{"a", 0, 0, 0, true}, {"b", 0, 0, 0, false}, {"c", 0, 0, 0, true}};
  const auto [train, test] = split(all, SplitRule::by_sequences({"a", "c"}, {"b"}));
  EXPECT_EQ(train.entries.size(), 2u);
  ASSERT_EQ(test.entries.size(), 1u);
  EXPECT_EQ(test.entries[0].sequence_id, "b");
}

TEST(TimeOfDay, Fractions) {
  EXPECT_DOUBLE_EQ(time_of_day_fraction(21600), 0.25);
  EXPECT_DOUBLE_EQ(time_of_day_fraction(1527811200), 0.0);
  EXPECT_DOUBLE_EQ(time_of_day_fraction(-21600), 0.75);
  EXPECT_EQ(utc_year_of(utc_year(2019).begin), 2019);
  EXPECT_EQ(utc_year_of(utc_year(2019).end - 1), 2019);
}
