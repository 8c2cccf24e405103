#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cvt/replay_memory.hpp"
#include "oracles.hpp"

using namespace cvt;

namespace {

std::vector<Sample> items(int n, int first_id = 0) {
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) out.push_back(Sample{{}, i % 10, first_id + i});
  return out;
}

std::set<int> ids_of(const std::vector<Sample>& v) {
  std::set<int> out;
  for (const auto& s : v) out.insert(s.id);
  return out;
}

}  // namespace

TEST(Reservoir, FillPhaseKeepsEverything) {
  MemoryBuffer buf(5, 1);
  const auto first = items(5);
  buf.reservoir_update(first);
  EXPECT_EQ(buf.size(), 5u);
  EXPECT_EQ(buf.seen_count(), 5u);
  EXPECT_TRUE(buf.items() == first);
}

TEST(Reservoir, ZeroCapacityStaysEmpty) {
  MemoryBuffer buf(0, 1);
  buf.reservoir_update(items(50));
  EXPECT_TRUE(buf.empty());
  EXPECT_EQ(buf.seen_count(), 50u);
  EXPECT_TRUE(buf.sample(10).empty());
}

TEST(Reservoir, SizeIsMinOfSeenAndCapacity) {
  MemoryBuffer buf(30, 2);
  const auto stream = items(100);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    buf.offer(stream[i]);
    EXPECT_EQ(buf.size(), std::min<std::size_t>(i + 1, 30));
  }
  EXPECT_EQ(ids_of(buf.items()).size(), 30u);  // no duplicates
}

TEST(Reservoir, UniformInclusionProbability) {
  // capacity 100, stream of 1000, 10,000 independent trials
  constexpr int kCapacity = 100, kStream = 1000, kTrials = 10000;
  const auto stream = items(kStream);
  std::vector<int> hits(kStream, 0);
  for (int trial = 0; trial < kTrials; ++trial) {
    MemoryBuffer buf(kCapacity, std::uint64_t(trial) * 7919 + 1);
    buf.reservoir_update(stream);
    for (const auto& s : buf.items()) ++hits[std::size_t(s.id)];
  }
  const double p = double(kCapacity) / kStream;
  const double sigma = std::sqrt(kTrials * p * (1 - p));
  // items at the start, the fill edge and the end of the stream each within 3 sigma
  for (int id : {0, 1, 99, 100, 101, 500, 998, 999}) {
    EXPECT_LE(std::abs(hits[std::size_t(id)] - kTrials * p), 3 * sigma) << "item " << id;
  }
  // every item within a family-wise 1% bound (Bonferroni over 1000 items)
  const double family = 4.42 * sigma;
  int within_3 = 0;
  for (int id = 0; id < kStream; ++id) {
    EXPECT_LE(std::abs(hits[std::size_t(id)] - kTrials * p), family) << "item " << id;
    within_3 += std::abs(hits[std::size_t(id)] - kTrials * p) <= 3 * sigma;
  }
  // about 99.7% of items fall within 3 sigma
  EXPECT_GE(within_3, 990);
}

TEST(MemorySample, EmptyAndExhaustive) {
  MemoryBuffer buf(20, 3);
  EXPECT_TRUE(buf.sample(5).empty());
  buf.reservoir_update(items(12));
  const auto all = buf.sample(50);
  EXPECT_EQ(all.size(), 12u);
  EXPECT_EQ(ids_of(all).size(), 12u);
  EXPECT_TRUE(buf.sample(0).empty());
}

TEST(MemorySample, WithoutReplacement) {
  MemoryBuffer buf(40, 4);
  buf.reservoir_update(items(40));
  for (int i = 0; i < 100; ++i) EXPECT_EQ(ids_of(buf.sample(10)).size(), 10u);
}

TEST(MemorySample, UniformOverStoredItems) {
  MemoryBuffer buf(10, 5);
  buf.reservoir_update(items(10));
  constexpr int kDraws = 10000;
  std::vector<int> hits(10, 0);
  for (int i = 0; i < kDraws; ++i) ++hits[std::size_t(buf.sample(1).at(0).id)];
  const double sigma = std::sqrt(kDraws * 0.1 * 0.9);
  for (int h : hits) EXPECT_LE(std::abs(h - kDraws * 0.1), 3 * sigma);
}

TEST(Reservoir, DeterministicForSeed) {
  MemoryBuffer a(25, 9), b(25, 9), c(25, 10);
  const auto stream = items(300);
  a.reservoir_update(stream);
  b.reservoir_update(stream);
  c.reservoir_update(stream);
  EXPECT_TRUE(a.items() == b.items());
  EXPECT_FALSE(a.items() == c.items());
  EXPECT_TRUE(a.sample(7) == b.sample(7));
}

TEST(Reservoir, RestoreResumesExactly) {
  MemoryBuffer a(25, 9);
  a.reservoir_update(items(100));
  MemoryBuffer b(25, 0);
  b.restore(a.items(), a.seen_count(), a.rng_state());
  const auto more = items(100, 100);
  a.reservoir_update(more);
  b.reservoir_update(more);
  EXPECT_TRUE(a.items() == b.items());
  EXPECT_EQ(a.seen_count(), b.seen_count());
  MemoryBuffer small(3, 0);
  EXPECT_THROW(small.restore(items(4), 4, a.rng_state()), StructuralError);
  EXPECT_THROW(b.restore(items(4), 4, "garbage"), StructuralError);
}
