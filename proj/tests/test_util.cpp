#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "xferepi/csv.hpp"
#include "xferepi/hash.hpp"
#include "xferepi/parallel.hpp"
#include "xferepi/rng.hpp"

using namespace xferepi::util;

TEST(Hash, Fnv1aKnownValues) {
  // Reference digests of the 64-bit FNV-1a test vectors.
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ull);
}

TEST(Hash, ChainingMatchesConcatenation) {
  auto h1 = fnv1a64("hello world");
  auto h2 = fnv1a64(" world", fnv1a64("hello"));
  EXPECT_EQ(h1, h2);
}

TEST(Hash, FileHashMatchesInMemory) {
  auto path = std::filesystem::temp_directory_path() / "xferepi_hash_test.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "some,csv\n1,2\n";
  }
  EXPECT_EQ(fnv1a64_file(path.string()), fnv1a64("some,csv\n1,2\n"));
  std::filesystem::remove(path);
}

TEST(Rng, DeterministicStreams) {
  CounterRng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DerivedStreamsDifferByLabel) {
  std::set<std::uint64_t> seeds;
  for (const char* label : {"sim/source/train/0", "sim/source/train/1", "sim/source/test/0",
                            "train/rf_baseline/source/h2", "boost/round/3"})
    seeds.insert(derive_stream(7, label));
  EXPECT_EQ(seeds.size(), 5u);
  EXPECT_EQ(derive_stream(7, "x"), derive_stream(7, "x"));
  EXPECT_NE(derive_stream(7, "x"), derive_stream(8, "x"));
}

TEST(Rng, Uniform01Range) {
  CounterRng rng(1);
  double lo = 1.0, hi = 0.0, sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform01();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    sum += u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.005);
  EXPECT_LT(lo, 0.001);
  EXPECT_GT(hi, 0.999);
}

TEST(Rng, UniformBelowBoundsAndSpread) {
  CounterRng rng(3);
  std::vector<int> counts(10, 0);
  for (int i = 0; i < 100000; ++i) ++counts[rng.uniform_below(10)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
  EXPECT_THROW(rng.uniform_below(0), std::invalid_argument);
}

TEST(Rng, BinomialEdgeCases) {
  CounterRng rng(5);
  EXPECT_EQ(binomial(rng, 0, 0.5), 0);
  EXPECT_EQ(binomial(rng, 100, 0.0), 0);
  EXPECT_EQ(binomial(rng, 100, 1.0), 100);
  EXPECT_THROW(binomial(rng, -1, 0.5), std::invalid_argument);
  EXPECT_THROW(binomial(rng, 10, -0.1), std::invalid_argument);
  EXPECT_THROW(binomial(rng, 10, 1.1), std::invalid_argument);
}

// Sample moments against Binomial(n, p) for p on both sides of the 0.5
// symmetry split. Tolerances are 4 standard errors at fixed seeds.
TEST(Rng, BinomialMoments) {
  struct Case {
    std::int64_t n;
    double p;
  } cases[] = {{1000, 0.3}, {1000, 0.7}, {50, 0.02}, {12, 0.5}};
  for (auto [n, p] : cases) {
    CounterRng rng(derive_stream(11, "moments"));
    const int draws = 100000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < draws; ++i) {
      auto x = static_cast<double>(binomial(rng, n, p));
      ASSERT_GE(x, 0);
      ASSERT_LE(x, n);
      sum += x;
      sumsq += x * x;
    }
    double mean = sum / draws;
    double var = sumsq / draws - mean * mean;
    double true_mean = static_cast<double>(n) * p;
    double true_var = true_mean * (1 - p);
    EXPECT_NEAR(mean, true_mean, 4 * std::sqrt(true_var / draws)) << "n=" << n << " p=" << p;
    EXPECT_NEAR(var, true_var, 0.05 * true_var + 0.01) << "n=" << n << " p=" << p;
  }
}

TEST(Rng, BinomialTinyProbabilityNeitherHangsNorUnderflows) {
  CounterRng rng(9);
  std::int64_t hits = 0;
  for (int i = 0; i < 10000; ++i) hits += binomial(rng, 1000000, 1e-9);
  // Mean of the total is 10; even a generous band catches over/underflow bugs.
  EXPECT_GT(hits, 0);
  EXPECT_LT(hits, 60);
  // Sub-denormal rate must degrade to "no events", not loop or overflow.
  EXPECT_EQ(binomial(rng, 1000000000, 1e-300), 0);
}

TEST(Rng, TrinomialMarginalsAndBounds) {
  CounterRng rng(13);
  const std::int64_t n = 400;
  const double p1 = 0.2, p2 = 0.05;
  double sum1 = 0, sum2 = 0;
  const int draws = 50000;
  for (int i = 0; i < draws; ++i) {
    auto d = trinomial(rng, n, p1, p2);
    ASSERT_GE(d.first, 0);
    ASSERT_GE(d.second, 0);
    ASSERT_LE(d.first + d.second, n);
    sum1 += static_cast<double>(d.first);
    sum2 += static_cast<double>(d.second);
  }
  EXPECT_NEAR(sum1 / draws, n * p1, 4 * std::sqrt(n * p1 * (1 - p1) / draws));
  EXPECT_NEAR(sum2 / draws, n * p2, 4 * std::sqrt(n * p2 * (1 - p2) / draws));
  EXPECT_THROW(trinomial(rng, 10, 0.7, 0.7), std::invalid_argument);
}

TEST(Rng, WeightedSamplerFollowsWeights) {
  std::vector<double> w = {1.0, 0.0, 3.0};
  WeightedSampler sampler(w);
  CounterRng rng(17);
  std::vector<int> counts(3, 0);
  const int draws = 40000;
  for (int i = 0; i < draws; ++i) ++counts[sampler.sample(rng)];
  EXPECT_EQ(counts[1], 0);
  EXPECT_NEAR(counts[0], draws * 0.25, 300);
  EXPECT_NEAR(counts[2], draws * 0.75, 300);
  EXPECT_THROW(WeightedSampler(std::vector<double>{}), std::invalid_argument);
  EXPECT_THROW(WeightedSampler(std::vector<double>{0.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(WeightedSampler(std::vector<double>{1.0, -0.5}), std::invalid_argument);
}

TEST(Rng, ShuffleIsDeterministicPermutation) {
  std::vector<int> a{1, 2, 3, 4, 5, 6, 7, 8}, b = a, sorted = a;
  CounterRng r1(21), r2(21);
  shuffle(a, r1);
  shuffle(b, r2);
  EXPECT_EQ(a, b);
  std::sort(b.begin(), b.end());
  EXPECT_EQ(b, sorted);
}

TEST(Csv, DoubleFormattingRoundTrips) {
  for (double v : {0.0, 1.0, 0.1, 1e-9, 12345.6789, 2.0 / 3.0, 1e300}) {
    std::string s = format_double(v);
    EXPECT_EQ(parse_double(s, "t"), v) << s;
  }
  EXPECT_EQ(format_double(17.0), "17");
  EXPECT_EQ(format_int(-42), "-42");
}

TEST(Csv, ReaderReportsLineNumbers) {
  auto path = std::filesystem::temp_directory_path() / "xferepi_csv_test.csv";
  {
    std::ofstream out(path);
    out << "a,b\n\n1,2\nbad\n";
  }
  CsvReader in(path.string());
  std::vector<std::string_view> f;
  ASSERT_TRUE(in.next(f));
  EXPECT_EQ(f.size(), 2u);
  ASSERT_TRUE(in.next(f));  // blank line skipped
  EXPECT_EQ(in.line_number(), 3);
  ASSERT_TRUE(in.next(f));
  EXPECT_EQ(f.size(), 1u);
  EXPECT_NE(in.where().find(":4"), std::string::npos);
  std::filesystem::remove(path);
}

TEST(Parallel, CoversAllIndicesAndPropagatesErrors) {
  std::vector<int> hits(1000, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(
      parallel_for(8, 4, [&](std::size_t i) { if (i == 3) throw std::runtime_error("boom"); }),
      std::runtime_error);
}
