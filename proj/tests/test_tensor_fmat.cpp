#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <set>

#include "hilcbm/fmat.hpp"
#include "hilcbm/rng.hpp"
#include "hilcbm/tensor.hpp"
#include "hilcbm/text.hpp"
#include "support.hpp"

using namespace hilcbm;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::invalid_argument;
}

// Header bytes assembled by hand, independent of the encoder.
std::string header(std::uint32_t version, std::uint8_t dtype, std::vector<std::uint64_t> dims) {
  std::string s = "FMAT";
  auto put = [&s](const void* p, std::size_t n) { s.append(static_cast<const char*>(p), n); };
  static_assert(std::endian::native == std::endian::little);
  put(&version, 4);
  put(&dtype, 1);
  const auto rank = static_cast<std::uint32_t>(dims.size());
  put(&rank, 4);
  for (auto d : dims) put(&d, 8);
  return s;
}

std::string payload64(std::vector<double> v) {
  std::string s(v.size() * 8, '\0');
  std::memcpy(s.data(), v.data(), s.size());
  return s;
}

}  // namespace

TEST(Fmat, RoundTrips2x3Float64) {
  Tensor t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  const auto dir = fixtures::scratch_dir("fmat_rt");
  fmat::write(t, dir / "t.fmat");
  const Tensor back = fmat::read(dir / "t.fmat");
  EXPECT_EQ(back, t);
  EXPECT_EQ(back.dtype(), DType::float64);
}

TEST(Fmat, EmptyTensorRoundTrips) {
  Tensor t(Shape{0, 5});
  const Tensor back = fmat::decode(fmat::encode(t));
  EXPECT_EQ(back.shape(), (Shape{0, 5}));
  EXPECT_EQ(back.size(), 0u);
}

TEST(Fmat, EncoderMatchesHandBuiltBytes) {
  Tensor t(Shape{2, 2}, {1.5, -2.0, 0.0, 1e-300});
  EXPECT_EQ(fmat::encode(t), header(1, 2, {2, 2}) + payload64({1.5, -2.0, 0.0, 1e-300}));
  Tensor f(Shape{1}, {0.25}, DType::float32);
  float q = 0.25f;
  std::string expected = header(1, 1, {1});
  expected.append(reinterpret_cast<const char*>(&q), 4);
  EXPECT_EQ(fmat::encode(f), expected);
}

TEST(Fmat, HeaderClaimingMoreValuesThanPayloadIsShapeMismatch) {
  const std::string bytes = header(1, 2, {4}) + payload64({1, 2, 3});
  EXPECT_EQ(kind_of([&] { fmat::decode(bytes); }), ErrorKind::shape_mismatch);
  EXPECT_EQ(kind_of([&] { fmat::decode(bytes + "x"); }), ErrorKind::shape_mismatch);
  EXPECT_EQ(kind_of([&] { fmat::decode(header(1, 2, {2}) + payload64({1, 2, 3})); }), ErrorKind::shape_mismatch);
}

TEST(Fmat, CorruptionsRaiseDistinctErrors) {
  std::string good = header(1, 2, {1}) + payload64({1.0});
  std::string magic = good;
  magic[0] = 'X';
  EXPECT_EQ(kind_of([&] { fmat::decode(magic); }), ErrorKind::format);
  EXPECT_EQ(kind_of([&] { fmat::decode(header(2, 2, {1}) + payload64({1.0})); }), ErrorKind::version);
  EXPECT_EQ(kind_of([&] { fmat::decode(header(1, 2, {1}) + payload64({std::nan("")})); }), ErrorKind::non_finite);
  EXPECT_EQ(kind_of([&] { fmat::decode(header(1, 2, {1}) + payload64({INFINITY})); }), ErrorKind::non_finite);
  EXPECT_EQ(kind_of([&] { fmat::decode(header(1, 7, {1}) + payload64({1.0})); }), ErrorKind::format);
  EXPECT_EQ(kind_of([&] { fmat::decode(good.substr(0, 10)); }), ErrorKind::format);
  EXPECT_EQ(kind_of([&] { fmat::read("/nonexistent/dir/x.fmat"); }), ErrorKind::io);
  EXPECT_EQ(kind_of([&] { fmat::encode(Tensor(Shape{1}, {NAN})); }), ErrorKind::non_finite);
}

TEST(Fmat, Float32IsValueExact) {
  CounterRng rng(3);
  Tensor t(Shape{7, 3});
  for (double& v : t.values()) v = rng.normal() * 1e3;
  const Tensor f = t.as(DType::float32);
  const Tensor back = fmat::decode(fmat::encode(f));
  EXPECT_EQ(back, f);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(back[i], static_cast<double>(static_cast<float>(t[i])));
}

TEST(Fmat, RandomFloat64TensorsRoundTripBitExactly) {
  CounterRng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Shape s(1 + rng.index(4));
    for (auto& d : s) d = rng.index(5);
    Tensor t(s);
    for (double& v : t.values()) {
      // Arbitrary finite bit patterns, not just "nice" numbers.
      double x;
      do x = std::bit_cast<double>(rng.next_u64());
      while (!std::isfinite(x));
      v = x;
    }
    const Tensor back = fmat::decode(fmat::encode(t));
    ASSERT_EQ(back.shape(), t.shape());
    for (std::size_t i = 0; i < t.size(); ++i)
      ASSERT_EQ(std::bit_cast<std::uint64_t>(back[i]), std::bit_cast<std::uint64_t>(t[i]));
  }
}

TEST(Tensor, ShapeAndPayloadMustAgree) {
  EXPECT_EQ(kind_of([] { Tensor(Shape{2, 2}, {1, 2, 3}); }), ErrorKind::shape_mismatch);
  Tensor t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t(1, 2), 6);
  EXPECT_EQ(t.row(1)[0], 4);
  EXPECT_EQ(shape_string(t.shape()), "[2x3]");
}

TEST(Tensor, MatmulTransposedMatchesInnerProductOracle) {
  CounterRng rng(5);
  Tensor x(Shape{4, 7}), w(Shape{3, 7});
  for (double& v : x.values()) v = rng.normal();
  for (double& v : w.values()) v = rng.normal();
  const Tensor out = matmul_transposed(x, w);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t r = 0; r < 3; ++r)
      EXPECT_NEAR(out(i, r), std::inner_product(x.row(i).begin(), x.row(i).end(), w.row(r).begin(), 0.0), 1e-12);
  EXPECT_THROW(matmul_transposed(x, Tensor(Shape{3, 6})), Error);
}

TEST(Tensor, PoolFeaturesAveragesSpatialCells) {
  Tensor f(Shape{1, 2, 2, 2}, {1, 10, 2, 20, 3, 30, 4, 40});
  const Tensor p = pool_features(f);
  EXPECT_EQ(p.shape(), (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(p(0, 0), 2.5);
  EXPECT_DOUBLE_EQ(p(0, 1), 25.0);
  const Tensor flat(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(pool_features(flat), flat);
}

TEST(Tensor, GatherRowsAndColumns) {
  const Tensor t(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
  const std::vector<std::size_t> rows{2, 0};
  EXPECT_EQ(gather_rows(t, rows), Tensor(Shape{2, 2}, {5, 6, 1, 2}));
  const std::vector<std::size_t> cols{1};
  EXPECT_EQ(gather_columns(t, cols), Tensor(Shape{3, 1}, {2, 4, 6}));
}

TEST(Rng, SameSeedSameStreamSameSequence) {
  CounterRng a(42, 1), b(42, 1), c(42, 2), d(43, 1);
  bool differs_stream = false, differs_seed = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs_stream |= x != c.next_u64();
    differs_seed |= x != d.next_u64();
  }
  EXPECT_TRUE(differs_stream);
  EXPECT_TRUE(differs_seed);
}

TEST(Rng, KnownFirstOutputsArePinned) {
  // Pinned so that any platform reproduces the synthetic fixtures.
  CounterRng r(7, 0);
  const std::uint64_t key = CounterRng::mix(7ULL ^ CounterRng::mix(0x632BE59BD9B4E019ULL));
  EXPECT_EQ(r.next_u64(), CounterRng::mix(key + 0x9E3779B97F4A7C15ULL));
  EXPECT_EQ(r.next_u64(), CounterRng::mix(key + 2 * 0x9E3779B97F4A7C15ULL));
  // First output of the reference SplitMix64 generator seeded with 0.
  EXPECT_EQ(CounterRng::mix(0), 0u);
  EXPECT_EQ(CounterRng::mix(0x9E3779B97F4A7C15ULL), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, UniformAndNormalMoments) {
  CounterRng r(9);
  double su = 0, sn = 0, sn2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, PermutationAndBatchSamplerCoverEveryIndex) {
  CounterRng r(1);
  for (std::size_t n : {1u, 2u, 17u, 100u}) {
    auto p = permutation(n, r);
    std::sort(p.begin(), p.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(p[i], i);
  }
  BatchSampler s(10, 5, 3);
  std::multiset<std::size_t> seen;
  for (int b = 0; b < 2; ++b)
    for (auto i : s.next()) seen.insert(i);
  EXPECT_EQ(seen.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(Text, FormatDoubleRoundTrips) {
  CounterRng r(2);
  for (int i = 0; i < 1000; ++i) {
    const double v = r.normal() * std::pow(10.0, static_cast<double>(r.index(40)) - 20.0);
    EXPECT_EQ(text::parse_double(text::format_double(v)), v);
  }
  EXPECT_EQ(text::format_double(0.7), "0.7");
  EXPECT_THROW(text::parse_double("0.7x"), Error);
  EXPECT_THROW(text::parse_int<int>(""), Error);
}

TEST(Text, KeyValueFileKeepsOrderAndRepeats) {
  const auto kv = text::KeyValueFile::parse({"# c", "a = 1", "", "b=two words", "a = 3"}, "t");
  EXPECT_EQ(kv.get("b"), "two words");
  EXPECT_EQ(kv.all("a"), (std::vector<std::string>{"1", "3"}));
  EXPECT_EQ(kv.render(), "a = 1\nb = two words\na = 3\n");
  EXPECT_THROW(kv.get("zzz"), Error);
  EXPECT_THROW(text::KeyValueFile::parse({"novalue"}, "t"), Error);
}

TEST(Text, EditDistanceKnownValues) {
  EXPECT_EQ(text::edit_distance("kitten", "sitting"), 3u);
  EXPECT_EQ(text::edit_distance("", "abc"), 3u);
  EXPECT_EQ(text::edit_distance("same", "same"), 0u);
}
