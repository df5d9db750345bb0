#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tocom/entropy_models.hpp"
#include "tocom/range_coder.hpp"

using namespace tocom;
using namespace tocom::rangecoder;

namespace {

double ideal_bits(const std::vector<std::int64_t>& xs, const std::vector<double>& mu, const std::vector<double>& sigma) {
  double bits = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) bits -= std::log2(entropy::gu_pmf(xs[i], mu[i], sigma[i]));
  return bits;
}

}  // namespace

TEST(Tables, FrequenciesSumExactlyAndArePositive) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> mu(-300, 300), ls(std::log(0.11), std::log(5000.0));
  for (int i = 0; i < 500; ++i) {
    const CdfTable t = build_table(mu(rng), std::exp(ls(rng)));
    std::uint64_t sum = 0;
    for (std::uint32_t f : t.freqs) {
      EXPECT_GE(f, 1u);
      sum += f;
    }
    EXPECT_EQ(sum, kTotalFreq);
    EXPECT_EQ(t.cum.back(), kTotalFreq);
    EXPECT_NO_THROW(validate_table(t));
  }
}

TEST(Tables, NarrowGaussianConcentratesOnCentre) {
  const CdfTable t = build_table(0.0, 0.11);
  EXPECT_GT(t.freqs[static_cast<std::size_t>(0 - t.offset)] / 65536.0, 0.999);
}

TEST(Tables, WindowWidth) {
  const CdfTable t = build_table(0.0, 1.0);
  EXPECT_EQ(t.size(), 33u);
  EXPECT_EQ(t.low_symbol(), -16);
  EXPECT_EQ(t.high_symbol(), 16);
  const CdfTable wide = build_table(2.6, 3.2);
  EXPECT_EQ(wide.size(), 2u * 26 + 1);
  EXPECT_EQ(wide.offset, 3 - 26);
  EXPECT_EQ(build_table(0.0, 1e6).size(), 2u * kMaxHalfWidth + 1);
}

TEST(Tables, SigmaBelowFloorRejected) { EXPECT_THROW(build_table(0.0, 0.05), Error); }

TEST(Tables, ValidateRejectsBrokenTables) {
  CdfTable t = build_table(0.0, 1.0);
  t.freqs[3] += 1;
  EXPECT_THROW(validate_table(t), Error);
}

TEST(Coder, EmptyStream) {
  const std::vector<CdfTable> tables;
  const Bitstream s = rc_encode(std::span<const std::int64_t>{}, tables);
  EXPECT_LE(s.bytes.size(), 8u);
  EXPECT_TRUE(rc_decode(s, tables, 0).empty());
}

TEST(Coder, SingleEscapeSymbol) {
  const std::vector<CdfTable> tables{build_table(0.0, 1.0)};
  for (std::int64_t v : {1000000LL, -1000000LL, 17LL, -17LL, 16LL}) {
    const std::vector<std::int64_t> xs{v};
    const Bitstream s = rc_encode(xs, tables);
    EXPECT_EQ(rc_decode(s, tables, 1), xs) << v;
  }
}

TEST(Coder, RandomRoundtrips) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> mu(-50, 50), ls(std::log(0.11), std::log(200.0));
  std::uniform_int_distribution<int> len(0, 200), kind(0, 9);
  std::uniform_int_distribution<std::int64_t> far(-1000000, 1000000);
  for (int c = 0; c < 10000; ++c) {
    const std::size_t n = static_cast<std::size_t>(len(rng));
    std::vector<CdfTable> tables;
    std::vector<std::int64_t> xs;
    for (std::size_t i = 0; i < n; ++i) {
      const double m = mu(rng), s = std::exp(ls(rng));
      tables.push_back(build_table(m, s));
      if (kind(rng) == 0) {
        xs.push_back(far(rng));
      } else {
        std::normal_distribution<double> g(m, s);
        xs.push_back(std::llround(g(rng)));
      }
    }
    const Bitstream s = rc_encode(xs, tables);
    ASSERT_EQ(rc_decode(s, tables, n), xs) << "case " << c;
  }
}

TEST(Coder, ProviderSeesPreviousSymbols) {
  // Each table is centred on the previous symbol, as a temporal model would be.
  std::mt19937_64 rng(3);
  std::vector<std::int64_t> xs(500);
  std::int64_t prev = 0;
  for (auto& x : xs) {
    std::normal_distribution<double> g(static_cast<double>(prev), 2.0);
    x = prev = std::llround(g(rng));
  }
  std::vector<std::int64_t> seen;
  CdfTable current;
  auto enc_provider = [&](std::size_t i) -> const CdfTable& {
    current = build_table(i == 0 ? 0.0 : static_cast<double>(xs[i - 1]), 2.0);
    return current;
  };
  const Bitstream s = rc_encode(xs, enc_provider);
  std::vector<std::int64_t> out;
  CdfTable dec_table;
  RangeDecoder dec(s.bytes);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    dec_table = build_table(i == 0 ? 0.0 : static_cast<double>(out.back()), 2.0);
    out.push_back(dec.decode_symbol(dec_table));
  }
  EXPECT_EQ(out, xs);
}

TEST(Coder, RateWithinBoundOfCrossEntropy) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> mu(-20, 20), ls(std::log(0.11), std::log(60.0));
  for (int stream = 0; stream < 20; ++stream) {
    const std::size_t n = 10000;
    std::vector<double> m(n), s(n);
    std::vector<std::int64_t> xs(n);
    std::vector<CdfTable> tables;
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = mu(rng);
      s[i] = std::exp(ls(rng));
      std::normal_distribution<double> g(m[i], s[i]);
      xs[i] = std::llround(g(rng));
      tables.push_back(build_table(m[i], s[i]));
    }
    const double ideal = ideal_bits(xs, m, s);
    const double measured = static_cast<double>(rc_encode(xs, tables).bit_length());
    EXPECT_LE(measured, ideal * 1.02 + 64) << "stream " << stream;
    EXPECT_GE(measured, ideal - 64) << "stream " << stream;
  }
}

TEST(Coder, NearDeterministicSymbolsAreAlmostFree) {
  const std::size_t n = 1000000;
  const std::vector<std::int64_t> xs(n, 3);
  const CdfTable t = build_table(3.0, 0.11);
  const Bitstream s = rc_encode(xs, [&](std::size_t) -> const CdfTable& { return t; });
  EXPECT_LT(static_cast<double>(s.bit_length()) / n, 0.001);
}

TEST(Coder, Deterministic) {
  std::vector<CdfTable> tables;
  std::vector<std::int64_t> xs;
  for (int i = 0; i < 100; ++i) {
    tables.push_back(build_table(i * 0.3, 1.0 + i * 0.1));
    xs.push_back(i % 7 - 3);
  }
  EXPECT_EQ(rc_encode(xs, tables), rc_encode(xs, tables));
}

TEST(Coder, TruncatedStreamRejected) {
  std::vector<CdfTable> tables(2000, build_table(0.0, 30.0));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 30.0);
  std::vector<std::int64_t> xs(2000);
  for (auto& x : xs) x = std::llround(g(rng));
  Bitstream s = rc_encode(xs, tables);
  s.bytes.resize(s.bytes.size() / 2);
  EXPECT_THROW(rc_decode(s, tables, xs.size()), DecodeError);
}

TEST(Coder, RawBitsRoundtrip) {
  RangeEncoder enc;
  enc.encode_bits(0x2bcdef0123456789ULL, 62);
  enc.encode_bits(1, 1);
  enc.encode_bits(0, 0);
  enc.encode_bits(0xFFFFFFFFFFFFFFFFULL, 64);
  const Bitstream s = enc.finish();
  RangeDecoder dec(s.bytes);
  EXPECT_EQ(dec.decode_bits(62), 0x2bcdef0123456789ULL);
  EXPECT_EQ(dec.decode_bits(1), 1u);
  EXPECT_EQ(dec.decode_bits(0), 0u);
  EXPECT_EQ(dec.decode_bits(64), 0xFFFFFFFFFFFFFFFFULL);
}
