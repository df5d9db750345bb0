#include "tocom/range_coder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

namespace tocom::rangecoder {

namespace {

constexpr std::uint32_t kTop = 1u << 24;
constexpr std::uint32_t kBot = 1u << 16;

}  // namespace

CdfTable build_table(double mu, double sigma) {
  if (!(sigma >= entropy::kSigmaMin)) throw NumericError("build_table: sigma below floor");
  if (!std::isfinite(mu)) throw NumericError("build_table: non-finite mean");
  const std::int64_t centre = std::llround(mu);
  const std::int64_t half = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::ceil(8.0 * sigma)),
                                                     kMinHalfWidth, kMaxHalfWidth);
  const std::size_t n = static_cast<std::size_t>(2 * half + 1);

  CdfTable t;
  t.offset = centre - half;
  std::vector<double> mass(n);
  for (std::size_t i = 0; i < n; ++i) {
    mass[i] = entropy::gu_pmf(t.offset + static_cast<std::int64_t>(i), mu, sigma);
  }
  // Boundary symbols absorb the tails.
  mass.front() = entropy::std_normal_cdf((static_cast<double>(t.offset) + 0.5 - mu) / sigma);
  mass.back() = entropy::std_normal_cdf(-(static_cast<double>(t.high_symbol()) - 0.5 - mu) / sigma);

  t.freqs.resize(n);
  std::int64_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = static_cast<std::int64_t>(std::floor(mass[i] * kTotalFreq));
    t.freqs[i] = static_cast<std::uint32_t>(std::max<std::int64_t>(1, f));
    total += t.freqs[i];
  }
  const std::size_t peak = static_cast<std::size_t>(
      std::max_element(t.freqs.begin(), t.freqs.end()) - t.freqs.begin());
  std::int64_t diff = static_cast<std::int64_t>(kTotalFreq) - total;
  if (diff >= 0 || static_cast<std::int64_t>(t.freqs[peak]) + diff >= 1) {
    t.freqs[peak] = static_cast<std::uint32_t>(static_cast<std::int64_t>(t.freqs[peak]) + diff);
  } else {
    // Surplus larger than the peak can absorb: take from the largest entries.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return t.freqs[a] > t.freqs[b]; });
    for (std::size_t idx : order) {
      if (diff == 0) break;
      const std::int64_t take = std::min<std::int64_t>(-diff, static_cast<std::int64_t>(t.freqs[idx]) - 1);
      t.freqs[idx] -= static_cast<std::uint32_t>(take);
      diff += take;
    }
    if (diff != 0) throw NumericError("build_table: window too wide for frequency precision");
  }
  t.peak = static_cast<std::size_t>(std::max_element(t.freqs.begin(), t.freqs.end()) - t.freqs.begin());
  t.cum.resize(n + 1);
  t.cum[0] = 0;
  for (std::size_t i = 0; i < n; ++i) t.cum[i + 1] = t.cum[i] + t.freqs[i];
  return t;
}

std::vector<CdfTable> build_coding_tables(const entropy::GaussianParams& params) {
  if (params.mu.shape != params.sigma.shape) throw ShapeError("build_coding_tables: mu/sigma shape mismatch");
  std::vector<CdfTable> tables;
  tables.reserve(params.mu.size());
  for (std::size_t i = 0; i < params.mu.size(); ++i) tables.push_back(build_table(params.mu[i], params.sigma[i]));
  return tables;
}

void validate_table(const CdfTable& table) {
  if (table.freqs.empty() || table.cum.size() != table.freqs.size() + 1) throw Error("cdf table: bad sizes");
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < table.freqs.size(); ++i) {
    if (table.freqs[i] < 1) throw Error("cdf table: zero frequency");
    if (table.cum[i] != sum) throw Error("cdf table: cumulative mismatch");
    sum += table.freqs[i];
  }
  if (sum != kTotalFreq || table.cum.back() != kTotalFreq) throw Error("cdf table: total is not 2^16");
  if (table.peak >= table.freqs.size()) throw Error("cdf table: peak out of range");
}

namespace {

// Offset of cumulative boundary i within the current range. Boundaries up to
// the peak are measured from the bottom, the rest from the top, so the
// truncation slack of range / 2^16 lands on the most probable symbol.
std::uint32_t boundary(const CdfTable& t, std::size_t i, std::uint32_t range, std::uint32_t r) {
  return i <= t.peak ? r * t.cum[i] : range - r * (kTotalFreq - t.cum[i]);
}

}  // namespace

void RangeEncoder::encode(std::uint32_t cum, std::uint32_t freq, unsigned total_bits) {
  range_ >>= total_bits;
  low_ += cum * range_;
  range_ *= freq;
  normalize();
}

void RangeEncoder::normalize() {
  while ((low_ ^ (low_ + range_)) < kTop || (range_ < kBot && ((range_ = (0u - low_) & (kBot - 1)), true))) {
    out_.push_back(static_cast<std::uint8_t>(low_ >> 24));
    low_ <<= 8;
    range_ <<= 8;
  }
}

void RangeEncoder::encode_bits(std::uint64_t value, unsigned nbits) {
  while (nbits > 0) {
    const unsigned chunk = std::min(nbits, kPrecisionBits);
    nbits -= chunk;
    const auto part = static_cast<std::uint32_t>((value >> nbits) & ((1ull << chunk) - 1));
    encode(part, 1, chunk);
  }
}

void RangeEncoder::exp_golomb(std::uint64_t magnitude) {
  const std::uint64_t x = magnitude + 1;
  const unsigned len = static_cast<unsigned>(std::bit_width(x)) - 1;
  // Unary prefix one bit at a time, mirroring the decoder.
  for (unsigned i = 0; i < len; ++i) encode_bits(0, 1);
  encode_bits(1, 1);
  encode_bits(x & ((1ull << len) - 1), len);
}

void RangeEncoder::encode_symbol(std::int64_t symbol, const CdfTable& t) {
  const std::int64_t lo = t.low_symbol();
  const std::int64_t hi = t.high_symbol();
  if (symbol <= lo) {
    code_index(t, 0);
    exp_golomb(static_cast<std::uint64_t>(lo - symbol));
  } else if (symbol >= hi) {
    code_index(t, t.size() - 1);
    exp_golomb(static_cast<std::uint64_t>(symbol - hi));
  } else {
    code_index(t, static_cast<std::size_t>(symbol - lo));
  }
}

void RangeEncoder::code_index(const CdfTable& t, std::size_t idx) {
  const std::uint32_t r = range_ >> kPrecisionBits;
  const std::uint32_t a = boundary(t, idx, range_, r);
  const std::uint32_t b = boundary(t, idx + 1, range_, r);
  low_ += a;
  range_ = b - a;
  normalize();
}

Bitstream RangeEncoder::finish() {
  for (int i = 0; i < 4; ++i) {
    out_.push_back(static_cast<std::uint8_t>(low_ >> 24));
    low_ <<= 8;
  }
  Bitstream b{std::move(out_)};
  out_.clear();
  low_ = 0;
  range_ = 0xFFFFFFFFu;
  return b;
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : in_(bytes) {
  for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  if (pos_ >= in_.size()) throw DecodeError("truncated stream");
  return in_[pos_++];
}

std::uint32_t RangeDecoder::decode_freq(unsigned total_bits) {
  range_ >>= total_bits;
  const std::uint32_t value = (code_ - low_) / range_;
  if (value >> total_bits) throw DecodeError("corrupt stream");
  return value;
}

void RangeDecoder::consume(std::uint32_t cum, std::uint32_t freq) {
  low_ += cum * range_;
  range_ *= freq;
  normalize();
}

void RangeDecoder::normalize() {
  while ((low_ ^ (low_ + range_)) < kTop || (range_ < kBot && ((range_ = (0u - low_) & (kBot - 1)), true))) {
    code_ = (code_ << 8) | next_byte();
    low_ <<= 8;
    range_ <<= 8;
  }
}

std::uint64_t RangeDecoder::decode_bits(unsigned nbits) {
  std::uint64_t value = 0;
  while (nbits > 0) {
    const unsigned chunk = std::min(nbits, kPrecisionBits);
    nbits -= chunk;
    const std::uint32_t part = decode_freq(chunk);
    consume(part, 1);
    value = (value << chunk) | part;
  }
  return value;
}

std::uint64_t RangeDecoder::exp_golomb() {
  unsigned len = 0;
  while (decode_bits(1) == 0) {
    if (++len > 62) throw DecodeError("corrupt stream: escape prefix too long");
  }
  const std::uint64_t rest = decode_bits(len);
  return ((1ull << len) | rest) - 1;
}

std::int64_t RangeDecoder::decode_symbol(const CdfTable& t) {
  const std::uint32_t r = range_ >> kPrecisionBits;
  const std::uint32_t v = code_ - low_;
  if (v >= range_) throw DecodeError("corrupt stream");
  std::size_t idx = t.peak;
  if (v < r * t.cum[t.peak]) {
    const auto it = std::upper_bound(t.cum.begin(), t.cum.end(), v / r);
    idx = static_cast<std::size_t>(it - t.cum.begin()) - 1;
  } else if (v >= boundary(t, t.peak + 1, range_, r)) {
    const std::uint32_t q = (range_ - v - 1) / r;
    const auto it = std::lower_bound(t.cum.begin(), t.cum.end(), kTotalFreq - q);
    idx = static_cast<std::size_t>(it - t.cum.begin()) - 1;
  }
  if (idx >= t.size()) throw DecodeError("corrupt stream: symbol out of table");
  const std::uint32_t a = boundary(t, idx, range_, r);
  const std::uint32_t b = boundary(t, idx + 1, range_, r);
  low_ += a;
  range_ = b - a;
  normalize();
  if (idx == 0) return t.low_symbol() - static_cast<std::int64_t>(exp_golomb());
  if (idx == t.size() - 1) return t.high_symbol() + static_cast<std::int64_t>(exp_golomb());
  return t.low_symbol() + static_cast<std::int64_t>(idx);
}

Bitstream rc_encode(std::span<const std::int64_t> symbols, const TableProvider& tables) {
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode_symbol(symbols[i], tables(i));
  return enc.finish();
}

std::vector<std::int64_t> rc_decode(const Bitstream& stream, const TableProvider& tables, std::size_t n) {
  if (n == 0) return {};
  RangeDecoder dec(stream.bytes);
  std::vector<std::int64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = dec.decode_symbol(tables(i));
  return out;
}

Bitstream rc_encode(std::span<const std::int64_t> symbols, std::span<const CdfTable> tables) {
  if (tables.size() < symbols.size()) throw Error("rc_encode: fewer tables than symbols");
  return rc_encode(symbols, TableProvider([&](std::size_t i) -> const CdfTable& { return tables[i]; }));
}

std::vector<std::int64_t> rc_decode(const Bitstream& stream, std::span<const CdfTable> tables, std::size_t n) {
  if (tables.size() < n) throw Error("rc_decode: fewer tables than symbols");
  return rc_decode(stream, TableProvider([&](std::size_t i) -> const CdfTable& { return tables[i]; }), n);
}

}  // namespace tocom::rangecoder
