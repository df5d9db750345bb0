#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tocom/entropy_models.hpp"
#include "tocom/error.hpp"

namespace tocom::rangecoder {

inline constexpr unsigned kPrecisionBits = 16;
inline constexpr std::uint32_t kTotalFreq = 1u << kPrecisionBits;
inline constexpr std::int64_t kMinHalfWidth = 16;
inline constexpr std::int64_t kMaxHalfWidth = 4096;

class DecodeError : public Error {
 public:
  using Error::Error;
};

// Quantized distribution over the window [offset, offset + freqs.size()).
// The two boundary symbols also carry the tail mass beyond the window and act
// as escapes: an out-of-window value is coded as the boundary symbol followed
// by its distance from that boundary in Exp-Golomb (k=0) bypass bits.
struct CdfTable {
  std::int64_t offset = 0;
  std::vector<std::uint32_t> freqs;  // sum == kTotalFreq, each >= 1
  std::vector<std::uint32_t> cum;    // cum[i] = sum(freqs[0..i)), size freqs.size() + 1
  std::size_t peak = 0;              // most probable index; receives the coder's rounding slack
  bool escape_low = true;
  bool escape_high = true;

  std::size_t size() const { return freqs.size(); }
  std::int64_t low_symbol() const { return offset; }
  std::int64_t high_symbol() const { return offset + static_cast<std::int64_t>(freqs.size()) - 1; }
};

// Window centre round(mu), half-width max(16, ceil(8 sigma)) (capped at 4096).
CdfTable build_table(double mu, double sigma);
std::vector<CdfTable> build_coding_tables(const entropy::GaussianParams& params);

// Throws if the table violates its invariants.
void validate_table(const CdfTable& table);

struct Bitstream {
  std::vector<std::uint8_t> bytes;
  std::size_t bit_length() const { return 8 * bytes.size(); }
  friend bool operator==(const Bitstream&, const Bitstream&) = default;
};

// Carry-less 32-bit range coder (bytes emitted most significant first).
class RangeEncoder {
 public:
  void encode(std::uint32_t cum, std::uint32_t freq, unsigned total_bits);
  // Raw bits, most significant first. nbits <= 64.
  void encode_bits(std::uint64_t value, unsigned nbits);
  void encode_symbol(std::int64_t symbol, const CdfTable& table);
  Bitstream finish();

 private:
  void exp_golomb(std::uint64_t magnitude);
  void code_index(const CdfTable& t, std::size_t idx);
  void normalize();

  std::uint32_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);

  std::uint32_t decode_freq(unsigned total_bits);
  void consume(std::uint32_t cum, std::uint32_t freq);
  std::uint64_t decode_bits(unsigned nbits);
  std::int64_t decode_symbol(const CdfTable& table);

 private:
  std::uint8_t next_byte();
  void normalize();
  std::uint64_t exp_golomb();

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::uint32_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint32_t code_ = 0;
};

// Yields the table for symbol i; called in index order, before symbol i is
// coded, so tables may depend on previously coded symbols.
using TableProvider = std::function<const CdfTable&(std::size_t)>;

Bitstream rc_encode(std::span<const std::int64_t> symbols, const TableProvider& tables);
std::vector<std::int64_t> rc_decode(const Bitstream& stream, const TableProvider& tables, std::size_t n);

// Convenience overloads over a precomputed table list.
Bitstream rc_encode(std::span<const std::int64_t> symbols, std::span<const CdfTable> tables);
std::vector<std::int64_t> rc_decode(const Bitstream& stream, std::span<const CdfTable> tables, std::size_t n);

}  // namespace tocom::rangecoder
