#pragma once

// Device-side encode path and server-side decode path, plus the packet wire
// format.
//
// Packet layout (little-endian, fixed 32-byte header):
//   0  magic "TOCM"
//   4  version u8
//   5  mode u8               0 = hierarchical, 1 = temporal
//   6  device_id u16
//   8  timestamp u32
//   12 feature dims u16 x 3  (c, h, w)
//   18 hyper dims u16 x 3    (zero in temporal mode)
//   24 hyper substream length u32
//   28 feature substream length u32
//   32 hyper substream bytes, then feature substream bytes

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "tocom/diffcore.hpp"
#include "tocom/entropy_models.hpp"
#include "tocom/error.hpp"
#include "tocom/quantizer.hpp"

namespace tocom::pipeline {

inline constexpr std::uint8_t kPacketVersion = 1;
inline constexpr std::size_t kHeaderBytes = 32;

enum class PacketMode : std::uint8_t { hierarchical = 0, temporal = 1 };

class PacketError : public Error {
 public:
  enum class Kind { bad_magic, bad_version, unknown_mode, length_mismatch, truncated, missing_history,
                    unknown_device, shape_mismatch, out_of_order };
  PacketError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

using Dims3 = std::array<std::uint16_t, 3>;

struct EncodedPacket {
  std::uint8_t version = kPacketVersion;
  PacketMode mode = PacketMode::hierarchical;
  std::uint16_t device_id = 0;
  std::uint32_t timestamp = 0;
  Dims3 feature_dims{};
  Dims3 hyper_dims{};
  std::vector<std::uint8_t> hyper_stream;
  std::vector<std::uint8_t> feature_stream;

  std::size_t byte_size() const { return kHeaderBytes + hyper_stream.size() + feature_stream.size(); }
  friend bool operator==(const EncodedPacket&, const EncodedPacket&) = default;
};

std::vector<std::uint8_t> serialize_packet(const EncodedPacket& p);
// Parses exactly one packet from the front of `bytes`; `consumed` receives its size.
EncodedPacket parse_packet(std::span<const std::uint8_t> bytes, std::size_t* consumed = nullptr);

// "TOCS" | count u32 | packets back to back.
std::vector<std::uint8_t> write_stream_container(std::span<const EncodedPacket> packets);
std::vector<EncodedPacket> read_stream_container(std::span<const std::uint8_t> bytes);

struct RateMeasure {
  std::uint64_t total_bits = 0;
  std::uint64_t header_bits = 0;
  std::uint64_t payload_bits = 0;
};
RateMeasure measure_rate(std::span<const EncodedPacket> packets);

// Everything one device needs to code its features. The server holds an
// identical copy per device.
struct DeviceModels {
  diffcore::NetSpec extractor;
  diffcore::ParamStore extractor_params;
  entropy::HyperModel hyper;
  std::optional<entropy::TemporalModel> temporal;

  std::size_t temporal_order() const { return temporal ? temporal->order : 0; }
  Shape feature_shape() const { return extractor.output_shape(); }
};

enum class ModePolicy { automatic, hierarchical_only };

struct EncodeResult {
  EncodedPacket packet;
  QuantizedFeature zhat;
  double estimated_bits = 0.0;  // model cross-entropy of both substreams, no header
  Tensor bit_map;               // per-element feature bits, shaped like zhat
};

class DeviceEncoder {
 public:
  DeviceEncoder(std::uint16_t device_id, std::shared_ptr<const DeviceModels> models);

  // Extracts, quantizes and codes one frame. Temporal mode is used once
  // `temporal_order()` previous features are held. Throws PacketError
  // (out_of_order) when timestamps do not strictly increase.
  EncodeResult encode_frame(const Tensor& frame, std::uint32_t timestamp,
                            ModePolicy policy = ModePolicy::automatic);

  // Codes an already quantized feature (the extractor is bypassed).
  EncodeResult encode_feature(const Tensor& z, std::uint32_t timestamp, ModePolicy policy = ModePolicy::automatic);

  const std::deque<QuantizedFeature>& history() const { return history_; }
  std::uint16_t device_id() const { return device_id_; }

 private:
  std::uint16_t device_id_;
  std::shared_ptr<const DeviceModels> models_;
  std::deque<QuantizedFeature> history_;
  std::optional<std::uint32_t> last_timestamp_;
};

class ServerDecoder {
 public:
  void register_device(std::uint16_t device_id, std::shared_ptr<const DeviceModels> models);
  QuantizedFeature decode_frame(const EncodedPacket& packet);
  const std::deque<QuantizedFeature>& history(std::uint16_t device_id) const;

 private:
  struct Mirror {
    std::shared_ptr<const DeviceModels> models;
    std::deque<QuantizedFeature> history;
  };
  std::map<std::uint16_t, Mirror> devices_;
};

}  // namespace tocom::pipeline
