#include "tocom/pipeline.hpp"

#include <limits>

#include "tocom/bytes.hpp"
#include "tocom/range_coder.hpp"

namespace tocom::pipeline {

namespace {

using Kind = PacketError::Kind;

Dims3 to_dims(const Shape& s) {
  if (s.size() != 3) throw ShapeError("packet dims need a rank-3 shape, got " + shape_str(s));
  Dims3 d{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (s[i] > std::numeric_limits<std::uint16_t>::max()) throw ShapeError("dimension exceeds u16");
    d[i] = static_cast<std::uint16_t>(s[i]);
  }
  return d;
}

std::vector<std::int64_t> widen(const QuantizedFeature& q) { return {q.values.begin(), q.values.end()}; }

QuantizedFeature narrow(const std::vector<std::int64_t>& v, Shape shape, std::uint16_t device,
                        std::uint32_t timestamp) {
  QuantizedFeature q;
  q.shape = std::move(shape);
  q.device_id = device;
  q.timestamp = timestamp;
  q.values.reserve(v.size());
  for (auto x : v) {
    if (x < std::numeric_limits<std::int32_t>::min() || x > std::numeric_limits<std::int32_t>::max()) {
      throw rangecoder::DecodeError("decoded symbol outside int32 range");
    }
    q.values.push_back(static_cast<std::int32_t>(x));
  }
  return q;
}

std::vector<std::uint8_t> code(const QuantizedFeature& q, const entropy::GaussianParams& params) {
  const auto tables = rangecoder::build_coding_tables(params);
  const auto symbols = widen(q);
  return rangecoder::rc_encode(symbols, tables).bytes;
}

std::vector<std::int64_t> decode(std::span<const std::uint8_t> bytes, const entropy::GaussianParams& params) {
  const auto tables = rangecoder::build_coding_tables(params);
  rangecoder::Bitstream stream{{bytes.begin(), bytes.end()}};
  return rangecoder::rc_decode(stream, tables, tables.size());
}

void push_history(std::deque<QuantizedFeature>& history, QuantizedFeature q, std::size_t order) {
  if (order == 0) return;
  history.push_back(std::move(q));
  while (history.size() > order) history.pop_front();
}

}  // namespace

std::vector<std::uint8_t> serialize_packet(const EncodedPacket& p) {
  if (p.mode == PacketMode::temporal && !p.hyper_stream.empty()) {
    throw PacketError(Kind::length_mismatch, "temporal packet carries a hyper substream");
  }
  ByteWriter w;
  w.tag("TOCM");
  w.u8(p.version);
  w.u8(static_cast<std::uint8_t>(p.mode));
  w.u16(p.device_id);
  w.u32(p.timestamp);
  for (auto d : p.feature_dims) w.u16(d);
  for (auto d : p.hyper_dims) w.u16(d);
  w.u32(static_cast<std::uint32_t>(p.hyper_stream.size()));
  w.u32(static_cast<std::uint32_t>(p.feature_stream.size()));
  w.bytes(p.hyper_stream);
  w.bytes(p.feature_stream);
  return w.take();
}

EncodedPacket parse_packet(std::span<const std::uint8_t> bytes, std::size_t* consumed) {
  if (bytes.size() < kHeaderBytes) {
    throw PacketError(Kind::truncated, "truncated header: expected " + std::to_string(kHeaderBytes) +
                                           " bytes, got " + std::to_string(bytes.size()));
  }
  ByteReader r(bytes);
  if (r.str(4) != "TOCM") throw PacketError(Kind::bad_magic, "bad magic");
  EncodedPacket p;
  p.version = r.u8();
  if (p.version != kPacketVersion) {
    throw PacketError(Kind::bad_version, "unsupported version " + std::to_string(p.version));
  }
  const auto mode = r.u8();
  if (mode > 1) throw PacketError(Kind::unknown_mode, "unknown mode " + std::to_string(mode));
  p.mode = static_cast<PacketMode>(mode);
  p.device_id = r.u16();
  p.timestamp = r.u32();
  for (auto& d : p.feature_dims) d = r.u16();
  for (auto& d : p.hyper_dims) d = r.u16();
  const std::uint64_t hyper_len = r.u32();
  const std::uint64_t feature_len = r.u32();
  if (p.mode == PacketMode::temporal && (hyper_len != 0 || p.hyper_dims != Dims3{})) {
    throw PacketError(Kind::length_mismatch, "temporal packet declares a hyper substream");
  }
  const std::uint64_t expected = hyper_len + feature_len;
  if (r.remaining() < expected) {
    throw PacketError(Kind::truncated, "truncated payload: expected " + std::to_string(expected) +
                                           " bytes, got " + std::to_string(r.remaining()));
  }
  auto h = r.bytes(hyper_len);
  auto f = r.bytes(feature_len);
  p.hyper_stream.assign(h.begin(), h.end());
  p.feature_stream.assign(f.begin(), f.end());
  if (consumed != nullptr) {
    *consumed = r.position();
  } else if (r.remaining() != 0) {
    throw PacketError(Kind::length_mismatch, "declared lengths leave " + std::to_string(r.remaining()) +
                                                 " trailing bytes");
  }
  return p;
}

std::vector<std::uint8_t> write_stream_container(std::span<const EncodedPacket> packets) {
  ByteWriter w;
  w.tag("TOCS");
  w.u32(static_cast<std::uint32_t>(packets.size()));
  for (const auto& p : packets) w.bytes(serialize_packet(p));
  return w.take();
}

std::vector<EncodedPacket> read_stream_container(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != "TOCS") throw FormatError("stream container: bad magic");
  const auto count = r.u32();
  std::vector<EncodedPacket> out;
  std::size_t pos = r.position();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::size_t used = 0;
    out.push_back(parse_packet(bytes.subspan(pos), &used));
    pos += used;
  }
  if (pos != bytes.size()) throw FormatError("stream container: trailing bytes");
  return out;
}

RateMeasure measure_rate(std::span<const EncodedPacket> packets) {
  RateMeasure m;
  for (const auto& p : packets) {
    m.total_bits += 8 * p.byte_size();
    m.header_bits += 8 * kHeaderBytes;
  }
  m.payload_bits = m.total_bits - m.header_bits;
  return m;
}

DeviceEncoder::DeviceEncoder(std::uint16_t device_id, std::shared_ptr<const DeviceModels> models)
    : device_id_(device_id), models_(std::move(models)) {
  if (!models_) throw Error("DeviceEncoder: null models");
}

EncodeResult DeviceEncoder::encode_frame(const Tensor& frame, std::uint32_t timestamp, ModePolicy policy) {
  const Tensor z = diffcore::graph_forward(models_->extractor, models_->extractor_params, frame);
  return encode_feature(z, timestamp, policy);
}

EncodeResult DeviceEncoder::encode_feature(const Tensor& z, std::uint32_t timestamp, ModePolicy policy) {
  if (last_timestamp_ && timestamp <= *last_timestamp_) {
    throw PacketError(Kind::out_of_order, "timestamp " + std::to_string(timestamp) + " does not follow " +
                                              std::to_string(*last_timestamp_));
  }
  const DeviceModels& m = *models_;
  EncodeResult res;
  res.zhat = quantizer::round_nearest(z, device_id_, timestamp);
  auto& p = res.packet;
  p.device_id = device_id_;
  p.timestamp = timestamp;
  p.feature_dims = to_dims(res.zhat.shape);

  const std::size_t order = m.temporal_order();
  const bool temporal = policy == ModePolicy::automatic && order >= 1 && history_.size() == order;
  entropy::GaussianParams params;
  if (temporal) {
    p.mode = PacketMode::temporal;
    const std::vector<QuantizedFeature> hist(history_.begin(), history_.end());
    params = entropy::temporal_params(hist, *m.temporal);
  } else {
    p.mode = PacketMode::hierarchical;
    auto hyper = entropy::hyper_path(z, m.hyper, entropy::Mode::infer);
    const QuantizedFeature vhat = quantizer::round_nearest(hyper.v_coded);
    const auto prior = entropy::factorized_params(m.hyper.prior, vhat.shape);
    p.hyper_dims = to_dims(vhat.shape);
    p.hyper_stream = code(vhat, prior);
    res.estimated_bits += entropy::gu_bits(vhat, prior);
    params = std::move(hyper.feature_params);
  }
  p.feature_stream = code(res.zhat, params);
  res.bit_map = entropy::gu_bits_map(res.zhat, params);
  for (double b : res.bit_map.data) res.estimated_bits += b;

  push_history(history_, res.zhat, order);
  last_timestamp_ = timestamp;
  return res;
}

void ServerDecoder::register_device(std::uint16_t device_id, std::shared_ptr<const DeviceModels> models) {
  if (!models) throw Error("ServerDecoder: null models");
  devices_[device_id] = Mirror{std::move(models), {}};
}

const std::deque<QuantizedFeature>& ServerDecoder::history(std::uint16_t device_id) const {
  const auto it = devices_.find(device_id);
  if (it == devices_.end()) throw PacketError(Kind::unknown_device, "unknown device " + std::to_string(device_id));
  return it->second.history;
}

QuantizedFeature ServerDecoder::decode_frame(const EncodedPacket& packet) {
  auto it = devices_.find(packet.device_id);
  if (it == devices_.end()) {
    throw PacketError(Kind::unknown_device, "unknown device " + std::to_string(packet.device_id));
  }
  Mirror& mirror = it->second;
  const DeviceModels& m = *mirror.models;
  const Shape feature_shape = m.feature_shape();
  if (packet.feature_dims != to_dims(feature_shape)) {
    throw PacketError(Kind::shape_mismatch, "feature dims do not match the device model");
  }
  if (!mirror.history.empty() && packet.timestamp <= mirror.history.back().timestamp) {
    throw PacketError(Kind::out_of_order, "timestamp " + std::to_string(packet.timestamp) + " is not increasing");
  }
  const std::size_t order = m.temporal_order();
  entropy::GaussianParams params;
  if (packet.mode == PacketMode::temporal) {
    if (order == 0 || mirror.history.size() != order) throw PacketError(Kind::missing_history, "missing history");
    const std::vector<QuantizedFeature> hist(mirror.history.begin(), mirror.history.end());
    params = entropy::temporal_params(hist, *m.temporal);
  } else {
    const Shape v_shape = m.hyper.encoder.output_shape();
    if (packet.hyper_dims != to_dims(v_shape)) {
      throw PacketError(Kind::shape_mismatch, "hyper dims do not match the device model");
    }
    const auto prior = entropy::factorized_params(m.hyper.prior, v_shape);
    const auto v = decode(packet.hyper_stream, prior);
    const QuantizedFeature vhat = narrow(v, v_shape, packet.device_id, packet.timestamp);
    params = entropy::split_params(diffcore::graph_forward(m.hyper.decoder, m.hyper.decoder_params, vhat.to_tensor()));
  }
  QuantizedFeature zhat = narrow(decode(packet.feature_stream, params), feature_shape, packet.device_id,
                                 packet.timestamp);
  push_history(mirror.history, zhat, order);
  return zhat;
}

}  // namespace tocom::pipeline
