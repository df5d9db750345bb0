#include "tocom/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <limits>

#include "tocom/bytes.hpp"

namespace tocom {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path);
}

std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointEntry> entries) {
  ByteWriter w;
  w.tag("TOCP");
  w.u8(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("entry name too long");
    if (e.value.rank() > std::numeric_limits<std::uint8_t>::max()) throw FormatError("tensor rank too large");
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.tag(e.name);
    w.u8(static_cast<std::uint8_t>(e.value.rank()));
    for (auto d : e.value.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : e.value.data) w.f64(v);
  }
  return w.take();
}

std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != "TOCP") throw FormatError("checkpoint: bad magic");
  const auto version = r.u8();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = r.u32();
  std::vector<CheckpointEntry> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str(r.u16());
    const auto rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = numel(shape);
    if (n > r.remaining() / 8) throw FormatError("checkpoint: truncated values for " + e.name);
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();
    e.value = Tensor(std::move(shape), std::move(values));
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return out;
}

void save_checkpoint(const std::string& path, std::span<const CheckpointEntry> entries) {
  write_file_bytes(path, encode_checkpoint(entries));
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path));
}

void append_section(std::vector<CheckpointEntry>& out, const std::string& section,
                    const diffcore::ParamStore& params) {
  for (const auto& p : params.entries) out.push_back({section + "/" + p.name, p.value});
}

diffcore::ParamStore extract_section(std::span<const CheckpointEntry> entries, const std::string& section) {
  const std::string prefix = section + "/";
  diffcore::ParamStore store;
  for (const auto& e : entries) {
    if (e.name.rfind(prefix, 0) == 0) store.entries.push_back({e.name.substr(prefix.size()), e.value});
  }
  return store;
}

}  // namespace tocom
