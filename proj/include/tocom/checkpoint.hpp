#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tocom/diffcore.hpp"
#include "tocom/tensor.hpp"

namespace tocom {

// Binary parameter checkpoint:
//   "TOCP" | version u8 | count u32 | per entry:
//   name_len u16 | name | rank u8 | dims u32 x rank | values f64 x numel
// All integers and floats little-endian.
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Tensor value;
};

std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointEntry> entries);
std::vector<CheckpointEntry> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::string& path, std::span<const CheckpointEntry> entries);
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

// Prefixes every parameter name with "<section>/".
void append_section(std::vector<CheckpointEntry>& out, const std::string& section,
                    const diffcore::ParamStore& params);

// Collects entries under "<section>/" back into a store (prefix stripped), in file order.
diffcore::ParamStore extract_section(std::span<const CheckpointEntry> entries, const std::string& section);

}  // namespace tocom
