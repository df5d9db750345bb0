#pragma once

// Synthetic multi-camera occupancy world: M agents move on the unit square,
// K cameras observe them through fixed affine view maps and render Gaussian
// blobs over a static textured background with per-frame pixel noise.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tocom/inference.hpp"
#include "tocom/tensor.hpp"

namespace tocom::sim {

struct ViewMap {
  // pixel = a * world + b, world in [0,1]^2 as (x, y); pixel as (col, row)
  std::array<double, 4> a{};
  std::array<double, 2> b{};
  double determinant() const { return a[0] * a[3] - a[1] * a[2]; }
};

struct WorldSpec {
  std::uint32_t cameras = 2;   // K
  std::uint32_t agents = 3;    // M
  std::uint32_t frames = 600;  // N
  std::uint32_t grid = 12;     // G
  std::uint32_t height = 32;
  std::uint32_t width = 32;
  double speed = 0.06;         // world units per frame
  double jitter = 0.01;        // std of per-frame position noise
  double blob_radius = 2.5;    // pixels
  double blob_intensity = 180.0;
  double pixel_noise = 10.0;   // sigma_px
  double background_contrast = 45.0;
  double occlusion = 0.0;      // per agent, per camera, per frame drop probability
  std::uint64_t seed = 1;

  // Throws Error when the spec violates its invariants.
  void validate() const;
  std::vector<ViewMap> view_maps() const;
};

struct Frame {
  std::vector<std::vector<std::uint8_t>> images;  // K planes of height * width
  std::vector<std::uint8_t> truth;                // G * G, 0/1

  friend bool operator==(const Frame&, const Frame&) = default;
};

struct Dataset {
  std::uint32_t cameras = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t grid = 0;
  std::uint64_t seed = 0;
  std::vector<Frame> frames;

  std::size_t size() const { return frames.size(); }
  // (1, h, w) with pixels scaled to [0, 1].
  Tensor image(std::size_t t, std::size_t k) const;
  inference::OccupancyGrid truth(std::size_t t) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Contiguous frame range [begin, end) of a dataset.
struct Slice {
  const Dataset* data = nullptr;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

// First two thirds train, then one sixth validation, remainder test
// (400 / 100 / 100 for 600 frames).
struct Splits {
  Slice train, val, test;
};
Splits split(const Dataset& data);

Dataset gen_dataset(const WorldSpec& spec);

// "TOCD" | version u8 | K u32 | N u32 | h u32 | w u32 | G u32 | seed u64 |
// per frame: K image planes (u8, h*w each), then the G*G truth plane (u8).
std::vector<std::uint8_t> encode_dataset(const Dataset& d);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const std::string& path, const Dataset& d);
Dataset load_dataset(const std::string& path);

}  // namespace tocom::sim
