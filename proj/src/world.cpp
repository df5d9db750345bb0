#include "tocom/world.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "tocom/bytes.hpp"
#include "tocom/error.hpp"

namespace tocom::sim {

void WorldSpec::validate() const {
  if (cameras < 1) throw Error("world spec: cameras must be >= 1");
  if (agents < 1) throw Error("world spec: agents must be >= 1");
  if (grid < 4) throw Error("world spec: grid must be >= 4");
  if (height < 8 || width < 8) throw Error("world spec: images must be at least 8x8");
  if (frames < 1) throw Error("world spec: frames must be >= 1");
  if (!(blob_radius > 0) || pixel_noise < 0 || speed < 0 || jitter < 0) throw Error("world spec: bad rendering knobs");
  if (occlusion < 0 || occlusion >= 1) throw Error("world spec: occlusion must be in [0,1)");
  for (const auto& v : view_maps()) {
    if (std::abs(v.determinant()) < 1e-6) throw Error("world spec: degenerate view map");
  }
}

std::vector<ViewMap> WorldSpec::view_maps() const {
  // Fixed per-camera geometry: rotated, anisotropically squashed views that
  // keep the unit square inside the image.
  std::vector<ViewMap> maps;
  const double cx = 0.5 * width, cy = 0.5 * height;
  const double extent = 0.62 * std::min(width, height);
  for (std::uint32_t k = 0; k < cameras; ++k) {
    const double angle = 2.0 * std::numbers::pi * k / cameras + 0.35;
    const double squash = 0.65 + 0.25 * ((k % 2 == 0) ? 1.0 : 0.0);
    const double c = std::cos(angle), s = std::sin(angle);
    ViewMap m;
    // R(angle) * diag(1, squash) * extent
    m.a = {extent * c, -extent * s * squash, extent * s, extent * c * squash};
    m.b = {cx - 0.5 * (m.a[0] + m.a[1]), cy - 0.5 * (m.a[2] + m.a[3])};
    maps.push_back(m);
  }
  return maps;
}

Tensor Dataset::image(std::size_t t, std::size_t k) const {
  const auto& plane = frames.at(t).images.at(k);
  Tensor out({1, height, width});
  for (std::size_t i = 0; i < plane.size(); ++i) out[i] = plane[i] / 255.0;
  return out;
}

inference::OccupancyGrid Dataset::truth(std::size_t t) const {
  inference::OccupancyGrid g(grid);
  const auto& plane = frames.at(t).truth;
  for (std::size_t i = 0; i < plane.size(); ++i) g.cells[i] = plane[i];
  return g;
}

Splits split(const Dataset& data) {
  const std::size_t n = data.size();
  const std::size_t a = n * 2 / 3, b = a + n / 6;
  return {{&data, 0, a}, {&data, a, b}, {&data, b, n}};
}

Dataset gen_dataset(const WorldSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Dataset d;
  d.cameras = spec.cameras;
  d.height = spec.height;
  d.width = spec.width;
  d.grid = spec.grid;
  d.seed = spec.seed;

  const auto maps = spec.view_maps();
  const std::size_t hw = static_cast<std::size_t>(spec.height) * spec.width;

  // Static textured background per camera.
  std::vector<std::vector<double>> background(spec.cameras, std::vector<double>(hw));
  for (auto& bg : background) {
    std::array<double, 12> wave{};
    for (auto& v : wave) v = unit(rng);
    for (std::size_t y = 0; y < spec.height; ++y) {
      for (std::size_t x = 0; x < spec.width; ++x) {
        double v = 0.0;
        for (int j = 0; j < 3; ++j) {
          const double fx = 0.15 + 0.9 * wave[4 * j], fy = 0.15 + 0.9 * wave[4 * j + 1];
          v += std::sin(fx * x + fy * y + 2.0 * std::numbers::pi * wave[4 * j + 2]) *
               std::cos(0.5 * fy * x - 0.4 * fx * y + 2.0 * std::numbers::pi * wave[4 * j + 3]);
        }
        bg[y * spec.width + x] = 60.0 + spec.background_contrast * v / 3.0;
      }
    }
  }

  struct Agent {
    double x, y, vx, vy;
  };
  std::vector<Agent> agents(spec.agents);
  for (auto& a : agents) {
    a.x = 0.05 + 0.9 * unit(rng);
    a.y = 0.05 + 0.9 * unit(rng);
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    a.vx = spec.speed * std::cos(angle);
    a.vy = spec.speed * std::sin(angle);
  }

  auto reflect = [](double& p, double& v) {
    if (p < 0.0) {
      p = -p;
      v = -v;
    }
    if (p >= 1.0) {
      p = 2.0 - p - 1e-9;
      v = -v;
    }
    p = std::clamp(p, 0.0, 1.0 - 1e-9);
  };

  d.frames.reserve(spec.frames);
  std::vector<double> canvas(hw);
  for (std::uint32_t t = 0; t < spec.frames; ++t) {
    for (auto& a : agents) {
      a.x += a.vx + spec.jitter * gauss(rng);
      a.y += a.vy + spec.jitter * gauss(rng);
      reflect(a.x, a.vx);
      reflect(a.y, a.vy);
    }
    Frame f;
    f.truth.assign(static_cast<std::size_t>(spec.grid) * spec.grid, 0);
    for (const auto& a : agents) {
      const auto gx = std::min<std::size_t>(static_cast<std::size_t>(a.x * spec.grid), spec.grid - 1);
      const auto gy = std::min<std::size_t>(static_cast<std::size_t>(a.y * spec.grid), spec.grid - 1);
      f.truth[gy * spec.grid + gx] = 1;
    }
    for (std::uint32_t k = 0; k < spec.cameras; ++k) {
      canvas = background[k];
      const ViewMap& m = maps[k];
      for (const auto& a : agents) {
        if (spec.occlusion > 0 && unit(rng) < spec.occlusion) continue;
        const double px = m.a[0] * a.x + m.a[1] * a.y + m.b[0];
        const double py = m.a[2] * a.x + m.a[3] * a.y + m.b[1];
        const double inv = 1.0 / (2.0 * spec.blob_radius * spec.blob_radius);
        for (std::size_t y = 0; y < spec.height; ++y) {
          for (std::size_t x = 0; x < spec.width; ++x) {
            const double dx = x + 0.5 - px, dy = y + 0.5 - py;
            canvas[y * spec.width + x] += spec.blob_intensity * std::exp(-(dx * dx + dy * dy) * inv);
          }
        }
      }
      std::vector<std::uint8_t> plane(hw);
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = canvas[i] + spec.pixel_noise * gauss(rng);
        plane[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
      f.images.push_back(std::move(plane));
    }
    d.frames.push_back(std::move(f));
  }
  return d;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  ByteWriter w;
  w.tag("TOCD");
  w.u8(1);
  w.u32(d.cameras);
  w.u32(static_cast<std::uint32_t>(d.frames.size()));
  w.u32(d.height);
  w.u32(d.width);
  w.u32(d.grid);
  w.u64(d.seed);
  for (const auto& f : d.frames) {
    for (const auto& img : f.images) w.bytes(img);
    w.bytes(f.truth);
  }
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != "TOCD") throw FormatError("dataset: bad magic");
  if (r.u8() != 1) throw FormatError("dataset: unsupported version");
  Dataset d;
  d.cameras = r.u32();
  const std::uint32_t n = r.u32();
  d.height = r.u32();
  d.width = r.u32();
  d.grid = r.u32();
  d.seed = r.u64();
  const std::size_t hw = static_cast<std::size_t>(d.height) * d.width;
  const std::size_t gg = static_cast<std::size_t>(d.grid) * d.grid;
  if (r.remaining() != static_cast<std::size_t>(n) * (d.cameras * hw + gg)) {
    throw FormatError("dataset: payload size does not match header");
  }
  d.frames.resize(n);
  for (auto& f : d.frames) {
    for (std::uint32_t k = 0; k < d.cameras; ++k) {
      auto b = r.bytes(hw);
      f.images.emplace_back(b.begin(), b.end());
    }
    auto t = r.bytes(gg);
    f.truth.assign(t.begin(), t.end());
  }
  return d;
}

void save_dataset(const std::string& path, const Dataset& d) { write_file_bytes(path, encode_dataset(d)); }

Dataset load_dataset(const std::string& path) { return decode_dataset(read_file_bytes(path)); }

}  // namespace tocom::sim
