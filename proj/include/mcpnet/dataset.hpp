#pragma once

// Procedural motion-pattern video corpus and its on-disk format.
//
// Every video shows 1-3 sprites over a textured background. The background
// is random per video but static within it, and sprite colour/shape are random
// too, so the only thing that identifies a class is how the sprites move.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcpnet/rng.hpp"

namespace mcpnet {

// Raw 8-bit frames, layout [frame][row][col][rgb].
struct FrameSequence {
  std::size_t frames = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  std::size_t frame_size() const { return height * width * 3; }
  const std::uint8_t* frame(std::size_t t) const { return pixels.data() + t * frame_size(); }
  std::uint8_t* frame(std::size_t t) { return pixels.data() + t * frame_size(); }

  friend bool operator==(const FrameSequence&, const FrameSequence&) = default;
};

struct VideoRecord {
  std::uint32_t id = 0;
  std::uint32_t label = 0;
  FrameSequence frames;

  friend bool operator==(const VideoRecord&, const VideoRecord&) = default;
};

enum class Split { Train, Test };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

struct DatasetStore {
  std::vector<VideoRecord> records;
  Split split = Split::Train;
  std::uint32_t num_classes = 0;

  std::size_t size() const { return records.size(); }
};

// Minimum length: a 16-frame clip at 2x speed spans 31 frames, plus a
// 2*t lookahead for the long-range residual view at t = 5.
inline constexpr std::size_t kMinFrames = 48;

enum class MotionPattern : std::uint8_t {
  Translation,
  Orbit,
  Bounce,
  Zoom,
  Rotation,
  Oscillation,
  RandomWalk,
  Crossing,
};

inline constexpr std::size_t kNumMotionPatterns = 8;

inline const char* motion_pattern_name(MotionPattern p) {
  constexpr std::array<const char*, kNumMotionPatterns> names = {
      "translation", "orbit", "bounce", "zoom", "rotation", "oscillation", "random_walk", "crossing"};
  return names[static_cast<std::size_t>(p)];
}

struct DatasetConfig {
  std::uint32_t num_classes = 8;
  std::uint32_t videos_per_class = 25;
  std::size_t frames = 64;
  std::size_t size = 32;
  std::uint64_t seed = 0;
};

namespace detail {

struct SpriteState {
  double x = 0, y = 0;      // centre
  double radius = 3;        // half-extent; bar half-length for rotation
  double angle = 0;         // bar orientation
};

enum class SpriteShape { Disc, Square, Bar };

struct Sprite {
  SpriteShape shape = SpriteShape::Disc;
  std::array<std::uint8_t, 3> color{};
  bool wrap = false;
  std::vector<SpriteState> track;  // one state per frame
};

inline double reflect(double v, double lo, double hi) {
  const double span = hi - lo;
  double u = std::fmod(v - lo, 2 * span);
  if (u < 0) u += 2 * span;
  return lo + (u <= span ? u : 2 * span - u);
}

inline double wrap_delta(double d, double size) {
  d = std::fmod(d, size);
  if (d > size / 2) d -= size;
  if (d < -size / 2) d += size;
  return d;
}

inline std::vector<SpriteState> make_track(MotionPattern pattern, std::size_t frames, double size, Rng& rng,
                                           int sprite_index) {
  std::vector<SpriteState> track(frames);
  const double two_pi = 2 * std::numbers::pi;
  const double lo = 4.0, hi = size - 4.0;
  const double speed = rng.uniform(0.7, 1.3);
  const double heading = rng.uniform(0, two_pi);
  const double radius = rng.uniform(2.5, 4.0);
  switch (pattern) {
    case MotionPattern::Translation: {
      const double x0 = rng.uniform(0, size), y0 = rng.uniform(0, size);
      for (std::size_t f = 0; f < frames; ++f) {
        track[f] = {std::fmod(x0 + speed * std::cos(heading) * f + 10 * size, size),
                    std::fmod(y0 + speed * std::sin(heading) * f + 10 * size, size), radius, 0};
      }
      break;
    }
    case MotionPattern::Orbit: {
      const double r = rng.uniform(6.0, 9.0);
      const double cx = rng.uniform(r + 3, size - r - 3), cy = rng.uniform(r + 3, size - r - 3);
      const double omega = (rng.bernoulli(0.5) ? 1 : -1) * speed / r;
      const double phase = rng.uniform(0, two_pi);
      for (std::size_t f = 0; f < frames; ++f) {
        track[f] = {cx + r * std::cos(omega * f + phase), cy + r * std::sin(omega * f + phase), radius, 0};
      }
      break;
    }
    case MotionPattern::Bounce: {
      // Ball under gravity: parabolic hops along the floor, reflecting off walls.
      const double floor_y = size - 3 - radius;
      const double height = rng.uniform(12.0, 18.0);
      const double period = rng.uniform(18.0, 26.0);
      const double vx = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.3, 0.6);
      const double x0 = rng.uniform(lo, hi), phase = rng.uniform(0, 1);
      for (std::size_t f = 0; f < frames; ++f) {
        const double u = std::fmod(f / period + phase, 1.0);
        track[f] = {reflect(x0 + vx * f, lo, hi), floor_y - height * 4 * u * (1 - u), radius, 0};
      }
      break;
    }
    case MotionPattern::Zoom: {
      const double cx = rng.uniform(9, size - 9), cy = rng.uniform(9, size - 9);
      const double period = rng.uniform(16.0, 24.0), phase = rng.uniform(0, two_pi);
      for (std::size_t f = 0; f < frames; ++f) {
        track[f] = {cx, cy, 4.5 + 3.5 * std::sin(two_pi * f / period + phase), 0};
      }
      break;
    }
    case MotionPattern::Rotation: {
      const double half = rng.uniform(5.0, 7.0);
      const double cx = rng.uniform(half + 2, size - half - 2), cy = rng.uniform(half + 2, size - half - 2);
      const double omega = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.10, 0.18);
      const double phase = rng.uniform(0, two_pi);
      for (std::size_t f = 0; f < frames; ++f) track[f] = {cx, cy, half, omega * f + phase};
      break;
    }
    case MotionPattern::Oscillation: {
      const double amp = rng.uniform(6.0, 9.0);
      const double period = rng.uniform(14.0, 22.0), phase = rng.uniform(0, two_pi);
      const double dx = std::cos(heading), dy = std::sin(heading);
      const double cx = rng.uniform(amp + 4, size - amp - 4), cy = rng.uniform(amp + 4, size - amp - 4);
      for (std::size_t f = 0; f < frames; ++f) {
        const double s = amp * std::sin(two_pi * f / period + phase);
        track[f] = {cx + s * dx, cy + s * dy, radius, 0};
      }
      break;
    }
    case MotionPattern::RandomWalk: {
      double x = rng.uniform(lo, hi), y = rng.uniform(lo, hi);
      for (std::size_t f = 0; f < frames; ++f) {
        track[f] = {x, y, radius, 0};
        x = reflect(x + 1.6 * rng.normal(), lo, hi);
        y = reflect(y + 1.6 * rng.normal(), lo, hi);
      }
      break;
    }
    case MotionPattern::Crossing: {
      // Two sprites sweep back and forth along a shared axis in opposite
      // directions, crossing near the centre.
      const double half_span = size / 2 - 5;
      const double dx = std::cos(heading), dy = std::sin(heading);
      const double offset = (sprite_index == 0 ? 1.5 : -1.5);
      const double phase = rng.uniform(0, 2 * half_span);
      for (std::size_t f = 0; f < frames; ++f) {
        const double s = reflect(-half_span + phase + 1.2 * speed * f, -half_span, half_span);
        const double along = sprite_index == 0 ? s : -s;
        track[f] = {size / 2 + along * dx - offset * dy, size / 2 + along * dy + offset * dx, radius, 0};
      }
      break;
    }
  }
  return track;
}

inline std::vector<std::uint8_t> make_background(std::size_t size, Rng& rng) {
  std::vector<std::uint8_t> bg(size * size * 3);
  double base[3], amp[3][3];
  for (auto& b : base) b = rng.uniform(50, 170);
  double fx[3], fy[3], ph[3];
  for (int k = 0; k < 3; ++k) {
    const double freq = rng.uniform(0.15, 0.9), orient = rng.uniform(0, std::numbers::pi);
    fx[k] = freq * std::cos(orient);
    fy[k] = freq * std::sin(orient);
    ph[k] = rng.uniform(0, 2 * std::numbers::pi);
    for (int c = 0; c < 3; ++c) amp[k][c] = rng.uniform(-28, 28);
  }
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double wave[3];
      for (int k = 0; k < 3; ++k) wave[k] = std::sin(fx[k] * x + fy[k] * y + ph[k]);
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + rng.uniform(-12, 12);
        for (int k = 0; k < 3; ++k) v += amp[k][c] * wave[k];
        bg[(y * size + x) * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  return bg;
}

inline bool covers(const Sprite& s, const SpriteState& st, double px, double py, double size) {
  double dx = px - st.x, dy = py - st.y;
  if (s.wrap) {
    dx = wrap_delta(dx, size);
    dy = wrap_delta(dy, size);
  }
  switch (s.shape) {
    case SpriteShape::Disc: return dx * dx + dy * dy <= st.radius * st.radius;
    case SpriteShape::Square: return std::abs(dx) <= st.radius && std::abs(dy) <= st.radius;
    case SpriteShape::Bar: {
      const double ca = std::cos(st.angle), sa = std::sin(st.angle);
      const double along = dx * ca + dy * sa, across = -dx * sa + dy * ca;
      return std::abs(along) <= st.radius && std::abs(across) <= 1.6;
    }
  }
  return false;
}

inline VideoRecord render_video(std::uint32_t id, std::uint32_t label, MotionPattern pattern, std::size_t frames,
                                std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  const auto bg = make_background(size, rng);
  std::size_t count = pattern == MotionPattern::Crossing ? 2 : static_cast<std::size_t>(rng.uniform_int(1, 3));
  if (pattern == MotionPattern::Rotation || pattern == MotionPattern::Zoom) count = std::min<std::size_t>(count, 2);
  std::vector<Sprite> sprites(count);
  // Crossing sprites share one trajectory draw (mirrored).
  const Rng shared_track_rng(rng.next());
  for (std::size_t i = 0; i < count; ++i) {
    Sprite& s = sprites[i];
    s.shape = pattern == MotionPattern::Rotation ? SpriteShape::Bar
                                                 : (rng.bernoulli(0.5) ? SpriteShape::Disc : SpriteShape::Square);
    const bool bright = rng.bernoulli(0.5);
    for (auto& c : s.color) {
      c = static_cast<std::uint8_t>(bright ? rng.uniform_int(200, 255) : rng.uniform_int(0, 40));
    }
    s.color[static_cast<std::size_t>(rng.uniform_int(0, 2))] = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    s.wrap = pattern == MotionPattern::Translation;
    if (pattern == MotionPattern::Crossing) {
      Rng track_rng = shared_track_rng;
      s.track = make_track(pattern, frames, static_cast<double>(size), track_rng, static_cast<int>(i));
    } else {
      s.track = make_track(pattern, frames, static_cast<double>(size), rng, static_cast<int>(i));
    }
  }

  VideoRecord v;
  v.id = id;
  v.label = label;
  v.frames.frames = frames;
  v.frames.height = size;
  v.frames.width = size;
  v.frames.pixels.resize(frames * size * size * 3);
  for (std::size_t f = 0; f < frames; ++f) {
    std::uint8_t* out = v.frames.frame(f);
    std::copy(bg.begin(), bg.end(), out);
    for (const Sprite& s : sprites) {
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          if (covers(s, s.track[f], x + 0.5, y + 0.5, static_cast<double>(size))) {
            std::copy(s.color.begin(), s.color.end(), out + (y * size + x) * 3);
          }
        }
    }
  }
  return v;
}

}  // namespace detail

// Balanced corpus: record i has label i % num_classes and id first_id + i.
// Class k moves its sprites with motion pattern k.
inline DatasetStore generate_synthetic_dataset(const DatasetConfig& cfg, Split split = Split::Train,
                                               std::uint32_t first_id = 0) {
  if (cfg.num_classes < 2) throw std::invalid_argument("generate_synthetic_dataset: num_classes must be >= 2");
  if (cfg.num_classes > kNumMotionPatterns) {
    throw std::invalid_argument("generate_synthetic_dataset: at most " + std::to_string(kNumMotionPatterns) +
                                " motion-pattern classes are available");
  }
  if (cfg.frames < kMinFrames) {
    throw std::invalid_argument("generate_synthetic_dataset: frames must be >= " + std::to_string(kMinFrames) +
                                " to fit 2x-speed 16-frame clips with residual lookahead");
  }
  if (cfg.videos_per_class < 1) throw std::invalid_argument("generate_synthetic_dataset: videos_per_class must be >= 1");
  if (cfg.size < 16) throw std::invalid_argument("generate_synthetic_dataset: size must be >= 16");
  DatasetStore store;
  store.split = split;
  store.num_classes = cfg.num_classes;
  const std::size_t total = static_cast<std::size_t>(cfg.num_classes) * cfg.videos_per_class;
  store.records.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    const auto id = static_cast<std::uint32_t>(first_id + i);
    const auto label = static_cast<std::uint32_t>(i % cfg.num_classes);
    store.records.push_back(detail::render_video(id, label, static_cast<MotionPattern>(label), cfg.frames, cfg.size,
                                                 derive_seed(cfg.seed, "video", id)));
  }
  return store;
}

inline DatasetStore generate_synthetic_dataset(std::uint32_t num_classes, std::uint32_t videos_per_class,
                                               std::size_t frames, std::size_t size, std::uint64_t seed) {
  return generate_synthetic_dataset(DatasetConfig{num_classes, videos_per_class, frames, size, seed});
}

// ---------------------------------------------------------------------------
// .mcpv: little-endian, "MCPV", u32 version, u32 count, then per video
// u32 id, label, T, H, W followed by T*H*W*3 raw bytes.

inline constexpr std::uint32_t kMcpvVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw std::runtime_error(std::string("truncated file while reading ") + what);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint16_t get_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  read_exact(is, reinterpret_cast<char*>(b), 2, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace detail

inline void write_mcpv(std::ostream& os, const DatasetStore& store) {
  os.write("MCPV", 4);
  detail::put_u32(os, kMcpvVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(store.records.size()));
  for (const auto& v : store.records) {
    detail::put_u32(os, v.id);
    detail::put_u32(os, v.label);
    detail::put_u32(os, static_cast<std::uint32_t>(v.frames.frames));
    detail::put_u32(os, static_cast<std::uint32_t>(v.frames.height));
    detail::put_u32(os, static_cast<std::uint32_t>(v.frames.width));
    os.write(reinterpret_cast<const char*>(v.frames.pixels.data()), static_cast<std::streamsize>(v.frames.pixels.size()));
  }
}

inline DatasetStore read_mcpv(std::istream& is, Split split = Split::Train) {
  char magic[4];
  detail::read_exact(is, magic, 4, "magic");
  if (std::string(magic, 4) != "MCPV") throw std::runtime_error("not an .mcpv file (bad magic)");
  const std::uint32_t version = detail::get_u32(is, "version");
  if (version != kMcpvVersion) throw std::runtime_error("unsupported .mcpv version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(is, "video count");
  DatasetStore store;
  store.split = split;
  store.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    VideoRecord v;
    v.id = detail::get_u32(is, "id");
    v.label = detail::get_u32(is, "label");
    v.frames.frames = detail::get_u32(is, "T");
    v.frames.height = detail::get_u32(is, "H");
    v.frames.width = detail::get_u32(is, "W");
    v.frames.pixels.resize(v.frames.frames * v.frames.frame_size());
    detail::read_exact(is, reinterpret_cast<char*>(v.frames.pixels.data()), v.frames.pixels.size(), "frames");
    store.num_classes = std::max(store.num_classes, v.label + 1);
    store.records.push_back(std::move(v));
  }
  return store;
}

inline void save_mcpv(const std::string& path, const DatasetStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_mcpv(os, store);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline DatasetStore load_mcpv(const std::string& path, Split split = Split::Train) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_mcpv(is, split);
}

// Manifest sidecar: id<TAB>label<TAB>frames per line.
inline void write_manifest(std::ostream& os, const DatasetStore& store) {
  for (const auto& v : store.records) os << v.id << '\t' << v.label << '\t' << v.frames.frames << '\n';
}

}  // namespace mcpnet
