#pragma once

// Clip views: speed-sampled RGB clips, residual and long-range residual
// clips, the MIP/CIP sampling constraints and clip augmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcpnet/dataset.hpp"
#include "mcpnet/rng.hpp"
#include "mcpnet/tensor.hpp"

namespace mcpnet {

enum class ViewKind { Rgb, LongRes };

// A normalised clip, data shape [L, H, W, 3] with values in [0, 1].
struct Clip {
  Tensor<float> data;
  ViewKind view = ViewKind::Rgb;
  int speed = 1;
  std::uint32_t source_id = 0;
  std::size_t start = 0;

  std::size_t length() const { return data.dim(0); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
};

struct MipTriplet {
  Clip rgb;
  Clip lres_same;
  Clip lres_diff;
};

struct CipPair {
  Clip rgb;
  Clip lres;
};

enum class CipSpeedMode { Different, Same, Random };

struct SamplerConfig {
  std::size_t length = 16;
  int t = 4;
  std::vector<int> speeds{1, 2};
  bool similarity_sampling = false;
  CipSpeedMode cip_speed_mode = CipSpeedMode::Different;
};

// Frames start, start+step, ..., start+step*(count-1).
inline FrameSequence subsample(const FrameSequence& src, std::size_t start, std::size_t step, std::size_t count) {
  if (step < 1 || count < 1) throw std::invalid_argument("subsample: step and count must be >= 1");
  const std::size_t last = start + step * (count - 1);
  if (last >= src.frames) {
    throw std::out_of_range("subsample: frame " + std::to_string(last) + " beyond video of " +
                            std::to_string(src.frames) + " frames");
  }
  FrameSequence out{count, src.height, src.width, {}};
  out.pixels.resize(count * src.frame_size());
  for (std::size_t k = 0; k < count; ++k) {
    std::copy_n(src.frame(start + step * k), src.frame_size(), out.frame(k));
  }
  return out;
}

// |Frame_{i..j} - Frame_{i+t..j+t}| per pixel and channel, differenced in
// integer space and then scaled to [0, 1].
inline Clip long_range_residual_clip(const FrameSequence& frames, std::size_t i, std::size_t j, std::size_t t) {
  if (t < 1) throw std::invalid_argument("long_range_residual_clip: t must be >= 1");
  if (j < i) throw std::invalid_argument("long_range_residual_clip: empty index range");
  if (j + t >= frames.frames) {
    throw std::out_of_range("long_range_residual_clip: frame " + std::to_string(j + t) + " beyond sequence of " +
                            std::to_string(frames.frames) + " frames");
  }
  const std::size_t len = j - i + 1, fs = frames.frame_size();
  Clip clip;
  clip.view = ViewKind::LongRes;
  clip.start = i;
  clip.data = Tensor<float>(Shape{len, frames.height, frames.width, 3});
  float* out = clip.data.ptr();
  for (std::size_t k = 0; k < len; ++k) {
    const std::uint8_t* a = frames.frame(i + k);
    const std::uint8_t* b = frames.frame(i + k + t);
    for (std::size_t p = 0; p < fs; ++p) {
      out[k * fs + p] = static_cast<float>(std::abs(int(a[p]) - int(b[p]))) / 255.0f;
    }
  }
  return clip;
}

inline Clip residual_clip(const FrameSequence& frames, std::size_t i, std::size_t j) {
  return long_range_residual_clip(frames, i, j, 1);
}

inline Clip sample_clip(const VideoRecord& video, std::size_t start, int speed, std::size_t length) {
  if (speed < 1) throw std::invalid_argument("sample_clip: speed must be >= 1");
  const FrameSequence seq = subsample(video.frames, start, static_cast<std::size_t>(speed), length);
  Clip clip;
  clip.view = ViewKind::Rgb;
  clip.speed = speed;
  clip.source_id = video.id;
  clip.start = start;
  clip.data = Tensor<float>(Shape{length, seq.height, seq.width, 3});
  float* out = clip.data.ptr();
  for (std::size_t p = 0; p < seq.pixels.size(); ++p) out[p] = static_cast<float>(seq.pixels[p]) / 255.0f;
  return clip;
}

// Long-range residual view of the speed-s clip starting at `start`: the
// accelerated frame sequence is differenced with gap t in its own index
// space, i.e. raw frames s*t apart.
inline Clip sample_long_range_clip(const VideoRecord& video, std::size_t start, int speed, std::size_t length,
                                   int t) {
  if (speed < 1 || t < 1) throw std::invalid_argument("sample_long_range_clip: speed and t must be >= 1");
  const FrameSequence seq =
      subsample(video.frames, start, static_cast<std::size_t>(speed), length + static_cast<std::size_t>(t));
  Clip clip = long_range_residual_clip(seq, 0, length - 1, static_cast<std::size_t>(t));
  clip.speed = speed;
  clip.source_id = video.id;
  clip.start = start;
  return clip;
}

// Last valid start for a speed-s clip whose residual view looks `lookahead`
// accelerated frames ahead; negative when the video is too short.
inline std::int64_t max_start(std::size_t frames, std::size_t length, int speed, int lookahead) {
  return static_cast<std::int64_t>(frames) - 1 -
         static_cast<std::int64_t>(speed) * (static_cast<std::int64_t>(length) - 1 + lookahead);
}

// Start index whose window is centred on the consecutive-frame pair with the
// largest mean absolute difference (lowest similarity). Ties take the lowest
// index; the window is clamped into the video.
inline std::size_t similarity_center_sampling(const VideoRecord& video, std::size_t length, int speed,
                                              int lookahead = 0) {
  const FrameSequence& f = video.frames;
  const std::int64_t hi = max_start(f.frames, length, speed, lookahead);
  if (hi < 0) throw std::out_of_range("similarity_center_sampling: video too short for the requested window");
  std::size_t best = 0;
  std::uint64_t best_diff = 0;
  for (std::size_t k = 0; k + 1 < f.frames; ++k) {
    const std::uint8_t* a = f.frame(k);
    const std::uint8_t* b = f.frame(k + 1);
    std::uint64_t diff = 0;
    for (std::size_t p = 0; p < f.frame_size(); ++p) diff += static_cast<std::uint64_t>(std::abs(int(a[p]) - int(b[p])));
    if (k == 0 || diff > best_diff) {
      best = k;
      best_diff = diff;
    }
  }
  const std::int64_t start = static_cast<std::int64_t>(best) - static_cast<std::int64_t>(speed) *
                                                                   static_cast<std::int64_t>(length) / 2;
  return static_cast<std::size_t>(std::clamp<std::int64_t>(start, 0, hi));
}

namespace detail {

inline int draw_speed(Rng& rng, const std::vector<int>& speeds) {
  if (speeds.empty()) throw std::invalid_argument("sampler: empty speed set");
  return speeds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(speeds.size()) - 1))];
}

inline int draw_other_speed(Rng& rng, const std::vector<int>& speeds, int not_this) {
  std::vector<int> others;
  for (int s : speeds)
    if (s != not_this) others.push_back(s);
  if (others.empty()) throw std::invalid_argument("sampler: speed set needs at least two speeds");
  return draw_speed(rng, others);
}

inline std::size_t draw_start(Rng& rng, const VideoRecord& video, const SamplerConfig& cfg, int speed) {
  const std::int64_t hi = max_start(video.frames.frames, cfg.length, speed, cfg.t);
  if (hi < 0) {
    throw std::out_of_range("sampler: video " + std::to_string(video.id) + " with " +
                            std::to_string(video.frames.frames) + " frames is too short for speed " +
                            std::to_string(speed));
  }
  if (cfg.similarity_sampling) return similarity_center_sampling(video, cfg.length, speed, cfg.t);
  return static_cast<std::size_t>(rng.uniform_int(0, hi));
}

}  // namespace detail

// s_r drawn uniformly; the same-speed residual clip matches it, the other uses
// a different speed. All three clips share one start index, valid for the
// slowest-to-fit (largest) speed.
inline MipTriplet sample_mip_triplet(const VideoRecord& video, std::uint64_t seed, const SamplerConfig& cfg = {}) {
  Rng rng(seed);
  const int s_r = detail::draw_speed(rng, cfg.speeds);
  const int s_other = detail::draw_other_speed(rng, cfg.speeds, s_r);
  const int widest = std::max(s_r, s_other);
  const std::size_t start = detail::draw_start(rng, video, cfg, widest);
  return MipTriplet{sample_clip(video, start, s_r, cfg.length),
                    sample_long_range_clip(video, start, s_r, cfg.length, cfg.t),
                    sample_long_range_clip(video, start, s_other, cfg.length, cfg.t)};
}

// One RGB clip and one long-range residual clip of the same video, each with
// its own random start. Speeds follow cfg.cip_speed_mode.
inline CipPair sample_cip_pair(const VideoRecord& video, std::uint64_t seed, const SamplerConfig& cfg = {}) {
  Rng rng(seed);
  const int s_r = detail::draw_speed(rng, cfg.speeds);
  int s_l = s_r;
  switch (cfg.cip_speed_mode) {
    case CipSpeedMode::Different: s_l = detail::draw_other_speed(rng, cfg.speeds, s_r); break;
    case CipSpeedMode::Same: break;
    case CipSpeedMode::Random: s_l = detail::draw_speed(rng, cfg.speeds); break;
  }
  const std::size_t start_r = detail::draw_start(rng, video, cfg, s_r);
  const std::size_t start_l = detail::draw_start(rng, video, cfg, s_l);
  return CipPair{sample_clip(video, start_r, s_r, cfg.length),
                 sample_long_range_clip(video, start_l, s_l, cfg.length, cfg.t)};
}

// ---------------------------------------------------------------------------
// Augmentation. One parameter set per clip, shared by all its frames.

struct AugmentParams {
  std::size_t crop_side_y = 0, crop_side_x = 0;  // 0 means no crop
  std::size_t crop_y = 0, crop_x = 0;
  bool flip = false;
  float brightness[3] = {1.0f, 1.0f, 1.0f};
};

inline AugmentParams draw_augment_params(Rng& rng, std::size_t height, std::size_t width) {
  AugmentParams p;
  const double area = rng.uniform(0.75, 1.0);
  const double side = std::sqrt(area);
  // Never below the 75% area floor after rounding.
  const double floor_side = std::sqrt(0.75);
  p.crop_side_y = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * height)),
                                          static_cast<std::size_t>(std::ceil(floor_side * height)), height);
  p.crop_side_x = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * width)),
                                          static_cast<std::size_t>(std::ceil(floor_side * width)), width);
  p.crop_y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(height - p.crop_side_y)));
  p.crop_x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(width - p.crop_side_x)));
  p.flip = rng.bernoulli(0.5);
  for (float& b : p.brightness) b = static_cast<float>(rng.uniform(0.8, 1.2));
  return p;
}

inline Clip augment_with(const Clip& clip, const AugmentParams& p) {
  const std::size_t l = clip.length(), h = clip.height(), w = clip.width();
  const std::size_t sy = p.crop_side_y ? p.crop_side_y : h, sx = p.crop_side_x ? p.crop_side_x : w;
  if (p.crop_y + sy > h || p.crop_x + sx > w) throw std::invalid_argument("augment: crop window outside clip");
  Clip out = clip;
  const float* src = clip.data.ptr();
  float* dst = out.data.ptr();
  for (std::size_t f = 0; f < l; ++f)
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t yy = p.crop_y + y * sy / h;
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t xx = x * sx / w;
        if (p.flip) xx = sx - 1 - xx;
        xx += p.crop_x;
        for (std::size_t c = 0; c < 3; ++c) {
          const float v = src[((f * h + yy) * w + xx) * 3 + c] * p.brightness[c];
          dst[((f * h + y) * w + x) * 3 + c] = std::clamp(v, 0.0f, 1.0f);
        }
      }
    }
  return out;
}

inline Clip augment(const Clip& clip, std::uint64_t seed) {
  Rng rng(seed);
  return augment_with(clip, draw_augment_params(rng, clip.height(), clip.width()));
}

}  // namespace mcpnet
