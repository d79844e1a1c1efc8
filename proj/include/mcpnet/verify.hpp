#pragma once

// Fast invariant suite behind `mcpnet verify`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mcpnet/autodiff.hpp"
#include "mcpnet/dataset.hpp"
#include "mcpnet/encoder.hpp"
#include "mcpnet/gradcheck.hpp"
#include "mcpnet/objectives.hpp"
#include "mcpnet/trainer.hpp"
#include "mcpnet/views.hpp"

namespace mcpnet {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

namespace verify {

inline Tensor<double> uniform_tensor(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor<double> naive_conv3d(const Tensor<double>& x, const Tensor<double>& k, Dims3 s, Dims3 p) {
  const std::size_t n = x.dim(0), c = x.dim(1), t = x.dim(2), h = x.dim(3), w = x.dim(4);
  const std::size_t kk = k.dim(0), kt = k.dim(2), kh = k.dim(3), kw = k.dim(4);
  const std::size_t ot = (t + 2 * p.t - kt) / s.t + 1, oh = (h + 2 * p.h - kh) / s.h + 1, ow = (w + 2 * p.w - kw) / s.w + 1;
  Tensor<double> out(Shape{n, kk, ot, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < kk; ++o)
      for (std::size_t z = 0; z < ot; ++z)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t q = 0; q < ow; ++q) {
            double acc = 0;
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t dz = 0; dz < kt; ++dz)
                for (std::size_t dy = 0; dy < kh; ++dy)
                  for (std::size_t dq = 0; dq < kw; ++dq) {
                    const long iz = long(z * s.t + dz) - long(p.t), iy = long(y * s.h + dy) - long(p.h),
                               iq = long(q * s.w + dq) - long(p.w);
                    if (iz < 0 || iy < 0 || iq < 0 || iz >= long(t) || iy >= long(h) || iq >= long(w)) continue;
                    acc += x[(((b * c + ch) * t + iz) * h + iy) * w + iq] * k[(((o * c + ch) * kt + dz) * kh + dy) * kw + dq];
                  }
            out[(((b * kk + o) * ot + z) * oh + y) * ow + q] = acc;
          }
  return out;
}

inline CheckResult conv_oracle() {
  CheckResult r{"conv3d matches nested-loop oracle"};
  double worst = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng rng(s);
    const Shape xs{1 + s % 2, 2, 3 + s % 3, 4, 5};
    const Shape ks{3, 2, 2, 1 + s % 3, 2};
    const Dims3 stride{1 + s % 2, 1, 2}, pad{s % 2, 1, 0};
    const auto x = uniform_tensor(xs, s), k = uniform_tensor(ks, s + 50);
    Graph<double> g;
    const Tensor<double>& fast = g.value(conv3d(g, g.input(x), g.input(k), stride, pad));
    const Tensor<double> slow = naive_conv3d(x, k, stride, pad);
    if (fast.shape() != slow.shape()) {
      r.detail = "shape mismatch for input " + shape_string(xs);
      return r;
    }
    for (std::size_t i = 0; i < fast.size(); ++i) worst = std::max(worst, std::abs(fast[i] - slow[i]));
  }
  std::ostringstream os;
  os << "5 shapes, max abs err " << worst;
  r.detail = os.str();
  r.passed = worst < 1e-12;
  return r;
}

inline CheckResult op_gradients() {
  CheckResult r{"per-op gradients vs finite differences"};
  using Build = std::function<NodeId(Graph<double>&, const std::vector<NodeId>&)>;
  double worst = 0;
  std::string worst_op;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const std::vector<std::pair<const char*, std::pair<Build, std::vector<NamedInput>>>> cases = {
        {"conv3d",
         {[](Graph<double>& g, const std::vector<NodeId>& in) {
            return sum(g, exp(g, scale(g, conv3d(g, in[0], in[1], {1, 2, 1}, {1, 0, 1}), 0.3)));
          },
          {{"x", uniform_tensor({2, 2, 3, 4, 3}, s)}, {"k", uniform_tensor({2, 2, 2, 3, 2}, s + 1)}}}},
        {"affine+relu",
         {[](Graph<double>& g, const std::vector<NodeId>& in) {
            return sum(g, exp(g, relu(g, affine(g, in[0], in[1], in[2]))));
          },
          {{"x", uniform_tensor({3, 4}, s)}, {"w", uniform_tensor({5, 4}, s + 1)}, {"b", uniform_tensor({5}, s + 2)}}}},
        {"batch_norm+pool",
         {[](Graph<double>& g, const std::vector<NodeId>& in) {
            auto y = max_pool3d(g, batch_norm(g, in[0], in[1], in[2]), {2, 2, 2}, {2, 2, 2});
            return sum(g, exp(g, global_avg_pool(g, y)));
          },
          {{"x", uniform_tensor({3, 2, 2, 4, 4}, s)}, {"gamma", uniform_tensor({2}, s + 1, 0.5, 1.5)},
           {"beta", uniform_tensor({2}, s + 2)}}}},
        {"l2_normalize+dots",
         {[](Graph<double>& g, const std::vector<NodeId>& in) {
            auto a = l2_normalize(g, in[0]), b = l2_normalize(g, in[1]);
            return add(g, cip_loss(g, a, b, 0.1), mip_loss(g, a, b, slice_rows(g, b, 0, 3), 2.0));
          },
          {{"a", uniform_tensor({3, 5}, s)}, {"b", uniform_tensor({3, 5}, s + 1)}}}},
    };
    for (const auto& [name, c] : cases) {
      const double e = grad_check(c.first, c.second);
      if (e > worst) worst = e, worst_op = name;
    }
  }
  std::ostringstream os;
  os << "max rel err " << worst << (worst_op.empty() ? "" : " (" + worst_op + ")");
  r.detail = os.str();
  r.passed = worst < 1e-5;
  return r;
}

// Random 8x8x8 clips standing in for a batch of two videos.
inline Batch random_batch(std::uint64_t seed) {
  auto clip = [&](std::uint64_t k) {
    Clip c;
    c.data = uniform_tensor({8, 8, 8, 3}, seed + k, 0, 1).cast<float>();
    return c;
  };
  Batch b;
  b.video_ids = {0, 1};
  for (std::uint64_t i = 0; i < 2; ++i) {
    b.mip.push_back({clip(10 * i), clip(10 * i + 1), clip(10 * i + 2)});
    b.cip.push_back({clip(10 * i + 3), clip(10 * i + 4)});
  }
  return b;
}

inline ArchConfig gradcheck_arch() {
  ArchConfig a;
  a.channels = {3, 4, 4, 8, 8};
  a.head_hidden = 16;
  a.proj_dim = 8;
  return a;
}

// Largest relative error of the joint objective's gradients, every
// parameter of a small model, 64-bit.
inline double model_gradient_error(std::uint64_t seed, std::size_t max_coords = 0) {
  const ArchConfig arch = gradcheck_arch();
  const ParameterStore<double> store = init_params<double>(seed, arch);
  const Batch batch = random_batch(seed);
  TrainConfig cfg;
  std::vector<NamedInput> inputs;
  for (const auto& [name, t] : store.params) inputs.push_back({name, t});
  auto build = [&](Graph<double>& g, const std::vector<NodeId>& leaves) {
    Bound b;
    for (std::size_t i = 0; i < leaves.size(); ++i) b.nodes.emplace(inputs[i].name, leaves[i]);
    return build_objective(g, b, store, batch, cfg, arch).total;
  };
  GradCheckOptions opts;
  opts.max_coords_per_input = max_coords;
  return grad_check(build, inputs, opts);
}

inline CheckResult model_gradients() {
  CheckResult r{"full-model gradients vs finite differences"};
  const double e = model_gradient_error(3, 48);
  std::ostringstream os;
  os << "max rel err " << e;
  r.detail = os.str();
  r.passed = e < 1e-3;
  return r;
}

inline CheckResult loss_oracles() {
  CheckResult r{"loss functions vs direct evaluation"};
  Rng rng(17);
  auto unit = [&](std::size_t d) {
    std::vector<double> v(d);
    double ss = 0;
    for (double& x : v) ss += (x = rng.normal()) * x;
    for (double& x : v) x /= std::sqrt(ss);
    return v;
  };
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    auto f = unit(16), a = unit(16), b = unit(16);
    worst = std::max(worst, std::abs(mip_loss(f, a, b, 2.0) - std::max(2.0 - (dot(f, a) - dot(f, b)), 0.0)));
    std::vector<std::vector<double>> bank;
    double denom = 0;
    for (int j = 0; j < 8; ++j) {
      bank.push_back(unit(16));
      denom += std::exp(dot(f, bank.back()) / 0.1);
    }
    const double naive = -std::log(std::exp(dot(f, bank[i % 8]) / 0.1) / denom);
    worst = std::max(worst, std::abs(cip_loss(f, bank, static_cast<std::size_t>(i % 8), 0.1) - naive));
  }
  const std::vector<double> e0{1, 0};
  const double ln2 = cip_loss(e0, {{0, 1}, {0, -1}}, 0, 0.1);
  const std::vector<double> e1{0, 1};
  const double margin = mip_loss(e0, e1, e1, 2.0);
  std::ostringstream os;
  os << "max abs err " << worst << ", 2-bank " << ln2 << ", degenerate triplet " << margin;
  r.detail = os.str();
  r.passed = worst < 1e-10 && std::abs(ln2 - std::log(2.0)) < 1e-12 && margin == 2.0;
  return r;
}

inline CheckResult residual_identity() {
  CheckResult r{"long-range residual with t = 1 equals frame difference"};
  const DatasetStore data = generate_synthetic_dataset(8, 3, kMinFrames, 16, 5);
  for (const VideoRecord& v : data.records) {
    const FrameSequence& f = v.frames;
    const std::size_t j = f.frames - 2, fs = f.frame_size();
    const Clip c = long_range_residual_clip(f, 0, j, 1);
    for (std::size_t k = 0; k <= j; ++k)
      for (std::size_t p = 0; p < fs; ++p) {
        const float want = static_cast<float>(std::abs(int(f.frame(k + 1)[p]) - int(f.frame(k)[p]))) / 255.0f;
        if (c.data[k * fs + p] != want) {
          r.detail = "video " + std::to_string(v.id) + " frame " + std::to_string(k) + " differs";
          return r;
        }
      }
  }
  r.passed = true;
  r.detail = std::to_string(data.size()) + " videos, bit-identical";
  return r;
}

inline CheckResult sampler_constraints() {
  CheckResult r{"speed constraints of sampled clips"};
  const DatasetStore data = generate_synthetic_dataset(4, 2, 64, 16, 9);
  SamplerConfig cfg;
  std::size_t violations = 0, same = 0, draws = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const VideoRecord& v = data.records[i % data.size()];
    const MipTriplet m = sample_mip_triplet(v, derive_seed(1, "verify-mip", i), cfg);
    if (!(m.rgb.speed == m.lres_same.speed && m.rgb.speed != m.lres_diff.speed)) ++violations;
    cfg.cip_speed_mode = CipSpeedMode::Different;
    const CipPair d = sample_cip_pair(v, derive_seed(1, "verify-cip", i), cfg);
    if (d.rgb.speed == d.lres.speed) ++violations;
    cfg.cip_speed_mode = CipSpeedMode::Same;
    const CipPair s = sample_cip_pair(v, derive_seed(1, "verify-same", i), cfg);
    if (s.rgb.speed != s.lres.speed) ++violations;
    cfg.cip_speed_mode = CipSpeedMode::Random;
    const CipPair rnd = sample_cip_pair(v, derive_seed(1, "verify-random", i), cfg);
    same += rnd.rgb.speed == rnd.lres.speed;
    ++draws;
    cfg.cip_speed_mode = CipSpeedMode::Different;
  }
  const double frac = static_cast<double>(same) / static_cast<double>(draws);
  std::ostringstream os;
  os << violations << " violations in " << draws << " draws per mode; RANDOM equal-speed fraction " << frac;
  r.detail = os.str();
  r.passed = violations == 0 && frac >= 0.45 && frac <= 0.55;
  return r;
}

inline CheckResult lr_rule() {
  CheckResult r{"learning-rate scaling"};
  r.passed = lr_schedule(0.1, 32) == 0.1 && lr_schedule(0.1, 28) == 0.0875 && lr_schedule(0.1, 256) == 0.8;
  r.detail = "b = 32, 28, 256";
  return r;
}

inline CheckResult checkpoint_roundtrip() {
  CheckResult r{"checkpoint round trip"};
  std::ostringstream a, b;
  write_checkpoint(a, init_params<float>(4));
  std::istringstream in(a.str());
  write_checkpoint(b, read_checkpoint<float>(in));
  r.passed = a.str() == b.str();
  r.detail = std::to_string(a.str().size()) + " bytes";
  return r;
}

}  // namespace verify

inline std::vector<CheckResult> run_verification() {
  const std::vector<std::function<CheckResult()>> checks = {
      verify::conv_oracle,      verify::op_gradients,        verify::model_gradients, verify::loss_oracles,
      verify::residual_identity, verify::sampler_constraints, verify::lr_rule,         verify::checkpoint_roundtrip,
  };
  std::vector<CheckResult> out;
  for (const auto& check : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = check();
    } catch (const std::exception& e) {
      r.name = "check #" + std::to_string(out.size() + 1);
      r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mcpnet
