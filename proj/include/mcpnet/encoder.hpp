#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcpnet/autodiff.hpp"
#include "mcpnet/dataset.hpp"
#include "mcpnet/rng.hpp"
#include "mcpnet/views.hpp"

namespace mcpnet {

// Backbone: one stage per channel transition, each conv(k3, pad 1) -> batch
// norm -> relu -> max pool. The first stage halves the spatial extent.
struct ArchConfig {
  std::vector<std::size_t> channels{3, 8, 16, 32, 64};
  std::size_t head_hidden = 128;
  std::size_t proj_dim = 128;
  bool normalize_projection = true;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  std::size_t feature_dim() const { return channels.back(); }
  std::size_t stages() const { return channels.size() - 1; }

  void validate() const {
    if (channels.size() < 2) throw std::invalid_argument("arch: need at least one stage");
    if (channels.front() != 3) throw std::invalid_argument("arch: input channels must be 3");
    for (std::size_t c : channels)
      if (c == 0) throw std::invalid_argument("arch: channel count must be positive");
    if (head_hidden == 0 || proj_dim == 0) throw std::invalid_argument("arch: head sizes must be positive");
    if (!(bn_eps > 0)) throw std::invalid_argument("arch: bn_eps must be positive");
    if (!(bn_momentum > 0 && bn_momentum <= 1)) throw std::invalid_argument("arch: bn_momentum must be in (0, 1]");
  }
};

enum class Head { Mip, Cip };
enum class Mode { Train, Eval };

inline const char* head_prefix(Head h) { return h == Head::Mip ? "mip" : "cip"; }

inline std::string conv_name(std::size_t s) { return "enc.conv" + std::to_string(s) + ".weight"; }
inline std::string bn_name(std::size_t s, const char* what) { return "enc.bn" + std::to_string(s) + "." + what; }
inline std::string fc_name(const std::string& prefix, int layer, const char* what) {
  return prefix + ".fc" + std::to_string(layer) + "." + what;
}

inline bool is_buffer_name(const std::string& name) {
  auto ends = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends(".running_mean") || ends(".running_var");
}

// Trainable tensors plus batch-norm running statistics, keyed by name.
template <class Real>
struct ParameterStore {
  std::map<std::string, Tensor<Real>> params;
  std::map<std::string, Tensor<Real>> buffers;
  std::uint64_t seed = 0;

  const Tensor<Real>& at(const std::string& name) const {
    if (auto it = params.find(name); it != params.end()) return it->second;
    if (auto it = buffers.find(name); it != buffers.end()) return it->second;
    throw std::out_of_range("parameter store: no tensor named '" + name + "'");
  }

  bool all_finite() const {
    for (const auto& [_, t] : params)
      if (!t.all_finite()) return false;
    for (const auto& [_, t] : buffers)
      if (!t.all_finite()) return false;
    return true;
  }

  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    out.seed = seed;
    for (const auto& [k, t] : params) out.params.emplace(k, t.template cast<U>());
    for (const auto& [k, t] : buffers) out.buffers.emplace(k, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    return a.params == b.params && a.buffers == b.buffers;
  }
};

namespace detail {

template <class Real>
Tensor<Real> he_normal(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<Real> t(std::move(shape));
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Real& v : t.data()) v = static_cast<Real>(std * rng.normal());
  return t;
}

template <class Real>
void add_affine(ParameterStore<Real>& store, const std::string& prefix, int layer, std::size_t in, std::size_t out,
                std::uint64_t seed) {
  const std::string w = fc_name(prefix, layer, "weight");
  store.params.emplace(w, he_normal<Real>(Shape{out, in}, in, derive_seed(seed, w)));
  store.params.emplace(fc_name(prefix, layer, "bias"), Tensor<Real>(Shape{out}));
}

}  // namespace detail

template <class Real = float>
ParameterStore<Real> init_params(std::uint64_t seed, const ArchConfig& arch = {}) {
  arch.validate();
  ParameterStore<Real> store;
  store.seed = seed;
  for (std::size_t s = 0; s < arch.stages(); ++s) {
    const std::size_t cin = arch.channels[s], cout = arch.channels[s + 1];
    store.params.emplace(conv_name(s), detail::he_normal<Real>(Shape{cout, cin, 3, 3, 3}, cin * 27,
                                                               derive_seed(seed, conv_name(s))));
    store.params.emplace(bn_name(s, "gamma"), Tensor<Real>(Shape{cout}, Real(1)));
    store.params.emplace(bn_name(s, "beta"), Tensor<Real>(Shape{cout}));
    store.buffers.emplace(bn_name(s, "running_mean"), Tensor<Real>(Shape{cout}));
    store.buffers.emplace(bn_name(s, "running_var"), Tensor<Real>(Shape{cout}, Real(1)));
  }
  for (Head h : {Head::Mip, Head::Cip}) {
    detail::add_affine(store, head_prefix(h), 1, arch.feature_dim(), arch.head_hidden, seed);
    detail::add_affine(store, head_prefix(h), 2, arch.head_hidden, arch.proj_dim, seed);
  }
  return store;
}

// Graph leaves for every trainable tensor of a store.
struct Bound {
  std::map<std::string, NodeId> nodes;

  NodeId operator[](const std::string& name) const {
    auto it = nodes.find(name);
    if (it == nodes.end()) throw std::out_of_range("bound parameters: no '" + name + "'");
    return it->second;
  }
};

template <class Real>
Bound bind(Graph<Real>& g, const ParameterStore<Real>& store) {
  Bound b;
  for (const auto& [name, t] : store.params) b.nodes.emplace(name, g.parameter(name, t));
  return b;
}

// Stacks clips ([L,H,W,3] each) into an encoder batch [N,3,L,H,W].
template <class Real>
Tensor<Real> clips_to_tensor(const std::vector<const Clip*>& clips) {
  if (clips.empty()) throw std::invalid_argument("clips_to_tensor: empty batch");
  const Shape& s0 = clips.front()->data.shape();
  if (s0.size() != 4 || s0[3] != 3) throw std::invalid_argument("clips_to_tensor: clip must be [L,H,W,3]");
  const std::size_t l = s0[0], h = s0[1], w = s0[2], plane = l * h * w;
  Tensor<Real> out(Shape{clips.size(), 3, l, h, w});
  for (std::size_t n = 0; n < clips.size(); ++n) {
    if (clips[n]->data.shape() != s0) {
      throw std::invalid_argument("clips_to_tensor: clip " + std::to_string(n) + " has shape " +
                                  shape_string(clips[n]->data.shape()) + ", expected " + shape_string(s0));
    }
    const float* src = clips[n]->data.ptr();
    Real* dst = out.ptr() + n * 3 * plane;
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) dst[c * plane + p] = static_cast<Real>(src[p * 3 + c]);
  }
  return out;
}

template <class Real>
Tensor<Real> clips_to_tensor(const std::vector<Clip>& clips) {
  std::vector<const Clip*> ptrs;
  ptrs.reserve(clips.size());
  for (const Clip& c : clips) ptrs.push_back(&c);
  return clips_to_tensor<Real>(ptrs);
}

// Backbone forward on [N,3,L,H,W] -> [N, feature_dim]. In training mode the
// per-stage batch statistics are written to `stats` (if given) so the caller
// can fold them into the running averages.
template <class Real>
NodeId encode(Graph<Real>& g, const Bound& b, const ParameterStore<Real>& store, NodeId x, const ArchConfig& arch,
              Mode mode, std::vector<BatchStats<Real>>* stats = nullptr) {
  const Shape& xs = g.value(x).shape();
  if (xs.size() != 5 || xs[1] != arch.channels.front()) {
    throw std::invalid_argument("encode: expected [N,3,L,H,W] input, got " + shape_string(xs));
  }
  if (stats) stats->assign(arch.stages(), {});
  NodeId h = x;
  for (std::size_t s = 0; s < arch.stages(); ++s) {
    const Dims3 stride = s == 0 ? Dims3{1, 2, 2} : Dims3{1, 1, 1};
    h = conv3d(g, h, b[conv_name(s)], stride, Dims3{1, 1, 1});
    const NodeId gamma = b[bn_name(s, "gamma")], beta = b[bn_name(s, "beta")];
    const Real eps = static_cast<Real>(arch.bn_eps);
    if (mode == Mode::Train) {
      h = batch_norm(g, h, gamma, beta, eps, stats ? &(*stats)[s] : nullptr);
    } else {
      const auto& rm = store.buffers.at(bn_name(s, "running_mean")).data();
      const auto& rv = store.buffers.at(bn_name(s, "running_var")).data();
      h = batch_norm_eval(g, h, gamma, beta, std::vector<Real>(rm.begin(), rm.end()),
                          std::vector<Real>(rv.begin(), rv.end()), eps);
    }
    h = relu(g, h);
    const Shape& hs = g.value(h).shape();
    const Dims3 win{std::min<std::size_t>(2, hs[2]), std::min<std::size_t>(2, hs[3]), std::min<std::size_t>(2, hs[4])};
    h = max_pool3d(g, h, win, win);
  }
  return global_avg_pool(g, h);
}

// affine -> relu -> affine, then optional unit normalisation.
template <class Real>
NodeId project(Graph<Real>& g, const Bound& b, NodeId feature, Head head, const ArchConfig& arch) {
  const std::string p = head_prefix(head);
  NodeId h = affine(g, feature, b[fc_name(p, 1, "weight")], b[fc_name(p, 1, "bias")]);
  h = relu(g, h);
  h = affine(g, h, b[fc_name(p, 2, "weight")], b[fc_name(p, 2, "bias")]);
  return arch.normalize_projection ? l2_normalize(g, h) : h;
}

template <class Real>
NodeId project_mip(Graph<Real>& g, const Bound& b, NodeId feature, const ArchConfig& arch) {
  return project(g, b, feature, Head::Mip, arch);
}

template <class Real>
NodeId project_cip(Graph<Real>& g, const Bound& b, NodeId feature, const ArchConfig& arch) {
  return project(g, b, feature, Head::Cip, arch);
}

// Exponential moving average; the variance fed in is the unbiased estimate.
template <class Real>
void update_running_stats(ParameterStore<Real>& store, const std::vector<BatchStats<Real>>& stats,
                          const ArchConfig& arch) {
  const Real m = static_cast<Real>(arch.bn_momentum);
  for (std::size_t s = 0; s < stats.size(); ++s) {
    const BatchStats<Real>& st = stats[s];
    if (st.mean.empty()) continue;
    Tensor<Real>& rm = store.buffers.at(bn_name(s, "running_mean"));
    Tensor<Real>& rv = store.buffers.at(bn_name(s, "running_var"));
    const Real correction = st.count > 1 ? static_cast<Real>(st.count) / static_cast<Real>(st.count - 1) : Real(1);
    for (std::size_t k = 0; k < st.mean.size(); ++k) {
      rm[k] = (Real(1) - m) * rm[k] + m * st.mean[k];
      rv[k] = (Real(1) - m) * rv[k] + m * st.var[k] * correction;
    }
  }
}

// Eval-mode backbone features of a clip batch, as plain rows.
template <class Real>
Tensor<Real> backbone_features(const ParameterStore<Real>& store, const std::vector<const Clip*>& clips,
                               const ArchConfig& arch) {
  Graph<Real> g;
  const Bound b = bind(g, store);
  const NodeId x = g.input(clips_to_tensor<Real>(clips));
  return g.value(encode(g, b, store, x, arch, Mode::Eval));
}

// ---------------------------------------------------------------------------
// Checkpoint files: "MCPC", u32 version, u32 count, then per tensor u16 name
// length, name, u8 rank, u32 dims, float32 values. Parameters come first,
// then buffers, each in name order.

inline constexpr std::uint32_t kMcpcVersion = 1;

namespace detail {

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline float get_f32(std::istream& is, const char* what) {
  const std::uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

template <class Real>
void write_tensor(std::ostream& os, const std::string& name, const Tensor<Real>& t) {
  if (name.size() > 0xffff) throw std::invalid_argument("checkpoint: name too long");
  put_u16(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  os.put(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  for (Real v : t.data()) put_f32(os, static_cast<float>(v));
}

}  // namespace detail

template <class Real>
void write_checkpoint(std::ostream& os, const ParameterStore<Real>& store) {
  os.write("MCPC", 4);
  detail::put_u32(os, kMcpcVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(store.params.size() + store.buffers.size()));
  for (const auto& [name, t] : store.params) detail::write_tensor(os, name, t);
  for (const auto& [name, t] : store.buffers) detail::write_tensor(os, name, t);
}

template <class Real = float>
ParameterStore<Real> read_checkpoint(std::istream& is) {
  char magic[4];
  detail::read_exact(is, magic, 4, "magic");
  if (std::string(magic, 4) != "MCPC") throw std::runtime_error("not a checkpoint file (bad magic)");
  const std::uint32_t version = detail::get_u32(is, "version");
  if (version != kMcpcVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(is, "parameter count");
  ParameterStore<Real> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(detail::get_u16(is, "name length"), '\0');
    detail::read_exact(is, name.data(), name.size(), "name");
    char rank = 0;
    detail::read_exact(is, &rank, 1, "rank");
    Shape shape(static_cast<unsigned char>(rank));
    for (auto& d : shape) d = detail::get_u32(is, "dims");
    Tensor<Real> t(shape);
    for (Real& v : t.data()) v = static_cast<Real>(detail::get_f32(is, "values"));
    auto& dst = is_buffer_name(name) ? store.buffers : store.params;
    if (!dst.emplace(name, std::move(t)).second) throw std::runtime_error("checkpoint: duplicate tensor '" + name + "'");
  }
  return store;
}

template <class Real>
void save_checkpoint(const std::string& path, const ParameterStore<Real>& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(os, store);
  if (!os) throw std::runtime_error("write failed: " + path);
}

template <class Real = float>
ParameterStore<Real> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_checkpoint<Real>(is);
}

// Checks that a loaded store carries every tensor of the architecture with the
// right shape.
template <class Real>
void check_compatible(const ParameterStore<Real>& store, const ArchConfig& arch) {
  const ParameterStore<Real> ref = init_params<Real>(0, arch);
  auto check = [](const auto& want, const auto& have) {
    for (const auto& [name, t] : want) {
      auto it = have.find(name);
      if (it == have.end()) throw std::runtime_error("checkpoint is missing '" + name + "'");
      if (it->second.shape() != t.shape()) {
        throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                                 ", expected " + shape_string(t.shape()));
      }
    }
  };
  check(ref.params, store.params);
  check(ref.buffers, store.buffers);
}

}  // namespace mcpnet
