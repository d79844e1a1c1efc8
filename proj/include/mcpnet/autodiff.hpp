#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph records every operation in creation order, so node ids are already
// a topological order and backward() simply walks them in reverse. The op set
// is closed: exactly what the encoder, the projection heads and the losses
// need.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <cblas.h>

#include "mcpnet/tensor.hpp"

namespace mcpnet {

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

struct Dims3 {
  std::size_t t = 1, h = 1, w = 1;
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

enum class OpKind : std::uint8_t {
  Input,
  Parameter,
  Conv3d,
  Affine,
  Relu,
  MaxPool3d,
  GlobalAvgPool,
  BatchNorm,
  BatchNormEval,
  L2Normalize,
  RowDot,
  PairwiseDot,
  Exp,
  Log,
  RowMax,
  RowSum,
  SubRows,
  Gather,
  Scale,
  AddScalar,
  Add,
  Sub,
  Mean,
  Sum,
  SliceRows,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Conv3d: return "conv3d";
    case OpKind::Affine: return "affine";
    case OpKind::Relu: return "relu";
    case OpKind::MaxPool3d: return "max_pool3d";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::BatchNormEval: return "batch_norm_eval";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::RowDot: return "row_dot";
    case OpKind::PairwiseDot: return "pairwise_dot";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::RowMax: return "row_max";
    case OpKind::RowSum: return "row_sum";
    case OpKind::SubRows: return "sub_rows";
    case OpKind::Gather: return "gather";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mean: return "mean";
    case OpKind::Sum: return "sum";
    case OpKind::SliceRows: return "slice_rows";
  }
  return "?";
}

// Parameter name -> gradient. Absent entries mean zero gradient.
template <class Real>
using Gradients = std::map<std::string, Tensor<Real>>;

namespace hooks {
// Negative control for the verification suite: when set, conv3d reports a
// wrong kernel gradient.
inline std::atomic<bool> corrupt_conv_kernel_grad{false};
}  // namespace hooks

template <class Real>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  struct Node {
    OpKind kind = OpKind::Input;
    std::vector<NodeId> inputs;
    Tensor<Real> value;
    std::optional<Tensor<Real>> grad;
    bool requires_grad = false;
    std::string name;
    BackwardFn backward;
  };

  NodeId input(Tensor<Real> value) {
    Node n;
    n.kind = OpKind::Input;
    n.value = std::move(value);
    return push(std::move(n));
  }

  NodeId parameter(std::string name, Tensor<Real> value) {
    if (!param_names_.insert(name).second) {
      throw std::invalid_argument("graph: duplicate parameter '" + name + "'");
    }
    Node n;
    n.kind = OpKind::Parameter;
    n.value = std::move(value);
    n.requires_grad = true;
    n.name = std::move(name);
    return push(std::move(n));
  }

  NodeId record(OpKind kind, std::vector<NodeId> inputs, Tensor<Real> value, BackwardFn backward) {
    Node n;
    n.kind = kind;
    for (NodeId id : inputs) {
      check(id);
      n.requires_grad = n.requires_grad || nodes_[id.index].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor<Real>& value(NodeId id) const { return node(id).value; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  OpKind kind(NodeId id) const { return node(id).kind; }
  std::size_t size() const { return nodes_.size(); }

  const Node& node(NodeId id) const {
    check(id);
    return nodes_[id.index];
  }

  // Upstream gradient of a node during backward.
  const Tensor<Real>& grad(NodeId id) const {
    const Node& n = node(id);
    if (!n.grad) throw std::logic_error("graph: node has no gradient");
    return *n.grad;
  }

  // Gradient buffer of an input, created as zeros on first use. Fan-out
  // contributions are summed into it.
  Tensor<Real>& grad_accumulator(NodeId id) {
    check(id);
    Node& n = nodes_[id.index];
    if (!n.grad) n.grad.emplace(n.value.shape());
    return *n.grad;
  }

  Gradients<Real> backward(NodeId loss) {
    check(loss);
    if (!value(loss).is_scalar()) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_string(value(loss).shape()));
    }
    for (Node& n : nodes_) n.grad.reset();
    grad_accumulator(loss).fill(Real(1));
    for (std::int64_t i = loss.index; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.grad && n.backward) n.backward(*this, NodeId{static_cast<std::uint32_t>(i)});
    }
    Gradients<Real> out;
    for (const Node& n : nodes_) {
      if (n.kind == OpKind::Parameter && n.grad) out.emplace(n.name, *n.grad);
    }
    return out;
  }

  // First node (in topological order) holding a NaN or Inf.
  std::optional<NodeId> first_non_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].value.all_finite()) return NodeId{static_cast<std::uint32_t>(i)};
    }
    return std::nullopt;
  }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void check(NodeId id) const {
    if (id.index >= nodes_.size()) throw std::out_of_range("graph: unknown node id");
  }

  std::vector<Node> nodes_;
  std::set<std::string> param_names_;
};

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <class Real>
void accumulate(Tensor<Real>& dst, const Tensor<Real>& src) {
  Real* d = dst.ptr();
  const Real* s = src.ptr();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// Row-major C = alpha * op(A) op(B) + beta * C.
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                 const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, int(m), int(n), int(k), 1.0f,
              a, int(lda), b, int(ldb), beta, c, int(ldc));
}
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, int(m), int(n), int(k), 1.0,
              a, int(lda), b, int(ldb), beta, c, int(ldc));
}

struct ConvGeometry {
  std::size_t n, c, t, h, w;     // input
  std::size_t k, kt, kh, kw;     // kernel
  Dims3 stride, pad;
  std::size_t ot, oh, ow;        // output

  std::size_t patch() const { return c * kt * kh * kw; }
  std::size_t out_plane() const { return ot * oh * ow; }
  std::size_t in_volume() const { return c * t * h * w; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& k, Dims3 stride, Dims3 pad) {
  require(x.size() == 5, "conv3d: input must be rank 5 [N,C,T,H,W], got " + shape_string(x));
  require(k.size() == 5, "conv3d: kernel must be rank 5 [K,C,kt,kh,kw], got " + shape_string(k));
  require(stride.t >= 1 && stride.h >= 1 && stride.w >= 1, "conv3d: stride components must be >= 1");
  require(x[1] == k[1], "conv3d: channel dimension (dim 1) mismatch: input has " +
                            std::to_string(x[1]) + ", kernel expects " + std::to_string(k[1]));
  const char* names[3] = {"time (dim 2)", "height (dim 3)", "width (dim 4)"};
  const std::size_t pads[3] = {pad.t, pad.h, pad.w};
  for (int d = 0; d < 3; ++d) {
    require(k[2 + d] <= x[2 + d] + 2 * pads[d],
            std::string("conv3d: kernel ") + names[d] + " extent " + std::to_string(k[2 + d]) +
                " exceeds padded input extent " + std::to_string(x[2 + d] + 2 * pads[d]));
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], x[4], k[0], k[2], k[3], k[4], stride, pad, 0, 0, 0};
  g.ot = (g.t + 2 * pad.t - g.kt) / stride.t + 1;
  g.oh = (g.h + 2 * pad.h - g.kh) / stride.h + 1;
  g.ow = (g.w + 2 * pad.w - g.kw) / stride.w + 1;
  return g;
}

// col has shape [patch, out_plane]; rows ordered (c, kt, kh, kw).
template <class Real>
void im2col(const Real* x, const ConvGeometry& g, Real* col) {
  const std::size_t plane = g.out_plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t a = 0; a < g.kt; ++a) {
      for (std::size_t b = 0; b < g.kh; ++b) {
        for (std::size_t d = 0; d < g.kw; ++d, ++row) {
          Real* dst = col + row * plane;
          for (std::size_t ot = 0; ot < g.ot; ++ot) {
            const std::int64_t it = static_cast<std::int64_t>(ot * g.stride.t + a) - static_cast<std::int64_t>(g.pad.t);
            for (std::size_t oh = 0; oh < g.oh; ++oh) {
              const std::int64_t ih = static_cast<std::int64_t>(oh * g.stride.h + b) - static_cast<std::int64_t>(g.pad.h);
              Real* out = dst + (ot * g.oh + oh) * g.ow;
              if (it < 0 || it >= static_cast<std::int64_t>(g.t) || ih < 0 || ih >= static_cast<std::int64_t>(g.h)) {
                std::fill(out, out + g.ow, Real(0));
                continue;
              }
              const Real* src = x + ((c * g.t + static_cast<std::size_t>(it)) * g.h + static_cast<std::size_t>(ih)) * g.w;
              for (std::size_t ow = 0; ow < g.ow; ++ow) {
                const std::int64_t iw = static_cast<std::int64_t>(ow * g.stride.w + d) - static_cast<std::int64_t>(g.pad.w);
                out[ow] = (iw < 0 || iw >= static_cast<std::int64_t>(g.w)) ? Real(0) : src[iw];
              }
            }
          }
        }
      }
    }
  }
}

template <class Real>
void col2im(const Real* col, const ConvGeometry& g, Real* dx) {
  const std::size_t plane = g.out_plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t a = 0; a < g.kt; ++a) {
      for (std::size_t b = 0; b < g.kh; ++b) {
        for (std::size_t d = 0; d < g.kw; ++d, ++row) {
          const Real* src = col + row * plane;
          for (std::size_t ot = 0; ot < g.ot; ++ot) {
            const std::int64_t it = static_cast<std::int64_t>(ot * g.stride.t + a) - static_cast<std::int64_t>(g.pad.t);
            if (it < 0 || it >= static_cast<std::int64_t>(g.t)) continue;
            for (std::size_t oh = 0; oh < g.oh; ++oh) {
              const std::int64_t ih = static_cast<std::int64_t>(oh * g.stride.h + b) - static_cast<std::int64_t>(g.pad.h);
              if (ih < 0 || ih >= static_cast<std::int64_t>(g.h)) continue;
              const Real* in = src + (ot * g.oh + oh) * g.ow;
              Real* dst = dx + ((c * g.t + static_cast<std::size_t>(it)) * g.h + static_cast<std::size_t>(ih)) * g.w;
              for (std::size_t ow = 0; ow < g.ow; ++ow) {
                const std::int64_t iw = static_cast<std::int64_t>(ow * g.stride.w + d) - static_cast<std::int64_t>(g.pad.w);
                if (iw >= 0 && iw < static_cast<std::int64_t>(g.w)) dst[iw] += in[ow];
              }
            }
          }
        }
      }
    }
  }
}

inline void require_rank2(const Shape& s, const char* op) {
  require(s.size() == 2, std::string(op) + ": expected rank-2 [N,D] input, got " + shape_string(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Network ops

// Cross-correlation without bias. Output extents are
// (in + 2*pad - kernel) / stride + 1 with floor division.
template <class Real>
NodeId conv3d(Graph<Real>& g, NodeId x, NodeId kernel, Dims3 stride = {}, Dims3 pad = {0, 0, 0}) {
  const Tensor<Real>& xv = g.value(x);
  const Tensor<Real>& kv = g.value(kernel);
  const detail::ConvGeometry geo = detail::conv_geometry(xv.shape(), kv.shape(), stride, pad);
  const std::size_t patch = geo.patch(), plane = geo.out_plane();

  Tensor<Real> out(Shape{geo.n, geo.k, geo.ot, geo.oh, geo.ow});
  std::vector<Real> col(patch * plane);
  for (std::size_t n = 0; n < geo.n; ++n) {
    detail::im2col(xv.ptr() + n * geo.in_volume(), geo, col.data());
    detail::gemm(false, false, geo.k, plane, patch, kv.ptr(), patch, col.data(), plane, Real(0),
                 out.ptr() + n * geo.k * plane, plane);
  }

  return g.record(OpKind::Conv3d, {x, kernel}, std::move(out), [x, kernel, geo](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    const Tensor<Real>& xv = g.value(x);
    const Tensor<Real>& kv = g.value(kernel);
    const std::size_t patch = geo.patch(), plane = geo.out_plane();
    const bool want_x = g.requires_grad(x), want_k = g.requires_grad(kernel);
    std::vector<Real> col(patch * plane), dcol(want_x ? patch * plane : 0);
    Tensor<Real>* dk = want_k ? &g.grad_accumulator(kernel) : nullptr;
    Tensor<Real>* dx = want_x ? &g.grad_accumulator(x) : nullptr;
    for (std::size_t n = 0; n < geo.n; ++n) {
      const Real* dyn = dy.ptr() + n * geo.k * plane;
      if (dk) {
        detail::im2col(xv.ptr() + n * geo.in_volume(), geo, col.data());
        detail::gemm(false, true, geo.k, patch, plane, dyn, plane, col.data(), plane, Real(1), dk->ptr(), patch);
      }
      if (dx) {
        detail::gemm(true, false, patch, plane, geo.k, kv.ptr(), patch, dyn, plane, Real(0), dcol.data(), plane);
        detail::col2im(dcol.data(), geo, dx->ptr() + n * geo.in_volume());
      }
    }
    if (dk && hooks::corrupt_conv_kernel_grad.load()) {
      for (Real& v : dk->data()) v *= Real(1.5);
    }
  });
}

// y = x W^T + b with x [N,I], W [O,I], b [O].
template <class Real>
NodeId affine(Graph<Real>& g, NodeId x, NodeId weight, NodeId bias) {
  const Tensor<Real>& xv = g.value(x);
  const Tensor<Real>& wv = g.value(weight);
  const Tensor<Real>& bv = g.value(bias);
  detail::require_rank2(xv.shape(), "affine");
  detail::require(wv.rank() == 2 && wv.dim(1) == xv.dim(1),
                  "affine: weight shape " + shape_string(wv.shape()) + " incompatible with input " +
                      shape_string(xv.shape()) + " (dim 1)");
  detail::require(bv.rank() == 1 && bv.dim(0) == wv.dim(0),
                  "affine: bias shape " + shape_string(bv.shape()) + " does not match output width");
  const std::size_t n = xv.dim(0), in = xv.dim(1), o = wv.dim(0);
  Tensor<Real> out(Shape{n, o});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < o; ++j) {
      Real s = 0;
      for (std::size_t k = 0; k < in; ++k) s += xv[i * in + k] * wv[j * in + k];
      out[i * o + j] = s + bv[j];
    }
  }
  return g.record(OpKind::Affine, {x, weight, bias}, std::move(out),
                  [x, weight, bias, n, in, o](Graph<Real>& g, NodeId self) {
                    const Tensor<Real>& dy = g.grad(self);
                    const Tensor<Real>& xv = g.value(x);
                    const Tensor<Real>& wv = g.value(weight);
                    if (g.requires_grad(x)) {
                      Tensor<Real>& dx = g.grad_accumulator(x);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < o; ++j) {
                          const Real d = dy[i * o + j];
                          for (std::size_t k = 0; k < in; ++k) dx[i * in + k] += d * wv[j * in + k];
                        }
                    }
                    if (g.requires_grad(weight)) {
                      Tensor<Real>& dw = g.grad_accumulator(weight);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < o; ++j) {
                          const Real d = dy[i * o + j];
                          for (std::size_t k = 0; k < in; ++k) dw[j * in + k] += d * xv[i * in + k];
                        }
                    }
                    if (g.requires_grad(bias)) {
                      Tensor<Real>& db = g.grad_accumulator(bias);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < o; ++j) db[j] += dy[i * o + j];
                    }
                  });
}

template <class Real>
NodeId relu(Graph<Real>& g, NodeId x) {
  Tensor<Real> out = g.value(x);
  for (Real& v : out.data()) v = v > Real(0) ? v : Real(0);
  return g.record(OpKind::Relu, {x}, std::move(out), [x](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    const Tensor<Real>& xv = g.value(x);
    Tensor<Real>& dx = g.grad_accumulator(x);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (xv[i] > Real(0)) dx[i] += dy[i];
    }
  });
}

// Unpadded max pooling over [N,C,T,H,W]; ties go to the first element.
template <class Real>
NodeId max_pool3d(Graph<Real>& g, NodeId x, Dims3 window, Dims3 stride) {
  const Tensor<Real>& xv = g.value(x);
  detail::require(xv.rank() == 5, "max_pool3d: input must be rank 5, got " + shape_string(xv.shape()));
  detail::require(window.t <= xv.dim(2) && window.h <= xv.dim(3) && window.w <= xv.dim(4),
                  "max_pool3d: window larger than input " + shape_string(xv.shape()));
  detail::require(stride.t >= 1 && stride.h >= 1 && stride.w >= 1, "max_pool3d: stride must be >= 1");
  const std::size_t nc = xv.dim(0) * xv.dim(1), t = xv.dim(2), h = xv.dim(3), w = xv.dim(4);
  const std::size_t ot = (t - window.t) / stride.t + 1, oh = (h - window.h) / stride.h + 1,
                    ow = (w - window.w) / stride.w + 1;
  Tensor<Real> out(Shape{xv.dim(0), xv.dim(1), ot, oh, ow});
  std::vector<std::uint32_t> argmax(out.size());
  std::size_t o = 0;
  for (std::size_t p = 0; p < nc; ++p) {
    const std::size_t base = p * t * h * w;
    for (std::size_t a = 0; a < ot; ++a)
      for (std::size_t b = 0; b < oh; ++b)
        for (std::size_t c = 0; c < ow; ++c, ++o) {
          std::size_t best = base + ((a * stride.t) * h + b * stride.h) * w + c * stride.w;
          for (std::size_t i = 0; i < window.t; ++i)
            for (std::size_t j = 0; j < window.h; ++j)
              for (std::size_t k = 0; k < window.w; ++k) {
                const std::size_t idx = base + ((a * stride.t + i) * h + b * stride.h + j) * w + c * stride.w + k;
                if (xv[idx] > xv[best]) best = idx;
              }
          out[o] = xv[best];
          argmax[o] = static_cast<std::uint32_t>(best);
        }
  }
  return g.record(OpKind::MaxPool3d, {x}, std::move(out),
                  [x, argmax = std::move(argmax)](Graph<Real>& g, NodeId self) {
                    const Tensor<Real>& dy = g.grad(self);
                    Tensor<Real>& dx = g.grad_accumulator(x);
                    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[i];
                  });
}

// [N,C,...] -> [N,C], mean over every trailing dimension.
template <class Real>
NodeId global_avg_pool(Graph<Real>& g, NodeId x) {
  const Tensor<Real>& xv = g.value(x);
  detail::require(xv.rank() >= 3, "global_avg_pool: expected rank >= 3, got " + shape_string(xv.shape()));
  const std::size_t nc = xv.dim(0) * xv.dim(1), s = xv.size() / nc;
  Tensor<Real> out(Shape{xv.dim(0), xv.dim(1)});
  for (std::size_t i = 0; i < nc; ++i) {
    Real acc = 0;
    for (std::size_t j = 0; j < s; ++j) acc += xv[i * s + j];
    out[i] = acc / static_cast<Real>(s);
  }
  return g.record(OpKind::GlobalAvgPool, {x}, std::move(out), [x, nc, s](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    Tensor<Real>& dx = g.grad_accumulator(x);
    for (std::size_t i = 0; i < nc; ++i) {
      const Real d = dy[i] / static_cast<Real>(s);
      for (std::size_t j = 0; j < s; ++j) dx[i * s + j] += d;
    }
  });
}

// Per-channel batch statistics of the most recent training-mode forward.
template <class Real>
struct BatchStats {
  std::vector<Real> mean;
  std::vector<Real> var;  // biased
  std::size_t count = 0;
};

// Normalises each channel of [N,C,...] with batch mean/variance, then applies
// gamma/beta.
template <class Real>
NodeId batch_norm(Graph<Real>& g, NodeId x, NodeId gamma, NodeId beta, Real eps = Real(1e-5),
                  BatchStats<Real>* stats = nullptr) {
  const Tensor<Real>& xv = g.value(x);
  detail::require(xv.rank() >= 2, "batch_norm: expected rank >= 2, got " + shape_string(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), s = xv.size() / (n * c), m = n * s;
  detail::require(g.value(gamma).size() == c && g.value(beta).size() == c,
                  "batch_norm: gamma/beta must have " + std::to_string(c) + " entries (dim 1)");
  detail::require(m >= 2, "batch_norm: needs at least two values per channel");
  std::vector<Real> mean(c, 0), var(c, 0), invstd(c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const Real* p = xv.ptr() + (i * c + k) * s;
      for (std::size_t j = 0; j < s; ++j) mean[k] += p[j];
    }
  for (auto& v : mean) v /= static_cast<Real>(m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const Real* p = xv.ptr() + (i * c + k) * s;
      for (std::size_t j = 0; j < s; ++j) {
        const Real d = p[j] - mean[k];
        var[k] += d * d;
      }
    }
  for (std::size_t k = 0; k < c; ++k) {
    var[k] /= static_cast<Real>(m);
    invstd[k] = Real(1) / std::sqrt(var[k] + eps);
  }
  const Tensor<Real>& gv = g.value(gamma);
  const Tensor<Real>& bv = g.value(beta);
  Tensor<Real> xhat(xv.shape()), out(xv.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t off = (i * c + k) * s;
      for (std::size_t j = 0; j < s; ++j) {
        const Real xh = (xv[off + j] - mean[k]) * invstd[k];
        xhat[off + j] = xh;
        out[off + j] = gv[k] * xh + bv[k];
      }
    }
  if (stats) *stats = BatchStats<Real>{mean, var, m};
  return g.record(OpKind::BatchNorm, {x, gamma, beta}, std::move(out),
                  [x, gamma, beta, n, c, s, m, invstd = std::move(invstd), xhat = std::move(xhat)](
                      Graph<Real>& g, NodeId self) {
                    const Tensor<Real>& dy = g.grad(self);
                    const Tensor<Real>& gv = g.value(gamma);
                    std::vector<Real> sum_dy(c, 0), sum_dy_xhat(c, 0);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t k = 0; k < c; ++k) {
                        const std::size_t off = (i * c + k) * s;
                        for (std::size_t j = 0; j < s; ++j) {
                          sum_dy[k] += dy[off + j];
                          sum_dy_xhat[k] += dy[off + j] * xhat[off + j];
                        }
                      }
                    if (g.requires_grad(gamma)) {
                      Tensor<Real>& dg = g.grad_accumulator(gamma);
                      for (std::size_t k = 0; k < c; ++k) dg[k] += sum_dy_xhat[k];
                    }
                    if (g.requires_grad(beta)) {
                      Tensor<Real>& db = g.grad_accumulator(beta);
                      for (std::size_t k = 0; k < c; ++k) db[k] += sum_dy[k];
                    }
                    if (g.requires_grad(x)) {
                      Tensor<Real>& dx = g.grad_accumulator(x);
                      const Real inv_m = Real(1) / static_cast<Real>(m);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t k = 0; k < c; ++k) {
                          const std::size_t off = (i * c + k) * s;
                          const Real scale = gv[k] * invstd[k];
                          for (std::size_t j = 0; j < s; ++j) {
                            dx[off + j] += scale * (dy[off + j] - inv_m * sum_dy[k] -
                                                    xhat[off + j] * inv_m * sum_dy_xhat[k]);
                          }
                        }
                    }
                  });
}

// Evaluation-mode normalisation with fixed running statistics.
template <class Real>
NodeId batch_norm_eval(Graph<Real>& g, NodeId x, NodeId gamma, NodeId beta, std::vector<Real> mean,
                       std::vector<Real> var, Real eps = Real(1e-5)) {
  const Tensor<Real>& xv = g.value(x);
  detail::require(xv.rank() >= 2, "batch_norm_eval: expected rank >= 2, got " + shape_string(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), s = xv.size() / (n * c);
  detail::require(mean.size() == c && var.size() == c && g.value(gamma).size() == c &&
                      g.value(beta).size() == c,
                  "batch_norm_eval: statistics must have " + std::to_string(c) + " entries (dim 1)");
  std::vector<Real> invstd(c);
  for (std::size_t k = 0; k < c; ++k) invstd[k] = Real(1) / std::sqrt(var[k] + eps);
  const Tensor<Real>& gv = g.value(gamma);
  const Tensor<Real>& bv = g.value(beta);
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t off = (i * c + k) * s;
      for (std::size_t j = 0; j < s; ++j) out[off + j] = gv[k] * ((xv[off + j] - mean[k]) * invstd[k]) + bv[k];
    }
  return g.record(OpKind::BatchNormEval, {x, gamma, beta}, std::move(out),
                  [x, gamma, beta, n, c, s, mean = std::move(mean), invstd](Graph<Real>& g, NodeId self) {
                    const Tensor<Real>& dy = g.grad(self);
                    const Tensor<Real>& xv = g.value(x);
                    const Tensor<Real>& gv = g.value(gamma);
                    const bool wx = g.requires_grad(x), wg = g.requires_grad(gamma), wb = g.requires_grad(beta);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t k = 0; k < c; ++k) {
                        const std::size_t off = (i * c + k) * s;
                        for (std::size_t j = 0; j < s; ++j) {
                          const Real d = dy[off + j];
                          if (wx) g.grad_accumulator(x)[off + j] += d * gv[k] * invstd[k];
                          if (wg) g.grad_accumulator(gamma)[k] += d * (xv[off + j] - mean[k]) * invstd[k];
                          if (wb) g.grad_accumulator(beta)[k] += d;
                        }
                      }
                  });
}

// ---------------------------------------------------------------------------
// Embedding and loss ops

// Row-wise unit normalisation of [N,D] (or a single [D] vector).
template <class Real>
NodeId l2_normalize(Graph<Real>& g, NodeId x) {
  const Tensor<Real>& xv = g.value(x);
  detail::require(xv.rank() == 1 || xv.rank() == 2,
                  "l2_normalize: expected [D] or [N,D], got " + shape_string(xv.shape()));
  const std::size_t d = xv.dim(xv.rank() - 1), n = xv.size() / d;
  Tensor<Real> out(xv.shape());
  std::vector<Real> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    Real ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[i * d + j] * xv[i * d + j];
    const Real norm = std::sqrt(ss);
    if (!(norm > Real(0))) throw std::domain_error("l2_normalize: zero vector at row " + std::to_string(i));
    norms[i] = norm;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] / norm;
  }
  return g.record(OpKind::L2Normalize, {x}, std::move(out),
                  [x, n, d, norms = std::move(norms)](Graph<Real>& g, NodeId self) {
                    const Tensor<Real>& dy = g.grad(self);
                    const Tensor<Real>& y = g.value(self);
                    Tensor<Real>& dx = g.grad_accumulator(x);
                    for (std::size_t i = 0; i < n; ++i) {
                      Real proj = 0;
                      for (std::size_t j = 0; j < d; ++j) proj += y[i * d + j] * dy[i * d + j];
                      for (std::size_t j = 0; j < d; ++j)
                        dx[i * d + j] += (dy[i * d + j] - y[i * d + j] * proj) / norms[i];
                    }
                  });
}

// Row-wise dot products: [N,D] x [N,D] -> [N].
template <class Real>
NodeId row_dot(Graph<Real>& g, NodeId a, NodeId b) {
  const Tensor<Real>& av = g.value(a);
  const Tensor<Real>& bv = g.value(b);
  detail::require_rank2(av.shape(), "row_dot");
  detail::require(av.shape() == bv.shape(), "row_dot: shape mismatch " + shape_string(av.shape()) + " vs " +
                                                shape_string(bv.shape()));
  const std::size_t n = av.dim(0), d = av.dim(1);
  Tensor<Real> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    Real s = 0;
    for (std::size_t j = 0; j < d; ++j) s += av[i * d + j] * bv[i * d + j];
    out[i] = s;
  }
  return g.record(OpKind::RowDot, {a, b}, std::move(out), [a, b, n, d](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    const Tensor<Real>& av = g.value(a);
    const Tensor<Real>& bv = g.value(b);
    if (g.requires_grad(a)) {
      Tensor<Real>& da = g.grad_accumulator(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) da[i * d + j] += dy[i] * bv[i * d + j];
    }
    if (g.requires_grad(b)) {
      Tensor<Real>& db = g.grad_accumulator(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) db[i * d + j] += dy[i] * av[i * d + j];
    }
  });
}

// All pairwise dot products: [N,D] x [M,D] -> [N,M].
template <class Real>
NodeId pairwise_dot(Graph<Real>& g, NodeId a, NodeId b) {
  const Tensor<Real>& av = g.value(a);
  const Tensor<Real>& bv = g.value(b);
  detail::require_rank2(av.shape(), "pairwise_dot");
  detail::require_rank2(bv.shape(), "pairwise_dot");
  detail::require(av.dim(1) == bv.dim(1), "pairwise_dot: feature dimension (dim 1) mismatch");
  const std::size_t n = av.dim(0), m = bv.dim(0), d = av.dim(1);
  Tensor<Real> out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) {
      Real s = 0;
      for (std::size_t j = 0; j < d; ++j) s += av[i * d + j] * bv[k * d + j];
      out[i * m + k] = s;
    }
  return g.record(OpKind::PairwiseDot, {a, b}, std::move(out), [a, b, n, m, d](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    const Tensor<Real>& av = g.value(a);
    const Tensor<Real>& bv = g.value(b);
    if (g.requires_grad(a)) {
      Tensor<Real>& da = g.grad_accumulator(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < m; ++k)
          for (std::size_t j = 0; j < d; ++j) da[i * d + j] += dy[i * m + k] * bv[k * d + j];
    }
    if (g.requires_grad(b)) {
      Tensor<Real>& db = g.grad_accumulator(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < m; ++k)
          for (std::size_t j = 0; j < d; ++j) db[k * d + j] += dy[i * m + k] * av[i * d + j];
    }
  });
}

template <class Real>
NodeId exp(Graph<Real>& g, NodeId x) {
  Tensor<Real> out = g.value(x);
  for (Real& v : out.data()) v = std::exp(v);
  return g.record(OpKind::Exp, {x}, std::move(out), [x](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    const Tensor<Real>& y = g.value(self);
    Tensor<Real>& dx = g.grad_accumulator(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * y[i];
  });
}

template <class Real>
NodeId log(Graph<Real>& g, NodeId x) {
  Tensor<Real> out = g.value(x);
  for (Real& v : out.data()) {
    if (!(v > Real(0))) throw std::domain_error("log: non-positive argument");
    v = std::log(v);
  }
  return g.record(OpKind::Log, {x}, std::move(out), [x](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    const Tensor<Real>& xv = g.value(x);
    Tensor<Real>& dx = g.grad_accumulator(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] / xv[i];
  });
}

// Row maximum of [N,M] -> [N]; the gradient goes to the first maximiser.
template <class Real>
NodeId row_max(Graph<Real>& g, NodeId x) {
  const Tensor<Real>& xv = g.value(x);
  detail::require_rank2(xv.shape(), "row_max");
  const std::size_t n = xv.dim(0), m = xv.dim(1);
  Tensor<Real> out(Shape{n});
  std::vector<std::size_t> arg(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < m; ++k)
      if (xv[i * m + k] > xv[i * m + best]) best = k;
    arg[i] = best;
    out[i] = xv[i * m + best];
  }
  return g.record(OpKind::RowMax, {x}, std::move(out), [x, m, arg = std::move(arg)](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    Tensor<Real>& dx = g.grad_accumulator(x);
    for (std::size_t i = 0; i < arg.size(); ++i) dx[i * m + arg[i]] += dy[i];
  });
}

template <class Real>
NodeId row_sum(Graph<Real>& g, NodeId x) {
  const Tensor<Real>& xv = g.value(x);
  detail::require_rank2(xv.shape(), "row_sum");
  const std::size_t n = xv.dim(0), m = xv.dim(1);
  Tensor<Real> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    Real s = 0;
    for (std::size_t k = 0; k < m; ++k) s += xv[i * m + k];
    out[i] = s;
  }
  return g.record(OpKind::RowSum, {x}, std::move(out), [x, n, m](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    Tensor<Real>& dx = g.grad_accumulator(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < m; ++k) dx[i * m + k] += dy[i];
  });
}

// x[i,k] - v[i] for x [N,M], v [N].
template <class Real>
NodeId sub_rows(Graph<Real>& g, NodeId x, NodeId v) {
  const Tensor<Real>& xv = g.value(x);
  const Tensor<Real>& vv = g.value(v);
  detail::require_rank2(xv.shape(), "sub_rows");
  detail::require(vv.rank() == 1 && vv.dim(0) == xv.dim(0), "sub_rows: row vector must have N entries (dim 0)");
  const std::size_t n = xv.dim(0), m = xv.dim(1);
  Tensor<Real> out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) out[i * m + k] -= vv[i];
  return g.record(OpKind::SubRows, {x, v}, std::move(out), [x, v, n, m](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    if (g.requires_grad(x)) detail::accumulate(g.grad_accumulator(x), dy);
    if (g.requires_grad(v)) {
      Tensor<Real>& dv = g.grad_accumulator(v);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < m; ++k) dv[i] -= dy[i * m + k];
    }
  });
}

// Picks x[i, index[i]] from [N,M] -> [N].
template <class Real>
NodeId gather(Graph<Real>& g, NodeId x, std::vector<std::size_t> index) {
  const Tensor<Real>& xv = g.value(x);
  detail::require_rank2(xv.shape(), "gather");
  const std::size_t n = xv.dim(0), m = xv.dim(1);
  detail::require(index.size() == n, "gather: need one index per row");
  Tensor<Real> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] >= m) throw std::out_of_range("gather: column index out of range");
    out[i] = xv[i * m + index[i]];
  }
  return g.record(OpKind::Gather, {x}, std::move(out), [x, m, index = std::move(index)](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    Tensor<Real>& dx = g.grad_accumulator(x);
    for (std::size_t i = 0; i < index.size(); ++i) dx[i * m + index[i]] += dy[i];
  });
}

template <class Real>
NodeId scale(Graph<Real>& g, NodeId x, Real factor) {
  Tensor<Real> out = g.value(x);
  for (Real& v : out.data()) v *= factor;
  return g.record(OpKind::Scale, {x}, std::move(out), [x, factor](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    Tensor<Real>& dx = g.grad_accumulator(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * dy[i];
  });
}

template <class Real>
NodeId add_scalar(Graph<Real>& g, NodeId x, Real c) {
  Tensor<Real> out = g.value(x);
  for (Real& v : out.data()) v += c;
  return g.record(OpKind::AddScalar, {x}, std::move(out), [x](Graph<Real>& g, NodeId self) {
    detail::accumulate(g.grad_accumulator(x), g.grad(self));
  });
}

template <class Real>
NodeId add(Graph<Real>& g, NodeId a, NodeId b) {
  detail::require(g.value(a).shape() == g.value(b).shape(), "add: shape mismatch");
  Tensor<Real> out = g.value(a);
  const Tensor<Real>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.record(OpKind::Add, {a, b}, std::move(out), [a, b](Graph<Real>& g, NodeId self) {
    if (g.requires_grad(a)) detail::accumulate(g.grad_accumulator(a), g.grad(self));
    if (g.requires_grad(b)) detail::accumulate(g.grad_accumulator(b), g.grad(self));
  });
}

template <class Real>
NodeId sub(Graph<Real>& g, NodeId a, NodeId b) {
  detail::require(g.value(a).shape() == g.value(b).shape(), "sub: shape mismatch");
  Tensor<Real> out = g.value(a);
  const Tensor<Real>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return g.record(OpKind::Sub, {a, b}, std::move(out), [a, b](Graph<Real>& g, NodeId self) {
    const Tensor<Real>& dy = g.grad(self);
    if (g.requires_grad(a)) detail::accumulate(g.grad_accumulator(a), dy);
    if (g.requires_grad(b)) {
      Tensor<Real>& db = g.grad_accumulator(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] -= dy[i];
    }
  });
}

template <class Real>
NodeId sum(Graph<Real>& g, NodeId x) {
  Real s = 0;
  for (Real v : g.value(x).data()) s += v;
  return g.record(OpKind::Sum, {x}, Tensor<Real>::scalar(s), [x](Graph<Real>& g, NodeId self) {
    const Real d = g.grad(self).item();
    for (Real& v : g.grad_accumulator(x).data()) v += d;
  });
}

template <class Real>
NodeId mean(Graph<Real>& g, NodeId x) {
  const std::size_t n = g.value(x).size();
  Real s = 0;
  for (Real v : g.value(x).data()) s += v;
  return g.record(OpKind::Mean, {x}, Tensor<Real>::scalar(s / static_cast<Real>(n)), [x, n](Graph<Real>& g, NodeId self) {
    const Real d = g.grad(self).item() / static_cast<Real>(n);
    for (Real& v : g.grad_accumulator(x).data()) v += d;
  });
}

// Rows [begin, end) along dimension 0.
template <class Real>
NodeId slice_rows(Graph<Real>& g, NodeId x, std::size_t begin, std::size_t end) {
  const Tensor<Real>& xv = g.value(x);
  detail::require(xv.rank() >= 1 && begin < end && end <= xv.dim(0),
                  "slice_rows: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") for shape " + shape_string(xv.shape()));
  const std::size_t row = xv.size() / xv.dim(0);
  Shape shape = xv.shape();
  shape[0] = end - begin;
  std::vector<Real> data(xv.ptr() + begin * row, xv.ptr() + end * row);
  return g.record(OpKind::SliceRows, {x}, Tensor<Real>(std::move(shape), std::move(data)),
                  [x, begin, row](Graph<Real>& g, NodeId self) {
                    const Tensor<Real>& dy = g.grad(self);
                    Tensor<Real>& dx = g.grad_accumulator(x);
                    for (std::size_t i = 0; i < dy.size(); ++i) dx[begin * row + i] += dy[i];
                  });
}

}  // namespace mcpnet
