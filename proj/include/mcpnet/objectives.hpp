#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcpnet/autodiff.hpp"

namespace mcpnet {

struct LossConfig {
  double gamma = 2.0;
  double tau = 0.1;
  double alpha = 0.5;

  void validate() const {
    if (!(gamma > 0)) throw std::invalid_argument("loss: gamma must be > 0");
    if (!(tau > 0)) throw std::invalid_argument("loss: tau must be > 0");
    if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("loss: alpha must be in [0, 1]");
  }
};

struct LossValue {
  double total = 0;
  double mip = 0;
  double cip = 0;
};

inline double dot_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot_similarity: length mismatch (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// ---------------------------------------------------------------------------
// Batched losses on graph nodes. Rows of r, l1, l2 (or q, k) are paired by
// index; both losses are averaged over the batch.

// mean_i max(gamma - (r_i.l1_i - r_i.l2_i), 0)
template <class Real>
NodeId mip_loss(Graph<Real>& g, NodeId r, NodeId l1, NodeId l2, double gamma) {
  const NodeId gap = sub(g, row_dot(g, r, l1), row_dot(g, r, l2));
  return mean(g, relu(g, add_scalar(g, scale(g, gap, Real(-1)), static_cast<Real>(gamma))));
}

// InfoNCE with in-batch negatives: row i of q is matched against every row
// of k, the positive being row i. The denominator includes the positive.
template <class Real>
NodeId cip_loss(Graph<Real>& g, NodeId q, NodeId k, double tau) {
  const std::size_t n = g.value(q).dim(0);
  const NodeId logits = scale(g, pairwise_dot(g, q, k), static_cast<Real>(1.0 / tau));
  const NodeId m = row_max(g, logits);
  const NodeId lse = add(g, log(g, row_sum(g, exp(g, sub_rows(g, logits, m)))), m);
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  return mean(g, sub(g, lse, gather(g, logits, std::move(diag))));
}

template <class Real>
NodeId combined_loss(Graph<Real>& g, NodeId mip, NodeId cip, double alpha) {
  return add(g, scale(g, mip, static_cast<Real>(alpha)), scale(g, cip, static_cast<Real>(1 - alpha)));
}

// ---------------------------------------------------------------------------
// Single-instance forms on plain vectors (64-bit).

namespace detail {

inline Tensor<double> row_tensor(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("loss: empty feature vector");
  return Tensor<double>(Shape{1, v.size()}, std::vector<double>(v.begin(), v.end()));
}

}  // namespace detail

inline double mip_loss(std::span<const double> f_r, std::span<const double> f_l1, std::span<const double> f_l2,
                       double gamma = 2.0) {
  if (f_r.size() != f_l1.size() || f_r.size() != f_l2.size()) throw std::invalid_argument("mip_loss: length mismatch");
  Graph<double> g;
  const NodeId r = g.input(detail::row_tensor(f_r));
  const NodeId a = g.input(detail::row_tensor(f_l1));
  const NodeId b = g.input(detail::row_tensor(f_l2));
  return g.value(mip_loss(g, r, a, b, gamma)).item();
}

inline double cip_loss(std::span<const double> f_r, const std::vector<std::vector<double>>& bank,
                       std::size_t positive_index, double tau = 0.1) {
  if (bank.empty()) throw std::invalid_argument("cip_loss: empty bank");
  if (positive_index >= bank.size()) throw std::out_of_range("cip_loss: positive index out of range");
  if (!(tau > 0)) throw std::invalid_argument("cip_loss: tau must be > 0");
  const std::size_t d = f_r.size();
  std::vector<double> flat;
  flat.reserve(bank.size() * d);
  for (const auto& row : bank) {
    if (row.size() != d) throw std::invalid_argument("cip_loss: bank entry length mismatch");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  Graph<double> g;
  const NodeId q = g.input(detail::row_tensor(f_r));
  const NodeId k = g.input(Tensor<double>(Shape{bank.size(), d}, std::move(flat)));
  const NodeId logits = scale(g, pairwise_dot(g, q, k), 1.0 / tau);
  const NodeId m = row_max(g, logits);
  const NodeId lse = add(g, log(g, row_sum(g, exp(g, sub_rows(g, logits, m)))), m);
  return g.value(sub(g, lse, gather(g, logits, {positive_index}))).item();
}

inline double combined_loss(double mip, double cip, double alpha = 0.5) {
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("combined_loss: alpha must be in [0, 1]");
  return alpha * mip + (1 - alpha) * cip;
}

}  // namespace mcpnet
