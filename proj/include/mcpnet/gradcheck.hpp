#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mcpnet/autodiff.hpp"

namespace mcpnet {

struct NamedInput {
  std::string name;
  Tensor<double> value;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // 0 checks every coordinate; otherwise at most this many evenly spaced
  // coordinates per input.
  std::size_t max_coords_per_input = 0;
};

namespace detail {

template <class Build>
double evaluate_loss(const Build& build, const std::vector<NamedInput>& inputs, Gradients<double>* grads) {
  Graph<double> g;
  std::vector<NodeId> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(g.parameter(in.name, in.value));
  const NodeId loss = build(g, leaves);
  if (auto bad = g.first_non_finite()) {
    throw std::runtime_error("grad_check: non-finite value at node #" + std::to_string(bad->index) + " (" +
                             op_name(g.kind(*bad)) + ")");
  }
  const double value = g.value(loss).item();
  if (grads) *grads = g.backward(loss);
  return value;
}

}  // namespace detail

// Largest |analytic - numeric| / max(1, |analytic|, |numeric|) over all
// checked coordinates, using central differences. `build` receives the graph
// and one leaf per input and returns a scalar loss node.
template <class Build>
double grad_check(const Build& build, std::vector<NamedInput> inputs, GradCheckOptions opts = {}) {
  if (!(opts.eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (const auto& in : inputs) {
    if (!in.value.all_finite()) throw std::invalid_argument("grad_check: input '" + in.name + "' is not finite");
  }
  Gradients<double> analytic;
  detail::evaluate_loss(build, inputs, &analytic);

  double worst = 0.0;
  for (auto& in : inputs) {
    const std::size_t n = in.value.size();
    std::size_t step = 1;
    if (opts.max_coords_per_input > 0 && n > opts.max_coords_per_input) {
      step = (n + opts.max_coords_per_input - 1) / opts.max_coords_per_input;
    }
    const auto it = analytic.find(in.name);
    for (std::size_t i = 0; i < n; i += step) {
      const double saved = in.value[i];
      in.value[i] = saved + opts.eps;
      const double up = detail::evaluate_loss(build, inputs, nullptr);
      in.value[i] = saved - opts.eps;
      const double down = detail::evaluate_loss(build, inputs, nullptr);
      in.value[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double a = it == analytic.end() ? 0.0 : it->second[i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace mcpnet
