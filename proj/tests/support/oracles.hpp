#pragma once

// Reference implementations used only by tests. Nothing here calls into the
// library's kernels, so they stay independent of the code they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "latentmap/tensor/graph.hpp"

namespace latentmap::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// Seven nested loops over (co, x, y, z, ci, a, b, e) flattened by hand.
inline Tensor<double> naive_conv3d(const Tensor<double>& x, const Tensor<double>& w,
                                   const Tensor<double>& b, int stride, int pad) {
  const int cin = x.dim(0), cout = w.dim(0), k = w.dim(2);
  int out[3];
  for (int ax = 0; ax < 3; ++ax) out[ax] = (x.dim(ax + 1) + 2 * pad - k) / stride + 1;
  Tensor<double> y(Shape{cout, out[0], out[1], out[2]});
  for (int co = 0; co < cout; ++co)
    for (int i = 0; i < out[0]; ++i)
      for (int j = 0; j < out[1]; ++j)
        for (int l = 0; l < out[2]; ++l) {
          double s = b[co];
          for (int ci = 0; ci < cin; ++ci)
            for (int a = 0; a < k; ++a)
              for (int c = 0; c < k; ++c)
                for (int e = 0; e < k; ++e) {
                  const int ii = i * stride - pad + a;
                  const int jj = j * stride - pad + c;
                  const int ll = l * stride - pad + e;
                  if (ii < 0 || jj < 0 || ll < 0 || ii >= x.dim(1) || jj >= x.dim(2) ||
                      ll >= x.dim(3))
                    continue;
                  s += x.at(ci, ii, jj, ll) * w.at(co, ci, a, c, e);
                }
          y.at(co, i, j, l) = s;
        }
  return y;
}

/// Scatter form of the transposed convolution.
inline Tensor<double> naive_conv_transpose3d(const Tensor<double>& x, const Tensor<double>& w,
                                             const Tensor<double>& b, int stride, int pad) {
  const int cin = x.dim(0), cout = w.dim(1), k = w.dim(2);
  int out[3];
  for (int ax = 0; ax < 3; ++ax) out[ax] = (x.dim(ax + 1) - 1) * stride - 2 * pad + k;
  Tensor<double> y(Shape{cout, out[0], out[1], out[2]});
  for (int co = 0; co < cout; ++co)
    for (int i = 0; i < out[0]; ++i)
      for (int j = 0; j < out[1]; ++j)
        for (int l = 0; l < out[2]; ++l) y.at(co, i, j, l) = b[co];
  for (int ci = 0; ci < cin; ++ci)
    for (int i = 0; i < x.dim(1); ++i)
      for (int j = 0; j < x.dim(2); ++j)
        for (int l = 0; l < x.dim(3); ++l)
          for (int co = 0; co < cout; ++co)
            for (int a = 0; a < k; ++a)
              for (int c = 0; c < k; ++c)
                for (int e = 0; e < k; ++e) {
                  const int ii = i * stride - pad + a;
                  const int jj = j * stride - pad + c;
                  const int ll = l * stride - pad + e;
                  if (ii < 0 || jj < 0 || ll < 0 || ii >= out[0] || jj >= out[1] || ll >= out[2])
                    continue;
                  y.at(co, ii, jj, ll) += x.at(ci, i, j, l) * w.at(ci, co, a, c, e);
                }
  return y;
}

/// Closed-form trilinear interpolation, align-corners convention.
inline std::vector<double> naive_trilinear(const Tensor<double>& grid, double qx, double qy,
                                           double qz) {
  const int f = grid.dim(0), l = grid.dim(1);
  const double q[3] = {qx, qy, qz};
  int lo[3];
  double t[3];
  for (int ax = 0; ax < 3; ++ax) {
    const double u = std::clamp(q[ax], 0.0, 1.0) * (l - 1);
    lo[ax] = std::min(static_cast<int>(u), l - 2);
    t[ax] = u - lo[ax];
  }
  std::vector<double> out(static_cast<std::size_t>(f), 0.0);
  for (int c = 0; c < f; ++c) {
    double s = 0;
    for (int dx = 0; dx <= 1; ++dx)
      for (int dy = 0; dy <= 1; ++dy)
        for (int dz = 0; dz <= 1; ++dz) {
          const double w = (dx ? t[0] : 1 - t[0]) * (dy ? t[1] : 1 - t[1]) * (dz ? t[2] : 1 - t[2]);
          s += w * grid.at(c, lo[0] + dx, lo[1] + dy, lo[2] + dz);
        }
    out[static_cast<std::size_t>(c)] = s;
  }
  return out;
}

using LossBuilder = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

inline double eval_loss(const std::vector<Tensor<double>>& inputs, const LossBuilder& build) {
  Graph<double> g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  return g.value(build(g, vars))[0];
}

/// Largest gradient discrepancy over all inputs, each measured as
/// max_i |analytic_i - numeric_i| / max_i max(|analytic_i|, |numeric_i|).
/// `max_components` caps the number of coordinates probed per input.
inline double gradient_check(const std::vector<Tensor<double>>& inputs, const LossBuilder& build,
                             double h = 1e-4, std::size_t max_components = 64,
                             std::uint64_t seed = 7) {
  Graph<double> g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.variable(t));
  Var loss = build(g, vars);
  g.backward(loss);

  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> analytic = g.grad(vars[k]);
    std::vector<std::size_t> probe(inputs[k].size());
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = i;
    if (probe.size() > max_components) {
      std::shuffle(probe.begin(), probe.end(), rng);
      probe.resize(max_components);
    }
    double num = 0.0, den = 1e-12;
    for (std::size_t i : probe) {
      auto plus = inputs, minus = inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      const double fd = (eval_loss(plus, build) - eval_loss(minus, build)) / (2 * h);
      num = std::max(num, std::abs(fd - analytic[i]));
      den = std::max({den, std::abs(fd), std::abs(analytic[i])});
    }
    worst = std::max(worst, num / den);
  }
  return worst;
}

/// sum(op_output * weights) for a fixed random weight tensor, which turns
/// any op into a scalar loss with a generic gradient.
inline Var random_projection(Graph<double>& g, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<double> w = random_tensor(g.value(out).shape(), rng);
  return sum(g, mul(g, out, g.constant(std::move(w))));
}

}  // namespace latentmap::testing
