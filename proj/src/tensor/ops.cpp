#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include <Eigen/Core>

#include "latentmap/tensor/graph.hpp"

namespace latentmap {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": operand shapes differ, " + to_string(a) + " vs " +
                     to_string(b));
  }
}

template <typename T>
bool any_grad(const Graph<T>& g, std::initializer_list<Var> vars) {
  for (Var v : vars) {
    if (g.requires_grad(v)) return true;
  }
  return false;
}

template <typename T>
void accumulate(Graph<T>& g, Var v, const T* src) {
  if (!g.requires_grad(v)) return;
  Tensor<T>& dst = g.grad_buffer(v);
  T* d = dst.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += src[i];
}

// Geometry of a cubic convolution over [C, S0, S1, S2] inputs.
struct ConvGeom {
  int channels = 0;
  int in[3] = {0, 0, 0};
  int out[3] = {0, 0, 0};
  int k = 1;
  int stride = 1;
  int pad = 0;

  int in_volume() const { return in[0] * in[1] * in[2]; }
  int out_volume() const { return out[0] * out[1] * out[2]; }
  int rows() const { return channels * k * k * k; }
};

// col[(c, a, b, e), (x, y, z)] = input[c, x*s - p + a, y*s - p + b, z*s - p + e]
template <typename T>
void im2col(const T* input, const ConvGeom& g, T* col) {
  const int k = g.k;
  const int cols = g.out_volume();
  int row = 0;
  for (int c = 0; c < g.channels; ++c) {
    const T* chan = input + static_cast<std::ptrdiff_t>(c) * g.in_volume();
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b) {
        for (int e = 0; e < k; ++e, ++row) {
          T* dst = col + static_cast<std::ptrdiff_t>(row) * cols;
          int idx = 0;
          for (int x = 0; x < g.out[0]; ++x) {
            const int ix = x * g.stride - g.pad + a;
            const bool xin = ix >= 0 && ix < g.in[0];
            for (int y = 0; y < g.out[1]; ++y) {
              const int iy = y * g.stride - g.pad + b;
              const bool yin = xin && iy >= 0 && iy < g.in[1];
              const T* src = chan + (static_cast<std::ptrdiff_t>(ix) * g.in[1] + iy) * g.in[2];
              for (int z = 0; z < g.out[2]; ++z, ++idx) {
                const int iz = z * g.stride - g.pad + e;
                dst[idx] = (yin && iz >= 0 && iz < g.in[2]) ? src[iz] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column entries back onto the input lattice.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* input) {
  const int k = g.k;
  const int cols = g.out_volume();
  int row = 0;
  for (int c = 0; c < g.channels; ++c) {
    T* chan = input + static_cast<std::ptrdiff_t>(c) * g.in_volume();
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b) {
        for (int e = 0; e < k; ++e, ++row) {
          const T* src = col + static_cast<std::ptrdiff_t>(row) * cols;
          int idx = 0;
          for (int x = 0; x < g.out[0]; ++x) {
            const int ix = x * g.stride - g.pad + a;
            const bool xin = ix >= 0 && ix < g.in[0];
            for (int y = 0; y < g.out[1]; ++y) {
              const int iy = y * g.stride - g.pad + b;
              const bool yin = xin && iy >= 0 && iy < g.in[1];
              T* dst = chan + (static_cast<std::ptrdiff_t>(ix) * g.in[1] + iy) * g.in[2];
              for (int z = 0; z < g.out[2]; ++z, ++idx) {
                const int iz = z * g.stride - g.pad + e;
                if (yin && iz >= 0 && iz < g.in[2]) dst[iz] += src[idx];
              }
            }
          }
        }
      }
    }
  }
}

const char* kAxisNames[] = {"channel", "depth", "height", "width"};

}  // namespace

template <typename T>
T bce_with_logits_value(T z, T t) {
  // max(z, 0) - z t + log(1 + exp(-|z|))
  return std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& x = g.value(a);
  const Tensor<T>& y = g.value(b);
  require_same_shape(x.shape(), y.shape(), "add");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return g.record(std::move(out), any_grad(g, {a, b}), [a, b](Graph<T>& gr, const Tensor<T>& og) {
    accumulate(gr, a, og.data());
    accumulate(gr, b, og.data());
  });
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& x = g.value(a);
  const Tensor<T>& y = g.value(b);
  require_same_shape(x.shape(), y.shape(), "sub");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return g.record(std::move(out), any_grad(g, {a, b}), [a, b](Graph<T>& gr, const Tensor<T>& og) {
    accumulate(gr, a, og.data());
    if (gr.requires_grad(b)) {
      Tensor<T>& gb = gr.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= og[i];
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& x = g.value(a);
  const Tensor<T>& y = g.value(b);
  require_same_shape(x.shape(), y.shape(), "mul");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return g.record(std::move(out), any_grad(g, {a, b}), [a, b](Graph<T>& gr, const Tensor<T>& og) {
    const Tensor<T>& xv = gr.value(a);
    const Tensor<T>& yv = gr.value(b);
    if (gr.requires_grad(a)) {
      Tensor<T>& ga = gr.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += og[i] * yv[i];
    }
    if (gr.requires_grad(b)) {
      Tensor<T>& gb = gr.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += og[i] * xv[i];
    }
  });
}

template <typename T>
Var scale(Graph<T>& g, Var a, T factor) {
  const Tensor<T>& x = g.value(a);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return g.record(std::move(out), g.requires_grad(a), [a, factor](Graph<T>& gr, const Tensor<T>& og) {
    Tensor<T>& ga = gr.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += og[i] * factor;
  });
}

template <typename T>
Var sum(Graph<T>& g, Var a) {
  const Tensor<T>& x = g.value(a);
  T s = 0;
  for (T v : x.values()) s += v;
  return g.record(Tensor<T>::scalar(s), g.requires_grad(a), [a](Graph<T>& gr, const Tensor<T>& og) {
    Tensor<T>& ga = gr.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += og[0];
  });
}

template <typename T>
Var mean(Graph<T>& g, Var a) {
  const std::size_t n = g.value(a).size();
  require(n > 0, "mean: empty operand");
  return scale(g, sum(g, a), T(1) / static_cast<T>(n));
}

template <typename T>
Var relu(Graph<T>& g, Var a) {
  const Tensor<T>& x = g.value(a);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return g.record(std::move(out), g.requires_grad(a), [a](Graph<T>& gr, const Tensor<T>& og) {
    const Tensor<T>& xv = gr.value(a);
    Tensor<T>& ga = gr.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (xv[i] > T(0)) ga[i] += og[i];
    }
  });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var a) {
  const Tensor<T>& x = g.value(a);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
  if (!g.requires_grad(a)) return g.record(std::move(out), false, nullptr);
  std::vector<T> s(out.values().begin(), out.values().end());
  return g.record(std::move(out), true, [a, s = std::move(s)](Graph<T>& gr, const Tensor<T>& og) {
    Tensor<T>& ga = gr.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += og[i] * s[i] * (T(1) - s[i]);
  });
}

template <typename T>
Var reshape(Graph<T>& g, Var a, Shape shape) {
  Tensor<T> out = g.value(a).reshaped(std::move(shape));
  return g.record(std::move(out), g.requires_grad(a), [a](Graph<T>& gr, const Tensor<T>& og) {
    accumulate(gr, a, og.data());
  });
}

template <typename T>
Var concat_columns(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& x = g.value(a);
  const Tensor<T>& y = g.value(b);
  require(x.rank() == 2 && y.rank() == 2, "concat_columns: operands must be rank 2, got " +
                                              to_string(x.shape()) + " and " + to_string(y.shape()));
  require(x.dim(0) == y.dim(0), "concat_columns: row count differs, " + std::to_string(x.dim(0)) +
                                    " vs " + std::to_string(y.dim(0)));
  const int n = x.dim(0), p = x.dim(1), q = y.dim(1);
  Tensor<T> out(Shape{n, p + q});
  for (int i = 0; i < n; ++i) {
    std::copy_n(x.data() + static_cast<std::ptrdiff_t>(i) * p, p,
                out.data() + static_cast<std::ptrdiff_t>(i) * (p + q));
    std::copy_n(y.data() + static_cast<std::ptrdiff_t>(i) * q, q,
                out.data() + static_cast<std::ptrdiff_t>(i) * (p + q) + p);
  }
  return g.record(std::move(out), any_grad(g, {a, b}),
                  [a, b, n, p, q](Graph<T>& gr, const Tensor<T>& og) {
                    if (gr.requires_grad(a)) {
                      Tensor<T>& ga = gr.grad_buffer(a);
                      for (int i = 0; i < n; ++i)
                        for (int j = 0; j < p; ++j) ga[i * p + j] += og[i * (p + q) + j];
                    }
                    if (gr.requires_grad(b)) {
                      Tensor<T>& gb = gr.grad_buffer(b);
                      for (int i = 0; i < n; ++i)
                        for (int j = 0; j < q; ++j) gb[i * q + j] += og[i * (p + q) + p + j];
                    }
                  });
}

template <typename T>
Var linear(Graph<T>& g, Var xv, Var wv, Var bv) {
  const Tensor<T>& x = g.value(xv);
  const Tensor<T>& w = g.value(wv);
  const Tensor<T>& b = g.value(bv);
  require(x.rank() == 2, "linear: input must be [N, in], got " + to_string(x.shape()));
  require(w.rank() == 2, "linear: weight must be [out, in], got " + to_string(w.shape()));
  require(x.dim(1) == w.dim(1), "linear: input features " + std::to_string(x.dim(1)) +
                                    " do not match weight in-features " + std::to_string(w.dim(1)));
  require(b.rank() == 1 && b.dim(0) == w.dim(0),
          "linear: bias must be [" + std::to_string(w.dim(0)) + "], got " + to_string(b.shape()));
  const int n = x.dim(0), in = x.dim(1), outf = w.dim(0);
  Tensor<T> out(Shape{n, outf});
  // Plain loops rather than a blocked GEMM: each output row then depends only
  // on its own input row, whatever its position in the batch.
  for (int r = 0; r < n; ++r) {
    const T* xr = x.data() + static_cast<std::size_t>(r) * in;
    T* yr = out.data() + static_cast<std::size_t>(r) * outf;
    for (int o = 0; o < outf; ++o) {
      const T* wo = w.data() + static_cast<std::size_t>(o) * in;
      T s = b[static_cast<std::size_t>(o)];
      for (int i = 0; i < in; ++i) s += wo[i] * xr[i];
      yr[o] = s;
    }
  }
  return g.record(std::move(out), any_grad(g, {xv, wv, bv}),
                  [xv, wv, bv, n, in, outf](Graph<T>& gr, const Tensor<T>& og) {
                    if (n == 0) return;
                    CMapR<T> dY(og.data(), n, outf);
                    if (gr.requires_grad(xv)) {
                      MapR<T> dX(gr.grad_buffer(xv).data(), n, in);
                      dX.noalias() += dY * CMapR<T>(gr.value(wv).data(), outf, in);
                    }
                    if (gr.requires_grad(wv)) {
                      MapR<T> dW(gr.grad_buffer(wv).data(), outf, in);
                      dW.noalias() += dY.transpose() * CMapR<T>(gr.value(xv).data(), n, in);
                    }
                    if (gr.requires_grad(bv)) {
                      // Plain loops: Eigen's reductions depend on buffer alignment.
                      T* db = gr.grad_buffer(bv).data();
                      for (int r = 0; r < dY.rows(); ++r)
                        for (int c = 0; c < outf; ++c) db[c] += dY(r, c);
                    }
                  });
}

template <typename T>
Var conv3d(Graph<T>& g, Var iv, Var wv, Var bv, int stride, int padding) {
  const Tensor<T>& x = g.value(iv);
  const Tensor<T>& w = g.value(wv);
  const Tensor<T>& b = g.value(bv);
  require(x.rank() == 4, "conv3d: input must be [C, D, H, W], got " + to_string(x.shape()));
  require(w.rank() == 5, "conv3d: weight must be [C_out, C_in, k, k, k], got " +
                             to_string(w.shape()));
  const int k = w.dim(2);
  require(w.dim(3) == k && w.dim(4) == k, "conv3d: kernel must be cubic, got " + to_string(w.shape()));
  require(k % 2 == 1, "conv3d: kernel size must be odd, got " + std::to_string(k));
  require(stride >= 1 && padding >= 0, "conv3d: stride must be >= 1 and padding >= 0");
  require(w.dim(1) == x.dim(0), "conv3d: channel dimension mismatch, input has " +
                                    std::to_string(x.dim(0)) + " channels, weight expects " +
                                    std::to_string(w.dim(1)));
  const int cout = w.dim(0);
  require(b.rank() == 1 && b.dim(0) == cout,
          "conv3d: bias must be [" + std::to_string(cout) + "], got " + to_string(b.shape()));

  ConvGeom geom;
  geom.channels = x.dim(0);
  geom.k = k;
  geom.stride = stride;
  geom.pad = padding;
  for (int ax = 0; ax < 3; ++ax) {
    geom.in[ax] = x.dim(ax + 1);
    const int span = geom.in[ax] + 2 * padding - k;
    require(span >= 0, std::string("conv3d: ") + kAxisNames[ax + 1] + " extent " +
                           std::to_string(geom.in[ax]) + " too small for kernel " +
                           std::to_string(k) + " with padding " + std::to_string(padding));
    geom.out[ax] = span / stride + 1;
  }
  const int rows = geom.rows();
  const int cols = geom.out_volume();
  std::vector<T> col(static_cast<std::size_t>(rows) * cols);
  im2col(x.data(), geom, col.data());

  Tensor<T> out(Shape{cout, geom.out[0], geom.out[1], geom.out[2]});
  MapR<T> Y(out.data(), cout, cols);
  Y.noalias() = CMapR<T>(w.data(), cout, rows) * CMapR<T>(col.data(), rows, cols);
  Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.data(), cout);

  const bool rg = any_grad(g, {iv, wv, bv});
  if (!rg) return g.record(std::move(out), false, nullptr);
  return g.record(std::move(out), true,
                  [iv, wv, bv, geom, cout, rows, cols, col = std::move(col)](
                      Graph<T>& gr, const Tensor<T>& og) {
                    CMapR<T> dY(og.data(), cout, cols);
                    if (gr.requires_grad(wv)) {
                      MapR<T> dW(gr.grad_buffer(wv).data(), cout, rows);
                      dW.noalias() += dY * CMapR<T>(col.data(), rows, cols).transpose();
                    }
                    if (gr.requires_grad(bv)) {
                      T* db = gr.grad_buffer(bv).data();
                      for (int r = 0; r < cout; ++r) {
                        T s = 0;
                        for (int c = 0; c < cols; ++c) s += dY(r, c);
                        db[r] += s;
                      }
                    }
                    if (gr.requires_grad(iv)) {
                      MatR<T> dcol = CMapR<T>(gr.value(wv).data(), cout, rows).transpose() * dY;
                      col2im(dcol.data(), geom, gr.grad_buffer(iv).data());
                    }
                  });
}

template <typename T>
Var conv_transpose3d(Graph<T>& g, Var iv, Var wv, Var bv, int stride, int padding) {
  const Tensor<T>& x = g.value(iv);
  const Tensor<T>& w = g.value(wv);
  const Tensor<T>& b = g.value(bv);
  require(x.rank() == 4, "conv_transpose3d: input must be [C, D, H, W], got " + to_string(x.shape()));
  require(w.rank() == 5, "conv_transpose3d: weight must be [C_in, C_out, k, k, k], got " +
                             to_string(w.shape()));
  const int k = w.dim(2);
  require(w.dim(3) == k && w.dim(4) == k,
          "conv_transpose3d: kernel must be cubic, got " + to_string(w.shape()));
  require(stride >= 1 && padding >= 0, "conv_transpose3d: stride must be >= 1 and padding >= 0");
  require(w.dim(0) == x.dim(0), "conv_transpose3d: channel dimension mismatch, input has " +
                                    std::to_string(x.dim(0)) + " channels, weight expects " +
                                    std::to_string(w.dim(0)));
  const int cin = x.dim(0);
  const int cout = w.dim(1);
  require(b.rank() == 1 && b.dim(0) == cout, "conv_transpose3d: bias must be [" +
                                                 std::to_string(cout) + "], got " +
                                                 to_string(b.shape()));
  // The forward pass is col2im of a conv whose *input* is our output.
  ConvGeom geom;
  geom.channels = cout;
  geom.k = k;
  geom.stride = stride;
  geom.pad = padding;
  for (int ax = 0; ax < 3; ++ax) {
    geom.out[ax] = x.dim(ax + 1);
    geom.in[ax] = (geom.out[ax] - 1) * stride - 2 * padding + k;
    require(geom.in[ax] > 0, std::string("conv_transpose3d: non-positive output ") +
                                 kAxisNames[ax + 1] + " extent");
  }
  const int rows = geom.rows();  // cout * k^3
  const int cols = geom.out_volume();
  MatR<T> col = CMapR<T>(w.data(), cin, rows).transpose() * CMapR<T>(x.data(), cin, cols);
  Tensor<T> out(Shape{cout, geom.in[0], geom.in[1], geom.in[2]});
  col2im(col.data(), geom, out.data());
  const int vol = geom.in_volume();
  for (int c = 0; c < cout; ++c) {
    T* dst = out.data() + static_cast<std::ptrdiff_t>(c) * vol;
    for (int i = 0; i < vol; ++i) dst[i] += b[c];
  }
  return g.record(std::move(out), any_grad(g, {iv, wv, bv}),
                  [iv, wv, bv, geom, cin, cout, rows, cols, vol](Graph<T>& gr, const Tensor<T>& og) {
                    std::vector<T> gcol(static_cast<std::size_t>(rows) * cols);
                    im2col(og.data(), geom, gcol.data());
                    CMapR<T> G(gcol.data(), rows, cols);
                    if (gr.requires_grad(iv)) {
                      MapR<T> dX(gr.grad_buffer(iv).data(), cin, cols);
                      dX.noalias() += CMapR<T>(gr.value(wv).data(), cin, rows) * G;
                    }
                    if (gr.requires_grad(wv)) {
                      MapR<T> dW(gr.grad_buffer(wv).data(), cin, rows);
                      dW.noalias() += CMapR<T>(gr.value(iv).data(), cin, cols) * G.transpose();
                    }
                    if (gr.requires_grad(bv)) {
                      Tensor<T>& db = gr.grad_buffer(bv);
                      for (int c = 0; c < cout; ++c) {
                        const T* src = og.data() + static_cast<std::ptrdiff_t>(c) * vol;
                        T s = 0;
                        for (int i = 0; i < vol; ++i) s += src[i];
                        db[c] += s;
                      }
                    }
                  });
}

template <typename T>
Var scatter_pool(Graph<T>& g, const Tensor<T>& points, Var fv, int grid_res, PoolMode mode) {
  const Tensor<T>& feats = g.value(fv);
  require(grid_res >= 1, "scatter_pool: grid resolution must be positive");
  require(points.rank() == 2 && points.dim(1) == 3,
          "scatter_pool: points must be [N, 3], got " + to_string(points.shape()));
  require(feats.rank() == 2, "scatter_pool: features must be [N, F], got " + to_string(feats.shape()));
  require(feats.dim(0) == points.dim(0), "scatter_pool: point count " +
                                             std::to_string(points.dim(0)) +
                                             " does not match feature rows " +
                                             std::to_string(feats.dim(0)));
  const int n = points.dim(0);
  const int f = feats.dim(1);
  const int r = grid_res;
  const int cells = r * r * r;

  std::vector<int> cell_of(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int c[3];
    for (int ax = 0; ax < 3; ++ax) {
      const T p = points[static_cast<std::size_t>(i) * 3 + ax];
      if (!(p >= T(0) && p <= T(1))) {
        throw std::domain_error("scatter_pool: point " + std::to_string(i) +
                                " has coordinate outside [0, 1]: " + std::to_string(p));
      }
      c[ax] = std::min(static_cast<int>(p * static_cast<T>(r)), r - 1);
    }
    cell_of[static_cast<std::size_t>(i)] = (c[0] * r + c[1]) * r + c[2];
  }

  // Canonical order: by cell, then coordinates, then features.
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (cell_of[a] != cell_of[b]) return cell_of[a] < cell_of[b];
    const T* pa = points.data() + static_cast<std::ptrdiff_t>(a) * 3;
    const T* pb = points.data() + static_cast<std::ptrdiff_t>(b) * 3;
    for (int ax = 0; ax < 3; ++ax) {
      if (pa[ax] != pb[ax]) return pa[ax] < pb[ax];
    }
    const T* fa = feats.data() + static_cast<std::ptrdiff_t>(a) * f;
    const T* fb = feats.data() + static_cast<std::ptrdiff_t>(b) * f;
    for (int j = 0; j < f; ++j) {
      if (fa[j] != fb[j]) return fa[j] < fb[j];
    }
    return false;
  });

  Tensor<T> out(Shape{f, r, r, r});
  std::vector<int> count(static_cast<std::size_t>(cells), 0);
  // For max pooling: index of the winning point per (feature, cell).
  std::vector<int> arg;
  if (mode == PoolMode::Max) arg.assign(static_cast<std::size_t>(f) * cells, -1);

  for (int idx : order) {
    const int c = cell_of[static_cast<std::size_t>(idx)];
    const T* fr = feats.data() + static_cast<std::ptrdiff_t>(idx) * f;
    const bool first = count[static_cast<std::size_t>(c)] == 0;
    ++count[static_cast<std::size_t>(c)];
    for (int j = 0; j < f; ++j) {
      T& slot = out[static_cast<std::size_t>(j) * cells + c];
      if (mode == PoolMode::Mean) {
        slot += fr[j];
      } else if (first || fr[j] > slot) {
        slot = fr[j];
        arg[static_cast<std::size_t>(j) * cells + c] = idx;
      }
    }
  }
  if (mode == PoolMode::Mean) {
    for (int c = 0; c < cells; ++c) {
      if (count[c] == 0) continue;
      const T inv = T(1) / static_cast<T>(count[c]);
      for (int j = 0; j < f; ++j) out[static_cast<std::size_t>(j) * cells + c] *= inv;
    }
  }

  return g.record(std::move(out), g.requires_grad(fv),
                  [fv, f, cells, mode, cell_of = std::move(cell_of), count = std::move(count),
                   arg = std::move(arg)](Graph<T>& gr, const Tensor<T>& og) {
                    Tensor<T>& gf = gr.grad_buffer(fv);
                    const int rows = gf.shape()[0];
                    if (mode == PoolMode::Mean) {
                      for (int i = 0; i < rows; ++i) {
                        const int c = cell_of[static_cast<std::size_t>(i)];
                        const T inv = T(1) / static_cast<T>(count[static_cast<std::size_t>(c)]);
                        for (int j = 0; j < f; ++j) {
                          gf[static_cast<std::size_t>(i) * f + j] +=
                              og[static_cast<std::size_t>(j) * cells + c] * inv;
                        }
                      }
                    } else {
                      for (int j = 0; j < f; ++j) {
                        for (int c = 0; c < cells; ++c) {
                          const int w = arg[static_cast<std::size_t>(j) * cells + c];
                          if (w >= 0) {
                            gf[static_cast<std::size_t>(w) * f + j] +=
                                og[static_cast<std::size_t>(j) * cells + c];
                          }
                        }
                      }
                    }
                  });
}

template <typename T>
Var trilinear_sample(Graph<T>& g, Var gv, const Tensor<T>& queries) {
  const Tensor<T>& grid = g.value(gv);
  require(grid.rank() == 4, "trilinear_sample: grid must be [F, L, L, L], got " +
                                to_string(grid.shape()));
  const int f = grid.dim(0);
  const int l = grid.dim(1);
  require(grid.dim(2) == l && grid.dim(3) == l,
          "trilinear_sample: grid must be cubic, got " + to_string(grid.shape()));
  require(l >= 2, "trilinear_sample: grid extent must be at least 2");
  require(queries.rank() == 2 && queries.dim(1) == 3,
          "trilinear_sample: queries must be [M, 3], got " + to_string(queries.shape()));
  const int m = queries.dim(0);
  const int vol = l * l * l;

  // Eight corner offsets and weights per query.
  std::vector<int> corner(static_cast<std::size_t>(m) * 8);
  std::vector<T> weight(static_cast<std::size_t>(m) * 8);
  for (int q = 0; q < m; ++q) {
    int i0[3];
    T t[3];
    for (int ax = 0; ax < 3; ++ax) {
      T u = std::clamp(queries[static_cast<std::size_t>(q) * 3 + ax], T(0), T(1)) *
            static_cast<T>(l - 1);
      int i = static_cast<int>(std::floor(u));
      i = std::clamp(i, 0, l - 2);
      i0[ax] = i;
      t[ax] = u - static_cast<T>(i);
    }
    for (int c = 0; c < 8; ++c) {
      const int dx = (c >> 2) & 1, dy = (c >> 1) & 1, dz = c & 1;
      corner[static_cast<std::size_t>(q) * 8 + c] =
          ((i0[0] + dx) * l + (i0[1] + dy)) * l + (i0[2] + dz);
      weight[static_cast<std::size_t>(q) * 8 + c] = (dx ? t[0] : T(1) - t[0]) *
                                                    (dy ? t[1] : T(1) - t[1]) *
                                                    (dz ? t[2] : T(1) - t[2]);
    }
  }

  Tensor<T> out(Shape{m, f});
  for (int q = 0; q < m; ++q) {
    const int* cq = corner.data() + static_cast<std::ptrdiff_t>(q) * 8;
    const T* wq = weight.data() + static_cast<std::ptrdiff_t>(q) * 8;
    T* dst = out.data() + static_cast<std::ptrdiff_t>(q) * f;
    for (int j = 0; j < f; ++j) {
      const T* chan = grid.data() + static_cast<std::ptrdiff_t>(j) * vol;
      T s = 0;
      for (int c = 0; c < 8; ++c) s += wq[c] * chan[cq[c]];
      dst[j] = s;
    }
  }
  return g.record(std::move(out), g.requires_grad(gv),
                  [gv, m, f, vol, corner = std::move(corner), weight = std::move(weight)](
                      Graph<T>& gr, const Tensor<T>& og) {
                    Tensor<T>& gg = gr.grad_buffer(gv);
                    for (int q = 0; q < m; ++q) {
                      const int* cq = corner.data() + static_cast<std::ptrdiff_t>(q) * 8;
                      const T* wq = weight.data() + static_cast<std::ptrdiff_t>(q) * 8;
                      const T* src = og.data() + static_cast<std::ptrdiff_t>(q) * f;
                      for (int j = 0; j < f; ++j) {
                        T* chan = gg.data() + static_cast<std::ptrdiff_t>(j) * vol;
                        for (int c = 0; c < 8; ++c) chan[cq[c]] += wq[c] * src[j];
                      }
                    }
                  });
}

template <typename T>
Var l1_loss(Graph<T>& g, Var a, Var b, Reduction reduction) {
  const Tensor<T>& x = g.value(a);
  const Tensor<T>& y = g.value(b);
  require_same_shape(x.shape(), y.shape(), "l1_loss");
  require(x.size() > 0, "l1_loss: empty operands");
  const T norm = reduction == Reduction::Mean ? T(1) / static_cast<T>(x.size()) : T(1);
  T s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
  return g.record(Tensor<T>::scalar(s * norm), any_grad(g, {a, b}),
                  [a, b, norm](Graph<T>& gr, const Tensor<T>& og) {
                    const Tensor<T>& xv = gr.value(a);
                    const Tensor<T>& yv = gr.value(b);
                    const T go = og[0] * norm;
                    auto sign = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
                    if (gr.requires_grad(a)) {
                      Tensor<T>& ga = gr.grad_buffer(a);
                      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go * sign(xv[i] - yv[i]);
                    }
                    if (gr.requires_grad(b)) {
                      Tensor<T>& gb = gr.grad_buffer(b);
                      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go * sign(xv[i] - yv[i]);
                    }
                  });
}

template <typename T>
Var bce_with_logits(Graph<T>& g, Var lv, const Tensor<T>& targets) {
  const Tensor<T>& z = g.value(lv);
  require(z.size() == targets.size(), "bce_with_logits: " + std::to_string(z.size()) +
                                          " logits but " + std::to_string(targets.size()) +
                                          " targets");
  require(z.size() > 0, "bce_with_logits: empty operands");
  const T norm = T(1) / static_cast<T>(z.size());
  T s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += bce_with_logits_value(z[i], targets[i]);
  return g.record(Tensor<T>::scalar(s * norm), g.requires_grad(lv),
                  [lv, norm, targets](Graph<T>& gr, const Tensor<T>& og) {
                    const Tensor<T>& zv = gr.value(lv);
                    Tensor<T>& gz = gr.grad_buffer(lv);
                    for (std::size_t i = 0; i < gz.size(); ++i) {
                      const T x = zv[i];
                      // sigmoid evaluated on the stable branch
                      const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                            : std::exp(x) / (T(1) + std::exp(x));
                      gz[i] += og[0] * norm * (s - targets[i]);
                    }
                  });
}

#define LATENTMAP_INSTANTIATE_OPS(T)                                                   \
  template T bce_with_logits_value<T>(T, T);                                           \
  template Var add<T>(Graph<T>&, Var, Var);                                            \
  template Var sub<T>(Graph<T>&, Var, Var);                                            \
  template Var mul<T>(Graph<T>&, Var, Var);                                            \
  template Var scale<T>(Graph<T>&, Var, T);                                            \
  template Var sum<T>(Graph<T>&, Var);                                                 \
  template Var mean<T>(Graph<T>&, Var);                                                \
  template Var relu<T>(Graph<T>&, Var);                                                \
  template Var sigmoid<T>(Graph<T>&, Var);                                             \
  template Var reshape<T>(Graph<T>&, Var, Shape);                                      \
  template Var concat_columns<T>(Graph<T>&, Var, Var);                                 \
  template Var linear<T>(Graph<T>&, Var, Var, Var);                                    \
  template Var conv3d<T>(Graph<T>&, Var, Var, Var, int, int);                          \
  template Var conv_transpose3d<T>(Graph<T>&, Var, Var, Var, int, int);                \
  template Var scatter_pool<T>(Graph<T>&, const Tensor<T>&, Var, int, PoolMode);       \
  template Var trilinear_sample<T>(Graph<T>&, Var, const Tensor<T>&);                  \
  template Var l1_loss<T>(Graph<T>&, Var, Var, Reduction);                             \
  template Var bce_with_logits<T>(Graph<T>&, Var, const Tensor<T>&);

LATENTMAP_INSTANTIATE_OPS(float)
LATENTMAP_INSTANTIATE_OPS(double)

}  // namespace latentmap
