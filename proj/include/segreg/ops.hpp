#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "segreg/tensor.hpp"

namespace segreg {

namespace detail {

template <class T>
Shape binary_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (a.numel() == 1 && b.numel() == 1) return a.rank() >= b.rank() ? a.shape() : b.shape();
  if (a.numel() == 1) return b.shape();
  if (b.numel() == 1) return a.shape();
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                   " differ (only scalar broadcasting is supported)");
}

// Elementwise binary op with scalar broadcasting. `fwd(x, y)` gives the
// value, `dx(x, y, out)` and `dy(x, y, out)` the local partials.
template <class T, class Fwd, class Dx, class Dy>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Dx dx, Dy dy) {
  Shape shape = binary_shape(op, a, b);
  const std::size_t n = shape_numel(shape);
  const std::size_t sa = a.numel() == 1 ? 0 : 1;
  const std::size_t sb = b.numel() == 1 ? 0 : 1;
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i * sa], bd[i * sb]);
  return make_result<T>(op, std::move(shape), std::move(out), {a, b}, [=](Node<T>& self) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    if (self.input_needs_grad(0)) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i * sa] += self.grad[i] * dx(x[i * sa], y[i * sb], self.data[i]);
    }
    if (self.input_needs_grad(1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i * sb] += self.grad[i] * dy(x[i * sa], y[i * sb], self.data[i]);
    }
  });
}

// Elementwise unary op; `d(x, out)` is the local derivative.
template <class T, class Fwd, class D>
Tensor<T> unary_op(const char* op, const Tensor<T>& a, Fwd fwd, D d, bool check_finite = false) {
  auto ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  if (check_finite) require_finite<T>(op, out);
  return make_result<T>(op, a.shape(), std::move(out), {a}, [=](Node<T>& self) {
    const auto& x = self.inputs[0]->data;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * d(x[i], self.data[i]);
  });
}

inline void require_rank(const char* op, const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  auto out = detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T q) { return -q / y; });
  detail::require_finite<T>("div", out.data());
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return detail::unary_op<T>(
      "scalar-scale", a, [factor](T x) { return factor * x; }, [factor](T, T) { return factor; });
}

// a + offset, with offset a constant.
template <class T>
Tensor<T> shift(const Tensor<T>& a, T offset) {
  return detail::unary_op<T>(
      "shift", a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(0.01)) {
  return detail::unary_op<T>(
      "leaky-relu", a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, true);
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (!(v > T(0))) throw NumericError("log: argument must be positive");
  }
  return detail::unary_op<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; }, true);
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (v < T(0)) throw NumericError("sqrt: argument must be non-negative");
  }
  return detail::unary_op<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return detail::make_result<T>("sum", Shape{}, {total}, {a}, [](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T go = self.grad[0];
    for (auto& v : g) v += go;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  const T inv = T(1) / static_cast<T>(a.numel());
  T total = T(0);
  for (T v : a.data()) total += v;
  return detail::make_result<T>("mean", Shape{}, {total * inv}, {a}, [inv](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T go = self.grad[0] * inv;
    for (auto& v : g) v += go;
  });
}

// (N,D) -> (1,D) column means.
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  detail::require_rank("mean-rows", a.shape(), 2, "input");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (rows == 0) throw ShapeError("mean-rows: no rows");
  const T inv = T(1) / static_cast<T>(rows);
  std::vector<T> out(cols, T(0));
  auto d = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += d[r * cols + c];
  for (auto& v : out) v *= inv;
  return detail::make_result<T>("mean-rows", Shape{1, cols}, std::move(out), {a},
                                [rows, cols, inv](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[c] * inv;
                                });
}

// (1,D) -> (N,D) by explicit row replication.
template <class T>
Tensor<T> repeat_rows(const Tensor<T>& a, std::size_t rows) {
  detail::require_rank("repeat-rows", a.shape(), 2, "input");
  if (a.dim(0) != 1) throw ShapeError("repeat-rows: input must have one row, got " + shape_str(a.shape()));
  const std::size_t cols = a.dim(1);
  std::vector<T> out(rows * cols);
  auto d = a.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(d.begin(), d.end(), out.begin() + r * cols);
  return detail::make_result<T>("repeat-rows", Shape{rows, cols}, std::move(out), {a},
                                [rows, cols](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
                                });
}

// (B,C,H,W) -> (C) per-channel totals over batch and space.
template <class T>
Tensor<T> channel_sums(const Tensor<T>& a) {
  detail::require_rank("channel-sums", a.shape(), 4, "input");
  const std::size_t batch = a.dim(0), ch = a.dim(1), plane = a.dim(2) * a.dim(3);
  std::vector<T> out(ch, T(0));
  auto d = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      const T* p = d.data() + (b * ch + c) * plane;
      T acc = T(0);
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out[c] += acc;
    }
  return detail::make_result<T>("channel-sums", Shape{ch}, std::move(out), {a},
                                [batch, ch, plane](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad_buffer();
                                  for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t c = 0; c < ch; ++c) {
                                      T* p = g.data() + (b * ch + c) * plane;
                                      for (std::size_t i = 0; i < plane; ++i) p[i] += self.grad[c];
                                    }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", a.shape(), 2, "left operand");
  detail::require_rank("matmul", b.shape(), 2, "right operand");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ad[i * k + p];
      const T* brow = bd.data() + p * n;
      T* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return detail::make_result<T>("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
    const auto& A = self.inputs[0]->data;
    const auto& B = self.inputs[1]->data;
    const auto& G = self.grad;
    if (self.input_needs_grad(0)) {
      auto& ga = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = T(0);
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (self.input_needs_grad(1)) {
      auto& gb = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * G[i * n + j];
        }
    }
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank("transpose", a.shape(), 2, "input");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  auto d = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = d[i * c + j];
  return detail::make_result<T>("transpose", Shape{c, r}, std::move(out), {a}, [r, c](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Image ops, NCHW layout

/// Stride-1 convolution with "same" zero padding.
///
/// x: (B,Ci,H,W), weight: (Co,Ci,K,K) with K odd, bias: (Co).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank("conv2d", x.shape(), 4, "input");
  detail::require_rank("conv2d", weight.shape(), 4, "weight");
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != Ci) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input has " +
                     std::to_string(Ci));
  }
  if (weight.dim(3) != K || K % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square and odd, got " + shape_str(weight.shape()));
  }
  if (bias.shape() != Shape{Co}) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(Co) +
                     " output channels");
  }
  const long pad = static_cast<long>(K / 2);
  const std::size_t plane = H * W, rows = Ci * K * K;
  const long Hl = static_cast<long>(H), Wl = static_cast<long>(W);
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const RowMat>;
  using MapM = Eigen::Map<RowMat>;

  // Unfolded input: for every batch item a (Ci*K*K, H*W) matrix whose row
  // (i, ky, kx) holds the zero-padded input shifted by that tap. Kept for the
  // weight gradient.
  std::vector<T> cols(B * rows * plane, T(0));
  {
    const T* xd = x.data().data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < Ci; ++i) {
        const T* ip = xd + (b * Ci + i) * plane;
        for (std::size_t ky = 0; ky < K; ++ky)
          for (std::size_t kx = 0; kx < K; ++kx) {
            const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
            T* cp = cols.data() + (b * rows + (i * K + ky) * K + kx) * plane;
            const long y0 = std::max(0L, -dy), y1 = std::min(Hl, Hl - dy);
            const long x0 = std::max(0L, -dx), x1 = std::min(Wl, Wl - dx);
            for (long y = y0; y < y1; ++y)
              std::copy(ip + (y + dy) * Wl + x0 + dx, ip + (y + dy) * Wl + x1 + dx, cp + y * Wl + x0);
          }
      }
  }

  std::vector<T> out(B * Co * plane);
  {
    MapC wm(weight.data().data(), static_cast<Eigen::Index>(Co), static_cast<Eigen::Index>(rows));
    const T* bd = bias.data().data();
    for (std::size_t b = 0; b < B; ++b) {
      MapM om(out.data() + b * Co * plane, static_cast<Eigen::Index>(Co), static_cast<Eigen::Index>(plane));
      om.noalias() = wm * MapC(cols.data() + b * rows * plane, static_cast<Eigen::Index>(rows),
                               static_cast<Eigen::Index>(plane));
      for (std::size_t o = 0; o < Co; ++o) om.row(static_cast<Eigen::Index>(o)).array() += bd[o];
    }
  }

  return detail::make_result<T>(
      "conv2d", Shape{B, Co, H, W}, std::move(out), {x, weight, bias},
      [=, cols = std::move(cols)](detail::Node<T>& self) {
        const T* go = self.grad.data();
        const auto ro = static_cast<Eigen::Index>(rows), pl = static_cast<Eigen::Index>(plane),
                   co = static_cast<Eigen::Index>(Co);
        MapC wm(self.inputs[1]->data.data(), co, ro);
        if (self.input_needs_grad(0)) {
          T* gx = self.inputs[0]->grad_buffer().data();
          RowMat gcols(ro, pl);
          for (std::size_t b = 0; b < B; ++b) {
            gcols.noalias() = wm.transpose() * MapC(go + b * Co * plane, co, pl);
            // Fold the tap rows back onto the input plane.
            for (std::size_t i = 0; i < Ci; ++i) {
              T* gxp = gx + (b * Ci + i) * plane;
              for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                  const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
                  const T* cp = gcols.data() + ((i * K + ky) * K + kx) * plane;
                  const long y0 = std::max(0L, -dy), y1 = std::min(Hl, Hl - dy);
                  const long x0 = std::max(0L, -dx), x1 = std::min(Wl, Wl - dx);
                  for (long y = y0; y < y1; ++y) {
                    T* __restrict xrow = gxp + (y + dy) * Wl + dx;
                    const T* __restrict crow = cp + y * Wl;
                    for (long xx = x0; xx < x1; ++xx) xrow[xx] += crow[xx];
                  }
                }
            }
          }
        }
        if (self.input_needs_grad(1)) {
          MapM gw(self.inputs[1]->grad_buffer().data(), co, ro);
          for (std::size_t b = 0; b < B; ++b)
            gw.noalias() += MapC(go + b * Co * plane, co, pl) * MapC(cols.data() + b * rows * plane, ro, pl).transpose();
        }
        if (self.input_needs_grad(2)) {
          auto& gb = self.inputs[2]->grad_buffer();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < Co; ++o) {
              const T* gp = go + (b * Co + o) * plane;
              T total = T(0);
              for (std::size_t p = 0; p < plane; ++p) total += gp[p];
              gb[o] += total;
            }
        }
      });
}

// (B,C,H,W) -> (B,C,H/2,W/2), max over non-overlapping 2x2 windows.
template <class T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  detail::require_rank("maxpool2x2", x.shape(), 4, "input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) throw ShapeError("maxpool2x2: spatial dims must be even, got " + shape_str(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<T> out(B * C * Ho * Wo);
  std::vector<std::size_t> argmax(out.size());
  auto xd = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx) {
        const std::size_t base = bc * H * W + 2 * y * W + 2 * xx;
        std::size_t best = base;
        for (std::size_t cand : {base + 1, base + W, base + W + 1})
          if (xd[cand] > xd[best]) best = cand;
        const std::size_t o = bc * Ho * Wo + y * Wo + xx;
        out[o] = xd[best];
        argmax[o] = best;
      }
  Shape shape{B, C, Ho, Wo};
  return detail::make_result<T>("maxpool2x2", std::move(shape), std::move(out), {x},
                                [argmax = std::move(argmax)](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad_buffer();
                                  for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                                });
}

// (B,C,H,W) -> (B,C,2H,2W), nearest neighbour.
template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  detail::require_rank("nearest-upsample2x", x.shape(), 4, "input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  std::vector<T> out(B * C * Ho * Wo);
  auto xd = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx) out[bc * Ho * Wo + y * Wo + xx] = xd[bc * H * W + (y / 2) * W + xx / 2];
  return detail::make_result<T>("nearest-upsample2x", Shape{B, C, Ho, Wo}, std::move(out), {x},
                                [=](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad_buffer();
                                  for (std::size_t bc = 0; bc < B * C; ++bc)
                                    for (std::size_t y = 0; y < Ho; ++y)
                                      for (std::size_t xx = 0; xx < Wo; ++xx)
                                        g[bc * H * W + (y / 2) * W + xx / 2] += self.grad[bc * Ho * Wo + y * Wo + xx];
                                });
}

// Concatenates (B,Ca,H,W) and (B,Cb,H,W) along channels.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("concat-channels", a.shape(), 4, "first input");
  detail::require_rank("concat-channels", b.shape(), 4, "second input");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat-channels: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ outside the channel axis");
  }
  const std::size_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  std::vector<T> out(B * (Ca + Cb) * plane);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(ad.begin() + n * Ca * plane, Ca * plane, out.begin() + n * (Ca + Cb) * plane);
    std::copy_n(bd.begin() + n * Cb * plane, Cb * plane, out.begin() + (n * (Ca + Cb) + Ca) * plane);
  }
  return detail::make_result<T>(
      "concat-channels", Shape{B, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out), {a, b}, [=](detail::Node<T>& self) {
        for (std::size_t n = 0; n < B; ++n) {
          if (self.input_needs_grad(0)) {
            auto& g = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < Ca * plane; ++i) g[n * Ca * plane + i] += self.grad[n * (Ca + Cb) * plane + i];
          }
          if (self.input_needs_grad(1)) {
            auto& g = self.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < Cb * plane; ++i)
              g[n * Cb * plane + i] += self.grad[(n * (Ca + Cb) + Ca) * plane + i];
          }
        }
      });
}

namespace detail {

// Layout of the channel axis: rank-2 (N,C) or rank-4 (B,C,H,W).
struct ChannelLayout {
  std::size_t outer, channels, inner;
};

inline ChannelLayout channel_layout(const char* op, const Shape& s) {
  if (s.size() == 2) return {s[0], s[1], 1};
  if (s.size() == 4) return {s[0], s[1], s[2] * s[3]};
  throw ShapeError(std::string(op) + ": expected rank 2 or 4, got " + shape_str(s));
}

}  // namespace detail

// Softmax over axis 1.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const auto L = detail::channel_layout("softmax-channels", x.shape());
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t o = 0; o < L.outer; ++o)
    for (std::size_t p = 0; p < L.inner; ++p) {
      const std::size_t base = o * L.channels * L.inner + p;
      T mx = xd[base];
      for (std::size_t c = 1; c < L.channels; ++c) mx = std::max(mx, xd[base + c * L.inner]);
      T total = T(0);
      for (std::size_t c = 0; c < L.channels; ++c) {
        const T e = std::exp(xd[base + c * L.inner] - mx);
        out[base + c * L.inner] = e;
        total += e;
      }
      for (std::size_t c = 0; c < L.channels; ++c) out[base + c * L.inner] /= total;
    }
  return detail::make_result<T>("softmax-channels", x.shape(), std::move(out), {x}, [L](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& s = self.data;
    for (std::size_t o = 0; o < L.outer; ++o)
      for (std::size_t p = 0; p < L.inner; ++p) {
        const std::size_t base = o * L.channels * L.inner + p;
        T dot = T(0);
        for (std::size_t c = 0; c < L.channels; ++c) dot += self.grad[base + c * L.inner] * s[base + c * L.inner];
        for (std::size_t c = 0; c < L.channels; ++c) {
          const std::size_t i = base + c * L.inner;
          g[i] += s[i] * (self.grad[i] - dot);
        }
      }
  });
}

// Numerically stable log-softmax over axis 1.
template <class T>
Tensor<T> log_softmax_channels(const Tensor<T>& x) {
  const auto L = detail::channel_layout("log-softmax-channels", x.shape());
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t o = 0; o < L.outer; ++o)
    for (std::size_t p = 0; p < L.inner; ++p) {
      const std::size_t base = o * L.channels * L.inner + p;
      T mx = xd[base];
      for (std::size_t c = 1; c < L.channels; ++c) mx = std::max(mx, xd[base + c * L.inner]);
      T total = T(0);
      for (std::size_t c = 0; c < L.channels; ++c) total += std::exp(xd[base + c * L.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t c = 0; c < L.channels; ++c) out[base + c * L.inner] = xd[base + c * L.inner] - lse;
    }
  return detail::make_result<T>("log-softmax-channels", x.shape(), std::move(out), {x}, [L](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < L.outer; ++o)
      for (std::size_t p = 0; p < L.inner; ++p) {
        const std::size_t base = o * L.channels * L.inner + p;
        T gsum = T(0);
        for (std::size_t c = 0; c < L.channels; ++c) gsum += self.grad[base + c * L.inner];
        for (std::size_t c = 0; c < L.channels; ++c) {
          const std::size_t i = base + c * L.inner;
          g[i] += self.grad[i] - std::exp(self.data[i]) * gsum;
        }
      }
  });
}

/// Selects rows of a (N,D) matrix, or pixel feature vectors of a (B,D,H,W)
/// map addressed by flat pixel index b*H*W + y*W + x. Result is (len,D).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices) {
  std::size_t rows = 0, cols = 0, plane = 1;
  if (x.rank() == 2) {
    rows = x.dim(0);
    cols = x.dim(1);
  } else if (x.rank() == 4) {
    plane = x.dim(2) * x.dim(3);
    rows = x.dim(0) * plane;
    cols = x.dim(1);
  } else {
    throw ShapeError("gather-rows: expected rank 2 or 4, got " + shape_str(x.shape()));
  }
  // Position of element (row, col) in the flat storage.
  auto at = [=](std::size_t row, std::size_t col) {
    if (plane == 1) return row * cols + col;
    const std::size_t b = row / plane, p = row % plane;
    return (b * cols + col) * plane + p;
  };
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  for (auto r : idx) {
    if (r >= rows) {
      throw ShapeError("gather-rows: index " + std::to_string(r) + " out of range for " + std::to_string(rows) + " rows");
    }
  }
  std::vector<T> out(idx.size() * cols);
  auto xd = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t c = 0; c < cols; ++c) out[i * cols + c] = xd[at(idx[i], c)];
  Shape shape{idx.size(), cols};
  return detail::make_result<T>("gather-rows", std::move(shape), std::move(out), {x},
                                [=, idx = std::move(idx)](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (std::size_t c = 0; c < cols; ++c) g[at(idx[i], c)] += self.grad[i * cols + c];
                                });
}

// ---------------------------------------------------------------------------
// Dynamic dispatch by op kind

enum class OpKind {
  add,
  sub,
  mul,
  div,
  matmul,
  conv2d,
  upsample2,
  maxpool2,
  concat_channels,
  relu,
  leaky_relu,
  exp,
  log,
  square,
  sqrt,
  sum,
  mean,
  softmax_channels,
  gather_rows,
  scalar_scale,
};

struct OpAttrs {
  double scalar = 1.0;  // scale factor or leaky-relu slope
  std::vector<std::size_t> indices;
};

inline constexpr std::pair<OpKind, std::string_view> kOpNames[] = {
    {OpKind::add, "add"},
    {OpKind::sub, "sub"},
    {OpKind::mul, "mul"},
    {OpKind::div, "div"},
    {OpKind::matmul, "matmul"},
    {OpKind::conv2d, "conv2d"},
    {OpKind::upsample2, "nearest-upsample2x"},
    {OpKind::maxpool2, "maxpool2x2"},
    {OpKind::concat_channels, "concat-channels"},
    {OpKind::relu, "relu"},
    {OpKind::leaky_relu, "leaky-relu"},
    {OpKind::exp, "exp"},
    {OpKind::log, "log"},
    {OpKind::square, "square"},
    {OpKind::sqrt, "sqrt"},
    {OpKind::sum, "sum"},
    {OpKind::mean, "mean"},
    {OpKind::softmax_channels, "softmax-channels"},
    {OpKind::gather_rows, "gather-rows"},
    {OpKind::scalar_scale, "scalar-scale"},
};

inline OpKind op_kind_from_name(std::string_view name) {
  for (auto [kind, n] : kOpNames)
    if (n == name) return kind;
  throw AutodiffError("forward_op: unsupported op kind '" + std::string(name) + "'");
}

inline std::string_view op_kind_name(OpKind kind) {
  for (auto [k, n] : kOpNames)
    if (k == kind) return n;
  throw AutodiffError("forward_op: unsupported op kind " + std::to_string(static_cast<int>(kind)));
}

template <class T>
Tensor<T> forward_op(OpKind kind, std::span<const Tensor<T>> in, const OpAttrs& attrs = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_kind_name(kind)) + ": expects " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::add: arity(2); return add(in[0], in[1]);
    case OpKind::sub: arity(2); return sub(in[0], in[1]);
    case OpKind::mul: arity(2); return mul(in[0], in[1]);
    case OpKind::div: arity(2); return div(in[0], in[1]);
    case OpKind::matmul: arity(2); return matmul(in[0], in[1]);
    case OpKind::conv2d: arity(3); return conv2d(in[0], in[1], in[2]);
    case OpKind::upsample2: arity(1); return upsample2(in[0]);
    case OpKind::maxpool2: arity(1); return maxpool2(in[0]);
    case OpKind::concat_channels: arity(2); return concat_channels(in[0], in[1]);
    case OpKind::relu: arity(1); return relu(in[0]);
    case OpKind::leaky_relu: arity(1); return leaky_relu(in[0], static_cast<T>(attrs.scalar));
    case OpKind::exp: arity(1); return exp(in[0]);
    case OpKind::log: arity(1); return log(in[0]);
    case OpKind::square: arity(1); return square(in[0]);
    case OpKind::sqrt: arity(1); return sqrt(in[0]);
    case OpKind::sum: arity(1); return sum(in[0]);
    case OpKind::mean: arity(1); return mean(in[0]);
    case OpKind::softmax_channels: arity(1); return softmax_channels(in[0]);
    case OpKind::gather_rows: arity(1); return gather_rows(in[0], std::span<const std::size_t>(attrs.indices));
    case OpKind::scalar_scale: arity(1); return scale(in[0], static_cast<T>(attrs.scalar));
  }
  throw AutodiffError("forward_op: unsupported op kind " + std::to_string(static_cast<int>(kind)));
}

template <class T>
Tensor<T> forward_op(std::string_view kind, std::span<const Tensor<T>> in, const OpAttrs& attrs = {}) {
  return forward_op<T>(op_kind_from_name(kind), in, attrs);
}

}  // namespace segreg
