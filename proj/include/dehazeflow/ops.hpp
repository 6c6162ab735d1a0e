#pragma once

// Differentiable primitives used by the purifier, the Haze-LUT and the
// solvers. Every op computes its forward value eagerly and records a closure
// that scatters the output gradient into its inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dehazeflow/autodiff.hpp"
#include "dehazeflow/error.hpp"
#include "dehazeflow/tensor.hpp"

namespace dehazeflow {

namespace detail {

template <class T>
Graph<T>& owner(const Var<T>& a) {
  if (!a.valid()) throw GraphError("op applied to an empty Var");
  return *a.graph();
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + a.shape().str() + " vs " + b.shape().str());
  }
}

// Range [lo, hi) of output positions o with 0 <= o*stride + k - pad < in.
inline void valid_range(long in, long out, long k, long stride, long pad, long& lo, long& hi) {
  long first = pad - k;
  lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  long last = in - 1 + pad - k;
  hi = last < 0 ? 0 : std::min(out, last / stride + 1);
  if (hi < lo) hi = lo;
}

template <class T>
T gaussian_cdf(T x) {
  // erfc keeps the far negative tail from underflowing to zero
  return T(0.5) * std::erfc(-x / std::sqrt(T(2)));
}

template <class T>
T gaussian_pdf(T x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return static_cast<T>(kInvSqrt2Pi) * std::exp(T(-0.5) * x * x);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value() + b.value();
  return detail::owner(a).record(
      std::move(out), {a, b},
      [a, b](Graph<T>& g, const Tensor<T>& go) {
        g.accumulate(a, go);
        g.accumulate(b, go);
      },
      "add");
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value() - b.value();
  return detail::owner(a).record(
      std::move(out), {a, b},
      [a, b](Graph<T>& g, const Tensor<T>& go) {
        g.accumulate(a, go);
        if (g.requires_grad(b)) g.accumulate(b, go * T(-1));
      },
      "sub");
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  return detail::owner(a).record(
      std::move(out), {a, b},
      [a, b](Graph<T>& g, const Tensor<T>& go) {
        const auto& av = a.value();
        const auto& bv = b.value();
        if (g.requires_grad(a)) {
          auto& ga = g.grad_buffer(a);
          for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * bv[i];
        }
        if (g.requires_grad(b)) {
          auto& gb = g.grad_buffer(b);
          for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * av[i];
        }
      },
      "mul");
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value() * s;
  return detail::owner(a).record(
      std::move(out), {a},
      [a, s](Graph<T>& g, const Tensor<T>& go) {
        auto& ga = g.grad_buffer(a);
        for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * s;
      },
      "scale");
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v += s;
  return detail::owner(a).record(
      std::move(out), {a}, [a](Graph<T>& g, const Tensor<T>& go) { g.accumulate(a, go); },
      "add_scalar");
}

/// a + s where s is a 1x1x1x1 variable broadcast over every element of a.
template <class T>
Var<T> add_broadcast_scalar(const Var<T>& a, const Var<T>& s) {
  if (s.value().numel() != 1) throw ShapeError("add_broadcast_scalar: s must hold one element");
  Tensor<T> out = a.value();
  const T sv = s.value()[0];
  for (auto& v : out.data()) v += sv;
  return detail::owner(a).record(
      std::move(out), {a, s},
      [a, s](Graph<T>& g, const Tensor<T>& go) {
        g.accumulate(a, go);
        if (g.requires_grad(s)) {
          double acc = 0;
          for (T v : go.data()) acc += v;
          g.grad_buffer(s)[0] += static_cast<T>(acc);
        }
      },
      "add_broadcast_scalar");
}

/// x[n,c,y,x] * m[n,0,y,x]: multiply every channel by a single-channel map.
template <class T>
Var<T> mul_plane_broadcast(const Var<T>& x, const Var<T>& m) {
  const Shape4 xs = x.shape();
  const Shape4 ms = m.shape();
  if (ms.c != 1 || ms.n != xs.n || ms.h != xs.h || ms.w != xs.w) {
    throw ShapeError("mul_plane_broadcast: map " + ms.str() + " incompatible with " + xs.str());
  }
  const auto& xv = x.value();
  const auto& mv = m.value();
  Tensor<T> out(xs);
  const std::size_t plane = xs.plane();
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* mp = mv.plane(n, 0);
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* xp = xv.plane(n, c);
      T* op = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) op[i] = xp[i] * mp[i];
    }
  }
  return detail::owner(x).record(
      std::move(out), {x, m},
      [x, m](Graph<T>& g, const Tensor<T>& go) {
        const auto& xv = x.value();
        const auto& mv = m.value();
        const Shape4 xs = xv.shape();
        const std::size_t plane = xs.plane();
        const bool gx = g.requires_grad(x);
        const bool gm = g.requires_grad(m);
        for (std::size_t n = 0; n < xs.n; ++n) {
          const T* mp = mv.plane(n, 0);
          for (std::size_t c = 0; c < xs.c; ++c) {
            const T* gp = go.plane(n, c);
            if (gx) {
              T* dx = g.grad_buffer(x).plane(n, c);
              for (std::size_t i = 0; i < plane; ++i) dx[i] += gp[i] * mp[i];
            }
            if (gm) {
              const T* xp = xv.plane(n, c);
              T* dm = g.grad_buffer(m).plane(n, 0);
              for (std::size_t i = 0; i < plane; ++i) dm[i] += gp[i] * xp[i];
            }
          }
        }
      },
      "mul_plane_broadcast");
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}
template <class T>
Var<T> operator*(const Var<T>& a, T s) {
  return scale(a, s);
}
template <class T>
Var<T> operator*(T s, const Var<T>& a) {
  return scale(a, s);
}

// ---------------------------------------------------------------------------
// Activations

/// Exact GELU: x * Phi(x) with the erf-based Gaussian CDF.
template <class T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v * detail::gaussian_cdf(v);
  return detail::owner(x).record(
      std::move(out), {x},
      [x](Graph<T>& g, const Tensor<T>& go) {
        const auto& xv = x.value();
        auto& gx = g.grad_buffer(x);
        for (std::size_t i = 0; i < go.numel(); ++i) {
          const T v = xv[i];
          gx[i] += go[i] * (detail::gaussian_cdf(v) + v * detail::gaussian_pdf(v));
        }
      },
      "gelu");
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = T(1) / (T(1) + std::exp(-v));
  Graph<T>& g0 = detail::owner(x);
  // The backward closure reads the output through its own node.
  auto holder = std::make_shared<Var<T>>();
  Var<T> y = g0.record(
      std::move(out), {x},
      [x, holder](Graph<T>& g, const Tensor<T>& go) {
        const auto& yv = holder->value();
        auto& gx = g.grad_buffer(x);
        for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * yv[i] * (T(1) - yv[i]);
      },
      "sigmoid");
  *holder = y;
  return y;
}

/// Clamp into [lo, hi]; gradient passes only where lo < x < hi.
template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  Tensor<T> out = clamp(x.value(), lo, hi);
  return detail::owner(x).record(
      std::move(out), {x},
      [x, lo, hi](Graph<T>& g, const Tensor<T>& go) {
        const auto& xv = x.value();
        auto& gx = g.grad_buffer(x);
        for (std::size_t i = 0; i < go.numel(); ++i) {
          if (xv[i] > lo && xv[i] < hi) gx[i] += go[i];
        }
      },
      "clamp");
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& x) {
  double acc = 0;
  for (T v : x.value().data()) acc += v;
  return detail::owner(x).record(
      Tensor<T>::scalar(static_cast<T>(acc)), {x},
      [x](Graph<T>& g, const Tensor<T>& go) {
        auto& gx = g.grad_buffer(x);
        for (auto& v : gx.data()) v += go[0];
      },
      "sum");
}

template <class T>
Var<T> mean(const Var<T>& x) {
  const double n = static_cast<double>(x.value().numel());
  double acc = 0;
  for (T v : x.value().data()) acc += v;
  return detail::owner(x).record(
      Tensor<T>::scalar(static_cast<T>(acc / n)), {x},
      [x, n](Graph<T>& g, const Tensor<T>& go) {
        auto& gx = g.grad_buffer(x);
        const T s = static_cast<T>(go[0] / n);
        for (auto& v : gx.data()) v += s;
      },
      "mean");
}

/// Mean absolute difference over all elements.
template <class T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& target) {
  detail::require_same_shape(pred, target, "l1_loss");
  const auto& pv = pred.value();
  const auto& tv = target.value();
  const double n = static_cast<double>(pv.numel());
  double acc = 0;
  for (std::size_t i = 0; i < pv.numel(); ++i) acc += std::abs(static_cast<double>(pv[i]) - tv[i]);
  return detail::owner(pred).record(
      Tensor<T>::scalar(static_cast<T>(acc / n)), {pred, target},
      [pred, target, n](Graph<T>& g, const Tensor<T>& go) {
        const auto& pv = pred.value();
        const auto& tv = target.value();
        const T s = static_cast<T>(go[0] / n);
        const bool gp = g.requires_grad(pred);
        const bool gt = g.requires_grad(target);
        for (std::size_t i = 0; i < pv.numel(); ++i) {
          const T d = pv[i] - tv[i];
          const T sign = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
          if (gp) g.grad_buffer(pred)[i] += s * sign;
          if (gt) g.grad_buffer(target)[i] -= s * sign;
        }
      },
      "l1_loss");
}

// ---------------------------------------------------------------------------
// Convolution

/// Output extent of a convolution along one axis.
constexpr std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                    std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Geometry of a 2-D convolution, with the input unrolled ("im2col") one band
// of output rows at a time so the inner loops run over contiguous spans.
struct ConvGeometry {
  long cin, hin, win, k, stride, pad, hout, wout;

  long rows() const { return cin * k * k; }

  // Rows of output per band, keeping the unrolled band around 64K values.
  long band_rows() const {
    const long per_row = std::max(1L, rows() * wout);
    return std::clamp(65536L / per_row, 1L, hout);
  }

  template <class T>
  void unroll(const T* in, long y0, long y1, T* col) const {
    const long len = (y1 - y0) * wout;
    for (long ci = 0; ci < cin; ++ci) {
      const T* ip = in + ci * hin * win;
      for (long ky = 0; ky < k; ++ky) {
        for (long kx = 0; kx < k; ++kx) {
          T* dst = col + ((ci * k + ky) * k + kx) * len;
          long xlo, xhi;
          valid_range(win, wout, kx, stride, pad, xlo, xhi);
          for (long oy = y0; oy < y1; ++oy) {
            T* drow = dst + (oy - y0) * wout;
            const long iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= hin) {
              std::fill(drow, drow + wout, T(0));
              continue;
            }
            std::fill(drow, drow + xlo, T(0));
            std::fill(drow + xhi, drow + wout, T(0));
            const T* srow = ip + iy * win + (kx - pad);
            if (stride == 1) {
              std::copy(srow + xlo, srow + xhi, drow + xlo);
            } else {
              for (long ox = xlo; ox < xhi; ++ox) drow[ox] = srow[ox * stride];
            }
          }
        }
      }
    }
  }

  // Scatter-add an unrolled band back onto the input layout.
  template <class T>
  void fold(const T* col, long y0, long y1, T* in) const {
    const long len = (y1 - y0) * wout;
    for (long ci = 0; ci < cin; ++ci) {
      T* ip = in + ci * hin * win;
      for (long ky = 0; ky < k; ++ky) {
        for (long kx = 0; kx < k; ++kx) {
          const T* src = col + ((ci * k + ky) * k + kx) * len;
          long xlo, xhi;
          valid_range(win, wout, kx, stride, pad, xlo, xhi);
          for (long oy = y0; oy < y1; ++oy) {
            const long iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= hin) continue;
            const T* srow = src + (oy - y0) * wout;
            T* drow = ip + iy * win + (kx - pad);
            if (stride == 1) {
              for (long ox = xlo; ox < xhi; ++ox) drow[ox] += srow[ox];
            } else {
              for (long ox = xlo; ox < xhi; ++ox) drow[ox * stride] += srow[ox];
            }
          }
        }
      }
    }
  }
};

// Dot product with eight independent partial sums; the fixed association
// order keeps results deterministic while letting the loop vectorise.
template <class T>
T dot(const T* a, const T* b, long n) {
  T acc[8] = {};
  long i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// Per-thread scratch buffer reused across convolution calls.
template <class T>
T* scratch(std::size_t slot, std::size_t size) {
  thread_local std::vector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < size) b.resize(size);
  return b.data();
}

}  // namespace detail

/// Cross-correlation. weight: [C_out, C_in, k, k] with k in {1, 3}; bias: [1, C_out, 1, 1].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride = 1,
              std::size_t pad = 0) {
  const Shape4 xs = x.shape();
  const Shape4 ws = weight.shape();
  if (ws.h != ws.w || (ws.h != 1 && ws.h != 3)) {
    throw ShapeError("conv2d: kernel must be 1x1 or 3x3, got " + ws.str());
  }
  if (ws.c != xs.c) {
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, kernel expects " +
                     std::to_string(ws.c));
  }
  if (bias.shape() != Shape4{1, ws.n, 1, 1}) {
    throw ShapeError("conv2d: bias shape " + bias.shape().str() + " for " +
                     std::to_string(ws.n) + " output channels");
  }
  if (stride == 0 || xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w) {
    throw ShapeError("conv2d: input " + xs.str() + " too small for kernel");
  }
  const Shape4 os{xs.n, ws.n, conv_out_size(xs.h, ws.h, stride, pad),
                  conv_out_size(xs.w, ws.w, stride, pad)};
  const detail::ConvGeometry geo{static_cast<long>(xs.c), static_cast<long>(xs.h),
                                 static_cast<long>(xs.w), static_cast<long>(ws.h),
                                 static_cast<long>(stride), static_cast<long>(pad),
                                 static_cast<long>(os.h), static_cast<long>(os.w)};
  const long rows = geo.rows();
  const long band = geo.band_rows();
  const std::size_t cout = ws.n;

  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  Tensor<T> out(os);
  T* col = detail::scratch<T>(0, static_cast<std::size_t>(rows * band * geo.wout));
  for (std::size_t n = 0; n < os.n; ++n) {
    for (long y0 = 0; y0 < geo.hout; y0 += band) {
      const long y1 = std::min(geo.hout, y0 + band);
      const long len = (y1 - y0) * geo.wout;
      geo.unroll(xv.plane(n, 0), y0, y1, col);
      for (std::size_t co = 0; co < cout; ++co) {
        T* op = out.plane(n, co) + y0 * geo.wout;
        std::fill(op, op + len, bv[co]);
        const T* wr = wv.ptr() + co * rows;
        for (long r = 0; r < rows; ++r) {
          const T wk = wr[r];
          const T* cr = col + r * len;
          for (long i = 0; i < len; ++i) op[i] += wk * cr[i];
        }
      }
    }
  }

  return detail::owner(x).record(
      std::move(out), {x, weight, bias},
      [x, weight, bias, geo](Graph<T>& g, const Tensor<T>& go) {
        const auto& xv = x.value();
        const auto& wv = weight.value();
        const Shape4 os = go.shape();
        const bool gx = g.requires_grad(x);
        const bool gw = g.requires_grad(weight);
        if (g.requires_grad(bias)) {
          auto& gb = g.grad_buffer(bias);
          for (std::size_t n = 0; n < os.n; ++n) {
            for (std::size_t co = 0; co < os.c; ++co) {
              const T* gp = go.plane(n, co);
              double acc = 0;
              for (std::size_t i = 0; i < os.plane(); ++i) acc += gp[i];
              gb[co] += static_cast<T>(acc);
            }
          }
        }
        if (!gx && !gw) return;
        const long rows = geo.rows();
        const long band = geo.band_rows();
        const std::size_t cap = static_cast<std::size_t>(rows * band * geo.wout);
        T* col = detail::scratch<T>(0, cap);
        T* dcol = gx ? detail::scratch<T>(1, cap) : nullptr;
        T* dw = gw ? g.grad_buffer(weight).ptr() : nullptr;
        for (std::size_t n = 0; n < os.n; ++n) {
          for (long y0 = 0; y0 < geo.hout; y0 += band) {
            const long y1 = std::min(geo.hout, y0 + band);
            const long len = (y1 - y0) * geo.wout;
            if (dw) geo.unroll(xv.plane(n, 0), y0, y1, col);
            if (gx) std::fill(dcol, dcol + rows * len, T(0));
            for (std::size_t co = 0; co < os.c; ++co) {
              const T* gp = go.plane(n, co) + y0 * geo.wout;
              const T* wr = wv.ptr() + co * rows;
              for (long r = 0; r < rows; ++r) {
                if (dw) dw[co * rows + r] += detail::dot(gp, col + r * len, len);
                if (gx) {
                  const T wk = wr[r];
                  T* dr = dcol + r * len;
                  for (long i = 0; i < len; ++i) dr[i] += wk * gp[i];
                }
              }
            }
            if (gx) geo.fold(dcol, y0, y1, g.grad_buffer(x).plane(n, 0));
          }
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------------------
// Resampling

/// 2x2 / stride-2 max pooling. Odd extents are replication-padded, so the
/// output is ceil(H/2) x ceil(W/2). Gradient goes to the first maximum of each
/// window in row-major order.
template <class T>
Var<T> maxpool2d(const Var<T>& x) {
  const Shape4 xs = x.shape();
  const Shape4 os{xs.n, xs.c, (xs.h + 1) / 2, (xs.w + 1) / 2};
  const auto& xv = x.value();
  Tensor<T> out(os);
  std::vector<std::uint32_t> arg(os.numel());
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* ip = xv.plane(n, c);
      T* op = out.plane(n, c);
      std::uint32_t* ap = arg.data() + out.index(n, c, 0, 0);
      for (std::size_t oy = 0; oy < os.h; ++oy) {
        const std::size_t y0 = 2 * oy, y1 = std::min(2 * oy + 1, xs.h - 1);
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const std::size_t x0 = 2 * ox, x1 = std::min(2 * ox + 1, xs.w - 1);
          const std::size_t cand[4] = {y0 * xs.w + x0, y0 * xs.w + x1, y1 * xs.w + x0,
                                       y1 * xs.w + x1};
          std::size_t best = cand[0];
          for (int i = 1; i < 4; ++i) {
            if (ip[cand[i]] > ip[best]) best = cand[i];
          }
          op[oy * os.w + ox] = ip[best];
          ap[oy * os.w + ox] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return detail::owner(x).record(
      std::move(out), {x},
      [x, arg = std::move(arg)](Graph<T>& g, const Tensor<T>& go) {
        auto& gx = g.grad_buffer(x);
        const Shape4 os = go.shape();
        for (std::size_t n = 0; n < os.n; ++n) {
          for (std::size_t c = 0; c < os.c; ++c) {
            const std::size_t base = go.index(n, c, 0, 0);
            T* dp = gx.plane(n, c);
            for (std::size_t i = 0; i < os.plane(); ++i) dp[arg[base + i]] += go[base + i];
          }
        }
      },
      "maxpool2d");
}

namespace detail {

// One axis of 2x bilinear upsampling, align-corners=false.
struct LinearTap {
  std::size_t i0, i1;
  double w1;
};

inline std::vector<LinearTap> upsample_taps(std::size_t in) {
  std::vector<LinearTap> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// 2x bilinear upsampling with the align-corners=false sampling convention.
template <class T>
Var<T> upsample_bilinear2x(const Var<T>& x) {
  const Shape4 xs = x.shape();
  const Shape4 os{xs.n, xs.c, 2 * xs.h, 2 * xs.w};
  const auto ty = detail::upsample_taps(xs.h);
  const auto tx = detail::upsample_taps(xs.w);
  const auto& xv = x.value();
  Tensor<T> out(os);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* ip = xv.plane(n, c);
      T* op = out.plane(n, c);
      for (std::size_t oy = 0; oy < os.h; ++oy) {
        const auto& a = ty[oy];
        const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
        const T* r0 = ip + a.i0 * xs.w;
        const T* r1 = ip + a.i1 * xs.w;
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const auto& b = tx[ox];
          const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
          op[oy * os.w + ox] = wy0 * (wx0 * r0[b.i0] + wx1 * r0[b.i1]) +
                               wy1 * (wx0 * r1[b.i0] + wx1 * r1[b.i1]);
        }
      }
    }
  }
  return detail::owner(x).record(
      std::move(out), {x},
      [x, ty, tx](Graph<T>& g, const Tensor<T>& go) {
        auto& gx = g.grad_buffer(x);
        const Shape4 xs = gx.shape();
        const Shape4 os = go.shape();
        for (std::size_t n = 0; n < xs.n; ++n) {
          for (std::size_t c = 0; c < xs.c; ++c) {
            T* dp = gx.plane(n, c);
            const T* gp = go.plane(n, c);
            for (std::size_t oy = 0; oy < os.h; ++oy) {
              const auto& a = ty[oy];
              const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
              T* r0 = dp + a.i0 * xs.w;
              T* r1 = dp + a.i1 * xs.w;
              for (std::size_t ox = 0; ox < os.w; ++ox) {
                const auto& b = tx[ox];
                const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
                const T v = gp[oy * os.w + ox];
                r0[b.i0] += v * wy0 * wx0;
                r0[b.i1] += v * wy0 * wx1;
                r1[b.i0] += v * wy1 * wx0;
                r1[b.i1] += v * wy1 * wx1;
              }
            }
          }
        }
      },
      "upsample_bilinear2x");
}

/// Keep the top-left h x w window.
template <class T>
Var<T> crop(const Var<T>& x, std::size_t h, std::size_t w) {
  const Shape4 xs = x.shape();
  if (h > xs.h || w > xs.w) throw ShapeError("crop: target larger than " + xs.str());
  if (h == xs.h && w == xs.w) return x;
  Tensor<T> out(Shape4{xs.n, xs.c, h, w});
  const auto& xv = x.value();
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(xv.plane(n, c) + y * xs.w, w, out.plane(n, c) + y * w);
  return detail::owner(x).record(
      std::move(out), {x},
      [x, h, w](Graph<T>& g, const Tensor<T>& go) {
        auto& gx = g.grad_buffer(x);
        const Shape4 xs = gx.shape();
        for (std::size_t n = 0; n < xs.n; ++n)
          for (std::size_t c = 0; c < xs.c; ++c)
            for (std::size_t y = 0; y < h; ++y) {
              const T* src = go.plane(n, c) + y * w;
              T* dst = gx.plane(n, c) + y * xs.w;
              for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
            }
      },
      "crop");
}

/// Channel concatenation [a, b].
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape4 as = a.shape();
  const Shape4 bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: " + as.str() + " vs " + bs.str());
  }
  Tensor<T> out(Shape4{as.n, as.c + bs.c, as.h, as.w});
  const std::size_t plane = as.plane();
  for (std::size_t n = 0; n < as.n; ++n) {
    std::copy_n(a.value().plane(n, 0), as.c * plane, out.plane(n, 0));
    std::copy_n(b.value().plane(n, 0), bs.c * plane, out.plane(n, as.c));
  }
  return detail::owner(a).record(
      std::move(out), {a, b},
      [a, b](Graph<T>& g, const Tensor<T>& go) {
        const Shape4 as = a.shape();
        const Shape4 bs = b.shape();
        const std::size_t plane = as.plane();
        for (std::size_t n = 0; n < as.n; ++n) {
          if (g.requires_grad(a)) {
            T* d = g.grad_buffer(a).plane(n, 0);
            const T* s = go.plane(n, 0);
            for (std::size_t i = 0; i < as.c * plane; ++i) d[i] += s[i];
          }
          if (g.requires_grad(b)) {
            T* d = g.grad_buffer(b).plane(n, 0);
            const T* s = go.plane(n, as.c);
            for (std::size_t i = 0; i < bs.c * plane; ++i) d[i] += s[i];
          }
        }
      },
      "concat_channels");
}

// ---------------------------------------------------------------------------
// Normalisation and attention

inline constexpr double kInstanceNormEps = 1e-5;

/// Per-(batch, channel) normalisation to zero mean / unit (biased) variance,
/// followed by a learnable per-channel affine map. gain, bias: [1, C, 1, 1].
/// A 1x1 plane has zero variance and normalises to 0, leaving only the bias.
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                     double eps = kInstanceNormEps) {
  const Shape4 xs = x.shape();
  const Shape4 ps{1, xs.c, 1, 1};
  if (gain.shape() != ps || bias.shape() != ps) {
    throw ShapeError("instance_norm: affine parameters must be " + ps.str());
  }
  const std::size_t plane = xs.plane();
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  Tensor<T> out(xs);
  Tensor<T> xhat(xs);
  std::vector<T> inv_std(xs.n * xs.c);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* ip = xv.plane(n, c);
      double m = 0;
      for (std::size_t i = 0; i < plane; ++i) m += ip[i];
      m /= static_cast<double>(plane);
      double shift = 0;
      for (std::size_t i = 0; i < plane; ++i) shift += ip[i] - m;
      m += shift / static_cast<double>(plane);
      double var = 0;
      for (std::size_t i = 0; i < plane; ++i) var += (ip[i] - m) * (ip[i] - m);
      var /= static_cast<double>(plane);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[n * xs.c + c] = static_cast<T>(is);
      T* hp = xhat.plane(n, c);
      T* op = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        hp[i] = static_cast<T>((ip[i] - m) * is);
        op[i] = gv[c] * hp[i] + bv[c];
      }
    }
  }
  return detail::owner(x).record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph<T>& g, const Tensor<T>& go) {
        const Shape4 xs = xhat.shape();
        const std::size_t plane = xs.plane();
        const auto& gv = gain.value();
        const bool gx = g.requires_grad(x);
        const bool gg = g.requires_grad(gain);
        const bool gb = g.requires_grad(bias);
        for (std::size_t n = 0; n < xs.n; ++n) {
          for (std::size_t c = 0; c < xs.c; ++c) {
            const T* gp = go.plane(n, c);
            const T* hp = xhat.plane(n, c);
            double sum_g = 0, sum_gh = 0;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g += gp[i];
              sum_gh += static_cast<double>(gp[i]) * hp[i];
            }
            if (gg) g.grad_buffer(gain)[c] += static_cast<T>(sum_gh);
            if (gb) g.grad_buffer(bias)[c] += static_cast<T>(sum_g);
            if (gx) {
              // d xhat = gain * g; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
              const double gam = gv[c];
              const double mean_d = gam * sum_g / static_cast<double>(plane);
              const double mean_dh = gam * sum_gh / static_cast<double>(plane);
              const double is = inv_std[n * xs.c + c];
              T* dp = g.grad_buffer(x).plane(n, c);
              for (std::size_t i = 0; i < plane; ++i) {
                dp[i] += static_cast<T>(is * (gam * gp[i] - mean_d - hp[i] * mean_dh));
              }
            }
          }
        }
      },
      "instance_norm");
}

/// Spatial attention: a 3x3 conv to one channel, a sigmoid map in (0, 1), and
/// a broadcast multiply onto every feature channel.
/// weight: [1, C, 3, 3]; bias: [1, 1, 1, 1].
template <class T>
Var<T> spatial_attention(const Var<T>& features, const Var<T>& weight, const Var<T>& bias) {
  if (weight.shape().n != 1) throw ShapeError("spatial_attention: weight must map to 1 channel");
  const Var<T> map = sigmoid(conv2d(features, weight, bias, 1, 1));
  return mul_plane_broadcast(features, map);
}

}  // namespace dehazeflow
