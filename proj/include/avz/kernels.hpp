#pragma once

// Forward and backward kernels for the layer types the model uses. Every
// function here is pure: outputs are returned or written into caller-provided
// buffers, and gradient buffers are accumulated into (never overwritten) so
// that shared weights can sum contributions from several uses.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "avz/errors.hpp"
#include "avz/tensor.hpp"

namespace avz {

enum class Activation { relu, sigmoid, identity };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "identity") return Activation::identity;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

template <typename T>
T activate(Activation a, T v) {
  switch (a) {
    case Activation::relu: return v > T{0} ? v : T{0};
    case Activation::sigmoid: return T{1} / (T{1} + std::exp(-v));
    case Activation::identity: return v;
  }
  return v;
}

/// Derivative of the activation expressed through its output y = f(v).
template <typename T>
T activation_slope(Activation a, T y) {
  switch (a) {
    case Activation::relu: return y > T{0} ? T{1} : T{0};
    case Activation::sigmoid: return y * (T{1} - y);
    case Activation::identity: return T{1};
  }
  return T{1};
}

template <typename T>
void apply_activation(Activation a, Tensor<T>& t) {
  if (a == Activation::identity) return;
  for (auto& v : t.vec()) v = activate(a, v);
}

// ---------------------------------------------------------------------------
// Lanes. Dense and convolution kernels accept a trailing "lane" extent so the
// same weights can be applied to several independent inputs in one pass
// (the viewports of a stack). A dense input of rank 1 and a conv input of
// rank 3 have a single lane. Each lane is computed with exactly the
// arithmetic of the single-lane case, so results do not depend on how many
// lanes travel together.

inline std::size_t dense_lanes(const Shape& s) { return s.size() == 2 ? s[1] : 1; }
inline std::size_t conv_lanes(const Shape& s) { return s.size() == 4 ? s[3] : 1; }

inline Shape with_lanes(Shape base, std::size_t lanes, bool keep_lane_axis) {
  if (keep_lane_axis) base.push_back(lanes);
  return base;
}

namespace detail {

template <typename T>
struct Simd {
  typedef T type __attribute__((vector_size(64)));
  static constexpr std::size_t width = 64 / sizeof(T);
  static type load(const T* p) {
    type v;
    std::memcpy(&v, p, sizeof(type));
    return v;
  }
  static void store(T* p, type v) { std::memcpy(p, &v, sizeof(type)); }
  static type splat(T x) { return type{} + x; }
};

/// y[q][j] += sum_t w[q][t] * rows[t][j] for NO output rows and NV vectors
/// of columns starting at j0. Each element sums its taps in ascending order,
/// the same order the scalar tail uses.
template <typename T, std::size_t NO, std::size_t NV>
inline void fma_block(T* const* y, const T* const* w, const T* const* rows, std::size_t taps,
                      std::size_t j0) {
  using S = Simd<T>;
  constexpr std::size_t V = S::width;
  typename S::type acc[NO][NV];
  for (std::size_t q = 0; q < NO; ++q)
    for (std::size_t v = 0; v < NV; ++v) acc[q][v] = S::load(y[q] + j0 + v * V);
  for (std::size_t t = 0; t < taps; ++t) {
    const T* r = rows[t] + j0;
    typename S::type x[NV];
    for (std::size_t v = 0; v < NV; ++v) x[v] = S::load(r + v * V);
    for (std::size_t q = 0; q < NO; ++q) {
      const auto wv = S::splat(w[q][t]);
      for (std::size_t v = 0; v < NV; ++v) acc[q][v] += wv * x[v];
    }
  }
  for (std::size_t q = 0; q < NO; ++q)
    for (std::size_t v = 0; v < NV; ++v) S::store(y[q] + j0 + v * V, acc[q][v]);
}

template <typename T, std::size_t NO>
void fma_rows(T* const* y, const T* const* w, const T* const* rows, std::size_t taps, std::size_t n) {
  constexpr std::size_t V = Simd<T>::width;
  std::size_t j0 = 0;
  for (; j0 + 4 * V <= n; j0 += 4 * V) fma_block<T, NO, 4>(y, w, rows, taps, j0);
  for (; j0 + V <= n; j0 += V) fma_block<T, NO, 1>(y, w, rows, taps, j0);
  for (; j0 < n; ++j0)
    for (std::size_t q = 0; q < NO; ++q) {
      T acc = y[q][j0];
      for (std::size_t t = 0; t < taps; ++t) acc += w[q][t] * rows[t][j0];
      y[q][j0] = acc;
    }
}

/// y[o] (+)= valid cross-correlation of x with filters w. y must be sized
/// O x Ho x Wo (x lanes) and already hold the starting values.
template <typename T>
void correlate_accumulate(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t P,
                          const T* w, std::size_t O, std::size_t K, std::size_t L, T* y) {
  const std::size_t Ho = H - K + 1, Wo = W - L + 1;
  const std::size_t row_in = W * P, row_out = Wo * P;
  const std::size_t taps = C * K * L;
  std::vector<const T*> rows(taps);
  for (std::size_t i = 0; i < Ho; ++i) {
    // Row pointers for every (c, k, l) tap, in filter storage order.
    std::size_t n = 0;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t l = 0; l < L; ++l) rows[n++] = x + c * H * row_in + (i + k) * row_in + l * P;
    std::size_t o = 0;
    for (; o + 4 <= O; o += 4) {
      T* ys[4];
      const T* ws[4];
      for (std::size_t q = 0; q < 4; ++q) ys[q] = y + ((o + q) * Ho + i) * row_out, ws[q] = w + (o + q) * taps;
      fma_rows<T, 4>(ys, ws, rows.data(), taps, row_out);
    }
    for (; o < O; ++o) {
      T* ys[1] = {y + (o * Ho + i) * row_out};
      const T* ws[1] = {w + o * taps};
      fma_rows<T, 1>(ys, ws, rows.data(), taps, row_out);
    }
  }
}

/// out[a * ld + b] += <A[a], B[b]> over n elements for a < NA, b < NB.
template <typename T, std::size_t NA, std::size_t NB>
void dot_block(const T* const* A, const T* const* B, std::size_t n, T* out, std::size_t ld) {
  using S = Simd<T>;
  constexpr std::size_t V = S::width;
  typename S::type acc[NA][NB] = {};
  std::size_t j0 = 0;
  for (; j0 + V <= n; j0 += V) {
    typename S::type a[NA], b[NB];
    for (std::size_t p = 0; p < NA; ++p) a[p] = S::load(A[p] + j0);
    for (std::size_t q = 0; q < NB; ++q) b[q] = S::load(B[q] + j0);
    for (std::size_t p = 0; p < NA; ++p)
      for (std::size_t q = 0; q < NB; ++q) acc[p][q] += a[p] * b[q];
  }
  for (std::size_t p = 0; p < NA; ++p)
    for (std::size_t q = 0; q < NB; ++q) {
      T s = T{0};
      for (std::size_t v = 0; v < V; ++v) s += acc[p][q][v];
      for (std::size_t j = j0; j < n; ++j) s += A[p][j] * B[q][j];
      out[p * ld + q] += s;
    }
}

template <typename T, std::size_t NA>
void dot_block_rows(const T* const* A, const T* const* B, std::size_t nb, std::size_t n, T* out,
                    std::size_t ld) {
  switch (nb) {
    case 4: return dot_block<T, NA, 4>(A, B, n, out, ld);
    case 3: return dot_block<T, NA, 3>(A, B, n, out, ld);
    case 2: return dot_block<T, NA, 2>(A, B, n, out, ld);
    default: return dot_block<T, NA, 1>(A, B, n, out, ld);
  }
}

/// out[a * ld + b] += <A[a], B[b]> over n elements for every a < na, b < nb.
template <typename T>
void dot_grid(const T* const* A, std::size_t na, const T* const* B, std::size_t nb, std::size_t n,
              T* out, std::size_t ld) {
  for (std::size_t a = 0; a < na; a += 4)
    for (std::size_t b = 0; b < nb; b += 4) {
      const std::size_t rb = std::min<std::size_t>(4, nb - b);
      T* o = out + a * ld + b;
      switch (std::min<std::size_t>(4, na - a)) {
        case 4: dot_block_rows<T, 4>(A + a, B + b, rb, n, o, ld); break;
        case 3: dot_block_rows<T, 3>(A + a, B + b, rb, n, o, ld); break;
        case 2: dot_block_rows<T, 2>(A + a, B + b, rb, n, o, ld); break;
        default: dot_block_rows<T, 1>(A + a, B + b, rb, n, o, ld); break;
      }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense: y = f(W x + b), W is out x in, x is in (x lanes). The affine part is
// a 1x1 correlation over `in` maps, so it shares the convolution kernel:
// every output sums its inputs in ascending order from zero, then adds b.

template <typename T>
Tensor<T> dense_affine(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b) {
  require_shape(W.rank() == 2, "dense weight must be a matrix, got " + shape_string(W.shape()));
  require_shape(x.rank() == 1 || x.rank() == 2, "dense input must be a vector or in x lanes");
  const std::size_t out = W.dim(0), in = W.dim(1), P = dense_lanes(x.shape());
  require_shape(x.dim(0) == in, "dense input of " + std::to_string(x.dim(0)) + " for weight " +
                                    shape_string(W.shape()));
  require_shape(b.size() == out, "dense bias of " + std::to_string(b.size()) + " for " +
                                     std::to_string(out) + " outputs");
  Tensor<T> y(with_lanes({out}, P, x.rank() == 2));
  detail::correlate_accumulate(x.data(), in, 1, 1, P, W.data(), out, 1, 1, y.data());
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t p = 0; p < P; ++p) y[o * P + p] += b[o];
  return y;
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b,
                        Activation act) {
  auto y = dense_affine(x, W, b);
  apply_activation(act, y);
  return y;
}

/// Backward of the affine part. `dz` is the gradient w.r.t. W x + b.
/// Accumulates into dW, db and, when non-null, dx.
template <typename T>
void dense_affine_backward(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& dz,
                           Tensor<T>* dx, Tensor<T>& dW, Tensor<T>& db) {
  const std::size_t out = W.dim(0), in = W.dim(1), P = dense_lanes(x.shape());
  for (std::size_t o = 0; o < out; ++o) {
    T s = T{0};
    for (std::size_t p = 0; p < P; ++p) s += dz[o * P + p];
    db[o] += s;
  }
  // dW[o][:] += sum_p dz[o][p] * x[:][p], lanes summed in ascending order,
  // using a lane-major copy of x so rows of dW are contiguous.
  std::vector<T> xt(in * P);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t p = 0; p < P; ++p) xt[p * in + i] = x[i * P + p];
  std::vector<const T*> lanes(P);
  for (std::size_t p = 0; p < P; ++p) lanes[p] = xt.data() + p * in;
  std::size_t o = 0;
  for (; o + 4 <= out; o += 4) {
    T* ys[4];
    const T* gs[4];
    for (std::size_t q = 0; q < 4; ++q) ys[q] = dW.data() + (o + q) * in, gs[q] = dz.data() + (o + q) * P;
    detail::fma_rows<T, 4>(ys, gs, lanes.data(), P, in);
  }
  for (; o < out; ++o) {
    T* ys[1] = {dW.data() + o * in};
    const T* gs[1] = {dz.data() + o * P};
    detail::fma_rows<T, 1>(ys, gs, lanes.data(), P, in);
  }
  if (!dx) return;
  // dx = W^T dz, again as a 1x1 correlation.
  std::vector<T> wt(in * out);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < in; ++i) wt[i * out + o] = W[o * in + i];
  detail::correlate_accumulate(dz.data(), out, 1, 1, P, wt.data(), in, 1, 1, dx->data());
}

// ---------------------------------------------------------------------------
// Convolution: valid cross-correlation, x is C x H x W (x lanes), filters
// O x C x K x L. Output element (o, i, j) reads input rows i..i+K-1 and cols
// j..j+L-1, i.e. the centred-filter sum evaluated at input position
// (i + (K-1)/2, j + (L-1)/2). Every output starts from the bias and adds the
// taps in (c, k, l) storage order.

template <typename T>
Tensor<T> conv2d_affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_shape(x.rank() == 3 || x.rank() == 4,
                "conv input must be maps x rows x cols [x lanes], got " + shape_string(x.shape()));
  require_shape(w.rank() == 4, "conv filters must be out x in x K x L, got " + shape_string(w.shape()));
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), P = conv_lanes(x.shape());
  const std::size_t O = w.dim(0), K = w.dim(2), L = w.dim(3);
  require_shape(w.dim(1) == C, "conv filters expect " + std::to_string(w.dim(1)) +
                                   " input maps, got " + std::to_string(C));
  require_shape(b.size() == O, "conv bias size mismatch");
  require_shape(H >= K && W >= L, "conv input " + shape_string(x.shape()) +
                                      " smaller than filter " + shape_string(w.shape()));
  const std::size_t Ho = H - K + 1, Wo = W - L + 1;
  Tensor<T> y(with_lanes({O, Ho, Wo}, P, x.rank() == 4));
  for (std::size_t o = 0; o < O; ++o)
    std::fill(y.data() + o * Ho * Wo * P, y.data() + (o + 1) * Ho * Wo * P, b[o]);
  detail::correlate_accumulate(x.data(), C, H, W, P, w.data(), O, K, L, y.data());
  return y;
}

/// Convolution followed by relu.
template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  auto y = conv2d_affine(x, w, b);
  apply_activation(Activation::relu, y);
  return y;
}

/// Backward of conv2d_affine. `dy` is O x Ho x Wo (x lanes). Accumulates dw,
/// db and, when non-null, dx.
template <typename T>
void conv2d_affine_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                            Tensor<T>* dx, Tensor<T>& dw, Tensor<T>& db) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), P = conv_lanes(x.shape());
  const std::size_t O = w.dim(0), K = w.dim(2), L = w.dim(3);
  const std::size_t Ho = dy.dim(1), Wo = dy.dim(2);
  const std::size_t row_in = W * P, row_out = Wo * P, map = Ho * row_out;
  const std::size_t taps = C * K * L;
  for (std::size_t o = 0; o < O; ++o) {
    const T* dyo = dy.data() + o * map;
    T bsum = T{0};
    for (std::size_t n = 0; n < map; ++n) bsum += dyo[n];
    db[o] += bsum;
  }
  // dw[o, tap] = <dy[o], x shifted by the tap>. Wide maps take one output
  // row at a time straight from x; narrow maps first gather each tap's
  // shifted window so the dot products run over whole maps.
  std::vector<const T*> A(O), B;
  if (row_out >= 256) {
    B.resize(taps);
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t o = 0; o < O; ++o) A[o] = dy.data() + (o * Ho + i) * row_out;
      std::size_t n = 0;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t l = 0; l < L; ++l) B[n++] = x.data() + (c * H + i + k) * row_in + l * P;
      detail::dot_grid(A.data(), O, B.data(), taps, row_out, dw.data(), taps);
    }
  } else {
    constexpr std::size_t group = 16;
    std::vector<T> windows(group * map);
    for (std::size_t o = 0; o < O; ++o) A[o] = dy.data() + o * map;
    for (std::size_t t0 = 0; t0 < taps; t0 += group) {
      const std::size_t nt = std::min(group, taps - t0);
      B.resize(nt);
      for (std::size_t g = 0; g < nt; ++g) {
        const std::size_t tap = t0 + g, c = tap / (K * L), k = (tap / L) % K, l = tap % L;
        T* win = windows.data() + g * map;
        for (std::size_t i = 0; i < Ho; ++i)
          std::copy_n(x.data() + (c * H + i + k) * row_in + l * P, row_out, win + i * row_out);
        B[g] = win;
      }
      detail::dot_grid(A.data(), O, B.data(), nt, map, dw.data() + t0, taps);
    }
  }
  if (!dx) return;
  // dx is the full correlation of dy with the flipped, transposed filters:
  // pad dy by (K-1, L-1) on each side and reuse the forward kernel.
  const std::size_t Hp = Ho + 2 * (K - 1), Wp = Wo + 2 * (L - 1);
  std::vector<T> padded(O * Hp * Wp * P, T{0});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      std::copy_n(dy.data() + (o * Ho + i) * row_out, row_out,
                  padded.data() + ((o * Hp + i + K - 1) * Wp + (L - 1)) * P);
  std::vector<T> flipped(C * O * K * L);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t l = 0; l < L; ++l)
          flipped[((c * O + o) * K + (K - 1 - k)) * L + (L - 1 - l)] =
              w[((o * C + c) * K + k) * L + l];
  detail::correlate_accumulate(padded.data(), O, Hp, Wp, P, flipped.data(), C, K, L, dx->data());
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, floor on odd extents. The first maximum in row-major
// window order wins ties.

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::uint32_t>* argmax = nullptr) {
  require_shape(x.rank() == 3 || x.rank() == 4, "maxpool2 input must be maps x rows x cols [x lanes]");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), P = conv_lanes(x.shape());
  require_shape(H >= 2 && W >= 2, "maxpool2 needs at least 2x2 maps, got " + shape_string(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor<T> y(with_lanes({C, Ho, Wo}, P, x.rank() == 4));
  std::vector<std::uint32_t> scratch;
  std::vector<std::uint32_t>& arg = argmax ? *argmax : scratch;
  arg.resize(y.size());
  const T* xp = x.data();
  std::size_t n = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j, n += P) {
        // Window cells in row-major order; only a strictly larger value
        // replaces the running maximum.
        const std::size_t base = ((c * H + 2 * i) * W + 2 * j) * P;
        const std::size_t off[4] = {base, base + P, base + W * P, base + W * P + P};
        for (std::size_t p = 0; p < P; ++p) {
          T best = xp[off[0] + p];
          std::uint32_t at = static_cast<std::uint32_t>(off[0] + p);
          for (std::size_t q = 1; q < 4; ++q) {
            const T v = xp[off[q] + p];
            const bool larger = v > best;
            best = larger ? v : best;
            at = larger ? static_cast<std::uint32_t>(off[q] + p) : at;
          }
          y[n + p] = best;
          arg[n + p] = at;
        }
      }
  return y;
}

template <typename T>
void maxpool2_backward(const std::vector<std::uint32_t>& argmax, const Tensor<T>& dy,
                       Tensor<T>& dx) {
  for (std::size_t n = 0; n < dy.size(); ++n) dx[argmax[n]] += dy[n];
}

// ---------------------------------------------------------------------------
// Inverted dropout.

enum class Mode { train, eval };

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
}

/// Draws a keep-mask scaled by 1/(1-rate); entries are 0 or 1/(1-rate).
template <typename T, typename Rng>
std::vector<T> dropout_mask(std::size_t n, double rate, Rng& rng) {
  check_dropout_rate(rate);
  std::vector<T> mask(n, T{1});
  if (rate == 0.0) return mask;
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& m : mask) m = u(rng) < rate ? T{0} : keep;
  return mask;
}

template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  check_dropout_rate(rate);
  if (mode == Mode::eval || rate == 0.0) return x;
  auto mask = dropout_mask<T>(x.size(), rate, rng);
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return y;
}

// ---------------------------------------------------------------------------
// Softmax and cross entropy.

inline constexpr double kProbabilityFloor = 1e-12;

template <typename T>
Tensor<T> softmax(const Tensor<T>& z) {
  require_shape(z.size() > 0, "softmax of empty tensor");
  const T m = *std::max_element(z.vec().begin(), z.vec().end());
  Tensor<T> p(z.shape());
  T sum = T{0};
  for (std::size_t i = 0; i < z.size(); ++i) sum += (p[i] = std::exp(z[i] - m));
  for (auto& v : p.vec()) v /= sum;
  return p;
}

/// Given p = softmax(z) and dL/dp, returns dL/dz.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& p, const Tensor<T>& dp) {
  T dot = T{0};
  for (std::size_t i = 0; i < p.size(); ++i) dot += dp[i] * p[i];
  Tensor<T> dz(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) dz[i] = p[i] * (dp[i] - dot);
  return dz;
}

/// -sum_i target_i * log(max(p_i, floor)).
template <typename T>
T cross_entropy(const Tensor<T>& p, const Tensor<T>& target) {
  require_shape(p.size() == target.size(), "cross entropy size mismatch");
  T loss = T{0};
  for (std::size_t i = 0; i < p.size(); ++i)
    if (target[i] != T{0}) loss -= target[i] * std::log(std::max(p[i], T(kProbabilityFloor)));
  return loss;
}

template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& p, const Tensor<T>& target) {
  Tensor<T> dp(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i)
    dp[i] = p[i] > T(kProbabilityFloor) ? -target[i] / p[i] : T{0};
  return dp;
}

template <typename T>
Tensor<T> one_hot(std::size_t cls, std::size_t n = 3) {
  if (cls >= n) throw std::out_of_range("class index out of range");
  Tensor<T> t({n});
  t[cls] = T{1};
  return t;
}

}  // namespace avz
