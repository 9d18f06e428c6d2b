#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

// Dense row-major kernels. Every output row is computed independently with a
// fixed operation order, so a row's value does not depend on how many rows
// are processed together (batched, incremental and full evaluation agree
// bit-for-bit).
namespace omni::kernels {

// y[n x out] = x[n x in] * w[in x out] + b
template <class T>
void linear(const T* x, int n, int in, const T* w, const T* b, int out, T* y) {
  for (int i = 0; i < n; ++i) {
    T* yi = y + static_cast<std::size_t>(i) * out;
    const T* xi = x + static_cast<std::size_t>(i) * in;
    if (b) {
      std::copy(b, b + out, yi);
    } else {
      std::fill(yi, yi + out, T(0));
    }
    for (int k = 0; k < in; ++k) {
      const T a = xi[k];
      const T* wk = w + static_cast<std::size_t>(k) * out;
      for (int j = 0; j < out; ++j) yi[j] += a * wk[j];
    }
  }
}

// wt[out x in] = transpose(w[in x out])
template <class T>
void transpose(const T* w, int in, int out, T* wt) {
  for (int k = 0; k < in; ++k)
    for (int j = 0; j < out; ++j) wt[static_cast<std::size_t>(j) * in + k] = w[static_cast<std::size_t>(k) * out + j];
}

// dx[n x in] += dy[n x out] * w^T, given wt = transpose(w).
template <class T>
void linear_backward_input(const T* dy, int n, int out, const T* wt, int in, T* dx) {
  for (int i = 0; i < n; ++i) {
    T* dxi = dx + static_cast<std::size_t>(i) * in;
    const T* dyi = dy + static_cast<std::size_t>(i) * out;
    for (int j = 0; j < out; ++j) {
      const T g = dyi[j];
      const T* wj = wt + static_cast<std::size_t>(j) * in;
      for (int k = 0; k < in; ++k) dxi[k] += g * wj[k];
    }
  }
}

// dw[in x out] += x^T * dy ; db[out] += column sums of dy
template <class T>
void linear_backward_params(const T* x, const T* dy, int n, int in, int out, T* dw, T* db) {
  for (int i = 0; i < n; ++i) {
    const T* xi = x + static_cast<std::size_t>(i) * in;
    const T* dyi = dy + static_cast<std::size_t>(i) * out;
    for (int k = 0; k < in; ++k) {
      const T a = xi[k];
      T* dwk = dw + static_cast<std::size_t>(k) * out;
      for (int j = 0; j < out; ++j) dwk[j] += a * dyi[j];
    }
    if (db)
      for (int j = 0; j < out; ++j) db[j] += dyi[j];
  }
}

inline constexpr double kLayerNormEps = 1e-5;

// y = (x - mean) * rstd * g + b, per row; keeps xhat and rstd for backward.
template <class T>
void layer_norm(const T* x, int n, int d, const T* g, const T* b, T* y, T* xhat, T* rstd) {
  for (int i = 0; i < n; ++i) {
    const T* xi = x + static_cast<std::size_t>(i) * d;
    T mean = 0;
    for (int k = 0; k < d; ++k) mean += xi[k];
    mean /= T(d);
    T var = 0;
    for (int k = 0; k < d; ++k) var += (xi[k] - mean) * (xi[k] - mean);
    var /= T(d);
    const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd[i] = r;
    T* hi = xhat + static_cast<std::size_t>(i) * d;
    T* yi = y + static_cast<std::size_t>(i) * d;
    for (int k = 0; k < d; ++k) {
      hi[k] = (xi[k] - mean) * r;
      yi[k] = hi[k] * g[k] + b[k];
    }
  }
}

// dx += LN backward; dg, db accumulate (may be null when frozen).
template <class T>
void layer_norm_backward(const T* dy, const T* xhat, const T* rstd, const T* g, int n, int d, T* dx, T* dg, T* db) {
  for (int i = 0; i < n; ++i) {
    const T* dyi = dy + static_cast<std::size_t>(i) * d;
    const T* hi = xhat + static_cast<std::size_t>(i) * d;
    T sum_dh = 0, sum_dh_h = 0;
    for (int k = 0; k < d; ++k) {
      const T dh = dyi[k] * g[k];
      sum_dh += dh;
      sum_dh_h += dh * hi[k];
      if (dg) dg[k] += dyi[k] * hi[k];
      if (db) db[k] += dyi[k];
    }
    sum_dh /= T(d);
    sum_dh_h /= T(d);
    T* dxi = dx + static_cast<std::size_t>(i) * d;
    for (int k = 0; k < d; ++k) dxi[k] += rstd[i] * (dyi[k] * g[k] - sum_dh - hi[k] * sum_dh_h);
  }
}

// tanh-approximated GELU
template <class T>
inline T gelu(T u) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T inner = c * (u + T(0.044715) * u * u * u);
  return T(0.5) * u * (T(1) + std::tanh(inner));
}

template <class T>
inline T gelu_grad(T u) {
  constexpr T c = T(0.7978845608028654);
  const T u2 = u * u;
  const T inner = c * (u + T(0.044715) * u2 * u);
  const T th = std::tanh(inner);
  return T(0.5) * (T(1) + th) + T(0.5) * u * (T(1) - th * th) * c * (T(1) + T(3) * T(0.044715) * u2);
}

// In-place softmax over a row; -inf entries get probability 0.
template <class T>
void softmax(T* z, int n) {
  T m = -std::numeric_limits<T>::infinity();
  for (int i = 0; i < n; ++i) m = std::max(m, z[i]);
  T s = 0;
  for (int i = 0; i < n; ++i) {
    z[i] = std::exp(z[i] - m);
    s += z[i];
  }
  for (int i = 0; i < n; ++i) z[i] /= s;
}

// log-sum-exp of a row, ignoring -inf entries
template <class T>
T log_sum_exp(const T* z, int n) {
  T m = -std::numeric_limits<T>::infinity();
  for (int i = 0; i < n; ++i) m = std::max(m, z[i]);
  if (m == -std::numeric_limits<T>::infinity()) return m;
  T s = 0;
  for (int i = 0; i < n; ++i) s += std::exp(z[i] - m);
  return m + std::log(s);
}

}  // namespace omni::kernels
