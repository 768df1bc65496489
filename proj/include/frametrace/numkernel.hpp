#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "frametrace/error.hpp"

namespace frametrace {

using Vector = std::vector<float>;

// Dense row-major f32 matrix. All arithmetic in this module is plain f32
// with fixed accumulation order so repeated runs are bitwise identical.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
  Matrix(std::size_t r, std::size_t c, std::vector<float> d)
      : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != rows * cols)
      throw Error(ErrorCategory::shape, "matrix data length mismatch");
  }

  float& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  float at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  float* row(std::size_t i) { return data.data() + i * cols; }
  const float* row(std::size_t i) const { return data.data() + i * cols; }
};

inline void check_finite(const float* p, std::size_t n, const char* what) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i]))
      throw Error(ErrorCategory::validation,
                  std::string(what) + ": non-finite entry");
}

inline void check_finite(const Matrix& m, const char* what = "matrix") {
  check_finite(m.data.data(), m.data.size(), what);
}

inline void check_finite(const Vector& v, const char* what = "vector") {
  check_finite(v.data(), v.size(), what);
}

// c[i][j] = sum_t a[i][t]*b[t][j], t ascending, f32 accumulator.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows)
    throw Error(ErrorCategory::shape,
                "matmul: " + std::to_string(a.rows) + "x" +
                    std::to_string(a.cols) + " * " + std::to_string(b.rows) +
                    "x" + std::to_string(b.cols));
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const float* ar = a.row(i);
    float* cr = c.row(i);
    for (std::size_t t = 0; t < a.cols; ++t) {
      float av = ar[t];
      const float* br = b.row(t);
      for (std::size_t j = 0; j < b.cols; ++j) cr[j] += av * br[j];
    }
  }
  return c;
}

// y = W x with W row-major [out x in]; fixed in-ascending accumulation.
inline void matvec(const Matrix& w, const float* x, float* y) {
  for (std::size_t i = 0; i < w.rows; ++i) {
    const float* wr = w.row(i);
    float acc = 0.0f;
    for (std::size_t j = 0; j < w.cols; ++j) acc += wr[j] * x[j];
    y[i] = acc;
  }
}

inline float dot(const float* a, const float* b, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline Vector softmax(const Vector& v, float temperature = 1.0f) {
  if (!(temperature > 0.0f))
    throw Error(ErrorCategory::range, "softmax: temperature must be > 0");
  Vector out(v.size());
  if (v.empty()) return out;
  float mx = v[0];
  for (float x : v) mx = std::max(mx, x);
  float sum = 0.0f;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - mx) / temperature);
    sum += out[i];
  }
  for (float& x : out) x /= sum;
  return out;
}

inline Vector rms_norm(const Vector& v, const Vector& gain, float eps) {
  if (v.size() != gain.size())
    throw Error(ErrorCategory::shape, "rms_norm: length mismatch");
  float ms = 0.0f;
  for (float x : v) ms += x * x;
  ms /= static_cast<float>(v.size());
  float inv = 1.0f / std::sqrt(ms + eps);
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = gain[i] * v[i] * inv;
  return out;
}

enum class ActKind { silu, gelu_tanh };

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

inline float gelu_tanh(float x) {
  // standard tanh approximation
  const float c = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x * x * x)));
}

inline Vector activate(ActKind kind, const Vector& x) {
  Vector out(x.size());
  switch (kind) {
    case ActKind::silu:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = silu(x[i]);
      return out;
    case ActKind::gelu_tanh:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_tanh(x[i]);
      return out;
  }
  throw Error(ErrorCategory::config, "activate: unknown kind");
}

inline ActKind act_kind_from_string(const std::string& s) {
  if (s == "silu") return ActKind::silu;
  if (s == "gelu_tanh") return ActKind::gelu_tanh;
  throw Error(ErrorCategory::config, "unknown activation kind: " + s);
}

struct StandardizeResult {
  Matrix x;
  Vector means;
  Vector stds;
};

// Per-column standardization. When stats are supplied (test-set path) they
// are applied as-is. Columns with std < 1e-12 map to all-zero.
inline StandardizeResult standardize(
    const Matrix& x,
    std::optional<std::pair<Vector, Vector>> stats = std::nullopt) {
  StandardizeResult r;
  r.x = Matrix(x.rows, x.cols);
  if (stats) {
    if (stats->first.size() != x.cols || stats->second.size() != x.cols)
      throw Error(ErrorCategory::shape, "standardize: stats length mismatch");
    r.means = stats->first;
    r.stds = stats->second;
  } else {
    r.means.assign(x.cols, 0.0f);
    r.stds.assign(x.cols, 0.0f);
    for (std::size_t j = 0; j < x.cols; ++j) {
      float m = 0.0f;
      for (std::size_t i = 0; i < x.rows; ++i) m += x.at(i, j);
      m /= static_cast<float>(x.rows);
      float var = 0.0f;
      for (std::size_t i = 0; i < x.rows; ++i) {
        float d = x.at(i, j) - m;
        var += d * d;
      }
      var /= static_cast<float>(x.rows);
      r.means[j] = m;
      r.stds[j] = std::sqrt(var);
    }
  }
  for (std::size_t j = 0; j < x.cols; ++j) {
    if (r.stds[j] < 1e-12f) {
      for (std::size_t i = 0; i < x.rows; ++i) r.x.at(i, j) = 0.0f;
    } else {
      float inv = 1.0f / r.stds[j];
      for (std::size_t i = 0; i < x.rows; ++i)
        r.x.at(i, j) = (x.at(i, j) - r.means[j]) * inv;
    }
  }
  return r;
}

}  // namespace frametrace
