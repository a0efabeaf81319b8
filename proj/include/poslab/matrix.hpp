#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace poslab {

// Dense row-major matrix of doubles. The whole lab runs on 2-D matrices
// with explicit batch loops; there are no N-d tensors.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative shape");
  }
  Matrix(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != static_cast<size_t>(r) * c)
      throw std::invalid_argument("Matrix: data length does not match shape");
  }

  static Matrix zeros(int r, int c) { return Matrix(r, c); }
  static Matrix filled(int r, int c, double v) {
    Matrix m(r, c);
    std::fill(m.data.begin(), m.data.end(), v);
    return m;
  }
  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.data[static_cast<size_t>(i) * n + i] = 1.0;
    return m;
  }
  static Matrix row_vector(std::vector<double> v) {
    int n = static_cast<int>(v.size());
    return Matrix(1, n, std::move(v));
  }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  double& operator()(int r, int c) { return at(r, c); }
  double operator()(int r, int c) const { return at(r, c); }

  size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }

  Matrix row(int r) const {
    Matrix m(1, cols);
    std::copy_n(data.begin() + static_cast<size_t>(r) * cols, cols, m.data.begin());
    return m;
  }
  // Rows [lo, hi) as a new matrix.
  Matrix slice_rows(int lo, int hi) const {
    if (lo < 0 || hi > rows || lo > hi) throw std::out_of_range("slice_rows: bad range");
    Matrix m(hi - lo, cols);
    std::copy_n(data.begin() + static_cast<size_t>(lo) * cols,
                static_cast<size_t>(hi - lo) * cols, m.data.begin());
    return m;
  }
};

// Integer matrix for offset/bucket/label grids consumed by attention ops.
struct IntMat {
  int rows = 0;
  int cols = 0;
  std::vector<int> data;

  IntMat() = default;
  IntMat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0) {}
  int& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  int at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
};

inline void ensure_finite(const Matrix& m, const char* what) {
  for (double v : m.data)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(what) + ": non-finite value");
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

// c = a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows)
    throw std::invalid_argument("matmul: dimension mismatch " + a.shape_str() + " x " +
                                b.shape_str());
  Matrix c(a.rows, b.cols);
  const int n = a.rows, k = a.cols, m = b.cols;
  for (int i = 0; i < n; ++i) {
    double* ci = &c.data[static_cast<size_t>(i) * m];
    const double* ai = &a.data[static_cast<size_t>(i) * k];
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = &b.data[static_cast<size_t>(p) * m];
      for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
  return c;
}

// c = a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols)
    throw std::invalid_argument("matmul_nt: dimension mismatch " + a.shape_str() + " x " +
                                b.shape_str() + "^T");
  Matrix c(a.rows, b.rows);
  const int k = a.cols;
  for (int i = 0; i < a.rows; ++i) {
    const double* ai = &a.data[static_cast<size_t>(i) * k];
    for (int j = 0; j < b.rows; ++j) {
      const double* bj = &b.data[static_cast<size_t>(j) * k];
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      c.at(i, j) = s;
    }
  }
  return c;
}

// c = a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows)
    throw std::invalid_argument("matmul_tn: dimension mismatch " + a.shape_str() + "^T x " +
                                b.shape_str());
  Matrix c(a.cols, b.cols);
  const int m = b.cols;
  for (int p = 0; p < a.rows; ++p) {
    const double* ap = &a.data[static_cast<size_t>(p) * a.cols];
    const double* bp = &b.data[static_cast<size_t>(p) * m];
    for (int i = 0; i < a.cols; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = &c.data[static_cast<size_t>(i) * m];
      for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
  return c;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Matrix c = a;
  for (size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
  return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Matrix c = a;
  for (size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
  return c;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix c = a;
  for (double& v : c.data) v *= s;
  return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("hadamard: shape mismatch");
  Matrix c = a;
  for (size_t i = 0; i < c.data.size(); ++i) c.data[i] *= b.data[i];
  return c;
}

inline double frobenius_sq(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return s;
}

inline double dot(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("dot: shape mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// Row-wise softmax over unmasked entries. Mask entries must be 0 or 1;
// masked entries come out exactly 0. Stabilized by row-max subtraction.
inline Matrix softmax_rows(const Matrix& a, const Matrix& mask) {
  if (!a.same_shape(mask))
    throw std::invalid_argument("softmax_rows: mask shape mismatch " + a.shape_str() + " vs " +
                                mask.shape_str());
  Matrix out(a.rows, a.cols);
  for (int i = 0; i < a.rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < a.cols; ++j) {
      double mk = mask.at(i, j);
      if (mk != 0.0 && mk != 1.0)
        throw std::invalid_argument("softmax_rows: mask entries must be 0 or 1");
      if (mk == 1.0) mx = std::max(mx, a.at(i, j));
    }
    if (mx == -std::numeric_limits<double>::infinity())
      throw std::runtime_error("softmax_rows: row " + std::to_string(i) + " fully masked");
    double z = 0.0;
    for (int j = 0; j < a.cols; ++j) {
      double e = mask.at(i, j) == 1.0 ? std::exp(a.at(i, j) - mx) : 0.0;
      out.at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < a.cols; ++j) out.at(i, j) /= z;
  }
  return out;
}

inline Matrix softmax_rows(const Matrix& a) {
  return softmax_rows(a, Matrix::filled(a.rows, a.cols, 1.0));
}

// Row-wise layer norm: normalize each row to mean 0 / variance 1 (biased
// variance, eps inside the sqrt), then scale by gain and shift by bias.
inline Matrix layer_norm(const Matrix& a, const Matrix& gain, const Matrix& bias, double eps) {
  if (gain.rows != 1 || gain.cols != a.cols || bias.rows != 1 || bias.cols != a.cols)
    throw std::invalid_argument("layer_norm: gain/bias must be 1x" + std::to_string(a.cols));
  if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be positive");
  Matrix out(a.rows, a.cols);
  const int n = a.cols;
  for (int i = 0; i < a.rows; ++i) {
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += a.at(i, j);
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = a.at(i, j) - mu;
      var += d * d;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j)
      out.at(i, j) = (a.at(i, j) - mu) * inv * gain.at(0, j) + bias.at(0, j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: flat binary format, stable across versions.
//   bytes 0..3   magic "PMAT"
//   u32          version (1)
//   u32          rows
//   u32          cols
//   u32          element width in bytes (8 = IEEE-754 double)
//   payload      rows*cols little-endian doubles, row-major
// ---------------------------------------------------------------------------

namespace detail {
inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("matrix read: truncated header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline void write_matrix(std::ostream& os, const Matrix& m) {
  ensure_finite(m, "write_matrix");
  os.write("PMAT", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<uint32_t>(m.rows));
  detail::put_u32(os, static_cast<uint32_t>(m.cols));
  detail::put_u32(os, 8);
  // assumes little-endian IEEE doubles, which all supported targets use
  os.write(reinterpret_cast<const char*>(m.data.data()),
           static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  if (!os) throw std::runtime_error("write_matrix: write failed");
}

inline Matrix read_matrix(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PMAT", 4) != 0)
    throw std::runtime_error("read_matrix: bad magic");
  uint32_t version = detail::get_u32(is);
  if (version != 1) throw std::runtime_error("read_matrix: unsupported version");
  uint32_t rows = detail::get_u32(is);
  uint32_t cols = detail::get_u32(is);
  uint32_t width = detail::get_u32(is);
  if (width != 8) throw std::runtime_error("read_matrix: unsupported element width");
  Matrix m(static_cast<int>(rows), static_cast<int>(cols));
  is.read(reinterpret_cast<char*>(m.data.data()),
          static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  if (!is) throw std::runtime_error("read_matrix: truncated payload");
  return m;
}

inline void save_matrix(const std::string& path, const Matrix& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_matrix: cannot open " + path);
  write_matrix(os, m);
}

inline Matrix load_matrix(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_matrix: cannot open " + path);
  return read_matrix(is);
}

}  // namespace poslab
