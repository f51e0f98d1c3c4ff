#include "stpoi/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stpoi/errors.hpp"

namespace stpoi {

namespace {

void require_finite(std::span<const double> x, const char* op) {
  if (!all_finite(x)) {
    throw NumericError(std::string(op) + ": non-finite input");
  }
}

void require_same_size(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": length mismatch " + std::to_string(a) +
                         " vs " + std::to_string(b));
  }
}

}  // namespace

void Vector::fill(double value) { std::fill(data.begin(), data.end(), value); }

void Matrix::fill(double value) { std::fill(data.begin(), data.end(), value); }

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m;
  m.rows = rows.size();
  m.cols = rows.size() == 0 ? 0 : rows.begin()->size();
  m.data.reserve(m.rows * m.cols);
  for (const auto& r : rows) {
    if (r.size() != m.cols) {
      throw DimensionError("Matrix::from_rows: ragged rows");
    }
    m.data.insert(m.data.end(), r.begin(), r.end());
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

TensorRef tensor_ref(std::string name, Matrix& m) {
  return {std::move(name), m.rows, m.cols, m.data};
}
TensorRef tensor_ref(std::string name, Vector& v) {
  return {std::move(name), v.size(), 1, v.data};
}
ConstTensorRef tensor_ref(std::string name, const Matrix& m) {
  return {std::move(name), m.rows, m.cols, m.data};
}
ConstTensorRef tensor_ref(std::string name, const Vector& v) {
  return {std::move(name), v.size(), 1, v.data};
}

std::uint64_t Rng::index(std::uint64_t n) {
  if (n == 0) throw PreconditionError("Rng::index: empty range");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Vector sigmoid(const Vector& x) {
  require_finite(x.span(), "sigmoid");
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

Vector tanh_v(const Vector& x) {
  require_finite(x.span(), "tanh_v");
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  return out;
}

Vector hadamard(const Vector& a, const Vector& b) {
  require_same_size(a.size(), b.size(), "hadamard");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

Vector affine(const Matrix& w, const Vector& x, const Vector& b) {
  require_same_size(w.cols, x.size(), "affine (W.cols vs x)");
  require_same_size(w.rows, b.size(), "affine (W.rows vs b)");
  Vector out = b;
  gemv_acc(w, x.span(), out.span());
  return out;
}

Vector softmax(const Vector& logits) {
  if (logits.empty()) throw DimensionError("softmax: empty logits");
  const double m = *std::max_element(logits.data.begin(), logits.data.end());
  Vector p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    total += p[i];
  }
  for (double& v : p.data) v /= total;
  return p;
}

XentResult softmax_xent(const Vector& logits, std::size_t target) {
  if (target >= logits.size()) {
    throw IndexError("softmax_xent: target " + std::to_string(target) +
                     " outside " + std::to_string(logits.size()) + " logits");
  }
  const auto top = std::max_element(logits.data.begin(), logits.data.end());
  const auto top_index = static_cast<std::size_t>(top - logits.data.begin());
  const double m = *top;

  XentResult r;
  r.grad = Vector(logits.size());
  // log-sum-exp split as m + log1p(sum over non-max terms) keeps tiny losses exact.
  double rest = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double e = std::exp(logits[i] - m);
    r.grad[i] = e;
    if (i != top_index) rest += e;
  }
  const double total = 1.0 + rest;
  for (double& g : r.grad.data) g /= total;
  r.grad[target] -= 1.0;
  r.loss = std::log1p(rest) + (m - logits[target]);
  return r;
}

void gemv_acc(const Matrix& w, std::span<const double> x, std::span<double> y) {
  require_same_size(w.cols, x.size(), "gemv_acc (cols)");
  require_same_size(w.rows, y.size(), "gemv_acc (rows)");
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* row = w.data.data() + r * w.cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) acc += row[c] * x[c];
    y[r] += acc;
  }
}

void gemv_t_acc(const Matrix& w, std::span<const double> x, std::span<double> y) {
  require_same_size(w.rows, x.size(), "gemv_t_acc (rows)");
  require_same_size(w.cols, y.size(), "gemv_t_acc (cols)");
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const double* row = w.data.data() + r * w.cols;
    for (std::size_t c = 0; c < w.cols; ++c) y[c] += row[c] * xr;
  }
}

void outer_acc(Matrix& g, std::span<const double> a, std::span<const double> b) {
  require_same_size(g.rows, a.size(), "outer_acc (rows)");
  require_same_size(g.cols, b.size(), "outer_acc (cols)");
  for (std::size_t r = 0; r < g.rows; ++r) {
    const double ar = a[r];
    if (ar == 0.0) continue;
    double* row = g.data.data() + r * g.cols;
    for (std::size_t c = 0; c < g.cols; ++c) row[c] += ar * b[c];
  }
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_same_size(x.size(), y.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double squared_norm(std::span<const double> a) {
  double acc = 0.0;
  for (double v : a) acc += v * v;
  return acc;
}

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace stpoi
