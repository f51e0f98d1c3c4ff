#pragma once

// Dense storage and the elementwise kernels the recurrent cells are built
// from. Everything is 64-bit and row-major.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace stpoi {

struct Vector {
  std::vector<double> data;

  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data(n, fill) {}
  Vector(std::initializer_list<double> values) : data(values) {}

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  std::span<double> span() { return data; }
  std::span<const double> span() const { return data; }
  void fill(double value);

  bool operator==(const Vector&) const = default;
};

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::size_t size() const { return data.size(); }
  void fill(double value);

  bool operator==(const Matrix&) const = default;
};

// A named, shaped view over parameter storage. Vectors appear as n x 1.
struct TensorRef {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::span<double> values;
};

struct ConstTensorRef {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::span<const double> values;
};

TensorRef tensor_ref(std::string name, Matrix& m);
TensorRef tensor_ref(std::string name, Vector& v);
ConstTensorRef tensor_ref(std::string name, const Matrix& m);
ConstTensorRef tensor_ref(std::string name, const Vector& v);

// Seeded generator with portable distributions: the standard library's
// distributions are implementation-defined, mt19937_64 itself is not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n), n > 0. Rejection sampling, no modulo bias.
  std::uint64_t index(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Mixes two 64-bit values into a well-spread seed (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

double sigmoid(double x);

Vector sigmoid(const Vector& x);
Vector tanh_v(const Vector& x);
Vector hadamard(const Vector& a, const Vector& b);
Vector affine(const Matrix& w, const Vector& x, const Vector& b);

struct XentResult {
  double loss = 0.0;
  Vector grad;
};

// Cross-entropy of softmax(logits) against a one-hot target, with the
// gradient with respect to the logits.
XentResult softmax_xent(const Vector& logits, std::size_t target);

Vector softmax(const Vector& logits);

// Span-level building blocks used by the cells' forward and backward passes.
// All of them accumulate into their output.

// y += W x
void gemv_acc(const Matrix& w, std::span<const double> x, std::span<double> y);
// y += W^T x
void gemv_t_acc(const Matrix& w, std::span<const double> x, std::span<double> y);
// G += a b^T
void outer_acc(Matrix& g, std::span<const double> a, std::span<const double> b);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);
bool all_finite(std::span<const double> a);

}  // namespace stpoi
