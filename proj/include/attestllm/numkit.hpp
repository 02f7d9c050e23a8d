#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace attestllm {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const;
  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Kernels accumulate in a fixed (i, k, j) order and never thread, so results
// are bitwise reproducible.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
/// Column means over all rows.
std::vector<double> column_mean(const Matrix& a);
double max_abs(const Matrix& a);

/// Deterministic random stream. Draws are derived from the raw 64-bit engine
/// output with fixed formulas so sequences match across standard libraries.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n);
  double normal();
  /// Independent child stream; the same (seed, stream) pair always yields the same child.
  SeededRng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

inline constexpr double kWeightFloor = 1e-12;

/// Draws n distinct indices; each draw is proportional to the remaining
/// weights (floored at kWeightFloor). Throws std::invalid_argument if
/// n > weights.size() or any weight is negative or non-finite.
std::vector<std::size_t> multinomial_without_replacement(std::span<const double> weights, std::size_t n,
                                                         SeededRng& rng);

/// n distinct indices from [0, population), uniform.
std::vector<std::size_t> sample_uniform_without_replacement(std::size_t population, std::size_t n, SeededRng& rng);

/// Exact binomial coefficient. Returns 0 when r > n. Throws std::overflow_error
/// when the value does not fit in 64 bits (never for n <= 64).
std::uint64_t choose(std::uint64_t n, std::uint64_t r);
/// log C(n, r); -infinity when r > n.
double log_choose(std::uint64_t n, std::uint64_t r);

}  // namespace attestllm
