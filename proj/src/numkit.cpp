#include "attestllm/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace attestllm {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) throw std::invalid_argument("Matrix: data length != rows*cols");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: dimension mismatch");
  const std::size_t n = a.rows(), m = a.cols(), p = b.cols();
  Matrix out(n, p);
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out.data().data() + i * p;
    const double* arow = a.data().data() + i * m;
    for (std::size_t k = 0; k < m; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      const double* brow = bd + k * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("matmul_tn: dimension mismatch");
  const std::size_t n = a.cols(), m = a.rows(), p = b.cols();
  Matrix out(n, p);
  for (std::size_t k = 0; k < m; ++k) {
    const double* arow = a.data().data() + k * n;
    const double* brow = b.data().data() + k * p;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = out.data().data() + i * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: dimension mismatch");
  const std::size_t n = a.rows(), m = a.cols(), p = b.rows();
  Matrix out(n, p);
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.data().data() + i * m;
    for (std::size_t j = 0; j < p; ++j) {
      const double* brow = b.data().data() + j * m;
      double acc = 0.0;
      for (std::size_t k = 0; k < m; ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

std::vector<double> column_mean(const Matrix& a) {
  std::vector<double> mean(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) mean[j] += r[j];
  }
  if (a.rows() > 0)
    for (double& v : mean) v /= static_cast<double>(a.rows());
  return mean;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double SeededRng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::size_t SeededRng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: empty range");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

double SeededRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

SeededRng SeededRng::fork(std::uint64_t stream) const {
  return SeededRng(splitmix64(seed_ ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
}

std::vector<std::size_t> multinomial_without_replacement(std::span<const double> weights, std::size_t n,
                                                         SeededRng& rng) {
  if (n > weights.size()) throw std::invalid_argument("multinomial_without_replacement: n exceeds population");
  std::vector<double> w(weights.begin(), weights.end());
  for (double& v : w) {
    if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("multinomial_without_replacement: bad weight");
    v = std::max(v, kWeightFloor);
  }
  std::vector<std::size_t> picked;
  picked.reserve(n);
  for (std::size_t draw = 0; draw < n; ++draw) {
    // Renormalize over the remaining population on every draw.
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    const double target = rng.uniform() * total;
    double cumulative = 0.0;
    std::size_t chosen = w.size();
    std::size_t last_live = w.size();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i] <= 0.0) continue;
      last_live = i;
      cumulative += w[i];
      if (target < cumulative) {
        chosen = i;
        break;
      }
    }
    if (chosen == w.size()) chosen = last_live;  // rounding at the top end
    picked.push_back(chosen);
    w[chosen] = 0.0;
  }
  return picked;
}

std::vector<std::size_t> sample_uniform_without_replacement(std::size_t population, std::size_t n, SeededRng& rng) {
  if (n > population) throw std::invalid_argument("sample_uniform_without_replacement: n exceeds population");
  // Partial Fisher-Yates.
  std::vector<std::size_t> pool(population);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.uniform_index(population - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(n);
  return pool;
}

std::uint64_t choose(std::uint64_t n, std::uint64_t r) {
  if (r > n) return 0;
  r = std::min(r, n - r);
  unsigned __int128 acc = 1;
  for (std::uint64_t i = 1; i <= r; ++i) {
    // acc * (n - r + i) / i stays integral at every step.
    acc = acc * (n - r + i) / i;
    if (acc > std::numeric_limits<std::uint64_t>::max()) throw std::overflow_error("choose: result exceeds 64 bits");
  }
  return static_cast<std::uint64_t>(acc);
}

double log_choose(std::uint64_t n, std::uint64_t r) {
  if (r > n) return -std::numeric_limits<double>::infinity();
  r = std::min(r, n - r);
  if (r <= 64) {
    double s = 0.0;
    for (std::uint64_t i = 1; i <= r; ++i)
      s += std::log(static_cast<double>(n - r + i) / static_cast<double>(i));
    return s;
  }
  return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(r) + 1.0) -
         std::lgamma(static_cast<double>(n - r) + 1.0);
}

}  // namespace attestllm
