#include "metastab/kernels.hpp"

#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace metastab::kernels {

namespace {

constexpr std::size_t kDotBlock = 4096;

inline double row_dot(const SparseMatrix& a, std::size_t i, const double* x) {
  double s = 0.0;
  for (auto k = a.row_ptr[i]; k < a.row_ptr[i + 1]; ++k) s += a.val[k] * x[a.col[k]];
  return s;
}

inline double block_dot(const double* a, const double* b, std::size_t lo, std::size_t hi) {
  double s = 0.0;
  for (std::size_t i = lo; i < hi; ++i) s += a[i] * b[i];
  return s;
}

inline void step_row(const SparseMatrix& at, const double* exit, double inv_rate, std::size_t m,
                     const double* x, double* y, std::size_t j) {
  const double keep = 1.0 - exit[j] * inv_rate;
  double acc[8];
  const std::size_t mm = m < 8 ? m : 8;
  for (std::size_t c = 0; c < mm; ++c) acc[c] = 0.0;
  for (auto k = at.row_ptr[j]; k < at.row_ptr[j + 1]; ++k) {
    const double w = at.val[k] * inv_rate;
    const double* xi = x + static_cast<std::size_t>(at.col[k]) * m;
    for (std::size_t c = 0; c < mm; ++c) acc[c] += xi[c] * w;
  }
  for (std::size_t c = 0; c < mm; ++c) y[j * m + c] = x[j * m + c] * keep + acc[c];
  for (std::size_t c = 8; c < m; ++c) {
    double s = 0.0;
    for (auto k = at.row_ptr[j]; k < at.row_ptr[j + 1]; ++k)
      s += x[static_cast<std::size_t>(at.col[k]) * m + c] * (at.val[k] * inv_rate);
    y[j * m + c] = x[j * m + c] * keep + s;
  }
}

}  // namespace

namespace serial {

void spmv(const SparseMatrix& a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < a.rows; ++i) y[i] = row_dot(a, i, x.data());
}

void generator_apply(const Generator& q, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < q.size(); ++i) y[i] = row_dot(q.rates, i, x.data()) - q.exit[i] * x[i];
}

void uniformized_step(const SparseMatrix& at, std::span<const double> exit, double rate,
                      std::span<const double> x, std::span<double> y) {
  uniformized_step_block(at, exit, rate, 1, x, y);
}

void uniformized_step_block(const SparseMatrix& at, std::span<const double> exit, double rate,
                            std::size_t m, std::span<const double> x, std::span<double> y) {
  const double inv = 1.0 / rate;
  for (std::size_t j = 0; j < at.rows; ++j) step_row(at, exit.data(), inv, m, x.data(), y.data(), j);
}

double dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  double total = 0.0;
  for (std::size_t lo = 0; lo < n; lo += kDotBlock)
    total += block_dot(a.data(), b.data(), lo, std::min(n, lo + kDotBlock));
  return total;
}

}  // namespace serial

namespace parallel {

void spmv(const SparseMatrix& a, std::span<const double> x, std::span<double> y) {
  const long n = static_cast<long>(a.rows);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = row_dot(a, static_cast<std::size_t>(i), x.data());
}

void generator_apply(const Generator& q, std::span<const double> x, std::span<double> y) {
  const long n = static_cast<long>(q.size());
#pragma omp parallel for schedule(static)
  for (long l = 0; l < n; ++l) {
    const auto i = static_cast<std::size_t>(l);
    y[i] = row_dot(q.rates, i, x.data()) - q.exit[i] * x[i];
  }
}

void uniformized_step(const SparseMatrix& at, std::span<const double> exit, double rate,
                      std::span<const double> x, std::span<double> y) {
  uniformized_step_block(at, exit, rate, 1, x, y);
}

void uniformized_step_block(const SparseMatrix& at, std::span<const double> exit, double rate,
                            std::size_t m, std::span<const double> x, std::span<double> y) {
  const double inv = 1.0 / rate;
  const long n = static_cast<long>(at.rows);
#pragma omp parallel for schedule(static)
  for (long j = 0; j < n; ++j)
    step_row(at, exit.data(), inv, m, x.data(), y.data(), static_cast<std::size_t>(j));
}

double dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  const std::size_t blocks = (n + kDotBlock - 1) / kDotBlock;
  std::vector<double> part(blocks, 0.0);
  const long nb = static_cast<long>(blocks);
#pragma omp parallel for schedule(static)
  for (long k = 0; k < nb; ++k) {
    const std::size_t lo = static_cast<std::size_t>(k) * kDotBlock;
    part[static_cast<std::size_t>(k)] = block_dot(a.data(), b.data(), lo, std::min(n, lo + kDotBlock));
  }
  double total = 0.0;
  for (double p : part) total += p;
  return total;
}

}  // namespace parallel

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace metastab::kernels
