#pragma once

#include <cstddef>
#include <span>

#include "metastab/ctmc.hpp"

// Hot loops in two flavours. `serial` is the reference; `parallel` uses OpenMP over rows and
// fixed-size blocks for reductions, so its output does not depend on the thread count.
namespace metastab::kernels {

enum class Exec { Serial, Parallel };

namespace serial {

/// y = A x.
void spmv(const SparseMatrix& a, std::span<const double> x, std::span<double> y);
/// y = Q x for a generator (right action).
void generator_apply(const Generator& q, std::span<const double> x, std::span<double> y);
/// y = x (I + Q/rate) given the transposed off-diagonal rates `at`.
void uniformized_step(const SparseMatrix& at, std::span<const double> exit, double rate,
                      std::span<const double> x, std::span<double> y);
/// Same for m row vectors stored interleaved (n x m, row-major).
void uniformized_step_block(const SparseMatrix& at, std::span<const double> exit, double rate,
                            std::size_t m, std::span<const double> x, std::span<double> y);
double dot(std::span<const double> a, std::span<const double> b);

}  // namespace serial

namespace parallel {

void spmv(const SparseMatrix& a, std::span<const double> x, std::span<double> y);
void generator_apply(const Generator& q, std::span<const double> x, std::span<double> y);
void uniformized_step(const SparseMatrix& at, std::span<const double> exit, double rate,
                      std::span<const double> x, std::span<double> y);
void uniformized_step_block(const SparseMatrix& at, std::span<const double> exit, double rate,
                            std::size_t m, std::span<const double> x, std::span<double> y);
double dot(std::span<const double> a, std::span<const double> b);

}  // namespace parallel

inline void uniformized_step_block(Exec e, const SparseMatrix& at, std::span<const double> exit,
                                   double rate, std::size_t m, std::span<const double> x,
                                   std::span<double> y) {
  if (e == Exec::Serial)
    serial::uniformized_step_block(at, exit, rate, m, x, y);
  else
    parallel::uniformized_step_block(at, exit, rate, m, x, y);
}

inline void generator_apply(Exec e, const Generator& q, std::span<const double> x,
                            std::span<double> y) {
  if (e == Exec::Serial)
    serial::generator_apply(q, x, y);
  else
    parallel::generator_apply(q, x, y);
}

inline double dot(Exec e, std::span<const double> a, std::span<const double> b) {
  return e == Exec::Serial ? serial::dot(a, b) : parallel::dot(a, b);
}

/// Number of OpenMP threads that a parallel region would use.
int max_threads();
void set_threads(int n);

}  // namespace metastab::kernels
