#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "metastab/ctmc.hpp"
#include "metastab/kernels.hpp"

namespace metastab::linalg {

using SpMat = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;
using Vec = Eigen::VectorXd;

enum class Method { Auto, Direct, Gmres };

struct SolverOptions {
  Method method = Method::Auto;
  /// Relative residual target for the iterative path and for refinement.
  double tol = 1e-12;
  std::size_t max_iterations = 20000;
  std::size_t restart = 60;
  /// Auto picks the direct path up to this many unknowns.
  std::size_t direct_limit = 300000;
  kernels::Exec exec = kernels::Exec::Parallel;
};

struct SolveReport {
  std::string method;
  /// Direct path: ||b - A x|| / (||A|| ||x|| + ||b||). GMRES: ||b - A x|| / ||b||.
  double residual = 0.0;
  std::size_t iterations = 0;
};

/// Index map from a subset of states to 0..m-1.
struct Restriction {
  std::vector<std::size_t> states;  // local -> global
  std::vector<std::int64_t> local;  // global -> local, -1 when excluded

  static Restriction complement_of(std::size_t n, const std::vector<char>& excluded);
  std::size_t size() const noexcept { return states.size(); }
};

/// (diag(exit) - R) restricted to rows and columns in `r`: the negated generator block.
SpMat negated_block(const Generator& q, const Restriction& r);
/// Transposed generator block with the reference state's row and column removed.
SpMat transposed_block(const Generator& q, const Restriction& r);

/// Sparse LU with iterative refinement against the original matrix.
class LuSolver {
 public:
  explicit LuSolver(const SpMat& a);
  Vec solve(const Vec& b, SolveReport* report = nullptr) const;
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const;

 private:
  Vec residual(const Vec& b, const Vec& x) const;

  SpMat a_;
  double norm_inf_ = 0.0;
  std::unique_ptr<Eigen::SparseLU<SpMat, Eigen::COLAMDOrdering<int>>> lu_;
};

/// y = A x without forming A.
using Operator = std::function<void(const double* x, double* y)>;

/// Restarted GMRES with right Jacobi preconditioning. Throws SolverError when it stalls.
Vec gmres(const Operator& a, const Vec& diag, const Vec& b, const SolverOptions& options,
          SolveReport* report = nullptr, const Vec* x0 = nullptr);

/// Solves A x = b for A = negated_block(q, r). Factorizes once when the direct path is
/// chosen; otherwise runs matrix-free GMRES per right-hand side.
class NegatedBlockSolver {
 public:
  NegatedBlockSolver(const Generator& q, const Restriction& r, const SolverOptions& options);
  Vec solve(const Vec& b, SolveReport* report = nullptr) const;
  Eigen::MatrixXd solve_many(const Eigen::MatrixXd& b) const;
  bool direct() const noexcept { return lu_ != nullptr; }
  /// ||A||_inf.
  double norm_inf() const noexcept { return norm_inf_; }

 private:
  const Generator& q_;
  const Restriction& r_;
  SolverOptions options_;
  std::unique_ptr<LuSolver> lu_;
  Vec diag_;
  double norm_inf_ = 0.0;
  void apply(const double* x, double* y) const;
};

}  // namespace metastab::linalg
