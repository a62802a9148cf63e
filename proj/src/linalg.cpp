#include "metastab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "metastab/error.hpp"

namespace metastab::linalg {

Restriction Restriction::complement_of(std::size_t n, const std::vector<char>& excluded) {
  Restriction r;
  r.local.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i)
    if (!excluded[i]) {
      r.local[i] = static_cast<std::int64_t>(r.states.size());
      r.states.push_back(i);
    }
  return r;
}

SpMat negated_block(const Generator& q, const Restriction& r) {
  std::vector<Eigen::Triplet<double, int>> t;
  t.reserve(q.rates.nnz() + r.size());
  for (std::size_t a = 0; a < r.size(); ++a) {
    const std::size_t i = r.states[a];
    t.emplace_back(static_cast<int>(a), static_cast<int>(a), q.exit[i]);
    for (auto k = q.rates.row_ptr[i]; k < q.rates.row_ptr[i + 1]; ++k) {
      const auto b = r.local[q.rates.col[k]];
      if (b >= 0) t.emplace_back(static_cast<int>(a), static_cast<int>(b), -q.rates.val[k]);
    }
  }
  SpMat m(static_cast<int>(r.size()), static_cast<int>(r.size()));
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

SpMat transposed_block(const Generator& q, const Restriction& r) {
  std::vector<Eigen::Triplet<double, int>> t;
  t.reserve(q.rates.nnz() + r.size());
  for (std::size_t a = 0; a < r.size(); ++a) {
    const std::size_t i = r.states[a];
    t.emplace_back(static_cast<int>(a), static_cast<int>(a), -q.exit[i]);
    for (auto k = q.rates.row_ptr[i]; k < q.rates.row_ptr[i + 1]; ++k) {
      const auto b = r.local[q.rates.col[k]];
      if (b >= 0) t.emplace_back(static_cast<int>(b), static_cast<int>(a), q.rates.val[k]);
    }
  }
  SpMat m(static_cast<int>(r.size()), static_cast<int>(r.size()));
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

LuSolver::LuSolver(const SpMat& a) : a_(a), lu_(std::make_unique<Eigen::SparseLU<SpMat, Eigen::COLAMDOrdering<int>>>()) {
  a_.makeCompressed();
  lu_->analyzePattern(a_);
  lu_->factorize(a_);
  if (lu_->info() != Eigen::Success)
    throw SolverError("sparse LU factorization failed: " + lu_->lastErrorMessage());
  Vec rows = Vec::Zero(a_.rows());
  for (int c = 0; c < a_.outerSize(); ++c)
    for (SpMat::InnerIterator it(a_, c); it; ++it) rows(it.row()) += std::abs(it.value());
  norm_inf_ = rows.size() ? rows.maxCoeff() : 0.0;
}

// b - A x accumulated in extended precision, so refinement also recovers forward accuracy
Vec LuSolver::residual(const Vec& b, const Vec& x) const {
  std::vector<long double> acc(static_cast<std::size_t>(b.size()));
  for (Eigen::Index i = 0; i < b.size(); ++i) acc[static_cast<std::size_t>(i)] = b(i);
  for (int c = 0; c < a_.outerSize(); ++c)
    for (SpMat::InnerIterator it(a_, c); it; ++it)
      acc[static_cast<std::size_t>(it.row())] -= static_cast<long double>(it.value()) * x(c);
  Vec r(b.size());
  for (Eigen::Index i = 0; i < b.size(); ++i) r(i) = static_cast<double>(acc[static_cast<std::size_t>(i)]);
  return r;
}

Vec LuSolver::solve(const Vec& b, SolveReport* report) const {
  Vec x = lu_->solve(b);
  const double bnorm = b.lpNorm<Eigen::Infinity>();
  // normwise backward error
  auto scale = [&] { return std::max(norm_inf_ * x.lpNorm<Eigen::Infinity>() + bnorm, 1e-300); };
  Vec r = residual(b, x);
  std::size_t steps = 0;
  double last = std::numeric_limits<double>::infinity();
  for (; steps < 5; ++steps) {
    const Vec d = lu_->solve(r);
    const double size = d.lpNorm<Eigen::Infinity>();
    if (!(size < 0.5 * last)) break;
    x += d;
    r = residual(b, x);
    last = size;
    if (size <= 1e-15 * x.lpNorm<Eigen::Infinity>()) break;
  }
  if (!x.allFinite()) throw SolverError("sparse LU produced non-finite values (singular system)");
  if (report) {
    report->method = "sparse-lu";
    report->residual = r.lpNorm<Eigen::Infinity>() / scale();
    report->iterations = steps;
  }
  return x;
}

Eigen::MatrixXd LuSolver::solve(const Eigen::MatrixXd& b) const {
  Eigen::MatrixXd x = lu_->solve(b);
  Eigen::MatrixXd r = b - a_ * x;
  x += lu_->solve(r);
  return x;
}

Vec gmres(const Operator& a, const Vec& diag, const Vec& b, const SolverOptions& options,
          SolveReport* report, const Vec* x0) {
  const Eigen::Index n = b.size();
  const std::size_t m = std::max<std::size_t>(options.restart, 2);
  Vec x = x0 ? *x0 : Vec::Zero(n);
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    if (report) *report = {"gmres", 0.0, 0};
    return Vec::Zero(n);
  }
  Eigen::MatrixXd v(n, static_cast<Eigen::Index>(m + 1));
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m + 1), static_cast<Eigen::Index>(m));
  Vec cs(m), sn(m), g(m + 1), w(n), z(n), r(n);
  std::size_t total = 0;
  double rel = 1.0;
  while (total < options.max_iterations) {
    a(x.data(), r.data());
    r = b - r;
    const double beta = r.norm();
    rel = beta / bnorm;
    if (rel <= options.tol) break;
    v.col(0) = r / beta;
    g.setZero();
    g(0) = beta;
    std::size_t j = 0;
    for (; j < m && total < options.max_iterations; ++j, ++total) {
      z = v.col(static_cast<Eigen::Index>(j)).cwiseQuotient(diag);
      a(z.data(), w.data());
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t i = 0; i <= j; ++i) {
          const double d = v.col(static_cast<Eigen::Index>(i)).dot(w);
          h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += d;
          w -= d * v.col(static_cast<Eigen::Index>(i));
        }
      const double hn = w.norm();
      h(static_cast<Eigen::Index>(j + 1), static_cast<Eigen::Index>(j)) = hn;
      if (hn > 0.0) v.col(static_cast<Eigen::Index>(j + 1)) = w / hn;
      for (std::size_t i = 0; i < j; ++i) {
        const double t1 = h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        const double t2 = h(static_cast<Eigen::Index>(i + 1), static_cast<Eigen::Index>(j));
        h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cs(i) * t1 + sn(i) * t2;
        h(static_cast<Eigen::Index>(i + 1), static_cast<Eigen::Index>(j)) = -sn(i) * t1 + cs(i) * t2;
      }
      const double a1 = h(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j));
      const double a2 = h(static_cast<Eigen::Index>(j + 1), static_cast<Eigen::Index>(j));
      const double rho = std::hypot(a1, a2);
      cs(j) = rho > 0 ? a1 / rho : 1.0;
      sn(j) = rho > 0 ? a2 / rho : 0.0;
      h(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) = rho;
      h(static_cast<Eigen::Index>(j + 1), static_cast<Eigen::Index>(j)) = 0.0;
      g(j + 1) = -sn(j) * g(j);
      g(j) = cs(j) * g(j);
      if (std::abs(g(j + 1)) / bnorm <= options.tol || hn == 0.0) {
        ++j;
        ++total;
        break;
      }
    }
    Vec y = h.topLeftCorner(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j))
                .triangularView<Eigen::Upper>()
                .solve(g.head(static_cast<Eigen::Index>(j)));
    Vec update = v.leftCols(static_cast<Eigen::Index>(j)) * y;
    x += update.cwiseQuotient(diag);
    h.setZero();
  }
  a(x.data(), r.data());
  r = b - r;
  rel = r.norm() / bnorm;
  if (report) {
    report->method = "gmres";
    report->residual = r.lpNorm<Eigen::Infinity>() / std::max(b.lpNorm<Eigen::Infinity>(), 1e-300);
    report->iterations = total;
  }
  if (!(rel <= options.tol * 10.0))
    throw SolverError("GMRES did not converge", rel, total);
  return x;
}

NegatedBlockSolver::NegatedBlockSolver(const Generator& q, const Restriction& r,
                                       const SolverOptions& options)
    : q_(q), r_(r), options_(options) {
  diag_.resize(static_cast<Eigen::Index>(r.size()));
  for (std::size_t a = 0; a < r.size(); ++a) {
    const std::size_t i = r.states[a];
    diag_(static_cast<Eigen::Index>(a)) = q.exit[i];
    double row = q.exit[i];
    for (auto k = q.rates.row_ptr[i]; k < q.rates.row_ptr[i + 1]; ++k)
      if (r.local[q.rates.col[k]] >= 0) row += q.rates.val[k];
    norm_inf_ = std::max(norm_inf_, row);
    if (!(q.exit[i] > 0.0))
      throw SolverError("state " + std::to_string(i) + " is absorbing outside the target set");
  }
  const bool direct = options.method == Method::Direct ||
                      (options.method == Method::Auto && r.size() <= options.direct_limit);
  if (direct) lu_ = std::make_unique<LuSolver>(negated_block(q, r));
}

void NegatedBlockSolver::apply(const double* x, double* y) const {
  const long n = static_cast<long>(r_.size());
  auto row = [&](long a) {
    const std::size_t i = r_.states[static_cast<std::size_t>(a)];
    double s = q_.exit[i] * x[a];
    for (auto k = q_.rates.row_ptr[i]; k < q_.rates.row_ptr[i + 1]; ++k) {
      const auto b = r_.local[q_.rates.col[k]];
      if (b >= 0) s -= q_.rates.val[k] * x[b];
    }
    y[a] = s;
  };
  if (options_.exec == kernels::Exec::Serial) {
    for (long a = 0; a < n; ++a) row(a);
  } else {
#pragma omp parallel for schedule(static)
    for (long a = 0; a < n; ++a) row(a);
  }
}

Vec NegatedBlockSolver::solve(const Vec& b, SolveReport* report) const {
  if (lu_) return lu_->solve(b, report);
  return gmres([this](const double* x, double* y) { apply(x, y); }, diag_, b, options_, report);
}

Eigen::MatrixXd NegatedBlockSolver::solve_many(const Eigen::MatrixXd& b) const {
  if (lu_) return lu_->solve(b);
  Eigen::MatrixXd x(b.rows(), b.cols());
  for (Eigen::Index c = 0; c < b.cols(); ++c) x.col(c) = solve(b.col(c));
  return x;
}

}  // namespace metastab::linalg
