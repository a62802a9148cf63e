#include "metastab/cmaes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "metastab/error.hpp"
#include "metastab/rng.hpp"

namespace metastab {

CmaesResult cmaes_minimize(const BatchObjective& f, std::vector<double> x0,
                           const CmaesOptions& options) {
  const std::size_t d = x0.size();
  if (d == 0) throw ValidationError("CMA-ES needs at least one dimension");
  if (!(options.sigma0 > 0.0)) throw ValidationError("sigma0 must be positive");
  for (double& x : x0) x = std::clamp(x, 0.0, 1.0);
  const auto n = static_cast<Eigen::Index>(d);
  const double dd = static_cast<double>(d);

  const std::size_t lambda =
      options.population ? options.population
                         : 4 + static_cast<std::size_t>(std::floor(3.0 * std::log(dd)));
  if (lambda < 2) throw ValidationError("population must be at least 2");
  const std::size_t mu = lambda / 2;
  Eigen::VectorXd w(static_cast<Eigen::Index>(mu));
  for (std::size_t i = 0; i < mu; ++i)
    w(static_cast<Eigen::Index>(i)) = std::log((static_cast<double>(lambda) + 1.0) / 2.0) -
                                      std::log(static_cast<double>(i) + 1.0);
  w /= w.sum();
  const double mueff = 1.0 / w.squaredNorm();

  const double cc = (4.0 + mueff / dd) / (dd + 4.0 + 2.0 * mueff / dd);
  const double cs = (mueff + 2.0) / (dd + mueff + 5.0);
  const double c1 = 2.0 / ((dd + 1.3) * (dd + 1.3) + mueff);
  const double cmu =
      std::min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((dd + 2.0) * (dd + 2.0) + mueff));
  const double damps = 1.0 + 2.0 * std::max(0.0, std::sqrt((mueff - 1.0) / (dd + 1.0)) - 1.0) + cs;
  const double chin = std::sqrt(dd) * (1.0 - 1.0 / (4.0 * dd) + 1.0 / (21.0 * dd * dd));

  Eigen::VectorXd mean = Eigen::Map<const Eigen::VectorXd>(x0.data(), n);
  double sigma = options.sigma0;
  Eigen::MatrixXd c = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd b = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd diag = Eigen::VectorXd::Ones(n);
  Eigen::VectorXd pc = Eigen::VectorXd::Zero(n), ps = Eigen::VectorXd::Zero(n);
  Rng rng(options.seed);

  CmaesResult res;
  {
    const auto v = f({x0});
    if (v.size() != 1) throw ValidationError("objective returned the wrong number of values");
    res.x = x0;
    res.value = std::isfinite(v[0]) ? v[0] : std::numeric_limits<double>::infinity();
    res.evaluations = 1;
    res.trace.push_back({0, v[0], v[0], res.value, sigma, x0});
  }

  for (std::size_t gen = 1; gen <= options.generations; ++gen) {
    std::vector<Eigen::VectorXd> ys(lambda);
    std::vector<std::vector<double>> xs(lambda, std::vector<double>(d));
    for (std::size_t k = 0; k < lambda; ++k) {
      Eigen::VectorXd y(n), x(n);
      bool inside = false;
      for (std::size_t attempt = 0; attempt < options.max_resample && !inside; ++attempt) {
        Eigen::VectorXd z(n);
        for (Eigen::Index i = 0; i < n; ++i) z(i) = rng.normal();
        y = b * diag.cwiseProduct(z);
        x = mean + sigma * y;
        inside = (x.array() >= 0.0).all() && (x.array() <= 1.0).all();
      }
      if (!inside) {
        x = x.cwiseMax(0.0).cwiseMin(1.0);
        y = (x - mean) / sigma;
        ++res.clamped;
      }
      ys[k] = y;
      for (std::size_t i = 0; i < d; ++i) xs[k][i] = x(static_cast<Eigen::Index>(i));
    }
    std::vector<double> vals = f(xs);
    if (vals.size() != lambda) throw ValidationError("objective returned the wrong number of values");
    res.evaluations += lambda;
    for (double& v : vals)
      if (!std::isfinite(v)) v = std::numeric_limits<double>::infinity();

    std::vector<std::size_t> order(lambda);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c2) { return vals[a] < vals[c2]; });

    CmaesGeneration g;
    g.generation = gen;
    g.best = vals[order[0]];
    double sum = 0.0;
    std::size_t finite = 0;
    for (double v : vals)
      if (std::isfinite(v)) {
        sum += v;
        ++finite;
      }
    g.mean = finite ? sum / static_cast<double>(finite) : std::numeric_limits<double>::infinity();
    if (g.best < res.value) {
      res.value = g.best;
      res.x = xs[order[0]];
    }
    g.best_so_far = res.value;
    g.best_x = xs[order[0]];

    Eigen::VectorXd yw = Eigen::VectorXd::Zero(n);
    for (std::size_t i = 0; i < mu; ++i) yw += w(static_cast<Eigen::Index>(i)) * ys[order[i]];
    const Eigen::VectorXd old_mean = mean;
    mean = old_mean + sigma * yw;

    const Eigen::VectorXd inv_sqrt_c_yw = b * diag.cwiseInverse().asDiagonal() * b.transpose() * yw;
    ps = (1.0 - cs) * ps + std::sqrt(cs * (2.0 - cs) * mueff) * inv_sqrt_c_yw;
    const double gen_d = static_cast<double>(gen);
    const bool hsig = ps.norm() / std::sqrt(1.0 - std::pow(1.0 - cs, 2.0 * gen_d)) / chin <
                      1.4 + 2.0 / (dd + 1.0);
    pc = (1.0 - cc) * pc + (hsig ? std::sqrt(cc * (2.0 - cc) * mueff) : 0.0) * yw;
    Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t i = 0; i < mu; ++i)
      rank_mu += w(static_cast<Eigen::Index>(i)) * ys[order[i]] * ys[order[i]].transpose();
    c = (1.0 - c1 - cmu) * c + c1 * (pc * pc.transpose() + (hsig ? 0.0 : cc * (2.0 - cc)) * c) +
        cmu * rank_mu;
    sigma *= std::exp((cs / damps) * (ps.norm() / chin - 1.0));
    sigma = std::min(sigma, 1.0);

    c = 0.5 * (c + c.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-20);
    b = es.eigenvectors();
    diag = ev.cwiseSqrt();
    g.sigma = sigma;
    res.trace.push_back(std::move(g));
  }
  return res;
}

}  // namespace metastab
