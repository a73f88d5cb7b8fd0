#pragma once

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace mhcl {

inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

inline double chi_square_quantile(double p, int dof) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("quantile needs p in (0,1)");
  if (dof < 1) throw std::invalid_argument("quantile needs dof >= 1");
  boost::math::chi_squared_distribution<double> dist(static_cast<double>(dof));
  return boost::math::quantile(dist, p);
}

// PMF of the sum of independent Bernoulli(p_i), by direct convolution.
inline std::vector<double> poisson_binomial_pmf(std::span<const double> probs) {
  if (probs.empty()) throw std::invalid_argument("poisson_binomial: empty probabilities");
  std::vector<double> pmf(probs.size() + 1, 0.0);
  pmf[0] = 1.0;
  std::size_t n = 0;
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument("poisson_binomial: probability outside [0,1]");
    ++n;
    for (std::size_t c = n; c-- > 0;) {
      pmf[c + 1] += pmf[c] * p;
      pmf[c] *= (1.0 - p);
    }
  }
  return pmf;
}

// Smallest count o with P(sum <= o) >= beta.
inline int poisson_binomial_quantile(std::span<const double> probs, double beta) {
  if (!(beta > 0.0 && beta < 1.0))
    throw std::invalid_argument("poisson_binomial_quantile: beta outside (0,1)");
  const std::vector<double> pmf = poisson_binomial_pmf(probs);
  double cdf = 0.0;
  for (std::size_t o = 0; o < pmf.size(); ++o) {
    cdf += pmf[o];
    if (cdf >= beta) return static_cast<int>(o);
  }
  return static_cast<int>(probs.size());  // guard against rounding shortfall
}

}  // namespace mhcl
