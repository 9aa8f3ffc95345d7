// fit.hpp — least-squares power-law and polynomial fits
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace closedsys {

struct PowerFit {
  double slope = 0.0;
  double intercept = 0.0;  // log prefactor
  double rms = 0.0;        // residual in log space
  std::size_t points = 0;
};

// log y = intercept + slope log x over the strictly positive samples.
inline PowerFit fit_power_law(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("fit_power_law: length mismatch");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] > 0.0 && y[i] > 0.0 && std::isfinite(x[i]) && std::isfinite(y[i])) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  if (lx.size() < 2) throw std::invalid_argument("fit_power_law: need at least two positive samples");
  const auto n = static_cast<Eigen::Index>(lx.size());
  Eigen::MatrixXd a(n, 2);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    a(i, 0) = 1.0;
    a(i, 1) = lx[static_cast<std::size_t>(i)];
    b(i) = ly[static_cast<std::size_t>(i)];
  }
  const Eigen::VectorXd c = a.colPivHouseholderQr().solve(b);
  PowerFit f;
  f.intercept = c(0);
  f.slope = c(1);
  f.rms = std::sqrt((a * c - b).squaredNorm() / static_cast<double>(n));
  f.points = lx.size();
  return f;
}

// Least squares y = sum_k c_k x^{powers[k]}.
inline std::vector<double> fit_monomials(const std::vector<double>& x, const std::vector<double>& y,
                                         const std::vector<int>& powers) {
  if (x.size() != y.size() || x.size() < powers.size())
    throw std::invalid_argument("fit_monomials: too few samples");
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd a(n, static_cast<Eigen::Index>(powers.size()));
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < powers.size(); ++k)
      a(i, static_cast<Eigen::Index>(k)) = std::pow(x[static_cast<std::size_t>(i)], powers[k]);
    b(i) = y[static_cast<std::size_t>(i)];
  }
  const Eigen::VectorXd c = a.colPivHouseholderQr().solve(b);
  return std::vector<double>(c.data(), c.data() + c.size());
}

inline bool strictly_decreasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] < v[i - 1])) return false;
  return true;
}

}  // namespace closedsys
