#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dpsnn/errors.hpp"

namespace dpsnn {

// Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//
// rdp_subsampled_gaussian() evaluates the RDP of one step at order alpha (integer orders by the
// exact binomial expansion, fractional orders by quadrature), composition multiplies
// by the step count, and epsilon_from_rdp() converts to (epsilon, delta) using
//   eps = rdp + log((alpha - 1) / alpha) - (log(delta) + log(alpha)) / (alpha - 1)
// minimized over the order grid.

namespace rdp_detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  const double hi = std::max(a, b), lo = std::min(a, b);
  if (lo == kNegInf) return hi;
  return hi + std::log1p(std::exp(lo - hi));
}

inline double log_a_int(double q, double sigma, int alpha) {
  double log_a = kNegInf;
  double log_binom = 0.0;  // log C(alpha, i)
  for (int i = 0; i <= alpha; ++i) {
    if (i > 0) log_binom += std::log(static_cast<double>(alpha - i + 1)) - std::log(static_cast<double>(i));
    const double log_coef = log_binom + i * std::log(q) + (alpha - i) * std::log1p(-q);
    const double s = log_coef + (static_cast<double>(i) * i - i) / (2.0 * sigma * sigma);
    log_a = log_add(log_a, s);
  }
  return log_a;
}

/// Fractional orders: log E_{z ~ N(0, sigma^2)} [(1 - q + q exp((2z - 1) / (2 sigma^2)))^alpha] by
/// the trapezoid rule in log space. The integrand is a smooth bump of width ~sigma between
/// z = 0 and z = alpha, so a uniform grid covering both ends with 16 sigma margin converges
/// spectrally.
inline double log_a_frac(double q, double sigma, double alpha) {
  constexpr int kNodes = 2000;
  const double s2 = sigma * sigma;
  const double lo = -16.0 * sigma, hi = alpha + 16.0 * sigma;
  const double h = (hi - lo) / kNodes;
  const double log_q = std::log(q), log_1mq = std::log1p(-q);
  std::vector<double> terms(kNodes + 1);
  double peak = kNegInf;
  for (int k = 0; k <= kNodes; ++k) {
    const double z = lo + h * k;
    const double ratio = log_add(log_1mq, log_q + (2.0 * z - 1.0) / (2.0 * s2));
    terms[k] = alpha * ratio - z * z / (2.0 * s2) + ((k == 0 || k == kNodes) ? std::log(0.5) : 0.0);
    peak = std::max(peak, terms[k]);
  }
  double sum = 0.0;
  for (double t : terms) sum += std::exp(t - peak);
  return peak + std::log(sum * h) - 0.5 * std::log(2.0 * std::numbers::pi * s2);
}

/// log(1 + E[(1 - q + q exp((2z - 1) / (2 sigma^2)))^alpha - 1]) on the same grid. Accurate to
/// relative precision when the moment is within ~1e-3 of 1, where the log-space form only
/// resolves it to one ulp of 1.
inline double log_a_small(double q, double sigma, double alpha) {
  constexpr int kNodes = 2000;
  const double s2 = sigma * sigma;
  const double lo = -16.0 * sigma, hi = alpha + 16.0 * sigma;
  const double h = (hi - lo) / kNodes;
  const double norm = 1.0 / std::sqrt(2.0 * std::numbers::pi * s2);
  double sum = 0.0;
  for (int k = 0; k <= kNodes; ++k) {
    const double z = lo + h * k;
    const double excess = std::expm1(alpha * std::log1p(q * std::expm1((2.0 * z - 1.0) / (2.0 * s2))));
    sum += ((k == 0 || k == kNodes) ? 0.5 : 1.0) * excess * norm * std::exp(-z * z / (2.0 * s2));
  }
  return std::log1p(sum * h);
}

}  // namespace rdp_detail

/// Order grid 1.25, 1.5, ..., 64.
inline std::vector<double> default_rdp_orders() {
  std::vector<double> out;
  for (int k = 5; k <= 256; ++k) out.push_back(0.25 * k);
  return out;
}

/// RDP of a single step of the Poisson-subsampled Gaussian mechanism at order `alpha`.
inline double rdp_subsampled_gaussian(double q, double sigma, double alpha) {
  if (!(sigma > 0.0)) throw ConfigError("accountant: sigma must be > 0");
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("accountant: sample rate must lie in (0, 1]");
  if (!(alpha > 1.0)) throw ConfigError("accountant: order must exceed 1");
  if (q == 1.0) return alpha / (2.0 * sigma * sigma);
  double log_a;
  if (alpha == std::floor(alpha))
    log_a = rdp_detail::log_a_int(q, sigma, static_cast<int>(alpha));
  else
    log_a = rdp_detail::log_a_frac(q, sigma, alpha);
  if (std::isfinite(log_a) && log_a < 1e-3) log_a = rdp_detail::log_a_small(q, sigma, alpha);
  const double r = log_a / (alpha - 1.0);
  if (!std::isfinite(r))
    throw NumericError("accountant: RDP evaluation failed at q=" + std::to_string(q) +
                       ", sigma=" + std::to_string(sigma) + "; use a larger noise multiplier");
  return r;
}

inline double epsilon_from_rdp(std::span<const double> orders, std::span<const double> rdp, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("accountant: delta must lie in (0, 1)");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < orders.size(); ++i) {
    const double a = orders[i];
    const double eps = rdp[i] + std::log1p(-1.0 / a) - (std::log(delta) + std::log(a)) / (a - 1.0);
    best = std::min(best, eps);
  }
  return std::max(0.0, best);
}

/// Epsilon spent after `steps` compositions at noise multiplier `sigma` and sample rate `q`.
inline double account_epsilon(double sigma, double q, std::uint64_t steps, double delta,
                              const std::vector<double>& orders = default_rdp_orders()) {
  if (steps < 1) throw ConfigError("accountant: steps must be >= 1");
  std::vector<double> rdp;
  rdp.reserve(orders.size());
  for (double a : orders) rdp.push_back(static_cast<double>(steps) * rdp_subsampled_gaussian(q, sigma, a));
  const double eps = epsilon_from_rdp(orders, rdp, delta);
  if (!std::isfinite(eps))
    throw NumericError("accountant: no finite RDP order at q=" + std::to_string(q) + ", sigma=" +
                       std::to_string(sigma) + "; use a larger noise multiplier");
  return eps;
}

inline constexpr double kSigmaMin = 0.3;
inline constexpr double kSigmaMax = 100.0;

/// Smallest sigma in [0.3, 100] (bisection to relative width 1e-3) whose epsilon does not
/// exceed `target_eps`.
inline double calibrate_sigma(double target_eps, double delta, double q, std::uint64_t steps, double rel_tol = 1e-3) {
  if (!(target_eps > 0.0)) throw ConfigError("calibrate_sigma: target epsilon must be > 0");
  auto eps_at = [&](double s) {
    try {
      return account_epsilon(s, q, steps, delta);
    } catch (const NumericError&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  if (eps_at(kSigmaMax) > target_eps)
    throw ConfigError("calibrate_sigma: epsilon " + std::to_string(target_eps) +
                      " unreachable with sigma <= 100 (q=" + std::to_string(q) + ", steps=" + std::to_string(steps) +
                      ")");
  if (eps_at(kSigmaMin) <= target_eps) return kSigmaMin;
  double lo = kSigmaMin, hi = kSigmaMax;
  while ((hi - lo) / hi > rel_tol) {
    const double mid = 0.5 * (lo + hi);
    if (eps_at(mid) <= target_eps)
      hi = mid;
    else
      lo = mid;
  }
  return hi;
}

}  // namespace dpsnn
