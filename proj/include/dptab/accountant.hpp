#pragma once

// Renyi-DP accounting for the subsampled Gaussian mechanism.
//
// Integer orders use the binomial expansion
//   A_alpha = sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1) / (2 sigma^2)),
//   rdp     = log(A_alpha) / (alpha - 1).
// Since the binomial weights sum to one, A_alpha = 1 + S with
//   S = sum_{k>=2} C(alpha,k) (1-q)^(alpha-k) q^k expm1(k(k-1) / (2 sigma^2)),
// and log(A_alpha) = log1p(S) is evaluated from log S via log-sum-exp. This
// keeps full relative precision when the result is tiny (large sigma, small q).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dptab/error.hpp"

namespace dptab {

inline double rdp_gaussian(double sigma, double alpha) {
  require(sigma > 0.0 && alpha > 1.0, "rdp_gaussian: requires sigma > 0 and alpha > 1");
  return alpha / (2.0 * sigma * sigma);
}

namespace detail {

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double hi = std::max(a, b), lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi));
}

inline double log_binom(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// log(expm1(x)) for x > 0.
inline double log_expm1(double x) { return x > 30.0 ? x + std::log1p(-std::exp(-x)) : std::log(std::expm1(x)); }

}  // namespace detail

inline double rdp_subsampled_gaussian(double q, double sigma, int alpha) {
  require(q >= 0.0 && q <= 1.0, "rdp_subsampled_gaussian: q must be in [0, 1]");
  require(sigma > 0.0, "rdp_subsampled_gaussian: sigma must be positive");
  require(alpha >= 2, "rdp_subsampled_gaussian: alpha must be an integer >= 2");
  if (q == 0.0) return 0.0;
  if (q == 1.0) return rdp_gaussian(sigma, alpha);
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  double log_s = -std::numeric_limits<double>::infinity();
  for (int k = 2; k <= alpha; ++k) {
    const double exponent = static_cast<double>(k) * (k - 1) / (2.0 * sigma * sigma);
    const double term = detail::log_binom(alpha, k) + k * log_q + (alpha - k) * log_1mq + detail::log_expm1(exponent);
    log_s = detail::log_add(log_s, term);
  }
  const double log_a = log_s > 30.0 ? log_s + std::log1p(std::exp(-log_s)) : std::log1p(std::exp(log_s));
  const double rdp = log_a / (alpha - 1);
  if (!std::isfinite(rdp))
    throw NumericFault("rdp_subsampled_gaussian", "overflow at alpha=" + std::to_string(alpha) +
                                                      "; use a larger noise multiplier");
  return rdp;
}

/// (order, rdp) pairs with strictly increasing orders.
struct RdpCurve {
  std::vector<double> orders;
  std::vector<double> rdp;

  std::size_t size() const noexcept { return orders.size(); }
};

inline const std::vector<double>& default_orders() {
  static const std::vector<double> orders = [] {
    std::vector<double> o = {1.25, 1.5, 1.75};
    for (int a = 2; a <= 64; ++a) o.push_back(a);
    for (double a : {128.0, 256.0, 512.0}) o.push_back(a);
    return o;
  }();
  return orders;
}

/// Per-step RDP of the subsampled Gaussian. Fractional orders have no
/// subsampled bound here and are kept only when q == 1.
inline RdpCurve rdp_curve(double q, double sigma, const std::vector<double>& orders = default_orders()) {
  RdpCurve c;
  for (double a : orders) {
    const bool integral = a == std::floor(a);
    if (!integral && q < 1.0) continue;
    c.orders.push_back(a);
    if (sigma == 0.0) {
      c.rdp.push_back(q == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
    } else {
      c.rdp.push_back(integral ? rdp_subsampled_gaussian(q, sigma, static_cast<int>(a)) : rdp_gaussian(sigma, a));
    }
  }
  return c;
}

/// Linear composition over `steps` applications.
inline RdpCurve compose(RdpCurve c, std::size_t steps) {
  for (double& v : c.rdp) v = steps == 0 ? 0.0 : v * static_cast<double>(steps);
  return c;
}

struct DpGuarantee {
  double epsilon = 0.0;
  double order = 0.0;
};

/// eps = min over orders of rdp_alpha + log(1/delta) / (alpha - 1).
inline DpGuarantee rdp_to_dp(const RdpCurve& c, double delta) {
  require(delta > 0.0 && delta < 1.0, "rdp_to_dp: delta must be in (0, 1)");
  require(c.size() > 0, "rdp_to_dp: empty curve");
  DpGuarantee best{std::numeric_limits<double>::infinity(), c.orders.front()};
  const double log_inv_delta = std::log(1.0 / delta);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double eps = c.rdp[i] + log_inv_delta / (c.orders[i] - 1.0);
    if (eps < best.epsilon) best = {eps, c.orders[i]};
  }
  return best;
}

inline DpGuarantee account(double q, double sigma, std::size_t steps, double delta) {
  return rdp_to_dp(compose(rdp_curve(q, sigma), steps), delta);
}

inline constexpr double kMinNoiseMultiplier = 0.3;
inline constexpr double kMaxNoiseMultiplier = 200.0;

/// Smallest sigma in [0.3, 200] whose accounted epsilon is <= target, by 60
/// bisection steps.
inline double calibrate_sigma(double target_epsilon, double delta, double q, std::size_t steps) {
  if (!(target_epsilon > 0.0)) throw ConfigError("target epsilon must be positive");
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("sampling rate must be in (0, 1]");
  auto eps_at = [&](double sigma) { return account(q, sigma, steps, delta).epsilon; };
  if (eps_at(kMaxNoiseMultiplier) > target_epsilon)
    throw InfeasibleBudget("epsilon " + std::to_string(target_epsilon) + " is unreachable with sigma <= 200 for " +
                           std::to_string(steps) + " steps at q=" + std::to_string(q));
  double lo = kMinNoiseMultiplier, hi = kMaxNoiseMultiplier;
  if (eps_at(lo) <= target_epsilon) return lo;
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    (eps_at(mid) <= target_epsilon ? hi : lo) = mid;
  }
  return hi;
}

/// Privacy spent per training phase. Phases use disjoint datasets and are
/// reported separately, never composed with each other.
class PrivacyLedger {
 public:
  struct Phase {
    double sampling_rate = 0.0;
    double noise_multiplier = 0.0;
    std::size_t steps = 0;
    double delta = 0.0;
    RdpCurve curve;  // accumulated over all recorded steps

    DpGuarantee guarantee() const {
      if (steps == 0) return {0.0, 0.0};
      return rdp_to_dp(curve, delta);
    }
  };

  void record(const std::string& phase, double q, double sigma, std::size_t steps, double delta) {
    Phase& p = phases_[phase];
    if (p.steps > 0 && (p.sampling_rate != q || p.noise_multiplier != sigma || p.delta != delta))
      throw ContractViolation("privacy ledger: phase '" + phase + "' recorded with different parameters");
    const RdpCurve add = compose(rdp_curve(q, sigma), steps);
    if (p.steps == 0) {
      p.curve = add;
    } else {
      for (std::size_t i = 0; i < add.size(); ++i) p.curve.rdp[i] += add.rdp[i];
    }
    p.sampling_rate = q;
    p.noise_multiplier = sigma;
    p.delta = delta;
    p.steps += steps;
  }

  const Phase* phase(const std::string& name) const {
    const auto it = phases_.find(name);
    return it == phases_.end() ? nullptr : &it->second;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, p] : phases_) {
      const DpGuarantee g = p.guarantee();
      j[name] = {{"sampling_rate", p.sampling_rate}, {"noise_multiplier", p.noise_multiplier},
                 {"steps", p.steps},                 {"delta", p.delta},
                 {"epsilon", std::isfinite(g.epsilon) ? nlohmann::json(g.epsilon) : nlohmann::json("inf")},
                 {"best_order", g.order}};
    }
    return j;
  }

 private:
  std::map<std::string, Phase> phases_;
};

}  // namespace dptab
