#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ermc/error.hpp"

namespace ermc {

enum class Norm { l1, l2, linf };

inline std::string_view to_string(Norm p) {
  switch (p) {
    case Norm::l1: return "l1";
    case Norm::l2: return "l2";
    case Norm::linf: return "linf";
  }
  return "?";
}

struct NormBall {
  Norm p = Norm::linf;
  double epsilon = 0.0;
};

inline double lp_norm(std::span<const double> v, Norm p) {
  double acc = 0.0;
  switch (p) {
    case Norm::l1:
      for (double x : v) acc += std::abs(x);
      return acc;
    case Norm::l2:
      for (double x : v) acc += x * x;
      return std::sqrt(acc);
    case Norm::linf:
      for (double x : v) acc = std::max(acc, std::abs(x));
      return acc;
  }
  return acc;
}

namespace detail {

// Euclidean projection onto {u : |u|_1 <= eps} for v outside the ball:
// soft-threshold at the tau solving sum(max(|v_i| - tau, 0)) = eps, found
// from the sorted magnitudes.
inline void project_l1_outside(std::span<double> v, double eps) {
  std::vector<double> mags(v.size());
  std::ranges::transform(v, mags.begin(), [](double x) { return std::abs(x); });
  std::ranges::sort(mags, std::greater<>());
  double cumulative = 0.0;
  double tau = 0.0;
  for (std::size_t k = 0; k < mags.size(); ++k) {
    cumulative += mags[k];
    const double candidate = (cumulative - eps) / static_cast<double>(k + 1);
    if (mags[k] > candidate) tau = candidate;
    else break;
  }
  for (double& x : v) {
    const double shrunk = std::abs(x) - tau;
    x = shrunk > 0.0 ? std::copysign(shrunk, x) : 0.0;
  }
}

// Rounding can leave a freshly scaled point a few ulps outside the ball;
// shrink it until the inside test passes so a second projection is a no-op.
inline void pull_inside(std::span<double> v, Norm p, double eps) {
  while (lp_norm(v, p) > eps) {
    for (double& x : v) x *= 1.0 - 0x1.0p-50;
  }
}

}  // namespace detail

// In-place Euclidean projection. Points already inside the ball are untouched.
inline void project_inplace(std::span<double> v, const NormBall& ball) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(ErrorCode::numeric, "projection input is not finite");
  }
  if (!(ball.epsilon >= 0.0)) throw Error(ErrorCode::domain, "ball radius must be nonnegative");
  const double eps = ball.epsilon;
  switch (ball.p) {
    case Norm::linf:
      for (double& x : v) x = std::clamp(x, -eps, eps);
      return;
    case Norm::l2: {
      const double n = lp_norm(v, Norm::l2);
      if (n <= eps) return;
      const double scale = eps / n;
      for (double& x : v) x *= scale;
      detail::pull_inside(v, Norm::l2, eps);
      return;
    }
    case Norm::l1:
      if (lp_norm(v, Norm::l1) <= eps) return;
      if (eps == 0.0) {
        std::ranges::fill(v, 0.0);
        return;
      }
      detail::project_l1_outside(v, eps);
      detail::pull_inside(v, Norm::l1, eps);
      return;
  }
}

inline std::vector<double> project(std::span<const double> v, const NormBall& ball) {
  std::vector<double> out(v.begin(), v.end());
  project_inplace(out, ball);
  return out;
}

// Unit-norm direction maximizing <direction, g> over the p-ball. A zero
// gradient yields the zero vector. For p = 1 ties go to the lowest index.
inline std::vector<double> steepest_direction(std::span<const double> g, Norm p) {
  std::vector<double> d(g.size(), 0.0);
  switch (p) {
    case Norm::linf:
      for (std::size_t i = 0; i < g.size(); ++i) {
        d[i] = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      }
      break;
    case Norm::l2: {
      const double n = lp_norm(g, Norm::l2);
      if (n > 0.0) {
        for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] / n;
      }
      break;
    }
    case Norm::l1: {
      std::size_t best = 0;
      double best_mag = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (std::abs(g[i]) > best_mag) {
          best_mag = std::abs(g[i]);
          best = i;
        }
      }
      if (best_mag > 0.0) d[best] = g[best] > 0.0 ? 1.0 : -1.0;
      break;
    }
  }
  return d;
}

// Convex hull of the union of an l1 ball and an l-infinity ball in R^dim.
struct HullSpec {
  double eps_1 = 0.0;
  double eps_inf = 0.0;
  std::size_t dim = 2;
};

inline void validate_hull(const HullSpec& hull) {
  if (hull.dim < 2) throw Error(ErrorCode::domain, "hull dimension must be at least 2");
  if (!(hull.eps_inf > 0.0) || !(hull.eps_1 > 0.0)) {
    throw Error(ErrorCode::domain, "hull radii must be positive");
  }
  if (!(hull.eps_1 > hull.eps_inf) ||
      !(hull.eps_1 < static_cast<double>(hull.dim) * hull.eps_inf)) {
    throw Error(ErrorCode::domain, "need eps_inf < eps_1 < dim * eps_inf");
  }
}

// Minimal l_p distance from the origin to the complement of the hull:
//   eps_1 / (eps_1/eps_inf - beta + beta^q)^(1/q),
// beta = frac(eps_1/eps_inf), 1/p + 1/q = 1. p = infinity gives q = 1 and
// p = 1 gives q = infinity; both ends are closed-form.
inline double guaranteed_radius(const HullSpec& hull, double p) {
  validate_hull(hull);
  if (!(p >= 1.0)) throw Error(ErrorCode::domain, "p must lie in [1, inf]");
  const double ratio = hull.eps_1 / hull.eps_inf;
  if (std::isinf(p)) return hull.eps_inf;
  if (p == 1.0) return hull.eps_1;
  const double q = p / (p - 1.0);
  const double beta = ratio - std::floor(ratio);
  return hull.eps_1 / std::pow(ratio - beta + std::pow(beta, q), 1.0 / q);
}

}  // namespace ermc
