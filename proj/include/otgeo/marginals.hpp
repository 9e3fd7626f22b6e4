#pragma once

// Marginal families, reference potentials and metric profiles by id.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "otgeo/field_io.hpp"
#include "otgeo/grid.hpp"
#include "otgeo/oracles.hpp"
#include "otgeo/transport.hpp"

namespace otgeo {

using Params = std::map<std::string, double>;

inline double param(const Params& p, const std::string& key, double fallback) {
  const auto it = p.find(key);
  return it == p.end() ? fallback : it->second;
}

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline MetricProfile make_metric(const std::string& id, const Params& p, double length = 1.0) {
  if (id == "flat") return MetricProfile::flat();
  if (id == "sine") {
    const double amp = param(p, "amplitude", 0.5);
    const double freq = param(p, "frequency", 1.0);
    if (std::abs(amp) >= 1.0) throw ConfigError("metric sine: |amplitude| must be < 1 for a positive metric");
    return MetricProfile::sine(amp, static_cast<int>(freq), length);
  }
  throw ConfigError("unknown metric profile '" + id + "'");
}

/// V by id: zero | cosine (amplitude, frequency) | file (path).
inline ReferenceMeasure make_reference(const std::string& id, const Params& p, const Grid& grid,
                                       const std::string& path = "") {
  if (id == "zero") return ReferenceMeasure::zero(grid);
  if (id == "cosine") {
    const double a = param(p, "amplitude", 0.3), f = param(p, "frequency", 1.0), L = grid.length();
    return ReferenceMeasure::from_potential(grid, sample_nodes(grid, [&](double x, double y) {
      double v = a * std::cos(2.0 * kPi * f * x / L);
      if (grid.dim() == 2) v += a * std::cos(2.0 * kPi * f * y / L);
      return v;
    }));
  }
  if (id == "file") {
    const FieldFile ff = read_field(path);
    if (ff.dim != grid.dim() || ff.n != grid.n() || ff.values.size() != grid.nodes())
      throw ConfigError("reference file " + path + " does not match the grid");
    return ReferenceMeasure::from_potential(grid, ff.values);
  }
  throw ConfigError("unknown reference profile '" + id + "'");
}

namespace detail {

inline double periodic_gap(double a, double b, double L) {
  double d = std::abs(a - b);
  d -= L * std::floor(d / L);
  return std::min(d, L - d);
}

inline void normalize(std::vector<double>& m, const Grid& grid) {
  const double mass = integrate(m, grid);
  if (!(mass > 0.0)) throw ConfigError("marginal has zero mass");
  for (double& v : m) v /= mass;
}

inline std::vector<double> bump(const Grid& grid, double width, double cx, double cy, double floor) {
  auto m = sample_nodes(grid, [&](double x, double y) {
    double d2 = periodic_gap(x, cx, grid.length());
    d2 *= d2;
    if (grid.dim() == 2) {
      const double dy = periodic_gap(y, cy, grid.length());
      d2 += dy * dy;
    }
    return floor + std::exp(-0.5 * d2 / (width * width));
  });
  normalize(m, grid);
  return m;
}

/// Width giving a normalized bump with the requested peak value.
inline double width_for_peak(const Grid& grid, double peak, double cx, double cy, double floor) {
  double lo = 1e-3 * grid.length(), hi = grid.length();
  auto peak_of = [&](double w) {
    const auto m = bump(grid, w, cx, cy, floor);
    return *std::max_element(m.begin(), m.end());
  };
  if (peak_of(lo) < peak || peak_of(hi) > peak) throw ConfigError("bump peak out of reach on this grid");
  for (int it = 0; it < 100; ++it) {
    const double mid = std::sqrt(lo * hi);
    if (peak_of(mid) > peak) lo = mid; else hi = mid;
  }
  return std::sqrt(lo * hi);
}

}  // namespace detail

/// One smoothing step is the heat semigroup over time h^2.
inline std::vector<double> heat_smooth(std::span<const double> m, int steps, const Grid& grid) {
  std::vector<double> out(m.begin(), m.end());
  if (steps <= 0) return out;
  out = heat_semigroup(out, steps * grid.h() * grid.h(), grid);
  detail::normalize(out, grid);
  return out;
}

struct MarginalSpec {
  std::string family = "uniform";
  Params params;
  int smoothing_steps = 0;
  std::string file0, file1;
};

struct Marginals {
  std::vector<double> m0, m1;
};

inline bool strictly_positive(std::span<const double> m) {
  for (double v : m)
    if (!(v > 0.0)) return false;
  return true;
}

/// uniform | stationary | bump_pair | step | point_like | file. Smoothing is
/// applied after construction; densities are normalized to unit mass.
inline Marginals make_marginals(const MarginalSpec& spec, const Grid& grid, const ReferenceMeasure& ref) {
  const Params& p = spec.params;
  if (spec.smoothing_steps < 0) throw ConfigError("smoothing_steps must be >= 0");
  for (const auto& [k, v] : p)
    if (!std::isfinite(v)) throw ConfigError("marginal parameter '" + k + "' is not finite");
  Marginals out;
  const double L = grid.length();
  if (spec.family == "uniform") {
    out.m0.assign(grid.nodes(), 1.0 / grid.volume());
    out.m1 = out.m0;
  } else if (spec.family == "stationary") {
    out.m0 = ref.gibbs_density();
    out.m1 = out.m0;
  } else if (spec.family == "bump_pair") {
    const double c0 = param(p, "center0", 0.0) * L, c1 = param(p, "center1", 0.5) * L;
    const double cy0 = param(p, "center0_y", 0.5) * L, cy1 = param(p, "center1_y", 0.5) * L;
    const double floor = param(p, "floor", 0.0);
    if (floor < 0.0) throw ConfigError("bump_pair: floor must be >= 0");
    double w0 = param(p, "width", 0.08) * L, w1 = w0;
    if (p.count("peak0")) w0 = detail::width_for_peak(grid, param(p, "peak0", 0.0), c0, cy0, floor);
    if (p.count("peak1")) w1 = detail::width_for_peak(grid, param(p, "peak1", 0.0), c1, cy1, floor);
    if (!(w0 > 0.0) || !(w1 > 0.0)) throw ConfigError("bump_pair: width must be positive");
    out.m0 = detail::bump(grid, w0, c0, cy0, floor);
    out.m1 = detail::bump(grid, w1, c1, cy1, floor);
  } else if (spec.family == "step") {
    const double width = param(p, "width", 0.25) * L;
    const double c0 = param(p, "center0", 0.25) * L, c1 = param(p, "center1", 0.75) * L;
    const double floor = param(p, "floor", 0.1);
    if (!(width > 0.0) || floor < 0.0) throw ConfigError("step: need width > 0 and floor >= 0");
    auto step = [&](double c) {
      auto m = sample_nodes(grid, [&](double x, double y) {
        bool in = detail::periodic_gap(x, c, L) < 0.5 * width;
        if (grid.dim() == 2) in = in && detail::periodic_gap(y, 0.5 * L, L) < 0.5 * width;
        return floor + (in ? 1.0 : 0.0);
      });
      detail::normalize(m, grid);
      return m;
    };
    out.m0 = step(c0);
    out.m1 = step(c1);
  } else if (spec.family == "point_like") {
    auto point = [&](double c) {
      std::vector<double> m(grid.nodes(), 0.0);
      const int ix = static_cast<int>(std::lround(c * L / grid.h()));
      m[grid.index(ix, grid.n() / 2)] = 1.0;
      detail::normalize(m, grid);
      return m;
    };
    out.m0 = point(param(p, "center0", 0.25));
    out.m1 = point(param(p, "center1", 0.75));
  } else if (spec.family == "file") {
    auto load = [&](const std::string& path) {
      const FieldFile ff = read_field(path);
      if (ff.dim != grid.dim() || ff.n != grid.n() || ff.values.size() != grid.nodes())
        throw ConfigError("marginal file " + path + " does not match the grid");
      std::vector<double> m = ff.values;
      for (double v : m)
        if (!(v >= 0.0)) throw ConfigError("marginal file " + path + " has a negative value");
      detail::normalize(m, grid);
      return m;
    };
    out.m0 = load(spec.file0);
    out.m1 = load(spec.file1);
  } else {
    throw ConfigError("unknown marginal family '" + spec.family + "'");
  }
  out.m0 = heat_smooth(out.m0, spec.smoothing_steps, grid);
  out.m1 = heat_smooth(out.m1, spec.smoothing_steps, grid);
  return out;
}

/// Smallest density contrast min/max the prox solver's duality certificate
/// resolves; below it the recovered potential is dominated by log m round-off.
inline constexpr double kProxMinContrast = 1e-7;

inline bool prox_conditioned(std::span<const double> m) {
  const auto [lo, hi] = std::minmax_element(m.begin(), m.end());
  return *lo > 0.0 && *lo >= kProxMinContrast * *hi;
}

/// Heat-smooths each marginal below the contrast floor with the fewest steps
/// in 1, 2, 4, ..., 256 that lift it. Returns the largest step count applied.
inline int ensure_positive_for_prox(Marginals& mg, const Grid& grid) {
  int applied = 0;
  for (auto* m : {&mg.m0, &mg.m1}) {
    if (prox_conditioned(*m)) continue;
    int steps = 1;
    std::vector<double> smooth = heat_smooth(*m, steps, grid);
    while (!prox_conditioned(smooth)) {
      if (steps >= 256) throw ConfigError("marginal stays below the density floor after 256 smoothing steps");
      steps *= 2;
      smooth = heat_smooth(*m, steps, grid);
    }
    *m = std::move(smooth);
    applied = std::max(applied, steps);
  }
  return applied;
}

}  // namespace otgeo
