#pragma once

// The entropy-regularized Benamou-Brenier functional on a staggered grid:
// densities at time nodes, momenta at interval midpoints on spatial faces.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "otgeo/grid.hpp"

namespace otgeo {

/// A real number or +infinity. The infinite state is a flag, never a NaN.
struct ExtendedReal {
  double value = 0.0;
  bool infinite = false;

  static ExtendedReal finite(double v) { return {v, false}; }
  static ExtendedReal infinity() { return {0.0, true}; }

  bool is_finite() const { return !infinite; }
  double as_double() const { return infinite ? std::numeric_limits<double>::infinity() : value; }

  friend ExtendedReal operator+(ExtendedReal a, ExtendedReal b) {
    if (a.infinite || b.infinite) return infinity();
    return finite(a.value + b.value);
  }
  friend bool operator<=(ExtendedReal a, ExtendedReal b) {
    if (b.infinite) return true;
    if (a.infinite) return false;
    return a.value <= b.value;
  }
};

/// Time-indexed scalar field with nt+1 node slices.
struct DensityPath {
  int nt = 0;
  std::size_t nodes = 0;
  std::vector<double> values;

  DensityPath() = default;
  explicit DensityPath(const Grid& grid, double fill = 0.0)
      : nt(grid.nt()), nodes(grid.nodes()), values(static_cast<std::size_t>(grid.nt() + 1) * grid.nodes(), fill) {}

  std::span<double> slice(int k) { return {values.data() + static_cast<std::size_t>(k) * nodes, nodes}; }
  std::span<const double> slice(int k) const { return {values.data() + static_cast<std::size_t>(k) * nodes, nodes}; }
};

/// Node-valued potential; same layout as DensityPath.
struct Potential : DensityPath {
  using DensityPath::DensityPath;
};

/// Field on the nt interval midpoints (node-valued in space).
struct MidpointField {
  int nt = 0;
  std::size_t nodes = 0;
  std::vector<double> values;

  MidpointField() = default;
  explicit MidpointField(const Grid& grid, double fill = 0.0)
      : nt(grid.nt()), nodes(grid.nodes()), values(static_cast<std::size_t>(grid.nt()) * grid.nodes(), fill) {}

  std::span<double> slice(int k) { return {values.data() + static_cast<std::size_t>(k) * nodes, nodes}; }
  std::span<const double> slice(int k) const { return {values.data() + static_cast<std::size_t>(k) * nodes, nodes}; }
};

/// Momentum w = m v at interval midpoints, one value per spatial face.
struct MomentumField {
  int nt = 0;
  std::size_t faces = 0;
  std::vector<double> values;

  MomentumField() = default;
  explicit MomentumField(const Grid& grid, double fill = 0.0)
      : nt(grid.nt()), faces(grid.faces()), values(static_cast<std::size_t>(grid.nt()) * grid.faces(), fill) {}

  std::span<double> slice(int k) { return {values.data() + static_cast<std::size_t>(k) * faces, faces}; }
  std::span<const double> slice(int k) const { return {values.data() + static_cast<std::size_t>(k) * faces, faces}; }
};

/// nu = exp(-V) dx.
struct ReferenceMeasure {
  std::vector<double> potential;
  double log_normalizer = 0.0;  // log Z = log int exp(-V)

  static ReferenceMeasure from_potential(const Grid& grid, std::vector<double> V) {
    detail::require_size(V.size(), grid.nodes(), "reference potential");
    const double vmin = *std::min_element(V.begin(), V.end());
    std::vector<double> terms(V.size());
    for (std::size_t s = 0; s < V.size(); ++s) terms[s] = std::exp(-(V[s] - vmin)) * grid.node_weight(s);
    ReferenceMeasure r;
    r.log_normalizer = std::log(pairwise_sum(terms)) - vmin;
    r.potential = std::move(V);
    return r;
  }
  static ReferenceMeasure zero(const Grid& grid) { return from_potential(grid, std::vector<double>(grid.nodes(), 0.0)); }

  /// exp(-V)/Z, the stationary density.
  std::vector<double> gibbs_density() const {
    std::vector<double> out(potential.size());
    for (std::size_t s = 0; s < out.size(); ++s) out[s] = std::exp(-potential[s] - log_normalizer);
    return out;
  }
};

/// Benamou-Brenier kernel |p|^2/(2m), with the lower semicontinuous extension at m = 0.
/// `p_sq` is the squared metric length of p.
inline ExtendedReal bb_kernel_sq(double p_sq, double m) {
  if (m < 0.0) throw std::domain_error("bb_kernel: negative density");
  if (m > 0.0) return ExtendedReal::finite(0.5 * p_sq / m);
  if (p_sq == 0.0) return ExtendedReal::finite(0.0);
  return ExtendedReal::infinity();
}

inline ExtendedReal bb_kernel(std::span<const double> p, double m) {
  double sq = 0.0;
  for (double c : p) sq += c * c;
  return bb_kernel_sq(sq, m);
}

/// x log x with 0 log 0 = 0.
inline double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

/// H(m; nu) = int m (log m + V).
inline double relative_entropy(std::span<const double> m, const ReferenceMeasure& ref, const Grid& grid) {
  detail::require_size(m.size(), grid.nodes(), "relative_entropy");
  std::vector<double> terms(m.size());
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (m[s] < 0.0) throw std::domain_error("relative_entropy: negative density at node " + std::to_string(s));
    terms[s] = (xlogx(m[s]) + m[s] * ref.potential[s]) * grid.node_weight(s);
  }
  return pairwise_sum(terms);
}

namespace detail {
inline void check_path(const Grid& grid, const DensityPath& m) {
  if (m.nt != grid.nt() || m.nodes != grid.nodes() ||
      m.values.size() != static_cast<std::size_t>(grid.nt() + 1) * grid.nodes())
    throw std::invalid_argument("density path does not match the grid");
}
inline void check_momentum(const Grid& grid, const MomentumField& w) {
  if (w.nt != grid.nt() || w.faces != grid.faces() ||
      w.values.size() != static_cast<std::size_t>(grid.nt()) * grid.faces())
    throw std::invalid_argument("momentum field does not match the grid");
}
}  // namespace detail

/// Space-time average of the four densities touching face f over interval k.
inline double face_midpoint_density(const Grid& grid, const DensityPath& m, int k, std::size_t f) {
  const int axis = static_cast<int>(f / grid.nodes());
  const std::size_t s = f % grid.nodes();
  const std::size_t sp = grid.neighbor(s, axis, 1);
  const auto a = m.slice(k);
  const auto b = m.slice(k + 1);
  return 0.25 * (a[s] + a[sp] + b[s] + b[sp]);
}

/// Kinetic action sum_k sum_f Psi_g(w, m_bar) sqrt(g) h^d tau.
inline ExtendedReal kinetic_action(const Grid& grid, const DensityPath& m, const MomentumField& w) {
  detail::check_path(grid, m);
  detail::check_momentum(grid, w);
  std::vector<double> terms(w.values.size());
  for (int k = 0; k < grid.nt(); ++k) {
    const auto wk = w.slice(k);
    for (std::size_t f = 0; f < grid.faces(); ++f) {
      const double mbar = face_midpoint_density(grid, m, k, f);
      const ExtendedReal psi = bb_kernel_sq(grid.g_face(f) * wk[f] * wk[f], mbar);
      if (psi.infinite) return ExtendedReal::infinity();
      terms[static_cast<std::size_t>(k) * grid.faces() + f] = psi.value * grid.face_weight(f) * grid.tau();
    }
  }
  return ExtendedReal::finite(pairwise_sum(terms));
}

/// Trapezoid-in-time entropy integral int_0^T H(m(t); nu) dt.
inline double entropy_integral(const Grid& grid, const DensityPath& m, const ReferenceMeasure& ref) {
  detail::check_path(grid, m);
  std::vector<double> terms(static_cast<std::size_t>(grid.nt() + 1));
  for (int k = 0; k <= grid.nt(); ++k) terms[k] = grid.time_weight(k) * relative_entropy(m.slice(k), ref, grid);
  return pairwise_sum(terms);
}

/// Discrete F_eps(m, w).
inline ExtendedReal functional_value(const Grid& grid, const DensityPath& m, const MomentumField& w,
                                     const ReferenceMeasure& ref, double eps) {
  const ExtendedReal kin = kinetic_action(grid, m, w);
  if (kin.infinite) return kin;
  return ExtendedReal::finite(kin.value + eps * entropy_integral(grid, m, ref));
}

/// E = 1/2 int m |grad u|^2 - eps int m (log m + V) on one time slice.
inline double energy_slice(std::span<const double> m, std::span<const double> u, const ReferenceMeasure& ref,
                           double eps, const Grid& grid) {
  const auto grad = covariant_gradient(u, grid);
  const auto mf = node_to_faces(m, grid);
  std::vector<double> terms(grid.faces());
  for (std::size_t f = 0; f < grid.faces(); ++f) terms[f] = 0.5 * mf[f] * grid.g_face(f) * grad[f] * grad[f];
  return integrate_faces(terms, grid) - eps * relative_entropy(m, ref, grid);
}

struct ContinuityResidual {
  MidpointField field;
  double norm = 0.0;  // sqrt(sum tau sqrt(g) h^d r^2)
};

/// r = (m[k+1] - m[k])/tau - div_g w[k+1/2].
inline ContinuityResidual continuity_residual(const Grid& grid, const DensityPath& m, const MomentumField& w) {
  detail::check_path(grid, m);
  detail::check_momentum(grid, w);
  ContinuityResidual out{MidpointField(grid), 0.0};
  std::vector<double> sq(out.field.values.size());
  for (int k = 0; k < grid.nt(); ++k) {
    const auto div = divergence_g(w.slice(k), grid);
    const auto a = m.slice(k), b = m.slice(k + 1);
    auto r = out.field.slice(k);
    for (std::size_t s = 0; s < grid.nodes(); ++s) {
      r[s] = (b[s] - a[s]) / grid.tau() - div[s];
      sq[static_cast<std::size_t>(k) * grid.nodes() + s] = r[s] * r[s] * grid.node_weight(s) * grid.tau();
    }
  }
  out.norm = std::sqrt(pairwise_sum(sq));
  return out;
}

}  // namespace otgeo
