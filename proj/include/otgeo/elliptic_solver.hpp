#pragma once

// Dual solver: Newton with continuation in the boundary penalization delta
// for the quasilinear space-time equation satisfied by u,
//
//   -u_tt + 2 grad u . grad u_t - D^2u(grad u, grad u) - eps Lap_g u + eps grad u . grad V + rho u = 0
//   t = 0:  -u_t + |grad u|^2/2 + delta u = eps (log m0 + V)
//   t = T:  -u_t + |grad u|^2/2 - delta u = eps (log m1 + V)
//
// followed by m = exp(-V) exp((-u_t + |grad u|^2/2)/eps).

#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "otgeo/grid.hpp"
#include "otgeo/prox_solver.hpp"
#include "otgeo/transport.hpp"

namespace otgeo {

struct EllipticProblem {
  Grid grid;
  ReferenceMeasure ref;
  double eps = 0.1;
  double rho = 0.0;
  double delta = 1.0;
  std::vector<double> m0, m1;

  void validate() const {
    if (!(eps > 0.0)) throw std::invalid_argument("elliptic: eps must be positive");
    if (rho < 0.0) throw std::invalid_argument("elliptic: rho must be nonnegative");
    if (!(delta > 0.0)) throw std::invalid_argument("elliptic: delta must be positive");
    detail::require_size(ref.potential.size(), grid.nodes(), "elliptic reference potential");
    detail::require_size(m0.size(), grid.nodes(), "elliptic m0");
    detail::require_size(m1.size(), grid.nodes(), "elliptic m1");
    for (std::size_t s = 0; s < grid.nodes(); ++s)
      if (!(m0[s] > 0.0) || !(m1[s] > 0.0))
        throw std::invalid_argument("elliptic solver needs strictly positive marginals (zero cell at node " +
                                    std::to_string(s) + ")");
  }
};

struct EllipticConfig {
  double delta_start = 1.0;
  double delta_final = 1e-6;
  double newton_tolerance = 1e-10;
  int max_newton_iterations = 40;
  int max_bisections = 10;
};

class EllipticNonConvergence : public std::runtime_error {
 public:
  EllipticNonConvergence(const std::string& what, double last_delta, Potential last_u)
      : std::runtime_error(what), last_converged_delta(last_delta), last_iterate(std::move(last_u)) {}
  double last_converged_delta;
  Potential last_iterate;
};

namespace detail {

/// Forward-mode dual number over the 27-point local stencil.
struct Dual {
  static constexpr int K = 27;
  double v = 0.0;
  std::array<double, K> d{};

  Dual() = default;
  Dual(double x) : v(x) {}  // NOLINT: implicit from constants

  friend Dual operator+(Dual a, const Dual& b) {
    a.v += b.v;
    for (int i = 0; i < K; ++i) a.d[i] += b.d[i];
    return a;
  }
  friend Dual operator-(Dual a, const Dual& b) {
    a.v -= b.v;
    for (int i = 0; i < K; ++i) a.d[i] -= b.d[i];
    return a;
  }
  friend Dual operator*(const Dual& a, const Dual& b) {
    Dual r;
    r.v = a.v * b.v;
    for (int i = 0; i < K; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend Dual operator*(Dual a, double c) {
    a.v *= c;
    for (double& x : a.d) x *= c;
    return a;
  }
  friend Dual operator*(double c, Dual a) { return a * c; }
  friend Dual operator/(Dual a, double c) { return a * (1.0 / c); }
  friend Dual operator-(Dual a) { return a * -1.0; }
};

inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.v; }

/// Local stencil position: time slot 0..2 (relative to a base time), spatial
/// offsets ox, oy in {-1, 0, 1}.
inline int local_index(int ts, int ox, int oy) { return ts * 9 + (ox + 1) * 3 + (oy + 1); }

struct NodeGeometry {
  double g = 1.0, sqrtg = 1.0;
  std::array<double, 2> gp{1.0, 1.0}, gm{1.0, 1.0};  // g at the +/- faces per axis
  double gamma = 0.0;                                 // g_x/(2g), 1-D only
  std::array<double, 2> dV{0.0, 0.0};
};

inline NodeGeometry node_geometry(const Grid& grid, const ReferenceMeasure& ref, std::size_t s) {
  NodeGeometry ng;
  ng.g = grid.g_node(s);
  ng.sqrtg = grid.sqrtg_node(s);
  for (int a = 0; a < grid.dim(); ++a) {
    const std::size_t sp = grid.neighbor(s, a, 1), sm = grid.neighbor(s, a, -1);
    ng.gp[a] = grid.g_face(grid.face(a, s));
    ng.gm[a] = grid.g_face(grid.face(a, sm));
    ng.dV[a] = (ref.potential[sp] - ref.potential[sm]) / (2.0 * grid.h());
  }
  if (grid.dim() == 1) ng.gamma = (ng.gp[0] - ng.gm[0]) / grid.h() / (2.0 * ng.g);
  return ng;
}

/// Residual at node (k, s). `get(ts, ox, oy)` returns u at time base+ts.
/// Interior rows use base = k-1; the t = 0 row base 0, the t = T row base nt-2.
template <class T, class Get>
T node_residual(const EllipticProblem& P, const NodeGeometry& ng, int k, std::size_t s, Get get) {
  const Grid& grid = P.grid;
  const int dim = grid.dim();
  const double h = grid.h(), tau = grid.tau();
  const int nt = grid.nt();
  const double ig = 1.0 / ng.g;

  auto spatial = [&](int ts, std::array<T, 2>& du, T& lap) {
    lap = T(0.0);
    for (int a = 0; a < dim; ++a) {
      const T up = a == 0 ? get(ts, 1, 0) : get(ts, 0, 1);
      const T um = a == 0 ? get(ts, -1, 0) : get(ts, 0, -1);
      const T uc = get(ts, 0, 0);
      du[a] = (up - um) / (2.0 * h);
      const double cp = std::sqrt(ng.gp[a]) / ng.gp[a], cm = std::sqrt(ng.gm[a]) / ng.gm[a];
      lap = lap + ((up - uc) * cp - (uc - um) * cm) / (h * h * ng.sqrtg);
    }
  };

  if (k == 0 || k == nt) {
    const int tc = k == 0 ? 0 : 2;
    std::array<T, 2> du{T(0.0), T(0.0)};
    T lap;
    spatial(tc, du, lap);
    T grad2(0.0);
    for (int a = 0; a < dim; ++a) grad2 = grad2 + du[a] * du[a];
    grad2 = grad2 * ig;
    const T u = get(tc, 0, 0);
    if (k == 0) {
      const T ut = (-3.0 * get(0, 0, 0) + 4.0 * get(1, 0, 0) - get(2, 0, 0)) / (2.0 * tau);
      return -ut + 0.5 * grad2 + P.delta * u - P.eps * (std::log(P.m0[s]) + P.ref.potential[s]);
    }
    const T ut = (3.0 * get(2, 0, 0) - 4.0 * get(1, 0, 0) + get(0, 0, 0)) / (2.0 * tau);
    return -ut + 0.5 * grad2 - P.delta * u - P.eps * (std::log(P.m1[s]) + P.ref.potential[s]);
  }

  const T utt = (get(2, 0, 0) - 2.0 * get(1, 0, 0) + get(0, 0, 0)) / (tau * tau);
  std::array<T, 2> du{T(0.0), T(0.0)};
  T lap;
  spatial(1, du, lap);
  T cross(0.0), hess(0.0), dvterm(0.0);
  for (int a = 0; a < dim; ++a) {
    const int ax = a == 0 ? 1 : 0, ay = a == 0 ? 0 : 1;
    const T uta = (get(2, ax, ay) - get(0, ax, ay) - get(2, -ax, -ay) + get(0, -ax, -ay)) / (4.0 * tau * h);
    cross = cross + du[a] * uta;
    dvterm = dvterm + du[a] * ng.dV[a];
  }
  cross = cross * ig;
  dvterm = dvterm * ig;
  if (dim == 1) {
    const T uxx = (get(1, 1, 0) - 2.0 * get(1, 0, 0) + get(1, -1, 0)) / (h * h);
    hess = (uxx - ng.gamma * du[0]) * du[0] * du[0] * (ig * ig);
  } else {
    const T uxx = (get(1, 1, 0) - 2.0 * get(1, 0, 0) + get(1, -1, 0)) / (h * h);
    const T uyy = (get(1, 0, 1) - 2.0 * get(1, 0, 0) + get(1, 0, -1)) / (h * h);
    const T uxy = (get(1, 1, 1) - get(1, 1, -1) - get(1, -1, 1) + get(1, -1, -1)) / (4.0 * h * h);
    hess = uxx * du[0] * du[0] + 2.0 * uxy * du[0] * du[1] + uyy * du[1] * du[1];
  }
  return -utt + 2.0 * cross - hess - P.eps * lap + P.eps * dvterm + P.rho * get(1, 0, 0);
}

inline int stencil_base(int k, int nt) { return k == 0 ? 0 : (k == nt ? nt - 2 : k - 1); }

inline std::size_t stencil_node(const Grid& grid, std::size_t s, int ox, int oy) {
  std::size_t r = s;
  if (ox) r = grid.neighbor(r, 0, ox);
  if (oy) r = grid.neighbor(r, 1, oy);
  return r;
}

}  // namespace detail

/// Per-node residual (interior equation and boundary rows) and its max-norm.
struct EllipticResidual {
  std::vector<double> field;
  double max_norm = 0.0;
};

inline EllipticResidual elliptic_residual(const Potential& u, const EllipticProblem& P) {
  const Grid& grid = P.grid;
  detail::check_path(grid, u);
  const std::size_t N = grid.nodes();
  const int nt = grid.nt();
  EllipticResidual out{std::vector<double>(u.values.size()), 0.0};
  for (std::size_t s = 0; s < N; ++s) {
    const auto ng = detail::node_geometry(grid, P.ref, s);
    for (int k = 0; k <= nt; ++k) {
      const int base = detail::stencil_base(k, nt);
      auto get = [&](int ts, int ox, int oy) {
        return u.values[static_cast<std::size_t>(base + ts) * N + detail::stencil_node(grid, s, ox, oy)];
      };
      const double r = detail::node_residual<double>(P, ng, k, s, get);
      out.field[static_cast<std::size_t>(k) * N + s] = r;
      out.max_norm = std::max(out.max_norm, std::abs(r));
    }
  }
  return out;
}

namespace detail {

inline Eigen::SparseMatrix<double> elliptic_jacobian(const Potential& u, const EllipticProblem& P) {
  const Grid& grid = P.grid;
  const std::size_t N = grid.nodes();
  const int nt = grid.nt();
  const int dim = grid.dim();
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(u.values.size() * (dim == 1 ? 9 : 27));
  for (std::size_t s = 0; s < N; ++s) {
    const auto ng = node_geometry(grid, P.ref, s);
    for (int k = 0; k <= nt; ++k) {
      const int base = stencil_base(k, nt);
      auto get = [&](int ts, int ox, int oy) {
        Dual x(u.values[static_cast<std::size_t>(base + ts) * N + stencil_node(grid, s, ox, oy)]);
        x.d[local_index(ts, ox, oy)] = 1.0;
        return x;
      };
      const Dual r = node_residual<Dual>(P, ng, k, s, get);
      const std::size_t row = static_cast<std::size_t>(k) * N + s;
      for (int ts = 0; ts < 3; ++ts)
        for (int ox = -1; ox <= 1; ++ox)
          for (int oy = -1; oy <= 1; ++oy) {
            if (dim == 1 && oy != 0) continue;
            const double dv = r.d[local_index(ts, ox, oy)];
            if (dv == 0.0) continue;
            const std::size_t col = static_cast<std::size_t>(base + ts) * N + stencil_node(grid, s, ox, oy);
            trip.emplace_back(static_cast<int>(row), static_cast<int>(col), dv);
          }
    }
  }
  Eigen::SparseMatrix<double> J(static_cast<Eigen::Index>(u.values.size()), static_cast<Eigen::Index>(u.values.size()));
  J.setFromTriplets(trip.begin(), trip.end());
  return J;
}

}  // namespace detail

struct NewtonStep {
  Potential u_next;
  double step_norm = 0.0;      // max-norm of the applied update
  double residual_norm = 0.0;  // max-norm residual after the update
  double step_length = 1.0;
};

/// One damped Newton step (Armijo backtracking on the residual max-norm).
inline NewtonStep newton_step(const Potential& u, const EllipticProblem& P) {
  const auto R = elliptic_residual(u, P);
  const auto J = detail::elliptic_jacobian(u, P);
  Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
  lu.compute(J);
  if (lu.info() != Eigen::Success) throw std::runtime_error("newton_step: singular Jacobian");
  Eigen::Map<const Eigen::VectorXd> r(R.field.data(), static_cast<Eigen::Index>(R.field.size()));
  Eigen::VectorXd step = lu.solve(-r);
  for (int refine = 0; refine < 3; ++refine) {
    const Eigen::VectorXd lin = J * step + r;
    const double rel = lin.norm() / std::max(r.norm(), 1e-300);
    if (rel <= 1e-10) break;
    step -= lu.solve(lin);
  }
  if (!step.allFinite()) throw std::runtime_error("newton_step: non-finite update");

  NewtonStep out{u, 0.0, R.max_norm, 0.0};
  if (R.max_norm == 0.0) return out;
  double lambda = 1.0;
  for (int tries = 0; tries < 30; ++tries) {
    Potential trial = u;
    for (std::size_t i = 0; i < trial.values.size(); ++i) trial.values[i] += lambda * step[static_cast<Eigen::Index>(i)];
    const double rn = elliptic_residual(trial, P).max_norm;
    if (std::isfinite(rn) && rn <= (1.0 - 1e-4 * lambda) * R.max_norm) {
      out.u_next = std::move(trial);
      out.residual_norm = rn;
      out.step_length = lambda;
      out.step_norm = lambda * step.lpNorm<Eigen::Infinity>();
      return out;
    }
    lambda *= 0.5;
  }
  return out;  // no decrease: step_length 0, caller treats as failure
}

namespace detail {

/// Newton to tolerance at fixed delta; returns false on failure.
inline bool newton_solve(Potential& u, const EllipticProblem& P, const EllipticConfig& cfg, int& iterations) {
  double rn = elliptic_residual(u, P).max_norm;
  for (int it = 0; it < cfg.max_newton_iterations; ++it) {
    if (rn <= cfg.newton_tolerance) return true;
    NewtonStep st;
    try {
      st = newton_step(u, P);
    } catch (const std::runtime_error&) {
      return false;
    }
    ++iterations;
    if (st.step_length == 0.0) return rn <= cfg.newton_tolerance;
    u = std::move(st.u_next);
    rn = st.residual_norm;
  }
  return rn <= cfg.newton_tolerance;
}

}  // namespace detail

/// m = exp(-V) exp((-u_t + |grad u|^2/2)/eps), with the same time stencils as
/// the residual. Not renormalized.
inline DensityPath recover_density(const Potential& u, const ReferenceMeasure& ref, double eps, const Grid& grid) {
  detail::check_path(grid, u);
  if (!(eps > 0.0)) throw std::invalid_argument("recover_density: eps must be positive");
  const std::size_t N = grid.nodes();
  const int nt = grid.nt();
  const double tau = grid.tau(), h = grid.h();
  DensityPath m(grid);
  for (int k = 0; k <= nt; ++k)
    for (std::size_t s = 0; s < N; ++s) {
      auto U = [&](int kk) { return u.values[static_cast<std::size_t>(kk) * N + s]; };
      double ut;
      if (k == 0) ut = (-3.0 * U(0) + 4.0 * U(1) - U(2)) / (2.0 * tau);
      else if (k == nt) ut = (3.0 * U(nt) - 4.0 * U(nt - 1) + U(nt - 2)) / (2.0 * tau);
      else ut = (U(k + 1) - U(k - 1)) / (2.0 * tau);
      double grad2 = 0.0;
      for (int a = 0; a < grid.dim(); ++a) {
        const double d = (u.values[static_cast<std::size_t>(k) * N + grid.neighbor(s, a, 1)] -
                          u.values[static_cast<std::size_t>(k) * N + grid.neighbor(s, a, -1)]) /
                         (2.0 * h);
        grad2 += d * d;
      }
      grad2 /= grid.g_node(s);
      const double expo = (-ut + 0.5 * grad2) / eps - ref.potential[s];
      const double val = std::exp(expo);
      if (!std::isfinite(val) || expo > 700.0)
        throw std::overflow_error("recover_density: exponential overflow at t index " + std::to_string(k) +
                                  "; use a larger eps or a finer grid");
      m.values[static_cast<std::size_t>(k) * N + s] = val;
    }
  return m;
}

/// Momentum w = m_bar grad u at the interval midpoints (u averaged in time).
inline MomentumField momentum_from_potential(const Grid& grid, const DensityPath& m, const Potential& u) {
  MomentumField w(grid);
  const std::size_t N = grid.nodes();
  std::vector<double> mid(N);
  for (int k = 0; k < grid.nt(); ++k) {
    for (std::size_t s = 0; s < N; ++s) mid[s] = 0.5 * (u.slice(k)[s] + u.slice(k + 1)[s]);
    const auto grad = covariant_gradient(mid, grid);
    auto wk = w.slice(k);
    for (std::size_t f = 0; f < grid.faces(); ++f) wk[f] = face_midpoint_density(grid, m, k, f) * grad[f];
  }
  return w;
}

struct EllipticSolution {
  Potential u;
  DensityPath m;
  SolveReport report;
  double final_delta = 0.0;
  int continuation_steps = 0;
};

inline EllipticSolution solve_elliptic(EllipticProblem P, const EllipticConfig& cfg = {}) {
  const auto t_start = std::chrono::steady_clock::now();
  if (!(cfg.delta_start > 0.0) || !(cfg.delta_final > 0.0) || cfg.delta_final > cfg.delta_start)
    throw std::invalid_argument("elliptic: need 0 < delta_final <= delta_start");
  P.delta = cfg.delta_start;
  P.validate();
  const Grid& grid = P.grid;

  Potential u(grid);
  int newton_iterations = 0, steps = 0;
  double last_ok = 0.0;
  double delta = cfg.delta_start;
  Potential last_u = u;
  int bisections = 0;
  while (true) {
    P.delta = delta;
    Potential trial = last_u;
    if (detail::newton_solve(trial, P, cfg, newton_iterations)) {
      last_u = std::move(trial);
      last_ok = delta;
      ++steps;
      if (delta <= cfg.delta_final) break;
      delta = std::max(0.5 * delta, cfg.delta_final);
      bisections = 0;
    } else {
      if (last_ok == 0.0 || ++bisections > cfg.max_bisections)
        throw EllipticNonConvergence("elliptic solver: Newton failed at delta = " + std::to_string(delta) +
                                         " (last converged delta " + std::to_string(last_ok) + ")",
                                     last_ok, last_u);
      delta = std::sqrt(delta * last_ok);
    }
  }
  u = std::move(last_u);

  // Gauge: sum u(T) m1 W = 0 (the residual moves by delta * shift).
  std::vector<double> t(grid.nodes());
  for (std::size_t s = 0; s < grid.nodes(); ++s) t[s] = u.slice(grid.nt())[s] * P.m1[s] * grid.node_weight(s);
  const double shift = pairwise_sum(t) / integrate(P.m1, grid);
  for (double& v : u.values) v -= shift;

  EllipticSolution sol{u, recover_density(u, P.ref, P.eps, grid), {}, P.delta, steps};
  SolveReport& rep = sol.report;
  rep.iterations = newton_iterations;
  std::vector<double> a(grid.nodes()), b(grid.nodes());
  for (std::size_t s = 0; s < grid.nodes(); ++s) {
    a[s] = u.slice(0)[s] * P.m0[s];
    b[s] = u.slice(grid.nt())[s] * P.m1[s];
  }
  rep.objective = integrate(a, grid) - integrate(b, grid);
  const MomentumField w = momentum_from_potential(grid, sol.m, u);
  rep.continuity_residual = continuity_residual(grid, sol.m, w).norm;
  const ExtendedReal Fv = functional_value(grid, sol.m, w, P.ref, P.eps);
  rep.duality_gap = Fv.infinite ? std::numeric_limits<double>::infinity() : std::abs(rep.objective - Fv.value);
  rep.coupling_residual = elliptic_residual(u, P).max_norm;
  rep.energy_drift = max_deviation_from_mean(energy_profile(grid, sol.m, u, P.ref, P.eps));
  rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return sol;
}

}  // namespace otgeo
