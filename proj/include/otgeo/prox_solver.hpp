#pragma once

// Primal solver: linearized ADMM on the staggered grid.
//
//   U = (m at nodes, w at faces), constrained to the continuity set C
//   Z = kinetic cells (m_bar, sqrt(g) w) per (interval, face) and entropy
//       cells (m) per interior (node, time)
//   f(Z) = sum D Psi + sum D eps (e log e + V e)
//
// Each iteration: a linearized U-step projected onto C (one space-time
// Poisson solve), a pointwise prox on every Z cell and a multiplier update.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "otgeo/grid.hpp"
#include "otgeo/spectral.hpp"
#include "otgeo/transport.hpp"

namespace otgeo {

struct ProxConfig {
  double penalty = 1.0;  // r
  int max_outer_iterations = 20000;
  double constraint_tolerance = 1e-7;
  double prox_tolerance = 1e-12;
  int stagnation_window = 50;
  double stagnation_tolerance = 1e-9;
  // Stop only once the recovered potential certifies |gap| <= gap_tolerance (1 + |B|).
  double gap_tolerance = 1e-6;
  // Residual balancing: every adapt_every iterations up to adapt_until, r is
  // doubled or halved when the primal and dual residuals differ by > 10x.
  bool adaptive_penalty = true;
  int adapt_every = 25;
  int adapt_until = 5000;

  void validate() const {
    if (!(penalty > 0.0)) throw std::invalid_argument("prox: penalty must be positive");
    if (max_outer_iterations < 1) throw std::invalid_argument("prox: max_outer_iterations must be >= 1");
    if (!(constraint_tolerance > 0.0) || !(prox_tolerance > 0.0) || !(stagnation_tolerance > 0.0) ||
        !(gap_tolerance > 0.0))
      throw std::invalid_argument("prox: tolerances must be positive");
    if (stagnation_window < 1) throw std::invalid_argument("prox: stagnation_window must be >= 1");
    if (adapt_every < 1 || adapt_until < 0) throw std::invalid_argument("prox: bad penalty adaptation schedule");
  }
};

struct SolveReport {
  int iterations = 0;
  double continuity_residual = 0.0;
  double coupling_residual = 0.0;  // ||L U - Z||_D of the splitting
  double duality_gap = 0.0;
  double objective = 0.0;
  double energy_drift = 0.0;
  double wall_time = 0.0;  // seconds
  std::vector<double> residual_history;
};

struct ProxSolution {
  DensityPath m;
  MomentumField w;
  Potential u;
  SolveReport report;
};

class ProxNonConvergence : public std::runtime_error {
 public:
  ProxNonConvergence(const std::string& what, DensityPath m, MomentumField w, std::vector<double> history)
      : std::runtime_error(what), best_m(std::move(m)), best_w(std::move(w)), residual_history(std::move(history)) {}
  DensityPath best_m;
  MomentumField best_w;
  std::vector<double> residual_history;
};

// ---------------------------------------------------------------------------
// Pointwise prox

struct ProxCell {
  double m = 0.0;
  double w_factor = 0.0;  // w = w_factor * b
  double residual = 0.0;  // |first-order condition| at m (0 on the m = 0 branch)
  int iterations = 0;
};

class ProxBracketError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// argmin over (m >= 0, w) of |w|^2/(2m) + eps m (log m + V) + (|w-b|^2 + (m-a)^2)/(2 sigma),
/// with |b|^2 = b_sq.
inline ProxCell prox_cell(double a, double b_sq, double sigma, double eps, double V, double tol = 1e-12) {
  if (!(sigma > 0.0)) throw std::invalid_argument("pointwise_prox: sigma must be positive");
  if (eps < 0.0) throw std::invalid_argument("pointwise_prox: eps_cell must be nonnegative");
  ProxCell out;
  auto cond = [&](double m) {
    const double q = m + sigma;
    return -0.5 * b_sq / (q * q) + (m - a) / sigma + (eps > 0.0 ? eps * (std::log(m) + V + 1.0) : 0.0);
  };

  if (eps == 0.0) {
    if (a <= -0.5 * b_sq / sigma) return out;  // Psi(0,0) branch
    double lo = 0.0, hi = (std::max(a, 0.0) + 0.5 * b_sq / sigma) * (1.0 + 1e-12) + 1e-300;
    for (int grow = 0; cond(hi) < 0.0; ++grow) {  // rounding only
      if (grow > 60) throw ProxBracketError("pointwise_prox: upper bracket has wrong sign");
      hi *= 2.0;
    }
    double m = std::clamp(a, lo, hi);
    if (m <= 0.0) m = 0.5 * hi;
    for (int it = 0; it < 200; ++it) {
      const double c = cond(m);
      out.iterations = it + 1;
      if (std::abs(c) < tol) break;
      if (c > 0.0) hi = m; else lo = m;
      const double q = m + sigma;
      const double dc = b_sq / (q * q * q) + 1.0 / sigma;
      double next = m - c / dc;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi) { m = next; break; }
      m = next;
    }
    out.m = m;
    out.residual = std::abs(cond(m));
  } else {
    // Newton in s = log m; the condition is increasing in s.
    auto F = [&](double s) { return cond(std::exp(s)); };
    const double s_floor = -700.0;
    double s = std::log(std::max(a, 1e-3) + 1e-300);
    double lo = s, hi = s;
    double step = 1.0;
    while (F(hi) < 0.0) {
      hi += step;
      step *= 2.0;
      if (hi > 700.0) throw ProxBracketError("pointwise_prox: cannot bracket the root from above");
    }
    step = 1.0;
    while (F(lo) > 0.0) {
      lo -= step;
      step *= 2.0;
      if (lo < s_floor) {
        lo = s_floor;
        if (F(lo) > 0.0) {  // root below the representable range
          out.m = std::exp(s_floor);
          out.w_factor = out.m / (out.m + sigma);
          out.residual = std::abs(F(lo));
          return out;
        }
        break;
      }
    }
    s = std::clamp(s, lo, hi);
    for (int it = 0; it < 200; ++it) {
      const double m = std::exp(s);
      const double c = cond(m);
      out.iterations = it + 1;
      if (std::abs(c) < tol) break;
      if (c > 0.0) hi = s; else lo = s;
      const double q = m + sigma;
      const double ds = m * (b_sq / (q * q * q) + 1.0 / sigma) + eps;
      double next = s - c / ds;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (hi - lo <= 1e-15 * (1.0 + std::abs(s))) { s = next; break; }
      s = next;
    }
    out.m = std::exp(s);
    out.residual = std::abs(cond(out.m));
  }
  out.w_factor = out.m / (out.m + sigma);
  return out;
}

struct PointwiseProxResult {
  double m = 0.0;
  std::vector<double> w;
  double residual = 0.0;
};

inline PointwiseProxResult pointwise_prox(double a, std::span<const double> b, double sigma, double eps_cell,
                                          double V_cell, double tol = 1e-12) {
  double b_sq = 0.0;
  for (double x : b) b_sq += x * x;
  const ProxCell c = prox_cell(a, b_sq, sigma, eps_cell, V_cell, tol);
  PointwiseProxResult r{c.m, std::vector<double>(b.begin(), b.end()), c.residual};
  for (double& x : r.w) x *= c.w_factor;
  return r;
}

// ---------------------------------------------------------------------------
// Continuity projection

namespace detail {

/// Projects (m, w) onto {continuity, fixed endpoints} in the norm
/// sum alpha tau W m^2 + sum tau W_f g_f w^2. Returns lambda on midpoints.
inline std::vector<double> project_in_place(const SpacetimePoisson& poisson, double alpha, DensityPath& m,
                                            MomentumField& w) {
  const Grid& grid = poisson.grid();
  const auto r = continuity_residual(grid, m, w);
  const auto lambda = poisson.solve(r.field.values);
  const std::size_t N = grid.nodes();
  const double tau = grid.tau();
  for (int k = 1; k < grid.nt(); ++k) {
    auto mk = m.slice(k);
    const double* lp = lambda.data() + static_cast<std::size_t>(k) * N;
    const double* lm = lambda.data() + static_cast<std::size_t>(k - 1) * N;
    for (std::size_t s = 0; s < N; ++s) mk[s] += (lp[s] - lm[s]) / (alpha * tau);
  }
  for (int k = 0; k < grid.nt(); ++k) {
    const auto grad = covariant_gradient(std::span<const double>(lambda.data() + static_cast<std::size_t>(k) * N, N), grid);
    auto wk = w.slice(k);
    for (std::size_t f = 0; f < grid.faces(); ++f) wk[f] -= grad[f];
  }
  return lambda;
}

inline void check_marginal(const Grid& grid, std::span<const double> m, const char* which) {
  require_size(m.size(), grid.nodes(), which);
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!std::isfinite(m[s])) throw std::invalid_argument(std::string(which) + ": non-finite value");
    if (!(m[s] > 0.0))
      throw std::invalid_argument(std::string(which) + " has a zero or negative cell at node " + std::to_string(s) +
                                  "; pre-smooth it or use the elliptic path");
  }
  const double mass = integrate(m, grid);
  if (std::abs(mass - 1.0) > 1e-8)
    throw std::invalid_argument(std::string(which) + " must have unit mass, got " + std::to_string(mass));
}

}  // namespace detail

struct Projection {
  DensityPath m;
  MomentumField w;
  MidpointField increment;  // lambda
};

/// Volume-weighted Euclidean projection onto the continuity set with the
/// endpoints of m held fixed at their current values.
inline Projection project_continuity(const DensityPath& m, const MomentumField& w, std::span<const double> m0,
                                     std::span<const double> m1, const Grid& grid) {
  detail::check_path(grid, m);
  detail::check_momentum(grid, w);
  detail::require_size(m0.size(), grid.nodes(), "project_continuity m0");
  detail::require_size(m1.size(), grid.nodes(), "project_continuity m1");
  Projection p{m, w, MidpointField(grid)};
  std::copy(m0.begin(), m0.end(), p.m.slice(0).begin());
  std::copy(m1.begin(), m1.end(), p.m.slice(grid.nt()).begin());
  const SpacetimePoisson poisson(grid, 1.0);
  p.increment.values = detail::project_in_place(poisson, 1.0, p.m, p.w);
  return p;
}

// ---------------------------------------------------------------------------
// Gradient of the discrete functional and multiplier recovery

struct FunctionalGradient {
  DensityPath dm;  // dF/dm at every node, endpoints included
  MomentumField dw;
};

inline FunctionalGradient functional_gradient(const Grid& grid, const DensityPath& m, const MomentumField& w,
                                              const ReferenceMeasure& ref, double eps) {
  FunctionalGradient G{DensityPath(grid), MomentumField(grid)};
  const std::size_t N = grid.nodes();
  const double tau = grid.tau();
  for (int k = 0; k < grid.nt(); ++k) {
    const auto wk = w.slice(k);
    auto gw = G.dw.slice(k);
    auto ga = G.dm.slice(k);
    auto gb = G.dm.slice(k + 1);
    for (std::size_t f = 0; f < grid.faces(); ++f) {
      const double mbar = face_midpoint_density(grid, m, k, f);
      const double v = mbar > 0.0 ? wk[f] / mbar : 0.0;
      const double D = tau * grid.face_weight(f);
      gw[f] = D * grid.g_face(f) * v;
      const double dmb = -0.5 * D * grid.g_face(f) * v * v * 0.25;
      const std::size_t s = f % N;
      const std::size_t sp = grid.neighbor(s, static_cast<int>(f / N), 1);
      ga[s] += dmb; ga[sp] += dmb; gb[s] += dmb; gb[sp] += dmb;
    }
  }
  for (int k = 0; k <= grid.nt(); ++k) {
    const auto mk = m.slice(k);
    auto g = G.dm.slice(k);
    const double tw = grid.time_weight(k);
    for (std::size_t s = 0; s < N; ++s)
      g[s] += tw * grid.node_weight(s) * eps * (std::log(mk[s]) + ref.potential[s] + 1.0);
  }
  return G;
}

/// Potential u from the KKT conditions of the discrete problem at (m, w):
/// least-squares multiplier of the continuity constraint, shifted by eps*t so
/// that -d_t u + |grad u|^2/2 = eps (log m + V), traces at t = 0, T by half
/// steps of the same relation, gauge sum u(T) m1 W = 0.
inline Potential recover_potential(const Grid& grid, const DensityPath& m, const MomentumField& w,
                                   const ReferenceMeasure& ref, double eps, const SpacetimePoisson* poisson = nullptr) {
  const std::size_t N = grid.nodes();
  const int nt = grid.nt();
  const double tau = grid.tau();
  const auto G = functional_gradient(grid, m, w, ref, eps);

  DensityPath gm(grid);
  MomentumField gw(grid);
  for (int k = 1; k < nt; ++k)
    for (std::size_t s = 0; s < N; ++s) gm.slice(k)[s] = G.dm.slice(k)[s] / (tau * grid.node_weight(s));
  for (int k = 0; k < nt; ++k)
    for (std::size_t f = 0; f < grid.faces(); ++f)
      gw.slice(k)[f] = G.dw.slice(k)[f] / (tau * grid.face_weight(f) * grid.g_face(f));
  const auto rc = continuity_residual(grid, gm, gw);
  std::optional<SpacetimePoisson> own;
  if (!poisson || poisson->time_coeff() != 1.0) {
    own.emplace(grid, 1.0);
    poisson = &*own;
  }
  auto phi = poisson->solve(rc.field.values);
  for (double& v : phi) v = -v;

  MidpointField uh(grid);
  for (int k = 0; k < nt; ++k)
    for (std::size_t s = 0; s < N; ++s)
      uh.slice(k)[s] = -phi[static_cast<std::size_t>(k) * N + s] + eps * (k + 0.5) * tau;

  Potential u(grid);
  for (int k = 1; k < nt; ++k)
    for (std::size_t s = 0; s < N; ++s) u.slice(k)[s] = 0.5 * (uh.slice(k - 1)[s] + uh.slice(k)[s]);
  const auto m0 = m.slice(0), m1 = m.slice(nt);
  for (std::size_t s = 0; s < N; ++s) {
    const double hw = 0.5 * tau * grid.node_weight(s);
    const double ent0 = eps * (std::log(m0[s]) + ref.potential[s] + 1.0);
    const double ent1 = eps * (std::log(m1[s]) + ref.potential[s] + 1.0);
    const double kin0 = -(G.dm.slice(0)[s] / hw - ent0);
    const double kin1 = -(G.dm.slice(nt)[s] / hw - ent1);
    u.slice(0)[s] = uh.slice(0)[s] - 0.5 * tau * (kin0 - (ent0 - eps));
    u.slice(nt)[s] = uh.slice(nt - 1)[s] + 0.5 * tau * (kin1 - (ent1 - eps));
  }
  std::vector<double> t(N);
  for (std::size_t s = 0; s < N; ++s) t[s] = u.slice(nt)[s] * m1[s] * grid.node_weight(s);
  const double shift = pairwise_sum(t) / integrate(m1, grid);
  for (double& v : u.values) v -= shift;
  return u;
}

/// |<u(0), m0> - <u(T), m1> - F|.
inline double duality_gap(const Grid& grid, const Potential& u, const DensityPath& m, double F) {
  std::vector<double> a(grid.nodes()), b(grid.nodes());
  for (std::size_t s = 0; s < grid.nodes(); ++s) {
    a[s] = u.slice(0)[s] * m.slice(0)[s];
    b[s] = u.slice(grid.nt())[s] * m.slice(grid.nt())[s];
  }
  return std::abs(integrate(a, grid) - integrate(b, grid) - F);
}

/// E(t_k) at the interior time nodes.
inline std::vector<double> energy_profile(const Grid& grid, const DensityPath& m, const Potential& u,
                                          const ReferenceMeasure& ref, double eps) {
  std::vector<double> E;
  for (int k = 1; k < grid.nt(); ++k) E.push_back(energy_slice(m.slice(k), u.slice(k), ref, eps, grid));
  return E;
}

inline double max_deviation_from_mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double mean = pairwise_sum(v) / static_cast<double>(v.size());
  double d = 0.0;
  for (double x : v) d = std::max(d, std::abs(x - mean));
  return d;
}

// ---------------------------------------------------------------------------
// ADMM

namespace detail {

struct AdmmState {
  DensityPath m;
  MomentumField w;
  MomentumField za, zp, ya, yp;  // kinetic cells
  DensityPath ze, ye;            // entropy cells (interior slices used)
};

inline void apply_avg4(const Grid& grid, const DensityPath& m, MomentumField& out) {
  for (int k = 0; k < grid.nt(); ++k) {
    auto o = out.slice(k);
    for (std::size_t f = 0; f < grid.faces(); ++f) o[f] = face_midpoint_density(grid, m, k, f);
  }
}

}  // namespace detail

inline ProxSolution solve_prox(std::span<const double> m0, std::span<const double> m1, const ReferenceMeasure& ref,
                               double eps, const Grid& grid, const ProxConfig& cfg = {}) {
  const auto t_start = std::chrono::steady_clock::now();
  cfg.validate();
  if (!(eps > 0.0)) throw std::invalid_argument("solve_prox: eps must be positive");
  detail::check_marginal(grid, m0, "m0");
  detail::check_marginal(grid, m1, "m1");
  detail::require_size(ref.potential.size(), grid.nodes(), "reference potential");

  const std::size_t N = grid.nodes(), F = grid.faces();
  const int nt = grid.nt();
  const double tau = grid.tau();
  double r = cfg.penalty, sigma = 1.0 / r;

  double alpha = 1.0;
  for (std::size_t s = 0; s < N; ++s) {
    double acc = 0.0;
    for (int a = 0; a < grid.dim(); ++a)
      acc += grid.face_weight(grid.face(a, s)) + grid.face_weight(grid.face(a, grid.neighbor(s, a, -1)));
    alpha = std::max(alpha, 1.0 + 0.5 * acc / grid.node_weight(s));
  }
  const SpacetimePoisson poisson(grid, 1.0 / alpha);

  detail::AdmmState st{DensityPath(grid), MomentumField(grid), MomentumField(grid), MomentumField(grid),
                       MomentumField(grid), MomentumField(grid), DensityPath(grid), DensityPath(grid)};
  for (int k = 0; k <= nt; ++k) {
    const double th = static_cast<double>(k) / nt;
    for (std::size_t s = 0; s < N; ++s) st.m.slice(k)[s] = (1.0 - th) * m0[s] + th * m1[s];
  }
  detail::project_in_place(poisson, alpha, st.m, st.w);
  detail::apply_avg4(grid, st.m, st.za);
  for (std::size_t i = 0; i < st.w.values.size(); ++i) st.zp.values[i] = grid.sqrtg_face(i % F) * st.w.values[i];
  st.ze = st.m;

  const double endpoint_entropy =
      0.5 * tau * eps * (relative_entropy(m0, ref, grid) + relative_entropy(m1, ref, grid));

  MomentumField abar(grid);
  DensityPath grad_m(grid);
  std::vector<double> objective_history;
  SolveReport rep;
  double coupling = std::numeric_limits<double>::infinity();
  int it = 0, last_gap_check = 0;
  bool converged = false;
  std::vector<double> terms_kin(static_cast<std::size_t>(nt) * F), terms_ent(static_cast<std::size_t>(nt + 1) * N);

  for (it = 1; it <= cfg.max_outer_iterations; ++it) {
    // U-step (linearized in m, exact in w), then projection onto C.
    detail::apply_avg4(grid, st.m, abar);
    std::fill(grad_m.values.begin(), grad_m.values.end(), 0.0);
    for (int k = 0; k < nt; ++k) {
      auto ga = grad_m.slice(k), gb = grad_m.slice(k + 1);
      for (std::size_t f = 0; f < F; ++f) {
        const std::size_t i = static_cast<std::size_t>(k) * F + f;
        const double c = 0.25 * tau * grid.face_weight(f) * (abar.values[i] - st.za.values[i] + st.ya.values[i]);
        const std::size_t s = f % N, sp = grid.neighbor(s, static_cast<int>(f / N), 1);
        ga[s] += c; ga[sp] += c; gb[s] += c; gb[sp] += c;
      }
    }
    for (int k = 1; k < nt; ++k) {
      auto mk = st.m.slice(k);
      const auto g = grad_m.slice(k), ze = st.ze.slice(k), ye = st.ye.slice(k);
      for (std::size_t s = 0; s < N; ++s) {
        const double D = tau * grid.node_weight(s);
        mk[s] -= (g[s] + D * (mk[s] - ze[s] + ye[s])) / (alpha * D);
      }
    }
    for (std::size_t i = 0; i < st.w.values.size(); ++i)
      st.w.values[i] = (st.zp.values[i] - st.yp.values[i]) / grid.sqrtg_face(i % F);
    detail::project_in_place(poisson, alpha, st.m, st.w);

    // Z-step and multiplier update.
    const bool adapt = cfg.adaptive_penalty && it % cfg.adapt_every == 0 && it <= cfg.adapt_until;
    std::vector<double> za_old, zp_old, ze_old;
    if (adapt) {
      za_old = st.za.values;
      zp_old = st.zp.values;
      ze_old = st.ze.values;
    }
    detail::apply_avg4(grid, st.m, abar);
    std::vector<double> coup(static_cast<std::size_t>(nt) * F + static_cast<std::size_t>(nt + 1) * N, 0.0);
    for (int k = 0; k < nt; ++k)
      for (std::size_t f = 0; f < F; ++f) {
        const std::size_t i = static_cast<std::size_t>(k) * F + f;
        const double la = abar.values[i], lp = grid.sqrtg_face(f) * st.w.values[i];
        const double va = la + st.ya.values[i], vp = lp + st.yp.values[i];
        const ProxCell c = prox_cell(va, vp * vp, sigma, 0.0, 0.0, cfg.prox_tolerance);
        st.za.values[i] = c.m;
        st.zp.values[i] = c.w_factor * vp;
        st.ya.values[i] = va - c.m;
        st.yp.values[i] = vp - st.zp.values[i];
        const double D = tau * grid.face_weight(f);
        coup[i] = D * ((la - c.m) * (la - c.m) + (lp - st.zp.values[i]) * (lp - st.zp.values[i]));
        terms_kin[i] = c.m > 0.0 ? D * 0.5 * st.zp.values[i] * st.zp.values[i] / c.m : 0.0;
      }
    for (int k = 1; k < nt; ++k) {
      const auto mk = st.m.slice(k);
      auto ze = st.ze.slice(k), ye = st.ye.slice(k);
      for (std::size_t s = 0; s < N; ++s) {
        const double v = mk[s] + ye[s];
        const ProxCell c = prox_cell(v, 0.0, sigma, eps, ref.potential[s], cfg.prox_tolerance);
        ze[s] = c.m;
        ye[s] = v - c.m;
        const double D = tau * grid.node_weight(s);
        coup[static_cast<std::size_t>(nt) * F + static_cast<std::size_t>(k) * N + s] =
            D * (mk[s] - c.m) * (mk[s] - c.m);
        terms_ent[static_cast<std::size_t>(k) * N + s] = D * eps * (xlogx(c.m) + c.m * ref.potential[s]);
      }
    }
    coupling = std::sqrt(pairwise_sum(coup));
    rep.residual_history.push_back(coupling);
    if (adapt) {
      std::vector<double> dz;
      for (int k = 0; k < nt; ++k)
        for (std::size_t f = 0; f < F; ++f) {
          const std::size_t i = static_cast<std::size_t>(k) * F + f;
          const double a = st.za.values[i] - za_old[i], b = st.zp.values[i] - zp_old[i];
          dz.push_back(tau * grid.face_weight(f) * (a * a + b * b));
        }
      for (int k = 1; k < nt; ++k)
        for (std::size_t s = 0; s < N; ++s) {
          const std::size_t i = static_cast<std::size_t>(k) * N + s;
          const double a = st.ze.values[i] - ze_old[i];
          dz.push_back(tau * grid.node_weight(s) * a * a);
        }
      const double dual = r * std::sqrt(pairwise_sum(dz));
      double factor = 1.0;
      if (coupling > 10.0 * dual && r < 1e4) factor = 2.0;
      else if (dual > 10.0 * coupling && r > 1e-4) factor = 0.5;
      if (factor != 1.0) {
        // Scaled multipliers: y = lambda / r.
        r *= factor;
        sigma = 1.0 / r;
        for (double& v : st.ya.values) v /= factor;
        for (double& v : st.yp.values) v /= factor;
        for (double& v : st.ye.values) v /= factor;
      }
    }
    objective_history.push_back(pairwise_sum(terms_kin) + pairwise_sum(terms_ent) + endpoint_entropy);

    const int W = cfg.stagnation_window;
    if (coupling < cfg.constraint_tolerance && static_cast<int>(objective_history.size()) > W) {
      const double now = objective_history.back();
      const double then = objective_history[objective_history.size() - 1 - static_cast<std::size_t>(W)];
      if (std::abs(now - then) <= cfg.stagnation_tolerance * (1.0 + std::abs(now)) &&
          it - last_gap_check >= W) {
        last_gap_check = it;
        bool positive = true;
        for (double v : st.m.values) positive = positive && v > 0.0;
        const ExtendedReal Fv = positive ? functional_value(grid, st.m, st.w, ref, eps) : ExtendedReal::infinity();
        if (!Fv.infinite) {
          const Potential u = recover_potential(grid, st.m, st.w, ref, eps);
          if (duality_gap(grid, u, st.m, Fv.value) <= cfg.gap_tolerance * (1.0 + std::abs(Fv.value))) {
            converged = true;
            break;
          }
        }
      }
    }
  }
  if (!converged) {
    throw ProxNonConvergence("prox solver did not converge in " + std::to_string(cfg.max_outer_iterations) +
                                 " iterations (coupling residual " + std::to_string(coupling) + ")",
                             st.m, st.w, rep.residual_history);
  }
  for (double v : st.m.values)
    if (!(v > 0.0))
      throw ProxNonConvergence("prox solver returned a nonpositive density", st.m, st.w, rep.residual_history);

  ProxSolution sol{st.m, st.w, Potential(grid), {}};
  const ExtendedReal Fv = functional_value(grid, sol.m, sol.w, ref, eps);
  if (Fv.infinite) throw ProxNonConvergence("prox solver returned an infinite action", st.m, st.w, rep.residual_history);
  sol.u = recover_potential(grid, sol.m, sol.w, ref, eps);
  rep.iterations = std::min(it, cfg.max_outer_iterations);
  rep.continuity_residual = continuity_residual(grid, sol.m, sol.w).norm;
  rep.coupling_residual = coupling;
  rep.objective = Fv.value;
  rep.duality_gap = duality_gap(grid, sol.u, sol.m, Fv.value);
  rep.energy_drift = max_deviation_from_mean(energy_profile(grid, sol.m, sol.u, ref, eps));
  rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  sol.report = std::move(rep);
  return sol;
}

}  // namespace otgeo
