#pragma once

// Independent reference values: exact discrete W2 on the circle and on the
// flat 2-torus, a positivity-preserving heat semigroup, and the heat-flow
// competitor curve whose cost bounds B_eps from above.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "otgeo/grid.hpp"
#include "otgeo/prox_solver.hpp"
#include "otgeo/spectral.hpp"
#include "otgeo/transport.hpp"

namespace otgeo {

class OracleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::vector<double> cell_masses(std::span<const double> m, const Grid& grid, const char* what) {
  require_size(m.size(), grid.nodes(), what);
  std::vector<double> p(m.size());
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!(m[s] >= 0.0) || !std::isfinite(m[s])) throw OracleError(std::string(what) + ": not a probability density");
    p[s] = m[s] * grid.node_weight(s);
  }
  const double total = pairwise_sum(p);
  if (std::abs(total - 1.0) > 1e-8) throw OracleError(std::string(what) + ": total mass " + std::to_string(total) + " != 1");
  for (double& x : p) x /= total;
  return p;
}

/// Lifted quantile matching on the circle of length L.
struct CircleQuantiles {
  std::vector<double> x0, x1, S0, S1;  // support points, cumulative masses (size n+1)
  double L = 1.0;

  double q0(double t) const {
    const auto it = std::upper_bound(S0.begin(), S0.end() - 1, t);
    return x0[static_cast<std::size_t>(it - S0.begin()) - 1];
  }
  // Q1 extended by Q1(t+1) = Q1(t) + L.
  double q1(double t) const {
    const double k = std::floor(t);
    const double fr = t - k;
    const auto it = std::upper_bound(S1.begin(), S1.end() - 1, fr);
    return x1[static_cast<std::size_t>(it - S1.begin()) - 1] + k * L;
  }

  /// Pieces (mass, x, y) of the monotone coupling shifted by theta.
  template <class Visit>
  void pieces(double theta, Visit visit) const {
    std::vector<double> cuts;
    cuts.reserve(S0.size() + 2 * S1.size() + 2);
    for (double s : S0) cuts.push_back(s);
    for (int k = -3; k <= 3; ++k)
      for (double s : S1) {
        const double c = s + k - theta;
        if (c > 0.0 && c < 1.0) cuts.push_back(c);
      }
    std::sort(cuts.begin(), cuts.end());
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      const double a = cuts[i], b = cuts[i + 1];
      if (b <= a) continue;
      const double mid = 0.5 * (a + b);
      visit(b - a, q0(mid), q1(mid + theta));
    }
  }

  double cost(double theta) const {
    std::vector<double> terms;
    pieces(theta, [&](double w, double x, double y) { terms.push_back(w * (x - y) * (x - y)); });
    return pairwise_sum(terms);
  }
};

inline CircleQuantiles circle_quantiles(std::span<const double> m0, std::span<const double> m1, const Grid& grid) {
  if (grid.dim() != 1 || !grid.flat()) throw OracleError("circular_w2_oracle needs a flat 1-D grid");
  const auto p = cell_masses(m0, grid, "m0");
  const auto q = cell_masses(m1, grid, "m1");
  CircleQuantiles cq;
  cq.L = grid.length();
  cq.S0.push_back(0.0);
  cq.S1.push_back(0.0);
  for (std::size_t s = 0; s < p.size(); ++s) {
    if (p[s] > 0.0) {
      cq.x0.push_back(grid.coord(s, 0));
      cq.S0.push_back(cq.S0.back() + p[s]);
    }
    if (q[s] > 0.0) {
      cq.x1.push_back(grid.coord(s, 0));
      cq.S1.push_back(cq.S1.back() + q[s]);
    }
  }
  cq.S0.back() = 1.0;
  cq.S1.back() = 1.0;
  return cq;
}

inline double best_theta(const CircleQuantiles& cq) {
  // cost(theta) is piecewise linear; its minimum sits on a breakpoint.
  double best = std::numeric_limits<double>::infinity(), arg = 0.0;
  for (std::size_t i = 0; i + 1 < cq.S0.size(); ++i)
    for (std::size_t j = 0; j + 1 < cq.S1.size(); ++j)
      for (int k = -1; k <= 1; ++k) {
        const double th = cq.S1[j] - cq.S0[i] + k;
        if (th < -1.0 || th > 1.0) continue;
        const double c = cq.cost(th);
        if (c < best) {
          best = c;
          arg = th;
        }
      }
  return arg;
}

}  // namespace detail

/// Squared 2-Wasserstein distance between the grid measures sum m_s h delta_{x_s}
/// on the flat circle.
inline double circular_w2_oracle(std::span<const double> m0, std::span<const double> m1, const Grid& grid) {
  const auto cq = detail::circle_quantiles(m0, m1, grid);
  return cq.cost(detail::best_theta(cq));
}

/// Displacement interpolation at fraction t of the circular optimal coupling,
/// deposited on the grid with hat weights; returns a density.
inline std::vector<double> mccann_interpolant(std::span<const double> m0, std::span<const double> m1, const Grid& grid,
                                              double t = 0.5) {
  const auto cq = detail::circle_quantiles(m0, m1, grid);
  const double theta = detail::best_theta(cq);
  const int n = grid.n();
  const double h = grid.h(), L = grid.length();
  std::vector<double> mass(static_cast<std::size_t>(n), 0.0);
  cq.pieces(theta, [&](double w, double x, double y) {
    double z = (1.0 - t) * x + t * y;
    z -= L * std::floor(z / L);
    const double u = z / h;
    const int i = static_cast<int>(std::floor(u));
    const double fr = u - i;
    mass[static_cast<std::size_t>(((i % n) + n) % n)] += w * (1.0 - fr);
    mass[static_cast<std::size_t>(((i + 1) % n + n) % n)] += w * fr;
  });
  for (std::size_t s = 0; s < mass.size(); ++s) mass[s] /= grid.node_weight(s);
  return mass;
}

// ---------------------------------------------------------------------------
// Exact discrete transport on the flat 2-torus (transportation network simplex)

namespace detail {

struct TransportSimplex {
  struct Cell {
    int i, j;
    double flow;
  };
  std::vector<double> cost;  // ns x nd
  int ns = 0, nd = 0;
  std::vector<Cell> basis;
  std::vector<std::vector<int>> adj;  // node -> basis cells; sources 0..ns-1, sinks ns..
  std::vector<char> is_basic;

  double c(int i, int j) const { return cost[static_cast<std::size_t>(i) * nd + j]; }

  void add_cell(int i, int j, double f) {
    const int id = static_cast<int>(basis.size());
    basis.push_back({i, j, f});
    adj[i].push_back(id);
    adj[ns + j].push_back(id);
    is_basic[static_cast<std::size_t>(i) * nd + j] = 1;
  }

  double solve(std::vector<double> p, std::vector<double> q) {
    adj.assign(static_cast<std::size_t>(ns + nd), {});
    is_basic.assign(static_cast<std::size_t>(ns) * nd, 0);
    basis.clear();
    // North-west corner start: a spanning tree with ns + nd - 1 cells.
    int i = 0, j = 0;
    while (true) {
      if (i == ns - 1 && j == nd - 1) {
        add_cell(i, j, std::max(0.0, std::min(p[i], q[j])));
        break;
      }
      if ((p[i] < q[j] && i < ns - 1) || j == nd - 1) {
        add_cell(i, j, p[i]);
        q[j] -= p[i];
        ++i;
      } else {
        add_cell(i, j, q[j]);
        p[i] -= q[j];
        ++j;
      }
    }

    const int V = ns + nd;
    std::vector<double> pot(V);
    std::vector<int> parent_cell(V), parent(V), depth(V), queue(V);
    double cmax = 0.0;
    for (double x : cost) cmax = std::max(cmax, x);
    const double tol = 1e-13 * std::max(cmax, 1e-300);
    const std::size_t total = static_cast<std::size_t>(ns) * nd;
    const std::size_t block = std::max<std::size_t>(static_cast<std::size_t>(std::sqrt(static_cast<double>(total))), 64);
    std::size_t cursor = 0;
    const long max_pivots = 200L * (ns + nd) + 100000L;

    for (long pivot = 0; pivot < max_pivots; ++pivot) {
      // Potentials by BFS over the tree from source 0.
      std::fill(parent.begin(), parent.end(), -2);
      parent[0] = -1;
      parent_cell[0] = -1;
      depth[0] = 0;
      pot[0] = 0.0;
      int head = 0, tail = 0;
      queue[tail++] = 0;
      while (head < tail) {
        const int v = queue[head++];
        for (int id : adj[v]) {
          const Cell& cl = basis[id];
          const int other = v < ns ? ns + cl.j : cl.i;
          if (parent[other] != -2) continue;
          parent[other] = v;
          parent_cell[other] = id;
          depth[other] = depth[v] + 1;
          pot[other] = c(cl.i, cl.j) - pot[v];  // u_i + v_j = c_ij
          queue[tail++] = other;
        }
      }
      if (tail != V) throw std::logic_error("flow_w2_oracle: basis is not a spanning tree");

      // Block pricing.
      int ei = -1, ej = -1;
      double best = -tol;
      std::size_t scanned = 0;
      while (scanned < total) {
        const std::size_t end = std::min(scanned + block, total);
        for (; scanned < end; ++scanned) {
          const std::size_t k = (cursor + scanned) % total;
          if (is_basic[k]) continue;
          const int a = static_cast<int>(k / nd), b = static_cast<int>(k % nd);
          const double rc = cost[k] - pot[a] - pot[ns + b];
          if (rc < best) {
            best = rc;
            ei = a;
            ej = b;
          }
        }
        if (ei >= 0) break;
      }
      if (ei < 0) {
        double z = 0.0;
        std::vector<double> terms;
        for (const Cell& cl : basis) terms.push_back(cl.flow * c(cl.i, cl.j));
        z = pairwise_sum(terms);
        return z;
      }
      cursor = (cursor + scanned) % total;

      // Cycle: sink ej -> ... -> source ei through the tree, closed by (ei, ej).
      std::vector<int> up_i, up_j;
      int a = ei, b = ns + ej;
      while (depth[a] > depth[b]) { up_i.push_back(parent_cell[a]); a = parent[a]; }
      while (depth[b] > depth[a]) { up_j.push_back(parent_cell[b]); b = parent[b]; }
      while (a != b) {
        up_i.push_back(parent_cell[a]); a = parent[a];
        up_j.push_back(parent_cell[b]); b = parent[b];
      }
      std::vector<int> path(up_j);
      path.insert(path.end(), up_i.rbegin(), up_i.rend());
      double theta = std::numeric_limits<double>::infinity();
      int leave = -1;
      for (std::size_t k = 0; k < path.size(); k += 2) {
        const double f = basis[path[k]].flow;
        if (f < theta) {
          theta = f;
          leave = static_cast<int>(k);
        }
      }
      for (std::size_t k = 0; k < path.size(); ++k) basis[path[k]].flow += (k % 2 == 0 ? -theta : theta);

      const int lid = path[leave];
      const Cell old = basis[lid];
      is_basic[static_cast<std::size_t>(old.i) * nd + old.j] = 0;
      auto drop = [&](int node) {
        auto& v = adj[node];
        v.erase(std::find(v.begin(), v.end(), lid));
      };
      drop(old.i);
      drop(ns + old.j);
      basis[lid] = {ei, ej, theta};
      adj[ei].push_back(lid);
      adj[ns + ej].push_back(lid);
      is_basic[static_cast<std::size_t>(ei) * nd + ej] = 1;
    }
    throw std::runtime_error("flow_w2_oracle: pivot limit reached");
  }
};

}  // namespace detail

/// Sums blocks of factor x factor cells; returns a density on the coarse grid.
inline std::vector<double> coarsen_bins(std::span<const double> m, const Grid& grid, int factor) {
  if (grid.dim() != 2 || factor < 1 || grid.n() % factor != 0) throw OracleError("coarsen_bins: bad factor");
  const int n = grid.n(), nc = n / factor;
  std::vector<double> out(static_cast<std::size_t>(nc) * nc, 0.0);
  for (int ix = 0; ix < n; ++ix)
    for (int iy = 0; iy < n; ++iy)
      out[static_cast<std::size_t>(ix / factor) * nc + iy / factor] += m[grid.index(ix, iy)];
  for (double& v : out) v /= static_cast<double>(factor) * factor;
  return out;
}

/// Exact squared W2 between the grid measures on the flat 2-torus, with the
/// periodic squared distance as ground cost.
inline double flow_w2_oracle(std::span<const double> m0, std::span<const double> m1, const Grid& grid,
                             int max_bins = 32 * 32) {
  if (grid.dim() != 2) throw OracleError("flow_w2_oracle needs a 2-D grid");
  if (static_cast<long>(grid.nodes()) > max_bins)
    throw OracleError("flow_w2_oracle: " + std::to_string(grid.nodes()) + " bins exceed the budget of " +
                      std::to_string(max_bins) + "; coarsen the inputs first (coarsen_bins)");
  const auto p = detail::cell_masses(m0, grid, "m0");
  const auto q = detail::cell_masses(m1, grid, "m1");
  std::vector<std::size_t> src, dst;
  for (std::size_t s = 0; s < p.size(); ++s) {
    if (p[s] > 0.0) src.push_back(s);
    if (q[s] > 0.0) dst.push_back(s);
  }
  detail::TransportSimplex ts;
  ts.ns = static_cast<int>(src.size());
  ts.nd = static_cast<int>(dst.size());
  ts.cost.resize(src.size() * dst.size());
  const double L = grid.length();
  auto wrap = [L](double d) {
    d = std::abs(d);
    d -= L * std::floor(d / L);
    return std::min(d, L - d);
  };
  for (std::size_t a = 0; a < src.size(); ++a)
    for (std::size_t b = 0; b < dst.size(); ++b) {
      const double dx = wrap(grid.coord(src[a], 0) - grid.coord(dst[b], 0));
      const double dy = wrap(grid.coord(src[a], 1) - grid.coord(dst[b], 1));
      ts.cost[a * dst.size() + b] = dx * dx + dy * dy;
    }
  std::vector<double> ps, qs;
  for (auto s : src) ps.push_back(p[s]);
  for (auto s : dst) qs.push_back(q[s]);
  return ts.solve(ps, qs);
}

// ---------------------------------------------------------------------------
// Heat semigroup and the heat-flow competitor

/// exp(s Lap_g) m by uniformization: every term is a nonnegative combination,
/// so positive data stays positive (no round-off sign flips in the tails).
inline std::vector<double> heat_semigroup(std::span<const double> m, double s, const Grid& grid) {
  detail::require_size(m.size(), grid.nodes(), "heat_semigroup");
  if (s < 0.0) throw std::invalid_argument("heat_semigroup: negative time");
  std::vector<double> v(m.begin(), m.end());
  if (s == 0.0) return v;
  double q = 0.0;
  {
    std::vector<double> e(grid.nodes(), 0.0);
    for (std::size_t i = 0; i < grid.nodes(); ++i) {
      // diagonal of Lap_g at node i
      double d = 0.0;
      for (int a = 0; a < grid.dim(); ++a) {
        const std::size_t fp = grid.face(a, i), fm = grid.face(a, grid.neighbor(i, a, -1));
        d += grid.sqrtg_face(fp) / grid.g_face(fp) + grid.sqrtg_face(fm) / grid.g_face(fm);
      }
      q = std::max(q, d / (grid.h() * grid.h() * grid.sqrtg_node(i)));
    }
  }
  const int chunks = std::max(1, static_cast<int>(std::ceil(s * q / 20.0)));
  const double lam = s * q / chunks;
  // At least the graph diameter in terms, so mass reaches every node.
  const int reach = grid.dim() * (grid.n() / 2 + 1);
  for (int c = 0; c < chunks; ++c) {
    std::vector<double> term = v, acc(v.size(), 0.0);
    double weight = std::exp(-lam), tail = 1.0;
    for (int k = 0; k < 400 && (tail > 1e-18 || k <= reach) && weight > 0.0; ++k) {
      for (std::size_t i = 0; i < v.size(); ++i) acc[i] += weight * term[i];
      tail -= weight;
      const auto lap = laplace_beltrami(term, grid);
      for (std::size_t i = 0; i < v.size(); ++i) term[i] += lap[i] / q;
      weight *= lam / (k + 1);
    }
    v = std::move(acc);
  }
  return v;
}

struct HeatCompetitor {
  double bound = 0.0;
  DensityPath m;
  MomentumField w;
  int k0 = 0, k1 = 0;
  SolveReport middle;
};

/// Cost of the curve: heat flow from m0 with clock t^beta on [0, delta0], the
/// prox-optimal curve between the smoothed marginals on [delta0, delta1], the
/// reversed heat flow into m1 on [delta1, T]. Glue points snap to grid nodes.
inline HeatCompetitor heat_competitor_bound(std::span<const double> m0, std::span<const double> m1,
                                            const ReferenceMeasure& ref, double eps, double beta, double delta0,
                                            double delta1, const Grid& grid, const ProxConfig& cfg = {}) {
  if (!(beta > 1.0)) throw std::invalid_argument("heat_competitor_bound: beta must exceed 1");
  const double T = grid.horizon();
  if (!(delta0 > 0.0 && delta0 < delta1 && delta1 < T))
    throw std::invalid_argument("heat_competitor_bound: need 0 < delta0 < delta1 < T");
  detail::cell_masses(m0, grid, "m0");
  detail::cell_masses(m1, grid, "m1");
  const int nt = grid.nt();
  const double tau = grid.tau();
  HeatCompetitor hc{0.0, DensityPath(grid), MomentumField(grid), 0, 0, {}};
  hc.k0 = std::clamp(static_cast<int>(std::lround(delta0 / tau)), 1, nt - 3);
  hc.k1 = std::clamp(static_cast<int>(std::lround(delta1 / tau)), hc.k0 + 2, nt - 1);
  const std::size_t N = grid.nodes();

  auto put = [&](int k, const std::vector<double>& v) { std::copy(v.begin(), v.end(), hc.m.slice(k).begin()); };
  std::copy(m0.begin(), m0.end(), hc.m.slice(0).begin());
  std::copy(m1.begin(), m1.end(), hc.m.slice(nt).begin());
  for (int k = 1; k <= hc.k0; ++k) put(k, heat_semigroup(m0, std::pow(grid.time(k), beta), grid));
  for (int k = hc.k1; k < nt; ++k) put(k, heat_semigroup(m1, std::pow(T - grid.time(k), beta), grid));
  for (int k = 1; k < nt; ++k) {
    if (k > hc.k0 && k < hc.k1) continue;
    for (double v : hc.m.slice(k))
      if (!(v > 0.0)) throw std::runtime_error("heat_competitor_bound: density underflow under the heat flow");
  }

  // Middle segment: the solver's own optimal curve on a sub-grid.
  const Grid sub = grid.with_time(hc.k1 - hc.k0, (hc.k1 - hc.k0) * tau);
  std::vector<double> a(hc.m.slice(hc.k0).begin(), hc.m.slice(hc.k0).end());
  std::vector<double> b(hc.m.slice(hc.k1).begin(), hc.m.slice(hc.k1).end());
  const double ma = integrate(a, grid), mb = integrate(b, grid);
  for (double& v : a) v /= ma;
  for (double& v : b) v /= mb;
  const ProxSolution mid = solve_prox(a, b, ref, eps, sub, cfg);
  hc.middle = mid.report;
  for (int k = hc.k0; k <= hc.k1; ++k) put(k, std::vector<double>(mid.m.slice(k - hc.k0).begin(), mid.m.slice(k - hc.k0).end()));
  for (int k = hc.k0; k < hc.k1; ++k)
    std::copy(mid.w.slice(k - hc.k0).begin(), mid.w.slice(k - hc.k0).end(), hc.w.slice(k).begin());

  // Heat segments: w = grad Lap^+ (m[k+1] - m[k])/tau solves the discrete
  // continuity equation exactly (it is the gradient of the heat-time integral).
  const SpatialSpectrum spec(grid);
  std::vector<double> dm(N);
  for (int k = 0; k < nt; ++k) {
    if (k >= hc.k0 && k < hc.k1) continue;
    for (std::size_t s = 0; s < N; ++s) dm[s] = (hc.m.slice(k + 1)[s] - hc.m.slice(k)[s]) / tau;
    const auto grad = covariant_gradient(spec.inverse_laplacian(dm), grid);
    std::copy(grad.begin(), grad.end(), hc.w.slice(k).begin());
  }
  const ExtendedReal F = functional_value(grid, hc.m, hc.w, ref, eps);
  if (F.infinite) throw std::runtime_error("heat_competitor_bound: competitor has infinite action");
  hc.bound = F.value;
  return hc;
}

}  // namespace otgeo
