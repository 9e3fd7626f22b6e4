#pragma once

// Theorem-level checks on solver output. Each check returns one CheckEntry
// naming its threshold and grid.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "otgeo/grid.hpp"
#include "otgeo/oracles.hpp"
#include "otgeo/prox_solver.hpp"
#include "otgeo/transport.hpp"

namespace otgeo {

struct CheckEntry {
  std::string name;
  std::string grid;
  double eps = 0.0;
  std::vector<std::pair<std::string, double>> values;
  std::vector<std::pair<std::string, std::vector<double>>> series;
  std::string threshold_label;
  double threshold = 0.0;
  bool pass = true;
  bool required = false;

  void set(const std::string& key, double v) {
    for (auto& [k, x] : values)
      if (k == key) {
        x = v;
        return;
      }
    values.emplace_back(key, v);
  }
  bool has(const std::string& key) const {
    for (const auto& kv : values)
      if (kv.first == key) return true;
    return false;
  }
  double get(const std::string& key) const {
    for (const auto& [k, x] : values)
      if (k == key) return x;
    throw std::out_of_range("check " + name + " has no value '" + key + "'");
  }
  void add_series(const std::string& key, std::vector<double> v) { series.emplace_back(key, std::move(v)); }
  const std::vector<double>& get_series(const std::string& key) const {
    for (const auto& [k, v] : series)
      if (k == key) return v;
    throw std::out_of_range("check " + name + " has no series '" + key + "'");
  }
};

inline CheckEntry new_entry(std::string name, const Grid& grid, double eps = 0.0) {
  CheckEntry e;
  e.name = std::move(name);
  e.grid = grid.describe();
  e.eps = eps;
  return e;
}

struct DiagnosticsReport {
  std::vector<CheckEntry> entries;

  bool required_pass() const {
    for (const auto& e : entries)
      if (e.required && !e.pass) return false;
    return true;
  }
  const CheckEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// profiles

/// phi(t_k) = int m (log m + V), k = 0..nt.
inline std::vector<double> entropy_profile(const Grid& grid, const DensityPath& m, const ReferenceMeasure& ref) {
  std::vector<double> phi(static_cast<std::size_t>(grid.nt() + 1));
  for (int k = 0; k <= grid.nt(); ++k) phi[k] = relative_entropy(m.slice(k), ref, grid);
  return phi;
}

namespace detail {

/// g|grad u|^2 per face.
inline std::vector<double> face_grad_sq(std::span<const double> u, const Grid& grid) {
  auto grad = covariant_gradient(u, grid);
  for (std::size_t f = 0; f < grid.faces(); ++f) grad[f] = grid.g_face(f) * grad[f] * grad[f];
  return grad;
}

/// Face values averaged back to nodes, summed over axes.
inline std::vector<double> faces_to_nodes(std::span<const double> ff, const Grid& grid) {
  std::vector<double> out(grid.nodes(), 0.0);
  for (int axis = 0; axis < grid.dim(); ++axis)
    for (std::size_t s = 0; s < grid.nodes(); ++s) {
      const std::size_t sm = grid.neighbor(s, axis, -1);
      out[s] += 0.5 * (ff[axis * grid.nodes() + s] + ff[axis * grid.nodes() + sm]);
    }
  return out;
}

inline std::vector<double> second_differences(const std::vector<double>& phi, double tau) {
  std::vector<double> d2;
  for (std::size_t k = 1; k + 1 < phi.size(); ++k) d2.push_back((phi[k + 1] - 2.0 * phi[k] + phi[k - 1]) / (tau * tau));
  return d2;
}

inline bool potential_is_constant(const ReferenceMeasure& ref) {
  const auto [lo, hi] = std::minmax_element(ref.potential.begin(), ref.potential.end());
  return *hi - *lo <= 1e-14 * (1.0 + std::abs(*hi));
}

/// Least squares y = a + b x.
inline std::pair<double, double> linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double b = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return {(sy - b * sx) / n, b};
}

inline double ratio_spread(const std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  if (*lo <= 0.0) return std::numeric_limits<double>::infinity();
  return *hi / *lo;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// checks

/// E(t_k) at interior nodes, its drift, the defect of E = B/T - (2 eps/T) int int m(log m + V),
/// and, when an upper bound on B is given, E <= bound/T + 2 eps log Z.
inline CheckEntry check_energy(const Grid& grid, const DensityPath& m, const Potential& u, const ReferenceMeasure& ref,
                               double eps, double B, std::optional<double> upper_bound = std::nullopt) {
  CheckEntry e = new_entry("energy", grid, eps);
  const auto E = energy_profile(grid, m, u, ref, eps);
  const double mean = pairwise_sum(E) / static_cast<double>(E.size());
  const double drift = max_deviation_from_mean(E);
  const double T = grid.horizon();
  e.set("energy_mean", mean);
  e.set("drift", drift);
  e.set("defect", std::abs(mean - (B / T - 2.0 * eps / T * entropy_integral(grid, m, ref))));
  if (upper_bound) {
    const double K = *upper_bound / T + 2.0 * eps * ref.log_normalizer;
    e.set("energy_ceiling", K);
    e.set("below_ceiling", mean <= K ? 1.0 : 0.0);
  }
  e.add_series("E", E);
  e.threshold_label = "drift <= 0.02 (1 + |E|)";
  e.threshold = 0.02 * (1.0 + std::abs(mean));
  e.pass = drift <= e.threshold;
  e.required = true;
  return e;
}

/// Second differences of phi, fitted chord constant Lambda and per-eps entropy
/// ceiling constant L. Asserted only for constant V.
inline CheckEntry check_displacement_convexity(const Grid& grid, const DensityPath& m, const ReferenceMeasure& ref,
                                               double eps, double tol_conv) {
  CheckEntry e = new_entry("displacement_convexity", grid, eps);
  const auto phi = entropy_profile(grid, m, ref);
  const auto d2 = detail::second_differences(phi, grid.tau());
  const double T = grid.horizon();
  const int d = grid.dim();
  double lambda = 0.0, L = -std::numeric_limits<double>::infinity();
  for (int k = 1; k < grid.nt(); ++k) {
    const double t = grid.time(k);
    const double chord = (1.0 - t / T) * phi[0] + (t / T) * phi[grid.nt()];
    lambda = std::max(lambda, 2.0 * T * T * (phi[k] - chord) / (t * (T - t)));
    L = std::max(L, phi[k] - d * std::abs(std::log(t * (T - t))) - 0.5 * d * std::abs(std::log(eps)));
  }
  const double min_d2 = *std::min_element(d2.begin(), d2.end());
  const bool applies = detail::potential_is_constant(ref);
  e.set("min_second_difference", min_d2);
  e.set("chord_lambda", lambda);
  e.set("entropy_ceiling_L", L);
  e.set("applies", applies ? 1.0 : 0.0);
  e.add_series("phi", phi);
  e.add_series("second_difference", d2);
  e.threshold_label = "min second difference >= -tol_conv";
  e.threshold = -tol_conv;
  e.pass = !applies || min_d2 >= -tol_conv;
  return e;
}

/// Largest |second difference| of phi; on the stationary instance this is
/// the discretization error the convexity tolerance is calibrated from.
inline double stationary_convexity_error(const Grid& grid, const DensityPath& m, const ReferenceMeasure& ref) {
  const auto d2 = detail::second_differences(entropy_profile(grid, m, ref), grid.tau());
  double err = 0.0;
  for (double v : d2) err = std::max(err, std::abs(v));
  return err;
}

/// Barrier constants: the smallest C with -C/t <= u_hat and u_hat <= C/(T - t).
struct BarrierFit {
  double lower = 0.0, upper = 0.0;
};

inline BarrierFit fit_barrier(const Grid& grid, const Potential& u, std::span<const double> m1) {
  std::vector<double> t(grid.nodes());
  for (std::size_t s = 0; s < grid.nodes(); ++s) t[s] = u.slice(grid.nt())[s] * m1[s];
  const double shift = integrate(t, grid);
  BarrierFit fit;
  const double T = grid.horizon();
  for (int k = 0; k <= grid.nt(); ++k) {
    const double tk = grid.time(k);
    for (double v : u.slice(k)) {
      const double uh = v - shift;
      if (k > 0) fit.lower = std::max(fit.lower, -uh * tk);
      if (k < grid.nt()) fit.upper = std::max(fit.upper, uh * (T - tk));
    }
  }
  return fit;
}

/// Sub-solution residual -d_t u + 1/2 |grad u|^2 - eps (log m + V) at interval midpoints.
struct HjResidual {
  double max_positive = 0.0;
  double l2_m = 0.0;
};

inline HjResidual hj_residual(const Grid& grid, const Potential& u, const DensityPath& m, const ReferenceMeasure& ref,
                              double eps) {
  const std::size_t N = grid.nodes();
  HjResidual r;
  std::vector<double> um(N), terms;
  for (int k = 0; k < grid.nt(); ++k) {
    for (std::size_t s = 0; s < N; ++s) um[s] = 0.5 * (u.slice(k)[s] + u.slice(k + 1)[s]);
    const auto g2 = detail::faces_to_nodes(detail::face_grad_sq(um, grid), grid);
    for (std::size_t s = 0; s < N; ++s) {
      const double mm = 0.5 * (m.slice(k)[s] + m.slice(k + 1)[s]);
      const double res = -(u.slice(k + 1)[s] - u.slice(k)[s]) / grid.tau() + 0.5 * g2[s] -
                         eps * (std::log(std::max(mm, 1e-300)) + ref.potential[s]);
      r.max_positive = std::max(r.max_positive, res);
      terms.push_back(mm * res * res * grid.node_weight(s) * grid.tau());
    }
  }
  r.l2_m = std::sqrt(pairwise_sum(terms));
  return r;
}

/// Gap of the identity int u(0) m0 - int u(T) m1 = F_eps(m, w), barrier fits and the HJ residual.
inline CheckEntry check_duality(const Grid& grid, const Potential& u, const DensityPath& m, const MomentumField& w,
                                const ReferenceMeasure& ref, double eps) {
  CheckEntry e = new_entry("duality", grid, eps);
  const ExtendedReal F = functional_value(grid, m, w, ref, eps);
  const double B = F.as_double();
  const double gap = F.infinite ? std::numeric_limits<double>::infinity() : duality_gap(grid, u, m, F.value);
  const BarrierFit fit = fit_barrier(grid, u, m.slice(grid.nt()));
  const HjResidual hj = hj_residual(grid, u, m, ref, eps);
  e.set("objective", B);
  e.set("gap", gap);
  e.set("barrier_lower", fit.lower);
  e.set("barrier_upper", fit.upper);
  e.set("hj_max_positive", hj.max_positive);
  e.set("hj_l2_m", hj.l2_m);
  e.threshold_label = "gap <= 1e-4 (1 + |B|)";
  e.threshold = 1e-4 * (1.0 + std::abs(B));
  e.pass = gap <= e.threshold;
  e.required = true;
  return e;
}

/// The feasible heat-flow curve must cost at least the optimum.
inline CheckEntry check_upper_bound(const Grid& grid, double B, double bound, double eps) {
  CheckEntry e = new_entry("heat_upper_bound", grid, eps);
  e.set("objective", B);
  e.set("bound", bound);
  e.threshold_label = "bound >= B - 1e-6 (1 + |B|)";
  e.threshold = 1e-6 * (1.0 + std::abs(B));
  e.pass = bound >= B - e.threshold;
  e.required = true;
  return e;
}

/// Elliptic-side echoes: where d_t u peaks, the gradient constant
/// |grad u|_inf / (1 + |u|_inf) and the local density constant K with kappa = 1/4.
inline CheckEntry check_potential_bounds(const Grid& grid, const Potential& u, const DensityPath& m,
                                         const ReferenceMeasure& ref, double eps, double a, double b) {
  CheckEntry e = new_entry("potential_bounds", grid, eps);
  const int nt = grid.nt();
  const double tau = grid.tau();
  const std::size_t N = grid.nodes();
  double best = -std::numeric_limits<double>::infinity();
  int arg = 0;
  double umax = 0.0, gmax = 0.0, K = 0.0;
  const double kappa = 0.25;
  for (int k = 0; k <= nt; ++k) {
    const auto uk = u.slice(k);
    for (std::size_t s = 0; s < N; ++s) {
      double ut;
      if (k == 0) ut = (u.slice(1)[s] - uk[s]) / tau;
      else if (k == nt) ut = (uk[s] - u.slice(nt - 1)[s]) / tau;
      else ut = (u.slice(k + 1)[s] - u.slice(k - 1)[s]) / (2.0 * tau);
      if (ut > best) {
        best = ut;
        arg = k;
      }
      umax = std::max(umax, std::abs(uk[s]));
    }
    const auto g2f = detail::face_grad_sq(uk, grid);
    for (double v : g2f) gmax = std::max(gmax, std::sqrt(v));
    const double t = grid.time(k);
    if (t > a && t < b) {
      const auto g2 = detail::faces_to_nodes(g2f, grid);
      const double wgt = 1.0 / ((t - a) * (t - a)) + 1.0 / ((b - t) * (b - t));
      for (std::size_t s = 0; s < N; ++s) {
        const double lhs = eps * (std::log(std::max(m.slice(k)[s], 1e-300)) + ref.potential[s]) + kappa * g2[s];
        K = std::max(K, lhs / wgt);
      }
    }
  }
  const int edge = std::min(arg, nt - arg);
  e.set("time_derivative_max", best);
  e.set("time_derivative_argmax_step", arg);
  e.set("gradient_constant", gmax / (1.0 + umax));
  e.set("local_bound_K", K);
  e.threshold_label = "d_t u maximal within one step of t in {0, T}";
  e.threshold = 1.0;
  e.pass = edge <= 1;
  return e;
}

/// Window integrals over (a, b) and the global energy integral.
struct InteriorMeasures {
  double window_max = 0.0;
  double grad_u_sq = 0.0;     // int_a^b int |grad u|^2
  double log_m = 0.0;         // eps int_a^b int |log m|
  double global_energy = 0.0; // int_0^T int (m |grad u|^2 + eps m log m)
  double grad_root_m = 0.0;   // int_a^b int |grad sqrt m|^2
};

inline InteriorMeasures interior_measures(const Grid& grid, const DensityPath& m, const Potential& u, double eps,
                                          double a, double b) {
  InteriorMeasures r;
  const std::size_t N = grid.nodes();
  std::vector<double> gu, lm, ge, gr;
  std::vector<double> root(N), tmp(N);
  for (int k = 0; k <= grid.nt(); ++k) {
    const auto mk = m.slice(k);
    const auto g2 = detail::face_grad_sq(u.slice(k), grid);
    const auto mf = node_to_faces(mk, grid);
    std::vector<double> kin(grid.faces());
    for (std::size_t f = 0; f < grid.faces(); ++f) kin[f] = mf[f] * g2[f];
    ge.push_back(grid.time_weight(k) * (integrate_faces(kin, grid) + eps * [&] {
                   for (std::size_t s = 0; s < N; ++s) tmp[s] = xlogx(mk[s]);
                   return integrate(tmp, grid);
                 }()));
    const double t = grid.time(k);
    if (!(t > a && t < b)) continue;
    for (double v : mk) r.window_max = std::max(r.window_max, v);
    gu.push_back(grid.tau() * integrate_faces(g2, grid));
    for (std::size_t s = 0; s < N; ++s) tmp[s] = std::abs(std::log(std::max(mk[s], 1e-300)));
    lm.push_back(grid.tau() * eps * integrate(tmp, grid));
    for (std::size_t s = 0; s < N; ++s) root[s] = std::sqrt(std::max(mk[s], 0.0));
    gr.push_back(grid.tau() * integrate_faces(detail::face_grad_sq(root, grid), grid));
  }
  r.grad_u_sq = pairwise_sum(gu);
  r.log_m = pairwise_sum(lm);
  r.global_energy = pairwise_sum(ge);
  r.grad_root_m = pairwise_sum(gr);
  return r;
}

struct InteriorSample {
  double endpoint_sup = 0.0;
  InteriorMeasures measures;
};

/// Across a family of increasingly rough marginals: the window max of m must
/// change by < 2x while the endpoint sup-norms grow by >= 10x. The integral
/// quantities are recorded with their own within-2x flags.
inline CheckEntry check_interior_bounds(const Grid& grid, const std::vector<InteriorSample>& family, double eps,
                                        double a, double b) {
  if (family.size() < 2) throw std::invalid_argument("check_interior_bounds: need at least two family members");
  CheckEntry e = new_entry("interior_bounds", grid, eps);
  std::vector<double> sup, wmax, gu, lm, ge, gr;
  for (const auto& f : family) {
    sup.push_back(f.endpoint_sup);
    wmax.push_back(f.measures.window_max);
    gu.push_back(f.measures.grad_u_sq);
    lm.push_back(f.measures.log_m);
    ge.push_back(f.measures.global_energy);
    gr.push_back(f.measures.grad_root_m);
  }
  const double sup_growth = sup.back() / sup.front();
  const double wmax_ratio = detail::ratio_spread(wmax);
  e.set("window_a", a);
  e.set("window_b", b);
  e.set("endpoint_sup_growth", sup_growth);
  e.set("window_max_ratio", wmax_ratio);
  e.set("grad_u_ratio", detail::ratio_spread(gu));
  e.set("log_m_ratio", detail::ratio_spread(lm));
  e.set("global_energy_ratio", detail::ratio_spread(ge));
  e.set("grad_root_m_ratio", detail::ratio_spread(gr));
  for (const std::string key : {"grad_u", "log_m", "global_energy", "grad_root_m"})
    e.set(key + "_within_2x", e.get(key + "_ratio") < 2.0 ? 1.0 : 0.0);
  e.add_series("endpoint_sup", sup);
  e.add_series("window_max", wmax);
  e.add_series("grad_u_sq", gu);
  e.add_series("log_m", lm);
  e.add_series("global_energy", ge);
  e.add_series("grad_root_m", gr);
  e.threshold_label = "window max ratio < 2 with endpoint sup growth >= 10";
  e.threshold = 2.0;
  e.pass = wmax_ratio < 2.0 && sup_growth >= 10.0 * (1.0 - 1e-9);
  return e;
}

/// Two-point fit of int_a^b int |grad sqrt m|^2 <= C |log eps| / eps.
inline CheckEntry check_root_density_gradient(const Grid& grid, const std::vector<double>& eps_list,
                                              const std::vector<double>& values) {
  CheckEntry e = new_entry("root_density_gradient", grid);
  std::vector<double> C;
  for (std::size_t i = 0; i < eps_list.size(); ++i)
    C.push_back(values[i] * eps_list[i] / std::abs(std::log(eps_list[i])));
  e.add_series("eps", eps_list);
  e.add_series("grad_root_m", values);
  e.add_series("fitted_C", C);
  e.set("fitted_C", *std::max_element(C.begin(), C.end()));
  e.set("C_spread", detail::ratio_spread(C));
  e.threshold_label = "fitted C spread < 2";
  e.threshold = 2.0;
  e.pass = e.get("C_spread") < 2.0;
  return e;
}

// ---------------------------------------------------------------------------
// horizon and eps families

inline int worker_count(std::size_t jobs) {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("OTGEO_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) hw = static_cast<unsigned>(v);
  }
  return static_cast<int>(std::min<std::size_t>(hw, std::max<std::size_t>(jobs, 1)));
}

/// Runs job(i) for i in [0, count) on a pool of worker_count threads. The
/// first exception thrown is rethrown after all workers finish.
template <class Job>
void parallel_for(std::size_t count, Job job) {
  const int workers = worker_count(count);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto run = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < count;) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  pool.clear();
  if (error) std::rethrow_exception(error);
}

/// B(T_alt) <= max(1/T_alt, T_alt) B(1) + 1e-4.
inline CheckEntry check_time_scaling(std::span<const double> m0, std::span<const double> m1,
                                     const ReferenceMeasure& ref, double eps, const Grid& grid, double T_alt,
                                     const ProxConfig& cfg = {}) {
  if (!(T_alt > 0.0)) throw std::invalid_argument("check_time_scaling: T_alt must be positive");
  CheckEntry e = new_entry("time_scaling", grid, eps);
  const std::vector<double> horizons{1.0, T_alt};
  std::vector<double> B(2);
  parallel_for(2, [&](std::size_t i) {
    B[i] = solve_prox(m0, m1, ref, eps, grid.with_time(grid.nt(), horizons[i]), cfg).report.objective;
  });
  const double factor = std::max(1.0 / T_alt, T_alt);
  e.set("horizon_alt", T_alt);
  e.set("objective_unit", B[0]);
  e.set("objective_alt", B[1]);
  e.set("factor", factor);
  e.threshold_label = "B(T_alt) <= max(1/T_alt, T_alt) B(1) + 1e-4";
  e.threshold = factor * B[0] + 1e-4;
  e.pass = B[1] <= e.threshold;
  return e;
}

struct SweepSpec {
  std::vector<double> eps{0.2, 0.1, 0.05, 0.025};
  std::string family = "bump_pair";
  Grid grid;
  std::vector<double> m0, m1;
  ReferenceMeasure ref;
  ProxConfig solver;
  double solver_tolerance = 1e-6;

  void validate() const {
    if (eps.size() < 2) throw std::invalid_argument("sweep: need at least two eps values");
    for (std::size_t i = 0; i < eps.size(); ++i) {
      if (!(eps[i] > 0.0)) throw std::invalid_argument("sweep: eps must be positive");
      if (i > 0 && !(eps[i] < eps[i - 1])) throw std::invalid_argument("sweep: eps must be strictly decreasing");
    }
  }
};

struct SweepResult {
  CheckEntry entry;
  std::vector<ProxSolution> solutions;
};

/// B_eps - W2^2/(2T) for each eps: positivity, monotone decrease, log-log slope,
/// and (1-D) the L1 distance of m_eps(T/2) to the McCann midpoint.
inline SweepResult epsilon_sweep(const SweepSpec& spec) {
  spec.validate();
  const Grid& grid = spec.grid;
  const std::size_t n = spec.eps.size();
  SweepResult out;
  out.solutions.resize(n);
  parallel_for(n, [&](std::size_t i) { out.solutions[i] = solve_prox(spec.m0, spec.m1, spec.ref, spec.eps[i], grid, spec.solver); });

  const double w2 = grid.dim() == 1 ? circular_w2_oracle(spec.m0, spec.m1, grid) : flow_w2_oracle(spec.m0, spec.m1, grid);
  const double base = w2 / (2.0 * grid.horizon());
  CheckEntry& e = out.entry;
  e.name = "epsilon_sweep";
  e.grid = grid.describe();
  std::vector<double> B, res;
  for (std::size_t i = 0; i < n; ++i) {
    B.push_back(out.solutions[i].report.objective);
    res.push_back(B.back() - base);
  }
  const bool degenerate = std::all_of(res.begin(), res.end(), [](double r) { return std::abs(r) <= 1e-8; });
  bool positive = true, monotone = true;
  for (std::size_t i = 0; i < n; ++i) {
    positive = positive && res[i] >= -spec.solver_tolerance;
    if (i > 0) monotone = monotone && res[i] < res[i - 1];
  }
  e.set("w2_squared", w2);
  e.set("unregularized_value", base);
  e.set("positive", positive ? 1.0 : 0.0);
  e.set("monotone", monotone ? 1.0 : 0.0);
  e.add_series("eps", spec.eps);
  e.add_series("objective", B);
  e.add_series("residual", res);
  bool slope_ok = degenerate;
  if (!degenerate && std::all_of(res.begin(), res.end(), [](double r) { return r > 0.0; })) {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < n; ++i) {
      lx.push_back(std::log(spec.eps[i]));
      ly.push_back(std::log(res[i]));
    }
    const auto [intercept, slope] = detail::linear_fit(lx, ly);
    e.set("slope", slope);
    e.set("intercept", intercept);
    slope_ok = slope >= 0.8 && slope <= 1.2;
  }
  if (grid.dim() == 1 && grid.flat()) {
    const int mid = grid.nt() / 2;
    const auto target = mccann_interpolant(spec.m0, spec.m1, grid, grid.time(mid) / grid.horizon());
    std::vector<double> l1;
    std::vector<double> diff(grid.nodes());
    for (const auto& sol : out.solutions) {
      for (std::size_t s = 0; s < grid.nodes(); ++s) diff[s] = std::abs(sol.m.slice(mid)[s] - target[s]);
      l1.push_back(integrate(diff, grid));
    }
    bool decreasing = true;
    for (std::size_t i = 1; i < n; ++i) decreasing = decreasing && l1[i] <= l1[i - 1];
    e.add_series("midpoint_l1", l1);
    e.set("midpoint_l1_decreasing", decreasing ? 1.0 : 0.0);
  }
  e.threshold_label = "residual positive, decreasing in eps, log-log slope in [0.8, 1.2]";
  e.threshold = 0.8;
  e.pass = degenerate || (positive && monotone && slope_ok);
  return out;
}

}  // namespace otgeo
