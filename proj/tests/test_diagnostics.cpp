#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>

#include "otgeo/diagnostics.hpp"
#include "otgeo/marginals.hpp"

using namespace otgeo;

namespace {

ReferenceMeasure cosine_ref(const Grid& g, double a) {
  return ReferenceMeasure::from_potential(g, sample_nodes(g, [a](double x, double) { return a * std::cos(2 * kPi * x); }));
}

DensityPath constant_path(const Grid& g, const std::vector<double>& m) {
  DensityPath p(g);
  for (int k = 0; k <= g.nt(); ++k) std::copy(m.begin(), m.end(), p.slice(k).begin());
  return p;
}

// The exact stationary pair: m = Gibbs density, u = eps log Z (t - T), w = 0.
struct Stationary {
  Grid g = build_grid(1, 16, 8, 1.0);
  ReferenceMeasure ref = cosine_ref(g, 0.3);
  double eps = 0.1;
  DensityPath m = constant_path(g, ref.gibbs_density());
  Potential u{g};
  MomentumField w{g};
  Stationary() {
    for (int k = 0; k <= g.nt(); ++k)
      for (double& v : u.slice(k)) v = eps * ref.log_normalizer * (g.time(k) - g.horizon());
  }
  double B() const { return -eps * g.horizon() * ref.log_normalizer; }
};

std::vector<double> two_bumps(const Grid& g, double c) {
  return detail::bump(g, 0.1, c, 0.5, 0.5);
}

}  // namespace

TEST(Diagnostics, EnergyOnStationaryPair) {
  const Stationary s;
  const CheckEntry e = check_energy(s.g, s.m, s.u, s.ref, s.eps, s.B(), s.B());
  EXPECT_TRUE(e.required);
  EXPECT_TRUE(e.pass);
  EXPECT_NEAR(e.get("energy_mean"), s.eps * s.ref.log_normalizer, 1e-13);
  EXPECT_NEAR(e.get("drift"), 0.0, 1e-13);
  EXPECT_NEAR(e.get("defect"), 0.0, 1e-13);
  EXPECT_NEAR(e.get("energy_ceiling"), s.eps * s.ref.log_normalizer, 1e-13);
  EXPECT_EQ(e.get_series("E").size(), static_cast<std::size_t>(s.g.nt() - 1));
}

TEST(Diagnostics, EnergyDriftFails) {
  const Grid g = build_grid(1, 16, 4, 1.0);
  const auto zero = ReferenceMeasure::zero(g);
  Potential u(g);
  for (int k = 0; k <= g.nt(); ++k)
    for (int i = 0; i < 16; ++i) u.slice(k)[i] = (1.0 + 3.0 * k) * std::sin(2 * kPi * i * g.h());
  const CheckEntry e = check_energy(g, constant_path(g, std::vector<double>(16, 1.0)), u, zero, 0.1, 0.0);
  EXPECT_FALSE(e.pass);
  EXPECT_FALSE(e.has("energy_ceiling"));
}

TEST(Diagnostics, DualityBarrierAndHjOnStationaryPair) {
  const Stationary s;
  const CheckEntry e = check_duality(s.g, s.u, s.m, s.w, s.ref, s.eps);
  EXPECT_TRUE(e.pass);
  const double c = s.eps * s.ref.log_normalizer;
  EXPECT_NEAR(e.get("objective"), s.B(), 1e-14);
  EXPECT_NEAR(e.get("gap"), 0.0, 1e-14);
  EXPECT_NEAR(e.get("hj_max_positive"), 0.0, 1e-13);
  EXPECT_NEAR(e.get("hj_l2_m"), 0.0, 1e-13);
  // u_hat = c (t - 1): -u_hat t peaks at t = 1/2, u_hat (1 - t) is never positive.
  ASSERT_GT(c, 0.0);
  EXPECT_NEAR(e.get("barrier_lower"), 0.25 * c, 1e-14);
  EXPECT_EQ(e.get("barrier_upper"), 0.0);
}

TEST(Diagnostics, BarrierIsGaugeInvariant) {
  const Stationary s;
  Potential shifted = s.u;
  for (double& v : shifted.values) v += 3.7;
  const BarrierFit a = fit_barrier(s.g, s.u, s.m.slice(s.g.nt()));
  const BarrierFit b = fit_barrier(s.g, shifted, s.m.slice(s.g.nt()));
  EXPECT_NEAR(a.lower, b.lower, 1e-13);
  EXPECT_NEAR(a.upper, b.upper, 1e-13);
}

TEST(Diagnostics, UpperBound) {
  const Grid g = build_grid(1, 8, 4, 1.0);
  EXPECT_TRUE(check_upper_bound(g, 1.0, 1.0, 0.1).pass);
  EXPECT_TRUE(check_upper_bound(g, 1.0, 2.0, 0.1).pass);
  EXPECT_FALSE(check_upper_bound(g, 1.0, 0.99, 0.1).pass);
}

TEST(Diagnostics, ConvexityOnStationaryAndConcavePaths) {
  const Stationary s;
  EXPECT_LT(stationary_convexity_error(s.g, s.m, s.ref), 1e-10);
  const CheckEntry cosine = check_displacement_convexity(s.g, s.m, s.ref, s.eps, 1e-9);
  EXPECT_EQ(cosine.get("applies"), 0.0);
  EXPECT_TRUE(cosine.pass);

  // Entropy profile peaking mid-path: concave, so the check fails for V = 0 and Lambda > 0.
  const Grid g = build_grid(1, 32, 8, 1.0);
  DensityPath m(g);
  for (int k = 0; k <= g.nt(); ++k) {
    const double amp = 0.8 * std::sin(kPi * g.time(k));
    for (int i = 0; i < 32; ++i) m.slice(k)[i] = 1.0 + amp * std::cos(2 * kPi * i * g.h());
  }
  const CheckEntry e = check_displacement_convexity(g, m, ReferenceMeasure::zero(g), 0.1, 1e-9);
  EXPECT_EQ(e.get("applies"), 1.0);
  EXPECT_FALSE(e.pass);
  EXPECT_LT(e.get("min_second_difference"), 0.0);
  EXPECT_GT(e.get("chord_lambda"), 0.0);

  // Entropy profile sagging mid-path: convex, below its chord.
  for (int k = 0; k <= g.nt(); ++k) {
    const double amp = 0.8 * (1.0 - std::sin(kPi * g.time(k)));
    for (int i = 0; i < 32; ++i) m.slice(k)[i] = 1.0 + amp * std::cos(2 * kPi * i * g.h());
  }
  const CheckEntry f = check_displacement_convexity(g, m, ReferenceMeasure::zero(g), 0.1, 1e-9);
  EXPECT_TRUE(f.pass);
  EXPECT_EQ(f.get("chord_lambda"), 0.0);
}

TEST(Diagnostics, ConvexityAlongOptimalPath) {
  const Grid g = build_grid(1, 32, 16, 1.0);
  const auto zero = ReferenceMeasure::zero(g);
  const ProxSolution sol = solve_prox(two_bumps(g, 0.3), two_bumps(g, 0.7), zero, 0.1, g);
  const CheckEntry e = check_displacement_convexity(g, sol.m, zero, 0.1, 1e-9);
  EXPECT_TRUE(e.pass);
  EXPECT_GT(e.get("min_second_difference"), 0.0);
  EXPECT_TRUE(check_duality(g, sol.u, sol.m, sol.w, zero, 0.1).pass);
  EXPECT_TRUE(check_energy(g, sol.m, sol.u, zero, 0.1, sol.report.objective).pass);
}

TEST(Diagnostics, PotentialBoundsOnStationaryPair) {
  const Stationary s;
  const CheckEntry e = check_potential_bounds(s.g, s.u, s.m, s.ref, s.eps, 0.25, 0.75);
  EXPECT_TRUE(e.pass);
  EXPECT_NEAR(e.get("time_derivative_max"), s.eps * s.ref.log_normalizer, 1e-12);
  EXPECT_EQ(e.get("gradient_constant"), 0.0);
}

TEST(Diagnostics, InteriorMeasuresClosedForm) {
  const Grid g = build_grid(1, 32, 8, 1.0);
  Potential u(g);
  for (int k = 0; k <= g.nt(); ++k)
    for (int i = 0; i < 32; ++i) u.slice(k)[i] = std::sin(2 * kPi * i * g.h());
  const auto grad = covariant_gradient(u.slice(0), g);
  double dirichlet = 0.0;
  for (double v : grad) dirichlet += v * v * g.h();
  const InteriorMeasures r = interior_measures(g, constant_path(g, std::vector<double>(32, 1.0)), u, 0.1, 0.25, 0.75);
  // Window nodes: t in {3/8, 1/2, 5/8}.
  EXPECT_EQ(r.window_max, 1.0);
  EXPECT_NEAR(r.grad_u_sq, 3 * g.tau() * dirichlet, 1e-12);
  EXPECT_EQ(r.log_m, 0.0);
  EXPECT_EQ(r.grad_root_m, 0.0);
  EXPECT_NEAR(r.global_energy, dirichlet, 1e-12);
}

TEST(Diagnostics, InteriorBoundsThresholds) {
  const Grid g = build_grid(1, 8, 4, 1.0);
  auto family = [](double sup1, double wmax1) {
    std::vector<InteriorSample> f(2);
    f[0].endpoint_sup = 1.0;
    f[1].endpoint_sup = sup1;
    for (auto& s : f) s.measures = {1.0, 1.0, 1.0, 1.0, 1.0};
    f[1].measures.window_max = wmax1;
    f[1].measures.global_energy = 3.0;
    return f;
  };
  const CheckEntry ok = check_interior_bounds(g, family(10.0, 1.9), 0.1, 0.25, 0.75);
  EXPECT_TRUE(ok.pass);
  EXPECT_EQ(ok.get("grad_u_within_2x"), 1.0);
  EXPECT_EQ(ok.get("global_energy_within_2x"), 0.0);
  EXPECT_FALSE(check_interior_bounds(g, family(10.0, 2.1), 0.1, 0.25, 0.75).pass);
  EXPECT_FALSE(check_interior_bounds(g, family(9.0, 1.0), 0.1, 0.25, 0.75).pass);
  EXPECT_THROW(check_interior_bounds(g, {InteriorSample{}}, 0.1, 0.25, 0.75), std::invalid_argument);
}

TEST(Diagnostics, RootDensityGradientFit) {
  const Grid g = build_grid(1, 8, 4, 1.0);
  const std::vector<double> eps{0.1, 0.05};
  std::vector<double> v;
  for (double e : eps) v.push_back(0.7 * std::abs(std::log(e)) / e);
  const CheckEntry e = check_root_density_gradient(g, eps, v);
  EXPECT_TRUE(e.pass);
  EXPECT_NEAR(e.get("fitted_C"), 0.7, 1e-14);
  EXPECT_NEAR(e.get("C_spread"), 1.0, 1e-14);
}

TEST(Diagnostics, TimeScaling) {
  const Grid g = build_grid(1, 32, 16, 1.0);
  const auto zero = ReferenceMeasure::zero(g);
  for (double T : {2.0, 0.5}) {
    const CheckEntry e = check_time_scaling(two_bumps(g, 0.3), two_bumps(g, 0.7), zero, 0.1, g, T);
    EXPECT_TRUE(e.pass) << T;
    EXPECT_GT(e.get("objective_unit"), 0.0);
  }
  EXPECT_THROW(check_time_scaling(two_bumps(g, 0.3), two_bumps(g, 0.7), zero, 0.1, g, 0.0), std::invalid_argument);
}

TEST(Diagnostics, SweepOnUniformIsDegenerate) {
  SweepSpec spec;
  spec.grid = build_grid(1, 16, 8, 1.0);
  spec.m0 = spec.m1 = std::vector<double>(16, 1.0);
  spec.ref = ReferenceMeasure::zero(spec.grid);
  spec.family = "uniform";
  const SweepResult r = epsilon_sweep(spec);
  EXPECT_TRUE(r.entry.pass);
  EXPECT_EQ(r.entry.get("w2_squared"), 0.0);
  EXPECT_FALSE(r.entry.has("slope"));
  for (double v : r.entry.get_series("residual")) EXPECT_NEAR(v, 0.0, 1e-8);
}

TEST(Diagnostics, SweepValidation) {
  SweepSpec spec;
  spec.eps = {0.1};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec.eps = {0.1, 0.2};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec.eps = {0.1, -0.05};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(Diagnostics, CheckEntryAndReport) {
  CheckEntry e;
  e.name = "x";
  e.set("a", 1.0);
  e.set("a", 2.0);
  EXPECT_EQ(e.values.size(), 1u);
  EXPECT_EQ(e.get("a"), 2.0);
  EXPECT_THROW(e.get("b"), std::out_of_range);
  EXPECT_THROW(e.get_series("s"), std::out_of_range);
  DiagnosticsReport rep;
  rep.entries.push_back(e);
  CheckEntry r;
  r.name = "y";
  r.pass = false;
  rep.entries.push_back(r);
  EXPECT_TRUE(rep.required_pass());
  rep.entries.back().required = true;
  EXPECT_FALSE(rep.required_pass());
  EXPECT_EQ(rep.find("y")->name, "y");
  EXPECT_EQ(rep.find("z"), nullptr);
}

TEST(Diagnostics, LinearFitAndSpread) {
  const auto [a, b] = detail::linear_fit({0.0, 1.0, 2.0, 3.0}, {1.0, 3.0, 5.0, 7.0});
  EXPECT_NEAR(a, 1.0, 1e-14);
  EXPECT_NEAR(b, 2.0, 1e-14);
  EXPECT_EQ(detail::ratio_spread({2.0, 1.0, 4.0}), 4.0);
  EXPECT_TRUE(std::isinf(detail::ratio_spread({0.0, 1.0})));
}

TEST(Diagnostics, WorkerPool) {
  ::setenv("OTGEO_THREADS", "1", 1);
  EXPECT_EQ(worker_count(8), 1);
  ::setenv("OTGEO_THREADS", "3", 1);
  EXPECT_EQ(worker_count(8), 3);
  EXPECT_EQ(worker_count(2), 2);
  std::vector<int> hit(50, 0);
  parallel_for(hit.size(), [&](std::size_t i) { hit[i] += 1; });
  for (int h : hit) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, [](std::size_t i) {
                 if (i == 7) throw std::runtime_error("x");
               }),
               std::runtime_error);
  ::unsetenv("OTGEO_THREADS");
}
