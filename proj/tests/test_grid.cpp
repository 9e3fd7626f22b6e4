#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "otgeo/grid.hpp"

using namespace otgeo;

namespace {

std::vector<double> random_vector(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = U(rng);
  return v;
}

std::vector<Grid> sample_grids() {
  return {build_grid(1, 32, 4, 1.0), build_grid(1, 48, 4, 1.0, MetricProfile::sine(0.5, 2)),
          build_grid(2, 16, 4, 1.0), build_grid(1, 20, 4, 1.0, MetricProfile::sine(0.3, 1, 2.0), 2.0)};
}

// Delta_g u for g = 1 + a sin(2 pi x), u = cos(2 pi x).
double exact_laplacian(double x, double a) {
  const double w = 2.0 * kPi;
  const double g = 1.0 + a * std::sin(w * x), gp = a * w * std::cos(w * x);
  const double q = 1.0 / std::sqrt(g), qp = -0.5 * gp / (g * std::sqrt(g));
  const double up = -w * std::sin(w * x), upp = -w * w * std::cos(w * x);
  return q * (qp * up + q * upp);
}

double laplacian_error(int n, double a) {
  const Grid g = a == 0.0 ? build_grid(1, n, 2, 1.0) : build_grid(1, n, 2, 1.0, MetricProfile::sine(a));
  const auto u = sample_nodes(g, [](double x, double) { return std::cos(2.0 * kPi * x); });
  const auto lap = laplace_beltrami(u, g);
  double err = 0.0;
  for (std::size_t s = 0; s < g.nodes(); ++s) err = std::max(err, std::abs(lap[s] - exact_laplacian(g.coord(s, 0), a)));
  return err;
}

}  // namespace

TEST(Grid, RejectsBadArguments) {
  EXPECT_THROW(build_grid(3, 16, 4, 1.0), GridError);
  EXPECT_THROW(build_grid(1, 2, 4, 1.0), GridError);
  EXPECT_THROW(build_grid(1, 16, 1, 1.0), GridError);
  EXPECT_THROW(build_grid(1, 16, 4, 0.0), GridError);
  EXPECT_THROW(build_grid(1, 16, 4, 1.0, MetricProfile::sine(1.5)), GridError);
  EXPECT_THROW(build_grid(2, 16, 4, 1.0, MetricProfile::sine(0.2)), GridError);
}

TEST(Grid, WeightsAndVolume) {
  const Grid g = build_grid(2, 8, 4, 2.0);
  EXPECT_EQ(g.nodes(), 64u);
  EXPECT_EQ(g.faces(), 128u);
  EXPECT_NEAR(g.volume(), 1.0, 1e-14);
  EXPECT_DOUBLE_EQ(g.tau(), 0.5);
  EXPECT_DOUBLE_EQ(g.time_weight(0) + g.time_weight(4), g.tau());
  const Grid c = build_grid(1, 64, 4, 1.0, MetricProfile::sine(0.5));
  // Riemannian length of the circle: int sqrt(1 + 0.5 sin) dx.
  double exact = 0.0;
  for (int i = 0; i < 200000; ++i) exact += std::sqrt(1.0 + 0.5 * std::sin(2.0 * kPi * (i + 0.5) / 200000)) / 200000;
  EXPECT_NEAR(c.volume(), exact, 1e-10);
  EXPECT_FALSE(c.flat());
}

TEST(Grid, NeighborsWrapPeriodically) {
  const Grid g = build_grid(2, 8, 4, 1.0);
  const std::size_t corner = g.index(7, 7);
  EXPECT_EQ(g.neighbor(corner, 0, 1), g.index(0, 7));
  EXPECT_EQ(g.neighbor(corner, 1, 1), g.index(7, 0));
  EXPECT_EQ(g.neighbor(g.index(0, 0), 0, -1), g.index(7, 0));
}

TEST(Grid, StokesIdentity) {
  unsigned seed = 1;
  for (const Grid& g : sample_grids()) {
    const auto X = random_vector(g.faces(), seed++);
    EXPECT_NEAR(integrate(divergence_g(X, g), g), 0.0, 1e-13) << g.describe();
  }
}

TEST(Grid, DivergenceIsNegativeAdjointOfGradient) {
  unsigned seed = 10;
  for (const Grid& g : sample_grids()) {
    const auto u = random_vector(g.nodes(), seed++);
    const auto X = random_vector(g.faces(), seed++);
    const double lhs = integrate_faces(metric_dot(covariant_gradient(u, g), X, g), g);
    std::vector<double> udiv(g.nodes());
    const auto div = divergence_g(X, g);
    for (std::size_t s = 0; s < g.nodes(); ++s) udiv[s] = u[s] * div[s];
    EXPECT_NEAR(lhs, -integrate(udiv, g), 1e-12) << g.describe();
  }
}

TEST(Grid, GradientOfConstantVanishes) {
  for (const Grid& g : sample_grids()) {
    const std::vector<double> c(g.nodes(), 3.5);
    for (double v : covariant_gradient(c, g)) EXPECT_EQ(v, 0.0);
  }
}

TEST(Grid, LaplaceBeltramiSecondOrder) {
  for (double a : {0.0, 0.5}) {
    const double e1 = laplacian_error(64, a), e2 = laplacian_error(128, a);
    EXPECT_GE(std::log2(e1 / e2), 1.8) << "a=" << a;
  }
}

TEST(Grid, LaplacianIsSymmetricNegativeSemidefinite) {
  const Grid g = build_grid(1, 24, 2, 1.0, MetricProfile::sine(0.4));
  const auto u = random_vector(g.nodes(), 3), v = random_vector(g.nodes(), 4);
  const auto lu = laplace_beltrami(u, g), lv = laplace_beltrami(v, g);
  std::vector<double> a(g.nodes()), b(g.nodes()), c(g.nodes());
  for (std::size_t s = 0; s < g.nodes(); ++s) {
    a[s] = v[s] * lu[s];
    b[s] = u[s] * lv[s];
    c[s] = u[s] * lu[s];
  }
  EXPECT_NEAR(integrate(a, g), integrate(b, g), 1e-10);
  EXPECT_LE(integrate(c, g), 0.0);
}

TEST(Grid, WithTimeKeepsSpace) {
  const Grid g = build_grid(1, 16, 8, 1.0, MetricProfile::sine(0.3));
  const Grid h = g.with_time(4, 0.5);
  EXPECT_EQ(h.nt(), 4);
  EXPECT_DOUBLE_EQ(h.horizon(), 0.5);
  EXPECT_EQ(h.nodes(), g.nodes());
  EXPECT_DOUBLE_EQ(h.g_node(3), g.g_node(3));
  EXPECT_THROW(g.with_time(1, 1.0), GridError);
}

TEST(Grid, PairwiseSumIsAccurate) {
  std::vector<double> v(1 << 20, 0.1);
  EXPECT_NEAR(pairwise_sum(v), 0.1 * (1 << 20), 1e-7);
}
