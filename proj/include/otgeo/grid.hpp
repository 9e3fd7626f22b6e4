#pragma once

// Periodic space-time grids with a conformal metric and the discrete
// differential operators built on them.
//
// Layout conventions used across the library:
//   * scalar fields live on nodes; spatial index s = ix (1-D) or ix*n + iy (2-D)
//   * vector fields live on faces: component `axis` of node s sits at
//     x_s + (h/2) e_axis, face index f = axis*nodes + s
//   * contravariant components throughout; |X|^2_g = g X^2 per face

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace otgeo {

inline constexpr double kPi = 3.14159265358979323846;

/// Pairwise summation. Fixed recursion order, so the result does not depend on
/// how the caller produced the terms.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 16) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

class GridError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Conformal factor g(x) of the 1-D metric g(x) dx^2. 2-D grids are always flat.
struct MetricProfile {
  std::string name = "flat";
  std::function<double(double)> g = [](double) { return 1.0; };

  static MetricProfile flat() { return {}; }

  /// g(x) = 1 + amplitude * sin(2 pi frequency x / length)
  static MetricProfile sine(double amplitude, int frequency = 1, double length = 1.0) {
    MetricProfile p;
    p.name = "sine";
    p.g = [=](double x) { return 1.0 + amplitude * std::sin(2.0 * kPi * frequency * x / length); };
    return p;
  }
};

class Grid {
 public:
  int dim() const { return dim_; }
  int n() const { return n_; }
  int nt() const { return nt_; }
  double horizon() const { return horizon_; }
  double length() const { return length_; }
  double h() const { return h_; }
  double tau() const { return horizon_ / nt_; }
  bool flat() const { return flat_; }
  const std::string& metric_name() const { return metric_name_; }

  std::size_t nodes() const { return nodes_; }
  std::size_t faces() const { return static_cast<std::size_t>(dim_) * nodes_; }

  double g_node(std::size_t s) const { return g_node_[s]; }
  double g_face(std::size_t f) const { return g_face_[f]; }
  double sqrtg_node(std::size_t s) const { return sqrtg_node_[s]; }
  double sqrtg_face(std::size_t f) const { return sqrtg_face_[f]; }

  /// Quadrature weight sqrt(g) h^dim of a node / face.
  double node_weight(std::size_t s) const { return node_w_[s]; }
  double face_weight(std::size_t f) const { return face_w_[f]; }
  std::span<const double> node_weights() const { return node_w_; }
  std::span<const double> face_weights() const { return face_w_; }
  std::span<const double> g_nodes() const { return g_node_; }
  std::span<const double> g_faces() const { return g_face_; }

  double volume() const { return volume_; }

  /// Time of node k (0..nt).
  double time(int k) const { return k * tau(); }
  /// Trapezoid weight of time node k.
  double time_weight(int k) const { return (k == 0 || k == nt_) ? 0.5 * tau() : tau(); }

  int coord_index(std::size_t s, int axis) const {
    if (dim_ == 1) return static_cast<int>(s);
    return axis == 0 ? static_cast<int>(s / n_) : static_cast<int>(s % n_);
  }
  double coord(std::size_t s, int axis) const { return coord_index(s, axis) * h_; }

  std::size_t index(int ix, int iy = 0) const {
    ix = wrap(ix);
    if (dim_ == 1) return static_cast<std::size_t>(ix);
    return static_cast<std::size_t>(ix) * n_ + static_cast<std::size_t>(wrap(iy));
  }

  /// Periodic neighbour of node s, `offset` steps along `axis`.
  std::size_t neighbor(std::size_t s, int axis, int offset) const {
    if (dim_ == 1) return index(static_cast<int>(s) + offset);
    int ix = coord_index(s, 0), iy = coord_index(s, 1);
    if (axis == 0) ix += offset; else iy += offset;
    return index(ix, iy);
  }

  std::size_t face(int axis, std::size_t s) const { return static_cast<std::size_t>(axis) * nodes_ + s; }

  /// Same spatial grid and metric with a different time discretization.
  Grid with_time(int n_time, double horizon) const {
    if (n_time < 2) throw GridError("n_time must be >= 2, got " + std::to_string(n_time));
    if (!(horizon > 0.0)) throw GridError("horizon must be positive");
    Grid g = *this;
    g.nt_ = n_time;
    g.horizon_ = horizon;
    return g;
  }

  std::string describe() const {
    return "dim=" + std::to_string(dim_) + " n=" + std::to_string(n_) + " nt=" + std::to_string(nt_) +
           " T=" + fmt_double(horizon_) + " metric=" + metric_name_;
  }

 private:
  friend Grid build_grid(int, int, int, double, const MetricProfile&, double);

  int wrap(int i) const { return ((i % n_) + n_) % n_; }
  static std::string fmt_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", x);
    return buf;
  }

  int dim_ = 1, n_ = 0, nt_ = 0;
  double horizon_ = 1.0, length_ = 1.0, h_ = 1.0, volume_ = 0.0;
  bool flat_ = true;
  std::string metric_name_;
  std::size_t nodes_ = 0;
  std::vector<double> g_node_, g_face_, sqrtg_node_, sqrtg_face_, node_w_, face_w_;
};

inline Grid build_grid(int dim, int n_space, int n_time, double horizon,
                       const MetricProfile& metric = MetricProfile::flat(), double length = 1.0) {
  if (dim != 1 && dim != 2) throw GridError("grid dimension must be 1 or 2, got " + std::to_string(dim));
  if (n_space < 4) throw GridError("n_space must be >= 4, got " + std::to_string(n_space));
  if (n_time < 2) throw GridError("n_time must be >= 2, got " + std::to_string(n_time));
  if (!(horizon > 0.0)) throw GridError("horizon must be positive");
  if (!(length > 0.0)) throw GridError("domain length must be positive");
  if (dim == 2 && metric.name != "flat") throw GridError("2-D grids carry the flat metric only");

  Grid grid;
  grid.dim_ = dim;
  grid.n_ = n_space;
  grid.nt_ = n_time;
  grid.horizon_ = horizon;
  grid.length_ = length;
  grid.h_ = length / n_space;
  grid.metric_name_ = metric.name;
  grid.nodes_ = dim == 1 ? static_cast<std::size_t>(n_space)
                         : static_cast<std::size_t>(n_space) * static_cast<std::size_t>(n_space);

  const std::size_t N = grid.nodes_;
  grid.g_node_.assign(N, 1.0);
  grid.g_face_.assign(grid.faces(), 1.0);
  if (dim == 1) {
    for (std::size_t s = 0; s < N; ++s) {
      const double x = static_cast<double>(s) * grid.h_;
      const double g = metric.g(x);
      if (!(g > 0.0) || !std::isfinite(g))
        throw GridError("metric must be positive: g(x) = " + std::to_string(g) + " at node " + std::to_string(s) +
                        " (x = " + std::to_string(x) + ")");
      grid.g_node_[s] = g;
      const double gf = metric.g(x + 0.5 * grid.h_);
      if (!(gf > 0.0) || !std::isfinite(gf))
        throw GridError("metric must be positive: g(x) = " + std::to_string(gf) + " at face " + std::to_string(s) +
                        "+1/2");
      grid.g_face_[s] = gf;
    }
  }
  grid.flat_ = true;
  for (double g : grid.g_node_) grid.flat_ = grid.flat_ && g == 1.0;
  for (double g : grid.g_face_) grid.flat_ = grid.flat_ && g == 1.0;

  const double cell = std::pow(grid.h_, dim);
  grid.sqrtg_node_.resize(N);
  grid.node_w_.resize(N);
  for (std::size_t s = 0; s < N; ++s) {
    grid.sqrtg_node_[s] = std::sqrt(grid.g_node_[s]);
    grid.node_w_[s] = grid.sqrtg_node_[s] * cell;
  }
  grid.sqrtg_face_.resize(grid.faces());
  grid.face_w_.resize(grid.faces());
  for (std::size_t f = 0; f < grid.faces(); ++f) {
    grid.sqrtg_face_[f] = std::sqrt(grid.g_face_[f]);
    grid.face_w_[f] = grid.sqrtg_face_[f] * cell;
  }
  grid.volume_ = pairwise_sum(grid.node_w_);
  return grid;
}

namespace detail {
inline void require_size(std::size_t got, std::size_t want, const char* what) {
  if (got != want)
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(want) + " values, got " +
                                std::to_string(got));
}
}  // namespace detail

/// Contravariant gradient g^{-1} du on faces.
inline std::vector<double> covariant_gradient(std::span<const double> u, const Grid& grid) {
  detail::require_size(u.size(), grid.nodes(), "covariant_gradient");
  std::vector<double> out(grid.faces());
  const double inv_h = 1.0 / grid.h();
  for (int a = 0; a < grid.dim(); ++a)
    for (std::size_t s = 0; s < grid.nodes(); ++s) {
      const std::size_t f = grid.face(a, s);
      out[f] = (u[grid.neighbor(s, a, 1)] - u[s]) * inv_h / grid.g_face(f);
    }
  return out;
}

/// div_g X = (1/sqrt g) d(sqrt g X); the exact negative adjoint of covariant_gradient
/// under the sqrt(g)-weighted inner products.
inline std::vector<double> divergence_g(std::span<const double> X, const Grid& grid) {
  detail::require_size(X.size(), grid.faces(), "divergence_g");
  std::vector<double> out(grid.nodes(), 0.0);
  const double inv_h = 1.0 / grid.h();
  for (std::size_t s = 0; s < grid.nodes(); ++s) {
    double acc = 0.0;
    for (int a = 0; a < grid.dim(); ++a) {
      const std::size_t fp = grid.face(a, s);
      const std::size_t fm = grid.face(a, grid.neighbor(s, a, -1));
      acc += grid.sqrtg_face(fp) * X[fp] - grid.sqrtg_face(fm) * X[fm];
    }
    out[s] = acc * inv_h / grid.sqrtg_node(s);
  }
  return out;
}

inline std::vector<double> laplace_beltrami(std::span<const double> u, const Grid& grid) {
  const auto grad = covariant_gradient(u, grid);
  return divergence_g(grad, grid);
}

/// Midpoint rule with weight sqrt(g) h^dim.
inline double integrate(std::span<const double> f, const Grid& grid) {
  detail::require_size(f.size(), grid.nodes(), "integrate");
  std::vector<double> terms(f.size());
  for (std::size_t s = 0; s < f.size(); ++s) terms[s] = f[s] * grid.node_weight(s);
  return pairwise_sum(terms);
}

/// Same quadrature over face-centred samples.
inline double integrate_faces(std::span<const double> f, const Grid& grid) {
  detail::require_size(f.size(), grid.faces(), "integrate_faces");
  std::vector<double> terms(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) terms[i] = f[i] * grid.face_weight(i);
  return pairwise_sum(terms);
}

/// Pointwise metric product X ._g Y on faces.
inline std::vector<double> metric_dot(std::span<const double> X, std::span<const double> Y, const Grid& grid) {
  detail::require_size(X.size(), grid.faces(), "metric_dot");
  detail::require_size(Y.size(), grid.faces(), "metric_dot");
  std::vector<double> out(X.size());
  for (std::size_t f = 0; f < X.size(); ++f) out[f] = grid.g_face(f) * X[f] * Y[f];
  return out;
}

/// Node field averaged onto the faces.
inline std::vector<double> node_to_faces(std::span<const double> v, const Grid& grid) {
  detail::require_size(v.size(), grid.nodes(), "node_to_faces");
  std::vector<double> out(grid.faces());
  for (int a = 0; a < grid.dim(); ++a)
    for (std::size_t s = 0; s < grid.nodes(); ++s)
      out[grid.face(a, s)] = 0.5 * (v[s] + v[grid.neighbor(s, a, 1)]);
  return out;
}

/// Samples f at every node.
inline std::vector<double> sample_nodes(const Grid& grid, const std::function<double(double, double)>& f) {
  std::vector<double> out(grid.nodes());
  for (std::size_t s = 0; s < grid.nodes(); ++s)
    out[s] = f(grid.coord(s, 0), grid.dim() == 2 ? grid.coord(s, 1) : 0.0);
  return out;
}

}  // namespace otgeo
