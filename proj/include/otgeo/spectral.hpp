#pragma once

// Eigen-decompositions of the discrete Laplace-Beltrami operator and of the
// Neumann time Laplacian, and the space-time Poisson solver built from them.

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "otgeo/grid.hpp"

namespace otgeo {

class PoissonError : public std::runtime_error {
 public:
  PoissonError(const std::string& what, double residual) : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Orthonormal eigenbasis of -Delta_g in the sqrt(g)-weighted inner product.
/// In 1-D the symmetrised operator W^{1/2}(-Delta_g)W^{-1/2} is diagonalised
/// directly (this covers the conformal metric); on the flat torus the basis is
/// the tensor product of the 1-D flat bases.
class SpatialSpectrum {
 public:
  explicit SpatialSpectrum(const Grid& grid) : dim_(grid.dim()), n_(grid.n()), nodes_(grid.nodes()) {
    if (dim_ == 1) {
      basis_ = symmetric_laplacian_basis(grid, lambda1_);
      sqrtw_.resize(n_);
      for (int i = 0; i < n_; ++i) sqrtw_[i] = std::sqrt(grid.node_weight(i));
      lambda_ = lambda1_;
    } else {
      const Grid line = build_grid(1, n_, 2, 1.0, MetricProfile::flat(), grid.length());
      basis_ = symmetric_laplacian_basis(line, lambda1_);
      cell_sqrt_ = grid.h();
      lambda_.resize(nodes_);
      for (int i = 0; i < n_; ++i)
        for (int j = 0; j < n_; ++j) lambda_[static_cast<std::size_t>(i) * n_ + j] = lambda1_[i] + lambda1_[j];
    }
  }

  std::size_t size() const { return nodes_; }
  const std::vector<double>& eigenvalues() const { return lambda_; }
  bool is_zero_mode(std::size_t j) const { return lambda_[j] < 1e-9 * (1.0 + lambda_.back()); }

  /// Coefficients of `count` consecutive slices (in place allowed).
  void forward(const double* in, double* out, std::size_t count) const {
    if (dim_ == 1) {
      Eigen::Map<const RowMatrix> X(in, static_cast<Eigen::Index>(count), n_);
      Eigen::Map<const Eigen::RowVectorXd> sw(sqrtw_.data(), n_);
      RowMatrix Y = (X.array().rowwise() * sw.array()).matrix() * basis_;
      Eigen::Map<RowMatrix>(out, static_cast<Eigen::Index>(count), n_) = Y;
    } else {
      for (std::size_t c = 0; c < count; ++c) {
        Eigen::Map<const RowMatrix> A(in + c * nodes_, n_, n_);
        RowMatrix C = basis_.transpose() * A * basis_ * cell_sqrt_;
        Eigen::Map<RowMatrix>(out + c * nodes_, n_, n_) = C;
      }
    }
  }

  void inverse(const double* in, double* out, std::size_t count) const {
    if (dim_ == 1) {
      Eigen::Map<const RowMatrix> Y(in, static_cast<Eigen::Index>(count), n_);
      Eigen::Map<const Eigen::RowVectorXd> sw(sqrtw_.data(), n_);
      RowMatrix X = ((Y * basis_.transpose()).array().rowwise() / sw.array()).matrix();
      Eigen::Map<RowMatrix>(out, static_cast<Eigen::Index>(count), n_) = X;
    } else {
      for (std::size_t c = 0; c < count; ++c) {
        Eigen::Map<const RowMatrix> C(in + c * nodes_, n_, n_);
        RowMatrix A = basis_ * C * basis_.transpose() / cell_sqrt_;
        Eigen::Map<RowMatrix>(out + c * nodes_, n_, n_) = A;
      }
    }
  }

  std::vector<double> to_modes(std::span<const double> f) const {
    std::vector<double> c(nodes_);
    forward(f.data(), c.data(), 1);
    return c;
  }
  std::vector<double> from_modes(std::span<const double> c) const {
    std::vector<double> f(nodes_);
    inverse(c.data(), f.data(), 1);
    return f;
  }

  /// Mean-zero solution of Delta_g psi = f - mean(f).
  std::vector<double> inverse_laplacian(std::span<const double> f) const {
    auto c = to_modes(f);
    for (std::size_t j = 0; j < nodes_; ++j) c[j] = is_zero_mode(j) ? 0.0 : -c[j] / lambda_[j];
    return from_modes(c);
  }

  /// exp(s Delta_g) f.
  std::vector<double> heat_flow(std::span<const double> f, double s) const {
    auto c = to_modes(f);
    for (std::size_t j = 0; j < nodes_; ++j) c[j] *= std::exp(-lambda_[j] * s);
    return from_modes(c);
  }

  /// int_{s0}^{s1} exp(s Delta_g) f ds.
  std::vector<double> heat_flow_integral(std::span<const double> f, double s0, double s1) const {
    auto c = to_modes(f);
    for (std::size_t j = 0; j < nodes_; ++j) {
      const double l = lambda_[j];
      c[j] *= is_zero_mode(j) ? (s1 - s0) : (std::exp(-l * s0) - std::exp(-l * s1)) / l;
    }
    return from_modes(c);
  }

 private:
  static RowMatrix symmetric_laplacian_basis(const Grid& g, std::vector<double>& lambda) {
    const int n = g.n();
    Eigen::MatrixXd S(n, n);
    std::vector<double> e(n, 0.0);
    for (int j = 0; j < n; ++j) {
      e[j] = 1.0;
      const auto lap = laplace_beltrami(e, g);
      e[j] = 0.0;
      for (int i = 0; i < n; ++i)
        S(i, j) = -lap[i] * std::sqrt(g.node_weight(i)) / std::sqrt(g.node_weight(j));
    }
    S = 0.5 * (S + S.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    lambda.assign(es.eigenvalues().data(), es.eigenvalues().data() + n);
    lambda[0] = 0.0;  // constants; the rest are strictly positive on a connected grid
    RowMatrix Q = es.eigenvectors();
    return Q;
  }

  int dim_, n_;
  std::size_t nodes_;
  RowMatrix basis_;
  std::vector<double> lambda1_, lambda_, sqrtw_;
  double cell_sqrt_ = 1.0;
};

/// Solves (-c_t d_tt - Delta_g) phi = rhs on the nt interval midpoints with
/// homogeneous Neumann conditions in time, periodic in space, mean-zero gauge.
class SpacetimePoisson {
 public:
  explicit SpacetimePoisson(const Grid& grid, double time_coeff = 1.0)
      : grid_(grid), spectrum_(grid), time_coeff_(time_coeff), nt_(grid.nt()), nodes_(grid.nodes()) {
    if (!(time_coeff > 0.0)) throw std::invalid_argument("time coefficient must be positive");
    const double tau = grid.tau();
    cos_basis_.resize(nt_, nt_);
    mu_.resize(nt_);
    for (int k = 0; k < nt_; ++k) {
      const double c = k == 0 ? std::sqrt(1.0 / nt_) : std::sqrt(2.0 / nt_);
      for (int j = 0; j < nt_; ++j) cos_basis_(j, k) = c * std::cos(kPi * k * (j + 0.5) / nt_);
      const double s = 2.0 / tau * std::sin(kPi * k / (2.0 * nt_));
      mu_[k] = s * s;
    }
  }

  const Grid& grid() const { return grid_; }
  const SpatialSpectrum& spectrum() const { return spectrum_; }
  double time_coeff() const { return time_coeff_; }

  /// Neumann eigenvalues of -d_tt on the midpoint grid.
  const std::vector<double>& time_eigenvalues() const { return mu_; }

  std::vector<double> apply(std::span<const double> phi) const {
    detail::require_size(phi.size(), static_cast<std::size_t>(nt_) * nodes_, "SpacetimePoisson::apply");
    std::vector<double> out(phi.size());
    const double it2 = time_coeff_ / (grid_.tau() * grid_.tau());
    for (int k = 0; k < nt_; ++k) {
      std::span<const double> cur = phi.subspan(static_cast<std::size_t>(k) * nodes_, nodes_);
      const auto lap = laplace_beltrami(cur, grid_);
      const double* prev = phi.data() + static_cast<std::size_t>(k > 0 ? k - 1 : k) * nodes_;
      const double* next = phi.data() + static_cast<std::size_t>(k < nt_ - 1 ? k + 1 : k) * nodes_;
      for (std::size_t s = 0; s < nodes_; ++s)
        out[static_cast<std::size_t>(k) * nodes_ + s] = -it2 * (next[s] - 2.0 * cur[s] + prev[s]) - lap[s];
    }
    return out;
  }

  /// Mean-zero solution; throws PoissonError if the forward residual exceeds
  /// 1e-10 relative to the (mean-removed) right-hand side.
  std::vector<double> solve(std::span<const double> rhs_in) const {
    const std::size_t total = static_cast<std::size_t>(nt_) * nodes_;
    detail::require_size(rhs_in.size(), total, "spacetime_poisson");
    std::vector<double> rhs(rhs_in.begin(), rhs_in.end());
    remove_mean(rhs);

    std::vector<double> modes(total);
    spectrum_.forward(rhs.data(), modes.data(), static_cast<std::size_t>(nt_));
    Eigen::Map<RowMatrix> M(modes.data(), nt_, static_cast<Eigen::Index>(nodes_));
    RowMatrix T = cos_basis_.transpose() * M;
    const auto& lam = spectrum_.eigenvalues();
    for (int k = 0; k < nt_; ++k)
      for (std::size_t j = 0; j < nodes_; ++j) {
        const double d = time_coeff_ * mu_[k] + lam[j];
        T(k, static_cast<Eigen::Index>(j)) = (k == 0 && spectrum_.is_zero_mode(j)) ? 0.0 : T(k, j) / d;
      }
    M = cos_basis_ * T;
    std::vector<double> phi(total);
    spectrum_.inverse(modes.data(), phi.data(), static_cast<std::size_t>(nt_));
    remove_mean(phi);

    const double rn = weighted_norm(rhs);
    if (rn > 0.0) {
      const auto Aphi = apply(phi);
      std::vector<double> diff(total);
      for (std::size_t i = 0; i < total; ++i) diff[i] = Aphi[i] - rhs[i];
      const double rel = weighted_norm(diff) / rn;
      last_relative_residual_ = rel;
      if (!(rel <= 1e-10)) throw PoissonError("space-time Poisson residual too large", rel);
    } else {
      last_relative_residual_ = 0.0;
    }
    return phi;
  }

  double last_relative_residual() const { return last_relative_residual_; }

  /// sqrt(sum tau W f^2) over all midpoint slices.
  double weighted_norm(std::span<const double> f) const {
    std::vector<double> t(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) t[i] = f[i] * f[i] * grid_.node_weight(i % nodes_) * grid_.tau();
    return std::sqrt(pairwise_sum(t));
  }

  void remove_mean(std::vector<double>& f) const {
    std::vector<double> t(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) t[i] = f[i] * grid_.node_weight(i % nodes_);
    const double mean = pairwise_sum(t) / (grid_.volume() * nt_);
    for (double& v : f) v -= mean;
  }

 private:
  Grid grid_;
  SpatialSpectrum spectrum_;
  double time_coeff_;
  int nt_;
  std::size_t nodes_;
  RowMatrix cos_basis_;
  std::vector<double> mu_;
  mutable double last_relative_residual_ = 0.0;
};

/// Free-function form: flat operator -d_tt - Delta_g.
inline std::vector<double> spacetime_poisson(std::span<const double> rhs, const Grid& grid) {
  return SpacetimePoisson(grid).solve(rhs);
}

}  // namespace otgeo
