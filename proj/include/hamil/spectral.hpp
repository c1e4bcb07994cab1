#pragma once

#include <span>
#include <vector>

#include "hamil/tape.hpp"
#include "hamil/tensor.hpp"

namespace hamil {

/// Eigen-decomposition of a real symmetric matrix.
struct Spectrum {
  std::vector<double> energies;  // ascending
  Tensor states;                 // column k is the eigenvector for energies[k]
  int sweeps = 0;                // Jacobi sweeps used (max over blocks)

  std::size_t dim() const { return energies.size(); }
  std::vector<double> state(std::size_t k) const;
  /// E1 - E0, or +inf for a 1x1 matrix.
  double gap() const;
};

struct JacobiOptions {
  int max_sweeps = 100;
  /// Off-diagonal Frobenius target, relative to max(1, ||H||_F).
  double tol = 1e-12;
  /// Split the matrix into connected blocks of its nonzero pattern first.
  bool split_blocks = true;
};

inline constexpr double kGapTol = 1e-6;

/// Cyclic Jacobi eigensolver. Symmetrizes its input as (H+H^T)/2.
/// Throws ShapeError for non-square input and ConvergenceError at the sweep cap.
Spectrum sym_eig(const Tensor& h, const JacobiOptions& opt = {});

struct GroundState {
  double energy = 0.0;
  std::vector<double> psi;  // unit norm, sign-fixed
  double gap = 0.0;
  bool degenerate = false;  // gap < kGapTol
};

GroundState ground_state(const Tensor& h, const JacobiOptions& opt = {});
GroundState ground_state(const Spectrum& s);

/// Born probabilities p_i = psi_i^2.
std::vector<double> born(std::span<const double> psi);

/// Largest-magnitude entry made non-negative (first one on ties).
void fix_sign(std::span<double> v);

/// dL/dH for the ground state given upstream dL/dpsi0 (length n) and dL/dE0.
/// Throws DegenerateError if the spectral gap is below `gap_tol`.
Tensor ground_state_vjp(const Spectrum& s, std::span<const double> dpsi, double de,
                        double gap_tol = kGapTol);

/// Differentiable ground state of a tape-recorded Hamiltonian.
struct GroundVars {
  Var psi;     // n x 1
  Var energy;  // 1 x 1
  double gap = 0.0;
  std::vector<double> energies;
};

GroundVars ground_state(const Var& h, double gap_tol = kGapTol, const JacobiOptions& opt = {});

}  // namespace hamil
