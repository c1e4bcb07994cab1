#include "hamil/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include "hamil/error.hpp"

namespace hamil {

std::vector<double> Spectrum::state(std::size_t k) const {
  std::vector<double> v(dim());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = states(i, k);
  return v;
}

double Spectrum::gap() const {
  if (energies.size() < 2) return std::numeric_limits<double>::infinity();
  return energies[1] - energies[0];
}

void fix_sign(std::span<double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  if (!v.empty() && v[best] < 0)
    for (double& x : v) x = -x;
}

namespace {

// Jacobi on a dense n x n block `a` (row-major, symmetric). On return the
// diagonal of `a` holds eigenvalues and row k of `vt` the k-th eigenvector.
int jacobi_block(std::vector<double>& a, std::vector<double>& vt, std::size_t n, double tol,
                 int max_sweeps) {
  vt.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) vt[i * n + i] = 1.0;
  if (n < 2) return 0;

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) s += a[p * n + q] * a[p * n + q];
    return std::sqrt(2.0 * s);
  };

  for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
    const double off = off_norm();
    if (off < tol) return sweep - 1;
    // Early sweeps only rotate the larger elements (Rutishauser threshold).
    const double thresh = sweep < 4 ? 0.2 * off / static_cast<double>(n * n) : 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* rp = &a[p * n];
        double* rq = &a[q * n];
        const double apq = rp[q];
        const double g = 100.0 * std::abs(apq);
        if (sweep > 4 && std::abs(rp[p]) + g == std::abs(rp[p]) &&
            std::abs(rq[q]) + g == std::abs(rq[q])) {
          rp[q] = rq[p] = 0.0;
          continue;
        }
        if (std::abs(apq) <= thresh || apq == 0.0) continue;
        const double diff = rq[q] - rp[p];
        double t;
        if (std::abs(diff) + g == std::abs(diff)) {
          t = apq / diff;
        } else {
          const double theta = 0.5 * diff / apq;
          t = 1.0 / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
          if (theta < 0) t = -t;
        }
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        const double tau = s / (1.0 + c);
        const double app = rp[p] - t * apq;
        const double aqq = rq[q] + t * apq;
        for (std::size_t r = 0; r < n; ++r) {
          if (r == p || r == q) continue;
          const double gr = rp[r], hr = rq[r];
          const double np = gr - s * (hr + gr * tau);
          const double nq = hr + s * (gr - hr * tau);
          rp[r] = np;
          rq[r] = nq;
          a[r * n + p] = np;
          a[r * n + q] = nq;
        }
        rp[p] = app;
        rq[q] = aqq;
        rp[q] = rq[p] = 0.0;
        double* vp = &vt[p * n];
        double* vq = &vt[q * n];
        for (std::size_t r = 0; r < n; ++r) {
          const double gr = vp[r], hr = vq[r];
          vp[r] = gr - s * (hr + gr * tau);
          vq[r] = hr + s * (gr - hr * tau);
        }
      }
    }
  }
  const double off = off_norm();
  if (off < tol) return max_sweeps;
  std::ostringstream os;
  os << "Jacobi eigensolver did not converge in " << max_sweeps
     << " sweeps (off-diagonal norm " << off << ")";
  throw ConvergenceError(os.str(), 0.0);
}

}  // namespace

Spectrum sym_eig(const Tensor& h, const JacobiOptions& opt) {
  if (!h.is_square()) throw ShapeError("sym_eig needs a square matrix, got " + h.shape_string());
  require_finite(h, "sym_eig input");
  const std::size_t n = h.rows();
  const Tensor a = symmetrized(h);
  const double norm = a.frobenius_norm();
  const double tol = opt.tol * std::max(1.0, norm);

  // Connected components of the nonzero pattern.
  std::vector<std::size_t> comp(n, n);
  std::vector<std::vector<std::size_t>> blocks;
  if (opt.split_blocks) {
    for (std::size_t s = 0; s < n; ++s) {
      if (comp[s] != n) continue;
      std::vector<std::size_t> members{s};
      comp[s] = blocks.size();
      for (std::size_t k = 0; k < members.size(); ++k) {
        const std::size_t i = members[k];
        for (std::size_t j = 0; j < n; ++j) {
          if (comp[j] == n && a(i, j) != 0.0) {
            comp[j] = blocks.size();
            members.push_back(j);
          }
        }
      }
      std::sort(members.begin(), members.end());
      blocks.push_back(std::move(members));
    }
  } else {
    blocks.emplace_back(n);
    std::iota(blocks[0].begin(), blocks[0].end(), std::size_t{0});
  }

  std::vector<double> evals(n);
  Tensor vecs(n, n);  // column k eigenvector, in block order
  std::size_t col = 0;
  int sweeps = 0;
  std::vector<double> blk, vt;
  for (const auto& members : blocks) {
    const std::size_t m = members.size();
    blk.assign(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) blk[i * m + j] = a(members[i], members[j]);
    try {
      sweeps = std::max(sweeps, jacobi_block(blk, vt, m, tol, opt.max_sweeps));
    } catch (const ConvergenceError& e) {
      throw ConvergenceError(e.what(), norm);
    }
    for (std::size_t k = 0; k < m; ++k) {
      evals[col + k] = blk[k * m + k];
      for (std::size_t i = 0; i < m; ++i) vecs(members[i], col + k) = vt[k * m + i];
    }
    col += m;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return evals[x] < evals[y]; });
  Spectrum s;
  s.sweeps = sweeps;
  s.energies.resize(n);
  s.states = Tensor(n, n);
  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) {
    s.energies[k] = evals[order[k]];
    for (std::size_t i = 0; i < n; ++i) v[i] = vecs(i, order[k]);
    fix_sign(v);
    for (std::size_t i = 0; i < n; ++i) s.states(i, k) = v[i];
  }
  return s;
}

GroundState ground_state(const Spectrum& s) {
  if (s.dim() == 0) throw ShapeError("ground state of an empty matrix");
  GroundState g;
  g.energy = s.energies[0];
  g.psi = s.state(0);
  g.gap = s.gap();
  g.degenerate = g.gap < kGapTol;
  return g;
}

GroundState ground_state(const Tensor& h, const JacobiOptions& opt) {
  return ground_state(sym_eig(h, opt));
}

std::vector<double> born(std::span<const double> psi) {
  std::vector<double> p(psi.size());
  for (std::size_t i = 0; i < psi.size(); ++i) p[i] = psi[i] * psi[i];
  return p;
}

Tensor ground_state_vjp(const Spectrum& s, std::span<const double> dpsi, double de,
                        double gap_tol) {
  const std::size_t n = s.dim();
  if (dpsi.size() != n) throw ShapeError("ground_state_vjp: dpsi length mismatch");
  const double gap = s.gap();
  if (gap < gap_tol) {
    std::ostringstream os;
    os << "degenerate ground state (gap " << gap << " < " << gap_tol
       << "); add degeneracy jitter to the potential before differentiating";
    throw DegenerateError(os.str(), gap);
  }
  // u = sum_k>0 psi_k (psi_k . dpsi) / (E0 - Ek); dL/dH = de psi0 psi0^T + u psi0^T.
  std::vector<double> u(n, 0.0);
  bool any = false;
  for (double x : dpsi) any = any || x != 0.0;
  if (any) {
    for (std::size_t k = 1; k < n; ++k) {
      double c = 0.0;
      for (std::size_t i = 0; i < n; ++i) c += s.states(i, k) * dpsi[i];
      c /= (s.energies[0] - s.energies[k]);
      if (c == 0.0) continue;
      for (std::size_t i = 0; i < n; ++i) u[i] += c * s.states(i, k);
    }
  }
  Tensor g(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pi = s.states(i, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const double pj = s.states(j, 0);
      g(i, j) = de * pi * pj + 0.5 * (u[i] * pj + u[j] * pi);
    }
  }
  return g;
}

GroundVars ground_state(const Var& h, double gap_tol, const JacobiOptions& opt) {
  Tape& tape = *h.tape();
  auto spec = std::make_shared<Spectrum>(sym_eig(h.value(), opt));
  const std::size_t n = spec->dim();
  GroundVars out;
  out.gap = spec->gap();
  out.energies = spec->energies;
  out.psi = tape.record(
      Tensor(n, 1, spec->state(0)), {h},
      [h, spec, gap_tol](const Tensor& g, Tape& t) {
        t.accumulate(h, ground_state_vjp(*spec, g.data(), 0.0, gap_tol));
      },
      "ground_state.psi");
  out.energy = tape.record(
      Tensor::scalar(spec->energies[0]), {h},
      [h, spec, gap_tol, n](const Tensor& g, Tape& t) {
        const std::vector<double> zero(n, 0.0);
        t.accumulate(h, ground_state_vjp(*spec, zero, g.item(), gap_tol));
      },
      "ground_state.energy");
  return out;
}

}  // namespace hamil
