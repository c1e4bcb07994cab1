#include <cmath>

#include "doctest.h"
#include "fd_check.hpp"
#include "hamil/error.hpp"
#include "hamil/rng.hpp"
#include "hamil/spectral.hpp"

using namespace hamil;

namespace {

Tensor random_symmetric(Rng& rng, std::size_t n) { return symmetrized(rng.normal_tensor(n, n)); }

double reconstruction_error(const Tensor& h, const Spectrum& s) {
  const std::size_t n = s.dim();
  Tensor e = Tensor::diag(s.energies);
  Tensor r = matmul(matmul(s.states, e), s.states.transposed());
  return (r - symmetrized(h)).frobenius_norm();
}

double orthonormality_error(const Spectrum& s) {
  Tensor g = matmul(s.states.transposed(), s.states);
  return max_abs_diff(g, Tensor::identity(s.dim()));
}

}  // namespace

TEST_SUITE("spectral-core") {

TEST_CASE("diagonal matrix gives permuted identity") {
  Spectrum s = sym_eig(Tensor::from_rows({{3, 0, 0}, {0, 1, 0}, {0, 0, 2}}));
  CHECK(s.energies == std::vector<double>{1, 2, 3});
  CHECK(s.states == Tensor::from_rows({{0, 0, 1}, {1, 0, 0}, {0, 1, 0}}));
}

TEST_CASE("2x2 swap matrix") {
  Spectrum s = sym_eig(Tensor::from_rows({{0, 1}, {1, 0}}));
  CHECK(s.energies[0] == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(s.energies[1] == doctest::Approx(1.0).epsilon(1e-14));
  // Both entries tie in magnitude; the first is made non-negative.
  const double r = 1.0 / std::sqrt(2.0);
  CHECK(s.states(0, 0) == doctest::Approx(r).epsilon(1e-14));
  CHECK(s.states(1, 0) == doctest::Approx(-r).epsilon(1e-14));
}

TEST_CASE("random symmetric matrices satisfy all spectrum invariants") {
  Rng rng(17);
  for (std::size_t n : {1u, 2u, 3u, 5u, 8u, 16u, 33u, 64u}) {
    CAPTURE(n);
    Tensor h = random_symmetric(rng, n);
    Spectrum s = sym_eig(h);
    CHECK(reconstruction_error(h, s) < 1e-9);
    CHECK(orthonormality_error(s) < 1e-10);
    // H Psi = Psi diag(E)
    Tensor lhs = matmul(symmetrized(h), s.states);
    Tensor rhs = matmul(s.states, Tensor::diag(s.energies));
    CHECK((lhs - rhs).frobenius_norm() < 1e-8);
    for (std::size_t k = 1; k < n; ++k) CHECK(s.energies[k - 1] <= s.energies[k]);
    for (std::size_t k = 0; k < n; ++k) {
      auto v = s.state(k);
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (std::abs(v[i]) > std::abs(v[best])) best = i;
      CHECK(v[best] >= 0.0);
    }
  }
}

TEST_CASE("block splitting and dense solve agree") {
  Rng rng(4);
  Tensor h(12, 12);
  Tensor a = random_symmetric(rng, 5);
  Tensor b = random_symmetric(rng, 7);
  // Interleave two blocks so the split has to regroup indices.
  const std::size_t ia[] = {0, 3, 4, 8, 11};
  const std::size_t ib[] = {1, 2, 5, 6, 7, 9, 10};
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) h(ia[i], ia[j]) = a(i, j);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) h(ib[i], ib[j]) = b(i, j);
  Spectrum s1 = sym_eig(h);
  JacobiOptions dense;
  dense.split_blocks = false;
  Spectrum s2 = sym_eig(h, dense);
  for (std::size_t k = 0; k < 12; ++k) CHECK(s1.energies[k] == doctest::Approx(s2.energies[k]).epsilon(1e-12));
  CHECK(reconstruction_error(h, s1) < 1e-9);
  CHECK(max_abs_diff(s1.states, s2.states) < 1e-8);
}

TEST_CASE("non-square input and non-finite input are rejected") {
  CHECK_THROWS_AS(sym_eig(Tensor(2, 3)), ShapeError);
  Tensor h(2, 2);
  h(0, 0) = std::nan("");
  CHECK_THROWS_AS(sym_eig(h), NumericError);
}

TEST_CASE("sweep cap reports the matrix norm") {
  Rng rng(9);
  Tensor h = random_symmetric(rng, 10);
  JacobiOptions opt;
  opt.max_sweeps = 1;
  try {
    sym_eig(h, opt);
    FAIL("expected ConvergenceError");
  } catch (const ConvergenceError& e) {
    CHECK(e.matrix_norm() == doctest::Approx(symmetrized(h).frobenius_norm()));
  }
}

TEST_CASE("ground state of a pure potential is the minimum basis state") {
  GroundState g = ground_state(Tensor::diag(std::vector<double>{5, 1, 3}));
  CHECK(g.energy == 1.0);
  CHECK(g.psi == std::vector<double>{0, 1, 0});
  CHECK(g.gap == 2.0);
  CHECK_FALSE(g.degenerate);
}

TEST_CASE("path Laplacian ground state is constant") {
  GroundState g = ground_state(Tensor::from_rows({{1, -1, 0}, {-1, 2, -1}, {0, -1, 1}}));
  CHECK(std::abs(g.energy) < 1e-14);
  for (double v : g.psi) CHECK(v == doctest::Approx(1.0 / std::sqrt(3.0)).epsilon(1e-13));
}

TEST_CASE("degenerate ground state is flagged") {
  GroundState g = ground_state(Tensor::diag(std::vector<double>{1, 1, 2}));
  CHECK(g.degenerate);
}

TEST_CASE("variational bound holds for 1000 random unit vectors") {
  Rng rng(21);
  Tensor h = random_symmetric(rng, 10);
  GroundState g = ground_state(h);
  const Tensor hs = symmetrized(h);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor v = rng.normal_tensor(10, 1);
    v = (1.0 / v.frobenius_norm()) * v;
    const double rq = matmul(v.transposed(), matmul(hs, v)).item();
    CHECK(g.energy <= rq + 1e-12);
  }
}

TEST_CASE("born probabilities") {
  CHECK(born(std::vector<double>{1, 0, 0}) == std::vector<double>{1, 0, 0});
  const double r = 1.0 / std::sqrt(2.0);
  auto p = born(std::vector<double>{r, -r});
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    GroundState g = ground_state(random_symmetric(rng, 9));
    double s = 0;
    for (double x : born(g.psi)) s += x;
    CHECK(std::abs(s - 1.0) < 1e-10);
  }
}

TEST_CASE("energy VJP on a diagonal matrix is Hellmann-Feynman") {
  Spectrum s = sym_eig(Tensor::diag(std::vector<double>{1, 2}));
  Tensor g = ground_state_vjp(s, std::vector<double>{0, 0}, 1.0);
  CHECK(g == Tensor::from_rows({{1, 0}, {0, 0}}));
}

TEST_CASE("psi VJP matches finite differences of the ground state") {
  Rng rng(31);
  // Scale the diagonal so the gap is comfortably above 0.1.
  Tensor h = random_symmetric(rng, 5);
  for (std::size_t i = 0; i < 5; ++i) h(i, i) += 1.5 * static_cast<double>(i);
  Spectrum s = sym_eig(h);
  REQUIRE(s.gap() > 0.1);
  const double eps = 1e-6;
  // Each entry of psi0 separately: dpsi = e_j.
  for (std::size_t j = 0; j < 5; ++j) {
    std::vector<double> dpsi(5, 0.0);
    dpsi[j] = 1.0;
    Tensor g = ground_state_vjp(s, dpsi, 0.0);
    for (std::size_t a = 0; a < 5; ++a) {
      for (std::size_t b = a; b < 5; ++b) {
        // Symmetric perturbation of entries (a,b) and (b,a).
        Tensor d(5, 5);
        d(a, b) = d(b, a) = 1.0;
        const double fp = ground_state(h + eps * d).psi[j];
        const double fm = ground_state(h - eps * d).psi[j];
        const double num = (fp - fm) / (2 * eps);
        const double ana = a == b ? g(a, a) : g(a, b) + g(b, a);
        CHECK(std::abs(num - ana) <= 1e-4 * std::max(1e-3, std::abs(num)));
      }
    }
  }
}

TEST_CASE("commuting perturbation has zero psi gradient component") {
  Rng rng(12);
  Tensor h = random_symmetric(rng, 6);
  Spectrum s = sym_eig(h);
  std::vector<double> dpsi(6);
  for (double& x : dpsi) x = rng.normal();
  Tensor g = ground_state_vjp(s, dpsi, 0.0);
  // P = sum_k c_k psi_k psi_k^T commutes with H.
  Tensor p(6, 6);
  for (std::size_t k = 0; k < 6; ++k) {
    const double c = rng.normal();
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) p(i, j) += c * s.states(i, k) * s.states(j, k);
  }
  double proj = 0;
  for (std::size_t i = 0; i < 36; ++i) proj += g[i] * p[i];
  CHECK(std::abs(proj) < 1e-9);
}

TEST_CASE("VJP refuses a degenerate ground state") {
  Spectrum s = sym_eig(Tensor::diag(std::vector<double>{1, 1, 3}));
  CHECK_THROWS_AS(ground_state_vjp(s, std::vector<double>{1, 0, 0}, 0.0), DegenerateError);
}

TEST_CASE("training gradient through a 6-class toy Hamiltonian head") {
  // H = (K + eps I)/m + diag(V), K = D - W, W = softplus(sym(Theta)) off-diagonal.
  Rng rng(44);
  const std::size_t c = 6;
  auto loss = [c](Tape& t, const std::vector<Var>& v) {
    Var theta = v[0], pot = v[1], mlogit = v[2];
    Var sym = scale(add(theta, transpose(theta)), 0.5);
    Tensor off(c, c, 1.0);
    for (std::size_t i = 0; i < c; ++i) off(i, i) = 0.0;
    Var w = mul(softplus(sym), t.constant(off));
    Var deg = sum_rows(w);
    Var k = sub(diag_embed(deg), w);
    Var m = add_scalar(scale(sigmoid(mlogit), 9.95), 0.05);
    Var kin = mul_scalar(add(k, t.constant(1e-3 * Tensor::identity(c))), reciprocal(m));
    Var h = add(kin, diag_embed(pot));
    GroundVars gs = ground_state(h);
    const std::size_t y[] = {2};
    Var p = square(gs.psi);
    Var py = select_cols(transpose(p), std::span<const std::size_t>(y, 1));
    return add(neg(log(py)), scale(gs.energy, 0.1));
  };
  Tensor theta = rng.normal_tensor(c, c, -1.0, 0.5);
  Tensor pot = rng.normal_tensor(1, c, 0.0, 1.0);
  Tensor ml = Tensor::scalar(0.3);
  CHECK(testutil::fd_rel_error(loss, {theta, pot, ml}, 1e-6) < 1e-4);
}

}  // TEST_SUITE
