import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfxy.errors import ParameterError
from rfxy.fields import (
    ResolventSpec, annulus_project, annulus_table, basis_1d, eigen_pairs, energy_diff_DN, exact_annulus_variance,
    field_energy, laplacian_dense, local_mass, mode_table, n_annuli, pair_increment_variance, resolvent_apply,
    sample_alpha, sample_alpha_batch, spectral_solve, sup_tail_experiment, zeta_bar_sq,
)
from rfxy.spins import SpinConfig, dirichlet_energy_bc, BoundaryCondition


def dense_solve(bc, l, lam, eps, a):
    A = laplacian_dense(bc, l) + lam * np.eye(l * l)
    return np.linalg.solve(A, eps * a.ravel()).reshape(l, l)


def exact_rational_solve(A, b):
    """Gauss-Jordan elimination in exact rationals."""
    n = len(b)
    M = [[Fraction(int(A[i][j])) for j in range(n)] + [Fraction(b[i])] for i in range(n)]
    for c in range(n):
        p = next(r for r in range(c, n) if M[r][c] != 0)
        M[c], M[p] = M[p], M[c]
        M[c] = [v / M[c][c] for v in M[c]]
        for r in range(n):
            if r != c and M[r][c] != 0:
                f = M[r][c]
                M[r] = [a - f * b for a, b in zip(M[r], M[c])]
    return [M[i][n] for i in range(n)]


# ---------------------------------------------------------------- alpha

def test_alpha_reproducible():
    assert np.array_equal(sample_alpha(7, 16).alpha, sample_alpha(7, 16).alpha)


def test_alpha_batch_matches_single():
    b = sample_alpha_batch(3, 4, 8)
    for i in range(4):
        assert np.array_equal(b[i], sample_alpha(3 + i, 8).alpha)


def test_alpha_site_keyed():
    big = sample_alpha(5, 16).alpha
    sub = sample_alpha(5, 4, origin=(3, 7)).alpha
    assert np.array_equal(big[3:7, 7:11], sub)


def test_alpha_moments():
    a = sample_alpha_batch(100, 61, 128).ravel()[:1_000_000]
    assert abs(a.mean()) <= 4 / math.sqrt(a.size)
    assert abs(a.var() - 1) <= 0.01


def test_alpha_seeds_uncorrelated():
    a, b = sample_alpha(1, 256).alpha.ravel(), sample_alpha(2, 256).alpha.ravel()
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) <= 4 / math.sqrt(a.size)


# ---------------------------------------------------------------- resolvent

def test_zero_field():
    g = resolvent_apply(ResolventSpec("D", 8, 0.1, 0.5), np.zeros((8, 8))).g
    assert not g.any()


def test_impulse_l2_against_rational_solve():
    A = laplacian_dense("D", 2) + np.eye(4)
    exact = exact_rational_solve(A, [1, 0, 0, 0])
    # frozen from the rational oracle: impulse site, two neighbours, diagonal
    assert exact == [Fraction(23, 105), Fraction(1, 21), Fraction(1, 21), Fraction(2, 105)]
    a = np.zeros((2, 2))
    a[0, 0] = 1
    g = resolvent_apply(ResolventSpec("D", 2, 1.0, 1.0), a).g
    assert np.allclose(g.ravel(), [float(v) for v in exact], atol=1e-15)


@pytest.mark.parametrize("bc", ["D", "N"])
@pytest.mark.parametrize("l", [4, 8, 16])
def test_resolvent_matches_dense(rng, bc, l):
    a = rng.standard_normal((l, l))
    fs = resolvent_apply(ResolventSpec(bc, l, 0.05, 0.3), a)
    ref = dense_solve(bc, l, 0.05, 0.3, a)
    assert np.abs(fs.g - ref).max() <= 1e-9 * np.abs(ref).max()
    assert fs.residual <= 1e-10 * 0.3 * np.abs(a).max()


def test_lambda_must_be_positive():
    with pytest.raises(ParameterError):
        ResolventSpec("N", 8, 0.0)
    with pytest.raises(ParameterError):
        zeta_bar_sq(0.0)


def test_neumann_constant_mode():
    g = resolvent_apply(ResolventSpec("N", 8, 0.25, 0.5), np.full((8, 8), 3.0)).g
    assert np.allclose(g, 0.5 * 3.0 / 0.25, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from(["D", "N"]))
def test_linearity_and_symmetry(seed, a, b, bc):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((8, 8)), r.standard_normal((8, 8))
    spec = ResolventSpec(bc, 8, 0.1, 1.0)
    gx, gy = resolvent_apply(spec, x).g, resolvent_apply(spec, y).g
    assert np.allclose(resolvent_apply(spec, a * x + b * y).g, a * gx + b * gy, atol=1e-10)
    assert float(np.sum(gx * y)) == pytest.approx(float(np.sum(x * gy)), abs=1e-10)


# ---------------------------------------------------------------- eigenpairs

@pytest.mark.parametrize("bc", ["D", "N"])
def test_eigen_residuals_l16(bc):
    spec = ResolventSpec(bc, 16, 1.0)
    A = laplacian_dense(bc, 16)
    worst = max(np.abs(A @ v.ravel() - z * v.ravel()).max() for _, z, v in eigen_pairs(spec))
    assert worst <= 1e-10


def test_zeta_at_half_pi():
    # l = 1 Dirichlet: k = pi/2 in each direction
    pairs = eigen_pairs(ResolventSpec("D", 1, 1.0))
    (k, z, _), = pairs
    assert k == pytest.approx((math.pi / 2, math.pi / 2)) and z == 4.0


def test_neumann_zero_mode():
    (k, z, v) = eigen_pairs(ResolventSpec("N", 8, 1.0))[0]
    assert k == (0.0, 0.0) and z == 0.0 and np.allclose(v, 1 / 8)


def test_bases_orthonormal():
    for bc in ("D", "N"):
        B, _, _ = basis_1d(bc, 32)
        assert np.allclose(B @ B.T, np.eye(32), atol=1e-12)


# ---------------------------------------------------------------- masses and energies

def test_local_mass_conventions(rng):
    g = rng.standard_normal((5, 5))
    mD, mN = local_mass(g, "D"), local_mass(g, "N")
    x, y = 0, 2
    nb_in = [(1, 2), (0, 1), (0, 3)]
    assert mN[x, y] == pytest.approx(sum((g[x, y] - g[p]) ** 2 for p in nb_in))
    assert mD[x, y] == pytest.approx(mN[x, y] + g[x, y] ** 2)


def test_field_energy_parseval(rng):
    a = rng.standard_normal((16, 16))
    g = spectral_solve("D", 0.2, a)
    B, _, _ = basis_1d("D", 16)
    c = B @ g @ B.T
    assert field_energy(g, "D") == pytest.approx(float(np.sum(mode_table("D", 16)[2] * c**2)), rel=1e-8)


def test_dn_terms_match_spin_energies(rng):
    # small fields behave like angles: E(g|0) equals the linearized spin energy
    a = rng.standard_normal((8, 8))
    spec = ResolventSpec("D", 8, 0.1, 1e-4)
    g = resolvent_apply(spec, a).g
    e_spin = dirichlet_energy_bc(SpinConfig(g), None, BoundaryCondition.e1())
    assert field_energy(g, "D") == pytest.approx(e_spin, rel=1e-6)
    assert energy_diff_DN(np.zeros((8, 8)), spec) == 0.0


# ---------------------------------------------------------------- annuli

def test_annuli_partition():
    for bc in ("D", "N"):
        t = annulus_table(bc, 16)
        assert t.min() >= 0 and t.max() < n_annuli(16)
    assert annulus_table("N", 16)[0, 0] == n_annuli(16) - 1


def test_annulus_sum_reproduces_field(rng):
    a = rng.standard_normal((16, 16))
    spec = ResolventSpec("N", 16, 0.1, 0.7)
    tot = sum(annulus_project(spec, a, s) for s in range(n_annuli(16)))
    assert np.allclose(tot, resolvent_apply(spec, a).g / 0.7, atol=1e-10)


def test_single_mode_lives_in_one_annulus():
    l = 16
    spec = ResolventSpec("D", l, 0.1)
    t = annulus_table("D", l)
    i, j = np.argwhere(t == 2)[0]
    B, _, _ = basis_1d("D", l)
    a = np.outer(B[i], B[j])
    for s in range(n_annuli(l)):
        nz = np.abs(annulus_project(spec, a, s)).max() > 1e-12
        assert nz == (s == 2)


def test_empty_annulus_zero_variance():
    spec = ResolventSpec("D", 16, 0.1)
    assert exact_annulus_variance(spec, n_annuli(16) - 1, (8, 8)) == 0.0
    assert pair_increment_variance(spec, 2, (3, 3), (3, 3)) == 0.0


def test_annulus_variance_monte_carlo():
    l, n = 16, 20000
    spec = ResolventSpec("D", l, 0.05)
    a = sample_alpha_batch(77, n, l)
    x, y = (8, 8), (9, 8)
    for s in range(n_annuli(l)):
        B, _, _ = basis_1d("D", l)
        sel = annulus_table("D", l) == s
        coef = np.where(sel, (B @ a @ B.T) / (mode_table("D", l)[2] + spec.lam), 0.0)
        g = B.T @ coef @ B
        for vals, exact in ((g[:, 8, 8], exact_annulus_variance(spec, s, x)),
                            (g[:, 8, 8] - g[:, 9, 8], pair_increment_variance(spec, s, x, y))):
            v = float(np.mean(vals**2))
            se = math.sqrt(2 / n) * exact
            assert abs(v - exact) <= 4 * se + 1e-15


def test_distinct_annuli_uncorrelated():
    l, n = 16, 20000
    spec = ResolventSpec("D", l, 0.05)
    a = sample_alpha_batch(5, n, l)
    g2 = np.array([annulus_project(spec, a[i], 2)[8, 8] for i in range(n)])
    g3 = np.array([annulus_project(spec, a[i], 3)[8, 8] for i in range(n)])
    cov = float(np.mean(g2 * g3))
    se = float(np.std(g2 * g3) / math.sqrt(n))
    assert abs(cov) <= 4 * se


@pytest.mark.parametrize("l", [64, 256])
def test_variance_order_of_magnitude(l):
    lam = 1e-3
    spec = ResolventSpec("D", l, lam)
    x, y = (l // 2, l // 2), (l // 2 + 1, l // 2)
    for s in range(n_annuli(l)):
        if 2.0**-s < 4 / l:
            continue
        ref = 2.0 ** (-2 * s) / (lam + 2.0 ** (-2 * s)) ** 2
        assert 1e-2 <= exact_annulus_variance(spec, s, x) / ref <= 1e2
        pref = 2.0 ** (-4 * s) / (lam + 2.0 ** (-2 * s)) ** 2
        assert 1e-2 <= pair_increment_variance(spec, s, x, y) / pref <= 1e2


# ---------------------------------------------------------------- zeta bar

def midpoint_oracle(lam, n=1000):
    h = math.pi / n
    k = (np.arange(n) + 0.5) * h
    K1, K2 = np.meshgrid(k, k, indexing="ij")
    return float(np.sum(1.0 / (K1**2 + K2**2 + lam) ** 2) * h * h)


def test_zeta_bar_against_midpoint():
    assert zeta_bar_sq(1.0) == pytest.approx(midpoint_oracle(1.0), rel=1e-6)


def test_zeta_bar_monotone_and_scaling():
    lams = 10.0 ** np.arange(-6, -1.5, 0.5)
    vals = [zeta_bar_sq(l) for l in lams]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    # calibrated once over the grid, then frozen
    prod = [l * v for l, v in zip(lams, vals)]
    assert all(0.78 <= p <= 0.79 for p in prod)


# ---------------------------------------------------------------- tails

def test_sup_tail_trivial_and_monotone():
    spec = ResolventSpec("D", 16, 0.05, 0.1)
    rows = sup_tail_experiment(spec, [0.0, 0.1, 0.2, 0.4], 1000, seed=3)
    assert rows[0]["p_hat"] == 1.0
    p = [r["p_hat"] for r in rows]
    assert all(a >= b for a, b in zip(p, p[1:]))
    for r in rows:
        assert r["ci_lo"] <= r["p_hat"] <= r["ci_hi"]


def test_sup_tail_needs_samples():
    with pytest.raises(ParameterError):
        sup_tail_experiment(ResolventSpec("D", 8, 0.1), [1], 10)
