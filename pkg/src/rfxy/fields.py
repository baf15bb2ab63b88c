"""Random field alpha, massive resolvent fields g^{lambda,D/N} and spectral analysis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import ParameterError

GENERATOR_ID = "splitmix64-boxmuller-v1"

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(z):
    # vectorized splitmix64 finalizer; uint64 arithmetic wraps
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _site_uniforms(seed: int, xs, ys, stream: int):
    with np.errstate(over="ignore"):
        key = _splitmix64(np.asarray(seed, dtype=np.int64).astype(np.uint64))
        h = _splitmix64(key ^ np.uint64(stream))
        h = _splitmix64(h ^ xs.astype(np.int64).astype(np.uint64))
        h = _splitmix64(h ^ (ys.astype(np.int64).astype(np.uint64) * np.uint64(0xD6E8FEB86659FD93)))
    # 53-bit mantissa in (0, 1)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)


def site_normals(seed: int, xs, ys) -> np.ndarray:
    """Standard normals keyed by (seed, site); the value at a site never
    depends on which other sites are requested."""
    u1 = _site_uniforms(seed, xs, ys, 1)
    u2 = _site_uniforms(seed, xs, ys, 2)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@dataclass
class RandomField:
    alpha: np.ndarray
    seed: int
    origin: tuple = (0, 0)
    generator: str = GENERATOR_ID


def sample_alpha(seed: int, l: int, origin=(0, 0), l_y: int | None = None) -> RandomField:
    """i.i.d. N(0,1) field on the l x l square anchored at ``origin``."""
    if l < 1:
        raise ParameterError("l must be >= 1")
    l_y = l if l_y is None else l_y
    xs, ys = np.meshgrid(np.arange(l) + origin[0], np.arange(l_y) + origin[1], indexing="ij")
    return RandomField(site_normals(seed, xs, ys), int(seed), tuple(origin))


def sample_alpha_batch(seed: int, n: int, l: int) -> np.ndarray:
    """n independent l x l fields; entry i equals sample_alpha(seed + i, l)."""
    xs, ys = np.meshgrid(np.arange(l), np.arange(l), indexing="ij")
    seeds = (seed + np.arange(n, dtype=np.int64))[:, None, None]
    return site_normals(seeds, xs[None], ys[None])


@dataclass(frozen=True)
class ResolventSpec:
    bc: str
    l: int
    lam: float
    epsilon: float = 1.0

    def __post_init__(self):
        if self.bc not in ("D", "N"):
            raise ParameterError("bc must be 'D' or 'N'")
        if self.l < 1 or (self.l & (self.l - 1)):
            raise ParameterError("l must be a power of two")
        if not self.lam > 0:
            raise ParameterError("lambda must be positive")


@dataclass
class FieldSample:
    g: np.ndarray
    m: np.ndarray
    spec: ResolventSpec
    source: RandomField | None = None
    residual: float = 0.0

    def metadata(self) -> dict:
        src = self.source
        return {
            "bc": self.spec.bc,
            "l": self.spec.l,
            "lambda": self.spec.lam,
            "epsilon": self.spec.epsilon,
            "seed": None if src is None else src.seed,
            "origin": None if src is None else list(src.origin),
            "generator": None if src is None else src.generator,
            "residual": self.residual,
        }

    def save(self, stem) -> None:
        np.asarray(self.g, dtype="<f8").tofile(f"{stem}.g.f64")
        np.asarray(self.m, dtype="<f8").tofile(f"{stem}.m.f64")
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.metadata(), fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------- bases

@lru_cache(maxsize=64)
def basis_1d(bc: str, l: int):
    """Orthonormal 1D eigenbasis of the Dirichlet/Neumann path Laplacian.

    Returns (B, k, mu): rows of B are eigenvectors, k the wave numbers and
    mu = 4 sin^2(k/2) the eigenvalues.
    """
    x = np.arange(l)
    if bc == "D":
        j, n = np.arange(1, l + 1), l + 1
        k = np.pi * j / n
        B = np.sqrt(2.0 / n) * np.sin(np.outer(k, x + 1))
    else:
        j, n = np.arange(l), l
        k = np.pi * j / n
        B = np.sqrt(2.0 / l) * np.cos(np.outer(k, x + 0.5))
        B[0] = np.sqrt(1.0 / l)
    # 4 sin^2(k/2) near k = 0; 2 - 2 sin(pi/2 - k) elsewhere, exact at k = pi/2
    d = np.pi * (n - 2 * j) / (2 * n)
    mu = np.where(k < np.pi / 3, 4.0 * np.sin(k / 2) ** 2, 2.0 - 2.0 * np.sin(d))
    B.setflags(write=False)
    return B, k, mu


@lru_cache(maxsize=64)
def mode_table(bc: str, l: int):
    B, k, mu = basis_1d(bc, l)
    K1, K2 = np.meshgrid(k, k, indexing="ij")
    zeta = mu[:, None] + mu[None, :]
    return K1, K2, zeta


def laplacian_dense(bc: str, l: int) -> np.ndarray:
    """Explicit (l^2 x l^2) matrix of -Delta^{bc} on the l x l square (oracle use)."""
    n = l * l
    A = np.zeros((n, n))
    for x in range(l):
        for y in range(l):
            i = x * l + y
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                u, v = x + dx, y + dy
                inside = 0 <= u < l and 0 <= v < l
                if inside:
                    A[i, i] += 1
                    A[i, u * l + v] -= 1
                elif bc == "D":
                    A[i, i] += 1
    return A


def spectral_solve(bc: str, lam: float, rhs: np.ndarray) -> np.ndarray:
    """(-Delta^{bc} + lam)^{-1} rhs for rhs of shape (..., l, l)."""
    l = rhs.shape[-1]
    B, _, _ = basis_1d(bc, l)
    _, _, zeta = mode_table(bc, l)
    coef = B @ rhs @ B.T
    coef = coef / (zeta + lam)
    return B.T @ coef @ B


def local_mass(g: np.ndarray, bc: str) -> np.ndarray:
    """m_x = sum_{y~x} (g_x - g_y)^2; D zero-extends, N uses internal neighbours."""
    pad = np.pad(g, [(0, 0)] * (g.ndim - 2) + [(1, 1), (1, 1)])
    c = pad[..., 1:-1, 1:-1]
    nbrs = (pad[..., :-2, 1:-1], pad[..., 2:, 1:-1], pad[..., 1:-1, :-2], pad[..., 1:-1, 2:])
    if bc == "D":
        return sum((c - nb) ** 2 for nb in nbrs)
    l1, l2 = g.shape[-2:]
    ins = np.pad(np.ones((l1, l2), bool), 1)
    ic = ins[1:-1, 1:-1]
    masks = (ins[:-2, 1:-1], ins[2:, 1:-1], ins[1:-1, :-2], ins[1:-1, 2:])
    return sum(np.where(mk & ic, (c - nb) ** 2, 0.0) for nb, mk in zip(nbrs, masks))


def edge_differences(g: np.ndarray, bc: str):
    """Per-edge differences of g; D includes the zero-extension edges."""
    if bc == "D":
        p = np.pad(g, [(0, 0)] * (g.ndim - 2) + [(1, 1), (1, 1)])
        dx = p[..., 1:, 1:-1] - p[..., :-1, 1:-1]
        dy = p[..., 1:-1, 1:] - p[..., 1:-1, :-1]
    else:
        dx = g[..., 1:, :] - g[..., :-1, :]
        dy = g[..., :, 1:] - g[..., :, :-1]
    return dx, dy


def field_energy(g: np.ndarray, bc: str) -> np.ndarray:
    """E_Q(g|0) for D (boundary edges included) or E_Q(g) for N."""
    dx, dy = edge_differences(g, bc)
    return (dx**2).sum(axis=(-2, -1)) + (dy**2).sum(axis=(-2, -1))


def grad_sup(g: np.ndarray, bc: str) -> np.ndarray:
    dx, dy = edge_differences(g, bc)
    a = np.abs(dx).max(axis=(-2, -1)) if dx.size else 0.0
    b = np.abs(dy).max(axis=(-2, -1)) if dy.size else 0.0
    return np.maximum(a, b)


def _apply_operator(bc: str, lam: float, g: np.ndarray) -> np.ndarray:
    pad = np.pad(g, 1)
    ins = np.pad(np.ones(g.shape, bool), 1)
    out = lam * g.copy()
    for sl in (
        (slice(0, -2), slice(1, -1)),
        (slice(2, None), slice(1, -1)),
        (slice(1, -1), slice(0, -2)),
        (slice(1, -1), slice(2, None)),
    ):
        nb = pad[sl]
        inside = ins[sl]
        if bc == "D":
            out += g - nb
        else:
            out += np.where(inside, g - nb, 0.0)
    return out


def resolvent_apply(spec: ResolventSpec, alpha) -> FieldSample:
    """g = eps (-Delta^{bc} + lambda)^{-1} alpha via separable eigen-transforms."""
    src = alpha if isinstance(alpha, RandomField) else None
    a = np.asarray(getattr(alpha, "alpha", alpha), dtype=float)
    if a.shape != (spec.l, spec.l):
        raise ParameterError(f"alpha shape {a.shape} does not match l={spec.l}")
    g = spec.epsilon * spectral_solve(spec.bc, spec.lam, a)
    res = float(np.abs(_apply_operator(spec.bc, spec.lam, g) - spec.epsilon * a).max())
    return FieldSample(g, local_mass(g, spec.bc), spec, src, res)


def eigen_pairs(spec: ResolventSpec):
    """List of ((k1, k2), zeta_k, v) with v an orthonormal l x l eigenvector."""
    B, k, mu = basis_1d(spec.bc, spec.l)
    out = []
    for i in range(spec.l):
        for j in range(spec.l):
            out.append(((float(k[i]), float(k[j])), float(mu[i] + mu[j]), np.outer(B[i], B[j])))
    return out


def n_annuli(l: int) -> int:
    return int(math.ceil(math.log2(l + 1))) + 1


@lru_cache(maxsize=64)
def annulus_table(bc: str, l: int) -> np.ndarray:
    """Annulus index s of every mode: ||k|| in [pi/2^{s+1}, pi/2^s), s=0 open above."""
    K1, K2, _ = mode_table(bc, l)
    r = np.hypot(K1, K2)
    smax = n_annuli(l) - 1
    s = np.full(r.shape, smax, dtype=int)
    nz = r > 0
    s[nz] = np.ceil(np.log2(np.pi / r[nz])).astype(int) - 1
    s = np.clip(s, 0, smax)
    s.setflags(write=False)
    return s


def _check_s(spec, s):
    if not 0 <= s < n_annuli(spec.l):
        raise ParameterError(f"annulus index {s} out of range")


def annulus_project(spec: ResolventSpec, alpha, s: int) -> np.ndarray:
    """(-Delta+lambda)^{-1} alpha restricted to modes in A_s (no eps factor)."""
    _check_s(spec, s)
    a = np.asarray(getattr(alpha, "alpha", alpha), dtype=float)
    B, _, _ = basis_1d(spec.bc, spec.l)
    _, _, zeta = mode_table(spec.bc, spec.l)
    sel = annulus_table(spec.bc, spec.l) == s
    coef = B @ a @ B.T
    coef = np.where(sel, coef / (zeta + spec.lam), 0.0)
    return B.T @ coef @ B


def exact_annulus_variance(spec: ResolventSpec, s: int, x) -> float:
    _check_s(spec, s)
    B, _, _ = basis_1d(spec.bc, spec.l)
    _, _, zeta = mode_table(spec.bc, spec.l)
    sel = annulus_table(spec.bc, spec.l) == s
    v = np.outer(B[:, x[0]], B[:, x[1]])
    return float(np.sum(np.where(sel, v**2 / (zeta + spec.lam) ** 2, 0.0)))


def pair_increment_variance(spec: ResolventSpec, s: int, x, y) -> float:
    _check_s(spec, s)
    B, _, _ = basis_1d(spec.bc, spec.l)
    _, _, zeta = mode_table(spec.bc, spec.l)
    sel = annulus_table(spec.bc, spec.l) == s
    d = np.outer(B[:, x[0]], B[:, x[1]]) - np.outer(B[:, y[0]], B[:, y[1]])
    return float(np.sum(np.where(sel, d**2 / (zeta + spec.lam) ** 2, 0.0)))


def zeta_bar_sq(lam: float) -> float:
    """Integral of (|k|^2 + lam)^{-2} over [0, pi]^2.

    The inner integral is done in closed form; the outer one by adaptive
    quadrature.
    """
    if not lam > 0:
        raise ParameterError("lambda must be positive")

    def inner(k1):
        a = k1 * k1 + lam
        t = np.pi
        return t / (2 * a * (a + t * t)) + math.atan(t / math.sqrt(a)) / (2 * a**1.5)

    pts = [p for p in (math.sqrt(lam), 10 * math.sqrt(lam)) if p < np.pi]
    val, _ = integrate.quad(inner, 0.0, np.pi, points=pts or None, epsabs=0.0, epsrel=1e-12, limit=500)
    return float(val)


def energy_diff_DN(alpha, spec: ResolventSpec) -> float:
    """E(g^D | 0) - E(g^N) for fields generated from the same alpha."""
    a = np.asarray(getattr(alpha, "alpha", alpha), dtype=float)
    gd = spec.epsilon * spectral_solve("D", spec.lam, a)
    gn = spec.epsilon * spectral_solve("N", spec.lam, a)
    return float(field_energy(gd, "D") - field_energy(gn, "N"))


def energy_diff_DN_batch(alpha: np.ndarray, lam: float, eps: float) -> np.ndarray:
    gd = eps * spectral_solve("D", lam, alpha)
    gn = eps * spectral_solve("N", lam, alpha)
    return field_energy(gd, "D") - field_energy(gn, "N")


def wilson_interval(count: int, total: int, alpha: float = 0.05):
    from statsmodels.stats.proportion import proportion_confint

    lo, hi = proportion_confint(count, total, alpha=alpha, method="wilson")
    return float(lo), float(hi)


def sup_tail_experiment(spec: ResolventSpec, M_grid, samples: int, seed: int = 0, chunk: int = 256):
    """Empirical P(||g||_inf >= M eps zeta_bar_2) with Wilson intervals.

    Returns a list of row dicts with keys M, count, total, p_hat, ci_lo, ci_hi.
    """
    if samples < 1000:
        raise ParameterError("sup_tail_experiment needs at least 10^3 samples")
    zb = math.sqrt(zeta_bar_sq(spec.lam))
    sups = np.empty(samples)
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        a = sample_alpha_batch(seed + start, n, spec.l)
        g = spec.epsilon * spectral_solve(spec.bc, spec.lam, a)
        sups[start : start + n] = np.abs(g).max(axis=(1, 2))
    rows = []
    for M in M_grid:
        c = int(np.sum(sups >= M * spec.epsilon * zb))
        lo, hi = wilson_interval(c, samples)
        rows.append({"M": float(M), "count": c, "total": samples, "p_hat": c / samples, "ci_lo": lo, "ci_hi": hi})
    return rows


def write_tail_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "count", "total", "p_hat", "ci_lo", "ci_hi"])
        for r in rows:
            w.writerow([repr(float(r["M"])), r["count"], r["total"], format(r["p_hat"], ".17g"),
                        format(r["ci_lo"], ".17g"), format(r["ci_hi"], ".17g")])
