"""Change of variables, the K functional, its maximizer and the operator L_C."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .errors import NumericError, ParameterError

WINDOW = np.pi / 5
_DIRS = ((1, 0), (-1, 0), (0, 1), (0, -1))


# ------------------------------------------------------------ change of variables

def cov_forward(theta, g):
    """phi = theta - cos(theta) g, pointwise."""
    theta = np.asarray(theta, dtype=float)
    return theta - np.cos(theta) * np.asarray(g, dtype=float)


def cov_inverse(phi, g, tol: float = 1e-12, max_iter: int = 100):
    """Solve theta - cos(theta) g = phi per site (safeguarded Newton).

    The root lies in [phi - |g|, phi + |g|] and is unique when |g| < 1.
    """
    phi = np.asarray(phi, dtype=float)
    g = np.broadcast_to(np.asarray(g, dtype=float), phi.shape)
    if g.size and np.max(np.abs(g)) >= 1:
        raise ParameterError("cov_inverse needs ||g||_inf < 1")
    lo, hi = phi - np.abs(g), phi + np.abs(g)
    th = phi + np.cos(phi) * g
    for _ in range(max_iter):
        f = th - np.cos(th) * g - phi
        if np.all(np.abs(f) <= tol):
            return th
        lo = np.where(f < 0, th, lo)
        hi = np.where(f > 0, th, hi)
        step = th - f / (1 + np.sin(th) * g)
        bad = (step <= lo) | (step >= hi)
        th = np.where(bad, 0.5 * (lo + hi), step)
    f = th - np.cos(th) * g - phi
    if np.any(np.abs(f) > tol):
        raise NumericError("cov_inverse did not converge", {"max_residual": float(np.abs(f).max())})
    return th


# ------------------------------------------------------------ K functional

@dataclass
class KSpec:
    """Region mask on a frame, masses m, boundary angles tau.

    ``tau`` holds angles on frame sites outside R (NaN = free). Neighbours
    off the frame take ``pad`` (None = free); pad = 0 gives the e1 penalty.
    """

    mask: np.ndarray
    m: np.ndarray
    tau: np.ndarray
    pad: float | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.m = np.broadcast_to(np.asarray(self.m, dtype=float), self.mask.shape).copy()
        self.tau = np.broadcast_to(np.asarray(self.tau, dtype=float), self.mask.shape).copy()
        if np.any(self.m[self.mask] < 0):
            raise ParameterError("masses must be non-negative")

    @cached_property
    def graph(self):
        """(sites, internal edges (i, j), boundary edges (i, value))."""
        n, w = self.mask.shape
        idx = -np.ones(self.mask.shape, dtype=np.int64)
        sites = np.argwhere(self.mask)
        idx[self.mask] = np.arange(len(sites))
        ii, jj, bi, bv = [], [], [], []
        for dx, dy in _DIRS:
            x, y = sites[:, 0] + dx, sites[:, 1] + dy
            on = (x >= 0) & (x < n) & (y >= 0) & (y < w)
            src = np.arange(len(sites))
            if self.pad is not None:
                bi.append(src[~on])
                bv.append(np.full((~on).sum(), float(self.pad)))
            xs, ys, s = x[on], y[on], src[on]
            inR = self.mask[xs, ys]
            if dx + dy > 0:
                ii.append(s[inR])
                jj.append(idx[xs[inR], ys[inR]])
            t = self.tau[xs[~inR], ys[~inR]]
            keep = ~np.isnan(t)
            bi.append(s[~inR][keep])
            bv.append(t[keep])
        cat = lambda a, dt: np.concatenate(a).astype(dt) if a else np.zeros(0, dt)
        return sites, cat(ii, np.int64), cat(jj, np.int64), cat(bi, np.int64), cat(bv, float)

    @property
    def n(self) -> int:
        return len(self.graph[0])

    def tau_sup(self) -> float:
        bv = self.graph[4]
        return float(np.abs(bv).max()) if bv.size else 0.0

    def masses(self) -> np.ndarray:
        return self.m[self.mask]

    def to_frame(self, v: np.ndarray) -> np.ndarray:
        out = np.full(self.mask.shape, np.nan)
        out[self.mask] = v
        return out


def _vec(phi, spec: KSpec) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    return phi[spec.mask] if phi.shape == spec.mask.shape else phi


def k_energy(phi, spec: KSpec) -> float:
    """-K_R(phi | tau): edge cosines plus the quarter mass term."""
    v = _vec(phi, spec)
    _, ii, jj, bi, bv = spec.graph
    e = np.sum(np.cos(v[ii] - v[jj]) - 1) + np.sum(np.cos(v[bi] - bv) - 1)
    return float(e + 0.25 * np.sum(spec.masses() * np.cos(v) ** 2))


def k_gradient(phi, spec: KSpec) -> np.ndarray:
    """Gradient of -K with respect to the angles on R."""
    v = _vec(phi, spec)
    _, ii, jj, bi, bv = spec.graph
    g = -0.5 * spec.masses() * np.sin(v) * np.cos(v)
    s = np.sin(v[ii] - v[jj])
    np.add.at(g, ii, -s)
    np.add.at(g, jj, s)
    np.add.at(g, bi, -np.sin(v[bi] - bv))
    return g


def k_hessian(phi, spec: KSpec, dense: bool = False):
    """Hessian of K (= minus the Hessian of -K); PSD inside the window."""
    v = _vec(phi, spec)
    _, ii, jj, bi, bv = spec.graph
    n = len(v)
    d = 0.5 * spec.masses() * np.cos(2 * v)
    c = np.cos(v[ii] - v[jj])
    np.add.at(d, ii, c)
    np.add.at(d, jj, c)
    np.add.at(d, bi, np.cos(v[bi] - bv))
    H = sparse.coo_matrix(
        (np.concatenate([d, -c, -c]), (np.concatenate([np.arange(n), ii, jj]), np.concatenate([np.arange(n), jj, ii]))),
        shape=(n, n),
    ).tocsr()
    return H.toarray() if dense else H


def _solve(H, r):
    n = H.shape[0]
    if n <= 400:
        A = H.toarray() if sparse.issparse(H) else H
        A = A + 1e-14 * np.eye(n)
        return np.linalg.solve(A, r)
    return splinalg.spsolve((H + 1e-14 * sparse.identity(n)).tocsc(), r)


def harmonic_extension(spec: KSpec) -> np.ndarray:
    """Discrete harmonic extension of the boundary angles into R."""
    _, ii, jj, bi, bv = spec.graph
    n = spec.n
    d = np.zeros(n)
    np.add.at(d, ii, 1.0)
    np.add.at(d, jj, 1.0)
    np.add.at(d, bi, 1.0)
    rhs = np.zeros(n)
    np.add.at(rhs, bi, bv)
    one = np.ones(len(ii))
    A = sparse.coo_matrix(
        (np.concatenate([d, -one, -one]), (np.concatenate([np.arange(n), ii, jj]), np.concatenate([np.arange(n), jj, ii]))),
        shape=(n, n),
    ).tocsr()
    return _solve(A, rhs)


@dataclass
class AngleField:
    """Angles on the sites of a region (frame array, NaN off the region)."""

    phi: np.ndarray
    mask: np.ndarray
    iterations: int = 0
    grad_norm: float = 0.0

    @property
    def values(self) -> np.ndarray:
        return self.phi[self.mask]


def maximize_k(spec: KSpec, init="harmonic", tol: float = 1e-10, max_iter: int = 200) -> AngleField:
    """Unique maximizer of -K_R(.|tau) by projected damped Newton.

    ``init`` is "harmonic", "zero", an array on R, or ("random", seed).
    """
    T = spec.tau_sup()
    if T > WINDOW + 1e-12:
        raise ParameterError(f"boundary angles exceed pi/5 (max {T:.6g})")
    n = spec.n
    if n == 0:
        return AngleField(spec.to_frame(np.zeros(0)), spec.mask)
    if isinstance(init, str) and init == "harmonic":
        v = harmonic_extension(spec)
    elif isinstance(init, str) and init == "zero":
        v = np.zeros(n)
    elif isinstance(init, tuple) and init[0] == "random":
        v = np.random.default_rng(init[1]).uniform(-T, T, n)
    else:
        v = _vec(init, spec).astype(float).copy()
    v = np.clip(v, -T, T)
    scale = 1.0 + float(spec.masses().sum())
    f = -k_energy(v, spec)
    for it in range(max_iter):
        g = -k_gradient(v, spec)
        gn = float(np.abs(g).max())
        if gn <= tol * scale:
            return AngleField(spec.to_frame(v), spec.mask, it, gn)
        d = -_solve(k_hessian(v, spec), g)
        if not np.all(np.isfinite(d)) or d @ g >= 0:
            d = -g
        t = 1.0
        # near the optimum the predicted decrease drops below round-off in f
        tiny = abs(g @ d) < 1e-13 * (1.0 + abs(f))
        while True:
            w = np.clip(v + t * d, -T, T)
            fw = -k_energy(w, spec)
            if tiny or fw <= f + 1e-4 * g @ (w - v) or t < 1e-12:
                break
            t *= 0.5
        if np.array_equal(w, v):
            break
        v, f = w, fw
    g = -k_gradient(v, spec)
    gn = float(np.abs(g).max())
    if gn <= tol * scale * 100:
        return AngleField(spec.to_frame(v), spec.mask, max_iter, gn)
    raise NumericError("maximize_k did not converge", {"grad_inf": gn, "n": n, "tau_sup": T})


# ------------------------------------------------------------ elliptic operator

@dataclass
class EllipticOp:
    spec: KSpec
    C_int: np.ndarray  # per internal edge
    C_bnd: np.ndarray  # per boundary edge
    V: np.ndarray  # per site


def _check_window(v):
    if v.size and np.abs(v).max() > WINDOW + 1e-12:
        raise ParameterError("angles outside the ellipticity window [-pi/5, pi/5]")


def assemble_elliptic(nu, spec: KSpec) -> EllipticOp:
    """Conductances sin(u)/u and potential sin(nu)cos(nu) m/(2 nu) with their limits."""
    v = _vec(nu, spec)
    _check_window(v)
    _, ii, jj, bi, bv = spec.graph
    _check_window(bv)
    # np.sinc(x) = sin(pi x)/(pi x) handles the removable singularity
    C_int = np.sinc((v[ii] - v[jj]) / np.pi)
    C_bnd = np.sinc((v[bi] - bv) / np.pi)
    V = 0.5 * spec.masses() * np.sinc(2 * v / np.pi)
    return EllipticOp(spec, C_int, C_bnd, V)


def apply_elliptic(op: EllipticOp, f, boundary=None) -> np.ndarray:
    """(-L_C f)_x = sum_y C_xy (f_x - f_y) + V_x f_x, boundary values tau by default."""
    spec = op.spec
    f = _vec(f, spec)
    _, ii, jj, bi, bv = spec.graph
    bvals = bv if boundary is None else boundary
    out = op.V * f
    fl = op.C_int * (f[ii] - f[jj])
    np.add.at(out, ii, fl)
    np.add.at(out, jj, -fl)
    np.add.at(out, bi, op.C_bnd * (f[bi] - bvals))
    return out


def residual(nu, op: EllipticOp) -> float:
    return float(np.abs(apply_elliptic(op, nu)).max()) if op.V.size else 0.0


def solve_elliptic(op: EllipticOp) -> np.ndarray:
    """Solve -L_C psi = 0 in R with the boundary data of the spec."""
    spec = op.spec
    _, ii, jj, bi, bv = spec.graph
    n = spec.n
    d = op.V.copy()
    np.add.at(d, ii, op.C_int)
    np.add.at(d, jj, op.C_int)
    np.add.at(d, bi, op.C_bnd)
    rhs = np.zeros(n)
    np.add.at(rhs, bi, op.C_bnd * bv)
    A = sparse.coo_matrix(
        (np.concatenate([d, -op.C_int, -op.C_int]), (np.concatenate([np.arange(n), ii, jj]), np.concatenate([np.arange(n), jj, ii]))),
        shape=(n, n),
    ).tocsr()
    return _solve(A, rhs)


# ------------------------------------------------------------ decomposition audit

COV_K = 1.0  # calibrated once on 200 random boxes (max observed ratio 0.52), then frozen


def cov_decomposition(theta, R, tau, alpha, eps: float, g, m, lam: float = 0.0) -> dict:
    """Pieces of the change-of-variables identity on a region of a frame.

    theta, tau, alpha, g and m live on the same frame; R is a boolean mask,
    tau holds angles outside R (NaN = free) and g vanishes off R. Returns -H,
    -K(theta'), the boundary term sum [g_x - g_y] sin(tau_y) over boundary
    edges (g_y = 0 outside R), the remainder Err = -H - (-K) - boundary and
    the reference scale ||g|| (E(sigma|tau) + E(g|0) + lam |R|).
    """
    theta = np.asarray(theta, dtype=float)
    R = np.asarray(R, dtype=bool)
    tp = cov_forward(theta, g)
    spec = KSpec(R, m, tau)
    negK = k_energy(tp, spec)
    _, ii, jj, bi, bv = spec.graph
    v = theta[R]
    negH = float(np.sum(np.cos(v[ii] - v[jj]) - 1) + np.sum(np.cos(v[bi] - bv) - 1))
    negH += eps * float(np.sum(np.asarray(alpha)[R] * np.sin(v)))
    gv = np.asarray(g)[R]
    bterm = float(np.sum(gv[bi] * np.sin(bv)))
    E_sig = float(np.sum(2 - 2 * np.cos(v[ii] - v[jj])) + np.sum(2 - 2 * np.cos(v[bi] - bv)))
    E_g = float(np.sum((gv[ii] - gv[jj]) ** 2) + np.sum(gv[bi] ** 2))
    gsup = float(np.abs(gv).max()) if gv.size else 0.0
    return {
        "negH": negH,
        "negK": negK,
        "boundary": bterm,
        "err": negH - negK - bterm,
        "g_sup": gsup,
        "E_sigma": E_sig,
        "E_g": E_g,
        "scale": gsup * (E_sig + E_g + lam * int(R.sum())),
    }
