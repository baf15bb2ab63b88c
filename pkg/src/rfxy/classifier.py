"""Clean/dirty boxes (C1)-(C6), F-functions, controlled/regular regions, dirty region."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, signal

from .coarse import disk_footprint
from .errors import DomainError, ScaleError
from .fields import FieldSample, ResolventSpec, field_energy, grad_sup, local_mass, spectral_solve
from .lattice import Region, block_components, blocks_region, closed_hull, is_measurable, thicken
from .params import CleanConstants


# ------------------------------------------------------------------ A event

def _A_window(L0: int):
    r_lo = math.ceil(math.sqrt(L0))
    r_hi = math.floor(L0**0.75)
    return r_lo, r_hi


def _A_event_batch(m: np.ndarray, L0: int, A: float, eps: float, params) -> np.ndarray:
    """Vectorized event over a batch of boxes m[..., L0, L0]; vacuous when no x qualifies."""
    lead = m.shape[:-2]
    mm = m.reshape((-1, L0, L0))
    i = np.arange(L0)
    di = np.minimum(i + 1, L0 - i)
    dist = np.minimum(di[:, None], di[None, :])
    xsel = dist >= L0**0.75
    ok = np.ones(mm.shape[0], dtype=bool)
    if not xsel.any():
        return ok.reshape(lead)
    r_lo, r_hi = _A_window(L0)
    for r in range(r_lo, r_hi + 1):
        disk = disk_footprint(r).astype(float)
        S = signal.fftconvolve(mm, disk[None], mode="same", axes=(1, 2))
        lhs = S[:, xsel] / (eps**2 * r * r)
        ok &= (lhs >= A * params.log(r) - 1e-12).all(axis=1)
    return ok.reshape(lead)


def check_A_event(field: FieldSample, A: float, params) -> bool:
    """Event A_Q on a single box: disk-averaged local mass is not too small."""
    L0 = field.spec.l
    if L0 < 16:
        raise ScaleError("A-event needs L0 >= 16 (no admissible centre sites below)")
    return bool(_A_event_batch(field.m[None], L0, A, field.spec.epsilon, params)[0])


# ------------------------------------------------------------- per-Q' flags

def _qprime_stats(gD, mD, gN, alpha, L0, consts, params):
    """Flags (C1)-(C6) and statistics for a batch of overlapping squares Q'."""
    eps, le = params.epsilon, params.logeps
    lam = params.lam
    C, c = consts.C_big, consts.c_small
    area = L0 * L0
    st = {}
    gsupD, gsupN = np.abs(gD).max(axis=(-2, -1)), np.abs(gN).max(axis=(-2, -1))
    grD, grN = grad_sup(gD, "D"), grad_sup(gN, "N") if L0 > 1 else np.zeros(gN.shape[:-2])
    eD, eN = field_energy(gD, "D"), field_energy(gN, "N")
    amax = np.abs(alpha).max(axis=(-2, -1))
    st["g_sup"] = np.maximum(gsupD, gsupN)
    st["grad_sup"] = np.maximum(grD, grN)
    st["grad2_max"] = np.maximum(eD, eN) / area
    st["grad2_min"] = np.minimum(eD, eN) / area
    st["alpha_sup"] = amax
    st["dn_diff"] = np.abs(eN - eD)
    st["l2_max"] = np.maximum((gD**2).sum(axis=(-2, -1)), (gN**2).sum(axis=(-2, -1))) / area
    if L0 >= 16:
        c1 = _A_event_batch(mD, L0, consts.A, eps, params)
        vac = False
    else:
        c1 = np.ones(gD.shape[:-2], dtype=bool)
        vac = True
    c2 = st["g_sup"] <= consts.C_sup * eps * lam**-0.5 * le**params.eta
    c3 = st["grad_sup"] <= C * eps * le
    c4 = (st["grad2_min"] >= c * eps**2 * le) & (st["grad2_max"] <= C * eps**2 * le)
    c5 = amax <= C * le
    logL0 = params.log(L0) if L0 > 1 else 0.0
    if logL0 > 0:
        c6 = st["dn_diff"] <= eN / logL0**0.25
    else:
        # log 1 = 0: the bound is infinite, so the condition is vacuous
        c6 = np.ones(gD.shape[:-2], dtype=bool)
    flags = {"c1": c1, "c2": c2, "c3": c3, "c4": c4, "c5": c5, "c6": c6}
    return flags, st, vac


@dataclass
class BoxReport:
    c1: bool
    c2: bool
    c3: bool
    c4: bool
    c5: bool
    c6: bool
    xi: int
    stats: dict = field(default_factory=dict)
    c1_vacuous: bool = False

    def to_dict(self):
        return asdict(self)


def classify_box(samples, consts: CleanConstants, params) -> BoxReport:
    """Classify one box from the samples of all overlapping Q'.

    ``samples`` is a list of (FieldSample D, FieldSample N, alpha on Q').
    """
    if not samples:
        raise DomainError("no overlapping-square samples supplied")
    L0 = samples[0][0].spec.l
    gD = np.stack([s[0].g for s in samples])
    mD = np.stack([s[0].m for s in samples])
    gN = np.stack([s[1].g for s in samples])
    al = np.stack([np.asarray(s[2]) for s in samples])
    flags, st, vac = _qprime_stats(gD, mD, gN, al, L0, consts, params)
    f = {k: bool(v.all()) for k, v in flags.items()}
    stats = {
        "g_sup": float(st["g_sup"].max()),
        "grad_sup": float(st["grad_sup"].max()),
        "grad2_per_site": float(st["grad2_max"].max()),
        "alpha_sup": float(st["alpha_sup"].max()),
        "dn_diff": float(st["dn_diff"].max()),
    }
    return BoxReport(**f, xi=int(all(f.values())), stats=stats, c1_vacuous=vac)


def f_functions_from_samples(samples, L0):
    """(F, F_grad, F_inf) for one box from its overlapping samples."""
    F = max(float(max((s[0].g ** 2).sum(), (s[1].g ** 2).sum())) / L0**2 for s in samples)
    Fg = max(float(max(field_energy(s[0].g, "D"), field_energy(s[1].g, "N"))) / L0**2 for s in samples)
    Fi = max(float(np.abs(s[2]).max()) for s in samples)
    return F, Fg, Fi


# ------------------------------------------------------------ field provider

@dataclass
class ClassGrid:
    """Per-box classification over the aligned L0-grid of the domain."""

    L0: int
    flags: dict  # name -> bool array (nb, nb)
    xi: np.ndarray
    F: np.ndarray
    F_grad: np.ndarray
    F_inf: np.ndarray
    c1_vacuous: bool

    def dirty_fraction(self) -> float:
        return float(1.0 - self.xi.mean())


class FieldProvider:
    """Fields g^{lambda,D/N} on every L0-box of a square domain, from one global alpha."""

    def __init__(self, alpha: np.ndarray, params, consts: CleanConstants | None = None):
        self.alpha = np.asarray(getattr(alpha, "alpha", alpha), dtype=float)
        if self.alpha.ndim != 2 or self.alpha.shape[0] != self.alpha.shape[1]:
            raise DomainError("alpha must be a square grid")
        self.N = self.alpha.shape[0]
        self.params = params
        self.consts = consts or CleanConstants()
        self._shift = {}
        self._grid = {}

    def _check_L0(self, L0):
        if L0 < 1 or (L0 & (L0 - 1)):
            raise ScaleError(f"box side {L0} must be a power of two")
        if self.N % L0:
            raise ScaleError(f"domain side {self.N} is not a multiple of {L0}")

    def shifts(self, L0):
        h = L0 // 2
        return [(0, 0)] if h == 0 else [(0, 0), (0, h), (h, 0), (h, h)]

    def shifted(self, L0: int, sx: int, sy: int) -> dict:
        """Batch data for boxes anchored at (sx + L0 i, sy + L0 j) inside the domain."""
        key = (L0, sx, sy)
        if key in self._shift:
            return self._shift[key]
        self._check_L0(L0)
        p = self.params
        nx, ny = (self.N - sx) // L0, (self.N - sy) // L0
        a = self.alpha[sx : sx + nx * L0, sy : sy + ny * L0]
        a = a.reshape(nx, L0, ny, L0).transpose(0, 2, 1, 3)
        gD = p.epsilon * spectral_solve("D", p.lam, a)
        gN = p.epsilon * spectral_solve("N", p.lam, a)
        d = {"alpha": a, "gD": gD, "gN": gN, "mD": local_mass(gD, "D"), "nx": nx, "ny": ny}
        self._shift[key] = d
        return d

    def box_field(self, anchor, L0: int, bc: str = "D") -> FieldSample:
        h = max(L0 // 2, 1)
        sx, sy = anchor[0] % L0, anchor[1] % L0
        if sx % h or sy % h:
            raise DomainError(f"anchor {anchor} not on the half-shifted {L0}-grid")
        d = self.shifted(L0, sx, sy)
        i, j = (anchor[0] - sx) // L0, (anchor[1] - sy) // L0
        if not (0 <= i < d["nx"] and 0 <= j < d["ny"]) or anchor[0] < 0 or anchor[1] < 0:
            raise DomainError(f"box at {anchor} leaves the domain")
        g = d["gD" if bc == "D" else "gN"][i, j]
        spec = ResolventSpec(bc, L0, self.params.lam, self.params.epsilon)
        return FieldSample(g, d["mD"][i, j] if bc == "D" else local_mass(g, "N"), spec)

    def box_samples(self, anchor, L0):
        """(D, N, alpha) samples for every in-domain Q' overlapping Q_{L0}(anchor)."""
        h = L0 // 2
        offs = [0] if h == 0 else [-h, 0, h]
        out = []
        for a in offs:
            for b in offs:
                r = (anchor[0] + a, anchor[1] + b)
                if r[0] < 0 or r[1] < 0 or r[0] + L0 > self.N or r[1] + L0 > self.N:
                    continue
                fd = self.box_field(r, L0, "D")
                fn = self.box_field(r, L0, "N")
                al = self.alpha[r[0] : r[0] + L0, r[1] : r[1] + L0]
                out.append((fd, fn, al))
        return out

    def grid(self, L0: int) -> ClassGrid:
        if L0 in self._grid:
            return self._grid[L0]
        self._check_L0(L0)
        nb = self.N // L0
        h = L0 // 2
        if h == 0:
            U = nb
            step = 1
        else:
            U = 2 * nb - 1
            step = 2
        H = {}
        vac = False
        for sx, sy in self.shifts(L0):
            d = self.shifted(L0, sx, sy)
            flags, st, vac = _qprime_stats(d["gD"], d["mD"], d["gN"], d["alpha"], L0, self.consts, self.params)
            pu, pv = (sx // h, sy // h) if h else (0, 0)
            items = dict(flags)
            items["F"] = st["l2_max"]
            items["F_grad"] = st["grad2_max"]
            items["F_inf"] = st["alpha_sup"]
            for k, v in items.items():
                if k not in H:
                    H[k] = np.full((U, U), np.nan if v.dtype.kind == "f" else True, dtype=v.dtype)
                H[k][pu::step, pv::step][: v.shape[0], : v.shape[1]] = v
        size = 3 if h else 1
        fl = {}
        for k in ("c1", "c2", "c3", "c4", "c5", "c6"):
            a = ndimage.minimum_filter(H[k].astype(np.uint8), size=size, mode="constant", cval=1)
            fl[k] = a[::step, ::step].astype(bool)
        Fs = {}
        for k in ("F", "F_grad", "F_inf"):
            a = np.where(np.isnan(H[k]), -np.inf, H[k])
            a = ndimage.maximum_filter(a, size=size, mode="constant", cval=-np.inf)
            Fs[k] = a[::step, ::step]
        xi = np.logical_and.reduce([fl[k] for k in fl])
        cg = ClassGrid(L0, fl, xi.astype(np.int8), Fs["F"], Fs["F_grad"], Fs["F_inf"], vac)
        self._grid[L0] = cg
        return cg

    def classify(self, anchor, L0) -> BoxReport:
        return classify_box(self.box_samples(anchor, L0), self.consts, self.params)


def f_functions(provider: FieldProvider, anchor, L0):
    return f_functions_from_samples(provider.box_samples(anchor, L0), L0)


# ------------------------------------------------------------ regions

@dataclass
class RegionReport:
    r0: bool
    r1: bool
    r2: bool
    r3: bool
    controlled: bool
    sums: dict = field(default_factory=dict)
    per_scale: dict = field(default_factory=dict)
    regular: bool | None = None

    def to_dict(self):
        d = asdict(self)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, default=float)


def _budgets(params, L0_count):
    eps, le, lam = params.epsilon, params.logeps, params.lam
    chi, zeta, rho = params.chi, params.zeta, params.rho
    return {
        "r0": (le**-rho * L0_count, None),
        "r1": (eps**2 * le**zeta * L0_count, eps**2 * le ** (1 + chi)),
        "r2": (eps**2 / lam * le**zeta * L0_count, eps**2 / lam * le**chi),
        "r3": (le**zeta * L0_count, le**chi),
    }


def controlled_from_boxes(sel: np.ndarray, cg: ClassGrid, params, n_cover: float) -> RegionReport:
    """(R0)-(R3) over the selected boxes of a class grid."""
    b = _budgets(params, n_cover)
    s0 = float((1 - cg.xi[sel]).sum())
    def trunc(F, thr):
        v = F[sel]
        return float(v[v >= thr].sum())
    s1 = trunc(cg.F_grad, b["r1"][1])
    s2 = trunc(cg.F, b["r2"][1])
    s3 = trunc(cg.F_inf, b["r3"][1])
    r0, r1, r2, r3 = s0 <= b["r0"][0], s1 <= b["r1"][0], s2 <= b["r2"][0], s3 <= b["r3"][0]
    sums = {"dirty": s0, "R1": s1, "R2": s2, "R3": s3, "N_Y": n_cover,
            "budget_R0": b["r0"][0], "budget_R1": b["r1"][0], "budget_R2": b["r2"][0], "budget_R3": b["r3"][0]}
    return RegionReport(r0, r1, r2, r3, bool(r0 and r1 and r2 and r3), sums)


def controlled(Y: Region, L0: int, provider: FieldProvider, params) -> RegionReport:
    """Controlled-region test of Y at box scale L0."""
    if not is_measurable(Y, L0):
        raise DomainError(f"Y is not {L0}-measurable")
    N = provider.N
    if not Y.inside((N, N)):
        raise DomainError("Y leaves the domain")
    cg = provider.grid(L0)
    nb = N // L0
    m = Y.to_mask((N, N)).reshape(nb, L0, nb, L0).all(axis=(1, 3))
    return controlled_from_boxes(m, cg, params, len(Y) / L0**2)


def regular_scales(params):
    return [params.ell // 2, params.ell, params.L // 16]


def regular(Y: Region, params, provider: FieldProvider) -> RegionReport:
    """delta(Y) (clipped to the domain) controlled at L0 in {ell/2, ell, L/16}."""
    N = provider.N
    dY = thicken(Y, params.L, params.L) & Region.box((0, 0), N)
    per = {}
    ok = True
    for L0 in regular_scales(params):
        if L0 < 1:
            raise ScaleError(f"scale {L0} is below one lattice site")
        rep = controlled(dY, L0, provider, params)
        per[L0] = rep.to_dict()
        ok &= rep.controlled
    r = [all(per[L0][k] for L0 in per) for k in ("r0", "r1", "r2", "r3")]
    return RegionReport(*r, controlled=bool(ok), per_scale=per, regular=bool(ok))


def _block_bad(provider, params):
    """Per L-block: is the single block Q_L(r) not regular."""
    L, N = params.L, provider.N
    nb = N // L
    bad = np.zeros((nb, nb), dtype=bool)
    for i in range(nb):
        for j in range(nb):
            rep = regular(Region.box((i * L, j * L), L), params, provider)
            bad[i, j] = not rep.regular
    return bad


def dirty_region(params, provider: FieldProvider, budget: int = 16):
    """Approximate dirty region: hulls of grown bad block clusters.

    Bad L-blocks are grouped into 8-connected clusters; each cluster is grown
    ring by ring while it stays bad and has at most ``budget`` blocks. Returns
    (region clipped to the domain, complete flag).
    """
    L, N = params.L, provider.N
    bad = _block_bad(provider, params)
    anchors = [(int(i) * L, int(j) * L) for i, j in np.argwhere(bad)]
    out = Region.empty()
    complete = True
    dom = Region.box((0, 0), N)
    for comp in block_components(anchors, L):
        Y = blocks_region(comp, L)
        if len(comp) > budget:
            complete = False
        while True:
            grown = thicken(Y, L, 1 + L) & dom
            if grown == Y:
                break
            if len(grown) // (L * L) > budget:
                complete = False
                break
            if regular(grown, params, provider).regular:
                break
            Y = grown
        out = out | closed_hull(Y, L)
    return out & dom, complete
