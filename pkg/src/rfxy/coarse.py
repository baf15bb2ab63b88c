"""Phase fields psi0, psi1, psi, Psi and contour extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError, ScaleError
from .lattice import (
    Region,
    block_components,
    blocks_region,
    decompose_complement,
    edt_to,
    mask_boundary,
    thicken,
)


def disk_footprint(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    x, y = np.mgrid[-r : r + 1, -r : r + 1]
    return x * x + y * y <= radius * radius


def edge_energies(theta: np.ndarray):
    """Per-edge ||s_x - s_y||^2 along axis 0 and axis 1."""
    eh = 2.0 - 2.0 * np.cos(theta[1:, :] - theta[:-1, :])
    ev = 2.0 - 2.0 * np.cos(theta[:, 1:] - theta[:, :-1])
    return eh, ev


def _csum2(a):
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    out[1:, 1:] = a.cumsum(0).cumsum(1)
    return out


def _rect(cs, i0, j0, i1, j1):
    return cs[i1, j1] - cs[i0, j1] - cs[i1, j0] + cs[i0, j0]


def half_grid_anchors(n: int, ell: int):
    """Anchors on the (ell/2)-grid whose ell-square fits in [0, n)."""
    h = ell // 2
    return np.arange(0, n - ell + 1, h)


def square_energies(theta: np.ndarray, ell: int):
    """Energies of all Q_ell(r), r on the (ell/2)-grid inside the frame.

    Returns (ax, ay, E) with E[u, v] the energy of the square anchored at
    (ax[u], ay[v]). Prefix sums make each square O(1).
    """
    if ell < 2 or ell % 2:
        raise ScaleError("ell must be an even integer >= 2")
    n, m = theta.shape
    if n < ell or m < ell:
        raise DomainError("domain smaller than one ell-square")
    eh, ev = edge_energies(theta)
    ch, cv = _csum2(eh), _csum2(ev)
    ax = half_grid_anchors(n, ell)
    ay = half_grid_anchors(m, ell)
    A, B = np.meshgrid(ax, ay, indexing="ij")
    E = _rect(ch, A, B, A + ell - 1, B + ell) + _rect(cv, A, B, A + ell, B + ell - 1)
    return ax, ay, E


def square_means(theta: np.ndarray, ell: int):
    """sigma(Q_ell(r)) . e1 for all half-grid anchors."""
    n, m = theta.shape
    cc = _csum2(np.cos(theta))
    ax = half_grid_anchors(n, ell)
    ay = half_grid_anchors(m, ell)
    A, B = np.meshgrid(ax, ay, indexing="ij")
    return ax, ay, _rect(cc, A, B, A + ell, B + ell) / (ell * ell)


def _spread(anchor_flags, ax, ay, shape, radius):
    """Sites within Euclidean distance radius of a flagged anchor."""
    img = np.zeros(shape, dtype=bool)
    A, B = np.meshgrid(ax, ay, indexing="ij")
    img[A[anchor_flags], B[anchor_flags]] = True
    if not img.any():
        return img
    return ndimage.binary_dilation(img, structure=disk_footprint(radius))


def psi0_threshold(params) -> float:
    return params.epsilon**2 * params.logeps ** (1 + params.chi) * params.ell**2


def compute_psi0(theta: np.ndarray, params) -> np.ndarray:
    """psi0_z = 1 iff every in-domain ell-square with anchor within 2 ell is low-energy."""
    theta = np.asarray(getattr(theta, "theta", theta))
    ell = params.ell
    ax, ay, E = square_energies(theta, ell)
    bad = E > psi0_threshold(params)
    return (~_spread(bad, ax, ay, theta.shape, 2 * ell)).astype(np.int8)


def compute_psi1(theta: np.ndarray, params) -> np.ndarray:
    theta = np.asarray(getattr(theta, "theta", theta))
    ell, xi = params.ell, params.xi
    ax, ay, a = square_means(theta, ell)
    plus = a >= 1 - xi
    minus = a <= -1 + xi
    not_all_plus = _spread(~plus, ax, ay, theta.shape, 2 * ell)
    not_all_minus = _spread(~minus, ax, ay, theta.shape, 2 * ell)
    out = np.zeros(theta.shape, dtype=np.int8)
    out[~not_all_minus] = -1
    out[~not_all_plus] = 1
    return out


def compute_psi(theta, params):
    """Return (psi0, psi1, psi)."""
    p0 = compute_psi0(theta, params)
    p1 = compute_psi1(theta, params)
    return p0, p1, (p0 * p1).astype(np.int8)


def _check_L(shape, L):
    if shape[0] % L or shape[1] % L:
        raise ScaleError(f"domain {shape} is not a union of {L}-blocks")


def compute_Psi_blocks(psi: np.ndarray, params) -> np.ndarray:
    """Block-level Psi (one entry per L-block)."""
    L = params.L
    _check_L(psi.shape, L)
    nb = (psi.shape[0] // L, psi.shape[1] // L)
    blk = psi.reshape(nb[0], L, nb[1], L)
    allp = (blk == 1).all(axis=(1, 3))
    allm = (blk == -1).all(axis=(1, 3))
    fp = disk_footprint(2)
    # blocks outside the domain do not constrain
    okp = ~ndimage.binary_dilation(~allp, structure=fp)
    okm = ~ndimage.binary_dilation(~allm, structure=fp)
    out = np.zeros(nb, dtype=np.int8)
    out[okm] = -1
    out[okp] = 1
    return out


def compute_Psi(psi: np.ndarray, params) -> np.ndarray:
    """Site-level Psi grid, constant on L-blocks."""
    L = params.L
    b = compute_Psi_blocks(psi, params)
    return np.kron(b, np.ones((L, L), dtype=np.int8)).astype(np.int8)


@dataclass
class PhaseField:
    psi0: np.ndarray
    psi1: np.ndarray
    psi: np.ndarray
    Psi: np.ndarray
    ell: int
    L: int
    chi: float
    xi: float

    @classmethod
    def from_config(cls, theta, params) -> "PhaseField":
        p0, p1, p = compute_psi(theta, params)
        return cls(p0, p1, p, compute_Psi(p, params), params.ell, params.L, params.chi, params.xi)


@dataclass
class Contour:
    support: Region
    blocks: list
    L: int
    label_origin: tuple
    labels: np.ndarray  # int8 over the delta_L bounding box; 2 = undefined
    sign: int
    mixed: bool = False
    touches_boundary: bool = False

    def __len__(self):
        return len(self.support)

    @property
    def size(self) -> int:
        return len(self.support)

    def thickening(self) -> Region:
        return thicken(self.support, self.L, self.L)

    def label_at(self, site):
        i, j = site[0] - self.label_origin[0], site[1] - self.label_origin[1]
        if 0 <= i < self.labels.shape[0] and 0 <= j < self.labels.shape[1]:
            v = int(self.labels[i, j])
            return None if v == 2 else v
        return None

    def label_region(self) -> Region:
        return Region(self.labels != 2, self.label_origin)

    def flipped(self) -> "Contour":
        lab = np.where(self.labels == 2, 2, -self.labels).astype(np.int8)
        return Contour(self.support, list(self.blocks), self.L, self.label_origin, lab,
                       -self.sign, self.mixed, self.touches_boundary)

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "blocks": [list(map(int, a)) for a in self.blocks],
            "sign": self.sign,
            "mixed": self.mixed,
            "touches_boundary": self.touches_boundary,
            "size": self.size,
        }


@dataclass
class ContourSet:
    contours: list
    Psi: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.contours)

    def __iter__(self):
        return iter(self.contours)

    def to_json(self) -> str:
        return json.dumps({"contours": [c.to_dict() for c in self.contours]}, sort_keys=True)


def extract_contours(Psi: np.ndarray, psi: np.ndarray, params) -> ContourSet:
    """Maximal 8-connected L-block components of {Psi = 0} with psi labels."""
    L = params.L
    _check_L(Psi.shape, L)
    n, m = Psi.shape
    zero_blocks = [(int(i) * L, int(j) * L) for i, j in np.argwhere(Psi[::L, ::L] == 0)]
    out = []
    for comp in block_components(zero_blocks, L):
        sp = blocks_region(comp, L)
        dl = thicken(sp, L, L)
        x0, y0, x1, y1 = dl.bbox
        lab = np.full((x1 - x0, y1 - y0), 2, dtype=np.int8)
        dmask = dl.mask
        # psi on the in-domain part of delta_L
        cx0, cy0 = max(x0, 0), max(y0, 0)
        cx1, cy1 = min(x1, n), min(y1, m)
        sub = lab[cx0 - x0 : cx1 - x0, cy0 - y0 : cy1 - y0]
        dsub = dmask[cx0 - x0 : cx1 - x0, cy0 - y0 : cy1 - y0]
        sub[dsub] = psi[cx0:cx1, cy0:cy1][dsub]
        ext, _ = decompose_complement(sp)
        dext = (dl & ext).to_mask(lab.shape, (x0, y0))
        vals = lab[dext & (lab != 2)]
        if vals.size and np.all(vals == 1):
            sign, mixed = 1, False
        elif vals.size and np.all(vals == -1):
            sign, mixed = -1, False
        else:
            sign, mixed = 0, True
        sx0, sy0, sx1, sy1 = sp.bbox
        touches = sx0 == 0 or sy0 == 0 or sx1 == n or sy1 == m
        out.append(Contour(sp, comp, L, (x0, y0), lab, sign, mixed, touches))
    return ContourSet(out, Psi, psi)


def contours_from_config(theta, params) -> ContourSet:
    pf = PhaseField.from_config(theta, params)
    return extract_contours(pf.Psi, pf.psi, params)


def compatible(c1: Contour, c2: Contour) -> bool:
    d1 = c1.thickening()
    if d1 & c2.support:
        return False
    d2 = c2.thickening()
    for s in (d1 & d2):
        a, b = c1.label_at(s), c2.label_at(s)
        if a is not None and b is not None and a != b:
            return False
    return True


@dataclass
class ContourRegions:
    """Masks on the N x N frame of the regions attached to a contour."""

    sp: np.ndarray
    delta: np.ndarray
    collar: np.ndarray
    collar_plus: np.ndarray
    collar_minus: np.ndarray
    middle: np.ndarray
    middle_plus: np.ndarray
    middle_minus: np.ndarray
    M: np.ndarray
    M_plus: np.ndarray
    M_minus: np.ndarray
    delta_bar: np.ndarray
    delta_ext: np.ndarray
    delta_int_plus: np.ndarray
    delta_int_minus: np.ndarray
    exterior: np.ndarray
    interiors: list
    dist_sp: np.ndarray

    def region(self, name) -> Region:
        return Region(getattr(self, name))


def contour_regions(c: Contour, params, N: int, Psi: np.ndarray, psi: np.ndarray | None = None) -> ContourRegions:
    L = params.L
    if L % 16:
        raise ScaleError("L must be a multiple of 16 for the L/16 boxes")
    b16 = L // 16
    shape = Psi.shape
    if shape != (N, N):
        raise DomainError("Psi grid must cover Lambda_N")
    sp = c.support.to_mask(shape)
    delta = c.thickening().to_mask(shape)
    collar = delta & ~sp
    cp = collar & (Psi == 1)
    cm = collar & (Psi == -1)
    inner_sp = mask_boundary(sp, "inner")
    d = edt_to(inner_sp)
    middle = collar & (d >= L / 8) & (d <= 3 * L / 8)
    # L/16 blocks within distance 3 of the middle strip
    dm = edt_to(middle)
    nb = N // b16
    blk_min = dm[: nb * b16, : nb * b16].reshape(nb, b16, nb, b16).min(axis=(1, 3))
    M = np.kron(blk_min <= 3, np.ones((b16, b16), dtype=bool)).astype(bool)
    dbar = thicken(c.support, L // 2, L // 2).to_mask(shape)
    ext, ints = decompose_complement(c.support, None)
    # exterior on the full frame: complement of sp and its holes
    holes = np.zeros(shape, bool)
    int_masks = []
    for r in ints:
        mk = r.to_mask(shape)
        int_masks.append(mk)
        holes |= mk
    exterior = ~sp & ~holes
    if psi is None:
        psi = np.zeros(shape, dtype=np.int8)
    dint = delta & holes
    return ContourRegions(
        sp=sp,
        delta=delta,
        collar=collar,
        collar_plus=cp,
        collar_minus=cm,
        middle=middle,
        middle_plus=middle & cp,
        middle_minus=middle & cm,
        M=M,
        M_plus=M & cp,
        M_minus=M & cm,
        delta_bar=dbar,
        delta_ext=delta & exterior,
        delta_int_plus=dint & (psi == 1),
        delta_int_minus=dint & (psi == -1),
        exterior=exterior,
        interiors=int_masks,
        dist_sp=d,
    )
