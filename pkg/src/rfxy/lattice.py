"""Lattice geometry: regions, blocks, connectivity, thickening and boundaries.

Regions are finite site sets stored as a boolean bitmap over their bounding
box. Site (x, y) maps to array index [x - x0, y - y0].
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DomainError, ScaleError

EIGHT = np.ones((3, 3), dtype=bool)
FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class LatticeGeom:
    side: int

    def __post_init__(self):
        if self.side < 1:
            raise DomainError("lattice side must be >= 1")

    def contains(self, site) -> bool:
        x, y = site
        return 0 <= x < self.side and 0 <= y < self.side

    def full(self) -> "Region":
        return Region.box((0, 0), self.side)


class Region:
    """Immutable finite subset of Z^2."""

    __slots__ = ("_mask", "_origin")

    def __init__(self, mask: np.ndarray, origin=(0, 0)):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2:
            raise ValueError("mask must be 2-d")
        xs = np.flatnonzero(mask.any(axis=1))
        ys = np.flatnonzero(mask.any(axis=0))
        if xs.size == 0:
            self._mask = np.zeros((0, 0), dtype=bool)
            self._origin = (0, 0)
        else:
            self._mask = mask[xs[0] : xs[-1] + 1, ys[0] : ys[-1] + 1].copy()
            self._origin = (int(origin[0] + xs[0]), int(origin[1] + ys[0]))
        self._mask.setflags(write=False)

    # construction
    @classmethod
    def empty(cls) -> "Region":
        return cls(np.zeros((0, 0), dtype=bool))

    @classmethod
    def from_sites(cls, sites) -> "Region":
        pts = np.asarray(list(sites), dtype=np.int64).reshape(-1, 2)
        if len(pts) == 0:
            return cls.empty()
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        m = np.zeros(tuple(hi - lo + 1), dtype=bool)
        m[pts[:, 0] - lo[0], pts[:, 1] - lo[1]] = True
        return cls(m, tuple(lo))

    @classmethod
    def box(cls, anchor, side, side_y=None) -> "Region":
        side_y = side if side_y is None else side_y
        return cls(np.ones((side, side_y), dtype=bool), anchor)

    # basic queries
    @property
    def mask(self) -> np.ndarray:
        return self._mask

    @property
    def origin(self):
        return self._origin

    @property
    def bbox(self):
        """(x0, y0, x1, y1) with x1, y1 exclusive."""
        x0, y0 = self._origin
        return (x0, y0, x0 + self._mask.shape[0], y0 + self._mask.shape[1])

    def __len__(self) -> int:
        return int(self._mask.sum())

    def __bool__(self) -> bool:
        return bool(self._mask.any())

    def __contains__(self, site) -> bool:
        x, y = site
        i, j = x - self._origin[0], y - self._origin[1]
        if 0 <= i < self._mask.shape[0] and 0 <= j < self._mask.shape[1]:
            return bool(self._mask[i, j])
        return False

    def sites(self) -> np.ndarray:
        """Sorted (lexicographic) array of sites, shape (n, 2)."""
        idx = np.argwhere(self._mask)
        return idx + np.asarray(self._origin)

    def __iter__(self):
        return (tuple(int(v) for v in s) for s in self.sites())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Region):
            return NotImplemented
        if not self and not other:
            return True
        return self._origin == other._origin and np.array_equal(self._mask, other._mask)

    def __hash__(self):
        return hash((self._origin, self._mask.shape, self._mask.tobytes()))

    def __repr__(self) -> str:
        return f"Region(n={len(self)}, bbox={self.bbox})"

    # frames
    def to_mask(self, shape, origin=(0, 0)) -> np.ndarray:
        """Rasterize onto a frame; sites outside the frame are dropped."""
        out = np.zeros(shape, dtype=bool)
        if not self:
            return out
        x0, y0 = self._origin[0] - origin[0], self._origin[1] - origin[1]
        a, b = self._mask.shape
        sx0, sy0 = max(0, -x0), max(0, -y0)
        dx0, dy0 = max(0, x0), max(0, y0)
        dx1, dy1 = min(shape[0], x0 + a), min(shape[1], y0 + b)
        if dx1 > dx0 and dy1 > dy0:
            out[dx0:dx1, dy0:dy1] = self._mask[sx0 : sx0 + dx1 - dx0, sy0 : sy0 + dy1 - dy0]
        return out

    def inside(self, shape, origin=(0, 0)) -> bool:
        if not self:
            return True
        x0, y0, x1, y1 = self.bbox
        return x0 >= origin[0] and y0 >= origin[1] and x1 <= origin[0] + shape[0] and y1 <= origin[1] + shape[1]

    # set algebra
    def _joint(self, other):
        if not self and not other:
            return None
        boxes = [r.bbox for r in (self, other) if r]
        x0 = min(b[0] for b in boxes)
        y0 = min(b[1] for b in boxes)
        x1 = max(b[2] for b in boxes)
        y1 = max(b[3] for b in boxes)
        shape = (x1 - x0, y1 - y0)
        return self.to_mask(shape, (x0, y0)), other.to_mask(shape, (x0, y0)), (x0, y0)

    def __or__(self, other):
        j = self._joint(other)
        return Region.empty() if j is None else Region(j[0] | j[1], j[2])

    def __and__(self, other):
        j = self._joint(other)
        return Region.empty() if j is None else Region(j[0] & j[1], j[2])

    def __sub__(self, other):
        j = self._joint(other)
        return Region.empty() if j is None else Region(j[0] & ~j[1], j[2])

    def issubset(self, other) -> bool:
        return not (self - other)

    def translate(self, dx, dy) -> "Region":
        return Region(self._mask, (self._origin[0] + dx, self._origin[1] + dy))

    # serialization
    def to_json(self) -> str:
        return json.dumps([[int(x), int(y)] for x, y in self.sites()])

    @classmethod
    def from_json(cls, s: str) -> "Region":
        return cls.from_sites([tuple(p) for p in json.loads(s)])


@dataclass(frozen=True)
class BlockGrid:
    """A set of L0-blocks Q_{L0}(r), r in L0 Z^2."""

    block_side: int
    anchors: frozenset

    def __post_init__(self):
        if self.block_side < 1:
            raise ScaleError("block side must be >= 1")
        for a in self.anchors:
            if a[0] % self.block_side or a[1] % self.block_side:
                raise ScaleError(f"anchor {a} not on the {self.block_side}-grid")

    def region(self) -> Region:
        return blocks_region(self.anchors, self.block_side)

    def to_json(self) -> str:
        return json.dumps({"block_side": self.block_side, "anchors": sorted([list(a) for a in self.anchors])})

    @classmethod
    def from_json(cls, s: str) -> "BlockGrid":
        d = json.loads(s)
        return cls(d["block_side"], frozenset(tuple(a) for a in d["anchors"]))


def blocks_region(anchors, L0: int) -> Region:
    anchors = [tuple(a) for a in anchors]
    if not anchors:
        return Region.empty()
    idx = np.asarray(anchors, dtype=np.int64) // L0
    lo = idx.min(axis=0)
    hi = idx.max(axis=0)
    bm = np.zeros(tuple(hi - lo + 1), dtype=bool)
    bm[idx[:, 0] - lo[0], idx[:, 1] - lo[1]] = True
    return Region(np.kron(bm, np.ones((L0, L0), dtype=bool)).astype(bool), tuple(lo * L0))


def is_measurable(region: Region, L0: int) -> bool:
    """True if region is a union of L0-blocks."""
    if not region:
        return True
    return thicken_blocks(region, L0) == region


def region_blocks(region: Region, L0: int) -> list:
    """Anchors of L0-blocks contained in an L0-measurable region."""
    if not is_measurable(region, L0):
        raise DomainError(f"region is not {L0}-measurable")
    return sorted(_block_anchors_meeting(region, L0))


def _aligned_frame(region: Region, L0: int, pad: int):
    x0, y0, x1, y1 = region.bbox
    fx0 = ((x0 - pad) // L0) * L0
    fy0 = ((y0 - pad) // L0) * L0
    fx1 = -((-(x1 + pad)) // L0) * L0
    fy1 = -((-(y1 + pad)) // L0) * L0
    return (fx0, fy0), (fx1 - fx0, fy1 - fy0)


def _block_anchors_meeting(region: Region, L0: int):
    if not region:
        return set()
    org, shape = _aligned_frame(region, L0, 0)
    m = region.to_mask(shape, org)
    b = m.reshape(shape[0] // L0, L0, shape[1] // L0, L0).any(axis=(1, 3))
    return {(org[0] + i * L0, org[1] + j * L0) for i, j in np.argwhere(b)}


def thicken_blocks(region: Region, L0: int) -> Region:
    """Union of L0-blocks meeting region."""
    return blocks_region(_block_anchors_meeting(region, L0), L0)


def connected_components(blocks, L0: int) -> list:
    """8-connected components of a set of L0-block anchors, as Regions.

    Components are ordered by their smallest anchor (lexicographic).
    """
    return [blocks_region(c, L0) for c in block_components(blocks, L0)]


def block_components(blocks, L0: int) -> list:
    anchors = sorted({tuple(int(v) for v in a) for a in blocks})
    if not anchors:
        return []
    idx = np.asarray(anchors) // L0
    lo = idx.min(axis=0)
    hi = idx.max(axis=0)
    bm = np.zeros(tuple(hi - lo + 1), dtype=bool)
    bm[idx[:, 0] - lo[0], idx[:, 1] - lo[1]] = True
    lab, n = ndimage.label(bm, structure=EIGHT)
    comps = [[] for _ in range(n)]
    for (i, j) in np.argwhere(bm):
        comps[lab[i, j] - 1].append(((i + lo[0]) * L0, (j + lo[1]) * L0))
    comps = [sorted(c) for c in comps]
    comps.sort(key=lambda c: c[0])
    return comps


def site_components(region: Region, connectivity: int = 8) -> list:
    """Connected components of a site set (8- or 4-connectivity)."""
    if not region:
        return []
    lab, n = ndimage.label(region.mask, structure=EIGHT if connectivity == 8 else FOUR)
    return [Region(lab == k, region.origin) for k in range(1, n + 1)]


def decompose_complement(region: Region, ambient: LatticeGeom | None = None):
    """Split the complement of the closed-box union into exterior and interiors.

    The complement of a union of closed unit boxes is connected through shared
    edges only, so complement sites use 4-connectivity. The exterior is the
    unbounded component; with ``ambient=None`` it is returned clipped to the
    region's bounding box padded by one site. With a finite ambient, every
    component is intersected with Lambda_N.
    """
    if ambient is None:
        if not region:
            return Region.empty(), []
        x0, y0, x1, y1 = region.bbox
    else:
        boxes = [(0, 0, ambient.side, ambient.side)]
        if region:
            boxes.append(region.bbox)
        x0 = min(b[0] for b in boxes)
        y0 = min(b[1] for b in boxes)
        x1 = max(b[2] for b in boxes)
        y1 = max(b[3] for b in boxes)
    org = (x0 - 1, y0 - 1)
    shape = (x1 - x0 + 2, y1 - y0 + 2)
    comp = ~region.to_mask(shape, org)
    lab, n = ndimage.label(comp, structure=FOUR)
    ext_label = lab[0, 0]
    if ambient is not None:
        amb = Region.box((0, 0), ambient.side).to_mask(shape, org)
    else:
        amb = np.ones(shape, dtype=bool)
    exterior = Region((lab == ext_label) & amb, org)
    interiors = []
    for k in range(1, n + 1):
        if k == ext_label:
            continue
        r = Region((lab == k) & amb, org)
        if r:
            interiors.append(r)
    interiors.sort(key=lambda r: tuple(r.sites()[0]))
    return exterior, interiors


def interior(region: Region) -> Region:
    """Int(A): union of the bounded complement components."""
    out = Region.empty()
    for r in decompose_complement(region)[1]:
        out = out | r
    return out


def thicken(region: Region, L0: int, radius: int) -> Region:
    """Union of L0-blocks at l-infinity site distance < radius from region."""
    if radius < 0 or L0 < 1:
        raise ValueError("need radius >= 0 and L0 >= 1")
    if not region or radius == 0:
        return Region.empty()
    org, shape = _aligned_frame(region, L0, radius + L0)
    m = region.to_mask(shape, org)
    if radius > 1:
        m = ndimage.maximum_filter(m, size=2 * radius - 1, mode="constant", cval=False)
    b = m.reshape(shape[0] // L0, L0, shape[1] // L0, L0).any(axis=(1, 3))
    full = np.kron(b, np.ones((L0, L0), dtype=bool)).astype(bool)
    return Region(full, org)


def closed_hull(region: Region, L: int) -> Region:
    """cl(A) = delta_L(A) united with Int(A)."""
    if not region:
        return Region.empty()
    return thicken(region, L, L) | interior(region)


def boundary(region: Region, side: str = "inner") -> Region:
    """Inner (sites of R with a 4-neighbour outside) or outer boundary."""
    if not region:
        return Region.empty()
    x0, y0, x1, y1 = region.bbox
    org = (x0 - 1, y0 - 1)
    shape = (x1 - x0 + 2, y1 - y0 + 2)
    m = region.to_mask(shape, org)
    if side == "inner":
        er = ndimage.binary_erosion(m, structure=FOUR, border_value=0)
        return Region(m & ~er, org)
    if side == "outer":
        dl = ndimage.binary_dilation(m, structure=FOUR)
        return Region(dl & ~m, org)
    raise ValueError("side must be 'inner' or 'outer'")


# frame-level helpers used by the pipeline -------------------------------

def mask_boundary(mask: np.ndarray, side: str = "inner") -> np.ndarray:
    """Inner/outer 4-boundary of a boolean mask; the frame edge counts as outside."""
    if side == "inner":
        return mask & ~ndimage.binary_erosion(mask, structure=FOUR, border_value=0)
    return ndimage.binary_dilation(mask, structure=FOUR) & ~mask


def edt_to(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance from every frame site to the nearest True site of mask."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)
