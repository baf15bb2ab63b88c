"""Spin configurations, Dirichlet energies and Hamiltonians."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .lattice import Region

FORMAT_VERSION = 1


def wrap(theta):
    """Map angles to (-pi, pi]."""
    t = np.mod(np.asarray(theta, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(t == -np.pi, np.pi, t)


def reflect(theta):
    """Reflection across the e2 axis: (c, s) -> (-c, s)."""
    return wrap(np.pi - np.asarray(theta, dtype=float))


class SpinConfig:
    """Angles on a rectangular frame of sites starting at ``origin``."""

    def __init__(self, theta, origin=(0, 0)):
        self._theta = wrap(np.array(theta, dtype=float))
        if self._theta.ndim != 2:
            raise ValueError("theta must be 2-d")
        self.origin = (int(origin[0]), int(origin[1]))

    @classmethod
    def constant(cls, n, angle=0.0, m=None):
        return cls(np.full((n, n if m is None else m), float(angle)))

    @property
    def theta(self) -> np.ndarray:
        v = self._theta.view()
        v.setflags(write=False)
        return v

    @property
    def shape(self):
        return self._theta.shape

    def copy(self) -> "SpinConfig":
        return SpinConfig(self._theta.copy(), self.origin)

    def set(self, mask, values) -> None:
        """Overwrite angles on a boolean frame mask."""
        self._theta[mask] = wrap(np.asarray(values, dtype=float))

    def spins(self):
        return np.cos(self._theta), np.sin(self._theta)

    def region_mask(self, R: Region) -> np.ndarray:
        if not R.inside(self.shape, self.origin):
            raise DomainError("region exceeds the configuration domain")
        return R.to_mask(self.shape, self.origin)

    # IO
    def save(self, path) -> None:
        n, m = self.shape
        if n != m:
            raise DomainError("binary format stores square grids only")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", n, FORMAT_VERSION))
            fh.write(self._theta.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "SpinConfig":
        with open(path, "rb") as fh:
            n, ver = struct.unpack("<II", fh.read(8))
            if ver != FORMAT_VERSION:
                raise ValueError(f"unknown spin file version {ver}")
            a = np.frombuffer(fh.read(8 * n * n), dtype="<f8")
        return cls(a.reshape(n, n))

    def to_json(self) -> str:
        return json.dumps({"origin": list(self.origin), "theta": self._theta.tolist()})

    @classmethod
    def from_json(cls, s) -> "SpinConfig":
        d = json.loads(s)
        return cls(np.asarray(d["theta"]), tuple(d.get("origin", (0, 0))))


@dataclass
class BoundaryCondition:
    """Boundary data on the outer boundary of a region.

    kind: "free", "e1" (constant e1), "explicit" (partial map site -> angle),
    or "ext" (e1 outside Lambda_N = [0, side)^2, free elsewhere).
    """

    kind: str = "free"
    values: dict = field(default_factory=dict)
    side: int | None = None
    angle: float = 0.0  # constant angle used by "e1"/"ext" (0 means e1)

    def __post_init__(self):
        if self.kind not in ("free", "e1", "explicit", "ext"):
            raise ValueError(f"unknown boundary kind {self.kind}")
        if self.kind == "ext" and self.side is None:
            raise ValueError("ext boundary needs the ambient side")

    @classmethod
    def free(cls):
        return cls("free")

    @classmethod
    def e1(cls):
        return cls("e1")

    @classmethod
    def explicit(cls, values):
        return cls("explicit", {tuple(int(v) for v in k): float(a) for k, a in values.items()})

    @classmethod
    def ext(cls, side):
        return cls("ext", side=side)

    def reflected(self) -> "BoundaryCondition":
        """Boundary data reflected across the e2 axis."""
        if self.kind == "explicit":
            return BoundaryCondition.explicit({k: float(reflect(v)) for k, v in self.values.items()})
        return BoundaryCondition(self.kind, {}, self.side, float(reflect(self.angle)))

    def value(self, site, strict=True):
        """Angle at a boundary site, or None where the boundary is free."""
        if self.kind == "free":
            return None
        if self.kind == "e1":
            return self.angle
        if self.kind == "ext":
            x, y = site
            if 0 <= x < self.side and 0 <= y < self.side:
                return None
            return self.angle
        v = self.values.get(tuple(site))
        if v is None and strict:
            raise DomainError(f"explicit boundary missing at {site}")
        return v


def _extended(sigma: SpinConfig, mask: np.ndarray, tau: BoundaryCondition | None):
    """Angles on the frame padded by one site; NaN where undefined.

    Sites of R come from sigma; outer-boundary sites come from tau.
    """
    n, m = sigma.shape
    ext = np.full((n + 2, m + 2), np.nan)
    inner = np.zeros((n + 2, m + 2), dtype=bool)
    inner[1:-1, 1:-1] = mask
    ext[1:-1, 1:-1][mask] = sigma.theta[mask]
    if tau is None or tau.kind == "free":
        return ext, inner
    nb = np.zeros_like(inner)
    nb[1:, :] |= inner[:-1, :]
    nb[:-1, :] |= inner[1:, :]
    nb[:, 1:] |= inner[:, :-1]
    nb[:, :-1] |= inner[:, 1:]
    nb &= ~inner
    ox, oy = sigma.origin[0] - 1, sigma.origin[1] - 1
    for i, j in np.argwhere(nb):
        v = tau.value((int(i + ox), int(j + oy)))
        if v is not None:
            ext[i, j] = v
    return ext, inner


def _edge_sum(ext, inner, internal_only):
    """Sum of 2 - 2cos over edges with both ends defined and meeting R."""
    tot = 0.0
    for a, b, ia, ib in (
        (ext[:-1, :], ext[1:, :], inner[:-1, :], inner[1:, :]),
        (ext[:, :-1], ext[:, 1:], inner[:, :-1], inner[:, 1:]),
    ):
        sel = (ia & ib) if internal_only else (ia | ib)
        sel = sel & ~np.isnan(a) & ~np.isnan(b)
        tot += float(np.sum(2.0 - 2.0 * np.cos(a[sel] - b[sel])))
    return tot


def dirichlet_energy(sigma: SpinConfig, R: Region | None = None) -> float:
    """Sum over internal nearest-neighbour edges of ||s_x - s_y||^2."""
    mask = np.ones(sigma.shape, bool) if R is None else sigma.region_mask(R)
    ext, inner = _extended(sigma, mask, None)
    return _edge_sum(ext, inner, True)


def dirichlet_energy_bc(sigma: SpinConfig, R: Region | None, tau: BoundaryCondition) -> float:
    """Energy of all edges meeting R with sigma extended by tau on the outer boundary."""
    mask = np.ones(sigma.shape, bool) if R is None else sigma.region_mask(R)
    ext, inner = _extended(sigma, mask, tau)
    return _edge_sum(ext, inner, False)


def hamiltonian(sigma: SpinConfig, R: Region | None, tau: BoundaryCondition, alpha, params) -> float:
    """Return -H_R(sigma | tau) (larger is better)."""
    mask = np.ones(sigma.shape, bool) if R is None else sigma.region_mask(R)
    alpha = np.asarray(getattr(alpha, "alpha", alpha), dtype=float)
    if alpha.shape != sigma.shape:
        raise DomainError("alpha must be given on the configuration frame")
    ext, inner = _extended(sigma, mask, tau)
    energy = _edge_sum(ext, inner, False)
    field_term = params.epsilon * float(np.sum(alpha[mask] * np.sin(sigma.theta[mask])))
    return -0.5 * energy + field_term


def block_average(sigma: SpinConfig, Q: Region) -> np.ndarray:
    mask = sigma.region_mask(Q)
    if not mask.any():
        raise DomainError("empty block")
    c, s = sigma.spins()
    return np.array([c[mask].mean(), s[mask].mean()])


def block_magnetization(sigma: SpinConfig, z, L: int) -> np.ndarray:
    return block_average(sigma, Region.box(tuple(z), L))


# array-level helpers for the surgery pipeline ----------------------------

def frame_energy(theta: np.ndarray, mask: np.ndarray, pad_angle=None, internal_only=False) -> float:
    """Edge energy on a frame for edges meeting ``mask``.

    Neighbours are read from ``theta`` itself (the configuration acts as its
    own boundary condition). Off-frame neighbours take ``pad_angle`` or are
    free when it is None.
    """
    n, m = theta.shape
    ext = np.full((n + 2, m + 2), np.nan if pad_angle is None else float(pad_angle))
    ext[1:-1, 1:-1] = theta
    inner = np.zeros((n + 2, m + 2), dtype=bool)
    inner[1:-1, 1:-1] = mask
    return _edge_sum(ext, inner, internal_only)


def frame_hamiltonian(theta: np.ndarray, alpha: np.ndarray, eps: float, pad_angle=0.0) -> float:
    """-H over the whole frame with e1 (angle ``pad_angle``) outside it."""
    e = frame_energy(theta, np.ones(theta.shape, bool), pad_angle)
    return -0.5 * e + eps * float(np.sum(alpha * np.sin(theta)))
