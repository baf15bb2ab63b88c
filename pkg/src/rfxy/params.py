"""Model parameters, scale formulas and parameter-window validation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .errors import ParameterError


def abslog(x: float, base: str = "e") -> float:
    """|log x| in the configured base ("e" or "2")."""
    if x <= 0:
        raise ParameterError(f"log of non-positive value {x}")
    v = math.log(x) if base == "e" else math.log2(x)
    return abs(v)


def scale_ell(eps: float, s: float, base: str = "e") -> int:
    le = abslog(eps, base)
    return 2 ** math.floor(math.log2(le ** (-0.5 - s) / eps))


def scale_L(eps: float, s: float, base: str = "e") -> int:
    le = abslog(eps, base)
    return 2 ** math.ceil(math.log2(le ** (-0.5 + s) / eps))


def _is_pow2(n) -> bool:
    return isinstance(n, int) and n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ModelParams:
    """Couplings, exponents and scales.

    ``ell`` and ``L`` default to the floor/ceil scale formulas; passing them
    explicitly is a desk-scale override that `validate_params` reports unless
    ``allow_scale_override`` is set.
    """

    epsilon: float
    beta: float = 1.0
    s: float = 1 / 64
    eta_lambda: float = 1 / 16
    eta: float = 1 / 40
    chi: float = 1 / 32
    zeta: float = 1 / 32
    xi: float = 0.1
    rho: float = 1.25
    log_base: str = "e"
    ell: int | None = None
    L: int | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if not self.beta > 0:
            raise ParameterError("beta must be positive")
        if self.log_base not in ("e", "2"):
            raise ParameterError("log_base must be 'e' or '2'")
        if self.ell is None:
            object.__setattr__(self, "ell", scale_ell(self.epsilon, self.s, self.log_base))
        if self.L is None:
            object.__setattr__(self, "L", scale_L(self.epsilon, self.s, self.log_base))

    @property
    def logeps(self) -> float:
        return abslog(self.epsilon, self.log_base)

    @property
    def lam(self) -> float:
        return self.epsilon**2 * self.logeps ** (1 + self.eta_lambda)

    def log(self, x: float) -> float:
        return abslog(x, self.log_base)

    def replace(self, **kw) -> "ModelParams":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class CleanConstants:
    """Thresholds A, C, c of the clean-box definition (calibrated defaults)."""

    A: float = 0.25
    C_big: float = 1.6
    c_small: float = 0.005
    C_sup: float = 6.0  # multiplier on the sup-norm bound; 1 is the bound as printed

    def __post_init__(self):
        if not (self.A > 0 and self.C_big > 0 and self.c_small > 0 and self.C_sup > 0):
            raise ParameterError("clean constants must be positive")
        if not self.c_small < self.C_big:
            raise ParameterError("need c_small < C_big")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def validate_params(p: ModelParams, allow_scale_override: bool = False) -> list[str]:
    """Return a list of violated parameter windows (empty when valid)."""
    out = []
    if not 0 < p.s < 1 / 32:
        out.append(f"s={p.s} not in (0, 1/32)")
    if not 2 * p.s < p.eta_lambda < 1 / 8:
        out.append(f"eta_lambda={p.eta_lambda} not in (2s, 1/8)")
    if not 0 < p.eta < p.eta_lambda / 2:
        out.append(f"eta={p.eta} not in (0, eta_lambda/2)")
    if not 0 < p.chi < 1 / 16:
        out.append(f"chi={p.chi} not in (0, 1/16)")
    if not 0 < p.zeta < 1 / 16:
        out.append(f"zeta={p.zeta} not in (0, 1/16)")
    if p.rho != 1.25:
        out.append(f"rho={p.rho} must equal 5/4")
    if not 0 < p.xi < 1:
        out.append(f"xi={p.xi} not in (0, 1)")
    if not p.epsilon < 1:
        out.append(f"epsilon={p.epsilon} must be < 1")
        return out
    for name in ("ell", "L"):
        v = getattr(p, name)
        if not _is_pow2(v):
            out.append(f"{name}={v} is not a power of two")
    if p.ell is not None and p.L is not None and not p.ell < p.L:
        out.append(f"ell={p.ell} must be < L={p.L}")
    if p.ell is not None and p.ell < 2:
        out.append(f"ell={p.ell} must be >= 2 so that ell/2 is a lattice scale")
    if not allow_scale_override:
        e_ell = scale_ell(p.epsilon, p.s, p.log_base)
        e_L = scale_L(p.epsilon, p.s, p.log_base)
        if p.ell != e_ell:
            out.append(f"ell={p.ell} differs from scale formula value {e_ell}")
        if p.L != e_L:
            out.append(f"L={p.L} differs from scale formula value {e_L}")
    return out
