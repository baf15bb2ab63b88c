"""Single-site Monte Carlo for the random-field O(2) model.

The Gibbs weight is exp(beta * (-H)) with

    -H = sum_edges (cos(theta_x - theta_y) - 1) + eps * sum_x alpha_x sin(theta_x),

edges to a fixed boundary angle included. The conditional law of one angle
is von Mises with concentration beta |h| around arg h, where h is the sum of
neighbouring spins plus eps alpha_x e2.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._jit import njit
from .errors import ParameterError
from .fields import sample_alpha
from .spins import frame_hamiltonian

BOUNDARIES = ("e1", "free", "angle")
N_BATCHES = 32


@dataclass
class GibbsParams:
    beta: float
    epsilon: float
    boundary: str = "e1"
    boundary_angle: float = 0.0
    n_burn: int = 500
    n_sweeps: int = 2000
    measure_every: int = 1
    width: float = 1.0
    seed: int = 0
    method: str = "metropolis"
    order: str = "sequential"
    adapt: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ParameterError(f"beta={self.beta} must be non-negative")
        if not 0 < self.width <= math.pi:
            raise ParameterError(f"proposal width {self.width} not in (0, pi]")
        if self.boundary not in BOUNDARIES:
            raise ParameterError(f"boundary {self.boundary!r} not in {BOUNDARIES}")
        if self.method not in ("metropolis", "heatbath"):
            raise ParameterError(f"unknown method {self.method!r}")
        if self.order not in ("sequential", "checkerboard"):
            raise ParameterError(f"unknown order {self.order!r}")

    @property
    def pad(self) -> float:
        return 0.0 if self.boundary == "e1" else float(self.boundary_angle)

    @property
    def free(self) -> bool:
        return self.boundary == "free"


@dataclass
class ChainState:
    theta: np.ndarray
    alpha: np.ndarray
    sweep: int = 0
    width: float = 1.0
    accepted: int = 0
    proposed: int = 0

    @classmethod
    def start(cls, alpha, params: GibbsParams, init="boundary"):
        alpha = np.asarray(getattr(alpha, "alpha", alpha), dtype=float)
        if isinstance(init, np.ndarray):
            th = np.array(init, dtype=float)
        elif init == "random":
            th = np.random.default_rng(params.seed).uniform(-np.pi, np.pi, alpha.shape)
        else:
            th = np.full(alpha.shape, params.pad)
        return cls(th, alpha, 0, params.width)

    def magnetization(self):
        return float(np.cos(self.theta).mean()), float(np.sin(self.theta).mean())


@njit(cache=True)
def _seed(s):
    np.random.seed(s)


@njit(cache=True)
def _local_field(th, alpha, eps, pad, free, x, y):
    n, m = th.shape
    hx, hy = 0.0, eps * alpha[x, y]
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        u, v = x + dx, y + dy
        if 0 <= u < n and 0 <= v < m:
            hx += math.cos(th[u, v])
            hy += math.sin(th[u, v])
        elif not free:
            hx += math.cos(pad)
            hy += math.sin(pad)
    return hx, hy


@njit(cache=True)
def _update(th, alpha, beta, eps, pad, free, width, method, x, y):
    hx, hy = _local_field(th, alpha, eps, pad, free, x, y)
    if method == 0:
        old = th[x, y]
        new = old + width * (2.0 * np.random.random() - 1.0)
        d = hx * (math.cos(new) - math.cos(old)) + hy * (math.sin(new) - math.sin(old))
        if d >= 0 or np.random.random() < math.exp(beta * d):
            th[x, y] = (new + math.pi) % (2 * math.pi) - math.pi
            return 1
        return 0
    k = beta * math.sqrt(hx * hx + hy * hy)
    mu = math.atan2(hy, hx)
    if k < 1e-12:
        t = np.random.uniform(-math.pi, math.pi)
    else:
        t = np.random.vonmises(mu, k)
    th[x, y] = (t + math.pi) % (2 * math.pi) - math.pi
    return 1


@njit(cache=True)
def _sweep(th, alpha, beta, eps, pad, free, width, method, checker):
    n, m = th.shape
    acc = 0
    if checker:
        for parity in range(2):
            for x in range(n):
                for y in range(m):
                    if (x + y) % 2 == parity:
                        acc += _update(th, alpha, beta, eps, pad, free, width, method, x, y)
    else:
        for x in range(n):
            for y in range(m):
                acc += _update(th, alpha, beta, eps, pad, free, width, method, x, y)
    return acc


def neg_energy(state: ChainState, params: GibbsParams) -> float:
    """-H of the chain configuration with its boundary condition."""
    th, eps = state.theta, params.epsilon
    if params.free:
        e = np.sum(np.cos(np.diff(th, axis=0)) - 1) + np.sum(np.cos(np.diff(th, axis=1)) - 1)
        return float(e + eps * np.sum(state.alpha * np.sin(th)))
    return frame_hamiltonian(th, state.alpha, eps, params.pad)


def metropolis_sweep(state: ChainState, params: GibbsParams) -> ChainState:
    acc = _sweep(state.theta, state.alpha, params.beta, params.epsilon, params.pad, params.free,
                 state.width, 0, params.order == "checkerboard")
    state.accepted += int(acc)
    state.proposed += state.theta.size
    state.sweep += 1
    return state


def heatbath_sweep(state: ChainState, params: GibbsParams) -> ChainState:
    _sweep(state.theta, state.alpha, params.beta, params.epsilon, params.pad, params.free,
           state.width, 1, params.order == "checkerboard")
    state.accepted += state.theta.size
    state.proposed += state.theta.size
    state.sweep += 1
    return state


SWEEPS = {"metropolis": metropolis_sweep, "heatbath": heatbath_sweep}


def batch_means(x, n_batches: int = N_BATCHES):
    """(mean, standard error) from non-overlapping batch means."""
    x = np.asarray(x, float)
    b = len(x) // n_batches
    if b == 0:
        return float(x.mean()) if len(x) else float("nan"), float("nan")
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return float(x.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


def integrated_autocorr(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's automatic window."""
    from statsmodels.tsa.stattools import acf

    x = np.asarray(x, float)
    if len(x) < 4 or np.allclose(x, x[0]):
        return 0.5
    rho = acf(x, nlags=len(x) - 1, fft=True)
    tau = 0.5
    for t in range(1, len(rho)):
        tau += rho[t]
        if t >= c * tau:
            break
    return float(tau)


@dataclass
class RunResult:
    series: dict
    summary: dict
    theta: np.ndarray = field(repr=False, default=None)

    def write_csv(self, path) -> None:
        keys = ["sweep", "energy", "Mx", "My", "acceptance"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in zip(*(self.series[k] for k in keys)):
                w.writerow([row[0]] + [format(v, ".17g") for v in row[1:]])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)


def run_chain(alpha, params: GibbsParams, init="boundary", observer=None) -> RunResult:
    """Burn-in with width adaptation, then measured sweeps."""
    state = ChainState.start(alpha, params, init)
    _seed(params.seed)
    sweep = SWEEPS[params.method]
    for _ in range(params.n_burn):
        a0, p0 = state.accepted, state.proposed
        sweep(state, params)
        if params.adapt and params.method == "metropolis":
            r = (state.accepted - a0) / (state.proposed - p0)
            if r < 0.4:
                state.width = max(state.width * 0.9, 1e-3)
            elif r > 0.6:
                state.width = min(state.width * 1.1, math.pi)
    state.accepted = state.proposed = 0
    ser = {"sweep": [], "energy": [], "Mx": [], "My": [], "acceptance": []}
    for i in range(params.n_sweeps):
        a0, p0 = state.accepted, state.proposed
        sweep(state, params)
        if (i + 1) % params.measure_every == 0:
            mx, my = state.magnetization()
            ser["sweep"].append(state.sweep)
            ser["energy"].append(neg_energy(state, params))
            ser["Mx"].append(mx)
            ser["My"].append(my)
            ser["acceptance"].append((state.accepted - a0) / (state.proposed - p0))
            if observer is not None:
                observer(state)
    summ = {"params": asdict(params), "final_width": state.width,
            "acceptance": state.accepted / max(state.proposed, 1)}
    for k in ("energy", "Mx", "My"):
        m, se = batch_means(ser[k])
        summ[k] = {"mean": m, "err": se, "tau_int": integrated_autocorr(ser[k])}
    return RunResult(ser, summ, state.theta.copy())


def run_and_measure(params: GibbsParams, N: int, field_seeds, replicas: int = 1, contour_params=None,
                    census_every: int = 0) -> dict:
    """Chains over quenched fields and replicas; per-replica and field-averaged <M>.

    With ``contour_params`` and ``census_every``, the Psi field and the contour
    count are recorded along the chain.
    """
    from .coarse import contours_from_config, PhaseField

    per = []
    for fs in field_seeds:
        alpha = sample_alpha(int(fs), N).alpha
        reps = []
        for r in range(replicas):
            p = GibbsParams(**{**asdict(params), "seed": _chain_seed(params.seed, fs, r)})
            census = []

            def obs(state, census=census):
                if census_every and state.sweep % census_every == 0:
                    pf = PhaseField.from_config(state.theta, contour_params)
                    cs = contours_from_config(state.theta, contour_params)
                    census.append({"sweep": state.sweep, "contours": len(cs),
                                   "Psi_plus": float((pf.Psi == 1).mean()), "Psi_minus": float((pf.Psi == -1).mean())})

            res = run_chain(alpha, p, observer=obs if contour_params is not None else None)
            reps.append({"replica": r, "Mx": res.summary["Mx"], "My": res.summary["My"],
                         "energy": res.summary["energy"], "census": census})
        mx = float(np.mean([x["Mx"]["mean"] for x in reps]))
        my = float(np.mean([x["My"]["mean"] for x in reps]))
        err = float(math.sqrt(sum(x["Mx"]["err"] ** 2 for x in reps)) / len(reps))
        erry = float(math.sqrt(sum(x["My"]["err"] ** 2 for x in reps)) / len(reps))
        per.append({"field_seed": int(fs), "Mx": mx, "My": my, "Mx_err": err, "My_err": erry, "replicas": reps})
    return {
        "fields": per,
        "Mx": float(np.mean([f["Mx"] for f in per])),
        "My": float(np.mean([f["My"] for f in per])),
    }


def _chain_seed(seed, field_seed, replica) -> int:
    ss = np.random.SeedSequence([int(seed), int(field_seed), int(replica)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def exact_one_site_density(beta, eps, alpha0, pad=0.0, n=4, grid=4096):
    """Normalized density of the one-site marginal with n boundary neighbours."""
    t = (np.arange(grid) + 0.5) * 2 * np.pi / grid - np.pi
    logw = beta * (n * (np.cos(t - pad) - 1) + eps * alpha0 * np.sin(t))
    w = np.exp(logw - logw.max())
    return t, w / (w.sum() * 2 * np.pi / grid)
