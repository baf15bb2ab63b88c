"""Experiment specs, orchestration and reproducible outputs.

A spec is one JSON document. Outputs are CSV tables plus ``record.json``;
wall-clock timing goes to ``timing.json`` so that every other file is
byte-identical across re-runs of the same spec.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ParameterError, SurgeryError, NumericError
from .params import CleanConstants, ModelParams, validate_params

KINDS = (
    "field-variance", "sup-tail", "dn-energy-diff", "dirty-fraction",
    "contour-census", "surgery-gap", "magnetization", "variational-probe",
)

DEFAULTS = {
    "field-variance": {"l": 64, "bc": "D", "samples": 100000, "chunk": 5000, "epsilon": 0.05},
    "sup-tail": {"l": 128, "bc": "D", "samples": 10000, "M": [2, 4, 6], "epsilon": 0.1},
    "dn-energy-diff": {"l": 64, "samples": 1000, "epsilon": 0.1, "lam_factor": 10.0, "bound_constant": 10.0},
    "dirty-fraction": {"eps": [0.3, 0.2, 0.1], "boxes": 200},
    "contour-census": {"N": 64, "beta": 40.0, "n_burn": 200, "n_sweeps": 200, "ell": 4, "L": 8},
    "surgery-gap": {"N": 384, "L": 32, "radius": [6, 12], "min_fraction": 0.95},
    "magnetization": {"N": 64, "betas": [40.0], "n_burn": 500, "n_sweeps": 2000, "method": "metropolis",
                      "boundary": "e1"},
    "variational-probe": {"draws": 200, "bound": 0.3, "min_fraction": 0.95},
}


@dataclass
class ExperimentSpec:
    kind: str
    params: dict = field(default_factory=lambda: {"epsilon": 0.1})
    consts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    output: str = "out"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown experiment kind {self.kind!r}")
        self.config = {**DEFAULTS[self.kind], **self.config}

    def canonical(self) -> dict:
        return {"kind": self.kind, "params": self.params, "consts": self.consts,
                "config": self.config, "seeds": list(self.seeds)}

    @property
    def hash(self) -> str:
        s = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(s.encode()).hexdigest()

    def model(self) -> ModelParams:
        return ModelParams.from_dict(self.params)

    def clean(self) -> CleanConstants:
        return CleanConstants(**self.consts)

    def to_json(self) -> str:
        return json.dumps({**self.canonical(), "output": self.output}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        d = json.loads(text)
        return cls(d["kind"], d.get("params", {"epsilon": 0.1}), d.get("consts", {}), d.get("config", {}),
                   d.get("seeds", [0]), d.get("output", "out"))

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_json(Path(path).read_text())


def apply_overrides(d: dict, items) -> dict:
    """Set leaf fields from ``a.b.c=value`` strings; values parse as JSON when possible."""
    d = copy.deepcopy(d)
    for it in items or ():
        key, _, raw = it.partition("=")
        if not key or not _:
            raise ParameterError(f"override {it!r} is not of the form path=value")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return d


@dataclass
class RunRecord:
    spec_hash: str
    code_version: str
    wall_clock: float
    checks: dict
    tables: dict

    @property
    def ok(self) -> bool:
        return all(c["pass"] for c in self.checks.values() if c.get("hard"))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_table(rows, path, spec_hash, seeds) -> None:
    """CSV with a comment header carrying the spec hash and seeds."""
    keys = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        fh.write(f"# spec_hash={spec_hash} seeds={json.dumps(list(seeds))}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in keys])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        f = float(x)
        return f if math.isfinite(f) else str(f)
    return x


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("RFXY_WORKERS", "1")))
    except ValueError:
        return 1


def _map(fn, units, workers=None):
    """Run units (possibly in parallel); results come back in unit order."""
    workers = workers or n_workers()
    if workers == 1 or len(units) < 2:
        return [fn(u) for u in units]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, units))


# ------------------------------------------------------------ work units

def _u_field_variance(u):
    from .fields import annulus_table, basis_1d, mode_table, n_annuli, sample_alpha_batch

    c, seed, start, n = u
    l, bc = c["l"], c["bc"]
    lam = c["lam"]
    B, _, _ = basis_1d(bc, l)
    _, _, zeta = mode_table(bc, l)
    ann = annulus_table(bc, l)
    x = (l // 2, l // 2)
    v = np.outer(B[:, x[0]], B[:, x[1]]) / (zeta + lam)
    U = np.stack([B.T @ np.where(ann == s, v, 0.0) @ B for s in range(n_annuli(l))]).reshape(n_annuli(l), -1)
    a = sample_alpha_batch(seed + start, n, l).reshape(n, -1)
    g = a @ U.T
    return {"n": n, "s2": (g**2).sum(axis=0), "s4": (g**4).sum(axis=0)}


def _run_field_variance(spec, p):
    from .fields import ResolventSpec, exact_annulus_variance, n_annuli

    c = dict(spec.config)
    c.setdefault("lam", ModelParams(c["epsilon"]).lam)
    seed = spec.seeds[0]
    units = [(c, seed, st, min(c["chunk"], c["samples"] - st)) for st in range(0, c["samples"], c["chunk"])]
    parts = _map(_u_field_variance, units)
    n = sum(q["n"] for q in parts)
    s2 = sum(q["s2"] for q in parts)
    s4 = sum(q["s4"] for q in parts)
    rs = ResolventSpec(c["bc"], c["l"], c["lam"], 1.0)
    x = (c["l"] // 2, c["l"] // 2)
    rows = []
    for s in range(n_annuli(c["l"])):
        ex = exact_annulus_variance(rs, s, x)
        mc = s2[s] / n
        se = math.sqrt(max(s4[s] / n - mc**2, 0.0) / n)
        z = (mc - ex) / se if se > 0 else 0.0
        rows.append({"s": s, "exact_var": ex, "mc_var": mc, "se": se, "z": z})
    checks = {"z_within_4": {"pass": all(abs(r["z"]) <= 4 for r in rows), "hard": True,
                             "max_abs_z": max(abs(r["z"]) for r in rows)}}
    return {"variance": rows}, checks


def _run_sup_tail(spec, p):
    from .fields import ResolventSpec, sup_tail_experiment

    c = spec.config
    rs = ResolventSpec(c["bc"], c["l"], ModelParams(c["epsilon"]).lam, c["epsilon"])
    rows = sup_tail_experiment(rs, c["M"], c["samples"], seed=spec.seeds[0])
    # p_{i+1} <= p_i / 2 read literally, so all-zero tails pass
    ok = all(rows[i + 1]["p_hat"] <= 0.5 * rows[i]["p_hat"] for i in range(len(rows) - 1))
    return {"tail": rows}, {"ratio_le_half": {"pass": ok, "hard": False, "p_hat": [r["p_hat"] for r in rows],
                                              "ci_hi": [r["ci_hi"] for r in rows]}}


def _run_dn(spec, p):
    from .fields import energy_diff_DN_batch, sample_alpha_batch

    c = spec.config
    l, eps = c["l"], c["epsilon"]
    lam = c["lam_factor"] / l**2
    a = sample_alpha_batch(spec.seeds[0], c["samples"], l)
    d = energy_diff_DN_batch(a, lam, eps)
    mean, se = float(d.mean()), float(d.std(ddof=1) / math.sqrt(len(d)))
    bound = c["bound_constant"] * eps**2 / (math.sqrt(lam) * l)
    exact = expected_dn_difference(l, lam, eps)
    rows = [{"l": l, "lam": lam, "samples": len(d), "mean": mean, "se": se, "exact_mean": exact, "bound": bound}]
    checks = {"mean_within_bound": {"pass": abs(mean) <= bound, "hard": False},
              "mean_matches_exact": {"pass": abs(mean - exact) <= 4 * se, "hard": True}}
    return {"dn_energy_diff": rows}, checks


def expected_dn_difference(l, lam, eps) -> float:
    """E[E(g^D|0) - E(g^N)] from the two spectra."""
    from .fields import mode_table

    zd, zn = mode_table("D", l)[2], mode_table("N", l)[2]
    return float(eps**2 * (np.sum(zd / (zd + lam) ** 2) - np.sum(zn / (zn + lam) ** 2)))


def _u_dirty(u):
    from .classifier import FieldProvider
    from .fields import sample_alpha

    eps, seed, N, consts, pd = u
    p = ModelParams.from_dict({**pd, "epsilon": eps, "ell": None, "L": None})
    cg = FieldProvider(sample_alpha(seed, N).alpha, p, CleanConstants(**consts)).grid(p.ell)
    return int((cg.xi == 0).sum()), int(cg.xi.size)


def _run_dirty(spec, p):
    from .fields import wilson_interval

    c = spec.config
    rows = []
    for eps in c["eps"]:
        ell = ModelParams.from_dict({**spec.params, "epsilon": eps, "ell": None, "L": None}).ell
        side = max(8, int(math.ceil(math.sqrt(c["boxes"] / len(spec.seeds)))))
        N = side * ell
        res = _map(_u_dirty, [(eps, s, N, spec.consts, spec.params) for s in spec.seeds])
        d, t = sum(r[0] for r in res), sum(r[1] for r in res)
        lo, hi = wilson_interval(d, t)
        rows.append({"epsilon": eps, "ell": ell, "dirty": d, "total": t, "fraction": d / t, "ci_lo": lo, "ci_hi": hi})
    fr = [r["fraction"] for r in rows]
    dec = all(a > b for a, b in zip(fr, fr[1:]))
    return {"dirty_fraction": rows}, {"strictly_decreasing": {"pass": dec, "hard": False}}


def _u_census(u):
    from .coarse import contours_from_config
    from .fields import sample_alpha
    from .sampler import GibbsParams, run_chain

    c, pd, fs, out = u
    p = ModelParams.from_dict({**pd, "ell": c["ell"], "L": c["L"]})
    gp = GibbsParams(c["beta"], p.epsilon, n_burn=c["n_burn"], n_sweeps=c["n_sweeps"], seed=int(fs) + 7919)
    res = run_chain(sample_alpha(int(fs), c["N"]).alpha, gp)
    live = contours_from_config(res.theta, p)
    path = Path(out) / f"config_{fs}.npy"
    np.save(path, res.theta)
    dumped = contours_from_config(np.load(path), p)
    return {"field_seed": int(fs), "contours": len(live), "total_size": int(sum(len(x) for x in live)),
            "dump_identical": live.to_json() == dumped.to_json()}


def _run_census(spec, p):
    rows = _map(_u_census, [(spec.config, spec.params, s, spec.output) for s in spec.seeds])
    return {"census": rows}, {"pipeline_composition": {"pass": all(r["dump_identical"] for r in rows), "hard": True}}


def surgery_instance(seed, p, c):
    """One droplet: regularity, then the energy gap; errors are recorded."""
    from .classifier import FieldProvider, regular
    from . import surgery as sg

    th, al = sg.droplet_instance(int(seed), p, c["N"], radius=tuple(c["radius"]))
    con, pf = sg.main_contour(th, p)
    row = {"seed": int(seed), "size": 0, "sign": 0, "regular": False, "R0": False, "R1": False, "R2": False,
           "R3": False, "gap": float("nan"), "normalized_gap": float("nan"), "support_ok": False,
           "mod3_boxes": 0, "error": ""}
    if con is None:
        row["error"] = "no contour"
        return row
    prov = FieldProvider(al, p)
    row["size"], row["sign"] = len(con), con.sign
    rep = regular(con.support, p, prov)
    row.update(regular=bool(rep.regular), R0=rep.r0, R1=rep.r1, R2=rep.r2, R3=rep.r3)
    try:
        r = sg.surgery(th, con, prov, p, pf.Psi, pf.psi)
    except (SurgeryError, NumericError) as e:
        row["error"] = f"{type(e).__name__}: {e}"
        return row
    row.update(gap=r.gap, normalized_gap=r.normalized_gap, support_ok=sg.support_check(th, r, con, p),
               mod3_boxes=r.info["mod3"]["boxes"])
    return row


def _u_surgery(u):
    c, pd, seed = u
    p = ModelParams.from_dict({**pd, "L": c["L"]})
    return surgery_instance(seed, p, c)


def _run_surgery(spec, p):
    c = spec.config
    rows = _map(_u_surgery, [(c, spec.params, s) for s in spec.seeds])
    reg = [r for r in rows if r["regular"] and not r["error"]]
    pos = sum(r["gap"] > 0 for r in reg)
    frac = pos / len(reg) if reg else float("nan")
    checks = {
        "gap_positive_on_regular": {"pass": bool(reg) and frac >= c["min_fraction"], "hard": False,
                                     "regular": len(reg), "positive": pos},
        "support_inside_delta": {"pass": all(r["support_ok"] for r in rows if not r["error"]), "hard": True},
    }
    return {"surgery_gap": rows}, checks


def _u_mag(u):
    from .fields import sample_alpha
    from .sampler import GibbsParams, run_chain, _chain_seed

    c, eps, beta, fs, seed = u
    gp = GibbsParams(beta, eps, boundary=c["boundary"], n_burn=c["n_burn"], n_sweeps=c["n_sweeps"],
                     method=c["method"], seed=_chain_seed(seed, fs, 0))
    res = run_chain(sample_alpha(int(fs), c["N"]).alpha, gp)
    s = res.summary
    return {"beta": beta, "field_seed": int(fs), "Mx": s["Mx"]["mean"], "My": s["My"]["mean"],
            "Mx_err": s["Mx"]["err"], "My_err": s["My"]["err"], "tau_Mx": s["Mx"]["tau_int"]}


def _run_mag(spec, p):
    c = spec.config
    units = [(c, p.epsilon, b, fs, 0) for b in c["betas"] for fs in spec.seeds]
    rows = _map(_u_mag, units)
    checks = {}
    for b in c["betas"]:
        sel = [r for r in rows if r["beta"] == b]
        k = sum(abs(r["Mx"]) > 2 * abs(r["My"]) for r in sel)
        checks[f"e1_order_beta_{b:g}"] = {"pass": k >= math.ceil(0.8 * len(sel)), "hard": False, "count": k}
    return {"magnetization": rows}, checks


def _u_probe(u):
    from .fields import sample_alpha
    from .surgery import variational_probe

    pd, seed, bound = u
    p = ModelParams.from_dict(pd)
    a = sample_alpha(int(seed), p.ell).alpha
    r0 = variational_probe(a, 0.0, p, bound)
    r1 = variational_probe(a, math.pi / 2, p, bound)
    return {"draw": int(seed), "pred_0": r0["quadratic_prediction"], "pred_half_pi": r1["quadratic_prediction"],
            "num_0": r0["numeric_max"], "num_half_pi": r1["numeric_max"]}


def _run_probe(spec, p):
    c = spec.config
    seeds = spec.seeds if len(spec.seeds) > 1 else range(spec.seeds[0], spec.seeds[0] + c["draws"])
    rows = _map(_u_probe, [(spec.params, s, c["bound"]) for s in seeds])
    k = sum(r["num_0"] > r["num_half_pi"] for r in rows)
    return {"variational_probe": rows}, {"psi0_beats_half_pi": {"pass": k >= c["min_fraction"] * len(rows),
                                                                "hard": False, "count": k, "draws": len(rows)}}


RUNNERS = {
    "field-variance": _run_field_variance, "sup-tail": _run_sup_tail, "dn-energy-diff": _run_dn,
    "dirty-fraction": _run_dirty, "contour-census": _run_census, "surgery-gap": _run_surgery,
    "magnetization": _run_mag, "variational-probe": _run_probe,
}


def run_experiment(spec: ExperimentSpec, allow_scale_override: bool = True) -> RunRecord:
    """Validate, run, write outputs under spec.output and return the record."""
    p = spec.model()
    bad = validate_params(p, allow_scale_override=allow_scale_override)
    if bad:
        raise ParameterError("invalid parameters: " + "; ".join(bad))
    spec.clean()
    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    tables, checks = RUNNERS[spec.kind](spec, p)
    wall = time.perf_counter() - t0
    h = spec.hash
    for name, rows in tables.items():
        write_table(rows, out / f"{name}.csv", h, spec.seeds)
    # the output path is not part of the experiment; leave it out so reruns elsewhere match
    (out / "spec.json").write_text(json.dumps(spec.canonical(), indent=2, sort_keys=True) + "\n")
    rec = RunRecord(h, __version__, wall, _jsonable(checks), {k: f"{k}.csv" for k in tables})
    body = {"spec_hash": h, "code_version": __version__, "kind": spec.kind, "seeds": list(spec.seeds),
            "checks": rec.checks, "tables": rec.tables, "ok": rec.ok}
    (out / "record.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps({"spec_hash": h, "seeds": list(spec.seeds), "wall_clock": wall}) + "\n")
    return rec


def output_digest(out_dir) -> dict:
    """sha256 of every output file except timing.json."""
    out = Path(out_dir)
    return {f.name: hashlib.sha256(f.read_bytes()).hexdigest()
            for f in sorted(out.iterdir()) if f.is_file() and f.name != "timing.json"}
