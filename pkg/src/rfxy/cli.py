"""Command line interface: ``rfxy <subcommand> ...``.

Exit code 0 only when every hard assertion of the command passes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import DomainError, NumericError, ParameterError, ScaleError, SurgeryError
from .params import CleanConstants, ModelParams, validate_params


def _model_args(ap):
    ap.add_argument("--eps", type=float, default=0.1, help="field strength epsilon")
    ap.add_argument("--ell", type=int, default=None, help="override the small scale")
    ap.add_argument("--L", type=int, default=None, help="override the large scale")
    ap.add_argument("--log-base", choices=("e", "2"), default="e")


def _params(a) -> ModelParams:
    return ModelParams(a.eps, ell=a.ell, L=a.L, log_base=a.log_base)


def _load_theta(path):
    return np.load(path)


def cmd_gen_field(a):
    from .fields import ResolventSpec, resolvent_apply, sample_alpha

    p = _params(a)
    rf = sample_alpha(a.seed, a.l)
    lam = a.lam if a.lam is not None else p.lam
    fs = resolvent_apply(ResolventSpec(a.bc, a.l, lam, p.epsilon), rf)
    fs.save(a.out)
    np.save(f"{a.out}.alpha.npy", rf.alpha)
    print(json.dumps(fs.metadata(), sort_keys=True))
    return 0


def cmd_classify(a):
    from .classifier import FieldProvider
    from .fields import sample_alpha

    p = _params(a)
    prov = FieldProvider(sample_alpha(a.seed, a.N).alpha, p, CleanConstants())
    out = {}
    scales = (a.L0,) if a.L0 else sorted({x for x in (p.ell // 2, p.ell, p.L // 16) if x >= 1})
    for L0 in scales:
        cg = prov.grid(L0)
        out[str(L0)] = {"dirty_fraction": cg.dirty_fraction(), "boxes": int(cg.xi.size),
                        "c1_vacuous": bool(cg.c1_vacuous),
                        "fail_rates": {k: float(1 - v.mean()) for k, v in sorted(cg.flags.items())}}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_contours(a):
    from .coarse import contours_from_config

    cs = contours_from_config(_load_theta(a.config), _params(a))
    text = cs.to_json()
    if a.out:
        Path(a.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_surgery(a):
    from .classifier import FieldProvider
    from .fields import sample_alpha
    from . import surgery as sg

    p = _params(a)
    if a.config:
        theta = _load_theta(a.config)
        alpha = sample_alpha(a.seed, theta.shape[0]).alpha
    else:
        theta, alpha = sg.droplet_instance(a.seed, p, a.N)
    con, pf = sg.main_contour(theta, p)
    if con is None:
        print(json.dumps({"error": "no contour"}))
        return 1
    res = sg.surgery(theta, con, FieldProvider(alpha, p), p, pf.Psi, pf.psi)
    tr = res.trace()
    tr["support_ok"] = sg.support_check(theta, res, con, p)
    if a.trace:
        Path(a.trace).write_text(json.dumps(tr, indent=1, sort_keys=True) + "\n")
    print(json.dumps(tr["record"], sort_keys=True))
    return 0 if tr["support_ok"] else 1


def cmd_sample(a):
    from .fields import sample_alpha
    from .sampler import GibbsParams, run_chain

    gp = GibbsParams(a.beta, a.eps, boundary=a.boundary, n_burn=a.burn, n_sweeps=a.sweeps, seed=a.chain_seed,
                     method=a.method, order=a.order)
    res = run_chain(sample_alpha(a.seed, a.N).alpha, gp)
    stem = Path(a.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    res.write_csv(f"{stem}.csv")
    res.write_json(f"{stem}.json")
    np.save(f"{stem}.theta.npy", res.theta)
    print(json.dumps({k: res.summary[k] for k in ("Mx", "My", "energy", "acceptance")}, sort_keys=True))
    return 0


def cmd_experiment(a):
    from .harness import ExperimentSpec, apply_overrides, run_experiment

    if a.spec:
        base = json.loads(Path(a.spec).read_text())
        if a.kind and base.get("kind") != a.kind:
            raise ParameterError(f"spec kind {base.get('kind')!r} does not match {a.kind!r}")
    else:
        base = {"kind": a.kind}
    if a.out:
        base["output"] = a.out
    base = apply_overrides(base, a.set)
    spec = ExperimentSpec.from_json(json.dumps(base))
    rec = run_experiment(spec)
    print(json.dumps({"spec_hash": rec.spec_hash, "ok": rec.ok, "checks": rec.checks}, indent=2, sort_keys=True))
    return 0 if rec.ok else 1


def cmd_validate(a):
    p = ModelParams(a.eps, s=a.s, eta_lambda=a.eta_lambda, eta=a.eta, chi=a.chi, zeta=a.zeta, xi=a.xi,
                    ell=a.ell, L=a.L, log_base=a.log_base)
    bad = validate_params(p, allow_scale_override=a.allow_override)
    print(json.dumps({"ell": p.ell, "L": p.L, "lambda": p.lam, "violations": bad}, indent=2))
    return 0 if not bad else 1


def build_parser() -> argparse.ArgumentParser:
    from .harness import KINDS

    ap = argparse.ArgumentParser(prog="rfxy", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-field", help="sample alpha and write the resolvent field")
    _model_args(g)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--l", type=int, default=64)
    g.add_argument("--bc", choices=("D", "N"), default="D")
    g.add_argument("--lam", type=float, default=None)
    g.add_argument("--out", default="field")
    g.set_defaults(fn=cmd_gen_field)

    c = sub.add_parser("classify", help="clean/dirty statistics of a random field")
    _model_args(c)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--N", type=int, default=128)
    c.add_argument("--L0", type=int, default=None)
    c.set_defaults(fn=cmd_classify)

    k = sub.add_parser("contours", help="extract contours from a saved configuration (.npy angles)")
    _model_args(k)
    k.add_argument("config")
    k.add_argument("--out", default=None)
    k.set_defaults(fn=cmd_contours)

    s = sub.add_parser("surgery", help="run the contour surgery and report the energy gap")
    _model_args(s)
    s.add_argument("--config", default=None, help=".npy angles; default is a droplet instance")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--N", type=int, default=384)
    s.add_argument("--trace", default=None, help="write the JSON audit trace here")
    s.set_defaults(fn=cmd_surgery, L=32)

    m = sub.add_parser("sample", help="Monte Carlo run on one quenched field")
    m.add_argument("--eps", type=float, default=0.3)
    m.add_argument("--beta", type=float, default=40.0)
    m.add_argument("--N", type=int, default=64)
    m.add_argument("--seed", type=int, default=0, help="field seed")
    m.add_argument("--chain-seed", type=int, default=1)
    m.add_argument("--boundary", choices=("e1", "free", "angle"), default="e1")
    m.add_argument("--method", choices=("metropolis", "heatbath"), default="metropolis")
    m.add_argument("--order", choices=("sequential", "checkerboard"), default="sequential")
    m.add_argument("--burn", type=int, default=500)
    m.add_argument("--sweeps", type=int, default=2000)
    m.add_argument("--out", default="run")
    m.set_defaults(fn=cmd_sample)

    e = sub.add_parser("experiment", help="run an experiment from a JSON spec")
    e.add_argument("kind", nargs="?", choices=KINDS)
    e.add_argument("--spec", default=None, help="JSON spec file")
    e.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                   help="override a field by dotted path, e.g. config.samples=1000")
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_experiment)

    v = sub.add_parser("validate", help="check the parameter windows")
    _model_args(v)
    v.add_argument("--s", type=float, default=1 / 64)
    v.add_argument("--eta-lambda", type=float, default=1 / 16)
    v.add_argument("--eta", type=float, default=1 / 40)
    v.add_argument("--chi", type=float, default=1 / 32)
    v.add_argument("--zeta", type=float, default=1 / 32)
    v.add_argument("--xi", type=float, default=0.1)
    v.add_argument("--allow-override", action="store_true")
    v.set_defaults(fn=cmd_validate)
    return ap


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    if a.cmd == "experiment" and not (a.kind or a.spec):
        print("experiment: give a kind or --spec", file=sys.stderr)
        return 2
    try:
        return a.fn(a)
    except (ParameterError, DomainError, ScaleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (SurgeryError, NumericError) as e:
        print(f"assertion failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
