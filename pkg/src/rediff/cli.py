"""Command-line entry point.

Each run writes a directory ``<out>/<subcommand>-<mode>-<hash>`` holding
the resolved ``config.ini`` (always written first), ``report.json``, any
CSV tables and ``csv_schema.json`` describing their columns.  Exit status
is 0 on success, 2 on invalid input and 3 when an estimator refuses to
report (too many timeouts, no completed paths).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import ballistic_example as bx
from . import criterion as cr
from . import greenslab as gs
from . import oned
from .config import SCHEMA, ConfigError, RunConfig, schema_text
from .env import SpecError, derive_seed, sample_environment, verify_env_axioms
from .sde import Domain, EstimatorRefusal, MCEstimate, estimate_exit_stats, simulate

log = logging.getLogger("rediff")

MODES = {
    "env": ("axioms", "drift"),
    "sde": ("exit", "stats"),
    "criterion": ("evaluate", "kappa", "decay", "hierarchy", "recursion", "mirror"),
    "oned": ("identity", "dichotomy", "recursion", "chain"),
    "green": ("kernel", "apply", "bounds", "gamma"),
    "example": ("green", "phat", "rhohat", "perturb", "displacement", "delta", "assemble",
                "backtrack", "fluctuation"),
}

# flag -> (section, key)
FLAGS = {
    "d": ("env", "d"), "eps": ("env", "eps"), "lam": ("env", "lam"), "R": ("env", "R"),
    "L": ("geometry", "L"), "Ltilde": ("geometry", "Ltilde"), "L0": ("geometry", "L0"),
    "x": ("geometry", "x"), "a-grid": ("geometry", "a_grid"), "L-list": ("geometry", "L_list"),
    "N": ("geometry", "N"), "n-env": ("budgets", "n_env"), "n-path": ("budgets", "n_path"),
    "dt": ("budgets", "dt"), "max-time": ("budgets", "max_time"),
    "kappa": ("constants", "kappa"), "a": ("constants", "a"), "c3": ("constants", "c3"),
    "c7": ("constants", "c7"), "c12": ("constants", "c12"), "c17": ("constants", "c17"),
    "c20": ("constants", "c20"),
}


class Table:
    """Rows for one CSV file plus a description of each column."""

    def __init__(self, columns: dict, rows):
        self.columns = columns
        self.rows = [list(r) for r in rows]

    def render(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.columns))
        for r in self.rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        return buf.getvalue()


def jsonable(obj):
    if isinstance(obj, MCEstimate):
        return jsonable(obj.as_dict())
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, Fraction):
        return str(obj)
    if hasattr(obj, "as_dict"):
        return jsonable(obj.as_dict())
    if dataclasses.is_dataclass(obj):
        return jsonable(dataclasses.asdict(obj))
    return obj


# ----------------------------------------------------------------------------
# handlers: (cfg) -> (result, headline, tables)

def _points(cfg, d):
    x = np.asarray(cfg["geometry"]["x"], float)
    if x.size % d == 0:
        return x.reshape(-1, d)
    p = np.zeros((1, d))
    p[0, : min(d, x.size)] = x[:d]
    return p


def _ltilde(cfg, spec):
    lt = cfg["geometry"]["Ltilde"]
    return cfg["geometry"]["L"] + spec.R + 1.0 if lt is None else lt


def _need_kappa(cfg):
    k = cfg["constants"]["kappa"]
    if k is None:
        raise ConfigError("criterion decisions need an explicit kappa (constants.kappa or --kappa); "
                          "an estimated kappa is anti-conservative")
    return k


def _env(cfg, spec, tag="env"):
    return sample_environment(spec, derive_seed(cfg["run"]["seed"], tag))


def h_env(cfg, spec, mode):
    env = _env(cfg, spec)
    if mode == "axioms":
        rep = verify_env_axioms(env, n_probe=max(cfg["budgets"]["n_path"], 100),
                                n_seeds=cfg["budgets"]["n_env"])
        return rep.as_dict(), {"ok": rep.ok, "max_drift": rep.max_drift}, {}
    L = cfg["geometry"]["L"]
    pts = np.zeros((201, spec.d))
    pts[:, 0] = np.linspace(-L, L, 201)
    b = env.drift(pts)
    cols = {"x1": "position along e1"}
    cols.update({f"b{j + 1}": f"drift component {j + 1}" for j in range(spec.d)})
    tab = Table(cols, np.column_stack([pts[:, 0], b]))
    return {"n": 201, "seed": env.seed}, {"mean_b1": float(b[:, 0].mean())}, {"drift": tab}


def h_sde(cfg, spec, mode):
    env = _env(cfg, spec)
    g, b = cfg["geometry"], cfg["budgets"]
    x = _points(cfg, spec.d)[0]
    if mode == "exit":
        dom = Domain.slab(spec.d, g["L"])
        batch = simulate(env, x, dom, b["n_path"], b["dt"], seed=cfg["run"]["seed"],
                         max_time=b["max_time"], workers=cfg["run"]["workers"])
        batch.check_timeouts()
        summ = batch.summary()
        rec = list(csv.reader(io.StringIO(batch.to_csv())))
        tab = Table({c: "" for c in rec[0]}, rec[1:])
        tab.columns.update({"path": "path index", "exit_time": "exit time",
                            "face": "+, - or lateral", "steps": "Euler steps", "dt": "time step"})
        for j in range(spec.d):
            tab.columns[f"x{j + 1}"] = f"exit point component {j + 1}"
        t = summ["exit_time"]
        return summ, {"mean_exit_time": t["mean"], "stderr": t["stderr"]}, {"exits": tab}
    box = Domain.criterion_box(spec.d, g["L"], _ltilde(cfg, spec), spec.R)
    kappa = cfg["constants"]["kappa"] or 0.5
    st = estimate_exit_stats(env, x, box, max(b["n_path"], 1000), b["dt"], seed=cfg["run"]["seed"],
                             workers=cfg["run"]["workers"], kappa=kappa, max_time=b["max_time"])
    head = {k: st[k] for k in st if isinstance(st[k], (float, int))}
    return st, head, {}


def h_criterion(cfg, spec, mode):
    g, b, c = cfg["geometry"], cfg["budgets"], cfg["constants"]
    seed, workers = cfg["run"]["seed"], cfg["run"]["workers"]
    common = dict(dt=b["dt"], seed=seed, workers=workers)
    if mode == "evaluate":
        kappa = _need_kappa(cfg)
        rep = cr.evaluate_effective_criterion(spec, g["L"], _ltilde(cfg, spec), g["a_grid"], kappa,
                                              c["c7"], b["n_env"], b["n_path"],
                                              max_time=b["max_time"], **common)
        rows = []
        for box, mm in rep.moments.items():
            for a, m in mm.items():
                rows.append([box[0], box[1], a, m.mean, m.stderr, rep.lhs(box=box, a=a)])
        tab = Table({"L": "box depth", "Ltilde": "transverse half-width", "a": "moment exponent",
                     "moment": "mean of rho^a", "stderr": "standard error",
                     "lhs": "criterion left-hand side at c7"}, rows)
        return rep.as_dict(), {"min_lhs": rep.min_lhs, "decision": rep.decision}, {"moments": tab}
    if mode == "kappa":
        k, det = cr.estimate_kappa(spec, g["L"], b["n_env"], b["n_path"], return_details=True, **common)
        return {"kappa_hat": k, "details": det}, {"kappa_hat": k}, {}
    if mode == "decay":
        sc = cr.slab_exit_decay_scan(spec, g["b_back"], g["L_list"], b["n_env"], b["n_path"],
                                     max_time=b["max_time"], **common)
        rows = list(csv.reader(io.StringIO(sc.to_csv())))
        tab = Table({"L": "slab half-width", "p": "back-exit probability", "stderr": "standard error",
                     "neg_log_p": "-log p"}, rows[1:])
        return sc.as_dict(), {"rate": sc.rate, "accepted": sc.accepted}, {"decay": tab}
    if mode == "hierarchy":
        lt0 = g["Ltilde"] if g["Ltilde"] is not None else g["L0"] ** 2
        h = cr.build_hierarchy(Fraction(str(g["L0"])), Fraction(str(lt0)), R=spec.R, levels=g["levels"])
        rows = [[r["k"], str(r["L"]), str(r["Ltilde"]), str(r["N"]), str(r["a"]), str(r["u"])]
                for r in h.table()]
        tab = Table({"k": "level", "L": "depth (exact)", "Ltilde": "width (exact)", "N": "slabs",
                     "a": "moment exponent", "u": "decay exponent"}, rows)
        return {"table": h.table()}, {"L1": str(h.L(1))}, {"hierarchy": tab}
    if mode == "recursion":
        kappa = _need_kappa(cfg)
        lt0 = g["Ltilde"] if g["Ltilde"] is not None else g["L0"] ** 2
        h = cr.build_hierarchy(Fraction(str(g["L0"])), Fraction(str(lt0)), R=spec.R, levels=g["levels"])
        rows = cr.check_recursion(spec, h, g["k_max"], n_env=b["n_env"], n_path=b["n_path"],
                                  dt=b["dt"] or 0.02, kappa=kappa, c3=c["c3"], seed=seed, workers=workers)
        head = {f"holds_{r['k']}": r.get("holds") for r in rows}
        return {"rows": rows}, head, {}
    if mode == "mirror":
        res = cr.mirror_duality(spec, g["L"], b["n_env"], b["n_path"], Ltilde=g["Ltilde"],
                                alpha=c["alpha"], **common)
        return res, {"pvalue": res["pvalue"], "passed": res["passed"]}, {}
    raise ConfigError(f"unknown criterion mode {mode!r}")


def h_oned(cfg, spec, mode):
    if spec.d != 1:
        raise ConfigError("oned needs env.d = 1")
    g, b = cfg["geometry"], cfg["budgets"]
    seed = cfg["run"]["seed"]
    if mode == "identity":
        rep = oned.check_identity_275(spec, g["L"], b["n_env"], b["quad_step"], seed=seed)
        return rep.as_dict(), {"lhs": rep.lhs.mean, "rhs": rep.rhs.mean, "passed": rep.passed}, {}
    if mode == "dichotomy":
        rep = oned.transience_dichotomy(spec, g["L"], g["a_grid"], b["n_env"], b["horizon"],
                                     dt=b["dt"] or 0.05, seed=seed, workers=cfg["run"]["workers"],
                                     quad_step=b["quad_step"])
        return rep.as_dict(), {"verdict": rep.verdict}, {}
    if mode == "recursion":
        res = oned.eta_delta_recursion(spec, g["L0"], g["n_window"], b["n_env"], seed=seed,
                                       quad_step=b["quad_step"])
        rows = list(csv.reader(io.StringIO(res.to_csv())))
        tab = Table({c: "" for c in rows[0]}, rows[1:])
        tab.columns.update({k: v for k, v in {"n": "site index", "eta": "return probability",
                                              "log_delta": "log escape probability",
                                              "log_rho_hat": "log local odds"}.items()
                            if k in tab.columns})
        out = {"slope": res.slope, "target": res.target, "seeding": res.seeding, "extra": res.extra}
        return out, {"slope": res.slope.mean, "target": res.target.mean}, {"recursion": tab}
    if mode == "chain":
        env = _env(cfg, spec)
        q, lr = oned._chain_odds(env, g["L0"], g["n_window"], b["quad_step"])
        # left/right odds q/p at sites 0 .. n_window - 1, padded with unused ends
        rho = np.concatenate([[1.0], np.exp(lr), [1.0]])
        chain = oned.ChainSpec(rho, -1, g["n_window"])
        rows = [[s, oned.chain_exit_probability(chain, s)] for s in range(-1, g["n_window"] + 1)]
        tab = Table({"site": "chain site", "p_left": "probability of absorption at the left end"}, rows)
        mid = g["n_window"] // 2
        return {"p_left": [r[1] for r in rows]}, {"p_left_mid": rows[mid + 1][1]}, {"chain": tab}
    raise ConfigError(f"unknown oned mode {mode!r}")


def h_green(cfg, spec, mode):
    d = spec.d
    if d < 3:
        raise ConfigError("green needs env.d >= 3")
    g, c = cfg["geometry"], cfg["constants"]
    L = g["L"]
    kern = gs.SlabKernel(L, d, tol=c["tol"])
    x = _points(cfg, d)[0]
    if mode == "kernel":
        xs = np.zeros((201, d))
        xs[:, 0] = np.linspace(-L, L, 201)
        xs[:, 1] = x[1] + 0.5
        val = gs.green_function(kern, xs, x)
        grad = gs.green_gradient(kern, xs, x)
        cols = {"x1": "first coordinate of the field point", "g": "Green function"}
        cols.update({f"dg{j + 1}": f"derivative in x{j + 1}" for j in range(d)})
        tab = Table(cols, np.column_stack([xs[:, 0], val, grad]))
        return {"y": x, "gamma_d": kern.gamma}, {"g_mid": float(val[100])}, {"kernel": tab}
    if mode == "apply":
        res = gs.green_apply(kern, lambda p: np.ones(len(p)), x)
        exact = L * L - x[0] ** 2
        return ({"value": res.value, "error": res.error, "exact": exact},
                {"value": res.value, "relative_error": abs(res.value - exact) / exact}, {})
    if mode == "bounds":
        rng = np.random.default_rng(cfg["run"]["seed"])
        n = 400
        pts = rng.uniform(-1, 1, (2 * n, 2, d)) * np.array([0.95 * L] + [3 * L] * (d - 1))
        fit = gs.fit_green_bounds(kern, pts[:n, 0], pts[:n, 1], c17=c["c17"])
        chk = gs.check_green_bounds(kern, fit, pts[n:, 0], pts[n:, 1])
        return {"fit": fit, "held_out": chk}, {"ok": chk["ok"]}, {}
    if mode == "gamma":
        rows = []
        for Lk in g["L_list"]:
            k = gs.SlabKernel(Lk, d)
            y = np.zeros((1, d))
            gsum = gs.gamma_sums(k, y, spec.R, c17=c["c17"])
            rows.append([Lk, gsum.worst_gamma, gsum.worst_gamma_tilde,
                         gsum.worst_gamma_tilde / math.log(Lk)])
        tab = Table({"L": "slab half-width", "sum_gamma": "L^2 sum gamma^2",
                     "sum_gamma_tilde": "L^2 sum gamma_tilde^2",
                     "sum_gamma_tilde_over_log_L": "previous column divided by log L"}, rows)
        sg = [r[1] for r in rows]
        return {"rows": rows}, {"gamma_spread": max(sg) / min(sg)}, {"gamma": tab}
    raise ConfigError(f"unknown green mode {mode!r}")


def h_example(cfg, spec, mode):
    g, b, c = cfg["geometry"], cfg["budgets"], cfg["constants"]
    seed, workers = cfg["run"]["seed"], cfg["run"]["workers"]
    params = bx.ExampleParams(eps=spec.eps, eta=spec.eta, d=spec.d, R=spec.R,
                              N=g["N"] or None, a=c["a"], c12=c["c12"])
    kappa = c["kappa"] if c["kappa"] is not None else 0.5
    log.info("example constants: kappa=%s c12=%s c20=%s a=%s", kappa, c["c12"], c["c20"], c["a"])
    head = {"stamp": bx.DESK_STAMP if params.desk_scale else ""}
    if mode == "delta":
        val, ok, terms = bx.delta_condition(params)
        head.update(delta_inverse=val, passes=ok)
        return {"params": params.as_dict(), "delta_inverse": val, "passes": ok, "terms": terms}, head, {}
    if mode == "fluctuation":
        res = bx.fluctuation_scan(spec.d, [int(v) for v in g["L_list"]], b["n_env"], R=spec.R,
                                  lam_ratio=spec.lam / spec.eps if spec.eps else 0.0, seed=seed)
        tab = Table({"L": "slab half-width", "std": "spread over environments",
                     "stderr": "standard error of the mean"},
                    [[r["L"], r["std"], r["stderr"]] for r in res["rows"]])
        head["decreasing"] = res["decreasing"]
        return res, head, {"fluctuation": tab}
    if mode in ("rhohat", "assemble"):
        params.check_spec(spec)
        if mode == "rhohat":
            est = bx.rhohat_estimate(spec, params, b["n_env"], b["n_path"], dt=b["dt"], seed=seed,
                                     workers=workers, transverse_extent=g["transverse_extent"])
            head.update(mean=est.mean, below_one=est.extra["below_one"])
            return {"params": params.as_dict(), "rhohat": est}, head, {}
        rep = bx.assemble_box_bound(spec, params, b["n_env"], b["n_path"], b["dt"], kappa=kappa,
                                 seed=seed, workers=workers)
        head.update(bound=rep["bound"], p_L=rep["p_L"].mean)
        return rep, head, {}
    env = _env(cfg, spec)
    L = params.L
    pts = _points(cfg, spec.d)
    if mode == "green":
        est = bx.green_op_quenched(env, "one", pts[0], b["n_path"], b["dt"], L=L, seed=seed,
                                   workers=workers, max_time=b["max_time"])
        head.update(mean_exit_time=est.mean, stderr=est.stderr)
        return est, head, {}
    if mode == "phat":
        rec = bx.phat_formula_vs_mc(env, pts[0], L, b["n_path"], b["dt"], seed=seed, workers=workers)
        head.update(mc=rec["mc"].mean, formula=rec["formula"].mean, agree=rec["agree"])
        return rec, head, {}
    if mode == "perturb":
        if spec.d < 3:
            raise ConfigError("perturb needs env.d >= 3")
        sep = gs.SeparableBump(L, [1.0], g["s"], d=spec.d)
        rows = bx.check_perturbation_identity(env, sep, pts, b["n_path"], b["dt"], seed=seed,
                                              workers=workers)
        tab = Table({"x1": "probe first coordinate", "lhs": "quenched Green operator of f",
                     "rhs": "free part plus correction", "residual": "lhs - rhs",
                     "combined_stderr": "combined standard error"},
                    [[r["x"][0], r["lhs"], r["rhs"], r["residual"], r["combined_stderr"]] for r in rows])
        head["all_passed"] = all(r["passed"] for r in rows)
        return {"rows": rows}, head, {"perturb": tab}
    if mode == "displacement":
        rows = bx.displacement_check(env, pts, L, None, b["n_path"], b["dt"], seed=seed, workers=workers)
        head["max_abs_gap"] = max(abs(r["gap"]) for r in rows)
        return {"rows": rows}, head, {}
    if mode == "backtrack":
        res = bx.supermartingale_exit_bound(env, L, b["n_path"], b["dt"], seed=seed, workers=workers)
        head.update(estimate=res["estimate"].mean, bound=res["bound"], ok=res["ok"])
        return res, head, {}
    raise ConfigError(f"unknown example mode {mode!r}")


HANDLERS = {"env": h_env, "sde": h_sde, "criterion": h_criterion, "oned": h_oned,
            "green": h_green, "example": h_example}


# ----------------------------------------------------------------------------

def validate(cfg: RunConfig):
    """Check every field before any simulation starts; returns the environment spec."""
    run, b, g = cfg["run"], cfg["budgets"], cfg["geometry"]
    sub = run["subcommand"]
    if sub not in MODES:
        raise ConfigError(f"unknown subcommand {sub!r}")
    if not run["mode"]:
        run["mode"] = MODES[sub][0]
    if run["mode"] not in MODES[sub]:
        raise ConfigError(f"mode {run['mode']!r} is not one of {', '.join(MODES[sub])}")
    if run["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    if b["n_env"] < 1 or b["n_path"] < 1:
        raise ConfigError("n_env and n_path must be positive")
    for k in ("dt", "max_time"):
        if b[k] is not None and not b[k] > 0:
            raise ConfigError(f"{k} must be positive")
    if not g["L"] > 0 or not g["L0"] > 0:
        raise ConfigError("L and L0 must be positive")
    k = cfg["constants"]["kappa"]
    if k is not None and not 0 < k <= 0.5:
        raise ConfigError("kappa must lie in (0, 1/2]")
    return cfg.env_spec()


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


def run(cfg: RunConfig, out: str | os.PathLike) -> tuple[int, Path | None]:
    """Validate, dispatch and write artifacts; returns ``(status, run_dir)``."""
    try:
        spec = validate(cfg)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2, None
    sub, mode = cfg["run"]["subcommand"], cfg["run"]["mode"]
    h = cfg.digest()
    rd = Path(out) / f"{sub}-{mode}-{h}"
    rd.mkdir(parents=True, exist_ok=True)
    _write(rd / "config.ini", cfg.render())
    try:
        result, head, tables = HANDLERS[sub](cfg, spec, mode)
    except EstimatorRefusal as exc:
        print(f"refused: {exc}", file=sys.stderr)
        _write(rd / "report.json", json.dumps({"schema": 1, "status": 3, "refusal": str(exc)},
                                              indent=2, sort_keys=True) + "\n")
        return 3, rd
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write(rd / "report.json", json.dumps({"schema": 1, "status": 2, "error": str(exc)},
                                              indent=2, sort_keys=True) + "\n")
        return 2, rd
    report = {"schema": 1, "status": 0, "subcommand": sub, "mode": mode, "config_hash": h,
              "seed": cfg["run"]["seed"], "headline": head, "result": result,
              "tables": sorted(tables)}
    for name, tab in tables.items():
        _write(rd / f"{name}.csv", tab.render())
    if tables:
        _write(rd / "csv_schema.json",
               json.dumps({n: t.columns for n, t in tables.items()}, indent=2, sort_keys=True) + "\n")
    _write(rd / "report.json", json.dumps(jsonable(report), indent=2, sort_keys=True) + "\n")
    return 0, rd


def seed_registry(out) -> list:
    """One entry per run directory under ``out``; unreadable runs are listed with an error."""
    out = Path(out)
    if not out.is_dir():
        raise ConfigError(f"{out} is not a directory")
    entries = []
    for rd in sorted(p for p in out.iterdir() if p.is_dir()):
        try:
            cfg = RunConfig.load(rd / "config.ini")
            rep = json.loads((rd / "report.json").read_text(encoding="utf-8"))
            entries.append({"dir": rd.name, "hash": cfg.digest(), "seed": cfg["run"]["seed"],
                            "subcommand": cfg["run"]["subcommand"], "mode": cfg["run"]["mode"],
                            "headline": rep.get("headline"), "status": rep.get("status")})
        except (OSError, ValueError, SpecError) as exc:
            entries.append({"dir": rd.name, "error": f"{type(exc).__name__}: {exc}"})
    return entries


def rerun(out, digest: str) -> dict:
    """Re-run the stored config with hash ``digest`` and compare its report byte for byte."""
    hits = [e for e in seed_registry(out) if e.get("hash") == digest]
    if not hits:
        raise ConfigError(f"no run with hash {digest}")
    rd = Path(out) / hits[0]["dir"]
    cfg = RunConfig.load(rd / "config.ini")
    with tempfile.TemporaryDirectory() as tmp:
        status, new = run(cfg, tmp)
        same = new is not None and (new / "report.json").read_bytes() == (rd / "report.json").read_bytes()
        head = json.loads((new / "report.json").read_text())["headline"] if new else None
    return {"hash": digest, "status": status, "reproduced": same, "headline": head}


# ----------------------------------------------------------------------------

def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file ([section] / key = value)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")
    for flag, (sec, key) in FLAGS.items():
        common.add_argument(f"--{flag}", dest=f"flag_{sec}_{key}", metavar=key.upper(),
                            help=f"sets {sec}.{key}")
    p = argparse.ArgumentParser(prog="rediff", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name, modes in MODES.items():
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("mode", nargs="?", choices=modes, default=None)
    sp = sub.add_parser("seeds", aliases=["seed_registry"], parents=[common], help="list prior runs or re-run one by hash")
    sp.add_argument("--rerun", metavar="HASH")
    sp = sub.add_parser("schema", parents=[common], help="print every config key with its default")
    return p


def build_config(args, environ=None) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.apply_environ(environ)
    if args.subcommand in MODES:
        cfg.set("run", "subcommand", args.subcommand)
        if args.mode:
            cfg.set("run", "mode", args.mode)
        elif not args.config:
            cfg.set("run", "mode", MODES[args.subcommand][0])
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if args.workers is not None:
        cfg.set("run", "workers", args.workers)
    for sec, keys in SCHEMA.items():
        for key in keys:
            v = getattr(args, f"flag_{sec}_{key}", None)
            if v is not None:
                cfg.set(sec, key, v)
    for s in args.set:
        cfg.set_text(s)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.subcommand == "schema":
            sys.stdout.write(schema_text())
            return 0
        if args.subcommand in ("seeds", "seed_registry"):
            if args.rerun:
                res = rerun(args.out, args.rerun)
                print(json.dumps(jsonable(res), indent=2, sort_keys=True))
                return 0 if res["reproduced"] else 1
            out = Path(args.out)
            entries = seed_registry(out) if out.exists() else []
            print(json.dumps(entries, indent=2, sort_keys=True))
            return 0
        cfg = build_config(args)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    status, rd = run(cfg, args.out)
    if status == 0:
        rep = json.loads((rd / "report.json").read_text())
        print(json.dumps({"dir": str(rd), "headline": rep["headline"]}, indent=2, sort_keys=True))
    return status


if __name__ == "__main__":
    sys.exit(main())
