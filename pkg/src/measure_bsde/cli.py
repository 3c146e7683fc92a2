"""Command line driver: ``measure-bsde <command> config.json [--out DIR] [--seed S] [--threads T]``.

Every run validates its JSON config against a strict schema, fills in
defaults, and writes ``report.json`` (with the resolved config echoed) plus
CSV tables into the output directory. Exit codes: 0 success/converged,
2 the model did not converge or a check failed, 1 configuration or domain
error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bmo import (bmo_report, growth_apriori_inputs, negative_moment_bound,
                  reverse_holder_exponent)
from .core import TimeGrid, build_lattice, simulate_paths, terminal_builtin
from .errors import MeasureBsdeError
from .generators import (InfConvolutionSpec, MollifierSpec, TruncationSpec, build_generator, evaluate,
                         g_to_f, inf_convolve, line_probe, mollify, probe_grid, truncate_nm)
from .lattice import SolverOptions, _split, solve_measure_solution, terminal_values
from .montecarlo import McOptions, mc_solve
from .stability import SequenceScenario, run_stability

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
THREADS_ENV = "MEASURE_BSDE_THREADS"
TRACE_COLUMNS = ["iter", "residual", "a_residual", "Y0", "damping"]

_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj({
    "model": _obj({
        "engine": {"enum": ["lattice", "montecarlo"]},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "steps": {"type": "integer", "minimum": 1},
        "d": {"type": "integer", "minimum": 1},
        "paths": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "tree": {"enum": ["auto", "full", "recombining"]},
    }),
    "terminal": _obj({"name": {"type": "string"}, "params": {"type": "object"}}),
    "generator": _obj({"name": {"type": "string"}, "params": {"type": "object"},
                       "transforms": {"type": "array", "items": {"type": "string"}}}),
    "solver": _obj({
        "tol": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
        "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "clip": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "z_eps": {"type": "number", "minimum": 0},
        "target": {"enum": ["measure", "almost"]},
        "allow_unbounded": _bool,
        "multiplier": {"enum": ["exponential", "product"]},
        "bootstrap": {"type": "integer", "minimum": 2},
    }),
    "oracle": _obj({
        "name": {"enum": ["conditional_mean", "girsanov_shift", "exp_transform"]},
        "levels": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "tolerance": {"type": ["number", "null"], "minimum": 0},
    }),
    "stability": _obj({
        "family": {"enum": ["truncation", "mollification", "terminal_shift", "constant"]},
        "params": {"type": "array", "items": _num, "minItems": 1},
        "p": {"type": "number", "exclusiveMinimum": 1},
        "q": {"type": "number", "exclusiveMinimum": 1},
        "variant": {"enum": ["measure", "almost", None]},
        "delta": {"type": "number", "exclusiveMinimum": 0},
        "weak_threshold": {"type": "number", "exclusiveMinimum": 0},
        "z_gap_threshold": {"type": "number", "exclusiveMinimum": 0},
        "z_probe_min": {"type": "number", "minimum": 0},
        "compact_radius": {"type": "number", "exclusiveMinimum": 0},
    }),
    "bmo": _obj({
        "K": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "safety": {"type": "number", "minimum": 1},
        "q": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    }),
    "regularize": _obj({
        "n": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "truncation": {"type": "array", "items": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}},
        "mollify_eps": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "points": {"type": "integer", "minimum": 2},
        "z_max": {"type": "number", "exclusiveMinimum": 0},
        "y": _num,
        "K_y": {"type": "number", "exclusiveMinimum": 0},
    }),
    "bench": _obj({"repeats": {"type": "integer", "minimum": 1}}),
})

DEFAULTS = {
    "model": {"engine": "lattice", "T": 1.0, "steps": 64, "d": 1, "paths": 100000, "seed": 0, "tree": "auto"},
    "terminal": {"name": "tanh_WT", "params": {}},
    "generator": {"name": "zero", "params": {}, "transforms": []},
    "solver": {"tol": None, "max_iter": 200, "damping": 1.0, "clip": 0.95, "z_eps": 1e-12,
               "target": "measure", "allow_unbounded": False, "multiplier": "exponential", "bootstrap": 200},
    "oracle": {"name": "conditional_mean", "levels": None, "tolerance": None},
    "stability": {"family": "constant", "params": [1, 2, 3, 4], "p": 2.0, "q": 2.0, "variant": None,
                  "delta": 1e-8, "weak_threshold": 1e-6, "z_gap_threshold": 1e-3, "z_probe_min": 0.05,
                  "compact_radius": 2.0},
    "bmo": {"K": None, "safety": 2.0, "q": 0.999},
    "regularize": {"n": [1, 2, 3], "truncation": [[1, 1], [1, 2], [2, 2]], "mollify_eps": [0.1],
                   "points": 500, "z_max": 5.0, "y": 0.0, "K_y": 1.0},
    "bench": {"repeats": 3},
}


def resolve_config(raw: dict) -> dict:
    """Validate a raw config and return it with every default filled in."""
    jsonschema.validate(raw, SCHEMA)
    cfg = copy.deepcopy(DEFAULTS)
    for key, block in raw.items():
        cfg[key].update(copy.deepcopy(block))
    if cfg["oracle"]["levels"] is None:
        cfg["oracle"]["levels"] = [cfg["model"]["steps"]]
    if cfg["solver"]["tol"] is None:
        cfg["solver"]["tol"] = 1e-9 if cfg["model"]["engine"] == "lattice" else 1e-4
    jsonschema.validate(cfg, SCHEMA)
    return cfg


# ---------------------------------------------------------------- builders

def _terminal(cfg):
    return terminal_builtin(cfg["terminal"]["name"], cfg["terminal"]["params"])


def _generator(cfg):
    gc = cfg["generator"]
    return build_generator(gc["name"], gc["params"], gc["transforms"], d=cfg["model"]["d"])


def _lattice(cfg, steps=None, xi=None):
    m = cfg["model"]
    tree = m["tree"]
    if tree == "auto":
        tree = "recombining" if (xi is None or xi.markov) else "full"
    return build_lattice(m["T"], steps or m["steps"], recombining=(tree == "recombining"))


def _lattice_opts(cfg):
    s = cfg["solver"]
    return SolverOptions(tol=s["tol"], max_iter=s["max_iter"], damping=s["damping"], clip=s["clip"],
                         z_eps=s["z_eps"], target=s["target"], allow_unbounded=s["allow_unbounded"])


def _mc_opts(cfg):
    s = cfg["solver"]
    return McOptions(tol=s["tol"], max_iter=s["max_iter"], damping=s["damping"], clip=s["clip"],
                     z_eps=s["z_eps"], target=s["target"], allow_unbounded=s["allow_unbounded"],
                     multiplier=s["multiplier"], bootstrap=s["bootstrap"])


def _ensemble(cfg, threads, steps=None):
    m = cfg["model"]
    return simulate_paths(TimeGrid(m["T"], steps or m["steps"]), m["d"], m["paths"], m["seed"], threads=threads)


def _solve(cfg, threads, steps=None):
    g, xi = _generator(cfg), _terminal(cfg)
    if cfg["model"]["engine"] == "lattice":
        model = _lattice(cfg, steps, xi)
        return model, solve_measure_solution(g, xi, model, _lattice_opts(cfg))
    ens = _ensemble(cfg, threads, steps)
    return ens, mc_solve(g, xi, ens, opts=_mc_opts(cfg))


def _engine_meta(cfg, context, threads):
    meta = {"engine": cfg["model"]["engine"], "threads": threads, "numpy": np.__version__,
            "package": __version__}
    if cfg["model"]["engine"] == "lattice":
        meta["tree"] = "recombining" if context.recombining else "full"
    return meta


# ---------------------------------------------------------------- output

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_report(out: Path, cfg, command, result, meta, wall):
    report = {"command": command, "config": cfg, "result": result, "engine": meta, "wall_clock_s": wall}
    with open(out / "report.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_clean(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_trace(out: Path, trace):
    _write_csv(out / "trace.csv", TRACE_COLUMNS, [[row[c] for c in TRACE_COLUMNS] for row in trace])


# ---------------------------------------------------------------- commands

def cmd_solve(cfg, out, threads):
    context, res = _solve(cfg, threads)
    _write_trace(out, res.trace)
    summary = res.summary()
    print(json.dumps(_clean({"Y0": summary["Y0"], "residual": summary["residual"],
                             "iterations": summary["iterations"], "converged": summary["converged"]})))
    return summary, _engine_meta(cfg, context, threads), EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _probe_equal(g, fn, d, tol=1e-12):
    probes = probe_grid(d, 1.0, w_values=(-1.0, 0.0, 1.0))
    got = np.asarray(evaluate(g, probes), dtype=float)
    want = fn(probes.z)
    return bool(np.max(np.abs(got - want)) <= tol)


def _check_oracle(name, g, cfg):
    d = cfg["model"]["d"]
    if name == "conditional_mean":
        ok = _probe_equal(g, lambda z: np.zeros_like(z), d)
        why = "conditional_mean needs g = 0"
    elif name == "girsanov_shift":
        probes = probe_grid(d, 1.0, w_values=(-1.0, 0.0, 1.0))
        v = np.asarray(evaluate(g, probes), dtype=float)
        ok = bool(np.max(np.abs(v - v[0])) <= 1e-12)
        why = "girsanov_shift needs g constant in (t, w, y, z)"
    else:
        ok = _probe_equal(g, lambda z: 0.5 * z, d) and cfg["terminal"]["name"] != "raw_WT"
        why = "exp_transform needs g(z) = z/2 and a bounded terminal condition"
    if not ok:
        raise MeasureBsdeError(f"oracle mismatch: {why} (generator {g.name!r})")


def _oracle_value_lattice(name, g, xi, model):
    """Independent closed forms evaluated by brute force on the same tree."""
    leaf = terminal_values(model, xi)
    pK = model.prob(model.steps)
    if name == "conditional_mean":
        return float(np.dot(pK, leaf))
    if name == "girsanov_shift":
        b = float(np.asarray(g.at(0.0, np.zeros((1, 1))))[0, 0])
        qu = 0.5 * (1 + b * model.grid.sqrt_dt)
        K = model.steps
        if model.recombining:
            from scipy.stats import binom

            return float(np.dot(binom.pmf(np.arange(K + 1), K, qu), leaf))
        ups = np.array([bin(i).count("1") for i in range(2**K)])
        return float(np.dot(qu**ups * (1 - qu) ** (K - ups), leaf))
    return float(np.log(np.dot(pK, np.exp(leaf))))


def _oracle_value_mc(name, g, xi, ens):
    W_T = ens.W()[:, -1]
    leaf = np.asarray(xi.of_terminal(W_T), dtype=float)
    if name == "conditional_mean":
        return float(leaf.mean())
    if name == "girsanov_shift":
        b = np.asarray(g.at(0.0, np.zeros((1, ens.dimension))))[0]
        # reweight by the exact Girsanov density of a constant drift
        T = ens.grid.horizon
        R = np.exp(W_T @ b - 0.5 * float(b @ b) * T)
        return float(np.dot(R, leaf) / R.sum())
    return float(np.log(np.mean(np.exp(leaf))))


def cmd_oracle(cfg, out, threads):
    oc = cfg["oracle"]
    g, xi = _generator(cfg), _terminal(cfg)
    _check_oracle(oc["name"], g, cfg)
    rows, worst = [], EXIT_OK
    meta = None
    for K in oc["levels"]:
        context, res = _solve(cfg, threads, steps=K)
        meta = meta or _engine_meta(cfg, context, threads)
        if cfg["model"]["engine"] == "lattice":
            oracle = _oracle_value_lattice(oc["name"], g, xi, context)
            tol = oc["tolerance"] if oc["tolerance"] is not None else 1e-12
            if oc["name"] == "conditional_mean":
                # node-wise comparison against backward induction under P
                ref = terminal_values(context, xi)
                gap = 0.0
                for k in range(context.steps, -1, -1):
                    gap = max(gap, float(np.max(np.abs(np.asarray(res.Y[k]) - ref))))
                    if k:
                        dn, up = _split(context, ref)
                        ref = 0.5 * (dn + up)
            else:
                gap = abs(res.Y0 - oracle)
            solver_value = res.Y0
        else:
            oracle = _oracle_value_mc(oc["name"], g, xi, context)
            solver_value = res.Y0
            gap = abs(solver_value - oracle)
            tol = oc["tolerance"] if oc["tolerance"] is not None else 3 * res.y0_ci + context.grid.dt
        ok = bool(res.converged and gap <= tol)
        if not ok:
            worst = EXIT_NOT_CONVERGED
        rows.append({"K": K, "solver": solver_value, "oracle": oracle, "gap": gap, "tolerance": tol,
                     "status": "PASS" if ok else "FAIL", "iterations": res.iterations})
    order = None
    if len(rows) >= 2 and all(r["gap"] > 0 for r in rows):
        Ks = np.log([r["K"] for r in rows])
        order = float(-np.polyfit(Ks, np.log([r["gap"] for r in rows]), 1)[0])
    cols = ["K", "solver", "oracle", "gap", "tolerance", "status"]
    _write_csv(out / "table.csv", cols, [[r[c] for c in cols] for r in rows])
    for r in rows:
        print(f"K={r['K']:<5d} solver={r['solver']:.12g} oracle={r['oracle']:.12g} gap={r['gap']:.3e} {r['status']}")
    return {"oracle": oc["name"], "rows": rows, "empirical_order": order}, meta, worst


def _scenario(cfg):
    sc = cfg["stability"]
    g, xi = _generator(cfg), _terminal(cfg)
    kw = {k: sc[k] for k in ("p", "q", "delta", "weak_threshold", "z_gap_threshold", "z_probe_min",
                             "compact_radius")}
    if sc["variant"] is not None:
        kw["variant"] = sc["variant"]
    kw["opts"] = _lattice_opts(cfg)
    fam = sc["family"]
    if fam == "constant":
        return SequenceScenario.constant(g, xi, len(sc["params"]), **kw)
    if fam == "truncation":
        return SequenceScenario.truncation(g, xi, [int(v) for v in sc["params"]], **kw)
    if fam == "mollification":
        return SequenceScenario.mollification(g, xi, sc["params"], **kw)
    return SequenceScenario.terminal_shift(g, xi, sc["params"], **kw)


def cmd_stability(cfg, out, threads):
    if cfg["model"]["engine"] != "lattice":
        raise MeasureBsdeError("stability runs on the lattice engine")
    model = _lattice(cfg, xi=_terminal(cfg))
    rep = run_stability(_scenario(cfg), model, threads=threads)
    header, body = rep.table()
    _write_csv(out / "table.csv", header, body)
    print(json.dumps(_clean({"scenario": rep.scenario, "passed": rep.passed, "checks": rep.checks})))
    return rep.to_dict(), _engine_meta(cfg, model, threads), EXIT_OK if rep.passed else EXIT_NOT_CONVERGED


def cmd_bmo(cfg, out, threads):
    bc = cfg["bmo"]
    if bc["K"] is not None:
        K = bc["K"]
        nm = negative_moment_bound(K)
        rh = reverse_holder_exponent(K, bc["safety"])
        result = {"K": K, "negative_moment": {"r": nm.r, "C": nm.C},
                  "reverse_holder": {"p": rh.p, "p_minus_1": rh.p_minus_1, "Phi_p": rh.phi, "bound": rh.bound}}
        print(f"K={K:g} r={nm.r:.5f} C={nm.C:.5f} p={rh.p:.6g} bound={rh.bound:.6g}")
        return result, {"engine": "formula", "package": __version__}, EXIT_OK
    context, res = _solve(cfg, threads)
    g, xi = _generator(cfg), _terminal(cfg)
    C, norm_phi = 0.0, 0.0
    if cfg["model"]["engine"] == "lattice":
        C, norm_phi = growth_apriori_inputs(g.growth, context)
    rep = bmo_report(res.Z, context, C=C, norm_phi=norm_phi, Y_sup=xi.bound, q=bc["q"], safety=bc["safety"])
    result = rep.to_dict()
    result["converged"] = res.converged
    result["within_apriori"] = bool(rep.norm_estimate <= rep.apriori["K_bound"])
    print(json.dumps(_clean({"norm": rep.norm_estimate, "method": rep.method, "apriori": rep.apriori})))
    return result, _engine_meta(cfg, context, threads), EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_regularize(cfg, out, threads):
    rc = cfg["regularize"]
    g = _generator(cfg)
    if g.d != 1:
        raise MeasureBsdeError("regularize tabulates one-dimensional generators")
    f = g_to_f(g)
    probes = line_probe(np.linspace(-rc["z_max"], rc["z_max"], rc["points"]), y=rc["y"])
    cols = {"z": probes.z[:, 0], "f": evaluate(f, probes)}
    for n in rc["n"]:
        fn = inf_convolve(f, InfConvolutionSpec(n, rc["K_y"]), allow_unbounded=True)
        cols[f"f_{n}"] = evaluate(fn, probes)
    for n, m in rc["truncation"]:
        f_nm = truncate_nm(f, TruncationSpec(n, m))[0]
        cols[f"f_{n}_{m}"] = evaluate(f_nm, probes)
    for eps in rc["mollify_eps"]:
        cols[f"f_eps_{eps:g}"] = evaluate(mollify(f, MollifierSpec(eps), allow_unbounded=True), probes)
    header = list(cols)
    data = np.column_stack([np.asarray(cols[h], dtype=float) for h in header])
    _write_csv(out / "table.csv", header, data.tolist())
    ns = rc["n"]
    mono = all(bool(np.all(cols[f"f_{a}"] <= cols[f"f_{b}"] + 1e-12)) for a, b in zip(ns, ns[1:]))
    below = all(bool(np.all(cols[f"f_{n}"] <= cols["f"] + 1e-12)) for n in ns)
    result = {"columns": header, "rows": rc["points"], "infconv_monotone": mono, "infconv_below_f": below}
    print(json.dumps(result))
    return result, {"engine": "probe_grid", "package": __version__}, EXIT_OK


def cmd_bench(cfg, out, threads):
    times = []
    res = context = None
    for _ in range(cfg["bench"]["repeats"]):
        t0 = time.perf_counter()
        context, res = _solve(cfg, threads)
        times.append(time.perf_counter() - t0)
    result = {"seconds": times, "best": min(times), "median": float(np.median(times)), "Y0": res.Y0,
              "iterations": res.iterations, "converged": res.converged}
    print(json.dumps(_clean({"best": result["best"], "median": result["median"]})))
    return result, _engine_meta(cfg, context, threads), EXIT_OK


COMMANDS = {"solve": cmd_solve, "oracle": cmd_oracle, "stability": cmd_stability, "bmo": cmd_bmo,
            "regularize": cmd_regularize, "bench": cmd_bench}


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise MeasureBsdeError(f"{THREADS_ENV}={env!r} is not an integer") from None
        if n < 1:
            raise MeasureBsdeError(f"{THREADS_ENV} must be >= 1")
        return n
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="measure-bsde", description="Measure solutions of BSDEs on lattices and paths")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="JSON run configuration")
        sp.add_argument("--out", default=".", help="output directory (default: current)")
        sp.add_argument("--seed", type=int, default=None, help="override model.seed")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args.threads)
        if threads < 1:
            raise MeasureBsdeError("--threads must be >= 1")
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        if args.seed is not None:
            raw.setdefault("model", {})["seed"] = args.seed
        cfg = resolve_config(raw)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        # BLAS stays single threaded so results do not depend on --threads
        with threadpool_limits(limits=1):
            result, meta, code = COMMANDS[args.command](cfg, out, threads)
        _write_report(out, cfg, args.command, result, meta, time.perf_counter() - t0)
        return code
    except jsonschema.ValidationError as exc:
        path = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        print(f"error: invalid config at {path}: {exc.message}", file=sys.stderr)
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
    except (MeasureBsdeError, OSError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
