"""Stability experiments: sequences of measure-solution problems and their limits.

A scenario is a sequence ``n -> (g_n, xi_n)`` with a limit problem
``(g, xi)``. Every member is solved on one lattice; the report tracks the
hypotheses (density moments, terminal and generator errors) and the
predicted convergences (Y in H^2, weak convergence of the measures through
test functionals, Z in measure).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import LatticeModel, TerminalCondition
from .errors import DomainError
from .generators import (GeneratorG, MollifierSpec, ProbeGrid, TruncationSpec, evaluate, g_to_f,
                         mollify, probe_grid, truncate_nm)
from .lattice import (MeasureSolutionResult, SolverOptions, solve_measure_solution,
                      terminal_values)

Z_PROBE_MIN = 0.05


@dataclass(frozen=True)
class WeakFunctional:
    """``X = fn(W_t)`` for a fixed time t (snapped to the grid)."""

    name: str
    time: float
    fn: Callable[[np.ndarray], np.ndarray]


def default_functionals(xi: TerminalCondition, T: float) -> list[WeakFunctional]:
    """xi itself, bounded polynomials of W at three times and an indicator."""
    out = [WeakFunctional("xi", T, lambda w: np.asarray(xi.of_terminal(w[:, None]), dtype=float))]
    for frac in (1 / 3, 2 / 3, 1.0):
        out.append(WeakFunctional(f"clip_poly@{frac:.3g}T", frac * T,
                                  lambda w: np.clip(w, -1, 1) ** 2 - 0.5 * np.clip(w, -1, 1)))
    out.append(WeakFunctional("min(W_T,1)", T, lambda w: np.minimum(w, 1.0)))
    out.append(WeakFunctional("1{W_T>0}", T, lambda w: (w > 0).astype(float)))
    return out


def truncated_g(g: GeneratorG, n: int, m: int) -> GeneratorG:
    """Hat generating function of the double truncation ``f_nm`` of ``f = z . g``."""
    return truncate_nm(g_to_f(g), TruncationSpec(n, m))[1]


@dataclass
class SequenceScenario:
    """A sequence of problems indexed by ``params`` and its limit.

    ``build(param)`` returns ``(g_n, xi_n)``. ``variant`` is ``"measure"`` for
    measure solutions or ``"almost"`` for almost-measure solutions, where the
    generator compacts exclude ``|z| < z_probe_min`` and the limit is solved
    with the masked residual. Generator errors are measured on probes with
    ``|z| <= compact_radius``.
    """

    name: str
    params: list
    build: Callable
    limit: tuple
    p: float = 2.0
    q: float = 2.0
    functionals: Optional[list] = None
    variant: str = "measure"
    z_probe_min: float = Z_PROBE_MIN
    compact_radius: float = 2.0
    delta: float = 1e-8
    weak_threshold: float = 1e-6
    z_gap_threshold: float = 1e-3
    opts: SolverOptions = field(default_factory=SolverOptions)
    K_y: float = 1.0

    def __post_init__(self):
        if not (self.p > 1 and self.q > 1) or abs(1 / self.p + 1 / self.q - 1) > 1e-12:
            raise DomainError(f"p={self.p}, q={self.q} are not conjugate exponents")
        if self.variant not in ("measure", "almost"):
            raise DomainError("variant must be 'measure' or 'almost'")
        if not self.params:
            raise DomainError("scenario needs at least one member")

    @classmethod
    def constant(cls, g, xi, n: int = 4, **kw):
        return cls("constant", list(range(1, n + 1)), lambda _: (g, xi), (g, xi), **kw)

    @classmethod
    def truncation(cls, g, xi, levels: Sequence[int], **kw):
        """Members ``g_n = truncate(n, n)`` of ``f = z . g``."""
        return cls("truncation", list(levels), lambda n: (truncated_g(g, n, n), xi), (g, xi), **kw)

    @classmethod
    def mollification(cls, g, xi, eps: Sequence[float], **kw):
        """Members ``g_n = mollify(g, eps_n)``; defaults to the almost-measure variant."""
        kw.setdefault("variant", "almost")
        return cls("mollification", list(eps), lambda e: (mollify(g, MollifierSpec(e)), xi), (g, xi), **kw)

    @classmethod
    def terminal_shift(cls, g, xi, shifts: Sequence[float], **kw):
        """Members ``xi_n = xi + a_n``."""
        return cls("terminal_shift", list(shifts), lambda a: (g, xi.shifted(a)), (g, xi), **kw)


@dataclass
class StabilityReport:
    scenario: str
    variant: str
    rows: list
    limit: dict
    checks: dict
    passed: bool
    failed_member: Optional[int] = None

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "variant": self.variant, "rows": self.rows,
                "limit": self.limit, "checks": self.checks, "passed": self.passed,
                "failed_member": self.failed_member}

    def table(self) -> tuple[list, list]:
        """Flat header and rows for CSV output."""
        if not self.rows:
            return [], []
        weak_names = sorted(self.rows[0]["weak_gaps"])
        header = ["n", "param", "converged", "residual", "a_residual", "moment_p", "moment_neg_p",
                  "xi_error", "y_distance", "g_error", "z_gap"] + [f"weak[{w}]" for w in weak_names]
        body = []
        for r in self.rows:
            body.append([r["n"], r["param"], r["converged"], r["residual"], r["a_residual"],
                         r["moment_p"], r["moment_neg_p"], r["xi_error"], r["y_distance"],
                         r["g_error"], r["z_gap"]] + [r["weak_gaps"][w] for w in weak_names])
        return header, body


def _step_of(model: LatticeModel, t: float) -> int:
    return int(round(t / model.grid.dt))


def _h2_distance(model, A, B) -> float:
    dt = model.grid.dt
    tot = sum(float(np.dot(model.prob(k), (np.asarray(A[k]) - np.asarray(B[k])) ** 2))
              for k in range(model.steps))
    return math.sqrt(tot * dt)


def _z_gap(model, A, B, delta) -> float:
    dt = model.grid.dt
    return sum(float(np.dot(model.prob(k), np.abs(np.asarray(A[k]) - np.asarray(B[k])) > delta))
               for k in range(model.steps)) * dt


def _weak_values(model, marg, functionals) -> dict:
    out = {}
    for tf in functionals:
        k = _step_of(model, tf.time)
        out[tf.name] = float(np.dot(marg[k], tf.fn(np.asarray(model.W(k)))))
    return out


def _g_error(g_n, g, probes: ProbeGrid, z_min: float, z_max: float) -> float:
    zn = np.linalg.norm(probes.z, axis=1)
    keep = (zn >= z_min) & (zn <= z_max)
    a = np.asarray(evaluate(g_n, probes))[keep]
    b = np.asarray(evaluate(g, probes))[keep]
    if a.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(np.atleast_2d(a - b).reshape(a.shape[0], -1), axis=1)))


def _member_opts(opts: SolverOptions, variant: str) -> SolverOptions:
    if variant == "almost" and opts.target != "almost":
        return SolverOptions(**{**opts.__dict__, "target": "almost"})
    return opts


def run_stability(scenario: SequenceScenario, model: LatticeModel, threads: int = 1) -> StabilityReport:
    """Solve every member and the limit, then assemble per-member diagnostics.

    PASS requires every member and the limit to converge, moments over the
    last third of the sequence to stay within 1% of the running maximum of
    the earlier members, nonincreasing xi and Y errors, and weak and
    Z-in-measure gaps below the thresholds at the final member.
    """
    sc = scenario
    opts = _member_opts(sc.opts, sc.variant)
    g_lim, xi_lim = sc.limit
    problems = [sc.build(p) for p in sc.params]

    def solve(prob) -> MeasureSolutionResult:
        return solve_measure_solution(prob[0], prob[1], model, opts)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve, problems + [(g_lim, xi_lim)]))
    else:
        results = [solve(pb) for pb in problems + [(g_lim, xi_lim)]]
    lim = results.pop()

    functionals = sc.functionals or default_functionals(xi_lim, model.grid.horizon)
    lim_dens = lim.density
    lim_weak = _weak_values(model, lim_dens.q_marginals(), functionals)
    leaf_lim = terminal_values(model, xi_lim)
    pK = model.prob(model.steps)
    probes = probe_grid(g_lim.d, sc.K_y)
    z_min = sc.z_probe_min if sc.variant == "almost" else 0.0

    rows = []
    failed = None
    for n, (param, (g_n, xi_n), res) in enumerate(zip(sc.params, problems, results), start=1):
        if not res.converged and failed is None:
            failed = n
        dens = res.density
        weak = _weak_values(model, dens.q_marginals(), functionals)
        leaf = terminal_values(model, xi_n)
        rows.append({
            "n": n,
            "param": param,
            "converged": res.converged,
            "residual": res.residual,
            "a_residual": res.a_residual,
            "Y0": res.Y0,
            "moment_p": dens.moment(sc.p),
            # E_Q[R^{-p}] = E[R^{1-p}]
            "moment_neg_p": dens.moment(1.0 - sc.p),
            "xi_error": float(np.dot(pK, np.abs(leaf - leaf_lim) ** sc.q)) ** (1 / sc.q),
            "y_distance": _h2_distance(model, res.Y.values, lim.Y.values),
            "g_error": _g_error(g_n, g_lim, probes, z_min, sc.compact_radius),
            "weak_gaps": {k: abs(weak[k] - lim_weak[k]) for k in lim_weak},
            "z_gap": _z_gap(model, res.Z.values, lim.Z.values, sc.delta),
        })

    checks = {}
    checks["members_converged"] = failed is None
    checks["limit_converged"] = bool(lim.converged)
    third = max(1, len(rows) // 3)
    head, tail = rows[:-third] or rows[:1], rows[-third:]
    ok = True
    for key in ("moment_p", "moment_neg_p"):
        ref = max(r[key] for r in head)
        ok &= all(r[key] <= 1.01 * ref for r in tail)
    checks["moments_bounded"] = bool(ok)
    mono = True
    for key in ("xi_error", "y_distance"):
        vals = [r[key] for r in rows]
        mono &= all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
    checks["errors_decreasing"] = bool(mono)
    final = rows[-1]
    checks["weak_final"] = bool(max(final["weak_gaps"].values()) < sc.weak_threshold)
    checks["z_gap_final"] = bool(final["z_gap"] < sc.z_gap_threshold)
    limit = lim.summary()
    limit["moment_p"] = lim_dens.moment(sc.p)
    limit["moment_neg_p"] = lim_dens.moment(1.0 - sc.p)
    limit["moment_p_within_sup"] = bool(limit["moment_p"] <= 1.01 * max(r["moment_p"] for r in rows))
    if sc.variant == "almost":
        checks["limit_a_residual"] = bool(lim.a_residual <= opts.tol)
    return StabilityReport(sc.name, sc.variant, rows, limit, checks, all(checks.values()), failed)


# ---------------------------------------------------------------- minimality

@dataclass
class MinimalityReport:
    ns: list
    ms: list
    Y0: np.ndarray
    max_violation_m: float
    max_violation_n: float
    m_differences: list
    passed: bool


def minimality_family(g: GeneratorG, xi: TerminalCondition, model: LatticeModel,
                      ns: Sequence[int], ms: Sequence[int], opts: Optional[SolverOptions] = None,
                      tol: float = 1e-10) -> MinimalityReport:
    """Solve the truncation grid ``g_nm`` and check the node-wise ordering of ``Y^{nm}``.

    ``Y^{nm}`` must be nondecreasing in m and nonincreasing in n; the
    successive m-differences of ``Y^n`` at the largest m measure how well
    ``lim_m Y^{nm}`` has stabilised.
    """
    ns, ms = sorted(ns), sorted(ms)
    Ys = {}
    for n in ns:
        for m in ms:
            res = solve_measure_solution(truncated_g(g, n, m), xi, model, opts)
            if not res.converged:
                raise DomainError(f"member (n={n}, m={m}) did not converge")
            Ys[n, m] = [np.asarray(y) for y in res.Y.values]

    def worst(a, b):
        # largest amount by which a <= b fails node-wise
        return max(float(np.max(x - y)) for x, y in zip(a, b))

    vm = max([worst(Ys[n, m0], Ys[n, m1]) for n in ns for m0, m1 in zip(ms, ms[1:])] or [0.0])
    vn = max([worst(Ys[n1, m], Ys[n0, m]) for m in ms for n0, n1 in zip(ns, ns[1:])] or [0.0])
    mdiff = [max(float(np.max(np.abs(x - y))) for x, y in zip(Ys[n, ms[-1]], Ys[n, ms[-2]]))
             if len(ms) > 1 else 0.0 for n in ns]
    Y0 = np.array([[Ys[n, m][0][0] for m in ms] for n in ns])
    return MinimalityReport(list(ns), list(ms), Y0, max(vm, 0.0), max(vn, 0.0), mdiff,
                            bool(vm <= tol and vn <= tol))
