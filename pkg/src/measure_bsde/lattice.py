"""Exact measure-solution engine on the one-dimensional binary lattice.

On a binary tree the one-step conditional law has two atoms, so conditional
expectations, martingale representation and the discrete Girsanov density
are all exact. Under a drift zeta the up-probability of a step is
``q = (1 + zeta sqrt(dt)) / 2``, which makes ``E_Q[dW | F_k] = zeta dt``.
The fixed point ``zeta = g(., Y, Z)`` is found by damped Picard iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import AdaptedProcess, LatticeModel, TerminalCondition
from .errors import ContractError, DomainError, InvalidDensityError
from .generators import GeneratorF, GeneratorG, ProbeGrid, evaluate, hat_generator

logger = logging.getLogger(__name__)


def _split(model: LatticeModel, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values of a step-(k+1) array at the (down, up) children of each step-k node."""
    if model.recombining:
        return v[:-1], v[1:]
    v2 = v.reshape(-1, 2)
    return v2[:, 0], v2[:, 1]


def _join(model: LatticeModel, down: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Inverse of ``_split`` for forward propagation (sums on recombination)."""
    if model.recombining:
        out = np.zeros(down.shape[0] + 1)
        out[:-1] += down
        out[1:] += up
        return out
    return np.stack([down, up], axis=1).ravel()


def zero_drift(model: LatticeModel) -> list[np.ndarray]:
    return [np.zeros(model.n_nodes(k)) for k in range(model.steps)]


def terminal_values(model: LatticeModel, xi: TerminalCondition) -> np.ndarray:
    """xi at every leaf of the lattice."""
    K = model.steps
    if xi.markov:
        return np.asarray(xi.of_terminal(np.asarray(model.W(K))[:, None]), dtype=float)
    if model.recombining:
        raise DomainError(f"terminal condition {xi.name!r} is path dependent; use the full tree")
    return np.asarray(xi.evaluate(model.paths()), dtype=float)


class DensityProcess:
    """Discrete stochastic exponential ``R_{k+1} = R_k (1 + zeta_k dW_k)``.

    Node-wise ``R`` only exists on the full tree (on the recombining tree
    different paths reach the same node); moments and Q-marginals are
    available on both through forward recursion.
    """

    def __init__(self, model: LatticeModel, zeta: Sequence[np.ndarray]):
        self.model = model
        self.zeta = [np.asarray(z, dtype=float) for z in zeta]
        if len(self.zeta) != model.steps:
            raise DomainError("zeta needs one array per step")
        s = model.grid.sqrt_dt
        for k, z in enumerate(self.zeta):
            if z.shape != (model.n_nodes(k),):
                raise DomainError(f"zeta[{k}] has shape {z.shape}, expected ({model.n_nodes(k)},)")
            worst = float(np.max(np.abs(z))) * s if z.size else 0.0
            if worst >= 1.0:
                raise InvalidDensityError(f"multiplier 1 - |zeta| sqrt(dt) <= 0 at step {k} ({worst:.4g})")

    def q_up(self, k: int) -> np.ndarray:
        return 0.5 * (1.0 + self.zeta[k] * self.model.grid.sqrt_dt)

    def multipliers(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """One-step multipliers on the (down, up) branches leaving step k."""
        zs = self.zeta[k] * self.model.grid.sqrt_dt
        return 1.0 - zs, 1.0 + zs

    def R(self) -> list[np.ndarray]:
        """``R_k`` node-wise, full tree only."""
        if self.model.recombining:
            raise DomainError("R is path dependent on a recombining lattice")
        out = [np.ones(1)]
        for k in range(self.model.steps):
            lo, hi = self.multipliers(k)
            out.append(_join(self.model, out[k] * lo, out[k] * hi))
        return out

    def q_marginals(self) -> list[np.ndarray]:
        """Q-probabilities of the nodes at each step."""
        out = [np.ones(1)]
        for k in range(self.model.steps):
            q = self.q_up(k)
            out.append(_join(self.model, out[k] * (1 - q), out[k] * q))
        return out

    def moment(self, p: float) -> float:
        """``E[R_K^p]`` under the historical measure, by forward recursion."""
        mass = np.ones(1)
        for k in range(self.model.steps):
            lo, hi = self.multipliers(k)
            mass = _join(self.model, 0.5 * mass * lo**p, 0.5 * mass * hi**p)
        return float(mass.sum())


def density_moment(model: LatticeModel, zeta, p: float) -> float:
    return DensityProcess(model, zeta).moment(p)


def _one_step(model, v_next, q):
    down, up = _split(model, v_next)
    return q * up + (1.0 - q) * down


def conditional_expectation(model: LatticeModel, values: np.ndarray, k: int, j: int,
                            density: Optional[DensityProcess] = None) -> np.ndarray:
    """``E_Q[X_k | F_j]`` node-wise at step j for X given at the nodes of step k.

    With ``density=None`` the expectation is under the historical measure.
    """
    if not 0 <= j <= k <= model.steps:
        raise DomainError(f"need 0 <= j <= k <= K, got j={j}, k={k}")
    v = np.asarray(values, dtype=float)
    if v.shape[0] != model.n_nodes(k):
        raise DomainError(f"values have {v.shape[0]} entries, step {k} has {model.n_nodes(k)} nodes")
    for i in range(k - 1, j - 1, -1):
        q = 0.5 if density is None else density.q_up(i)
        v = _one_step(model, v, q)
    return v


def project(model: LatticeModel, leaf_values: np.ndarray,
            density: Optional[DensityProcess] = None) -> list[np.ndarray]:
    """The martingale ``E_Q[X | F_k]`` for every k, X given at the leaves."""
    K = model.steps
    out = [None] * (K + 1)
    out[K] = np.asarray(leaf_values, dtype=float)
    for k in range(K - 1, -1, -1):
        q = 0.5 if density is None else density.q_up(k)
        out[k] = _one_step(model, out[k + 1], q)
    return out


def martingale_representation(model: LatticeModel, Y: Sequence[np.ndarray],
                              density: Optional[DensityProcess] = None,
                              tol: float = 1e-10) -> list[np.ndarray]:
    """Integrand Z with ``Y_{k+1} - Y_k = Z_k (dW_k - zeta_k dt)`` on both branches.

    Two branches and one unknown: the system is determined once Y is a
    Q-martingale, which is checked first.
    """
    s = model.grid.sqrt_dt
    Z = []
    worst = 0.0
    for k in range(model.steps):
        down, up = _split(model, Y[k + 1])
        zeta = np.zeros_like(Y[k]) if density is None else density.zeta[k]
        q = 0.5 * (1 + zeta * s)
        scale = max(1.0, float(np.max(np.abs(Y[k + 1]))))
        worst = max(worst, float(np.max(np.abs(q * up + (1 - q) * down - Y[k]))) / scale)
        # both branch equations hold with this Z once the martingale test passes
        Z.append((up - down) / (2 * s))
    if worst > tol:
        raise ContractError(f"Y is not a martingale under the given measure (max violation {worst:.3g})")
    return Z


@dataclass
class MeasureSolutionResult:
    model: LatticeModel
    zeta: AdaptedProcess
    Y: AdaptedProcess
    Z: AdaptedProcess
    residual: float
    a_residual: float
    iterations: int
    converged: bool
    target: str = "measure"
    clip_active: bool = False
    minimal: bool = False
    trace: list = field(default_factory=list)

    @property
    def Y0(self) -> float:
        return float(self.Y[0][0])

    @property
    def density(self) -> DensityProcess:
        return DensityProcess(self.model, list(self.zeta.values))

    def summary(self) -> dict:
        return {
            "Y0": self.Y0,
            "residual": self.residual,
            "a_residual": self.a_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "target": self.target,
            "clip_active": self.clip_active,
            "minimal": self.minimal,
        }


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-9
    max_iter: int = 200
    damping: float = 1.0
    clip: float = 0.95
    z_eps: float = 1e-12
    target: str = "measure"
    allow_unbounded: bool = False
    min_damping: float = 1.0 / 64

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise DomainError("clip must lie in (0, 1)")
        if not 0 < self.damping <= 1:
            raise DomainError("damping must lie in (0, 1]")
        if self.target not in ("measure", "almost"):
            raise DomainError("target must be 'measure' or 'almost'")
        if self.max_iter < 1:
            raise DomainError("max_iter must be >= 1")


def _backward(model, leaf, zeta):
    s = model.grid.sqrt_dt
    K = model.steps
    Y = [None] * (K + 1)
    Z = [None] * K
    Y[K] = leaf
    for k in range(K - 1, -1, -1):
        down, up = _split(model, Y[k + 1])
        q = 0.5 * (1 + zeta[k] * s)
        Y[k] = q * up + (1 - q) * down
        Z[k] = (up - down) / (2 * s)
    return Y, Z


def _drift_target(g, model, Y, Z):
    t = model.grid.times
    return [np.asarray(g(float(t[k]), np.asarray(model.W(k))[:, None], Y[k], Z[k][:, None]))[:, 0]
            for k in range(model.steps)]


def _l2(model, parts):
    dt = model.grid.dt
    return math.sqrt(sum(float(np.dot(model.prob(k), parts[k] ** 2)) for k in range(model.steps)) * dt)


def solve_measure_solution(g: GeneratorG, xi: TerminalCondition, model: LatticeModel,
                           opts: Optional[SolverOptions] = None, zeta0=None) -> MeasureSolutionResult:
    """Find zeta with ``zeta = g(., Y, Z)`` where Y, Z come from the measure of zeta.

    Each iteration computes ``Y_k = E_Q[xi | F_k]`` and its representation
    integrand Z under the current drift, then moves zeta toward
    ``g(., Y, Z)`` (clipped so that every one-step multiplier stays
    positive). The damping factor halves whenever the residual grows.

    With ``opts.target == "almost"`` the identity is only enforced on
    ``{|Z| > z_eps}`` and zeta is left unchanged elsewhere.
    """
    opts = opts or SolverOptions()
    if g.d != 1:
        raise DomainError("the lattice engine is one-dimensional")
    if not math.isfinite(xi.bound) and not opts.allow_unbounded:
        raise DomainError(f"terminal condition {xi.name!r} is unbounded; pass allow_unbounded for tests")
    K = model.steps
    s = model.grid.sqrt_dt
    zmax = opts.clip / s
    leaf = terminal_values(model, xi)
    zeta = [z.copy() for z in zeta0] if zeta0 is not None else zero_drift(model)
    theta = opts.damping
    trace = []
    prev = math.inf
    converged = False
    for it in range(1, opts.max_iter + 1):
        Y, Z = _backward(model, leaf, zeta)
        raw = _drift_target(g, model, Y, Z)
        target = [np.clip(r, -zmax, zmax) for r in raw]
        mask = [np.abs(z) > opts.z_eps for z in Z]
        diff = [zeta[k] - target[k] for k in range(K)]
        residual = _l2(model, diff)
        a_residual = _l2(model, [np.where(mask[k], diff[k], 0.0) for k in range(K)])
        trace.append({"iter": it, "residual": residual, "a_residual": a_residual,
                      "Y0": float(Y[0][0]), "damping": theta})
        crit = residual if opts.target == "measure" else a_residual
        if crit <= opts.tol:
            converged = True
            break
        if crit > prev and theta > opts.min_damping:
            theta = max(opts.min_damping, theta / 2)
        prev = crit
        if it == opts.max_iter:
            break
        for k in range(K):
            upd = (1 - theta) * zeta[k] + theta * target[k]
            zeta[k] = np.where(mask[k], upd, zeta[k]) if opts.target == "almost" else upd
    clip_active = any(bool(np.any(np.abs(r) > zmax)) for r in raw)
    if converged and clip_active:
        logger.warning("drift clip active at convergence; refine the time grid for %s", g.name)
    return MeasureSolutionResult(
        model=model,
        zeta=AdaptedProcess("lattice", tuple(zeta)),
        Y=AdaptedProcess("lattice", tuple(Y)),
        Z=AdaptedProcess("lattice", tuple(Z)),
        residual=residual,
        a_residual=a_residual,
        iterations=it,
        converged=converged,
        target=opts.target,
        clip_active=clip_active,
        trace=trace,
    )


def classical_solution_defect(result: MeasureSolutionResult, g: GeneratorG) -> float:
    """Largest branch-wise defect of ``Y_k - Y_{k+1} = f(Y, Z) dt - Z dW`` with ``f = z . g``."""
    model = result.model
    dt, s = model.grid.dt, model.grid.sqrt_dt
    Y, Z = result.Y, result.Z
    gv = _drift_target(g, model, Y, Z)
    worst = 0.0
    for k in range(model.steps):
        f = Z[k] * gv[k]
        down, up = _split(model, Y[k + 1])
        for nxt, dw in ((down, -s), (up, s)):
            worst = max(worst, float(np.max(np.abs(Y[k] - nxt - f * dt + Z[k] * dw))))
    return worst


def forward_identity_defect(result: MeasureSolutionResult, g: GeneratorG) -> float:
    """Largest defect of ``Y_k = Y_0 + sum Z dW - sum Z g(Y, Z) dt`` along every path (full tree)."""
    model = result.model
    if model.recombining:
        raise DomainError("path sums need the full tree")
    dt, s = model.grid.dt, model.grid.sqrt_dt
    gv = _drift_target(g, model, result.Y, result.Z)
    acc = np.array([result.Y0])
    worst = 0.0
    for k in range(model.steps):
        drift = result.Z[k] * gv[k] * dt
        acc = _join(model, acc - result.Z[k] * s - drift, acc + result.Z[k] * s - drift)
        worst = max(worst, float(np.max(np.abs(acc - result.Y[k + 1]))))
    return worst


def representation_identity_check(result: MeasureSolutionResult, xi: TerminalCondition,
                                  tol: float = 1e-9) -> dict:
    """Cross-check Z against the representation of ``xi R_K`` under the historical measure.

    With ``V = E[xi R_K | F]`` and ``V_{k+1} - V_k = eta_k dW_k`` the binary
    tree gives ``Z = (eta - V zeta) / (R (1 - zeta^2 dt))``; the factor
    ``1 - zeta^2 dt`` is the one-step Q-variance of ``dW - zeta dt`` divided
    by dt and vanishes as dt -> 0. The isometry
    ``E_Q[(xi - Y_0)^2] = E_Q[sum Z^2 (1 - zeta^2 dt) dt]`` is checked too.
    Full tree only.
    """
    model = result.model
    if model.recombining:
        raise DomainError("the representation identity needs node-wise R (full tree)")
    dens = result.density
    R = dens.R()
    dt, s = model.grid.dt, model.grid.sqrt_dt
    K = model.steps
    leaf = terminal_values(model, xi)
    V = project(model, leaf * R[K])
    worst, worst_at, cont_gap = 0.0, None, 0.0
    for k in range(K):
        down, up = _split(model, V[k + 1])
        eta = (up - down) / (2 * s)
        zeta = dens.zeta[k]
        z_pred = (eta - V[k] * zeta) / (R[k] * (1 - zeta**2 * dt))
        err = np.abs(z_pred - result.Z[k])
        i = int(np.argmax(err))
        if err[i] > worst:
            worst, worst_at = float(err[i]), (k, i)
        cont_gap = max(cont_gap, float(np.max(np.abs((eta - V[k] * zeta) / R[k] - result.Z[k]))))
    qm = dens.q_marginals()
    lhs = float(np.dot(qm[K], (leaf - result.Y0) ** 2))
    rhs = sum(float(np.dot(qm[k], result.Z[k] ** 2 * (1 - dens.zeta[k] ** 2 * dt))) for k in range(K)) * dt
    iso = abs(lhs - rhs)
    return {
        "identity_max_error": worst,
        "worst_node": worst_at,
        "continuous_form_gap": cont_gap,
        "isometry_lhs": lhs,
        "isometry_rhs": rhs,
        "isometry_error": iso,
        "passed": worst <= tol and iso <= tol * max(1.0, lhs),
    }


def _leq_on_probes(lo, hi, probes: ProbeGrid, tol=1e-12):
    return float(np.max(evaluate(lo, probes) - evaluate(hi, probes)))


def comparison_experiment(f_low: GeneratorF, f_high: GeneratorF, xi_low: TerminalCondition,
                          xi_high: TerminalCondition, model: LatticeModel,
                          probes: Optional[ProbeGrid] = None, opts: Optional[SolverOptions] = None,
                          tol: float = 1e-10) -> dict:
    """Solve both problems and check ``Y_low <= Y_high`` at every node.

    Generators are turned into generating functions with the hat
    construction, which is valid for any f.
    """
    from .generators import probe_grid

    probes = probes or probe_grid(f_low.d)
    gap = _leq_on_probes(f_low, f_high, probes)
    if gap > tol:
        raise DomainError(f"f_low > f_high on probes (by {gap:.3g})")
    leaf_gap = float(np.max(terminal_values(model, xi_low) - terminal_values(model, xi_high)))
    if leaf_gap > tol:
        raise DomainError(f"xi_low > xi_high on leaves (by {leaf_gap:.3g})")
    lo = solve_measure_solution(hat_generator(f_low), xi_low, model, opts)
    hi = solve_measure_solution(hat_generator(f_high), xi_high, model, opts)
    violations = []
    worst = -math.inf
    for k in range(model.steps + 1):
        d = lo.Y[k] - hi.Y[k]
        worst = max(worst, float(d.max()))
        for i in np.nonzero(d > tol)[0][:10]:
            violations.append((k, int(i), float(d[i])))
    return {
        "converged": lo.converged and hi.converged,
        "max_excess": worst,
        "violations": violations,
        "passed": lo.converged and hi.converged and not violations,
        "low": lo,
        "high": hi,
    }
