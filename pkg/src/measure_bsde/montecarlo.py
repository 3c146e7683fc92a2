"""Least-squares Monte Carlo engine for the measure-solution fixed point.

Conditional expectations under the candidate measure Q are obtained from
the Bayes identity: with one-step density ratios ``r_k`` (``E[r_k|F_k] = 1``)

    E_Q[X | F_k] = E[r_k X | F_k] / E[r_k | F_k],

and both conditional expectations are estimated by the same least-squares
regression on functions of ``W_k``. Regressions are refit at every
iteration because the weights change with zeta.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .core import AdaptedProcess, PathEnsemble, TerminalCondition
from .errors import BasisError, DomainError, ImportanceWeightError, InvalidDensityError
from .generators import GeneratorG

logger = logging.getLogger(__name__)


class RegressionBasis:
    """Feature map on the current Brownian value.

    ``polynomial``: all monomials of total degree <= ``degree`` in the
    standardised coordinates ``W_k / sqrt(t_k)``. ``piecewise_constant``:
    indicators of ``bins`` equal-probability cells per coordinate.
    """

    def __init__(self, family: str = "polynomial", degree: int = 3, bins: int = 16):
        if family not in ("polynomial", "piecewise_constant"):
            raise DomainError(f"unknown basis family {family!r}")
        self.family = family
        self.degree = int(degree)
        self.bins = int(bins)

    @classmethod
    def default(cls, d: int) -> "RegressionBasis":
        return cls("polynomial", degree=3) if d <= 2 else cls("piecewise_constant", bins=16)

    def size(self, d: int) -> int:
        if self.family == "polynomial":
            return math.comb(d + self.degree, d)
        return self.bins**d

    def features(self, w: np.ndarray, t: float) -> np.ndarray:
        N, d = w.shape
        x = w / math.sqrt(t) if t > 0 else np.zeros_like(w)
        if self.family == "polynomial":
            cols = [np.ones(N)]
            for deg in range(1, self.degree + 1):
                for combo in itertools.combinations_with_replacement(range(d), deg):
                    cols.append(np.prod(x[:, combo], axis=1))
            return np.stack(cols, axis=1)
        from scipy.stats import norm

        edges = norm.ppf(np.linspace(0, 1, self.bins + 1)[1:-1])
        cell = np.zeros(N, dtype=np.int64)
        for j in range(d):
            cell = cell * self.bins + np.searchsorted(edges, x[:, j])
        out = np.zeros((N, self.bins**d))
        out[np.arange(N), cell] = 1.0
        return out

    def __repr__(self):
        if self.family == "polynomial":
            return f"RegressionBasis(polynomial, degree={self.degree})"
        return f"RegressionBasis(piecewise_constant, bins={self.bins})"


class _Projector:
    """Least-squares projection onto the span of a design matrix.

    All-zero columns are dropped: at ``t = 0`` every standardised monomial
    vanishes and only the intercept survives; empty bins vanish likewise.
    """

    def __init__(self, X: np.ndarray, rcond: float = 1e-10):
        X = X[:, np.any(X != 0, axis=0)]
        G = X.T @ X
        s = np.linalg.svd(G, compute_uv=False)
        self.cond = float(math.sqrt(s[0] / s[-1])) if s[-1] > 0 else math.inf
        if s[-1] <= rcond * s[0]:
            raise BasisError(f"singular design matrix (condition {self.cond:.3g}); lower the degree or bins")
        self.X = X
        self.G_inv = np.linalg.inv(G)

    def coef(self, y: np.ndarray) -> np.ndarray:
        return self.G_inv @ (self.X.T @ y)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return self.X @ self.coef(y)


def _projector(basis: RegressionBasis, w: np.ndarray, t: float) -> _Projector:
    N, d = w.shape
    B = basis.size(d)
    if B > N / 20:
        raise BasisError(f"basis of size {B} exceeds N/20 = {N / 20:g}; use fewer features")
    return _Projector(basis.features(w, t))


def weighted_projection(values: np.ndarray, R_T: np.ndarray, R_k: np.ndarray,
                        basis: RegressionBasis, w_k: np.ndarray, t_k: float) -> np.ndarray:
    """Regression estimate of ``E_Q[X | F_k] = E[R_T X | F_k] / E[R_T | F_k]``.

    Both conditional expectations are taken of the forward ratio
    ``R_T / R_k`` and share one least-squares fit.
    """
    if np.any(R_k <= 0) or np.any(R_T <= 0):
        raise InvalidDensityError("density must be positive on every path")
    ratio = R_T / R_k
    P = _projector(basis, w_k, t_k)
    fit = P(np.stack([ratio * values, ratio], axis=1))
    out = fit[:, 0] / fit[:, 1]
    if not np.all(np.isfinite(out)):
        raise BasisError("projection produced non-finite values")
    return out


def extract_Z(Y_next: np.ndarray, Y_k: np.ndarray, r_k: np.ndarray, zeta_k: np.ndarray,
              dW_k: np.ndarray, dt: float, basis: RegressionBasis, w_k: np.ndarray,
              t_k: float) -> tuple[np.ndarray, float]:
    """Regression estimate of ``Z_k = E_Q[(Y_{k+1} - Y_k) dW^Q_k | F_k] / dt``.

    Returns Z with shape ``(N, d)`` and the largest orthogonality defect
    ``|E_Q[(Y_{k+1} - Y_k - Z_k dW^Q_k) phi_b]|`` over basis functions.
    """
    P = _projector(basis, w_k, t_k)
    dWQ = dW_k - zeta_k * dt
    dY = Y_next - Y_k
    cols = np.concatenate([(r_k * dY)[:, None] * dWQ, r_k[:, None]], axis=1)
    fit = P(cols)
    Z = fit[:, :-1] / fit[:, -1:] / dt
    err = dY - np.einsum("ij,ij->i", Z, dWQ)
    ortho = float(np.max(np.abs(P.X.T @ (r_k * err)) / r_k.sum()))
    return Z, ortho


def effective_sample_size(R: np.ndarray) -> float:
    """``(sum R)^2 / sum R^2``."""
    R = np.asarray(R, dtype=float)
    return float(R.sum() ** 2 / np.dot(R, R))


@dataclass(frozen=True)
class McOptions:
    tol: float = 1e-4
    max_iter: int = 200
    damping: float = 1.0
    clip: float = 0.95
    z_eps: float = 1e-12
    target: str = "measure"
    multiplier: str = "exponential"
    bootstrap: int = 200
    ess_min: float = 0.01
    allow_unbounded: bool = False
    min_damping: float = 1.0 / 64

    def __post_init__(self):
        if self.multiplier not in ("exponential", "product"):
            raise DomainError("multiplier must be 'exponential' or 'product'")
        if self.target not in ("measure", "almost"):
            raise DomainError("target must be 'measure' or 'almost'")
        if not 0 < self.clip < 1:
            raise DomainError("clip must lie in (0, 1)")


@dataclass
class McSolveReport:
    zeta: np.ndarray  # (N, K, d)
    Y: np.ndarray  # (N, K + 1)
    Z: np.ndarray  # (N, K, d)
    residual: float
    a_residual: float
    iterations: int
    converged: bool
    y0_ci: float
    residual_ci: float
    y0_bayes: float
    e_rep: float
    ess: float
    weight_mean: float
    weight_flag: bool
    r2: list
    cond_max: float
    ortho_max: float
    clip_active: bool
    target: str = "measure"
    trace: list = field(default_factory=list)

    @property
    def Y0(self) -> float:
        return float(self.Y[0, 0])

    def process(self, name: str) -> AdaptedProcess:
        arr = getattr(self, name)
        return AdaptedProcess("paths", tuple(arr[:, k] for k in range(arr.shape[1])))

    def summary(self) -> dict:
        return {
            "Y0": self.Y0,
            "Y0_ci": self.y0_ci,
            "Y0_bayes": self.y0_bayes,
            "residual": self.residual,
            "residual_ci": self.residual_ci,
            "a_residual": self.a_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "target": self.target,
            "ess": self.ess,
            "e_rep": self.e_rep,
            "weight_mean": self.weight_mean,
            "weight_flag": self.weight_flag,
            "cond_max": self.cond_max,
            "ortho_max": self.ortho_max,
            "clip_active": self.clip_active,
        }


def _multipliers(zeta, dW, dt, kind):
    if kind == "exponential":
        return np.exp(np.einsum("...d,...d->...", zeta, dW) - 0.5 * np.einsum("...d,...d->...", zeta, zeta) * dt)
    r = 1.0 + np.einsum("...d,...d->...", zeta, dW)
    if np.any(r <= 0):
        raise InvalidDensityError("product multiplier 1 + zeta.dW is nonpositive on some path; "
                                  "use the exponential form or a smaller clip")
    return r


def _clip_drift(zeta, clip, sqrt_dt):
    # sum_i |zeta_i| sqrt(dt) <= clip
    l1 = np.abs(zeta).sum(axis=-1, keepdims=True) * sqrt_dt
    scale = np.where(l1 > clip, clip / np.where(l1 > 0, l1, 1.0), 1.0)
    return zeta * scale, bool(np.any(l1 > clip))


def _bootstrap(stat, n, reps, seed):
    # resampling expressed as multiplicity weights; stat(w) sees counts per path
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0xB007,))))
    vals = np.empty(reps)
    for b in range(reps):
        vals[b] = stat(np.bincount(rng.integers(0, n, n), minlength=n).astype(float))
    lo, hi = np.quantile(vals, [0.025, 0.975])
    return float((hi - lo) / 2)


def mc_solve(g: GeneratorG, xi: TerminalCondition, ensemble: PathEnsemble,
             basis: Optional[RegressionBasis] = None, opts: Optional[McOptions] = None,
             zeta0: Optional[np.ndarray] = None) -> McSolveReport:
    """Monte Carlo version of the lattice fixed point ``zeta = g(., Y, Z)``.

    One iteration runs the backward regression pass under the current
    drift (Y by weighted projection, Z by weighted regression against
    ``dW - zeta dt``), then moves zeta toward the clipped ``g(., Y, Z)``.
    """
    opts = opts or McOptions()
    d = ensemble.dimension
    if g.d != d:
        raise DomainError(f"generator dimension {g.d} != ensemble dimension {d}")
    if not math.isfinite(xi.bound) and not opts.allow_unbounded:
        raise DomainError(f"terminal condition {xi.name!r} is unbounded; pass allow_unbounded for tests")
    basis = basis or RegressionBasis.default(d)
    grid = ensemble.grid
    K, dt, s = grid.steps, grid.dt, grid.sqrt_dt
    times = grid.times
    N = ensemble.n_paths
    # time-major copies keep the per-step slices contiguous
    dW = np.ascontiguousarray(ensemble.increments.transpose(1, 0, 2))
    W = np.zeros((K + 1, N, d))
    np.cumsum(dW, axis=0, out=W[1:])
    leaf = np.asarray(xi.of_terminal(W[K]) if xi.markov else xi.evaluate(W.transpose(1, 0, 2)), dtype=float)

    with threadpool_limits(limits=1):
        projectors = [_projector(basis, W[k], times[k]) for k in range(K)]
        cond_max = max(P.cond for P in projectors)
        zeta = np.zeros((K, N, d)) if zeta0 is None else np.array(np.asarray(zeta0, dtype=float).transpose(1, 0, 2))
        theta = opts.damping
        prev = math.inf
        trace = []
        converged = False
        two = np.empty((N, 2))
        for it in range(1, opts.max_iter + 1):
            r = _multipliers(zeta, dW, dt, opts.multiplier)
            Y = np.empty((K + 1, N))
            Z = np.empty((K, N, d))
            Y[K] = leaf
            r2 = [1.0] * K
            ortho = 0.0
            cols = np.empty((N, d + 1))
            for k in range(K - 1, -1, -1):
                P = projectors[k]
                rk = r[k]
                rY = rk * Y[k + 1]
                two[:, 0] = rY
                two[:, 1] = rk
                fit = P(two)
                Y[k] = fit[:, 0] / fit[:, 1]
                resid = rY - fit[:, 0]
                var = np.var(rY)
                r2[k] = float(1 - np.mean(resid**2) / var) if var > 0 else 1.0
                dWQ = dW[k] - zeta[k] * dt
                dY = Y[k + 1] - Y[k]
                np.multiply((rk * dY)[:, None], dWQ, out=cols[:, :d])
                cols[:, d] = rk
                zfit = P(cols)
                Z[k] = zfit[:, :d] / zfit[:, d:] / dt
                err = dY - np.einsum("ij,ij->i", Z[k], dWQ)
                ortho = max(ortho, float(np.max(np.abs(P.X.T @ (rk * err))) / rk.sum()))
            raw = np.stack([g(float(times[k]), W[k], Y[k], Z[k]) for k in range(K)])
            target, clip_active = _clip_drift(raw, opts.clip, s)
            mask = np.sqrt(np.einsum("knd,knd->kn", Z, Z)) > opts.z_eps
            delta = zeta - target
            diff2 = np.einsum("knd,knd->kn", delta, delta)
            rows_all = diff2.sum(axis=0)
            rows_a = (diff2 * mask).sum(axis=0)
            residual = math.sqrt(np.mean(rows_all) * dt)
            a_residual = math.sqrt(np.mean(rows_a) * dt)
            trace.append({"iter": it, "residual": residual, "a_residual": a_residual,
                          "Y0": float(Y[0, 0]), "damping": theta})
            crit = residual if opts.target == "measure" else a_residual
            rows = rows_all if opts.target == "measure" else rows_a
            ci = math.nan
            if crit <= 100 * opts.tol or it == opts.max_iter:
                ci = _bootstrap(lambda w: math.sqrt(np.dot(w, rows) / N * dt),
                                N, opts.bootstrap, ensemble.seed)
            if crit <= opts.tol + ci:
                converged = True
                break
            if crit > prev and theta > opts.min_damping:
                theta = max(opts.min_damping, theta / 2)
            prev = crit
            if it == opts.max_iter:
                break
            upd = (1 - theta) * zeta + theta * target
            zeta = np.where(mask[:, :, None], upd, zeta) if opts.target == "almost" else upd

        R_T = np.prod(r, axis=0)
        ess = effective_sample_size(R_T)
        if ess < opts.ess_min * N:
            raise ImportanceWeightError(f"effective sample size {ess:.1f} < {opts.ess_min:g} N; "
                                        "use more time steps or a smaller clip")
        weight_mean = float(R_T.mean())
        weight_flag = abs(weight_mean - 1) > 5 / math.sqrt(N)
        if weight_flag:
            logger.warning("mean density %.4f outside 1 +- 5/sqrt(N)", weight_mean)
        y0_bayes = float(np.dot(R_T, leaf) / R_T.sum())
        RL = R_T * leaf
        y0_ci = _bootstrap(lambda w: float(np.dot(w, RL) / np.dot(w, R_T)),
                           N, opts.bootstrap, ensemble.seed + 1)
        rep = leaf - Y[0, 0] - np.einsum("knd,knd->n", Z, dW - zeta * dt)
        e_rep = float(np.dot(R_T, rep**2) / R_T.sum())
        # path-major views for callers
        zeta = zeta.transpose(1, 0, 2)
        Y = Y.T
        Z = Z.transpose(1, 0, 2)

    return McSolveReport(
        zeta=zeta, Y=Y, Z=Z, residual=residual, a_residual=a_residual, iterations=it,
        converged=converged, y0_ci=y0_ci, residual_ci=ci, y0_bayes=y0_bayes, e_rep=e_rep,
        ess=ess, weight_mean=weight_mean, weight_flag=weight_flag, r2=r2, cond_max=cond_max,
        ortho_max=ortho, clip_active=clip_active, target=opts.target, trace=trace,
    )
