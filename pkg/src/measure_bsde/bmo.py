"""BMO norms of representation integrands and the explicit moment bounds built on them.

The BMO norm of ``M = Z . W`` is ``sup_t ||E[int_t^T |Z|^2 ds | F_t]||_inf^{1/2}``.
On a lattice it is computed exactly by backward induction of the remaining
energy; under Monte Carlo it is estimated by regression and a high quantile,
which can only under-estimate an essential supremum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .core import AdaptedProcess, LatticeModel, PathEnsemble
from .errors import DomainError
from .lattice import DensityProcess, _split
from .montecarlo import RegressionBasis, _projector

BISECTION_HI = 64.0
BISECTION_ITERS = 60


def _values(Z) -> list:
    if isinstance(Z, AdaptedProcess):
        return list(Z.values)
    return list(Z)


def _sq(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return z**2 if z.ndim == 1 else np.sum(z**2, axis=-1)


def remaining_energy(model: LatticeModel, Z) -> list[np.ndarray]:
    """``E[sum_{j >= k} |Z_j|^2 dt | F_k]`` at every node, under the historical measure."""
    Zv = _values(Z)
    K = model.steps
    if len(Zv) != K:
        raise DomainError(f"Z needs {K} steps, got {len(Zv)}")
    dt = model.grid.dt
    out = [None] * (K + 1)
    out[K] = np.zeros(model.n_nodes(K))
    for k in range(K - 1, -1, -1):
        down, up = _split(model, out[k + 1])
        out[k] = _sq(Zv[k]) * dt + 0.5 * (down + up)
    return out


def bmo_norm_lattice(model: LatticeModel, Z) -> float:
    """Exact lattice BMO norm: square root of the largest remaining energy over all nodes."""
    energy = remaining_energy(model, Z)
    return math.sqrt(max(float(np.max(e)) for e in energy))


def bmo_norm_mc(ensemble: PathEnsemble, Z: np.ndarray, q: float = 0.999,
                basis: Optional[RegressionBasis] = None) -> float:
    """Quantile proxy of the BMO norm from simulated paths.

    ``Z`` has shape ``(N, K)`` or ``(N, K, d)``. At each step the pathwise
    remaining energy is regressed on features of ``W_k``; the result is the
    square root of the largest ``q``-quantile over steps. This is a lower
    proxy for the essential supremum.
    """
    if not 0 < q <= 1:
        raise DomainError("q must lie in (0, 1]")
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 2:
        Z = Z[:, :, None]
    N, K, d = Z.shape
    grid = ensemble.grid
    if (N, K) != (ensemble.n_paths, grid.steps):
        raise DomainError("Z does not match the ensemble")
    basis = basis or RegressionBasis.default(ensemble.dimension)
    W = ensemble.W()
    times = grid.times
    tail = np.cumsum((np.sum(Z**2, axis=2) * grid.dt)[:, ::-1], axis=1)[:, ::-1]
    best = 0.0
    with threadpool_limits(limits=1):
        for k in range(K):
            est = _projector(basis, W[:, k], times[k])(tail[:, k])
            best = max(best, float(np.quantile(est, q)))
    return math.sqrt(max(best, 0.0))


def bmo_norm(Z, context, q: float = 0.999, basis: Optional[RegressionBasis] = None) -> float:
    """BMO norm of ``Z . W``: exact on a ``LatticeModel``, quantile proxy on a ``PathEnsemble``."""
    if isinstance(context, LatticeModel):
        return bmo_norm_lattice(context, Z)
    if isinstance(context, PathEnsemble):
        return bmo_norm_mc(context, Z, q=q, basis=basis)
    raise DomainError(f"unsupported engine context {type(context).__name__}")


# ---------------------------------------------------------------- explicit bounds

@dataclass(frozen=True)
class NegativeMoment:
    r: float
    C: float


def negative_moment_bound(K: float) -> NegativeMoment:
    """Exponent ``r < 0`` and constant ``C`` with ``E[E(M)_T^r] <= C`` when ``||M||_BMO <= K``.

    ``r = 1/4 - sqrt(1/16 + 1/(4 K^2))`` and ``C = sqrt(2)``.
    """
    if not K > 0:
        raise DomainError(f"K must be positive, got {K}")
    return NegativeMoment(0.25 - math.sqrt(1.0 / 16 + 1.0 / (4.0 * K * K)), math.sqrt(2.0))


def _phi_log(x: float) -> float:
    # Phi at p = 1 + exp(x), stable when p - 1 underflows relative to 1
    u = math.exp(x)
    p = 1.0 + u
    L = math.log1p(2.0 * u) - math.log(2.0) - x
    return math.sqrt(1.0 + L / (p * p)) - 1.0


def phi_function(p: float, p_minus_1: Optional[float] = None) -> float:
    """``Phi(p) = (1 + ln((2p - 1) / (2(p - 1))) / p^2)^{1/2} - 1`` for ``p > 1``.

    ``p_minus_1`` may be passed when ``p`` is too close to 1 for a double.
    """
    u = p - 1.0 if p_minus_1 is None else p_minus_1
    if not u > 0:
        raise DomainError(f"p must exceed 1, got {p}")
    return _phi_log(math.log(u))


def _log_bound_ratio(x: float, K: float) -> float:
    # log of 2(p-1)/(2p-1) exp(p^2 K (2 + K)) at p = 1 + exp(x)
    u = math.exp(x)
    p = 1.0 + u
    return math.log(2.0) + x - math.log1p(2.0 * u) + p * p * K * (2.0 + K)


def reverse_holder_bound(p: float, K: float, p_minus_1: Optional[float] = None) -> float:
    """``2 / (1 - 2(p-1)/(2p-1) exp(p^2 K (2 + K)))``; ``inf`` when the denominator is not positive."""
    u = p - 1.0 if p_minus_1 is None else p_minus_1
    if not u > 0:
        raise DomainError(f"p must exceed 1, got {p}")
    if not K >= 0:
        raise DomainError(f"K must be nonnegative, got {K}")
    return _bound_log(math.log(u), K)


def _bound_log(x: float, K: float) -> float:
    a = _log_bound_ratio(x, K)
    return 2.0 / -math.expm1(a) if a < 0 else math.inf


@dataclass(frozen=True)
class ReverseHolder:
    p: float
    bound: float
    phi: float
    p_minus_1: float


LOG_PM1_LO = -2000.0
LOG_PM1_HI = math.log(BISECTION_HI - 1.0)


def reverse_holder_exponent(K: float, safety: float = 2.0) -> ReverseHolder:
    """Largest ``p`` on the bisection grid with ``Phi(p) > safety * K``, and the bound there.

    ``Phi`` decreases from ``+inf`` at ``p = 1``. At ``Phi(p) = K`` exactly the
    bound's denominator vanishes, so ``safety > 1`` keeps the bound finite;
    ``safety = 1`` gives the literal largest admissible exponent.

    The bisection runs on ``ln(p - 1)``: for large K the admissible ``p - 1``
    is far below double resolution around 1, so ``p`` itself may round to
    1.0 while ``p_minus_1`` stays exact.
    """
    if not K > 0:
        raise DomainError(f"K must be positive, got {K}")
    if not safety >= 1:
        raise DomainError("safety must be >= 1")
    level = safety * K
    lo, hi = LOG_PM1_LO, LOG_PM1_HI
    if _phi_log(hi) > level:
        x = hi
    elif _phi_log(lo) <= level:
        raise DomainError(f"K={K} too large for the bisection range")
    else:
        for _ in range(BISECTION_ITERS):
            mid = 0.5 * (lo + hi)
            if _phi_log(mid) > level:
                lo = mid
            else:
                hi = mid
        x = lo
    u = math.exp(x)
    return ReverseHolder(1.0 + u, _bound_log(x, K), _phi_log(x), u)


@dataclass(frozen=True)
class AprioriBound:
    beta: float
    K_bound: float


def apriori_z_bound(C: float, norm_psi: float, norm_phi: float, Y_sup: float) -> AprioriBound:
    """A priori BMO bound on Z when the drift obeys ``X <= psi^2 + |Z| phi + C |Z|^2``.

    With ``beta = 2C + 3``, Ito's formula for ``exp(beta Y)`` and
    ``|Z| phi <= phi^2 / 2 + |Z|^2 / 2`` give
    ``E[int_t^T beta e^{beta Y} |Z|^2 | F_t] <= 2 e^{beta |Y|} + beta e^{beta |Y|} Psi``
    with ``Psi = ||psi||^2 + ||phi||^2 / 2`` (BMO norms). Dividing by
    ``beta e^{-beta |Y|}`` yields
    ``K_bound^2 = e^{2 beta |Y|} (2 + beta Psi) / beta``.
    """
    for name, v in (("C", C), ("norm_psi", norm_psi), ("norm_phi", norm_phi), ("Y_sup", Y_sup)):
        if not v >= 0:
            raise DomainError(f"{name} must be nonnegative, got {v}")
    beta = 2.0 * C + 3.0
    psi_tilde = norm_psi**2 + 0.5 * norm_phi**2
    K2 = math.exp(2.0 * beta * Y_sup) * (2.0 + beta * psi_tilde) / beta
    return AprioriBound(beta, math.sqrt(K2))


def growth_apriori_inputs(growth, model: LatticeModel, T: Optional[float] = None) -> tuple[float, float]:
    """``(C, norm_phi)`` for ``apriori_z_bound`` from a generating function's growth tag.

    ``bounded(M)``: ``|f| <= M |z|``, so ``C = 0`` and ``phi = M``.
    ``linear(C, phi)``: ``|f| <= C |z|^2 + |z| C phi``, so the phi input is
    ``C`` times the BMO norm of phi, computed exactly on the lattice.
    """
    T = model.grid.horizon if T is None else T
    if growth.kind == "bounded":
        return 0.0, growth.M * math.sqrt(T)
    if growth.kind == "linear":
        if growth.phi is None:
            return growth.C, 0.0
        t = model.grid.times
        phis = [growth.phi(float(t[k]), np.asarray(model.W(k))[:, None]) for k in range(model.steps)]
        return growth.C, growth.C * bmo_norm_lattice(model, phis)
    raise DomainError(f"no a priori bound for growth kind {growth.kind!r}")


# ---------------------------------------------------------------- reports

@dataclass
class BmoReport:
    norm_estimate: float
    method: str
    negative_moment: dict = field(default_factory=dict)
    reverse_holder: dict = field(default_factory=dict)
    apriori: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "norm_estimate": self.norm_estimate,
            "method": self.method,
            "negative_moment": self.negative_moment,
            "reverse_holder": self.reverse_holder,
            "apriori": self.apriori,
        }


def bmo_report(Z, context, C: float = 0.0, norm_psi: float = 0.0, norm_phi: float = 0.0,
               Y_sup: float = 0.0, q: float = 0.999, safety: float = 2.0) -> BmoReport:
    """Norm estimate of Z together with the bounds evaluated at that norm."""
    K = bmo_norm(Z, context, q=q)
    method = "lattice_exact" if isinstance(context, LatticeModel) else f"mc_quantile({q:g})"
    rep = BmoReport(K, method)
    ap = apriori_z_bound(C, norm_psi, norm_phi, Y_sup)
    rep.apriori = {"beta": ap.beta, "K_bound": ap.K_bound}
    if K > 0:
        nm = negative_moment_bound(K)
        rh = reverse_holder_exponent(K, safety)
        rep.negative_moment = {"r": nm.r, "C": nm.C}
        rep.reverse_holder = {"p": rh.p, "p_minus_1": rh.p_minus_1, "bound": rh.bound}
    return rep


def moment_check(model: LatticeModel, Z, K: float, safety: float = 2.0) -> dict:
    """Exact moments of the discrete stochastic exponential of ``Z . W`` against both bounds.

    The density is ``prod (1 + Z_k dW_k)`` and requires ``|Z| sqrt(dt) < 1``.
    ``K`` is the norm bound the family is built to respect.
    """
    norm = bmo_norm_lattice(model, Z)
    nm = negative_moment_bound(K)
    rh = reverse_holder_exponent(K, safety)
    dens = DensityProcess(model, [np.asarray(z, dtype=float) for z in _values(Z)])
    neg = dens.moment(nm.r)
    pos = dens.moment(rh.p)
    return {
        "norm": norm, "K": K, "r": nm.r, "C": nm.C, "E_r": neg,
        "p": rh.p, "bound": rh.bound, "E_p": pos,
        "negative_slack": max(0.0, neg - nm.C), "positive_slack": max(0.0, pos - rh.bound),
        "passed": bool(norm <= K + 1e-12 and neg <= nm.C and pos <= rh.bound),
    }


# ---------------------------------------------------------------- property checks

@dataclass
class DualLpReport:
    lhs: float
    witness_sup: float
    gap: float
    gaps: list
    grid: list


def dual_lp_check(values, p: float, probs=None, n_grid: Sequence[float] = (1, 3, 10, 100),
                  m_grid: Sequence[float] = (10, 1e3, 1e6)) -> DualLpReport:
    """Compare ``E[Y^p]^{1/p}`` with ``E[Y X] / E[X^q]^{1/q}`` for ``X = (1/m + Y ^ n)^{p - 1}``.

    ``gaps`` follows the paired grid ``(n_grid[i], m_grid[j])`` in row-major
    order; Holder makes every gap nonnegative.
    """
    if not p > 1:
        raise DomainError(f"p must exceed 1, got {p}")
    Y = np.asarray(values, dtype=float)
    if np.any(Y < 0):
        raise DomainError("Y must be nonnegative")
    w = np.full(Y.size, 1.0 / Y.size) if probs is None else np.asarray(probs, dtype=float)
    if w.shape != Y.shape or np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-12):
        raise DomainError("probs must be a probability vector matching values")
    q = p / (p - 1)
    lhs = float(np.dot(w, Y**p)) ** (1 / p)
    gaps, grid, best = [], [], 0.0
    for n in n_grid:
        for m in m_grid:
            X = (1.0 / m + np.minimum(Y, n)) ** (p - 1)
            ratio = float(np.dot(w, Y * X)) / float(np.dot(w, X**q)) ** (1 / q)
            best = max(best, ratio)
            gaps.append(lhs - ratio)
            grid.append((float(n), float(m)))
    return DualLpReport(lhs, best, lhs - best, gaps, grid)


@dataclass
class FatouReport:
    norms: list
    limit_norm: float
    tail_min: float
    passed: bool


def fatou_bmo_check(Z_seq: Sequence, Z_limit, model: LatticeModel, tail: Optional[int] = None,
                    tol: float = 1e-9) -> FatouReport:
    """Check ``||Z||_BMO <= min over the tail of ||Z^n||_BMO`` with exact lattice norms.

    The tail defaults to the last third of the sequence (at least one member).
    """
    norms = [bmo_norm_lattice(model, Zn) for Zn in Z_seq]
    if not norms:
        raise DomainError("empty sequence")
    tail = max(1, len(norms) // 3) if tail is None else tail
    lim = bmo_norm_lattice(model, Z_limit)
    tail_min = min(norms[-tail:])
    return FatouReport(norms, lim, tail_min, bool(lim <= tail_min + tol))
