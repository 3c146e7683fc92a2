"""Time grids, the binary lattice, simulated Brownian paths and terminal conditions."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, ResourceError

FULL_TREE_CAP = 22
PATH_MEMORY_BUDGET = 2 * 1024**3  # bytes
PATH_CHUNK = 8192


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_K = T``."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise DomainError(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.steps + 1, dtype=float) * self.dt
        t[-1] = self.horizon
        return t


@dataclass(frozen=True)
class AdaptedProcess:
    """Values of a process that only look at the past.

    ``backing == "lattice"``: ``values[k]`` holds one entry per node at step k.
    ``backing == "paths"``: ``values[k]`` holds one entry per simulated path.
    Either way ``values[k]`` has shape ``(n_k,)`` or ``(n_k, m)``.
    """

    backing: str
    values: tuple

    def __post_init__(self):
        if self.backing not in ("lattice", "paths"):
            raise DomainError(f"unknown backing {self.backing!r}")

    def __len__(self):
        return len(self.values)

    def __getitem__(self, k):
        return self.values[k]

    @property
    def dim(self) -> int:
        v = self.values[0]
        return 1 if v.ndim == 1 else v.shape[1]


class LatticeModel:
    """Binary random-walk approximation of a one-dimensional Brownian motion.

    Each step moves W by ``+sqrt(dt)`` or ``-sqrt(dt)`` with probability 1/2.
    The full (non-recombining) tree keeps every path distinct, so
    path-dependent terminal conditions are exact; it has ``2**k`` nodes at
    step k. The recombining tree identifies nodes by the number of up-moves
    (``k + 1`` nodes at step k) and only supports functionals of the current
    W value, but reaches hundreds of steps.

    Node layout: full tree node ``i`` at step k has children ``2i`` (down)
    and ``2i + 1`` (up); recombining node ``j`` has children ``j`` (down)
    and ``j + 1`` (up).
    """

    dimension = 1

    def __init__(self, grid: TimeGrid, recombining: bool = False):
        self.grid = grid
        self.recombining = bool(recombining)
        self._W = {}

    @property
    def steps(self) -> int:
        return self.grid.steps

    def n_nodes(self, k: int) -> int:
        return k + 1 if self.recombining else 2**k

    def children(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices (down, up) into step ``k + 1`` for each node at step k."""
        idx = np.arange(self.n_nodes(k))
        if self.recombining:
            return idx, idx + 1
        return 2 * idx, 2 * idx + 1

    def W(self, k: int) -> np.ndarray:
        """Value of W at each node of step k (read-only, cached)."""
        if k in self._W:
            return self._W[k]
        s = self.grid.sqrt_dt
        if self.recombining or k == 0:
            out = (2.0 * np.arange(k + 1) - k) * s if self.recombining else np.zeros(1)
        else:
            # children 2i (down) and 2i + 1 (up)
            out = np.empty(2**k)
            prev = self.W(k - 1)
            out[0::2] = prev - s
            out[1::2] = prev + s
        out.flags.writeable = False
        self._W[k] = out
        return out

    def prob(self, k: int) -> np.ndarray:
        """Historical probabilities of the nodes at step k."""
        if self.recombining:
            from scipy.special import comb

            return comb(k, np.arange(k + 1), exact=False) / 2.0**k
        return np.full(2**k, 2.0**-k)

    def increments(self, k: int) -> tuple[float, float]:
        """Increments of W on the (down, up) branch leaving step k."""
        s = self.grid.sqrt_dt
        return -s, s

    def paths(self) -> np.ndarray:
        """W along every root-to-leaf path, shape ``(2**K, K + 1, 1)``."""
        if self.recombining:
            raise DomainError("a recombining lattice has no distinct paths")
        K = self.steps
        out = np.zeros((2**K, K + 1))
        for k in range(1, K + 1):
            # node at step k reached by leaf i is i >> (K - k)
            out[:, k] = self.W(k)[np.arange(2**K) >> (K - k)]
        return out[:, :, None]


def build_lattice(T: float, K: int, recombining: bool = False, cap: int = FULL_TREE_CAP) -> LatticeModel:
    """Construct the binary lattice on ``[0, T]`` with ``K`` steps.

    The full tree is refused beyond ``cap`` steps since it stores ``2**K``
    leaves.
    """
    if not T > 0:
        raise DomainError(f"T must be positive, got {T}")
    if int(K) != K or K < 1:
        raise DomainError(f"K must be a positive integer, got {K}")
    if not recombining and K > cap:
        raise ResourceError(f"full tree with K={K} exceeds cap {cap} (2**K leaves)")
    return LatticeModel(TimeGrid(float(T), int(K)), recombining=recombining)


@dataclass(frozen=True)
class PathEnsemble:
    grid: TimeGrid
    dimension: int
    n_paths: int
    seed: int
    increments: np.ndarray = field(repr=False)

    def W(self) -> np.ndarray:
        """Brownian values, shape ``(N, K + 1, d)`` with ``W[:, 0] = 0``."""
        N, K, d = self.increments.shape
        out = np.zeros((N, K + 1, d))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out


def _chunk_normals(seed: int, chunk: int, n: int, K: int, d: int, scale: float) -> np.ndarray:
    # one counter-based stream per fixed-size chunk; independent of thread count
    ss = np.random.SeedSequence(seed, spawn_key=(chunk,))
    rng = np.random.Generator(np.random.Philox(ss))
    return rng.standard_normal((n, K, d)) * scale


def simulate_paths(grid: TimeGrid, d: int, N: int, seed: int, threads: int = 1,
                   memory_budget: int = PATH_MEMORY_BUDGET) -> PathEnsemble:
    """Simulate ``N`` paths of a ``d``-dimensional Brownian motion on ``grid``.

    Increments are drawn chunk by chunk (``PATH_CHUNK`` paths each) from
    Philox streams keyed on ``(seed, chunk index)``, so the result does not
    depend on ``threads``.
    """
    if int(N) != N or N < 1:
        raise DomainError(f"N must be a positive integer, got {N}")
    if int(d) != d or d < 1:
        raise DomainError(f"d must be a positive integer, got {d}")
    K = grid.steps
    if N * K * d * 8 > memory_budget:
        raise ResourceError(f"N*K*d = {N * K * d} doubles exceeds the memory budget")
    seed = int(seed) & (2**64 - 1)
    inc = np.empty((N, K, d))
    starts = list(range(0, N, PATH_CHUNK))

    def fill(ci):
        lo = starts[ci]
        hi = min(lo + PATH_CHUNK, N)
        inc[lo:hi] = _chunk_normals(seed, ci, hi - lo, K, d, grid.sqrt_dt)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(len(starts))))
    else:
        for ci in range(len(starts)):
            fill(ci)
    inc.flags.writeable = False
    return PathEnsemble(grid, int(d), int(N), seed, inc)


@dataclass(frozen=True)
class TerminalCondition:
    """Terminal value xi as a functional of the discrete path.

    ``evaluate`` receives W along the whole path, shape ``(n, K + 1, d)``.
    When xi only depends on ``W_T`` the builtin also sets ``of_terminal``,
    which receives ``W_T`` with shape ``(n, d)``; engines use it to avoid
    materialising paths.
    """

    name: str
    evaluate: Callable[[np.ndarray], np.ndarray]
    bound: float = math.inf
    of_terminal: Optional[Callable[[np.ndarray], np.ndarray]] = None
    test_only: bool = False

    @property
    def markov(self) -> bool:
        return self.of_terminal is not None

    def shifted(self, a: float) -> "TerminalCondition":
        """The terminal condition ``xi + a``."""
        ev, ot = self.evaluate, self.of_terminal
        return TerminalCondition(
            f"{self.name}+{a:g}",
            lambda p: ev(p) + a,
            self.bound + abs(a),
            None if ot is None else (lambda w: ot(w) + a),
            self.test_only,
        )


def _markov(name, fn, bound, test_only=False):
    return TerminalCondition(name, lambda p: fn(p[:, -1, :]), bound, fn, test_only)


def terminal_builtin(name: str, params: Optional[dict] = None) -> TerminalCondition:
    """Look up a builtin terminal condition by name.

    All builtins are functions of the first coordinate of ``W_T``:

    ``constant`` (c), ``tanh_WT`` (scale), ``sin_WT`` (scale),
    ``indicator_above`` (level), ``clipped_WT`` (level), ``raw_WT``.
    ``raw_WT`` is unbounded and only meant for tests.
    """
    p = dict(params or {})

    def take(key, default):
        return float(p.pop(key, default))

    if name == "constant":
        c = take("c", 0.0)
        xi = _markov(name, lambda w: np.full(w.shape[0], c), abs(c))
    elif name == "tanh_WT":
        a = take("scale", 1.0)
        xi = _markov(name, lambda w: a * np.tanh(w[:, 0]), abs(a))
    elif name == "sin_WT":
        a = take("scale", 1.0)
        xi = _markov(name, lambda w: a * np.sin(w[:, 0]), abs(a))
    elif name == "indicator_above":
        lvl = take("level", 0.0)
        xi = _markov(name, lambda w: (w[:, 0] > lvl).astype(float), 1.0)
    elif name == "clipped_WT":
        lvl = take("level", 1.0)
        if lvl <= 0:
            raise DomainError("clipped_WT needs a positive level")
        xi = _markov(name, lambda w: np.clip(w[:, 0], -lvl, lvl), lvl)
    elif name == "raw_WT":
        xi = _markov(name, lambda w: w[:, 0].astype(float), math.inf, test_only=True)
    else:
        raise DomainError(f"unknown terminal condition {name!r}")
    if p:
        raise DomainError(f"unknown parameters for {name}: {sorted(p)}")
    return xi
