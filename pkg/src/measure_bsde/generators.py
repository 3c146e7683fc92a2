"""Generators f, generating functions g and the regularizations applied to them.

Every evaluator is vectorised over a batch of n states and has the signature
``fn(t, w, y, z)`` with ``t`` a float, ``w`` the current Brownian value of
shape ``(n, d)``, ``y`` of shape ``(n,)`` and ``z`` of shape ``(n, d)``.
A scalar generator f returns shape ``(n,)``; a generating function g
returns shape ``(n, d)``. Evaluators must be pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NotRepresentableError

ZERO_EPS = 0.0  # |z| <= ZERO_EPS is treated as z = 0 by the hat construction

PROBE_RADII = (0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0)
PROBE_DIRECTIONS = 8
PROBE_Y_POINTS = 9


@dataclass(frozen=True)
class RandomBoundProcess:
    """Nonnegative adapted process ``phi(t, w)`` with a declared BMO budget."""

    fn: Callable[[float, np.ndarray], np.ndarray]
    budget: float

    def __call__(self, t, w):
        return self.fn(t, w)


@dataclass(frozen=True)
class Growth:
    """Declared growth of a generator.

    ``bounded``: ``|.| <= M``. ``linear`` (for g): ``|g| <= C(|z| + phi)``.
    ``subquadratic`` (for f): ``|f| <= C|z|(|z| + phi)``. ``phi`` is None
    for ``phi = 0``. ``unknown`` makes no claim.
    """

    kind: str
    M: float = math.inf
    C: float = 0.0
    phi: Optional[RandomBoundProcess] = None

    @classmethod
    def bounded(cls, M):
        return cls("bounded", M=float(M))

    @classmethod
    def linear(cls, C, phi=None):
        return cls("linear", C=float(C), phi=phi)

    @classmethod
    def subquadratic(cls, C, phi=None):
        return cls("subquadratic", C=float(C), phi=phi)

    @classmethod
    def unknown(cls):
        return cls("unknown")

    def phi_values(self, t, w):
        if self.phi is None:
            return np.zeros(w.shape[0])
        return self.phi(t, w)


def _as_batch(y, z, d):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.asarray(z, dtype=float)
    if z.ndim <= 1 and d == 1:
        z = z.reshape(-1, 1)
    z = np.atleast_2d(z)
    if y.shape[0] == 1 and z.shape[0] > 1:
        y = np.full(z.shape[0], y[0])
    return y, z


class _Generator:
    def __init__(self, fn, d=1, growth=None, name="", y_dependent=True, state_dependent=True):
        self.fn = fn
        self.d = int(d)
        self.growth = growth or Growth.unknown()
        self.name = name
        self.y_dependent = y_dependent
        self.state_dependent = state_dependent

    def __call__(self, t, w, y, z):
        return self.fn(t, w, y, z)

    def at(self, y, z, t=0.0, w=None):
        """Convenience evaluation at unbatched or loosely shaped arguments."""
        y, z = _as_batch(y, z, self.d)
        if w is None:
            w = np.zeros((z.shape[0], self.d))
        return self.fn(float(t), np.asarray(w, dtype=float).reshape(z.shape[0], self.d), y, z)

    def __repr__(self):
        return f"{type(self).__name__}({self.name or self.fn!r}, d={self.d}, growth={self.growth.kind})"


class GeneratorF(_Generator):
    """Scalar generator ``f(t, w, y, z)``.

    ``grad0`` optionally returns ``grad_z f(t, w, y, 0)`` with shape ``(n, d)``.
    """

    def __init__(self, fn, d=1, growth=None, name="", grad0=None, y_dependent=True,
                 state_dependent=True):
        super().__init__(fn, d, growth, name, y_dependent, state_dependent)
        self.grad0 = grad0


class GeneratorG(_Generator):
    """Vector generating function ``g(t, w, y, z)``.

    ``continuity`` is ``"everywhere"`` or ``"off_z0"`` (possibly discontinuous
    on ``{z = 0}``).
    """

    def __init__(self, fn, d=1, growth=None, name="", continuity="everywhere", y_dependent=True,
                 state_dependent=True):
        super().__init__(fn, d, growth, name, y_dependent, state_dependent)
        if continuity not in ("everywhere", "off_z0"):
            raise DomainError(f"unknown continuity flag {continuity!r}")
        self.continuity = continuity


# ---------------------------------------------------------------- probes

def probe_directions(d: int, count: int = PROBE_DIRECTIONS) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        a = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    rng = np.random.default_rng(12345)
    u = rng.standard_normal((count, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


@dataclass(frozen=True)
class ProbeGrid:
    """Batch of probe states ``(t, w, y, z)`` used to check declared properties."""

    t: float
    w: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __len__(self):
        return self.y.shape[0]


def probe_grid(d: int = 1, K_y: float = 1.0, radii=PROBE_RADII, n_y: int = PROBE_Y_POINTS,
               w_values=(0.0,), t: float = 0.0) -> ProbeGrid:
    """Default probes: ``n_y`` y-points times radial z shells times directions."""
    dirs = probe_directions(d)
    zs = np.concatenate([r * dirs for r in radii])
    zs = np.unique(np.round(zs, 15), axis=0)
    ys = np.linspace(-K_y, K_y, n_y)
    ws = np.asarray(w_values, dtype=float)
    Y, Zi, Wi = np.meshgrid(ys, np.arange(len(zs)), np.arange(len(ws)), indexing="ij")
    z = zs[Zi.ravel()]
    w = np.repeat(ws[Wi.ravel()][:, None], d, axis=1)
    return ProbeGrid(float(t), w, Y.ravel().astype(float), z)


def line_probe(z_values, y: float = 0.0, t: float = 0.0) -> ProbeGrid:
    """One-dimensional probe along the z axis at fixed y."""
    z = np.asarray(z_values, dtype=float).reshape(-1, 1)
    return ProbeGrid(float(t), np.zeros_like(z), np.full(z.shape[0], float(y)), z)


def evaluate(gen: _Generator, probes: ProbeGrid) -> np.ndarray:
    return gen(probes.t, probes.w, probes.y, probes.z)


def growth_violation(gen: _Generator, probes: ProbeGrid) -> float:
    """Largest amount by which the declared growth tag is exceeded on probes."""
    v = np.asarray(evaluate(gen, probes), dtype=float)
    mag = np.abs(v) if v.ndim == 1 else np.linalg.norm(v, axis=1)
    zn = np.linalg.norm(probes.z, axis=1)
    g = gen.growth
    if g.kind == "bounded":
        bound = np.full_like(mag, g.M)
    elif g.kind == "linear":
        bound = g.C * (zn + g.phi_values(probes.t, probes.w))
    elif g.kind == "subquadratic":
        bound = g.C * zn * (zn + g.phi_values(probes.t, probes.w))
    else:
        return 0.0
    # ignore floating-point rounding in the norm
    excess = mag - bound - 8 * np.finfo(float).eps * np.maximum(bound, 1.0)
    return float(max(0.0, np.max(excess)))


# ---------------------------------------------------------------- f <-> g

def _fd_gradient_at_zero(f: GeneratorF, t, w, y, h=1e-5, tol=1e-3):
    """Central-difference gradient at z = 0 plus a differentiability check.

    One-sided directional derivatives along several directions must agree
    with the central-difference gradient; a kink at zero (e.g. ``|z|``)
    fails this test.
    """
    n, d = w.shape
    eye = np.eye(d)
    grad = np.empty((n, d))
    zero = np.zeros((n, d))
    f0 = f(t, w, y, zero)
    for i in range(d):
        e = np.broadcast_to(eye[i], (n, d))
        grad[:, i] = (f(t, w, y, h * e) - f(t, w, y, -h * e)) / (2 * h)
    for u in probe_directions(d):
        U = np.broadcast_to(u, (n, d))
        one_sided = (f(t, w, y, h * U) - f0) / h
        if np.max(np.abs(one_sided - grad @ u)) > tol:
            raise NotRepresentableError(
                f"{f.name or 'f'} is not differentiable in z at 0 "
                f"(one-sided derivative {one_sided.max():.4g} vs gradient {float(np.max(grad @ u)):.4g})"
            )
    return grad


def f_to_g(f: GeneratorF, probes: Optional[ProbeGrid] = None, zero_tol: float = 1e-12) -> GeneratorG:
    """Continuous g with ``z . g = f``, built from the gradient of f at z = 0.

    ``g(z) = z/|z|^2 (f(z) - z . b) + b`` for ``z != 0`` and ``g(0) = b``
    where ``b = grad_z f(0)``. Such a g exists only when ``f(0) = 0`` and f
    is differentiable at 0; both are checked on ``probes``.
    """
    d = f.d
    if probes is None:
        probes = probe_grid(d)
    zero = np.zeros_like(probes.z)
    at0 = f(probes.t, probes.w, probes.y, zero)
    if np.max(np.abs(at0)) > zero_tol:
        raise NotRepresentableError(f"f(., y, 0) != 0 (max |f| = {np.max(np.abs(at0)):.3g})")

    grad0 = f.grad0
    if grad0 is None:
        _fd_gradient_at_zero(f, probes.t, probes.w, probes.y)

        def grad0(t, w, y):
            return _fd_gradient_at_zero(f, t, w, y)

    def fn(t, w, y, z):
        b = grad0(t, w, y)
        fz = f(t, w, y, z)
        n2 = np.einsum("ij,ij->i", z, z)
        nz = n2 > 0
        out = b.copy()
        coef = np.where(nz, (fz - np.einsum("ij,ij->i", z, b)) / np.where(nz, n2, 1.0), 0.0)
        out += coef[:, None] * z
        return out

    growth = Growth.unknown()
    if f.growth.kind == "subquadratic":
        growth = Growth.linear(f.growth.C, f.growth.phi)
    return GeneratorG(fn, d, growth, name=f"g[{f.name}]", continuity="everywhere",
                      y_dependent=f.y_dependent, state_dependent=f.state_dependent)


def g_to_f(g: GeneratorG) -> GeneratorF:
    """The generator ``f = z . g``."""

    def fn(t, w, y, z):
        return np.einsum("ij,ij->i", z, g(t, w, y, z))

    gr = g.growth
    if gr.kind == "linear":
        growth = Growth.subquadratic(gr.C, gr.phi)
    elif gr.kind == "bounded":
        M = gr.M
        growth = Growth.subquadratic(1.0, RandomBoundProcess(lambda t, w: np.full(w.shape[0], M), M))
    else:
        growth = Growth.unknown()
    grad0 = (lambda t, w, y: g(t, w, y, np.zeros_like(w))) if g.continuity == "everywhere" else None
    return GeneratorF(fn, g.d, growth, name=f"z.{g.name}", grad0=grad0,
                      y_dependent=g.y_dependent, state_dependent=g.state_dependent)


def hat_generator(f: GeneratorF, zero_eps: float = ZERO_EPS) -> GeneratorG:
    """``g(z) = z/|z|^2 f(z)`` off zero and ``g(0) = 0``; continuous only off ``z = 0``."""

    def fn(t, w, y, z):
        n2 = np.einsum("ij,ij->i", z, z)
        nz = np.sqrt(n2) > zero_eps
        coef = np.where(nz, f(t, w, y, z) / np.where(nz, n2, 1.0), 0.0)
        return coef[:, None] * z

    gr = f.growth
    growth = Growth.linear(gr.C, gr.phi) if gr.kind == "subquadratic" else Growth.unknown()
    return GeneratorG(fn, f.d, growth, name=f"hat[{f.name}]", continuity="off_z0",
                      y_dependent=f.y_dependent, state_dependent=f.state_dependent)


def clamp_y(g: _Generator, K_y: float) -> _Generator:
    """Freeze the y-argument outside ``[-K_y, K_y]``."""
    if not K_y > 0:
        raise DomainError(f"K_y must be positive, got {K_y}")

    def fn(t, w, y, z):
        return g(t, w, np.clip(y, -K_y, K_y), z)

    out = _copy_with(g, fn, name=f"clamp_y({g.name},{K_y:g})")
    return out


def _copy_with(gen, fn, name, **overrides):
    new = object.__new__(type(gen))
    new.__dict__.update(gen.__dict__)
    new.fn = fn
    new.name = name
    for k, v in overrides.items():
        setattr(new, k, v)
    return new


# ---------------------------------------------------------------- mollification

@dataclass(frozen=True)
class MollifierSpec:
    """Gaussian kernel of variance ``eps`` per coordinate and its quadrature rule."""

    eps: float
    rule: str = "gauss_hermite"
    nodes: int = 21
    samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if not self.eps > 0:
            raise DomainError(f"mollifier eps must be positive, got {self.eps}")
        if self.rule not in ("gauss_hermite", "monte_carlo"):
            raise DomainError(f"unknown quadrature rule {self.rule!r}")

    def quadrature(self, dims: int) -> tuple[np.ndarray, np.ndarray]:
        """Standard-normal nodes ``(Q, dims)`` and weights ``(Q,)`` summing to one."""
        rule = self.rule
        if rule == "gauss_hermite" and dims > 4:
            rule = "monte_carlo"
        if rule == "gauss_hermite":
            x, wts = np.polynomial.hermite_e.hermegauss(self.nodes)
            wts = wts / wts.sum()
            grids = np.meshgrid(*([x] * dims), indexing="ij")
            wgrid = np.meshgrid(*([wts] * dims), indexing="ij")
            nodes = np.stack([g.ravel() for g in grids], axis=1)
            weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
        else:
            rng = np.random.Generator(np.random.Philox(self.seed))
            nodes = rng.standard_normal((self.samples, dims))
            weights = np.full(self.samples, 1.0 / self.samples)
        assert abs(weights.sum() - 1.0) < 1e-12
        return nodes, weights


def mollify(gen: _Generator, spec: MollifierSpec, allow_unbounded: bool = False,
            chunk: int = 1 << 20) -> _Generator:
    """Convolve a generator in ``(y, z)`` with the Gaussian kernel of variance ``spec.eps``.

    Only bounded generators are accepted unless ``allow_unbounded`` is set.
    y is integrated over only when the generator depends on it.
    """
    if gen.growth.kind != "bounded" and not allow_unbounded:
        raise DomainError("mollification requires a generator tagged bounded(M)")
    d = gen.d
    dims = d + 1 if gen.y_dependent else d
    nodes, weights = spec.quadrature(dims)
    nodes = nodes * math.sqrt(spec.eps)
    Q = nodes.shape[0]

    def fn(t, w, y, z):
        n = y.shape[0]
        out = None
        step = max(1, chunk // Q)
        for lo in range(0, n, step):
            hi = min(n, lo + step)
            m = hi - lo
            zz = (z[lo:hi, None, :] - nodes[None, :, -d:]).reshape(m * Q, d)
            if gen.y_dependent:
                yy = (y[lo:hi, None] - nodes[None, :, 0]).reshape(m * Q)
            else:
                yy = np.repeat(y[lo:hi], Q)
            ww = np.repeat(w[lo:hi], Q, axis=0)
            vals = gen(t, ww, yy, zz)
            if vals.ndim == 1:
                part = vals.reshape(m, Q) @ weights
            else:
                part = np.einsum("mqd,q->md", vals.reshape(m, Q, -1), weights)
            if out is None:
                out = np.empty((n,) + part.shape[1:])
            out[lo:hi] = part
        return out

    extra = {"continuity": "everywhere"} if isinstance(gen, GeneratorG) else {}
    return _copy_with(gen, fn, name=f"mollify({gen.name},{spec.eps:g})", **extra)


def sup_error_delta(f, f_eps, probes: ProbeGrid) -> float:
    """Grid maximum of ``|f_eps - f|``; a lower bound for the true supremum."""
    if len(probes) == 0:
        raise DomainError("empty probe grid")
    a = np.asarray(evaluate(f, probes))
    b = np.asarray(evaluate(f_eps, probes))
    diff = np.abs(a - b)
    if diff.ndim > 1:
        diff = np.linalg.norm(diff, axis=1)
    return float(diff.max())


# ---------------------------------------------------------------- inf-convolution

def infconv_penalty(t, n: int):
    """Penalty factor ``n / (0 v (t - n) ^ 1)`` as a function of ``t = |z|``.

    Infinite for ``t <= n``, ``n/(t - n)`` on ``(n, n + 1]`` and ``n`` beyond.
    """
    t = np.asarray(t, dtype=float)
    gap = np.clip(t - n, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        return np.where(gap > 0, n / np.where(gap > 0, gap, 1.0), np.inf)


def infconv_lipschitz(n: int, M: float, eps: float) -> float:
    """Lipschitz constant of the inf-convolution on ``{|z| >= n + eps}``, ``0 < eps <= 1``.

    Minimisers lie within ``2M / penalty`` of the point, so the slope of
    each active term is at most ``penalty + |penalty'| * 2M / penalty``.
    """
    if not 0 < eps <= 1:
        raise DomainError("eps must lie in (0, 1]")
    return (n + 2.0 * M) / eps


@dataclass(frozen=True)
class InfConvolutionSpec:
    """Order n, y-bound ``K_y`` and the candidate grid for the inner infimum.

    Candidates form a fixed grid of ``n_y`` points in ``[-K_y, K_y]`` times
    ``n_z`` points per coordinate in ``[-z_max, z_max]``; the point itself
    (with y clamped) is always added. The grid does not depend on n, which
    keeps ``f_n <= f_{n+1}`` exact after discretisation.
    """

    n: int
    K_y: float
    z_max: float = 12.0
    n_y: int = 9
    n_z: int = 241

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DomainError("n must be a positive integer")
        if not self.K_y > 0:
            raise DomainError("K_y must be positive")

    def candidates(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        ys = np.linspace(-self.K_y, self.K_y, self.n_y)
        n_z = self.n_z if d == 1 else max(5, int(round(self.n_z ** (1.0 / d))))
        zs1 = np.linspace(-self.z_max, self.z_max, n_z)
        zgrid = np.stack([g.ravel() for g in np.meshgrid(*([zs1] * d), indexing="ij")], axis=1)
        Yi, Zi = np.meshgrid(np.arange(len(ys)), np.arange(len(zgrid)), indexing="ij")
        return ys[Yi.ravel()], zgrid[Zi.ravel()]


def inf_convolve(f: GeneratorF, spec: InfConvolutionSpec, allow_unbounded: bool = False,
                 chunk: int = 1 << 21) -> GeneratorF:
    """Monotone, uniformly continuous minorant ``f_n`` of a bounded f.

    ``f_n(y, z) = inf { f(yh, zh) + pen_n(|z|) |(y, z) - (yh, zh)| }`` over
    ``yh`` in ``[-K_y, K_y]``, with the infimum taken over the candidate
    grid of ``spec`` plus the point itself. y is clamped to ``[-K_y, K_y]``
    first, the domain on which the construction is defined. For
    ``|z| <= n`` the penalty is infinite and ``f_n = f``.
    """
    if f.growth.kind != "bounded" and not allow_unbounded:
        raise DomainError("inf-convolution requires a generator tagged bounded(M)")
    d = f.d
    n = spec.n
    cy, cz = spec.candidates(d)
    C = cy.shape[0]
    cache = {}

    def cand_values(t, w):
        if not f.state_dependent:
            if "v" not in cache:
                cache["v"] = f(t, np.zeros((C, d)), cy, cz)
            return np.broadcast_to(cache["v"], (w.shape[0], C))
        return f(t, np.repeat(w, C, axis=0), np.tile(cy, w.shape[0]), np.tile(cz, (w.shape[0], 1))).reshape(-1, C)

    def fn(t, w, y, z):
        yb = np.clip(y, -spec.K_y, spec.K_y)
        out = np.asarray(f(t, w, yb, z), dtype=float).copy()
        zn = np.linalg.norm(z, axis=1)
        far = np.nonzero(zn > n)[0]
        step = max(1, chunk // C)
        for lo in range(0, far.size, step):
            idx = far[lo:lo + step]
            pen = infconv_penalty(zn[idx], n)
            dist = np.sqrt((yb[idx, None] - cy[None, :]) ** 2
                           + np.sum((z[idx, None, :] - cz[None, :, :]) ** 2, axis=2))
            vals = cand_values(t, w[idx]) + pen[:, None] * dist
            out[idx] = np.minimum(out[idx], vals.min(axis=1))
        return out

    growth = Growth.bounded(f.growth.M) if f.growth.kind == "bounded" else Growth.unknown()
    return GeneratorF(fn, d, growth, name=f"infconv({f.name},{n})",
                      y_dependent=True, state_dependent=f.state_dependent)


# ---------------------------------------------------------------- truncation

@dataclass(frozen=True)
class TruncationSpec:
    n: int
    m: int

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise DomainError("truncation levels must be >= 1")


def truncate_nm(f: GeneratorF, spec: TruncationSpec) -> tuple[GeneratorF, GeneratorG]:
    """Double truncation ``f_nm`` and its hat generating function ``g_nm``.

    ``f_nm = (-n) v (|z| * ((-n) v (f/|z|) ^ m)) ^ m`` with ``f_nm(0) = 0``,
    and ``g_nm = z/|z|^2 f_nm`` off zero, ``g_nm(0) = 0``.
    """
    n, m = float(spec.n), float(spec.m)

    def fn(t, w, y, z):
        zn = np.linalg.norm(z, axis=1)
        nz = zn > 0
        safe = np.where(nz, zn, 1.0)
        inner = np.clip(f(t, w, y, z) / safe, -n, m)
        return np.where(nz, np.clip(zn * inner, -n, m), 0.0)

    f_nm = GeneratorF(fn, f.d, Growth.bounded(max(n, m)), name=f"trunc({f.name},{spec.n},{spec.m})",
                      y_dependent=f.y_dependent, state_dependent=f.state_dependent)
    g_nm = hat_generator(f_nm)
    g_nm.growth = Growth.bounded(max(n, m))
    g_nm.name = f"g_trunc({f.name},{spec.n},{spec.m})"
    return f_nm, g_nm


# ---------------------------------------------------------------- catalog

def _vec(b, d):
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if b.size == 1:
        b = np.full(d, b[0])
    if b.size != d:
        raise DomainError(f"vector parameter has length {b.size}, expected {d}")
    return b


def catalog_generator(name: str, params: Optional[dict] = None, d: int = 1) -> GeneratorG:
    """Build a generating function from its catalog name.

    zero, constant_b (b), half_z (g = z/2), sign_c (c, at_zero),
    random_bound_linear (a, phi_scale, phi_budget), y_coupled (b, kappa, K_y).
    """
    p = dict(params or {})

    def take(key, default):
        return p.pop(key, default)

    if name == "zero":
        g = GeneratorG(lambda t, w, y, z: np.zeros_like(z), d, Growth.bounded(0.0), "zero",
                       y_dependent=False, state_dependent=False)
    elif name == "constant_b":
        b = _vec(take("b", 0.2), d)
        g = GeneratorG(lambda t, w, y, z: np.broadcast_to(b, z.shape).copy(), d,
                       Growth.bounded(float(np.linalg.norm(b))), "constant_b",
                       y_dependent=False, state_dependent=False)
    elif name == "half_z":
        g = GeneratorG(lambda t, w, y, z: 0.5 * z, d, Growth.linear(0.5), "half_z",
                       y_dependent=False, state_dependent=False)
    elif name == "sign_c":
        c = float(take("c", 0.3))
        at_zero = float(take("at_zero", 0.0))
        e1 = np.eye(d)[0]

        def fn(t, w, y, z):
            zn = np.linalg.norm(z, axis=1)
            nz = zn > 0
            out = c * z / np.where(nz, zn, 1.0)[:, None]
            out[~nz] = at_zero * e1
            return out

        g = GeneratorG(fn, d, Growth.bounded(max(abs(c), abs(at_zero))), "sign_c",
                       continuity="off_z0", y_dependent=False, state_dependent=False)
    elif name == "random_bound_linear":
        a = float(take("a", 0.5))
        scale = float(take("phi_scale", 0.5))
        budget = float(take("phi_budget", 0.5))
        if scale < 0:
            raise DomainError("phi_scale must be nonnegative")
        phi = RandomBoundProcess(lambda t, w: scale * np.minimum(1.0, np.abs(w[:, 0])), budget)
        e1 = np.eye(d)[0]

        def fn(t, w, y, z):
            return a * z + phi(t, w)[:, None] * e1

        g = GeneratorG(fn, d, Growth.linear(max(abs(a), 1.0), phi), "random_bound_linear",
                       y_dependent=False, state_dependent=True)
    elif name == "y_coupled":
        b = float(take("b", 0.1))
        kappa = float(take("kappa", 0.2))
        K_y = float(take("K_y", 1.0))
        e1 = np.eye(d)[0]

        def fn(t, w, y, z):
            return (b + kappa * np.clip(y, -K_y, K_y))[:, None] * e1

        g = GeneratorG(fn, d, Growth.bounded(abs(b) + abs(kappa) * K_y), "y_coupled",
                       y_dependent=True, state_dependent=False)
    else:
        raise DomainError(f"unknown generator {name!r}")
    if p:
        raise DomainError(f"unknown parameters for {name}: {sorted(p)}")
    return g


def apply_transform(g: GeneratorG, step: str) -> GeneratorG:
    """Apply one transformation written as ``"op:arg1,arg2"``.

    ops: ``clamp_y:K``, ``truncate:n,m``, ``mollify:eps``, ``infconv:n,K_y``, ``hat``.
    """
    op, _, arg = step.partition(":")
    args = [a for a in arg.split(",") if a.strip()]
    try:
        if op == "clamp_y":
            return clamp_y(g, float(args[0]))
        if op == "truncate":
            return truncate_nm(g_to_f(g), TruncationSpec(int(args[0]), int(args[1])))[1]
        if op == "mollify":
            return mollify(g, MollifierSpec(float(args[0])))
        if op == "infconv":
            # the candidate grid is finite, so the infimum exists for any z . g
            f = g_to_f(g)
            spec = InfConvolutionSpec(int(args[0]), float(args[1]))
            return hat_generator(inf_convolve(f, spec, allow_unbounded=True))
        if op == "hat":
            return hat_generator(g_to_f(g))
    except (IndexError, ValueError) as exc:
        raise DomainError(f"malformed transform {step!r}: {exc}") from None
    raise DomainError(f"unknown transform {op!r}")


def build_generator(name: str, params: Optional[dict] = None, transforms=(), d: int = 1) -> GeneratorG:
    g = catalog_generator(name, params, d)
    for step in transforms:
        g = apply_transform(g, step)
    return g
