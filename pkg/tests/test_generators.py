import numpy as np
import pytest
from hypothesis import given, strategies as st

from measure_bsde import (DomainError, GeneratorF, GeneratorG, Growth, NotRepresentableError,
                          build_generator, catalog_generator, f_to_g, g_to_f, inf_convolve, mollify,
                          truncate_nm)
from measure_bsde.bmo import bmo_norm_lattice
from measure_bsde.core import build_lattice
from measure_bsde.generators import (InfConvolutionSpec, MollifierSpec, TruncationSpec, apply_transform,
                                     clamp_y, evaluate, growth_violation, hat_generator, infconv_lipschitz,
                                     infconv_penalty, line_probe, probe_grid, sup_error_delta)

CATALOG = ["zero", "constant_b", "half_z", "sign_c", "random_bound_linear", "y_coupled"]


def quad_f(d=1, grad=True):
    fn = lambda t, w, y, z: 0.5 * np.einsum("ij,ij->i", z, z)
    g0 = (lambda t, w, y: np.zeros_like(w)) if grad else None
    return GeneratorF(fn, d, Growth.subquadratic(0.5), "half_sq", grad0=g0, y_dependent=False,
                      state_dependent=False)


def bounded_f(M=1.5):
    # continuous, y-dependent and bounded by M
    fn = lambda t, w, y, z: np.sin(2 * z[:, 0]) + 0.5 * np.cos(y) - 0.5
    return GeneratorF(fn, 1, Growth.bounded(M), "wavy")


def z_line(a=-6, b=6, n=401):
    return line_probe(np.linspace(a, b, n))


# ---------------------------------------------------------------- f <-> g

@pytest.mark.parametrize("grad", [True, False])
def test_f_to_g_quadratic(grad):
    g = f_to_g(quad_f(grad=grad))
    p = probe_grid(1)
    np.testing.assert_allclose(evaluate(g, p), 0.5 * p.z, atol=1e-8)


def test_f_to_g_linear():
    b = np.array([0.3, -0.7])
    f = GeneratorF(lambda t, w, y, z: z @ b, 2, grad0=lambda t, w, y: np.broadcast_to(b, w.shape).copy())
    g = f_to_g(f)
    p = probe_grid(2)
    np.testing.assert_allclose(evaluate(g, p), np.broadcast_to(b, p.z.shape), atol=1e-12)


def test_f_to_g_rejects_kink_and_offset():
    with pytest.raises(NotRepresentableError):
        f_to_g(GeneratorF(lambda t, w, y, z: np.abs(z[:, 0]), 1))
    with pytest.raises(NotRepresentableError):
        f_to_g(GeneratorF(lambda t, w, y, z: 1.0 + z[:, 0], 1))


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1, 1))
def test_round_trip(a, b, c):
    f = GeneratorF(lambda t, w, y, z: a * z[:, 0] + b * z[:, 0] ** 2 + c * y * z[:, 0] ** 3, 1)
    back = g_to_f(f_to_g(f))
    p = probe_grid(1)
    want = evaluate(f, p)
    np.testing.assert_allclose(evaluate(back, p), want, rtol=1e-9, atol=1e-9)


def test_g_to_f_examples():
    p = probe_grid(2)
    b = catalog_generator("constant_b", {"b": [0.2, -0.1]}, d=2)
    np.testing.assert_allclose(evaluate(g_to_f(b), p), p.z @ np.array([0.2, -0.1]))
    f = g_to_f(catalog_generator("half_z", d=2))
    np.testing.assert_allclose(evaluate(f, p), 0.5 * np.sum(p.z**2, axis=1))
    assert f.growth.kind == "subquadratic" and f.growth.C == 0.5
    for name in CATALOG:
        f0 = g_to_f(catalog_generator(name))
        z0 = np.zeros((5, 1))
        np.testing.assert_array_equal(f0(0.0, z0, np.linspace(-1, 1, 5), z0), 0.0)


def test_hat_generator():
    g = hat_generator(quad_f())
    p = probe_grid(1)
    np.testing.assert_allclose(evaluate(g, p), 0.5 * p.z, atol=1e-15)
    c = 0.7
    f_abs = GeneratorF(lambda t, w, y, z: c * np.linalg.norm(z, axis=1), 2)
    gh = hat_generator(f_abs)
    assert gh.continuity == "off_z0"
    p2 = probe_grid(2)
    v = evaluate(gh, p2)
    zn = np.linalg.norm(p2.z, axis=1)
    nz = zn > 0
    np.testing.assert_allclose(v[nz], c * p2.z[nz] / zn[nz, None], atol=1e-15)
    np.testing.assert_array_equal(v[~nz], 0.0)
    np.testing.assert_allclose(np.einsum("ij,ij->i", p2.z, v), evaluate(f_abs, p2), atol=1e-14)


# ---------------------------------------------------------------- mollification

def test_quadrature_weights():
    for rule, dims in (("gauss_hermite", 1), ("gauss_hermite", 3), ("monte_carlo", 2), ("gauss_hermite", 5)):
        nodes, w = MollifierSpec(0.1, rule=rule, samples=512).quadrature(dims)
        assert abs(w.sum() - 1) < 1e-12 and nodes.shape[1] == dims
    with pytest.raises(DomainError):
        MollifierSpec(0.0)


def test_mollify_examples():
    p = probe_grid(1)
    b = catalog_generator("constant_b", {"b": 0.4})
    np.testing.assert_allclose(evaluate(mollify(b, MollifierSpec(0.05)), p), 0.4, atol=1e-14)
    ident = GeneratorG(lambda t, w, y, z: z.copy(), 1, Growth.linear(1.0), "id", y_dependent=False)
    with pytest.raises(DomainError):
        mollify(ident, MollifierSpec(0.05))
    np.testing.assert_allclose(evaluate(mollify(ident, MollifierSpec(0.05), allow_unbounded=True), p), p.z, atol=1e-8)
    sgn = catalog_generator("sign_c", {"c": 1.0})
    ms = mollify(sgn, MollifierSpec(0.01))
    assert ms.continuity == "everywhere"
    assert abs(ms.at(0.0, [[0.0]])[0, 0]) < 1e-12
    assert np.max(np.abs(evaluate(ms, p))) <= 1.0 + 1e-12


def test_mollify_y_dependent_bounded():
    g = catalog_generator("y_coupled")
    mg = mollify(g, MollifierSpec(0.1))
    p = probe_grid(1, K_y=3)
    assert np.max(np.abs(evaluate(mg, p))) <= g.growth.M + 1e-12


def test_sup_error_delta():
    p = z_line(-3, 3, 61)
    zero = GeneratorF(lambda t, w, y, z: np.zeros(len(y)), 1, Growth.bounded(0))
    const = GeneratorF(lambda t, w, y, z: np.full(len(y), 0.3), 1, Growth.bounded(0.3))
    assert sup_error_delta(zero, zero, p) == 0.0
    assert sup_error_delta(zero, const, p) == pytest.approx(0.3)
    q = quad_f(grad=False)
    qe = mollify(q, MollifierSpec(0.01), allow_unbounded=True)
    # Gaussian smoothing of z^2/2 adds eps/2 exactly
    np.testing.assert_allclose(evaluate(qe, p), 0.5 * p.z[:, 0] ** 2 + 0.005, atol=1e-12)
    assert sup_error_delta(q, qe, p) <= 0.02
    with pytest.raises(DomainError):
        sup_error_delta(q, qe, line_probe([]))


def test_mollify_converges_on_compacts():
    f = truncate_nm(quad_f(), TruncationSpec(2, 2))[0]
    p = z_line(-3, 3, 301)
    errs = [sup_error_delta(f, mollify(f, MollifierSpec(e)), p) for e in (1.0, 0.1, 0.01)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.1


# ---------------------------------------------------------------- inf-convolution

def test_infconv_penalty_values():
    np.testing.assert_array_equal(infconv_penalty([0.5, 1.0, 1.5, 3.0], 1), [np.inf, np.inf, 2.0, 1.0])
    assert infconv_lipschitz(2, 1.0, 0.5) == pytest.approx(8.0)
    with pytest.raises(DomainError):
        infconv_lipschitz(2, 1.0, 0.0)


def test_infconv_equal_inside_ball():
    f = quad_f()
    f3 = inf_convolve(f, InfConvolutionSpec(3, 1.0), allow_unbounded=True)
    assert f3.at(0.0, [[2.0]])[0] == 2.0
    with pytest.raises(DomainError):
        inf_convolve(f, InfConvolutionSpec(3, 1.0))


def test_infconv_bounded_and_below():
    f = bounded_f()
    f1 = inf_convolve(f, InfConvolutionSpec(1, 1.0))
    p = line_probe(np.concatenate([np.linspace(-8, -2, 50), np.linspace(2, 8, 50)]), y=0.3)
    v = evaluate(f1, p)
    assert np.all(np.abs(v) <= f.growth.M)
    assert np.all(v <= evaluate(f, p))


@given(st.floats(-1, 1), st.floats(-9, 9))
def test_infconv_monotone_in_n(y, z):
    f = bounded_f()
    vals = [inf_convolve(f, InfConvolutionSpec(n, 1.0)).at(y, [[z]])[0] for n in (1, 2, 3, 4)]
    vals.append(f.at(y, [[z]])[0])
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_infconv_lipschitz_modulus():
    f = bounded_f()
    n, eps, M = 1, 0.5, f.growth.M
    zs = np.linspace(n + eps, 7.0, 400)
    v = inf_convolve(f, InfConvolutionSpec(n, 1.0))(0.0, np.zeros((400, 1)), np.full(400, 0.2), zs[:, None])
    slope = np.max(np.abs(np.diff(v)) / np.diff(zs))
    assert slope <= infconv_lipschitz(n, M, eps)


# ---------------------------------------------------------------- truncation

def test_truncation_examples():
    f11 = truncate_nm(quad_f(), TruncationSpec(1, 1))[0]
    assert f11.at(0.0, [[4.0]])[0] == 1.0
    f_nm, g_nm = truncate_nm(quad_f(), TruncationSpec(2, 3))
    assert f_nm.at(0.0, [[0.0]])[0] == 0.0
    assert g_nm.at(0.0, [[0.0]])[0, 0] == 0.0
    neg = GeneratorF(lambda t, w, y, z: -z[:, 0] ** 2, 1)
    assert truncate_nm(neg, TruncationSpec(2, 5))[0].at(0.0, [[1.0]])[0] == -1.0
    with pytest.raises(DomainError):
        TruncationSpec(0, 1)


@given(st.integers(1, 5), st.integers(1, 5), st.lists(st.floats(-20, 20), min_size=1, max_size=20))
def test_truncation_bounds_and_monotonicity(n, m, zs):
    base = GeneratorF(lambda t, w, y, z: 0.5 * z[:, 0] ** 2 - 2 * z[:, 0], 1)
    z = np.array(zs)[:, None]
    t, w, y = 0.0, np.zeros_like(z), np.zeros(len(zs))
    f_nm, g_nm = truncate_nm(base, TruncationSpec(n, m))
    assert np.all(np.abs(g_nm(t, w, y, z)) <= max(n, m) + 1e-12)
    up_m = truncate_nm(base, TruncationSpec(n, m + 1))[0](t, w, y, z)
    up_n = truncate_nm(base, TruncationSpec(n + 1, m))[0](t, w, y, z)
    here = f_nm(t, w, y, z)
    assert np.all(here <= up_m) and np.all(up_n <= here)


# ---------------------------------------------------------------- clamp, catalog, transforms

def test_clamp_y():
    g = GeneratorG(lambda t, w, y, z: y[:, None] * np.ones_like(z), 1, name="y")
    c = clamp_y(g, 1.0)
    assert c.at(5.0, [[0.3]])[0, 0] == 1.0
    assert c.at(-0.4, [[0.3]])[0, 0] == -0.4
    h = catalog_generator("half_z")
    p = probe_grid(1, K_y=4)
    np.testing.assert_array_equal(evaluate(clamp_y(h, 1.0), p), evaluate(h, p))
    with pytest.raises(DomainError):
        clamp_y(h, 0.0)


@pytest.mark.parametrize("name", CATALOG)
@pytest.mark.parametrize("d", [1, 2])
def test_catalog_growth_tags_hold(name, d):
    g = catalog_generator(name, d=d)
    assert g.d == d
    assert growth_violation(g, probe_grid(d, K_y=2, w_values=(-2.0, 0.0, 0.5, 3.0))) == 0.0


def test_catalog_errors():
    with pytest.raises(DomainError):
        catalog_generator("nope")
    with pytest.raises(DomainError):
        catalog_generator("half_z", {"a": 1})
    with pytest.raises(DomainError):
        catalog_generator("constant_b", {"b": [1, 2, 3]}, d=2)


def test_random_bound_within_budget():
    g = catalog_generator("random_bound_linear")
    phi = g.growth.phi
    m = build_lattice(1.0, 128, recombining=True)
    t = m.grid.times
    phis = [phi(float(t[k]), np.asarray(m.W(k))[:, None]) for k in range(m.steps)]
    assert min(float(p.min()) for p in phis) >= 0
    assert bmo_norm_lattice(m, phis) <= phi.budget


def test_transforms():
    g = build_generator("half_z", {}, ["clamp_y:1", "truncate:2,3", "mollify:0.05", "infconv:2,1", "hat"])
    assert g.d == 1 and np.all(np.isfinite(evaluate(g, probe_grid(1))))
    with pytest.raises(DomainError):
        apply_transform(catalog_generator("zero"), "truncate:1")
    with pytest.raises(DomainError):
        apply_transform(catalog_generator("zero"), "spin:1")
    inf = apply_transform(catalog_generator("half_z"), "infconv:1,1")
    assert inf.at(0.0, [[0.5]])[0, 0] == pytest.approx(0.25)
