"""Acceptance criteria A1 to A10; each test prints one PASS/FAIL line."""

import json
import math
import time

import numpy as np
from scipy.special import comb

from measure_bsde import (GeneratorF, GeneratorG, Growth, McOptions, SequenceScenario, SolverOptions, TimeGrid,
                          build_lattice, catalog_generator, mc_solve, simulate_paths, solve_measure_solution,
                          terminal_builtin, truncate_nm)
from measure_bsde.bmo import (apriori_z_bound, bmo_norm_lattice, growth_apriori_inputs, moment_check,
                              negative_moment_bound, phi_function, reverse_holder_bound)
from measure_bsde.cli import main
from measure_bsde.generators import (InfConvolutionSpec, MollifierSpec, ProbeGrid, TruncationSpec, evaluate,
                                     inf_convolve, infconv_lipschitz, mollify)
from measure_bsde.stability import minimality_family, run_stability

TANH = terminal_builtin("tanh_WT")
RAW = terminal_builtin("raw_WT")

# ln E[exp(tanh W_T)] on the recombining tree, 30-digit binomial sums
EXP_ORACLE = {32: 0.189720027903401430, 64: 0.189321653933905560,
              128: 0.189123508287529148, 256: 0.189024696501055449}
# closed forms evaluated at 30 digits
R_AT_1 = -0.30901699437494745
PHI_AT_2 = 0.049459993056925013
BOUND_2_004 = 26.308784383290179


def binomial_conditional_mean(K, k, j, fn, T=1.0):
    """E[fn(W_T) | W_k at node j] by summing the binomial law of the remaining steps."""
    s = math.sqrt(T / K)
    r = K - k
    ups = np.arange(r + 1)
    w = (2 * j - k) * s + (2 * ups - r) * s
    return float(np.dot(comb(r, ups) / 2.0**r, fn(w)))


# ---------------------------------------------------------------- A1

def test_a1_projection_oracle(acceptance_line):
    model = build_lattice(1.0, 64, recombining=True)
    t0 = time.perf_counter()
    res = solve_measure_solution(catalog_generator("zero"), TANH, model)
    wall = time.perf_counter() - t0
    gap = max(abs(float(res.Y[k][j]) - binomial_conditional_mean(64, k, j, np.tanh))
              for k in range(65) for j in range(k + 1))
    ok = res.converged and gap <= 1e-12 and wall < 1.0
    acceptance_line("A1", ok, f"max node gap {gap:.2e}, {wall:.3f}s")
    assert ok


# ---------------------------------------------------------------- A2

def test_a2_girsanov_shift(acceptance_line):
    t0 = time.perf_counter()
    g = catalog_generator("constant_b", {"b": 0.2})
    lat = solve_measure_solution(g, RAW, build_lattice(1.0, 64, recombining=True),
                                 SolverOptions(allow_unbounded=True))
    zeta_gap = max(float(np.max(np.abs(z - 0.2))) for z in lat.zeta)
    ens = simulate_paths(TimeGrid(1.0, 64), 1, 100_000, seed=2024)
    mc = mc_solve(g, RAW, ens, opts=McOptions(allow_unbounded=True))
    wall = time.perf_counter() - t0
    ok = (abs(lat.Y0 - 0.2) <= 1e-12 and zeta_gap <= 1e-15 and mc.converged
          and abs(mc.Y0 - 0.2) <= 3 * mc.y0_ci and wall < 10.0)
    acceptance_line("A2", ok, f"lattice Y0 gap {abs(lat.Y0 - 0.2):.1e}, MC Y0 {mc.Y0:.5f} "
                              f"CI {mc.y0_ci:.5f}, {wall:.2f}s")
    assert ok


# ---------------------------------------------------------------- A3

def test_a3_exponential_transform(acceptance_line):
    t0 = time.perf_counter()
    g = catalog_generator("half_z")
    gaps = []
    oracle_drift = 0.0
    for K in (32, 64, 128, 256):
        m = build_lattice(1.0, K, recombining=True)
        res = solve_measure_solution(g, TANH, m)
        assert res.converged
        leaf = np.tanh(np.asarray(m.W(K)))
        on_tree = math.log(float(np.dot(m.prob(K), np.exp(leaf))))
        oracle_drift = max(oracle_drift, abs(on_tree - EXP_ORACLE[K]))
        gaps.append(abs(res.Y0 - EXP_ORACLE[K]))
    wall = time.perf_counter() - t0
    order = -np.polyfit(np.log([32, 64, 128, 256]), np.log(gaps), 1)[0]
    ok = order >= 0.8 and gaps[-1] < 5e-3 and oracle_drift < 1e-13 and wall < 30.0
    acceptance_line("A3", ok, f"gaps {', '.join(f'{x:.2e}' for x in gaps)}, order {order:.3f}, {wall:.2f}s")
    assert ok


# ---------------------------------------------------------------- A4

def test_a4_residual_contract(acceptance_line):
    model = build_lattice(1.0, 64, recombining=True)
    opts = SolverOptions()
    suite = [
        ("zero", {}, TANH), ("constant_b", {"b": 0.2}, TANH), ("half_z", {}, TANH),
        ("half_z", {}, terminal_builtin("sin_WT", {"scale": 2.0})), ("y_coupled", {}, TANH),
        ("random_bound_linear", {}, TANH), ("sign_c", {"c": 0.3}, TANH),
    ]
    bad = []
    for name, params, xi in suite:
        res = solve_measure_solution(catalog_generator(name, params), xi, model, opts)
        if not (res.converged and res.residual <= opts.tol):
            bad.append(name)
    ens = simulate_paths(TimeGrid(1.0, 16), 1, 20_000, seed=4)
    mc = mc_solve(catalog_generator("half_z"), TANH, ens)
    mc_ok = mc.converged and mc.residual <= 1e-4 + mc.residual_ci

    g = catalog_generator("sign_c", {"c": 0.3, "at_zero": 0.3})
    xi = terminal_builtin("clipped_WT", {"level": 1.0})
    almost = solve_measure_solution(g, xi, model, SolverOptions(target="almost"))
    zero_nodes = sum(int(np.sum(np.abs(z) <= opts.z_eps)) for z in almost.Z)
    ok_almost = (almost.converged and almost.a_residual <= opts.tol and almost.residual > opts.tol
                 and zero_nodes > 0)
    ok = not bad and mc_ok and ok_almost
    acceptance_line("A4", ok, f"{len(suite)} lattice runs + 1 MC within tol; almost run: a_residual "
                              f"{almost.a_residual:.1e}, residual {almost.residual:.3f}, {zero_nodes} zero-Z nodes")
    assert ok, bad


# ---------------------------------------------------------------- A5

def test_a5_regularizers(acceptance_line):
    t0 = time.perf_counter()
    M = 1.5
    f = GeneratorF(lambda t, w, y, z: np.sin(2 * z[:, 0]) + 0.5 * np.cos(y), 1, Growth.bounded(M), "wavy")
    ys = np.linspace(-1, 1, 5)
    zs = np.linspace(-6, 6, 100)
    Y, Zg = np.meshgrid(ys, zs, indexing="ij")
    probes = ProbeGrid(0.0, np.zeros((500, 1)), Y.ravel(), Zg.ravel()[:, None])
    fv = evaluate(f, probes)
    zabs = np.abs(probes.z[:, 0])
    prev = None
    fails = []
    eps = 0.5
    for n in (1, 2, 3, 4):
        fn = evaluate(inf_convolve(f, InfConvolutionSpec(n, 1.0)), probes)
        if np.max(np.abs(fn)) > M:
            fails.append(f"(i) n={n}")
        if not np.array_equal(fn[zabs <= n], fv[zabs <= n]):
            fails.append(f"(ii) n={n}")
        # slope bound between grid neighbours in z on {|z| >= n + eps}
        F = fn.reshape(5, 100)
        far = np.abs(zs) >= n + eps
        pair = far[1:] & far[:-1] & (np.sign(zs[1:]) == np.sign(zs[:-1]))
        slope = np.max(np.abs(np.diff(F, axis=1))[:, pair]) / (zs[1] - zs[0])
        if slope > infconv_lipschitz(n, M, eps):
            fails.append(f"(iii) n={n}")
        if np.any(fn > fv) or (prev is not None and np.any(prev > fn)):
            fails.append(f"(iv) n={n}")
        prev = fn
    half = GeneratorF(lambda t, w, y, z: 0.5 * z[:, 0] ** 2 - z[:, 0], 1)
    for base in (f, half):
        for n in (1, 2, 3):
            for m in (1, 2, 3):
                here = evaluate(truncate_nm(base, TruncationSpec(n, m))[0], probes)
                if np.any(here > evaluate(truncate_nm(base, TruncationSpec(n, m + 1))[0], probes)):
                    fails.append(f"trunc m n={n} m={m}")
                if np.any(evaluate(truncate_nm(base, TruncationSpec(n + 1, m))[0], probes) > here):
                    fails.append(f"trunc n n={n} m={m}")
    wall = time.perf_counter() - t0
    ok = not fails and wall < 5.0
    acceptance_line("A5", ok, f"500-point grid, inf-convolution n=1..4 and truncations, {wall:.2f}s")
    assert ok, fails


# ---------------------------------------------------------------- A6

def test_a6_minimality(acceptance_line):
    model = build_lattice(1.0, 64, recombining=True)
    signed = GeneratorG(lambda t, w, y, z: 0.5 * z - 3.0, 1, Growth.unknown(), "half_z_minus_3",
                        y_dependent=False, state_dependent=False)
    cases = [(catalog_generator("half_z"), TANH), (catalog_generator("half_z"), terminal_builtin("tanh_WT", {"scale": 3.0})),
             (signed, terminal_builtin("tanh_WT", {"scale": 3.0}))]
    worst = 0.0
    ok = True
    for g, xi in cases:
        rep = minimality_family(g, xi, model, [1, 2, 4], [1, 2, 4, 8], tol=1e-10)
        worst = max(worst, rep.max_violation_m, rep.max_violation_n)
        ok &= rep.passed
    acceptance_line("A6", ok, f"3 families on K=64, worst ordering violation {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- A7

def test_a7_bmo_formulas(acceptance_line):
    nm = negative_moment_bound(1.0)
    formulas = (abs(nm.r - (1 - math.sqrt(5)) / 4) <= 1e-12 and abs(nm.C - math.sqrt(2)) <= 1e-12
                and abs(nm.r - R_AT_1) <= 1e-15
                and abs(phi_function(2.0) - 0.04946) <= 1e-4 and abs(phi_function(2.0) - PHI_AT_2) <= 1e-14
                and abs(reverse_holder_bound(2.0, 0.04) - 26.3) <= 0.1
                and abs(reverse_holder_bound(2.0, 0.04) - BOUND_2_004) <= 1e-10)
    model = build_lattice(1.0, 64, recombining=True)
    family = [
        lambda w: np.ones_like(w), lambda w: -np.ones_like(w), lambda w: np.tanh(w), lambda w: np.tanh(3 * w),
        lambda w: np.sin(w), lambda w: np.cos(2 * w), lambda w: (w > 0).astype(float),
        lambda w: -(w < -0.5).astype(float), lambda w: np.clip(w, -1, 1), lambda w: 0.5 * np.clip(w, 0, 2),
    ]
    results = []
    for K in (0.5, 1.0):
        for fn in family:
            Z = [K * fn(np.asarray(model.W(k))) for k in range(model.steps)]
            results.append(moment_check(model, Z, K))
    ok = formulas and all(r["passed"] for r in results)
    acceptance_line("A7", ok, f"formulas {'ok' if formulas else 'off'}, {sum(r['passed'] for r in results)}"
                              f"/{len(results)} moment checks")
    assert ok


# ---------------------------------------------------------------- A8

def test_a8_apriori_bound(acceptance_line):
    model = build_lattice(1.0, 64, recombining=True)
    tanh3 = terminal_builtin("tanh_WT", {"scale": 3.0})
    half = catalog_generator("half_z")
    scenarios = [
        ("zero", catalog_generator("zero"), TANH),
        ("constant_b", catalog_generator("constant_b", {"b": 0.7}), TANH),
        ("half_z", half, TANH),
        ("half_z 3tanh", half, tanh3),
        ("half_z sin", half, terminal_builtin("sin_WT", {"scale": 2.0})),
        ("sign_c", catalog_generator("sign_c", {"c": 0.3}), TANH),
        ("random_bound", catalog_generator("random_bound_linear", {"phi_budget": 0.5}), TANH),
        ("random_bound clipped", catalog_generator("random_bound_linear", {"a": 0.2, "phi_budget": 0.5}),
         terminal_builtin("clipped_WT", {"level": 1.0})),
        ("y_coupled", catalog_generator("y_coupled"), TANH),
        ("mollified sign", mollify(catalog_generator("sign_c", {"c": 0.3}), MollifierSpec(0.05)), TANH),
    ]
    rows = []
    for name, g, xi in scenarios:
        res = solve_measure_solution(g, xi, model)
        assert res.converged, name
        C, norm_phi = growth_apriori_inputs(g.growth, model)
        bound = apriori_z_bound(C, 0.0, norm_phi, xi.bound).K_bound
        rows.append((name, bmo_norm_lattice(model, res.Z), bound))
    budget_ok = growth_apriori_inputs(scenarios[6][1].growth, model)[1] <= 0.5 * scenarios[6][1].growth.C
    ok = all(norm <= bound for _, norm, bound in rows) and budget_ok
    tight = max(norm / bound for _, norm, bound in rows)
    acceptance_line("A8", ok, f"{len(rows)} scenarios, largest norm/bound ratio {tight:.3f}")
    assert ok, rows


# ---------------------------------------------------------------- A9

def test_a9_stability(acceptance_line):
    model = build_lattice(1.0, 128, recombining=True)
    trunc = run_stability(SequenceScenario.truncation(catalog_generator("half_z"), TANH, [1, 2, 3, 4]), model)
    final = trunc.rows[-1]
    weak = max(final["weak_gaps"].values())
    moll = run_stability(SequenceScenario.mollification(
        catalog_generator("sign_c", {"c": 0.3}), TANH, [0.1, 0.03, 0.01, 0.003, 0.001],
        weak_threshold=1e-3, delta=1e-3), model)
    ok = (trunc.passed and weak < 1e-6 and final["z_gap"] < 1e-3 and moll.passed
          and moll.limit["a_residual"] <= 1e-9)
    acceptance_line("A9", ok, f"truncation weak gap {weak:.1e} z gap {final['z_gap']:.1e}; mollification "
                              f"z gap {moll.rows[-1]['z_gap']:.1e}, limit a_residual {moll.limit['a_residual']:.1e}")
    assert ok


# ---------------------------------------------------------------- A10

def _strip(report):
    report = dict(report)
    report.pop("wall_clock_s")
    report["engine"] = {k: v for k, v in report["engine"].items() if k != "threads"}
    return report


def test_a10_determinism(tmp_path, acceptance_line):
    configs = {
        "lattice": ("solve", {"model": {"engine": "lattice", "steps": 128}, "generator": {"name": "half_z"}}),
        "montecarlo": ("solve", {"model": {"engine": "montecarlo", "steps": 16, "paths": 40000, "seed": 11},
                                 "generator": {"name": "half_z"}}),
        "stability": ("stability", {"model": {"engine": "lattice", "steps": 64}, "generator": {"name": "half_z"},
                                    "terminal": {"name": "tanh_WT", "params": {"scale": 3.0}},
                                    "stability": {"family": "truncation", "params": [1, 2, 4, 8]}}),
    }
    verdicts = []
    for label, (cmd, cfg) in configs.items():
        src = tmp_path / f"{label}.json"
        src.write_text(json.dumps(cfg))
        reports, traces = [], []
        for threads in (1, 8):
            out = tmp_path / f"{label}-{threads}"
            assert main([cmd, str(src), "--out", str(out), "--threads", str(threads)]) == 0
            reports.append(json.loads((out / "report.json").read_text()))
            trace = out / "trace.csv"
            traces.append(trace.read_bytes() if trace.exists() else None)
        echo = tmp_path / f"{label}-echo.json"
        echo.write_text(json.dumps(reports[0]["config"]))
        out = tmp_path / f"{label}-echo"
        assert main([cmd, str(echo), "--out", str(out), "--threads", "8"]) == 0
        reports.append(json.loads((out / "report.json").read_text()))
        same = _strip(reports[0]) == _strip(reports[1]) == _strip(reports[2]) and traces[0] == traces[1]
        verdicts.append((label, same))
    ok = all(v for _, v in verdicts)
    acceptance_line("A10", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in verdicts)
                    + " across threads 1/8 and echo re-run")
    assert ok
