"""Acceptance suite: one test per acceptance criterion, tolerances pinned.

Statistical checks are null tests |estimate| <= 3 stderr + budget; every
report verdict is re-derived from its stored fields so a verdict cannot
disagree with the numbers written next to it.
"""

import csv
import itertools
import json
import time

import numpy as np
import pytest

import oracles
from foliated_paths import cli_runner
from foliated_paths import verify_harness as vh
from foliated_paths.functions import PointFunction
from foliated_paths.model_geometry import (
    adjoint_connection,
    adjoint_curvature,
    adjoint_ricci,
    bott_connection,
    build_model,
    epsilon_connection,
)
from foliated_paths.path_calculus import CameronMartinPath

SIGMA = 3.0
TENSOR_TOL = 1e-12
DRIVER_TOL = 1e-14  # "exact" for constant tensors: a few ulps of entries of size 1/eps
WEITZ_ANALYTIC, WEITZ_FD, WEITZ_SPREAD = 1e-8, 1e-5, 1e-10
MIN_WEAK_SLOPE = 0.8
GRADIENT_C = 0.5
CM_DENSITY_TOL = 1e-10
FLOW_DEV_TOL = 1e-6
ROUNDTRIP_SLOPE, TANGENCY_TOL = 1.8, 1e-8

H_PL = {"kind": "piecewise_linear", "coeffs": [[0.5, 0.3, -0.2], [1.0, 0.5, 0.4]]}
H_TRIG = {"kind": "trig", "coeffs": [[0.4, -0.3], [0.2, 0.25]]}


def cm(spec, name):
    h = CameronMartinPath.from_spec(spec, 2)
    h.name = name
    return h


def consistent(rep):
    assert rep.recompute_verdict() == rep.verdict, rep.identity_name
    return rep.verdict


def null_ok(est, se, budget):
    return abs(est) <= SIGMA * se + budget


def test_1_tensor_oracles_and_driver_skew_symmetry():
    models = [build_model("heisenberg", {"n": 1}), build_model("heisenberg", {"n": 2}),
              build_model("su2_hopf"), build_model("flat_product", {"n": 2, "m": 1})]
    eps_list = (0.1, 1.0, 10.0)
    t0 = time.perf_counter()
    computed = {}
    for m in models:
        b = bott_connection(m)
        computed[m.name] = (b, {e: (epsilon_connection(m, e, b), adjoint_connection(m, e, b),
                                    adjoint_curvature(m, e, b), adjoint_ricci(m, e, b))
                                for e in eps_list})
    elapsed = time.perf_counter() - t0
    worst_tensor = worst_driver = 0.0
    for m in models:
        c, n, d = m.structure_constants, m.n, m.d
        b, per_eps = computed[m.name]
        nb = oracles.bott_nabla(c, n)
        worst_tensor = max(worst_tensor, np.abs(oracles.tensor_of(nb, d) - b.gamma).max(),
                           np.abs(oracles.curvature_tensor(nb, c) - b.curvature).max())
        E = np.eye(d)
        for e, (ec, ac, acurv, aric) in per_eps.items():
            na = oracles.adjoint_nabla(c, n, e)
            ne = oracles.epsilon_nabla(c, n, e)
            Ra = oracles.curvature_tensor(na, c)
            worst_tensor = max(
                worst_tensor,
                np.abs(oracles.tensor_of(ne, d) - ec.gamma).max(),
                np.abs(oracles.curvature_tensor(ne, c) - ec.curvature).max(),
                np.abs(oracles.tensor_of(na, d) - ac.gamma).max(),
                np.abs(Ra - acurv).max(),
                np.abs(oracles.horizontal_trace_ricci(Ra, n) - aric).max(),
            )
            ip = oracles.geps_inner(d, n, e)
            Th = ac.torsion
            for i, j, k in itertools.product(range(d), repeat=3):
                worst_driver = max(worst_driver, abs(ip(Th[i, j], E[k]) + ip(Th[i, k], E[j])))
    print(f"tensor gap {worst_tensor:.2e}, driver gap {worst_driver:.2e}, runtime {elapsed:.3f}s")
    assert worst_tensor <= TENSOR_TOL
    assert worst_driver <= DRIVER_TOL
    assert elapsed < 1.0


def test_2_weitzenbock_identity():
    t0 = time.perf_counter()
    reps = [vh.verify_weitzenbock(build_model(name), eps_list=(0.5, 1.0, 2.0),
                                  analytic_tol=WEITZ_ANALYTIC, fd_tol=WEITZ_FD)
            for name in ("heisenberg", "su2_hopf")]
    elapsed = time.perf_counter() - t0
    for rep in reps:
        assert len(rep.metadata["rows"]) == 5
        print(rep.model, rep.estimate, rep.subchecks["finite_difference"]["estimate"],
              rep.subchecks["epsilon_spread"]["estimate"])
        assert rep.estimate < WEITZ_ANALYTIC
        assert rep.subchecks["finite_difference"]["estimate"] < WEITZ_FD
        assert rep.subchecks["epsilon_spread"]["estimate"] <= WEITZ_SPREAD
        assert consistent(rep)
    print(f"runtime {elapsed:.2f}s")
    assert elapsed < 5.0


def test_3_weak_convergence_of_the_geometric_integrator():
    t0 = time.perf_counter()
    rep = vh.verify_sde_convergence(vh.MCParams(n_paths=50_000, seed=0), min_slope=MIN_WEAK_SLOPE)
    elapsed = time.perf_counter() - t0
    for row in rep.metadata["rows"]:
        print(row)
    print(f"slope {rep.estimate:.3f}, runtime {elapsed:.1f}s")
    assert [r["dt"] for r in rep.metadata["rows"]] == [2.0**-k for k in range(7, 12)]
    assert rep.estimate >= MIN_WEAK_SLOPE
    assert consistent(rep)
    assert elapsed < 120


def test_4_gradient_representation_against_closed_form():
    m = build_model("heisenberg")
    x0 = np.array([0.3, -0.7, 0.2])
    dt = 2.0**-9
    mc = vh.MCParams(n_paths=100_000, dt=dt, seed=20261014, C=GRADIENT_C)
    f = PointFunction(m.chart, "x**2 + y**2", "r2")
    closed = [2 * x0[0], 2 * x0[1], 0.0]
    t0 = time.perf_counter()
    rep = vh.verify_gradient_representation(m, f, x0, 1.0, 1.0, mc, closed_form=closed)
    elapsed = time.perf_counter() - t0
    rows = rep.metadata["closed_form_components"]["rhs"]
    for a, r in enumerate(rows):
        print(f"component {a}: rhs - closed = {r['estimate']:+.3e} +- {r['stderr']:.2e}")
        assert null_ok(r["estimate"], r["stderr"], GRADIENT_C * dt)
    assert consistent(rep)
    assert rep.verdict, rep.to_json()
    print(f"runtime {elapsed:.1f}s")
    assert elapsed < 120


def test_5_integration_by_parts_suites():
    mc = vh.MCParams(n_paths=200_000, dt=2.0**-9, seed=20261014, C=1.0)
    t0 = time.perf_counter()
    failures, count = [], 0
    for name, params in (("flat_product", {"n": 2, "m": 1}), ("heisenberg", {"n": 1}),
                         ("su2_hopf", None)):
        m = build_model(name, params)
        Fs = cli_runner.default_functions(m)
        hs = {"pl": cm(H_PL, "pl"), "trig": cm(H_TRIG, "trig")}
        t1 = time.perf_counter()
        reps = vh.ibp_suite(m, Fs, hs, eps_list=(0.5, 2.0), mc=mc)
        print(f"{m.name}: {len(reps)} null tests in {time.perf_counter() - t1:.0f}s")
        for rep in reps.values():
            count += 1
            if not (consistent(rep) and rep.bias_budget == vh.budget(mc.C, mc.dt, rep.scale)):
                failures.append(rep.identity_name)
            print(f"  {'pass' if rep.verdict else 'FAIL'} {rep.identity_name} "
                  f"est={rep.estimate:+.3e} se={rep.stderr:.2e} b={rep.bias_budget:.2e}")
        for F, h in itertools.product(Fs.values(), hs.values()):
            ind = vh.verify_epsilon_independence(m, F, h, mc, eps_list=(0.5, 2.0))
            count += 1
            if not (ind.verdict and ind.estimate == 0.0):
                failures.append(ind.identity_name)
    elapsed = time.perf_counter() - t0
    print(f"{count} checks, runtime {elapsed:.0f}s")
    # 3 models x 3 F x 2 h x (2 damped + directional + 2 adjoint) plus 18 bitwise checks
    assert count == 3 * 3 * 2 * 5 + 18
    assert not failures, failures
    assert elapsed < 15 * 60


def test_6_quasi_invariance_densities():
    mc = vh.MCParams(n_paths=50_000, dt=2.0**-8, seed=20261014, C=1.0)
    t0 = time.perf_counter()
    for name, D in (("heisenberg", "bott"), ("su2_hopf", ("adjoint", 1.0))):
        m = build_model(name)
        F = next(iter(cli_runner.default_functions(m).values()))
        for t in (0.1, 0.5):
            rep = vh.verify_girsanov_density(m, cm(H_PL, "pl"), t, F, D, mc)
            print(f"{rep.identity_name} {m.name}: E[G]-1 = {rep.estimate:+.2e} +- {rep.stderr:.1e}")
            assert null_ok(rep.estimate, rep.stderr, mc.C * mc.dt)
            assert consistent(rep) and rep.verdict
            if name == "heisenberg":
                assert rep.subchecks["classical_density"]["estimate"] <= CM_DENSITY_TOL
    elapsed = time.perf_counter() - t0
    print(f"runtime {elapsed:.0f}s")
    assert elapsed < 300


def test_7_heisenberg_explicit_flow():
    mc = vh.MCParams(n_paths=4000, dt=2.0**-10, seed=20261014)
    t0 = time.perf_counter()
    for spec, name in ((H_PL, "pl"), (H_TRIG, "trig")):
        rep = vh.verify_heisenberg_flow(1, cm(spec, name), 0.01, mc)
        slope = rep.subchecks["generator_slope"]["estimate"]
        proj = rep.subchecks["projection"]["estimate"]
        print(f"h={name}: abstract deviation {rep.estimate:.2e}, slope {slope:.3f}, "
              f"projection {proj:.1e}")
        assert rep.estimate <= FLOW_DEV_TOL
        assert abs(slope - 1.0) <= 0.1
        assert proj <= 1e-12 * 11
        assert consistent(rep) and rep.verdict
    elapsed = time.perf_counter() - t0
    print(f"runtime {elapsed:.1f}s")
    assert elapsed < 120


def test_8_deterministic_development_and_tangency():
    t0 = time.perf_counter()
    for name in ("heisenberg", "su2_hopf"):
        rep = vh.verify_deterministic(build_model(name))
        errs = rep.metadata["roundtrip_errors"]
        print(f"{rep.model}: round-trip errors {errs}, slope {rep.estimate:.2f}, "
              f"tangent residual {rep.subchecks['tangent_accepted']['estimate']:.1e}, "
              f"counterexample residual {rep.subchecks['counterexample_rejected']['estimate']:.1e}")
        assert rep.rule == "at_least" and rep.estimate >= ROUNDTRIP_SLOPE
        assert rep.subchecks["tangent_accepted"]["estimate"] <= TANGENCY_TOL
        assert rep.subchecks["counterexample_rejected"]["estimate"] > TANGENCY_TOL
        assert consistent(rep) and rep.verdict
    elapsed = time.perf_counter() - t0
    print(f"runtime {elapsed:.1f}s")
    assert elapsed < 10


REPRO_CONFIG = {
    "name": "repro",
    "model": "su2_hopf",
    "mc": {"n_paths": 4096, "dt": 0.015625, "seed": 77},
    "epsilons": [1.0],
    "cylinder_functions": {
        "q1(1)": {"kind": "coordinate", "params": ["q1"]},
        "q2(1/2)q3(1)": {"kind": "product", "times": [0.5, 1.0], "params": ["q2", "q3"]},
    },
    "point_functions": {"f": "q1**2 + q2*q3"},
    "cm_paths": {"pl": H_PL},
    "identities": [
        "ibp_suite",
        {"identity": "gradient_representation", "f": "f", "x": [1.0, 0.0, 0.0, 0.0]},
        {"identity": "girsanov_density", "h": "pl", "t": [0.5], "D": {"adjoint": 1.0}},
        {"identity": "orthogonal_invariance", "f": "f", "O": {"kind": "j_conjugation", "h": "pl"}},
    ],
}


def test_9_reports_identical_across_thread_counts(tmp_path):
    cfg = tmp_path / "repro.json"
    cfg.write_text(json.dumps(REPRO_CONFIG))
    snapshots = {}
    for threads in (1, 4, 8):
        out = tmp_path / f"threads{threads}"
        code = cli_runner.main(["suite", str(cfg), "--out-dir", str(out), "--threads", str(threads)])
        assert code in (cli_runner.EXIT_OK, cli_runner.EXIT_FAIL)
        files = sorted((out / "reports").glob("*.json"))
        snap = {}
        for p in files:
            doc = json.loads(p.read_text())
            doc.pop("runtime_seconds")
            snap[p.name] = json.dumps(doc, sort_keys=True, indent=2).encode()
        with open(out / "summary.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            row.pop("runtime")
        snap["summary.csv"] = json.dumps(rows).encode()
        snapshots[threads] = snap
    print(f"{len(snapshots[1]) - 1} reports compared")
    assert len(snapshots[1]) > 10
    assert snapshots[1] == snapshots[4] == snapshots[8]
