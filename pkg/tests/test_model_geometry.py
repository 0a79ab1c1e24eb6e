import itertools

import numpy as np
import pytest

import oracles
from conftest import BUILTINS
from foliated_paths.model_geometry import (
    ModelValidationError,
    adjoint_connection,
    adjoint_curvature,
    adjoint_ricci,
    bott_connection,
    build_model,
    epsilon_connection,
    g_eps,
    horizontal_drift,
    load_custom_model,
    weitzenbock_residual,
)
from foliated_paths.functions import PointFunction, builtin_point_functions


def frame_table(fn, d):
    E = np.eye(d)
    return np.array([[fn(E[i], E[j]) for j in range(d)] for i in range(d)])


@pytest.mark.parametrize("name,params", BUILTINS)
def test_bott_against_projection_oracle(name, params):
    m = build_model(name, params)
    c, n, d = m.structure_constants, m.n, m.d
    b = bott_connection(m)
    nb = oracles.bott_nabla(c, n)
    assert np.abs(oracles.tensor_of(nb, d) - b.gamma).max() <= 1e-12
    assert np.abs(frame_table(oracles.torsion_map(nb, c), d) - b.torsion).max() <= 1e-12
    assert np.abs(oracles.curvature_tensor(nb, c) - b.curvature).max() <= 1e-12
    assert np.abs(frame_table(oracles.j_operator(c, n), d) - b.j).max() <= 1e-12


@pytest.mark.parametrize("name,params", BUILTINS)
def test_bott_index_patterns(name, params):
    m = build_model(name, params)
    n = m.n
    b = bott_connection(m)
    H, V = slice(0, n), slice(n, m.d)
    T, G = b.torsion, b.gamma
    assert not T[V, V].any() and not T[H, V].any() and not T[V, H].any()
    assert not T[H, H, :n].any()
    # nabla preserves H and V
    assert not G[:, H, V].any() and not G[:, V, H].any()
    assert np.abs(G + G.transpose(0, 2, 1)).max() == 0.0


def test_heisenberg_frozen_values(heis):
    b = bott_connection(heis)
    assert not b.gamma.any() and not b.curvature.any()
    assert b.torsion[0, 1, 2] == -2.0 and b.torsion[1, 0, 2] == 2.0
    assert b.j[2, 0, 1] == -2.0 and b.j[2, 1, 0] == 2.0
    np.testing.assert_array_equal(b.j_squared, np.diag([-4.0, -4.0, 0.0]))
    assert not b.delta_h_t.any() and not b.ric_h.any()
    for eps, val in [(0.5, -8.0), (1.0, -4.0), (2.0, -2.0)]:
        np.testing.assert_allclose(adjoint_ricci(heis, eps), val * np.eye(2), atol=1e-14)
    a = adjoint_connection(heis, 1.0).gamma
    assert a[2, 0, 1] == -2.0 and a[2, 1, 0] == 2.0


def test_su2_frozen_values(su2):
    b = bott_connection(su2)
    assert not b.gamma[:2, :2].any()
    assert b.gamma[2, 0, 1] == 2.0 and b.gamma[2, 1, 0] == -2.0
    assert b.torsion[0, 1, 2] == -2.0
    np.testing.assert_allclose(b.ric_h, 4 * np.eye(2), atol=1e-14)
    np.testing.assert_allclose(b.j_squared[:2, :2], -4 * np.eye(2), atol=1e-14)
    for eps, val in [(0.5, -4.0), (1.0, 0.0), (2.0, 2.0)]:
        np.testing.assert_allclose(adjoint_ricci(su2, eps), val * np.eye(2), atol=1e-13)


@pytest.mark.parametrize("name,params", BUILTINS)
@pytest.mark.parametrize("eps", [0.1, 1.0, 10.0])
def test_epsilon_and_adjoint_against_oracle(name, params, eps):
    m = build_model(name, params)
    c, n, d = m.structure_constants, m.n, m.d
    ne, na = oracles.epsilon_nabla(c, n, eps), oracles.adjoint_nabla(c, n, eps)
    e, a = epsilon_connection(m, eps), adjoint_connection(m, eps)
    assert np.abs(oracles.tensor_of(ne, d) - e.gamma).max() <= 1e-12
    assert np.abs(oracles.tensor_of(na, d) - a.gamma).max() <= 1e-12
    assert np.abs(oracles.curvature_tensor(ne, c) - e.curvature).max() <= 1e-12
    Ra = oracles.curvature_tensor(na, c)
    assert np.abs(Ra - a.curvature).max() <= 1e-12
    assert np.abs(Ra - adjoint_curvature(m, eps)).max() <= 1e-12
    assert np.abs(oracles.horizontal_trace_ricci(Ra, n) - adjoint_ricci(m, eps)).max() <= 1e-12
    # torsion pair: hat T = -T^eps
    assert np.abs(a.torsion + e.torsion).max() <= 1e-12


@pytest.mark.parametrize("name,params", BUILTINS)
@pytest.mark.parametrize("eps", [0.1, 1.0, 10.0])
def test_metric_compatibility_and_driver_skew(name, params, eps):
    m = build_model(name, params)
    d = m.d
    ip = oracles.geps_inner(d, m.n, eps)
    E = np.eye(d)
    ge = epsilon_connection(m, eps).gamma
    g = g_eps(m, eps)
    # g_eps(nabla_i e_j, e_k) skew in (j, k)
    weighted = ge * g[None, None, :]
    assert np.abs(weighted + weighted.transpose(0, 2, 1)).max() <= 1e-12
    Th = adjoint_connection(m, eps).torsion
    worst = max(abs(ip(Th[i, j], E[k]) + ip(Th[i, k], E[j]))
                for i, j, k in itertools.product(range(d), repeat=3))
    assert worst <= 1e-14
    # the adjoint connection is horizontal
    ga = adjoint_connection(m, eps).gamma
    assert not ga[:, :m.n, m.n:].any()


def test_builtin_models_satisfy_jacobi_exactly():
    for name, params in BUILTINS:
        c = build_model(name, params).structure_constants
        jac = np.zeros_like(c)
        for i, j, k in itertools.product(range(c.shape[0]), repeat=3):
            jac[i, j, k] = (
                oracles.bracket(c, oracles.bracket(c, *np.eye(c.shape[0])[[i, j]]), np.eye(c.shape[0])[k])
                + oracles.bracket(c, oracles.bracket(c, *np.eye(c.shape[0])[[j, k]]), np.eye(c.shape[0])[i])
                + oracles.bracket(c, oracles.bracket(c, *np.eye(c.shape[0])[[k, i]]), np.eye(c.shape[0])[j])
            ).any()
        assert not jac.any()


def test_invalid_models_name_the_invariant():
    c = np.zeros((3, 3, 3))
    c[0, 1, 2] = 1.0
    with pytest.raises(ModelValidationError) as e:
        build_model("custom", {"n": 2, "m": 1, "c": c})
    assert e.value.invariant == "antisymmetry"
    with pytest.raises(ModelValidationError) as e:
        load_custom_model({"n": 2, "m": 1, "c": [[0, 2, 1, 1.0], [2, 0, 1, -1.0]]})
    assert e.value.invariant in ("foliation_compatibility", "bracket_generation", "bundle_like")
    # [V, V] horizontal
    c = np.zeros((4, 4, 4))
    c[2, 3, 0], c[3, 2, 0] = 1.0, -1.0
    with pytest.raises(ModelValidationError) as e:
        build_model("custom", {"n": 2, "m": 2, "c": c})
    assert e.value.invariant in ("jacobi", "foliation_compatibility")
    # abelian custom model is not bracket generating
    with pytest.raises(ModelValidationError) as e:
        build_model("custom", {"n": 2, "m": 1, "c": np.zeros((3, 3, 3))})
    assert e.value.invariant == "bracket_generation"
    with pytest.raises(ModelValidationError, match="missing"):
        load_custom_model({"n": 2, "m": 1})
    with pytest.raises(ValueError):
        build_model("nonsense")
    with pytest.raises(ValueError):
        build_model("heisenberg", {"n": 0})


def test_custom_doc_reproduces_heisenberg():
    m = load_custom_model({"n": 2, "m": 1, "c": [[0, 1, 2, 2.0], [1, 0, 2, -2.0]]})
    np.testing.assert_array_equal(m.structure_constants,
                                  build_model("heisenberg", {"n": 1}).structure_constants)
    assert m.label == "custom"


@pytest.mark.parametrize("eps", [0.0, -1.0])
def test_nonpositive_epsilon_rejected(heis, eps):
    for fn in (epsilon_connection, adjoint_connection, adjoint_curvature, adjoint_ricci):
        with pytest.raises(ValueError):
            fn(heis, eps)


def test_horizontal_drift_vanishes_on_unimodular_builtins():
    for name, params in BUILTINS:
        assert not horizontal_drift(build_model(name, params)).any()


def test_weitzenbock_linear_function_on_flat_is_exact(flat):
    f = PointFunction(flat.chart, "2*u1 - u2 + 3*u3")
    for eps in (0.5, 1.0, 2.0):
        assert weitzenbock_residual(flat, eps, f, [0.1, 0.2, 0.3]) == 0.0


def test_weitzenbock_heisenberg_example(heis):
    f = PointFunction(heis.chart, "x**2 + y*z")
    x = np.array([0.3, -0.2, 0.5])
    res = [weitzenbock_residual(heis, e, f, x) for e in (0.5, 1.0, 2.0)]
    assert max(res) < 1e-10
    assert max(res) - min(res) < 1e-10


def test_weitzenbock_su2_finite_differences(su2):
    funcs = builtin_point_functions(su2.chart)
    x = su2.chart.normalize(su2.chart.exp(np.array([0.2, -0.1, 0.3])))
    for f in funcs.values():
        assert weitzenbock_residual(su2, 1.0, f, x, fd_step=1e-4, mode="fd") < 1e-6


def test_weitzenbock_detects_wrong_potential(heis):
    # with the divergence-free Heisenberg model, dropping J^2 must break the identity
    from foliated_paths import model_geometry as mg

    f = PointFunction(heis.chart, "x**2 + y*z")
    x = np.array([0.3, -0.2, 0.5])
    bott = bott_connection(heis)
    D1, D2, D3 = f.frame_jets(heis.chart, x)
    good = mg._weitzenbock_from_jets(heis, 1.0, bott, D1, D2, D3)
    orig = mg.weitzenbock_potential
    try:
        mg.weitzenbock_potential = lambda model, eps, bott=None: orig(model, eps, bott) * 0.0
        bad = mg._weitzenbock_from_jets(heis, 1.0, bott, D1, D2, D3)
    finally:
        mg.weitzenbock_potential = orig
    assert good < 1e-10 < 1e-3 < bad


def test_weitzenbock_rejects_bad_step(heis):
    f = PointFunction(heis.chart, "x")
    with pytest.raises(ValueError):
        weitzenbock_residual(heis, 1.0, f, [0, 0, 0], fd_step=0.0)
