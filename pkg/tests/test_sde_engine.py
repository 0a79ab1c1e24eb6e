import numpy as np
import pytest

from foliated_paths.model_geometry import bott_connection, weitzenbock_potential
from foliated_paths.sde_engine import (
    SmoothPath,
    anti_develop,
    anti_develop_smooth,
    brownian_increments,
    damped_transport,
    develop_smooth,
    frozen_damping,
    heisenberg_levy_area,
    simulate_batch,
    simulate_horizontal_bm,
)

DT = 2.0**-7


def batch(model, P=64, N=128, seed=5, x0=None):
    b = bott_connection(model)
    noise = brownian_increments(seed, 0, P, N, DT, model.n)
    x0 = model.chart.identity() if x0 is None else x0
    return simulate_batch(model, b, x0, noise, DT, seed=seed)


def test_zero_noise_stays_put(su2, heis, flat):
    for m in (su2, heis, flat):
        x0 = m.chart.normalize(m.chart.exp(np.linspace(0.1, 0.3, m.d)))
        p = simulate_horizontal_bm(m, bott_connection(m), x0, 16, DT, 0, noise=np.zeros((16, m.n)))
        np.testing.assert_allclose(p.points[0], np.broadcast_to(x0, p.points[0].shape), atol=1e-15)
        np.testing.assert_allclose(p.frames[0], np.broadcast_to(np.eye(m.d), p.frames[0].shape))


def test_flat_points_are_cumulative_noise(flat):
    b = batch(flat)
    expect = np.concatenate([np.zeros((b.P, 1, 2)), np.cumsum(b.noise, axis=1)], axis=1)
    np.testing.assert_allclose(b.points[..., :2], expect, atol=1e-13)
    assert not b.points[..., 2].any()


def test_su2_stays_on_unit_sphere_with_orthogonal_frames(su2):
    b = batch(su2)
    assert np.abs(np.linalg.norm(b.points, axis=-1) - 1).max() < 1e-12
    UtU = np.swapaxes(b.frames, -1, -2) @ b.frames
    assert np.abs(UtU - np.eye(3)).max() < 1e-12
    # the frames follow the Bott connection: horizontal and vertical blocks stay separate
    assert np.abs(b.frames[..., :2, 2]).max() == 0.0


def test_heisenberg_frames_are_trivial_and_match_closed_form(heis):
    b = batch(heis)
    assert b.trivial_frames
    theta = np.broadcast_to(np.eye(3), b.frames.shape)
    np.testing.assert_array_equal(b.frames, theta)
    cf = simulate_batch(heis, bott_connection(heis), heis.chart.identity(), b.noise, DT,
                        scheme="closed_form")
    assert np.abs(cf.points - b.points).max() < 1e-12


def test_heisenberg_second_moment(heis):
    bt = bott_connection(heis)
    noise = brownian_increments(1, 0, 20000, 8, 0.125, 2)
    W = simulate_batch(heis, bt, heis.chart.identity(), noise, 0.125).points[:, -1]
    r2 = W[:, 0] ** 2 + W[:, 1] ** 2
    assert abs(r2.mean() - 2.0) < 3 * r2.std() / np.sqrt(len(r2)) + 1e-3


def test_counter_based_stream_is_chunk_independent():
    whole = brownian_increments(42, 0, 10, 5, DT, 2)
    parts = np.concatenate([brownian_increments(42, 0, 3, 5, DT, 2),
                            brownian_increments(42, 3, 7, 5, DT, 2)])
    np.testing.assert_array_equal(whole, parts)
    assert not np.array_equal(whole, brownian_increments(43, 0, 10, 5, DT, 2))


def test_anti_development_recovers_noise(su2, heis):
    for m in (su2, heis):
        b = batch(m, P=8)
        assert np.abs(anti_develop(b) - b.noise).max() < 1e-10


@pytest.mark.parametrize("eps", [0.5, 2.0])
def test_compiled_damped_transport_matches_reference(su2, heis, eps):
    for m in (su2, heis):
        a = batch(m, P=16, N=64)
        b = batch(m, P=16, N=64)
        damped_transport(a, m, eps)
        damped_transport(b, m, eps, backend="numpy")
        assert np.abs(a.tau_eps - b.tau_eps).max() < 1e-12
        assert np.abs(a.M_eps - b.M_eps).max() < 1e-12


def test_damped_transport_without_noise_is_frozen_damping(su2):
    steps = 64
    p = simulate_horizontal_bm(su2, bott_connection(su2), su2.chart.identity(), steps, DT, 0,
                               noise=np.zeros((steps, 2)))
    damped_transport(p, su2, 1.0)
    exact = frozen_damping(su2, 1.0, steps * DT)
    assert np.abs(p.tau_eps[0, -1] - exact).max() < 1e-10


def test_damping_factor_is_identity_on_flat(flat):
    b = batch(flat, P=4, N=16)
    damped_transport(b, flat, 1.0)
    np.testing.assert_array_equal(b.tau_eps, np.broadcast_to(np.eye(3), b.tau_eps.shape))
    assert not weitzenbock_potential(flat, 1.0).any()


def test_theta_eps_is_orthogonal_for_g_eps(su2):
    eps = 0.5
    b = batch(su2, P=8, N=64)
    damped_transport(b, su2, eps)
    dual = np.diag([1.0, 1.0, eps])
    th = b.theta_eps
    # one-form transport is an isometry of the dual metric of g_eps
    gram = np.swapaxes(th, -1, -2) @ dual @ th
    assert np.abs(gram - dual).max() < 1e-10


def test_same_seed_same_path(su2):
    a, b = batch(su2, seed=9), batch(su2, seed=9)
    np.testing.assert_array_equal(a.points, b.points)


def test_bad_inputs(heis):
    bt = bott_connection(heis)
    with pytest.raises(ValueError):
        simulate_batch(heis, bt, heis.chart.identity(), np.zeros((2, 4, 3)), DT)
    with pytest.raises(ValueError):
        simulate_horizontal_bm(heis, bt, heis.chart.identity(), 4, 0.0, 0)
    with pytest.raises(ValueError):
        simulate_batch(heis, bt, heis.chart.identity(), np.zeros((2, 4, 2)), DT, scheme="euler")


def test_circle_development_encloses_area(heis):
    omega = SmoothPath.circle(3, radius=1.0)
    dev = develop_smooth(heis, omega, 2048)
    assert abs(heisenberg_levy_area(omega) - np.pi) < 1e-9
    assert abs(dev.points[-1, 2] - 2 * np.pi) < 1e-8
    assert np.abs(dev.points[-1, :2]).max() < 1e-12


def test_smooth_round_trip(su2):
    omega = SmoothPath.polynomial(np.array([[0.4, -0.3, 0.0], [0.2, 0.5, 0.0]]))
    dev = develop_smooth(su2, omega, 512)
    rec = anti_develop_smooth(dev)
    exact = np.diff(omega.value(np.linspace(0, 1, 513)), axis=0)
    assert np.abs(rec - exact).max() < 1e-8
