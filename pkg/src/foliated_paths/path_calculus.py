"""Path-space calculus along simulated horizontal Brownian paths.

Conventions on the grid s_k = k dt: per-step quantities indexed k = 0..N-1
refer to the cell [s_k, s_{k+1}]; pointwise ones are indexed 0..N.
Stratonovich integrals use trapezoid (midpoint) values, Ito integrals use
left points.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.integrate import cumulative_simpson, solve_ivp

from .model_geometry import adjoint_connection, adjoint_curvature, bott_connection
from .sde_engine import develop_smooth, frame_gamma, simulate_batch


# ----------------------------------------------------------------------------
# Cameron-Martin paths


class CameronMartinPath:
    """h: [0, 1] -> R^n with h(0) = 0.

    ``piecewise_linear``: knots [[s, v_1..v_n], ...] after the implicit (0, 0).
    ``trig``: coefficients a_k (rows) with h(s) = sum_k a_k sin((k - 1/2) pi s).
    """

    def __init__(self, kind, coeffs, n=None):
        self.kind = kind
        if kind == "piecewise_linear":
            knots = np.atleast_2d(np.asarray(coeffs, dtype=float))
            s = knots[:, 0]
            if np.any(s <= 0) or np.any(np.diff(s) <= 0) or s[-1] > 1 + 1e-12:
                raise ValueError("knot times must increase strictly within (0, 1]")
            self.knot_s = np.concatenate([[0.0], s])
            self.knot_v = np.vstack([np.zeros(knots.shape[1] - 1), knots[:, 1:]])
            if self.knot_s[-1] < 1:
                # constant continuation after the last knot
                self.knot_s = np.append(self.knot_s, 1.0)
                self.knot_v = np.vstack([self.knot_v, self.knot_v[-1]])
            self.n = self.knot_v.shape[1]
        elif kind == "trig":
            self.a = np.atleast_2d(np.asarray(coeffs, dtype=float))
            self.n = self.a.shape[1]
            self.freq = (np.arange(1, len(self.a) + 1) - 0.5) * np.pi
        elif kind == "zero":
            self.n = int(n)
        else:
            raise ValueError(f"unknown Cameron-Martin kind {kind!r}")
        if n is not None and self.n != n:
            raise ValueError(f"path has {self.n} components, model needs {n}")

    @classmethod
    def from_spec(cls, spec, n):
        return cls(spec["kind"], spec.get("coeffs", []), n)

    @classmethod
    def zero(cls, n):
        return cls("zero", None, n)

    def value(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "zero":
            return np.zeros(s.shape + (self.n,))
        if self.kind == "trig":
            return np.sin(s[..., None] * self.freq) @ self.a
        return np.stack(
            [np.interp(s, self.knot_s, self.knot_v[:, j]) for j in range(self.n)], axis=-1
        )

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "zero":
            return np.zeros(s.shape + (self.n,))
        if self.kind == "trig":
            return (np.cos(s[..., None] * self.freq) * self.freq) @ self.a
        slopes = np.diff(self.knot_v, axis=0) / np.diff(self.knot_s)[:, None]
        cell = np.clip(np.searchsorted(self.knot_s, s, side="right") - 1, 0, len(slopes) - 1)
        return slopes[cell]

    def grid_values(self, N, dt):
        return self.value(np.arange(N + 1) * dt)

    def cell_derivative(self, N, dt):
        """(h(s_{k+1}) - h(s_k)) / dt, shape (N, n)."""
        return np.diff(self.grid_values(N, dt), axis=0) / dt

    def energy(self):
        """int_0^1 |h'|^2 ds, exact."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "trig":
            return float(0.5 * np.sum(self.a**2 * self.freq[:, None] ** 2))
        slopes = np.diff(self.knot_v, axis=0) / np.diff(self.knot_s)[:, None]
        return float(np.sum(slopes**2 * np.diff(self.knot_s)[:, None]))

    @property
    def is_zero(self):
        if self.kind == "zero":
            return True
        if self.kind == "trig":
            return not np.any(self.a)
        return not np.any(self.knot_v)


# ----------------------------------------------------------------------------
# cylinder evaluation


def eval_cylinder(F, path):
    idx = F.grid_indices(path.N, path.dt)
    return F.value_at(path.points[:, idx])


def frame_differentials(F, path):
    """d_i f at the partition points in the left-invariant frame, (P, k, d)."""
    idx = F.grid_indices(path.N, path.dt)
    return F.differentials_at(path.points[:, idx])


# ----------------------------------------------------------------------------
# tangent processes


def torsion_apply(T, a, b):
    """T(a, b) for batched frame vectors."""
    d = T.shape[0]
    a, b = np.broadcast_arrays(a, b)
    outer = (a[..., :, None] * b[..., None, :]).reshape(a.shape[:-1] + (d * d,))
    return outer @ T.reshape(d * d, d)


def frames_apply(U, w, trivial=False):
    """U w for batched frames; skipped when the frames are the identity."""
    if trivial:
        return w
    return (U @ w[..., None])[..., 0]


@dataclass
class TangentProcess:
    base: object
    v_h: CameronMartinPath
    v_v: np.ndarray  # (P, N+1, m)
    v: np.ndarray  # (P, N+1, d)


def _vertical_rate(T, U, dB, hk, n, trivial=False):
    # [U^T T(U dB, U h)]_V with dB, h horizontal in the frame of U
    d = T.shape[0]
    pad = [(0, 0)] * (np.ndim(dB) - 1) + [(0, d - n)]
    a = frames_apply(U, np.pad(dB, pad), trivial)
    b = frames_apply(U, np.pad(np.broadcast_to(hk, np.shape(dB)), pad), trivial)
    t = torsion_apply(T, a, b)
    if not trivial:
        t = (np.swapaxes(U, -1, -2) @ t[..., None])[..., 0]
    return t[..., n:]


def make_tangent_process(path, h, bott=None):
    """v = (h, v_V), v_V the Stratonovich torsion integral along the Bott frame."""
    model = path.model
    bott = bott or bott_connection(model)
    n, d = model.n, model.d
    P, N = path.P, path.N
    hv = h.grid_values(N, path.dt)
    T = bott.torsion
    U = path.frames
    dB = path.noise
    triv = path.trivial_frames
    left = _vertical_rate(T, U[:, :-1], dB, hv[None, :-1], n, triv)
    right = _vertical_rate(T, U[:, 1:], dB, hv[None, 1:], n, triv)
    vv = np.zeros((P, N + 1, d - n))
    np.cumsum(0.5 * (left + right), axis=1, out=vv[:, 1:])
    v = np.concatenate([np.broadcast_to(hv, (P, N + 1, n)), vv], axis=-1)
    return TangentProcess(path, h, vv, v)


def frame_vector(path, v, k):
    """U_k v_k in left-invariant components."""
    return np.einsum("pab,pb->pa", path.frames[:, k], v[:, k])


def directional_derivative(F, path, v):
    """D_v F = sum_i <d_i f, U_{s_i} v(s_i)>, one value per path."""
    idx = F.grid_indices(path.N, path.dt)
    df = F.differentials_at(path.points[:, idx])
    Uv = frames_apply(path.frames[:, idx], v.v[:, idx], path.trivial_frames)
    return np.einsum("pka,pka->p", df, Uv)


def damped_malliavin_derivative(F, path, eps=None):
    """D~_s F = sum_i 1_{s <= s_i} tau_s^{-1} tau_{s_i} d_i f, shape (P, N+1, d)."""
    if path.tau_eps is None:
        raise ValueError("damped transport has not been computed on this path")
    if eps is not None and not eps > 0:
        raise ValueError(f"epsilon must be positive, got {eps}")
    if eps is not None and path.epsilon is not None and abs(eps - path.epsilon) > 0:
        raise ValueError(f"path carries transport for epsilon={path.epsilon}, not {eps}")
    idx = F.grid_indices(path.N, path.dt)
    df = F.differentials_at(path.points[:, idx])
    tau = path.tau_eps
    P, N1, d, _ = tau.shape
    pulled = np.einsum("pkab,pkb->pka", tau[:, idx], df)
    total = np.zeros((P, N1, d))
    for i, k in enumerate(idx):
        total[:, : k + 1] += pulled[:, i, None, :]
    return np.linalg.solve(tau, total[..., None])[..., 0]


# ----------------------------------------------------------------------------
# p = int q dB + int r ds


@dataclass
class PDecomposition:
    q: np.ndarray  # (P, N, n, n) skew, left points
    r: np.ndarray  # (P, N, n)
    p_ito: np.ndarray  # (P, N+1, n)
    p_strat: np.ndarray  # (P, N+1, n)

    def ito_increments(self, noise, dt):
        return _mv(self.q, noise) + self.r * dt


def connection_choice(model, choice, bott=None):
    """Torsion and curvature of the connection D lifting the frames."""
    bott = bott or bott_connection(model)
    if isinstance(choice, str):
        tag, eps = choice, None
    else:
        tag, eps = choice
    if tag == "bott":
        return bott.torsion, bott.curvature
    if tag == "adjoint":
        if eps is None or not eps > 0:
            raise ValueError("adjoint choice needs a positive epsilon")
        adj = adjoint_connection(model, eps, bott)
        return adj.torsion, adjoint_curvature(model, eps, bott)
    raise ValueError(f"unsupported D_choice {choice!r}")


def _mv(A, x):
    return (A @ x[..., None])[..., 0]


def _torsion_matrix(TD, w):
    # column i is TD(e_i, w)
    d = TD.shape[0]
    flat = w @ np.swapaxes(TD, 0, 1).reshape(d, d * d)
    return np.swapaxes(flat.reshape(w.shape[:-1] + (d, d)), -1, -2)


def _curv_matrix(RD, x, y):
    # [l, k] entry of R(x, y) e_k
    d = RD.shape[0]
    x, y = np.broadcast_arrays(x, y)
    outer = (x[..., :, None] * y[..., None, :]).reshape(x.shape[:-1] + (d * d,))
    flat = outer @ RD.reshape(d * d, d * d)
    return np.swapaxes(flat.reshape(x.shape[:-1] + (d, d)), -1, -2)


def skew_expm(Q):
    """exp of a batch of skew matrices; closed form for sizes 1 and 2."""
    n = Q.shape[-1]
    if n == 1:
        return np.ones_like(Q)
    if n == 2:
        th = Q[..., 1, 0]
        c, s = np.cos(th), np.sin(th)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    return scipy.linalg.expm(Q)


def p_decomposition(path, v, D_choice="bott", bott=None):
    model = path.model
    bott = bott or bott_connection(model)
    TD, RD = connection_choice(model, D_choice, bott)
    n, d = model.n, model.d
    P, N, dt = path.P, path.N, path.dt
    triv = path.trivial_frames
    U = np.asarray(path.frames)
    Ut = np.swapaxes(U, -1, -2)

    def conj(X, sl=slice(None)):
        # U^T X U restricted to the horizontal block
        X = X if triv else Ut[:, sl] @ X @ U[:, sl]
        return X[..., :n, :n]

    Uv = v.v if triv else _mv(U, v.v)
    Y2 = -conj(_torsion_matrix(TD, Uv))
    E = np.eye(d)
    dBf = np.zeros((P, N, d))
    dBf[..., :n] = path.noise
    UdB_l = dBf if triv else _mv(U[:, :-1], dBf)
    UdB_r = dBf if triv else _mv(U[:, 1:], dBf)
    Om_l = conj(_curv_matrix(RD, UdB_l, Uv[:, :-1]), slice(None, -1))
    Om_r = conj(_curv_matrix(RD, UdB_r, Uv[:, 1:]), slice(1, None))
    C = np.zeros((P, N + 1, n, n))
    np.cumsum(0.5 * (Om_l + Om_r), axis=1, out=C[:, 1:])

    hv = v.v_h.grid_values(N, dt)
    dh = np.diff(hv, axis=0)
    A = Y2 - C
    p_strat = np.zeros((P, N + 1, n))
    incr = dh[None] + 0.5 * _mv(A[:, :-1] + A[:, 1:], path.noise)
    np.cumsum(incr, axis=1, out=p_strat[:, 1:])

    Al = A[:, :-1]
    q = 0.5 * (Al - np.swapaxes(Al, -1, -2))

    # Ito corrections: 1/2 sum_i d_i(column i), d_i the derivative along dB_i
    Ul, Ult = U[:, :-1], Ut[:, :-1]
    Uvl = Uv[:, :-1]
    TDm = _torsion_matrix(TD, Uvl)
    corr = np.zeros((P, N, n))
    for i in range(n):
        if triv:
            Ue = E[i]
            Psi = -frame_gamma(bott.gamma, Ue)
            Ul = Ult = E
        else:
            Ue = Ul[..., :, i]  # U e_i
            Psi = -frame_gamma(bott.gamma, Ue) @ Ul
        nu = np.zeros((P, N, d))
        nu[..., n:] = _vertical_rate(bott.torsion, Ul, np.broadcast_to(E[i, :n], (P, N, n)),
                                     hv[None, :-1], n, triv)
        dw = _mv(Psi, v.v[:, :-1]) + (nu if triv else _mv(Ul, nu))
        if triv:
            dY = -(np.swapaxes(Psi, -1, -2) @ TDm + _torsion_matrix(TD, dw) + TDm @ Psi)
        else:
            dY = -(
                np.swapaxes(Psi, -1, -2) @ TDm @ Ul
                + Ult @ _torsion_matrix(TD, dw) @ Ul
                + Ult @ TDm @ Psi
            )
        dY = dY[..., :n, :n]
        Om_i = _curv_matrix(RD, Ue, Uvl)
        Om_i = (Om_i if triv else Ult @ Om_i @ Ul)[..., :n, :n]
        corr += 0.5 * (dY[..., :, i] - Om_i[..., :, i])
    r = v.v_h.cell_derivative(N, dt)[None] + corr
    p_ito = np.zeros((P, N + 1, n))
    np.cumsum(_mv(q, path.noise) + r * dt, axis=1, out=p_ito[:, 1:])
    return PDecomposition(q=q, r=r, p_ito=p_ito, p_strat=p_strat)


def variation_rho(path, h, t, D_choice="bott", bott=None, decomposition=None):
    """(rho_t omega)_k = e^{t q_k} dB_k + t r_k dt, shape (P, N, n)."""
    if decomposition is None:
        v = make_tangent_process(path, h, bott)
        decomposition = p_decomposition(path, v, D_choice, bott)
    if t == 0:
        return np.array(path.noise, copy=True)
    R = skew_expm(t * decomposition.q)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(R.shape[-1])).max()
    if err > 1e-10:
        raise RuntimeError(f"exponential of a skew matrix lost orthogonality ({err:.2e})")
    return _mv(R, path.noise) + t * decomposition.r * path.dt


class FlowDivergence(RuntimeError):
    pass


def variation_flow_nu(path, h, t_max, t_steps, D_choice="bott", bott=None, x0=None):
    """Forward Euler in t of nu_t = omega + int_0^t p(nu_u) du.

    Returns the list of increment arrays nu at t = j t_max / t_steps.
    """
    if t_steps < 1:
        raise ValueError("t_steps must be at least 1")
    model = path.model
    bott = bott or bott_connection(model)
    x0 = path.points[:, 0] if x0 is None else x0
    nu = np.array(path.noise, copy=True)
    scale = np.abs(nu).max()
    out = [nu.copy()]
    if t_max == 0:
        return [nu.copy() for _ in range(t_steps + 1)]
    dtau = t_max / t_steps
    for _ in range(t_steps):
        current = simulate_batch(model, bott, x0[0] if np.ndim(x0) > 1 else x0, nu, path.dt)
        v = make_tangent_process(current, h, bott)
        dec = p_decomposition(current, v, D_choice, bott)
        nu = nu + dtau * dec.ito_increments(nu, path.dt)
        if np.abs(nu).max() > 10 * max(scale, 1e-300):
            raise FlowDivergence("flow increments exceeded 10x their initial scale")
        out.append(nu.copy())
    return out


# ----------------------------------------------------------------------------
# deterministic tangency


def smooth_tangent_path(model, omega, h, N, bott=None):
    """tau_h for a smooth horizontal omega: v = (h, int U^{-1} T(U w', U h)_V).

    Integrated with DOP853 at tight tolerance, reported on the uniform grid.
    ``h`` is a CameronMartinPath or SmoothPath with n components.
    """
    bott = bott or bott_connection(model)
    n, d = model.n, model.d
    chart = model.chart
    dim = chart.dim
    T = bott.torsion

    def rhs(s, y):
        x = y[:dim]
        U = y[dim:dim + d * d].reshape(d, d)
        wdot = omega.derivative(s)
        wdot = np.concatenate([wdot[:n], np.zeros(d - n)])
        a = U @ wdot
        xdot = a @ chart.frame_at(x)
        Udot = -frame_gamma(bott.gamma, a) @ U
        hh = np.concatenate([h.value(s)[:n], np.zeros(d - n)])
        vdot = (U.T @ torsion_apply(T, a, U @ hh))[n:]
        return np.concatenate([xdot, Udot.ravel(), vdot])

    y0 = np.concatenate([chart.identity(), np.eye(d).ravel(), np.zeros(d - n)])
    grid = np.linspace(0.0, 1.0, N + 1)
    sol = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", t_eval=grid, rtol=1e-12, atol=1e-13)
    if not sol.success:
        raise RuntimeError(sol.message)
    vv = sol.y[dim + d * d:].T
    return np.concatenate([h.value(grid)[:, :n], vv], axis=-1)


def tangency_check_smooth(model, omega, v, N=1024, tol=1e-8, bott=None):
    """Max over s of |v_V(s) - int_0^s U^{-1} T(U dw, U v)_V|.

    ``v`` is an (N+1, d) array on the uniform grid or a callable in s.
    Returns (is_tangent, residual).
    """
    if N % 2:
        raise ValueError("N must be even for Simpson quadrature")
    bott = bott or bott_connection(model)
    n = model.n
    dev = develop_smooth(model, omega, N, bott, horizontal=True)
    grid = dev.times
    vals = v(grid) if callable(v) else np.asarray(v, dtype=float)
    if vals.shape != (N + 1, model.d):
        raise ValueError(f"v must have shape {(N + 1, model.d)}")
    wdot = omega.derivative(grid).copy()
    wdot[:, n:] = 0.0
    U = dev.frames
    a = np.einsum("kab,kb->ka", U, wdot)
    b = np.einsum("kab,kb->ka", U, vals)
    integrand = np.einsum("kab,ka->kb", U, torsion_apply(bott.torsion, a, b))[:, n:]
    integral = np.zeros_like(integrand)
    integral[1:] = cumulative_simpson(integrand, x=grid, axis=0)
    residual = float(np.abs(vals[:, n:] - integral).max()) if model.m else 0.0
    return residual <= tol, residual
