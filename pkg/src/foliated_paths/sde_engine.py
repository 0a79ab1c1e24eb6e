"""Horizontal Brownian motion, stochastic transports and development maps.

Everything runs on batches of paths: arrays carry a leading path axis P.
A single :class:`PathSample` is a batch of size one with convenience
accessors.  Frames and transports are stored in the *vectors* convention
(column j = image of the j-th basis vector in left-invariant components),
except ``theta_eps`` and ``tau_eps`` which act on one-form components.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model_geometry import epsilon_connection, g_eps, weitzenbock_potential

CHUNK_PATHS = 512


def path_generator(seed, index):
    """Counter-based stream for one path: Philox keyed by (seed, index)."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(index)]))


def brownian_increments(seed, start, count, N, dt, n):
    """Increments for paths start..start+count-1, shape (count, N, n)."""
    out = np.empty((count, N, n))
    sq = np.sqrt(dt)
    for p in range(count):
        out[p] = path_generator(seed, start + p).standard_normal((N, n)) * sq
    return out


def check_grid(N, dt):
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if N < 1:
        raise ValueError("N must be at least 1")


@dataclass
class FrameState:
    point: np.ndarray
    frame: np.ndarray


@dataclass
class PathBatch:
    model: object
    dt: float
    noise: np.ndarray  # (P, N, n)
    points: np.ndarray  # (P, N+1, dim)
    frames: np.ndarray  # (P, N+1, d, d), Bott-parallel frames
    increments: np.ndarray = None  # (P, N, d) algebra steps
    seed: int = 0
    first_index: int = 0
    theta_bott: np.ndarray = None
    theta_eps: np.ndarray = None
    tau_eps: np.ndarray = None
    M_eps: np.ndarray = None
    epsilon: float = None
    trivial_frames: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def P(self):
        return self.noise.shape[0]

    @property
    def N(self):
        return self.noise.shape[1]

    @property
    def times(self):
        return np.arange(self.N + 1) * self.dt

    def path(self, p):
        """Single-path view."""
        sel = slice(p, p + 1)
        kw = {}
        for name in ("theta_bott", "theta_eps", "tau_eps", "M_eps"):
            arr = getattr(self, name)
            kw[name] = None if arr is None else arr[sel]
        return PathSample(
            model=self.model,
            dt=self.dt,
            noise=self.noise[sel],
            points=self.points[sel],
            frames=self.frames[sel],
            increments=self.increments[sel],
            seed=self.seed,
            first_index=self.first_index + p,
            epsilon=self.epsilon,
            trivial_frames=self.trivial_frames,
            **kw,
        )


class PathSample(PathBatch):
    """One discretized path (a batch of size one)."""

    @property
    def states(self):
        return [FrameState(self.points[0, k], self.frames[0, k]) for k in range(self.N + 1)]


def frame_gamma(gamma, w):
    """Connection matrix G(w)[k, j] = sum_i w_i gamma[i, j, k], batched in w."""
    d = gamma.shape[0]
    w = np.asarray(w)
    out = (w.reshape(-1, d) @ gamma.reshape(d, d * d)).reshape(w.shape[:-1] + (d, d))
    return np.swapaxes(out, -1, -2)


def small_inverse(A):
    """Batched inverse; closed-form adjugate for 3 x 3, LAPACK otherwise."""
    if A.shape[-1] != 3:
        return np.linalg.inv(A)
    a, b, c = A[..., 0, 0], A[..., 0, 1], A[..., 0, 2]
    d, e, f = A[..., 1, 0], A[..., 1, 1], A[..., 1, 2]
    g, h, i = A[..., 2, 0], A[..., 2, 1], A[..., 2, 2]
    co = np.empty_like(A)
    co[..., 0, 0] = e * i - f * h
    co[..., 0, 1] = c * h - b * i
    co[..., 0, 2] = b * f - c * e
    co[..., 1, 0] = f * g - d * i
    co[..., 1, 1] = a * i - c * g
    co[..., 1, 2] = c * d - a * f
    co[..., 2, 0] = d * h - e * g
    co[..., 2, 1] = b * g - a * h
    co[..., 2, 2] = a * e - b * d
    det = a * co[..., 0, 0] + b * co[..., 1, 0] + c * co[..., 2, 0]
    return co / det[..., None, None]


def cayley(G):
    """(I + G/2)^{-1} (I - G/2), batched; orthogonal for skew G."""
    eye = np.eye(G.shape[-1])
    return small_inverse(eye + 0.5 * G) @ (eye - 0.5 * G)


def mgs_blocks(U, n):
    """Modified Gram-Schmidt on the horizontal and vertical column blocks."""
    out = np.array(U, copy=True)
    d = U.shape[-1]
    for lo, hi in ((0, n), (n, d)):
        for j in range(lo, hi):
            v = out[..., :, j]
            for i in range(lo, j):
                q = out[..., :, i]
                v = v - (q * v).sum(-1, keepdims=True) * q
            out[..., :, j] = v / np.linalg.norm(v, axis=-1, keepdims=True)
    return out


def _trivial_bott(model, bott):
    return not np.any(bott.gamma[: model.n])


def integrate_frames(model, bott, noise, x0, scheme="geometric"):
    """Core stepping loop.  Returns (points, frames, increments, trivial).

    ``increments`` are the Lie-algebra steps dw_k with x_{k+1} = x_k exp(dw_k).
    """
    chart = model.chart
    P, N, n = noise.shape
    d = model.d
    x0 = np.asarray(x0, dtype=float)
    points = np.empty((P, N + 1, chart.dim))
    points[:, 0] = x0
    trivial = _trivial_bott(model, bott)
    if scheme == "closed_form":
        if not hasattr(chart, "projection"):
            raise ValueError("closed_form scheme exists only for the Heisenberg model")
        incr = np.zeros((P, N, d))
        incr[..., :n] = noise
        return _heisenberg_closed_form(chart, noise, x0, points), None, incr, True
    if scheme != "geometric":
        raise ValueError(f"unknown scheme {scheme!r}")
    incr = np.zeros((P, N, d))
    if trivial:
        incr[..., :n] = noise
        x = points[:, 0]
        for k in range(N):
            x = chart.normalize(chart.product(x, chart.exp(incr[:, k])))
            points[:, k + 1] = x
        return points, None, incr, True
    frames = np.empty((P, N + 1, d, d))
    frames[:, 0] = np.eye(d)
    gam = bott.gamma
    x = points[:, 0]
    U = frames[:, 0]
    for k in range(N):
        dB = noise[:, k]
        dw0 = np.einsum("pki,pi->pk", U[:, :, :n], dB)
        U_pred = cayley(frame_gamma(gam, dw0)) @ U
        Um = 0.5 * (U + U_pred)
        dw = np.einsum("pki,pi->pk", Um[:, :, :n], dB)
        U = mgs_blocks(cayley(frame_gamma(gam, dw)) @ U, n)
        x = chart.normalize(chart.product(x, chart.exp(dw)))
        points[:, k + 1] = x
        frames[:, k + 1] = U
        incr[:, k] = dw
    return points, frames, incr, False


def _heisenberg_closed_form(chart, noise, x0, points):
    # W = (B, beta, z0 + sum of midpoint Levy-area increments); x0 enters by left product
    n = chart.n
    P, N, _ = noise.shape
    B = np.concatenate([np.zeros((P, 1, 2 * n)), np.cumsum(noise, axis=1)], axis=1)
    mid = 0.5 * (B[:, 1:] + B[:, :-1])
    dz = (mid[..., :n] * noise[..., n:]).sum(-1) - (mid[..., n:] * noise[..., :n]).sum(-1)
    local = np.concatenate(
        [B, np.concatenate([np.zeros((P, 1)), np.cumsum(dz, axis=1)], axis=1)[..., None]],
        axis=-1,
    )
    points[:] = chart.product(np.broadcast_to(x0, local.shape), local)
    return points


def _expand_frames(model, P, N1, frames):
    if frames is None:
        return np.broadcast_to(np.eye(model.d), (P, N1, model.d, model.d))
    return frames


def simulate_batch(model, bott, x0, noise, dt, scheme="geometric", seed=0, first_index=0):
    noise = np.asarray(noise, dtype=float)
    if noise.ndim != 3 or noise.shape[2] != model.n:
        raise ValueError("noise must have shape (P, N, n)")
    check_grid(noise.shape[1], dt)
    points, frames, incr, trivial = integrate_frames(model, bott, noise, x0, scheme)
    P, N = noise.shape[:2]
    return PathBatch(
        model=model,
        dt=float(dt),
        noise=noise,
        points=points,
        frames=_expand_frames(model, P, N + 1, frames),
        increments=incr,
        seed=seed,
        first_index=first_index,
        trivial_frames=trivial,
    )


def simulate_horizontal_bm(model, bott, x0, N, dt, seed, scheme="geometric", index=0, noise=None):
    """One horizontal Brownian path from x0 on a uniform grid.

    ``noise`` (N x n) overrides the counter-based stream for (seed, index).
    """
    check_grid(N, dt)
    if noise is None:
        noise = brownian_increments(seed, index, 1, N, dt, model.n)
    else:
        noise = np.asarray(noise, dtype=float).reshape(1, N, model.n)
    batch = simulate_batch(model, bott, x0, noise, dt, scheme, seed, index)
    return batch.path(0)


def bott_transport(path, bott=None):
    """Bott transport along the simulated path.

    The frame process already solves dU = -Gamma(o dW) U with projection, so
    the transport equals the frame.  Returns the (P, N+1, d, d) array.
    """
    path.theta_bott = path.frames
    return path.theta_bott


def _coefficient(P_vec, K, g):
    # Theta K Theta^{-1} with Theta = P^T and P^{-1} = g^{-1} P^T g
    return np.swapaxes(P_vec, -1, -2) @ (K * g[None, :]) @ P_vec / g[None, :]


def damped_transport(path, model, eps, bott=None, backend="compiled"):
    """Fill theta_eps (forms), M_eps and tau_eps = M Theta on the path grid.

    backend="numpy" runs the vectorised reference loop; both agree to rounding.
    """
    from .model_geometry import bott_connection

    if not eps > 0:
        raise ValueError(f"epsilon must be positive, got {eps}")
    bott = bott or bott_connection(model)
    if path.theta_bott is None:
        bott_transport(path, bott)
    ge = epsilon_connection(model, eps, bott).gamma
    K = weitzenbock_potential(model, eps, bott)
    g = g_eps(model, eps)
    P, N, n = path.noise.shape
    d = model.d
    dt = path.dt
    theta = np.empty((P, N + 1, d, d))
    Ms = np.empty((P, N + 1, d, d))
    if not ge.any() and not K.any():
        theta[:] = np.eye(d)
        Ms[:] = np.eye(d)
    elif backend == "compiled":
        from ._kernels import kernels

        incr = np.ascontiguousarray(path.increments, dtype=float)
        kernels(d).damped(incr, np.ascontiguousarray(ge), np.ascontiguousarray(K),
                      np.ascontiguousarray(g, dtype=float), float(dt), theta, Ms)
    else:
        _damped_numpy(path.increments, ge, K, g, dt, theta, Ms)
    path.theta_eps = theta
    path.M_eps = Ms
    path.tau_eps = Ms @ theta
    path.epsilon = float(eps)
    return path.tau_eps


def _damped_numpy(incr, ge, K, g, dt, theta, Ms):
    P, N, d = incr.shape
    eye = np.eye(d)
    Pv = np.broadcast_to(eye, (P, d, d)).copy()
    M = Pv.copy()
    theta[:, 0] = eye
    Ms[:, 0] = eye
    C0 = _coefficient(Pv, K, g)
    for k in range(N):
        Pn = scipy.linalg.expm(-frame_gamma(ge, incr[:, k])) @ Pv
        C1 = _coefficient(Pn, K, g)
        Ch = 0.5 * (C0 + C1)
        k1 = -0.5 * M @ C0
        k2 = -0.5 * (M + 0.5 * dt * k1) @ Ch
        k3 = -0.5 * (M + 0.5 * dt * k2) @ Ch
        k4 = -0.5 * (M + dt * k3) @ C1
        M = M + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        Pv, C0 = Pn, C1
        theta[:, k + 1] = np.swapaxes(Pv, -1, -2)
        Ms[:, k + 1] = M


def frozen_damping(model, eps, s, bott=None):
    """expm(-s K / 2): the damping factor when Theta^eps commutes with K."""
    return scipy.linalg.expm(-0.5 * s * weitzenbock_potential(model, eps, bott))


def anti_develop(path):
    """Recover driving increments from points and Bott frames, (P, N, n)."""
    chart = path.model.chart
    n = path.model.n
    steps = chart.log(chart.product(chart.inverse(path.points[:, :-1]), path.points[:, 1:]))
    Um = 0.5 * (path.frames[:, :-1] + path.frames[:, 1:])
    # U is orthogonal up to O(dt) at the midpoint; solve rather than transpose
    local = np.linalg.solve(Um, steps[..., None])[..., 0]
    return local[..., :n]


# ----------------------------------------------------------------------------
# deterministic development


class SmoothPath:
    """Deterministic path omega: [0, 1] -> R^d with omega(0) = 0."""

    def __init__(self, value, derivative, d, name="path"):
        self.value = value
        self.derivative = derivative
        self.d = d
        self.name = name

    @classmethod
    def circle(cls, d, radius=1.0, turns=1.0, vertical=0.0):
        # starts at the origin: (r cos - r, r sin), traced counterclockwise
        w = 2 * np.pi * turns

        def value(s):
            s = np.asarray(s, dtype=float)
            out = np.zeros(s.shape + (d,))
            out[..., 0] = radius * (np.cos(w * s) - 1)
            out[..., 1] = radius * np.sin(w * s)
            if d > 2:
                out[..., -1] = vertical * s
            return out

        def derivative(s):
            s = np.asarray(s, dtype=float)
            out = np.zeros(s.shape + (d,))
            out[..., 0] = -radius * w * np.sin(w * s)
            out[..., 1] = radius * w * np.cos(w * s)
            if d > 2:
                out[..., -1] = vertical
            return out

        return cls(value, derivative, d, name="circle")

    @classmethod
    def polynomial(cls, coeffs, name="polynomial"):
        """omega(s) = sum_p coeffs[p] s^(p+1); coeffs shape (deg, d)."""
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        deg, d = coeffs.shape
        pw = np.arange(1, deg + 1)

        def value(s):
            s = np.asarray(s, dtype=float)
            return (s[..., None] ** pw) @ coeffs

        def derivative(s):
            s = np.asarray(s, dtype=float)
            return (pw * s[..., None] ** (pw - 1)) @ coeffs

        return cls(value, derivative, d, name=name)


@dataclass
class Development:
    times: np.ndarray
    points: np.ndarray  # (N+1, dim)
    frames: np.ndarray  # (N+1, d, d)
    model: object

    @property
    def endpoint(self):
        return self.points[-1]


def _development_rhs(chart, gamma, x, U, wdot):
    a = U @ wdot
    xdot = a @ chart.frame_at(x)
    Udot = -frame_gamma(gamma, a) @ U
    return xdot, Udot


def develop_smooth(model, omega, N, bott=None, horizontal=None):
    """RK4 development of omega along the Bott connection.

    ``horizontal=True`` discards the vertical components of omega's
    derivative; by default they are used as given.
    """
    from .model_geometry import bott_connection

    bott = bott or bott_connection(model)
    if N < 1:
        raise ValueError("N must be at least 1")
    d = model.d
    chart = model.chart
    if omega.d != d:
        raise ValueError(f"path has dimension {omega.d}, model needs {d}")
    mask = np.ones(d)
    if horizontal:
        mask[model.n:] = 0.0
    deriv = lambda s: omega.derivative(s) * mask
    h = 1.0 / N
    x = np.array(chart.identity(), dtype=float)
    U = np.eye(d)
    points = np.empty((N + 1, chart.dim))
    frames = np.empty((N + 1, d, d))
    points[0], frames[0] = x, U
    gam = bott.gamma
    for k in range(N):
        s = k * h
        k1 = _development_rhs(chart, gam, x, U, deriv(s))
        k2 = _development_rhs(chart, gam, x + 0.5 * h * k1[0], U + 0.5 * h * k1[1], deriv(s + h / 2))
        k3 = _development_rhs(chart, gam, x + 0.5 * h * k2[0], U + 0.5 * h * k2[1], deriv(s + h / 2))
        k4 = _development_rhs(chart, gam, x + h * k3[0], U + h * k3[1], deriv(s + h))
        x = x + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        U = U + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        x = chart.normalize(x)
        points[k + 1], frames[k + 1] = x, U
    return Development(np.linspace(0.0, 1.0, N + 1), points, frames, model)


def anti_develop_smooth(dev):
    """Increments of the anti-developed path on the development grid, (N, d)."""
    chart = dev.model.chart
    steps = chart.log(chart.product(chart.inverse(dev.points[:-1]), dev.points[1:]))
    Um = 0.5 * (dev.frames[:-1] + dev.frames[1:])
    return np.linalg.solve(Um, steps[..., None])[..., 0]


def heisenberg_levy_area(omega, n_quad=20001):
    """Signed area of the planar path (x, y) of omega: int x dy - y dx / 2."""
    s = np.linspace(0.0, 1.0, n_quad)
    w = omega.value(s)
    dw = omega.derivative(s)
    integrand = w[:, 0] * dw[:, 1] - w[:, 1] * dw[:, 0]
    return 0.5 * np.trapezoid(integrand, s)
