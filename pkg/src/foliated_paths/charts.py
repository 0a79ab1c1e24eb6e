"""Global coordinate charts for the model Lie groups.

Every chart exposes the group law on batched coordinate arrays of shape
(..., dim) and the left-invariant frame fields as affine vector fields on
the ambient coordinate space, e_a(x) = A[a] @ x + b[a].  The affine form is
what lets frame derivatives of polynomial test functions be computed from
ordinary partial derivatives.
"""

import numpy as np
import scipy.linalg


class Chart:
    """Base class.  Subclasses set ``dim`` (coordinates) and ``d`` (algebra)."""

    dim = 0
    d = 0
    coord_names = ()

    def identity(self):
        raise NotImplementedError

    def product(self, a, b):
        raise NotImplementedError

    def inverse(self, a):
        raise NotImplementedError

    def exp(self, xi):
        raise NotImplementedError

    def log(self, g):
        raise NotImplementedError

    def frame_affine(self):
        """Return (A, b) with shapes (d, dim, dim) and (d, dim)."""
        raise NotImplementedError

    def normalize(self, x):
        return x

    def frame_at(self, x):
        """Frame fields at points x, shape (..., d, dim)."""
        A, b = self._affine
        return np.einsum("amn,...n->...am", A, x) + b

    @property
    def _affine(self):
        cached = getattr(self, "_affine_cache", None)
        if cached is None:
            cached = self.frame_affine()
            self._affine_cache = cached
        return cached


class HeisenbergChart(Chart):
    """Coordinates (x_1..x_n, y_1..y_n, z) with the law

    (x, y, z) * (x', y', z') = (x + x', y + y', z + z' + <x, y'> - <x', y>).

    In these coordinates exp is the identity map on the algebra.
    """

    def __init__(self, n):
        self.n = n
        self.dim = self.d = 2 * n + 1
        if n == 1:
            self.coord_names = ("x", "y", "z")
        else:
            self.coord_names = tuple(
                [f"x{i + 1}" for i in range(n)] + [f"y{i + 1}" for i in range(n)] + ["z"]
            )

    def identity(self):
        return np.zeros(self.dim)

    def product(self, a, b):
        n = self.n
        xa, ya = a[..., :n], a[..., n:2 * n]
        xb, yb = b[..., :n], b[..., n:2 * n]
        out = a + b
        out[..., 2 * n] += (xa * yb).sum(-1) - (xb * ya).sum(-1)
        return out

    def inverse(self, a):
        return -np.asarray(a)

    def exp(self, xi):
        return np.array(xi, copy=True)

    def log(self, g):
        return np.array(g, copy=True)

    def frame_affine(self):
        n, D = self.n, self.dim
        A = np.zeros((D, D, D))
        b = np.eye(D)
        for i in range(n):
            A[i, 2 * n, n + i] = -1.0  # X_i = d/dx_i - y_i d/dz
            A[n + i, 2 * n, i] = 1.0  # Y_i = d/dy_i + x_i d/dz
        return A, b

    def projection(self, x):
        """Submersion onto the flat base R^{2n}."""
        return x[..., : 2 * self.n]


def quat_mul(p, q):
    w1, v1 = p[..., 0], p[..., 1:]
    w2, v2 = q[..., 0], q[..., 1:]
    w = w1 * w2 - (v1 * v2).sum(-1)
    v = w1[..., None] * v2 + w2[..., None] * v1 + np.cross(v1, v2)
    return np.concatenate([w[..., None], v], axis=-1)


class QuaternionChart(Chart):
    """SU(2) as unit quaternions (w, a, b, c); frame X = i, Y = j, Z = k."""

    dim = 4
    d = 3
    coord_names = ("q0", "q1", "q2", "q3")

    def identity(self):
        return np.array([1.0, 0.0, 0.0, 0.0])

    def product(self, a, b):
        return quat_mul(a, b)

    def inverse(self, a):
        out = np.array(a, copy=True)
        out[..., 1:] *= -1
        return out

    def exp(self, xi):
        # written with theta^2 so complex steps stay analytic
        xi = np.asarray(xi)
        th2 = (xi * xi).sum(-1)
        th = np.sqrt(th2 + 0j) if np.iscomplexobj(xi) else np.sqrt(th2)
        small = np.abs(th2) < 1e-12
        safe = np.where(small, 1.0, th)
        sinc = np.where(small, 1 - th2 / 6 + th2 * th2 / 120, np.sin(safe) / safe)
        cos = np.where(small, 1 - th2 / 2 + th2 * th2 / 24, np.cos(safe))
        return np.concatenate([cos[..., None], sinc[..., None] * xi], axis=-1)

    def log(self, g):
        g = np.asarray(g)
        v = g[..., 1:]
        s = np.linalg.norm(v, axis=-1)
        th = np.arctan2(s, g[..., 0])
        fac = np.where(s < 1e-15, 1.0, th / np.where(s < 1e-15, 1.0, s))
        return fac[..., None] * v

    def frame_affine(self):
        A = np.zeros((3, 4, 4))
        basis = np.eye(4)
        for a in range(3):
            unit = np.zeros(4)
            unit[a + 1] = 1.0
            # column j of the right-multiplication matrix is e_j * unit
            A[a] = quat_mul(basis, unit).T
        return A, np.zeros((3, 4))

    def normalize(self, x):
        return x / np.linalg.norm(x, axis=-1, keepdims=True)


class EuclideanChart(Chart):
    """Abelian R^d with additive law."""

    def __init__(self, d):
        self.dim = self.d = d
        self.coord_names = tuple(f"u{i + 1}" for i in range(d))

    def identity(self):
        return np.zeros(self.dim)

    def product(self, a, b):
        return a + b

    def inverse(self, a):
        return -np.asarray(a)

    def exp(self, xi):
        return np.array(xi, copy=True)

    def log(self, g):
        return np.array(g, copy=True)

    def frame_affine(self):
        return np.zeros((self.d, self.d, self.d)), np.eye(self.d)


class AdjointChart(Chart):
    """Matrix realization through the adjoint representation plus characters.

    Points are flattened d x d matrices Ad(g) followed by k abelian
    coordinates chi(g), where the rows of chi span the linear forms that
    vanish on [g, g].  Ad alone forgets the centre; the characters restore
    it whenever centre and derived algebra meet trivially (``faithful``).
    Otherwise the chart still carries a valid left-invariant diffusion but
    logarithms only recover increments modulo the lost central directions.
    """

    def __init__(self, c):
        c = np.asarray(c, dtype=float)
        d = self.d = c.shape[0]
        # (ad_a)[k, b] = c[a, b, k]
        self.ad = np.transpose(c, (0, 2, 1)).copy()
        derived = c.reshape(d * d, d)
        _, sv, vt = np.linalg.svd(derived) if derived.any() else (None, np.zeros(0), np.eye(d))
        rank = int(np.sum(sv > 1e-10 * max(1.0, sv.max(initial=0.0))))
        self.chi = vt[rank:].copy()  # (k, d), annihilates [g, g]
        self.k = len(self.chi)
        self.dim = d * d + self.k
        self._basis = np.vstack([self.ad.reshape(d, -1).T, self.chi])
        self.faithful = bool(np.linalg.matrix_rank(self._basis) == d)
        self.coord_names = tuple(f"g{r}{s}" for r in range(d) for s in range(d)) + tuple(
            f"chi{r + 1}" for r in range(self.k)
        )

    def _split(self, x):
        x = np.asarray(x)
        m = x[..., : self.d * self.d]
        return m.reshape(x.shape[:-1] + (self.d, self.d)), x[..., self.d * self.d:]

    def _join(self, m, a):
        flat = m.reshape(m.shape[:-2] + (self.d * self.d,))
        a = np.broadcast_to(a, flat.shape[:-1] + (self.k,))
        return np.concatenate([flat, a], axis=-1)

    def identity(self):
        return self._join(np.eye(self.d), np.zeros(self.k))

    def product(self, a, b):
        ma, ca = self._split(a)
        mb, cb = self._split(b)
        return self._join(ma @ mb, ca + cb)

    def inverse(self, a):
        m, ch = self._split(a)
        return self._join(np.linalg.inv(m), -ch)

    def exp(self, xi):
        xi = np.asarray(xi)
        gen = np.einsum("...a,akb->...kb", xi, self.ad)
        return self._join(scipy.linalg.expm(gen), xi @ self.chi.T)

    def log(self, g):
        mats, ch = self._split(g)
        flat = mats.reshape((-1, self.d, self.d))
        logs = np.array([np.real(scipy.linalg.logm(m)) for m in flat]).reshape(len(flat), -1)
        rhs = np.concatenate([logs, ch.reshape(len(flat), self.k)], axis=-1)
        # least squares in the stacked (ad, chi) basis; exact when faithful
        coef, *_ = np.linalg.lstsq(self._basis, rhs.T, rcond=None)
        return coef.T.reshape(mats.shape[:-2] + (self.d,))

    def frame_affine(self):
        d, D = self.d, self.dim
        A = np.zeros((d, D, D))
        b = np.zeros((d, D))
        for a in range(d):
            for r in range(d):
                for col in range(d):
                    for k in range(d):
                        # (g ad_a)[r, col] = sum_k g[r, k] ad_a[k, col]
                        A[a, r * d + col, r * d + k] += self.ad[a][k, col]
            b[a, d * d:] = self.chi[:, a]
        return A, b
