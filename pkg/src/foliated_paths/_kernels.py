"""Compiled inner loops for the per-path transport ODEs.

Kernels are built per algebra dimension so the small loops have constant
trip counts (roughly twice as fast as a shape-generic kernel).
"""

from functools import lru_cache
from types import SimpleNamespace

import numpy as np
from numba import njit


@lru_cache(maxsize=None)
def kernels(d):
    @njit(nogil=True)
    def _solve_into(A, X):
        # Gauss-Jordan with partial pivoting; A is destroyed, X overwritten by A^{-1} X
        for col in range(d):
            piv = col
            best = abs(A[col, col])
            for r in range(col + 1, d):
                if abs(A[r, col]) > best:
                    best = abs(A[r, col])
                    piv = r
            if piv != col:
                for c in range(d):
                    t = A[col, c]
                    A[col, c] = A[piv, c]
                    A[piv, c] = t
                for c in range(d):
                    t = X[col, c]
                    X[col, c] = X[piv, c]
                    X[piv, c] = t
            inv = 1.0 / A[col, col]
            for r in range(d):
                if r == col:
                    continue
                f = A[r, col] * inv
                if f == 0.0:
                    continue
                for c in range(col, d):
                    A[r, c] -= f * A[col, c]
                for c in range(d):
                    X[r, c] -= f * X[col, c]
        for r in range(d):
            inv = 1.0 / A[r, r]
            for c in range(d):
                X[r, c] *= inv

    @njit(nogil=True)
    def _matmul_into(A, B, out):
        for i in range(d):
            for j in range(d):
                acc = 0.0
                for l in range(d):
                    acc += A[i, l] * B[l, j]
                out[i, j] = acc

    @njit(nogil=True)
    def _expm_neg_into(G, E, T, S):
        # E = exp(-G): scale to norm <= 1/4, degree-12 Taylor (Horner), square back
        nrm = 0.0
        for a in range(d):
            row = 0.0
            for b in range(d):
                row += abs(G[a, b])
            nrm = max(nrm, row)
        sq = 0
        while nrm > 0.25:
            nrm *= 0.5
            sq += 1
        c = -1.0 / 2.0**sq
        for a in range(d):
            for b in range(d):
                E[a, b] = (1.0 if a == b else 0.0) + c * G[a, b] / 12.0
        for j in range(11, 0, -1):
            for a in range(d):
                for b in range(d):
                    acc = 0.0
                    for l in range(d):
                        acc += G[a, l] * E[l, b]
                    T[a, b] = (1.0 if a == b else 0.0) + c * acc / j
            for a in range(d):
                for b in range(d):
                    E[a, b] = T[a, b]
        for _ in range(sq):
            _matmul_into(E, E, S)
            for a in range(d):
                for b in range(d):
                    E[a, b] = S[a, b]

    @njit(nogil=True)
    def _coefficient_into(Pv, Kg, g, tmp, C):
        # P^T (K g) P g^{-1}
        _matmul_into(Kg, Pv, tmp)
        for a in range(d):
            for b in range(d):
                acc = 0.0
                for c in range(d):
                    acc += Pv[c, a] * tmp[c, b]
                C[a, b] = acc / g[b]

    @njit(nogil=True)
    def damped_kernel(incr, ge, K, g, dt, theta, Ms):
        """Exponential-step transport of vectors under ge and RK4 for dM = -M C / 2.

        theta receives P^T (the one-form transport), Ms the damping factor.
        """
        P, N, _ = incr.shape
        Kg = np.empty((d, d))
        for a in range(d):
            for b in range(d):
                Kg[a, b] = K[a, b] * g[b]
        G = np.empty((d, d))
        A = np.empty((d, d))
        Pv = np.empty((d, d))
        Pn = np.empty((d, d))
        M = np.empty((d, d))
        Y = np.empty((d, d))
        C0 = np.empty((d, d))
        C1 = np.empty((d, d))
        Ch = np.empty((d, d))
        tmp = np.empty((d, d))
        k1 = np.empty((d, d))
        k2 = np.empty((d, d))
        k3 = np.empty((d, d))
        k4 = np.empty((d, d))
        h = 0.5 * dt
        for p in range(P):
            for a in range(d):
                for b in range(d):
                    v = 1.0 if a == b else 0.0
                    Pv[a, b] = v
                    M[a, b] = v
                    theta[p, 0, a, b] = v
                    Ms[p, 0, a, b] = v
            _coefficient_into(Pv, Kg, g, tmp, C0)
            for k in range(N):
                for kk in range(d):
                    for j in range(d):
                        acc = 0.0
                        for i in range(d):
                            acc += incr[p, k, i] * ge[i, j, kk]
                        G[kk, j] = acc
                # Pn = exp(-G) Pv
                _expm_neg_into(G, A, tmp, k1)
                _matmul_into(A, Pv, Pn)
                _coefficient_into(Pn, Kg, g, tmp, C1)
                for a in range(d):
                    for b in range(d):
                        Ch[a, b] = 0.5 * (C0[a, b] + C1[a, b])
                _matmul_into(M, C0, k1)
                for a in range(d):
                    for b in range(d):
                        k1[a, b] *= -0.5
                        Y[a, b] = M[a, b] + h * k1[a, b]
                _matmul_into(Y, Ch, k2)
                for a in range(d):
                    for b in range(d):
                        k2[a, b] *= -0.5
                        Y[a, b] = M[a, b] + h * k2[a, b]
                _matmul_into(Y, Ch, k3)
                for a in range(d):
                    for b in range(d):
                        k3[a, b] *= -0.5
                        Y[a, b] = M[a, b] + dt * k3[a, b]
                _matmul_into(Y, C1, k4)
                for a in range(d):
                    for b in range(d):
                        M[a, b] += dt / 6.0 * (k1[a, b] + 2.0 * k2[a, b] + 2.0 * k3[a, b] - 0.5 * k4[a, b])
                        Pv[a, b] = Pn[a, b]
                        C0[a, b] = C1[a, b]
                        theta[p, k + 1, b, a] = Pn[a, b]
                        Ms[p, k + 1, a, b] = M[a, b]

    @njit(nogil=True)
    def inverse_transpose(A, out):
        """out[..] = inv(A[..]).T over a flattened stack of square matrices."""
        B = A.shape[0]
        W = np.empty((d, d))
        X = np.empty((d, d))
        for s in range(B):
            for a in range(d):
                for b in range(d):
                    W[a, b] = A[s, a, b]
                    X[a, b] = 1.0 if a == b else 0.0
            _solve_into(W, X)
            for a in range(d):
                for b in range(d):
                    out[s, b, a] = X[a, b]

    return SimpleNamespace(damped=damped_kernel, inverse_transpose=inverse_transpose)
