"""Model foliated Lie groups and their frame-constant connection tensors.

A model is a Lie group with a left-invariant orthonormal frame
e_1..e_{n+m}; the first n fields span the horizontal bundle H and the rest
span the leaves V.  Brackets are given by structure constants
``c[i, j, k]`` with [e_i, e_j] = sum_k c[i, j, k] e_k, so every tensor below
is a constant array in the frame.

Index conventions (all arrays, d = n + m):

* ``gamma[i, j, k]``: nabla_{e_i} e_j = sum_k gamma[i, j, k] e_k
* ``torsion[i, j, k]``: T(e_i, e_j) = sum_k torsion[i, j, k] e_k
* ``curvature[i, j, k, l]``: R(e_i, e_j) e_k = sum_l curvature[i, j, k, l] e_l
* ``j[z, x, y]``: J_{e_z} e_x = sum_y j[z, x, y] e_y

A (1,1) tensor is stored as the matrix acting on frame components of
vectors; on one-forms it acts on the component vector through the metric
identification, which in an orthonormal frame is the same matrix.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .charts import AdjointChart, EuclideanChart, HeisenbergChart, QuaternionChart


class ModelValidationError(ValueError):
    """Raised when structure constants violate a named invariant."""

    def __init__(self, invariant, detail):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}")


@dataclass(frozen=True)
class GroupModel:
    name: str
    n: int
    m: int
    structure_constants: np.ndarray
    chart: object = field(repr=False, compare=False)

    @property
    def d(self):
        return self.n + self.m

    @property
    def label(self):
        """Filesystem-friendly tag, e.g. ``heisenberg1``."""
        return (
            self.name.replace("(", "").replace(")", "").replace(",", "_").replace(" ", "")
        )

    @property
    def horizontal(self):
        return np.arange(self.d) < self.n


@dataclass(frozen=True)
class ConnectionData:
    """Frame-constant tensors of one connection.

    ``ric_h`` is the horizontal Ricci of *this* connection.  ``delta_h_t``
    and ``j_squared`` are foliation tensors derived from the Bott connection
    and are carried along unchanged by the epsilon and adjoint connections.
    """

    kind: str
    epsilon: float
    gamma: np.ndarray
    torsion: np.ndarray
    curvature: np.ndarray
    ric_h: np.ndarray
    delta_h_t: np.ndarray
    j_squared: np.ndarray
    j: np.ndarray

    @property
    def delta_h_t_adjoint(self):
        return self.delta_h_t.T


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


# ----------------------------------------------------------------------------
# models


def heisenberg_constants(n):
    d = 2 * n + 1
    c = np.zeros((d, d, d))
    for i in range(n):
        c[i, n + i, 2 * n] = 2.0
        c[n + i, i, 2 * n] = -2.0
    return c


def su2_constants():
    c = np.zeros((3, 3, 3))
    for i, j, k in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
        c[i, j, k] = 2.0
        c[j, i, k] = -2.0
    return c


def check_invariants(c, n, m, tol=1e-10, bracket_generating=True):
    """Validate structure constants; raise ModelValidationError on failure."""
    c = np.asarray(c, dtype=float)
    d = n + m
    if c.shape != (d, d, d):
        raise ModelValidationError("shape", f"expected {(d, d, d)}, got {c.shape}")
    err = np.abs(c + c.transpose(1, 0, 2)).max()
    if err > tol:
        raise ModelValidationError("antisymmetry", f"max |c_ij^k + c_ji^k| = {err:.3g}")
    # sum over cyclic (i,j,k) of [[e_i,e_j],e_k]
    jac = (
        np.einsum("ijp,pkl->ijkl", c, c)
        + np.einsum("jkp,pil->ijkl", c, c)
        + np.einsum("kip,pjl->ijkl", c, c)
    )
    err = np.abs(jac).max()
    if err > tol:
        raise ModelValidationError("jacobi", f"max cyclic bracket sum = {err:.3g}")
    err = np.abs(c[n:, n:, :n]).max() if m and n else 0.0
    if err > tol:
        raise ModelValidationError(
            "foliation_compatibility", f"[V, V] has horizontal part {err:.3g}"
        )
    # bundle-like: ad_V restricted to H is skew; totally geodesic: pi_V [H, V] skew on V
    adv = c[n:, :n, :n]
    err = np.abs(adv + adv.transpose(0, 2, 1)).max() if m else 0.0
    if err > tol:
        raise ModelValidationError("bundle_like", f"ad_V on H not skew, {err:.3g}")
    adh = c[:n, n:, n:]
    err = np.abs(adh + adh.transpose(0, 2, 1)).max() if m else 0.0
    if err > tol:
        raise ModelValidationError("totally_geodesic", f"pi_V ad_H on V not skew, {err:.3g}")
    if bracket_generating and bracket_rank(c, n) < d:
        raise ModelValidationError(
            "bracket_generation",
            f"iterated horizontal brackets span rank {bracket_rank(c, n)} < {d}",
        )


def bracket_rank(c, n):
    d = c.shape[0]
    span = np.eye(d)[:n]
    rank = np.linalg.matrix_rank(span) if n else 0
    while True:
        new = np.einsum("uj,jik->uik", span, c[:, :n, :]).reshape(-1, d)
        stacked = np.vstack([span, new])
        r = np.linalg.matrix_rank(stacked, tol=1e-9)
        if r == rank:
            return r
        # orthonormal basis of the enlarged span keeps the matrices small
        u, s, _ = np.linalg.svd(stacked.T, full_matrices=False)
        span = u[:, : r].T
        rank = r


def build_model(name, params=None):
    """Construct a model by tag.

    Tags: ``heisenberg`` (params n), ``su2_hopf``, ``flat_product`` (n, m),
    ``custom`` (params n, m, c as an array or a list of [i, j, k, value]).
    """
    params = dict(params or {})
    tag = name.lower()
    if tag in ("heisenberg", "heisenberg(n)"):
        n = int(params.get("n", 1))
        if n < 1:
            raise ValueError("heisenberg needs n >= 1")
        c = heisenberg_constants(n)
        model = GroupModel(f"heisenberg({n})", 2 * n, 1, c, HeisenbergChart(n))
    elif tag in ("su2_hopf", "su2"):
        model = GroupModel("su2_hopf", 2, 1, su2_constants(), QuaternionChart())
    elif tag in ("flat_product", "flat"):
        n = int(params.get("n", 2))
        m = int(params.get("m", 1))
        if n < 1 or m < 1:
            raise ValueError("flat_product needs n >= 1 and m >= 1")
        c = np.zeros((n + m,) * 3)
        model = GroupModel(f"flat_product({n},{m})", n, m, c, EuclideanChart(n + m))
        # abelian, so the leaves are never reached: bracket generation is waived
        check_invariants(c, n, m, bracket_generating=False)
        c.setflags(write=False)
        return model
    elif tag == "custom":
        n, m = int(params["n"]), int(params["m"])
        c = _dense_constants(params["c"], n + m)
        model = GroupModel(params.get("label", "custom"), n, m, c, AdjointChart(c))
    else:
        raise ValueError(f"unknown model tag {name!r}")
    check_invariants(model.structure_constants, model.n, model.m)
    model.structure_constants.setflags(write=False)
    return model


def _dense_constants(spec, d):
    arr = np.asarray(spec, dtype=float)
    if arr.shape == (d, d, d):
        return arr.copy()
    c = np.zeros((d, d, d))
    for entry in spec:
        if len(entry) != 4:
            raise ModelValidationError("shape", f"entry {entry!r} is not [i, j, k, value]")
        i, j, k, val = entry
        i, j, k = int(i), int(j), int(k)
        if not all(0 <= t < d for t in (i, j, k)):
            raise ModelValidationError("shape", f"index out of range in {entry!r}")
        c[i, j, k] = float(val)
    return c


def load_custom_model(path_or_doc):
    """Load {"n", "m", "c": [[i, j, k, value], ...]} from a path or dict."""
    if isinstance(path_or_doc, dict):
        doc = path_or_doc
    else:
        with open(path_or_doc) as fh:
            doc = json.load(fh)
    for key in ("n", "m", "c"):
        if key not in doc:
            raise ModelValidationError("shape", f"missing field {key!r}")
    return build_model("custom", doc)


# ----------------------------------------------------------------------------
# tensors


def levi_civita(c):
    """Koszul formula for a left-invariant orthonormal frame."""
    return 0.5 * (c - np.einsum("jki->ijk", c) + np.einsum("kij->ijk", c))


def torsion_of(gamma, c):
    return gamma - gamma.transpose(1, 0, 2) - c


def curvature_of(gamma, c):
    return (
        np.einsum("jkl,ilp->ijkp", gamma, gamma)
        - np.einsum("ikl,jlp->ijkp", gamma, gamma)
        - np.einsum("ijq,qkp->ijkp", c, gamma)
    )


def covariant_derivative_12(gamma, A):
    """(nabla_{e_a} A)(e_b, e_c) for a frame-constant (1,2) tensor A[b, c, l]."""
    return (
        np.einsum("bcl,alp->abcp", A, gamma)
        - np.einsum("abl,lcp->abcp", gamma, A)
        - np.einsum("acl,blp->abcp", gamma, A)
    )


def horizontal_ricci(curv, n):
    """Ric(X, Y) = sum_i g(R(X_i, X) Y, X_i) over the horizontal frame."""
    return np.einsum("iabi->ab", curv[:n, :n, :n, :n])


def _bott_gamma(c, n):
    d = c.shape[0]
    H = np.arange(d) < n
    V = ~H
    lc = levi_civita(c)
    g = np.zeros_like(c)
    hh = np.ix_(H, H, H)
    g[hh] = lc[hh]
    vh = np.ix_(V, H, H)
    g[vh] = c[vh]
    hv = np.ix_(H, V, V)
    g[hv] = c[hv]
    vv = np.ix_(V, V, V)
    g[vv] = lc[vv]
    return g


def _j_from_torsion(T, n):
    J = np.zeros_like(T)
    # g(J_z x, y) = g(z, T(x, y)) for vertical z, horizontal x, y
    J[n:, :n, :n] = np.transpose(T[:n, :n, n:], (2, 0, 1))
    return J


def j_matrix(J, w):
    """Matrix of J_w acting on frame components: (J_w)[y, x]."""
    return np.einsum("...z,zxy->...yx", w, J)


def _j_squared(J, n):
    mats = np.transpose(J[n:], (0, 2, 1))
    if len(mats) == 0:
        return np.zeros(J.shape[:2])
    return np.einsum("zab,zbc->ac", mats, mats)


def _delta_h_t(gamma, T, n):
    nT = covariant_derivative_12(gamma, T)
    # delta_H T(X) = -sum_j (nabla_{X_j} T)(X_j, X); column a is its image of e_a
    return -np.einsum("jjap->pa", nT[:n, :n])


def bott_connection(model):
    c = model.structure_constants
    n = model.n
    gamma = _bott_gamma(c, n)
    T = torsion_of(gamma, c)
    R = curvature_of(gamma, c)
    J = _j_from_torsion(T, n)
    data = ConnectionData(
        kind="bott",
        epsilon=np.inf,
        gamma=gamma,
        torsion=T,
        curvature=R,
        ric_h=horizontal_ricci(R, n),
        delta_h_t=_delta_h_t(gamma, T, n),
        j_squared=_j_squared(J, n),
        j=J,
    )
    _freeze(data.gamma, data.torsion, data.curvature, data.ric_h, data.delta_h_t,
            data.j_squared, data.j)
    return data


def j_map(model, bott=None):
    bott = bott or bott_connection(model)
    return bott.j


def _check_eps(eps):
    if not eps > 0:
        raise ValueError(f"epsilon must be positive, got {eps}")


def _derived(model, bott, kind, eps, gamma):
    c = model.structure_constants
    T = torsion_of(gamma, c)
    R = curvature_of(gamma, c)
    data = ConnectionData(
        kind=kind,
        epsilon=float(eps),
        gamma=gamma,
        torsion=T,
        curvature=R,
        ric_h=horizontal_ricci(R, model.n),
        delta_h_t=bott.delta_h_t,
        j_squared=bott.j_squared,
        j=bott.j,
    )
    _freeze(data.gamma, data.torsion, data.curvature, data.ric_h)
    return data


def epsilon_connection(model, eps, bott=None):
    """nabla^eps_X Y = nabla_X Y - T(X, Y) + (1/eps) J_Y X."""
    _check_eps(eps)
    bott = bott or bott_connection(model)
    gamma = bott.gamma - bott.torsion + np.einsum("jik->ijk", bott.j) / eps
    return _derived(model, bott, "epsilon", eps, gamma)


def adjoint_connection(model, eps, bott=None):
    """hat nabla^eps_X Y = nabla_X Y + (1/eps) J_X Y."""
    _check_eps(eps)
    bott = bott or bott_connection(model)
    return _derived(model, bott, "adjoint", eps, bott.gamma + bott.j / eps)


def g_eps(model, eps):
    """Diagonal of the metric g_H + (1/eps) g_V in the frame."""
    return np.where(model.horizontal, 1.0, 1.0 / eps)


def adjoint_curvature(model, eps, bott=None):
    """Adjoint curvature assembled from Bott pieces (not from hat gamma)."""
    _check_eps(eps)
    bott = bott or bott_connection(model)
    J, T = bott.j, bott.torsion
    nJ = covariant_derivative_12(bott.gamma, J)
    return (
        bott.curvature
        + np.einsum("ijp,pkl->ijkl", T, J) / eps
        + (np.einsum("jkp,ipl->ijkl", J, J) - np.einsum("ikp,jpl->ijkl", J, J)) / eps**2
        + (nJ - nJ.transpose(1, 0, 2, 3)) / eps
    )


def adjoint_ricci(model, eps, bott=None, check=True):
    """Horizontal Ricci of the adjoint connection, n x n."""
    _check_eps(eps)
    bott = bott or bott_connection(model)
    n = model.n
    ric = bott.ric_h - bott.delta_h_t_adjoint[:n, :n] / eps + bott.j_squared[:n, :n] / eps
    if check:
        traced = horizontal_ricci(adjoint_curvature(model, eps, bott), n)
        if np.abs(traced - ric).max() > 1e-9 * max(1.0, np.abs(ric).max()):
            raise RuntimeError("adjoint Ricci disagrees with the trace of its curvature")
    return ric


def weitzenbock_potential(model, eps, bott=None):
    """Zero-order term K of the one-form operator, d x d.

    K = Ric_H + (1/eps) J^2 + (1/eps) delta_H T, acting on form components.
    The sign of the divergence term was fixed by the identity dLf = box df
    on a model where delta_H T does not vanish.
    """
    _check_eps(eps)
    bott = bott or bott_connection(model)
    d, n = model.d, model.n
    ric = np.zeros((d, d))
    ric[:n, :n] = bott.ric_h
    return ric + bott.j_squared / eps + bott.delta_h_t / eps


def horizontal_drift(model, bott=None):
    """Frame components of X_0 = -sum_i nabla_{X_i} X_i."""
    bott = bott or bott_connection(model)
    n = model.n
    return -np.einsum("iik->k", bott.gamma[:n, :n])


def weitzenbock_residual(model, eps, f, x, fd_step=1e-4, bott=None, mode="auto"):
    """max_a |d(Lf)(x) - (box_eps df)(x)|_a.

    ``f`` is a :class:`PointFunction` (analytic jets, unless mode="fd") or a
    plain callable on chart coordinates (finite differences).
    """
    from .functions import PointFunction, fd_frame_jets

    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    _check_eps(eps)
    bott = bott or bott_connection(model)
    x = np.asarray(x, dtype=float)
    if isinstance(f, PointFunction) and mode != "fd":
        D1, D2, D3 = f.frame_jets(model.chart, x)
    else:
        fn = f.value if isinstance(f, PointFunction) else f
        D1, D2, D3 = fd_frame_jets(model.chart, fn, x, fd_step)
    return _weitzenbock_from_jets(model, eps, bott, D1, D2, D3)


def _weitzenbock_from_jets(model, eps, bott, D1, D2, D3):
    n, d = model.n, model.d
    x0 = horizontal_drift(model, bott)
    # D2[b, a] = e_b e_a f, D3[c, b, a] = e_c e_b e_a f
    lhs = np.einsum("aii->a", D3[:, :n, :n]) + D2 @ x0
    ge = epsilon_connection(model, eps, bott).gamma
    eta = D1
    rhs = np.zeros(d)
    for i in range(n):
        rhs += D3[i, i] - 2 * ge[i] @ D2[i] + ge[i] @ (ge[i] @ eta)
    y = -x0
    rhs -= y @ D2 - np.einsum("a,ajk,k->j", y, ge, eta)
    rhs -= weitzenbock_potential(model, eps, bott) @ eta
    return float(np.abs(lhs - rhs).max())
