"""Smooth test functions on the chart coordinates and their frame derivatives.

Functions are sympy expressions in the chart coordinates.  Because frame
fields are affine in the ambient coordinates, iterated frame derivatives
follow from ordinary partials by the product rule; see ``frame_jets``.
"""

import numpy as np
import sympy as sp


def _lambdify_array(symbols, exprs):
    """Vectorized evaluator for a list of expressions with broadcasting."""
    fn = sp.lambdify(symbols, exprs, modules="numpy")

    def evaluate(*args):
        vals = fn(*args)
        shape = np.broadcast(*args).shape if args else ()
        return np.stack([np.broadcast_to(v, shape) for v in vals], axis=-1)

    return evaluate


class PointFunction:
    """f(x) for a single group point, given as a sympy expression.

    ``expr`` may be a sympy expression or a string using the chart's
    coordinate names.
    """

    def __init__(self, chart, expr, name=None):
        self.chart = chart
        self.symbols = sp.symbols(list(chart.coord_names))
        if isinstance(expr, str):
            expr = sp.sympify(expr, locals=dict(zip(chart.coord_names, self.symbols)))
        self.expr = expr
        self.name = name or str(expr)
        syms = self.symbols
        self._f = sp.lambdify(syms, expr, modules="numpy")
        grad = [sp.diff(expr, s) for s in syms]
        self._grad = _lambdify_array(syms, grad)
        self._grad_exprs = grad
        self._higher = None

    def value(self, x):
        x = np.asarray(x)
        out = self._f(*np.moveaxis(x, -1, 0))
        return np.broadcast_to(out, x.shape[:-1]).astype(x.dtype if np.iscomplexobj(x) else float)

    def gradient(self, x):
        """Ordinary partial derivatives, shape (..., dim)."""
        return self._grad(*np.moveaxis(np.asarray(x, dtype=float), -1, 0))

    def frame_differential(self, x):
        """e_a f at x, shape (..., d)."""
        x = np.asarray(x, dtype=float)
        return np.einsum("...am,...m->...a", self.chart.frame_at(x), self.gradient(x))

    def _ordinary_jets(self, x):
        if self._higher is None:
            syms = self.symbols
            hess = [[sp.diff(g, t) for t in syms] for g in self._grad_exprs]
            third = [[[sp.diff(h, u) for u in syms] for h in row] for row in hess]
            self._higher = (
                sp.lambdify(syms, hess, modules="numpy"),
                sp.lambdify(syms, third, modules="numpy"),
            )
        h_fn, t_fn = self._higher
        args = list(np.asarray(x, dtype=float))
        return (
            self.gradient(x),
            np.array(h_fn(*args), dtype=float),
            np.array(t_fn(*args), dtype=float),
        )

    def frame_jets(self, chart, x):
        """(D1, D2, D3) with D1[a] = e_a f, D2[b, a] = e_b e_a f, D3[c, b, a] = e_c e_b e_a f."""
        A, b = chart.frame_affine()
        g, H, T3 = self._ordinary_jets(x)
        V = np.einsum("amn,n->am", A, x) + b
        AV = np.einsum("amn,bn->bam", A, V)  # A_a V_b
        AAV = np.einsum("amn,bnl,cl->cbam", A, A, V)  # A_a A_b V_c
        D1 = V @ g
        D2 = np.einsum("mn,bn,am->ba", H, V, V) + np.einsum("m,bam->ba", g, AV)
        D3 = (
            np.einsum("mnl,cl,bn,am->cba", T3, V, V, V)
            + np.einsum("mn,cbn,am->cba", H, AV, V)
            + np.einsum("mn,bn,cam->cba", H, V, AV)
            + np.einsum("ml,cl,bam->cba", H, V, AV)
            + np.einsum("m,cbam->cba", g, AAV)
        )
        return D1, D2, D3

    def __repr__(self):
        return f"PointFunction({self.name})"


def fd_frame_jets(chart, fn, x, step=1e-4):
    """Frame jets by differentiating t -> f(x exp(t1 e_c) exp(t2 e_b) exp(t3 e_a)).

    The innermost derivative uses a complex step when ``fn`` accepts complex
    input, which removes the h^-3 roundoff blow-up of nested central
    differences; the outer two are central.
    """
    d = chart.d
    x = np.asarray(x, dtype=float)
    E = np.eye(d)

    def move(p, a, t):
        return chart.product(p, chart.exp(t * E[a]))

    complex_ok = True
    try:
        probe = fn(move(x.astype(complex), 0, 1j * step))
        complex_ok = np.iscomplexobj(probe) and np.all(np.isfinite(probe))
    except (TypeError, ValueError):
        complex_ok = False

    def inner(p, a):
        if complex_ok:
            return np.imag(fn(move(p.astype(complex), a, 1j * step))) / step
        return (fn(move(p, a, step)) - fn(move(p, a, -step))) / (2 * step)

    D1 = np.array([inner(x, a) for a in range(d)], dtype=float)
    D2 = np.zeros((d, d))
    D3 = np.zeros((d, d, d))
    for bb in range(d):
        xp, xm = move(x, bb, step), move(x, bb, -step)
        for a in range(d):
            D2[bb, a] = (inner(xp, a) - inner(xm, a)) / (2 * step)
    for c in range(d):
        for bb in range(d):
            pts = {
                (s1, s2): move(move(x, c, s1 * step), bb, s2 * step)
                for s1 in (1, -1)
                for s2 in (1, -1)
            }
            for a in range(d):
                vals = {k: inner(p, a) for k, p in pts.items()}
                D3[c, bb, a] = (
                    vals[1, 1] - vals[1, -1] - vals[-1, 1] + vals[-1, -1]
                ) / (4 * step * step)
    return D1, D2, D3


def builtin_point_functions(chart):
    """Five analytic test functions per chart, keyed by name."""
    names = chart.coord_names
    if len(names) == 3 and names[0] == "x":
        exprs = [
            "x**2 + y*z",
            "x*y*z",
            "sin(x)*cos(y) + z**2",
            "exp(x/2)*y + z**3/3",
            "(x**2 + y**2)**2 - x*z",
        ]
    elif names[:1] == ("q0",):
        exprs = [
            "q1**2 + q2*q3",
            "q0*q1*q3",
            "sin(q1)*cos(q2) + q3**2",
            "exp(q0/2)*q2 + q3**3/3",
            "(q1**2 + q2**2)**2 - q0*q3",
        ]
    else:
        s = names
        exprs = [
            f"{s[0]}**2 + {s[1]}*{s[-1]}",
            f"{s[0]}*{s[1]}*{s[-1]}",
            f"sin({s[0]})*cos({s[1]}) + {s[-1]}**2",
            f"exp({s[0]}/2)*{s[1]} + {s[-1]}**3/3",
            f"({s[0]}**2 + {s[1]}**2)**2 - {s[0]}*{s[-1]}",
        ]
    return {e: PointFunction(chart, e) for e in exprs}


# ----------------------------------------------------------------------------
# cylinder functions


class CylinderFunction:
    """F(w) = f(w_{s_1}, ..., w_{s_k}) with analytic differentials.

    Path points enter the expression as ``<coord>_<i>``, the coordinate of
    the point at the i-th partition time, e.g. ``x_0 * y_1``.
    """

    def __init__(self, chart, times, expr, name=None):
        times = [float(t) for t in times]
        if not times:
            raise ValueError("cylinder function needs at least one time")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("partition times must be strictly increasing")
        if times[0] <= 0 or times[-1] > 1:
            raise ValueError("partition times must lie in (0, 1]")
        self.chart = chart
        self.times = tuple(times)
        k = len(times)
        self.symbols = [
            [sp.Symbol(f"{c}_{i}") for c in chart.coord_names] for i in range(k)
        ]
        flat = [s for row in self.symbols for s in row]
        if isinstance(expr, str):
            expr = sp.sympify(expr, locals={str(s): s for s in flat})
        unknown = {str(s) for s in expr.free_symbols} - {str(s) for s in flat}
        if unknown:
            raise ValueError(f"unknown symbols in cylinder expression: {sorted(unknown)}")
        self.expr = expr
        self.name = name or str(expr)
        self._f = sp.lambdify(flat, expr, modules="numpy")
        self._grads = [
            _lambdify_array(flat, [sp.diff(expr, s) for s in row]) for row in self.symbols
        ]

    @property
    def k(self):
        return len(self.times)

    def grid_indices(self, N, dt):
        idx = []
        for s in self.times:
            j = int(round(s / dt))
            if abs(j * dt - s) > dt / 2 + 1e-12 or j > N:
                raise ValueError(f"partition time {s} is off the grid of step {dt}")
            idx.append(j)
        return idx

    def _args(self, pts):
        # pts: (..., k, dim)
        return [pts[..., i, j] for i in range(self.k) for j in range(self.chart.dim)]

    def value_at(self, pts):
        pts = np.asarray(pts, dtype=float)
        out = self._f(*self._args(pts))
        return np.broadcast_to(out, pts.shape[:-2]).astype(float)

    def differentials_at(self, pts):
        """Frame covectors d_i f at each partition point, shape (..., k, d)."""
        pts = np.asarray(pts, dtype=float)
        args = self._args(pts)
        frames = self.chart.frame_at(pts)  # (..., k, d, dim)
        grads = np.stack([g(*args) for g in self._grads], axis=-2)  # (..., k, dim)
        return np.einsum("...kam,...km->...ka", frames, grads)


def _coord_index(chart, name):
    if name not in chart.coord_names:
        raise ValueError(f"unknown coordinate {name!r}; chart has {chart.coord_names}")
    return name


def cylinder_from_spec(chart, spec):
    """Build a CylinderFunction from a config dict.

    kinds:
      coordinate   params [coord]                      f = coord(s_1)
      monomial     params [[coord, time_index, power], ...]
      product      params [coord_1, ..., coord_k]      f = prod coord_i(s_i)
      bump         params {"coords": [...], "center": [...], "radius": r}
                   compactly supported exp(1 - 1/(1 - r^2)) of the last point
      expression   params [string]
      constant     params [value]
    """
    kind = spec.get("kind")
    times = spec.get("times", [1.0])
    params = spec.get("params", [])
    if kind == "coordinate":
        c = _coord_index(chart, params[0])
        expr = f"{c}_0"
    elif kind == "monomial":
        terms = []
        for coord, ti, power in params:
            _coord_index(chart, coord)
            terms.append(f"{coord}_{int(ti)}**{int(power)}")
        expr = "*".join(terms) if terms else "1"
    elif kind == "product":
        if len(params) != len(times):
            raise ValueError("product needs one coordinate per time")
        expr = "*".join(f"{_coord_index(chart, c)}_{i}" for i, c in enumerate(params))
    elif kind == "bump":
        coords = params["coords"]
        center = params.get("center", [0.0] * len(coords))
        radius = float(params.get("radius", 1.0))
        last = len(times) - 1
        r2 = sp.Add(
            *[
                (sp.Symbol(f"{_coord_index(chart, c)}_{last}") - float(x0)) ** 2
                for c, x0 in zip(coords, center)
            ]
        ) / radius**2
        expr = sp.Piecewise((sp.exp(1 - 1 / (1 - r2)), r2 < 1), (0, True))
    elif kind == "expression":
        expr = params[0] if isinstance(params, list) else params
    elif kind == "constant":
        expr = sp.Float(params[0] if params else 1.0)
    else:
        raise ValueError(f"unknown cylinder kind {kind!r}")
    return CylinderFunction(chart, times, expr, name=spec.get("name"))
