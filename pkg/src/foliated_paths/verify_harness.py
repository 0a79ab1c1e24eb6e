"""Paired Monte Carlo null tests of the path-space identities.

Every check computes, per path and from common random numbers, a
difference Delta = LHS - RHS whose expectation is zero when the identity
holds.  Reports carry the mean, its standard error and a bias budget for
the weak discretization error; the verdict is

    |estimate| <= 3 * stderr + bias_budget,
    bias_budget = min(C * dt, 0.05 * scale),

with ``scale`` the larger root-mean-square of the two sides.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functions as fns
from .model_geometry import (
    adjoint_connection,
    bott_connection,
    build_model,
    weitzenbock_residual,
)
from .path_calculus import (
    CameronMartinPath,
    directional_derivative,
    eval_cylinder,
    frames_apply,
    make_tangent_process,
    p_decomposition,
    skew_expm,
    smooth_tangent_path,
    tangency_check_smooth,
)
from .sde_engine import (
    SmoothPath,
    anti_develop_smooth,
    brownian_increments,
    damped_transport,
    develop_smooth,
    simulate_batch,
)
from .stats import RunningStats, map_chunks, reduce_chunks

DEFAULT_CHUNK = 512
SIGMA = 3.0
SCALE_FRACTION = 0.05


@dataclass
class MCParams:
    n_paths: int = 100_000
    dt: float = 2.0**-9
    seed: int = 0
    C: float = 1.0
    chunk: int = DEFAULT_CHUNK
    threads: int = None

    @property
    def N(self):
        return steps_for(1.0, self.dt)


def steps_for(horizon, dt):
    N = int(round(horizon / dt))
    if N < 1 or abs(N * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"horizon {horizon} is not a multiple of dt={dt}")
    return N


@dataclass
class Check:
    """One pass/fail decision.

    rule "null": |estimate| <= 3 stderr + bias_budget; "at_least":
    estimate >= target; "near": |estimate - target| <= bias_budget;
    "waived": not applicable on this input, always passes.
    """

    estimate: float
    stderr: float
    bias_budget: float
    verdict: bool
    note: str = ""
    rule: str = "null"
    target: float = None


def passes(check):
    """Re-derive a verdict from the stored fields of a Check (or its dict)."""
    c = check if isinstance(check, dict) else asdict(check)
    rule = c.get("rule", "null")
    if rule == "waived":
        return True
    est = float(c["estimate"])
    if not math.isfinite(est):
        return False
    if rule == "null":
        return abs(est) <= SIGMA * c["stderr"] + c["bias_budget"]
    if rule == "at_least":
        return est >= c["target"]
    if rule == "near":
        return abs(est - c["target"]) <= c["bias_budget"]
    raise ValueError(f"unknown rule {rule!r}")


@dataclass
class VerificationReport:
    identity_name: str
    model: str
    estimate: float
    stderr: float
    n_paths: int
    dt: float
    epsilon: float
    bias_constant: float
    bias_budget: float
    verdict: bool
    runtime_seconds: float
    seed: int
    rule: str = "null"
    target: float = None
    lhs_mean: float = None
    rhs_mean: float = None
    scale: float = None
    components: list = None
    subchecks: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def recompute_verdict(self):
        main = {"estimate": self.estimate, "stderr": self.stderr,
                "bias_budget": self.bias_budget, "rule": self.rule, "target": self.target}
        subs = list(self.subchecks.values()) + list(self.components or [])
        return bool(passes(main) and all(passes(c) for c in subs))

    def to_dict(self):
        return _jsonable(asdict(self))

    def to_json(self, drop_runtime=False):
        doc = self.to_dict()
        if drop_runtime:
            doc.pop("runtime_seconds", None)
        return json.dumps(doc, sort_keys=True, indent=2)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def budget(C, dt, scale):
    return float(min(C * dt, SCALE_FRACTION * scale))


def null_check(delta, C, dt, scale, note=""):
    """Check from RunningStats of a scalar Delta."""
    est = float(delta.mean)
    se = float(delta.stderr)
    b = budget(C, dt, scale)
    return Check(est, se, b, bool(abs(est) <= SIGMA * se + b), note)


def exact_check(value, tol, note=""):
    value = float(value)
    return Check(value, 0.0, float(tol), bool(abs(value) <= tol), note)


def _report(name, model_name, check, mc, eps, t0, lhs=None, rhs=None, scale=None,
            components=None, subchecks=None, metadata=None, n_paths=None, dt=None):
    subs = {k: asdict(v) for k, v in (subchecks or {}).items()}
    verdict = check.verdict and all(v["verdict"] for v in subs.values())
    if components:
        verdict = verdict and all(c["verdict"] for c in components)
    return VerificationReport(
        identity_name=name,
        model=model_name,
        estimate=check.estimate,
        stderr=check.stderr,
        n_paths=int(mc.n_paths if n_paths is None else n_paths),
        dt=float(mc.dt if dt is None else dt),
        epsilon=None if eps is None else float(eps),
        bias_constant=float(mc.C),
        bias_budget=check.bias_budget,
        verdict=bool(verdict),
        runtime_seconds=round(time.perf_counter() - t0, 3),
        seed=int(mc.seed),
        rule=check.rule,
        target=check.target,
        lhs_mean=None if lhs is None else float(lhs),
        rhs_mean=None if rhs is None else float(rhs),
        scale=None if scale is None else float(scale),
        components=components,
        subchecks=subs,
        metadata=metadata or {},
    )


def _simulate_chunk(model, bott, x0, mc, start, count, N=None, dt=None):
    N = mc.N if N is None else N
    dt = mc.dt if dt is None else dt
    noise = brownian_increments(mc.seed, start, count, N, dt, model.n)
    return simulate_batch(model, bott, x0, noise, dt, seed=mc.seed, first_index=start)


def _start(model, x0):
    return model.chart.identity() if x0 is None else np.asarray(x0, dtype=float)


# ----------------------------------------------------------------------------
# integration by parts: shared kernel


def directional_divergence(path, h, bott):
    """int <h' + 1/2 U^T Ric_H U h, dB> (Ito, left points), one value per path."""
    n = path.model.n
    hd = h.cell_derivative(path.N, path.dt)
    hv = h.grid_values(path.N, path.dt)[:-1]
    if path.trivial_frames:
        drift = (hd + 0.5 * hv @ bott.ric_h.T)[None]
    else:
        U = path.frames[:, :-1, :n, :n]
        ric = np.swapaxes(U, -1, -2) @ bott.ric_h @ U
        drift = hd[None] + 0.5 * (ric @ hv[None, :, :, None])[..., 0]
    return np.einsum("pka,pka->p", np.broadcast_to(drift, path.noise.shape), path.noise)


def _inverse_transpose(T):
    from ._kernels import kernels

    flat = np.ascontiguousarray(T).reshape(-1, T.shape[-2], T.shape[-1])
    out = np.empty_like(flat)
    kernels(T.shape[-1]).inverse_transpose(flat, out)
    return out.reshape(T.shape)


def damped_weights(path, h):
    """A(s_j) = int_0^{s_j} tau_s^{-T} U_s h'(s) ds (trapezoid), (P, N+1, d).

    Pairing A(s_i) with tau_{s_i} d_i f gives sum_i int_0^{s_i}
    <tau_s^{-1} tau_{s_i} d_i f, U_s h'> ds without forming the damped
    derivative at every step.
    """
    n = path.model.n
    N, dt = path.N, path.dt
    hd = h.cell_derivative(N, dt)
    d = path.model.d
    tinv_t = _inverse_transpose(path.tau_eps)
    hdf = np.zeros((N, d))
    hdf[:, :n] = hd
    U = path.frames
    hl = frames_apply(U[:, :-1], hdf[None], path.trivial_frames)
    hr = frames_apply(U[:, 1:], hdf[None], path.trivial_frames)
    left = (tinv_t[:, :-1] @ np.broadcast_to(hl, (path.P, N, d))[..., None])[..., 0]
    right = (tinv_t[:, 1:] @ np.broadcast_to(hr, (path.P, N, d))[..., None])[..., 0]
    A = np.zeros((path.P, N + 1, d))
    np.cumsum(0.5 * (left + right) * dt, axis=1, out=A[:, 1:])
    return A


def damped_lhs(F, path, weights):
    idx = F.grid_indices(path.N, path.dt)
    df = F.differentials_at(path.points[:, idx])
    pulled = np.einsum("pkab,pkb->pka", path.tau_eps[:, idx], df)
    return np.einsum("pka,pka->p", pulled, weights[:, idx])


def _cm_pairing(path, h):
    return np.einsum("ka,pka->p", h.cell_derivative(path.N, path.dt), path.noise)


def ibp_suite(model, Fs, hs, eps_list=(), mc=None, which=("damped", "directional", "adjoint"),
              pairs=None, x0=None, bott=None):
    """Run the damped, directional and adjoint-operator null tests together.

    All cases share one simulation per chunk.  ``Fs`` and ``hs`` are dicts
    name -> object; ``pairs`` lists (F_name, G_name) for the adjoint test
    (default: each F with itself and with the next one).
    Returns a dict of reports keyed by identity name.
    """
    mc = mc or MCParams()
    bott = bott or bott_connection(model)
    x0 = _start(model, x0)
    t0 = time.perf_counter()
    fnames = list(Fs)
    if pairs is None:
        pairs = [(a, a) for a in fnames] + [
            (fnames[i], fnames[(i + 1) % len(fnames)]) for i in range(len(fnames))
            if len(fnames) > 1
        ]

    def kernel(start, count):
        path = _simulate_chunk(model, bott, x0, mc, start, count)
        out = {}

        def put(key, lhs, rhs):
            out[key + ("lhs",)] = RunningStats.of(lhs)
            out[key + ("rhs",)] = RunningStats.of(rhs)
            out[key + ("delta",)] = RunningStats.of(lhs - rhs)

        vals = {f: eval_cylinder(F, path) for f, F in Fs.items()}
        pair_cm = {hn: _cm_pairing(path, h) for hn, h in hs.items()}
        if "directional" in which or "adjoint" in which:
            for hn, h in hs.items():
                v = make_tangent_process(path, h, bott)
                div = directional_divergence(path, h, bott)
                dv = {f: directional_derivative(F, path, v) for f, F in Fs.items()}
                if "directional" in which:
                    for f in fnames:
                        put(("directional", f, hn), dv[f], vals[f] * div)
                if "adjoint" in which:
                    for fa, gb in pairs:
                        lhs = vals[fa] * dv[gb]
                        rhs = vals[gb] * (-dv[fa] + vals[fa] * div)
                        put(("adjoint", fa, gb, hn), lhs, rhs)
        if "damped" in which:
            for eps in eps_list:
                damped_transport(path, model, eps, bott)
                for hn, h in hs.items():
                    w = damped_weights(path, h)
                    for f, F in Fs.items():
                        put(("damped", f, hn, eps), damped_lhs(F, path, w), vals[f] * pair_cm[hn])
        return out

    stats = reduce_chunks(map_chunks(kernel, mc.n_paths, mc.chunk, mc.threads))
    reports = {}
    keys = sorted({k[:-1] for k in stats}, key=str)
    for key in keys:
        lhs, rhs, delta = (stats[key + (s,)] for s in ("lhs", "rhs", "delta"))
        scale = max(float(lhs.rms), float(rhs.rms))
        chk = null_check(delta, mc.C, mc.dt, scale)
        kind = key[0]
        if kind == "damped":
            name = f"ibp_damped[F={key[1]},h={key[2]},eps={key[3]:g}]"
            eps = key[3]
        elif kind == "directional":
            name = f"ibp_directional[F={key[1]},h={key[2]}]"
            eps = None
        else:
            name = f"adjoint_operator[F={key[1]},G={key[2]},h={key[3]}]"
            eps = None
        reports[name] = _report(name, model.name, chk, mc, eps, t0, lhs.mean, rhs.mean, scale)
    return reports


def verify_ibp_damped(model, F, gamma, eps, mc, x0=None):
    reps = ibp_suite(model, {_fname(F): F}, {"h": gamma}, [eps], mc, which=("damped",), x0=x0)
    return next(iter(reps.values()))


def verify_ibp_directional(model, F, h, eps=None, mc=None, x0=None):
    """The directional identity contains no epsilon; ``eps`` is accepted and ignored."""
    reps = ibp_suite(model, {_fname(F): F}, {"h": h}, (), mc, which=("directional",), x0=x0)
    return next(iter(reps.values()))


def verify_adjoint_operator(model, F, G, h, mc, x0=None):
    Fs = {"F": F, "G": G}
    reps = ibp_suite(model, Fs, {"h": h}, (), mc, which=("adjoint",), pairs=[("F", "G")], x0=x0)
    return next(iter(reps.values()))


def _fname(F):
    return getattr(F, "name", "F")


def directional_deltas(model, F, h, mc, eps=None, x0=None, bott=None):
    """Per-path directional Delta for the first chunk (bitwise comparisons).

    When ``eps`` is given the damped transport is also computed on the path,
    which must leave Delta unchanged.
    """
    bott = bott or bott_connection(model)
    path = _simulate_chunk(model, bott, _start(model, x0), mc, 0, min(mc.chunk, mc.n_paths))
    if eps is not None:
        damped_transport(path, model, eps, bott)
    v = make_tangent_process(path, h, bott)
    return directional_derivative(F, path, v) - eval_cylinder(F, path) * directional_divergence(
        path, h, bott
    )


def verify_epsilon_independence(model, F, h, mc, eps_list=(0.5, 2.0), x0=None):
    """Directional Delta per path, with and without damped transports computed first.

    The directional identity involves no epsilon, so every run must agree bitwise.
    Compares the first chunk of paths.
    """
    t0 = time.perf_counter()
    bott = bott_connection(model)
    ref = directional_deltas(model, F, h, mc, None, x0, bott)
    worst = 0.0
    identical = True
    for eps in eps_list:
        other = directional_deltas(model, F, h, mc, eps, x0, bott)
        identical &= bool(np.array_equal(ref.view(np.uint64), other.view(np.uint64)))
        worst = max(worst, float(np.max(np.abs(ref - other))))
    chk = exact_check(0.0 if identical else max(worst, np.finfo(float).tiny), 0.0,
                      note="max |Delta(eps) - Delta| (bitwise)")
    return _report(
        f"epsilon_independence[F={_fname(F)},h={getattr(h, 'name', 'h')}]", model.name, chk, mc,
        None, t0, metadata={"epsilons": list(eps_list), "paths_compared": int(len(ref))},
    )


# ----------------------------------------------------------------------------
# gradient representation


def verify_gradient_representation(model, f, x, s, eps, mc, fd_step=1e-4, closed_form=None):
    """d P_s f(x) (finite differences over common noise) vs E[tau_s df(W_s)]."""
    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    t0 = time.perf_counter()
    bott = bott_connection(model)
    chart = model.chart
    x = np.asarray(x, dtype=float)
    N = steps_for(s, mc.dt)
    d = model.d
    E = np.eye(d)
    starts = [
        (chart.product(x, chart.exp(fd_step * E[a])), chart.product(x, chart.exp(-fd_step * E[a])))
        for a in range(d)
    ]
    xinv = chart.inverse(x)
    cf = None if closed_form is None else np.asarray(closed_form, dtype=float)

    def kernel(start, count):
        path = _simulate_chunk(model, bott, x, mc, start, count, N=N)
        damped_transport(path, model, eps, bott)
        W = path.points[:, -1]
        local = chart.product(np.broadcast_to(xinv, W.shape), W)
        lhs = np.stack(
            [
                (f.value(chart.normalize(chart.product(np.broadcast_to(p, W.shape), local)))
                 - f.value(chart.normalize(chart.product(np.broadcast_to(m, W.shape), local))))
                / (2 * fd_step)
                for p, m in starts
            ],
            axis=-1,
        )
        rhs = np.einsum("pab,pb->pa", path.tau_eps[:, -1], f.frame_differential(W))
        out = {"lhs": RunningStats.of(lhs), "rhs": RunningStats.of(rhs),
               "delta": RunningStats.of(lhs - rhs)}
        if cf is not None:
            out["rhs_cf"] = RunningStats.of(rhs - cf)
            out["lhs_cf"] = RunningStats.of(lhs - cf)
        return out

    st = reduce_chunks(map_chunks(kernel, mc.n_paths, mc.chunk, mc.threads))
    comps = []
    for a in range(d):
        scale = max(float(st["lhs"].rms[a]), float(st["rhs"].rms[a]))
        b = budget(mc.C, mc.dt, scale)
        est, se = float(st["delta"].mean[a]), float(st["delta"].stderr[a])
        comps.append(asdict(Check(est, se, b, bool(abs(est) <= SIGMA * se + b))))
    worst = max(range(d), key=lambda a: abs(comps[a]["estimate"]) - SIGMA * comps[a]["stderr"])
    main = Check(**comps[worst])
    main.verdict = all(c["verdict"] for c in comps)
    subs = {}
    cf_rows = {}
    if cf is not None:
        for side in ("rhs", "lhs"):
            rows = []
            for a in range(d):
                est = float(st[side + "_cf"].mean[a])
                se = float(st[side + "_cf"].stderr[a])
                b = budget(mc.C, mc.dt, max(abs(cf[a]), float(st[side].rms[a])))
                rows.append(Check(est, se, b, bool(abs(est) <= SIGMA * se + b)))
            cf_rows[side] = [asdict(r) for r in rows]
            w = max(rows, key=lambda c: abs(c.estimate) - SIGMA * c.stderr)
            subs[f"{side}_vs_closed_form"] = Check(
                w.estimate, w.stderr, w.bias_budget, all(r.verdict for r in rows),
                note="worst component",
            )
    return _report(
        f"gradient_representation[f={f.name},s={s:g}]", model.name, main, mc, eps, t0,
        components=comps, subchecks=subs,
        metadata={"lhs_mean": st["lhs"].mean.tolist(), "rhs_mean": st["rhs"].mean.tolist(),
                  "fd_step": fd_step, "x0": x.tolist(), "closed_form_components": cf_rows},
    )


# ----------------------------------------------------------------------------
# quasi-invariance


def girsanov_weights(path, dec, t):
    """(rho increments, G_t, reverse density) for a path and its decomposition."""
    R = skew_expm(t * dec.q) if t != 0 else None
    xi = path.noise if R is None else (R @ path.noise[..., None])[..., 0]
    rho = xi + t * dec.r * path.dt
    lin = np.einsum("pka,pka->p", dec.r, xi)
    quad = np.einsum("pka,pka->p", dec.r, dec.r) * path.dt
    G = np.exp(t * lin - 0.5 * t * t * quad)
    G_rev = np.exp(-t * lin - 0.5 * t * t * quad)
    return rho, G, G_rev


def verify_girsanov_density(model, h, t, F, D_choice, mc, x0=None):
    if abs(t) > 1:
        raise ValueError("|t| must be at most 1")
    t0 = time.perf_counter()
    bott = bott_connection(model)
    x0 = _start(model, x0)
    classical = model.name.startswith("heisenberg") and D_choice == "bott"
    eps = None if isinstance(D_choice, str) else D_choice[1]

    def kernel(start, count):
        path = _simulate_chunk(model, bott, x0, mc, start, count)
        v = make_tangent_process(path, h, bott)
        dec = p_decomposition(path, v, D_choice, bott)
        rho, G, G_rev = girsanov_weights(path, dec, t)
        moved = simulate_batch(model, bott, x0, rho, path.dt)
        F_rho = eval_cylinder(F, moved)
        F_w = eval_cylinder(F, path)
        out = {
            "G": RunningStats.of(G),
            "G_delta": RunningStats.of(G - 1.0),
            "cov_lhs": RunningStats.of(F_rho * G_rev),
            "cov_rhs": RunningStats.of(F_w),
            "cov_delta": RunningStats.of(F_rho * G_rev - F_w),
        }
        if classical:
            hd = h.cell_derivative(path.N, path.dt)
            cm = np.exp(t * np.einsum("ka,pka->p", hd, path.noise)
                        - 0.5 * t * t * np.sum(hd * hd) * path.dt)
            out["cm_gap"] = RunningStats.of(np.abs(G - cm) / cm)
            out["cm_gap_max"] = float(np.max(np.abs(G - cm) / cm))
        return out

    results = map_chunks(kernel, mc.n_paths, mc.chunk, mc.threads)
    gap_max = max((r.pop("cm_gap_max") for r in results if "cm_gap_max" in r), default=None)
    st = reduce_chunks(results)
    main = null_check(st["G_delta"], mc.C, mc.dt, max(float(st["G"].rms), 1.0),
                      note="E[G_t] - 1")
    subs = {
        "change_of_variables": null_check(
            st["cov_delta"], mc.C, mc.dt,
            max(float(st["cov_lhs"].rms), float(st["cov_rhs"].rms)),
            note="E[F(rho) G~] - E[F]",
        )
    }
    if classical:
        subs["classical_density"] = exact_check(gap_max, 1e-10, note="max relative gap")
    tag = D_choice if isinstance(D_choice, str) else f"adjoint({D_choice[1]:g})"
    return _report(
        f"girsanov_density[h={getattr(h, 'name', 'h')},t={t:g},D={tag}]", model.name, main, mc,
        eps, t0, lhs=st["G"].mean, rhs=1.0, scale=max(float(st["G"].rms), 1.0), subchecks=subs,
    )


# ----------------------------------------------------------------------------
# orthogonal invariance


def _o_process(model, path, O_spec, eps, bott):
    """Skew n x n matrices O_k at left points, (P, N, n, n); None for O = 0."""
    n = model.n
    P, N = path.P, path.N
    kind = O_spec.get("kind", "zero")
    if kind == "zero":
        return None
    if kind == "constant":
        A = np.asarray(O_spec["matrix"], dtype=float)
        if A.shape != (n, n) or np.abs(A + A.T).max() > 1e-12:
            raise ValueError("constant O must be a skew n x n matrix")
        return np.broadcast_to(A, (P, N, n, n))
    if kind == "j_conjugation":
        h = O_spec["h"]
        d = model.d
        v = make_tangent_process(path, h, bott)
        U = path.frames[:, :-1]
        Uv = frames_apply(U, v.v[:, :-1], path.trivial_frames)
        # J_{U v} as a matrix: [y, x] = sum_z (Uv)_z J[z, x, y]
        Jm = np.swapaxes((Uv @ bott.j.reshape(d, d * d)).reshape(P, N, d, d), -1, -2)
        if not path.trivial_frames:
            Jm = np.swapaxes(U, -1, -2) @ Jm @ U
        O = Jm[..., :n, :n] / eps
        return 0.5 * (O - np.swapaxes(O, -1, -2))
    raise ValueError(f"unknown O kind {kind!r}")


def verify_orthogonal_invariance(model, f, O_spec, eps, mc, x0=None):
    """<tau_1 df(W_1), int tau_s^{-T} U_s (O_s dB_s - 1/2 hat T_{O_s} ds)> has mean zero."""
    t0 = time.perf_counter()
    bott = bott_connection(model)
    x0 = _start(model, x0)
    # antisymmetric part of the one-form Hessian is -T^eps = hat T^eps in this convention
    te = adjoint_connection(model, eps, bott).torsion
    n, d = model.n, model.d
    if O_spec.get("kind", "zero") not in ("zero", "constant", "j_conjugation"):
        raise ValueError(f"unknown O kind {O_spec.get('kind')!r}")

    def kernel(start, count):
        path = _simulate_chunk(model, bott, x0, mc, start, count)
        O = _o_process(model, path, O_spec, eps, bott)
        if O is None:
            zero = np.zeros(path.P)
            return {"delta": RunningStats.of(zero), "lhs_norm": RunningStats.of(zero)}
        damped_transport(path, model, eps, bott)
        triv = path.trivial_frames
        U = path.frames[:, :-1]
        w = np.zeros((path.P, path.N, d))
        w[..., :n] = (O @ path.noise[..., None])[..., 0]
        # hat T_O = sum_i U^T hat T(U e_i, U O e_i)
        UH = U[..., :, :n]
        pairs = np.swapaxes(O, -1, -2) if triv else UH @ np.swapaxes(UH @ O, -1, -2)
        if triv:
            corr = pairs.reshape(pairs.shape[:-2] + (n * n,)) @ te[:n, :n].reshape(n * n, d)
        else:
            corr = pairs.reshape(pairs.shape[:-2] + (d * d,)) @ te.reshape(d * d, d)
            corr = (np.swapaxes(U, -1, -2) @ corr[..., None])[..., 0]
        w -= 0.5 * path.dt * corr
        tinv_t = _inverse_transpose(path.tau_eps[:, :-1])
        integral = (tinv_t @ frames_apply(U, w, triv)[..., None])[..., 0].sum(axis=1)
        df = f.frame_differential(path.points[:, -1])
        lhs = (path.tau_eps[:, -1] @ df[..., None])[..., 0]
        delta = np.einsum("pa,pa->p", lhs, integral)
        return {"delta": RunningStats.of(delta), "lhs_norm": RunningStats.of(
            np.linalg.norm(lhs, axis=-1) * np.linalg.norm(integral, axis=-1))}

    st = reduce_chunks(map_chunks(kernel, mc.n_paths, mc.chunk, mc.threads))
    scale = float(st["lhs_norm"].rms)
    chk = null_check(st["delta"], mc.C, mc.dt, scale)
    return _report(
        f"orthogonal_invariance[f={f.name},O={O_spec.get('kind', 'zero')}]", model.name, chk, mc,
        eps, t0, lhs=st["delta"].mean, rhs=0.0, scale=scale,
    )


# ----------------------------------------------------------------------------
# Heisenberg explicit flow


def heisenberg_shift(chart, noise, h, t, dt, x0):
    """zeta_t: closed-form development of the increments dB + t dh."""
    N = noise.shape[1]
    dh = np.diff(h.grid_values(N, dt), axis=0)
    moved = noise + t * dh[None]
    pts = np.empty((noise.shape[0], N + 1, chart.dim))
    from .sde_engine import _heisenberg_closed_form

    return _heisenberg_closed_form(chart, moved, x0, pts)


def explicit_generator(chart, W, noise, h, dt):
    """Coordinates of h_1 X + h_2 Y + 2 (int h_1 d beta - h_2 dB) Z at W_1."""
    n = chart.n
    N = noise.shape[1]
    hv = h.grid_values(N, dt)
    hmid = 0.5 * (hv[1:] + hv[:-1])
    area = (np.einsum("ka,pka->p", hmid[:, :n], noise[..., n:])
            - np.einsum("ka,pka->p", hmid[:, n:], noise[..., :n]))
    h1 = hv[-1]
    Wend = W[:, -1]
    vec = np.zeros((len(W), 2 * n + 1))
    vec[:, :2 * n] = h1
    vec[:, 2 * n] = (Wend[:, :n] * h1[n:]).sum(-1) - (Wend[:, n:2 * n] * h1[:n]).sum(-1) + 2 * area
    return vec


def verify_heisenberg_flow(n, h, t, mc, ts=(1e-1, 1e-2, 1e-3), x0=None):
    t0 = time.perf_counter()
    model = build_model("heisenberg", {"n": n})
    if not model.name.startswith("heisenberg"):
        raise ValueError("the explicit flow exists only on the Heisenberg group")
    chart = model.chart
    bott = bott_connection(model)
    x0 = _start(model, x0)
    ts = tuple(sorted(set(list(ts) + [t]), reverse=True))

    def kernel(start, count):
        path = _simulate_chunk(model, bott, x0, mc, start, count)
        W = path.points
        gen = explicit_generator(chart, W, path.noise, h, path.dt)
        errs = {}
        proj = 0.0
        for tt in ts:
            Z = heisenberg_shift(chart, path.noise, h, tt, path.dt, x0)
            fd = (Z[:, -1] - W[:, -1]) / tt
            errs[tt] = np.max(np.abs(fd - gen), axis=-1)
            shift = chart.projection(W) + tt * h.grid_values(path.N, path.dt)[None]
            proj = max(proj, float(np.abs(chart.projection(Z) - shift).max()))
        v = make_tangent_process(path, h, bott)
        Uv = np.einsum("pab,pb->pa", path.frames[:, -1], v.v[:, -1])
        abstract = np.einsum("pa,pam->pm", Uv, chart.frame_at(W[:, -1]))
        dev = np.max(np.abs(abstract - gen), axis=-1)
        out = {("err", tt): RunningStats.of(e) for tt, e in errs.items()}
        out["dev"] = RunningStats.of(dev)
        out["proj_max"] = proj
        out["dev_max"] = float(dev.max()) if len(dev) else 0.0
        return out

    results = map_chunks(kernel, mc.n_paths, mc.chunk, mc.threads)
    proj = max(r.pop("proj_max") for r in results)
    dev_max = max(r.pop("dev_max") for r in results)
    st = reduce_chunks(results)
    means = [float(st[("err", tt)].mean) for tt in ts]
    scale_b = max(1.0, float(np.max(np.abs(x0))) + 10.0)
    if h.is_zero:
        # zeta_t is the identity; the finite-difference error is pure roundoff
        slope_chk = Check(float("nan"), 0.0, 0.0, True, note="h = 0, flow is the identity",
                          rule="waived")
    else:
        slope = float(np.polyfit(np.log(ts), np.log(means), 1)[0])
        slope_chk = Check(slope, 0.0, 0.1, bool(abs(slope - 1.0) <= 0.1),
                          note="log-log slope of the generator error in t", rule="near", target=1.0)
    subs = {
        "generator_slope": slope_chk,
        "projection": exact_check(proj, 1e-12 * scale_b, note="max |pi(zeta W) - (B + t h)|"),
    }
    main = exact_check(dev_max, 1e-6, note="max |U v - explicit generator|")
    return _report(
        f"heisenberg_flow[h={getattr(h, 'name', 'h')},t={t:g}]", model.name, main, mc, None, t0,
        subchecks=subs,
        metadata={"t_values": list(ts), "mean_errors": means,
                  "mean_error_at_t": float(st[("err", t)].mean)},
    )


# ----------------------------------------------------------------------------
# projection to the flat base


def lift_base_function(model, F_base_spec):
    """F_base o pi on Heisenberg from a cylinder spec on R^{2n} (coords u1..u2n)."""
    from .charts import EuclideanChart

    n2 = model.n
    base_chart = EuclideanChart(n2)
    Fb = fns.cylinder_from_spec(base_chart, F_base_spec)
    subs = {}
    for i in range(Fb.k):
        for j in range(n2):
            subs[Fb.symbols[i][j]] = sp_symbol(f"{model.chart.coord_names[j]}_{i}")
    expr = Fb.expr.subs(subs)
    return Fb, fns.CylinderFunction(model.chart, Fb.times, expr, name=Fb.name)


def sp_symbol(name):
    import sympy as sp

    return sp.Symbol(name)


def verify_projection_driver(n, F_base_spec, h, mc):
    t0 = time.perf_counter()
    model = build_model("heisenberg", {"n": n})
    bott = bott_connection(model)
    Fb, F = lift_base_function(model, F_base_spec)
    x0 = model.chart.identity()

    def kernel(start, count):
        path = _simulate_chunk(model, bott, x0, mc, start, count)
        v = make_tangent_process(path, h, bott)
        div = directional_divergence(path, h, bott)
        DvF = directional_derivative(F, path, v)
        Fw = eval_cylinder(F, path)
        # flat base: B itself with identity transport and zero Ricci
        B = np.concatenate([np.zeros((path.P, 1, 2 * n)), np.cumsum(path.noise, axis=1)], axis=1)
        idx = Fb.grid_indices(path.N, path.dt)
        bpts = B[:, idx]
        Fbase = Fb.value_at(bpts)
        dFb = Fb.differentials_at(bpts)
        hv = h.grid_values(path.N, path.dt)[idx]
        Dh = np.einsum("pka,ka->p", dFb, hv)
        cm = _cm_pairing(path, h)
        return {
            "manifold": RunningStats.of(DvF - Fw * div),
            "base": RunningStats.of(Dh - Fbase * cm),
            "cross": RunningStats.of(DvF - Dh),
            "DvF": RunningStats.of(DvF),
            "rhs": RunningStats.of(Fw * div),
            "Dh": RunningStats.of(Dh),
        }

    st = reduce_chunks(map_chunks(kernel, mc.n_paths, mc.chunk, mc.threads))
    scale = max(float(st["DvF"].rms), float(st["rhs"].rms))
    main = null_check(st["manifold"], mc.C, mc.dt, scale, note="manifold side")
    subs = {
        "base_side": null_check(st["base"], mc.C, mc.dt, scale, note="flat Driver formula"),
        "manifold_vs_base": null_check(st["cross"], mc.C, mc.dt, scale, note="E[D_v F] - E[D_h F_base]"),
    }
    return _report(
        f"projection_driver[F={Fb.name},h={getattr(h, 'name', 'h')}]", model.name, main, mc, None,
        t0, lhs=st["DvF"].mean, rhs=st["rhs"].mean, scale=scale, subchecks=subs,
        metadata={"E_Dh_Fbase": float(st["Dh"].mean)},
    )


# ----------------------------------------------------------------------------
# deterministic identities and convergence studies


def verify_weitzenbock(model, eps_list=(0.5, 1.0, 2.0), x=None, fd_step=1e-4,
                       analytic_tol=1e-8, fd_tol=1e-5, functions=None):
    t0 = time.perf_counter()
    bott = bott_connection(model)
    chart = model.chart
    if x is None:
        rng = np.random.default_rng(7)
        x = chart.normalize(chart.exp(0.4 * rng.standard_normal(model.d)))
    funcs = functions or fns.builtin_point_functions(chart)
    rows = []
    worst_a = worst_f = spread = 0.0
    for name, f in funcs.items():
        ra = [weitzenbock_residual(model, e, f, x, fd_step, bott) for e in eps_list]
        rf = [weitzenbock_residual(model, e, f, x, fd_step, bott, mode="fd") for e in eps_list]
        rows.append({"function": name, "analytic": ra, "fd": rf})
        worst_a = max(worst_a, max(ra))
        worst_f = max(worst_f, max(rf))
        spread = max(spread, max(ra) - min(ra))
    mc = MCParams(n_paths=0, dt=0.0, seed=0, C=0.0)
    subs = {
        "finite_difference": exact_check(worst_f, fd_tol, note="max fd residual"),
        "epsilon_spread": exact_check(spread, 1e-10, note="analytic residual spread across eps"),
    }
    return _report(
        "weitzenbock", model.name, exact_check(worst_a, analytic_tol, note="max analytic residual"),
        mc, None, t0, subchecks=subs, metadata={"rows": rows, "epsilons": list(eps_list)},
        n_paths=0, dt=0.0,
    )


def heisenberg_weak_convergence(n_paths=50_000, dts=tuple(2.0**-k for k in range(7, 12)),
                                dt_ref=2.0**-13, seed=0, chunk=DEFAULT_CHUNK, threads=None, n=1):
    """Weak error of E[z_1^2] for the geometric integrator against a fine reference.

    The reference is the closed-form sampler on the dt_ref grid driven by
    the same Brownian path.  Flipping the sign of the Brownian-bridge
    fluctuations inside each coarse cell independently per coordinate
    leaves the coarse path unchanged, and averaging z^2 over the four
    flips removes most of the variance.  Returns (table rows, slope).
    """
    model = build_model("heisenberg", {"n": n})
    bott = bott_connection(model)
    chart = model.chart
    N_ref = steps_for(1.0, dt_ref)

    levels = {steps_for(1.0, dt): dt for dt in dts}
    X, Y = slice(0, n), slice(n, 2 * n)

    def kernel(start, count):
        fine = brownian_increments(seed, start, count, N_ref, dt_ref, 2 * n)
        # per cell of r fine steps: increment D, raw moment sum_i i f_i, left-point area
        D, mom, area = fine, np.zeros_like(fine), np.zeros((count, N_ref, n))
        r, out = 1, {}
        while D.shape[1] > 1:
            Dl, Dr = D[:, 0::2], D[:, 1::2]
            area = (area[:, 0::2] + area[:, 1::2]
                    + Dl[..., X] * Dr[..., Y] - Dl[..., Y] * Dr[..., X])
            mom = mom[:, 0::2] + mom[:, 1::2] + r * Dr
            D, r = Dl + Dr, 2 * r
            N = D.shape[1]
            if N not in levels:
                continue
            dt = levels[N]
            geo = simulate_batch(model, bott, chart.identity(), D, dt).points[:, -1, 2 * n]
            mu = mom - 0.5 * (r - 1) * D  # moments of the bridge part
            L = np.cumsum(D, axis=1) - D
            dX, dY, mx, my = D[..., X], D[..., Y], mu[..., X], mu[..., Y]
            # the linear interpolant sweeps no area inside a cell
            z_cc = (L[..., X] * dY - L[..., Y] * dX).sum((1, 2))
            a1 = (-2.0 / r) * (dY * mx).sum((1, 2))
            a2 = (2.0 / r) * (dX * my).sum((1, 2))
            a3 = (area - (2.0 / r) * (dX * my - dY * mx)).sum((1, 2))
            ref = z_cc**2 + a1**2 + a2**2 + a3**2
            out[dt] = RunningStats.of(ref - geo**2)
        return out

    st = reduce_chunks(map_chunks(kernel, n_paths, chunk, threads))
    rows = [{"dt": dt, "weak_error": float(st[dt].mean), "stderr": float(st[dt].stderr),
             "expected": dt - dt_ref} for dt in dts]
    slope = float(np.polyfit(np.log(dts), np.log([r["weak_error"] for r in rows]), 1)[0])
    return rows, slope


def verify_sde_convergence(mc=None, dts=tuple(2.0**-k for k in range(7, 12)), dt_ref=2.0**-13,
                           min_slope=0.8):
    mc = mc or MCParams(n_paths=50_000)
    t0 = time.perf_counter()
    rows, slope = heisenberg_weak_convergence(mc.n_paths, dts, dt_ref, mc.seed, threads=mc.threads)
    chk = Check(slope, 0.0, 0.0, bool(slope >= min_slope), note="weak error slope",
                rule="at_least", target=min_slope)
    return _report("sde_weak_convergence", "heisenberg(1)", chk, mc, None, t0,
                   metadata={"rows": rows, "dt_ref": dt_ref}, dt=min(dts))


def development_roundtrip(model, omega, Ns=(64, 128, 256, 512)):
    """Max error of recovered omega' cell averages against exact ones, per N."""
    errs = []
    for N in Ns:
        dev = develop_smooth(model, omega, N)
        rec = anti_develop_smooth(dev) * N
        s = np.linspace(0.0, 1.0, N + 1)
        exact = np.diff(omega.value(s), axis=0) * N
        errs.append(float(np.abs(rec - exact).max()))
    slope = float(-np.polyfit(np.log(Ns), np.log(errs), 1)[0])
    return errs, slope


def verify_deterministic(model=None, N=1024):
    t0 = time.perf_counter()
    model = model or build_model("heisenberg", {"n": 1})
    d, n = model.d, model.n
    rng = np.random.default_rng(11)
    omega = SmoothPath.polynomial(rng.standard_normal((3, d)) * np.r_[np.ones(n), np.zeros(d - n)])
    errs, slope = development_roundtrip(model, omega)
    h = CameronMartinPath("trig", [[0.6, -0.2] + [0.1] * (n - 2), [0.1, 0.3] + [0.0] * (n - 2)], n)
    v = smooth_tangent_path(model, omega, h, N)
    ok, res = tangency_check_smooth(model, omega, v, N)
    bad = np.array(v, copy=True)
    bad[:, n:] = 0.0
    ok_bad, res_bad = tangency_check_smooth(model, omega, bad, N)
    trivially = model.m == 0 or not np.any(bott_connection(model).torsion[:n, :n])
    subs = {
        "tangent_accepted": exact_check(res, 1e-8, note="tau_h residual"),
        "counterexample_rejected": Check(
            res_bad, 0.0, 0.0, bool(trivially or res_bad >= 1e-8), note="horizontal-only v",
            rule="waived" if trivially else "at_least", target=None if trivially else 1e-8),
    }
    if max(errs) <= 1e-11:
        # abelian models: the round trip is exact and the slope is roundoff noise
        main = exact_check(max(errs), 1e-11, note="round trip exact to roundoff")
    else:
        main = Check(slope, 0.0, 0.0, bool(slope >= 1.8), note="round-trip error slope",
                     rule="at_least", target=1.8)
    return _report("deterministic_development", model.name, main,
                   MCParams(n_paths=0, dt=1.0 / N, seed=0, C=0.0), None, t0, subchecks=subs,
                   metadata={"roundtrip_errors": errs}, n_paths=0, dt=1.0 / N)
