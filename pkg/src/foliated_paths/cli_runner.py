"""Command-line front end: JSON experiment configs in, JSON/CSV reports out."""

import argparse
import csv
import json
import math
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import functions as fns
from . import verify_harness as vh
from .model_geometry import ModelValidationError, bott_connection, build_model, load_custom_model
from .path_calculus import CameronMartinPath
from .sde_engine import (
    SmoothPath,
    bott_transport,
    damped_transport,
    develop_smooth,
    heisenberg_levy_area,
    simulate_batch,
    brownian_increments,
)
from .stats import FOLIATED_THREADS_ENV, resolve_threads

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

SUMMARY_FIELDS = ["identity_name", "model", "n_paths", "dt", "epsilon", "estimate", "stderr",
                  "verdict", "runtime", "seed"]

MIN_PATHS = 1000
DT_EXPONENTS = (6, 12)


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ----------------------------------------------------------------------------
# field validation


def check_dt(value, where="mc.dt"):
    lo, hi = DT_EXPONENTS
    msg = f"dt must be a dyadic step 2^-k with k in [{lo}, {hi}], got {value!r}"
    try:
        dt = float(value)
    except (TypeError, ValueError):
        raise ConfigError(where, msg) from None
    if not dt > 0 or not math.isfinite(dt):
        raise ConfigError(where, msg)
    k = -math.log2(dt)
    if abs(k - round(k)) > 1e-9 or not lo <= round(k) <= hi:
        raise ConfigError(where, msg)
    return 2.0 ** -round(k)


def check_paths(value, where="mc.n_paths"):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(where, f"n_paths must be an integer, got {value!r}")
    if value < MIN_PATHS:
        raise ConfigError(where, f"n_paths must be at least {MIN_PATHS}, got {value}")
    return int(value)


def _number(value, where, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(where, f"expected a number, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(where, f"must be positive, got {value!r}")
    return float(value)


def parse_mc(doc, where="mc", base=None):
    doc = dict(doc or {})
    known = {"n_paths", "dt", "seed", "C", "chunk"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{where}.{key}", "unknown field")
    mc = base or vh.MCParams()
    if "n_paths" in doc:
        mc = replace(mc, n_paths=check_paths(doc["n_paths"], f"{where}.n_paths"))
    if "dt" in doc:
        mc = replace(mc, dt=check_dt(doc["dt"], f"{where}.dt"))
    if "seed" in doc:
        seed = doc["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"{where}.seed", f"seed must be a non-negative integer, got {seed!r}")
        mc = replace(mc, seed=seed)
    if "C" in doc:
        C = _number(doc["C"], f"{where}.C")
        if C < 0:
            raise ConfigError(f"{where}.C", "bias constant must be non-negative")
        mc = replace(mc, C=C)
    if "chunk" in doc:
        mc = replace(mc, chunk=int(_number(doc["chunk"], f"{where}.chunk", positive=True)))
    return mc


def parse_model(spec, base_dir=None, where="model"):
    """A tag ("heisenberg2", "su2", "flat"), a JSON file, or {"name", "params"|"file"}."""
    try:
        if isinstance(spec, str):
            m = re.fullmatch(r"heisenberg(\d*)", spec.lower())
            if m:
                return build_model("heisenberg", {"n": int(m.group(1) or 1)})
            if spec.endswith(".json"):
                return load_custom_model(_resolve(spec, base_dir))
            return build_model(spec, {})
        if not isinstance(spec, dict) or "name" not in spec:
            raise ConfigError(where, "expected a model tag or an object with a 'name' field")
        if spec.get("file"):
            return load_custom_model(_resolve(spec["file"], base_dir))
        if spec["name"] == "custom" and "params" not in spec:
            return load_custom_model({k: v for k, v in spec.items() if k != "name"})
        return build_model(spec["name"], spec.get("params", {}))
    except ConfigError:
        raise
    except ModelValidationError as exc:
        raise ConfigError(where, f"invalid structure constants ({exc})") from None
    except (ValueError, KeyError, TypeError, OSError) as exc:
        raise ConfigError(where, str(exc)) from None


def _resolve(path, base_dir):
    p = Path(path)
    if not p.is_absolute() and base_dir is not None and not p.exists():
        p = Path(base_dir) / p
    return p


# ----------------------------------------------------------------------------
# experiment config


IDENTITIES = {}


def identity(name, needs_mc=True):
    def wrap(fn):
        IDENTITIES[name] = (fn, needs_mc)
        return fn

    return wrap


@dataclass
class ExperimentConfig:
    model: object
    mc: object
    identities: list
    cylinder_functions: dict = field(default_factory=dict)
    point_functions: dict = field(default_factory=dict)
    cm_paths: dict = field(default_factory=dict)
    epsilons: tuple = (1.0,)
    out_dir: Path = Path("out")
    name: str = "experiment"
    threads: int = None

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        if not isinstance(doc, dict):
            raise ConfigError("config", "top level must be a JSON object")
        known = {"name", "model", "mc", "identities", "cylinder_functions", "point_functions",
                 "cm_paths", "epsilons", "out_dir", "description"}
        for key in doc:
            if key not in known:
                raise ConfigError(key, "unknown field")
        if "model" not in doc:
            raise ConfigError("model", "missing")
        model = parse_model(doc["model"], base_dir)
        mc = parse_mc(doc.get("mc"))
        if mc.n_paths < MIN_PATHS:
            raise ConfigError("mc.n_paths", f"n_paths must be at least {MIN_PATHS}")
        chart = model.chart
        cyl = {}
        for key, spec in (doc.get("cylinder_functions") or {}).items():
            try:
                cyl[key] = fns.cylinder_from_spec(chart, spec)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"cylinder_functions.{key}", str(exc)) from None
            cyl[key].name = key
        pts = {}
        for key, expr in (doc.get("point_functions") or {}).items():
            try:
                pts[key] = fns.PointFunction(chart, expr, key)
            except Exception as exc:  # sympy raises a zoo of parse errors
                raise ConfigError(f"point_functions.{key}", f"cannot parse {expr!r} ({exc})") from None
        cms = {}
        for key, spec in (doc.get("cm_paths") or {}).items():
            try:
                cms[key] = CameronMartinPath.from_spec(spec, model.n)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"cm_paths.{key}", str(exc)) from None
            cms[key].name = key
        eps = doc.get("epsilons", [1.0])
        if not isinstance(eps, list) or not eps:
            raise ConfigError("epsilons", "expected a non-empty list of positive numbers")
        eps = tuple(_number(e, "epsilons", positive=True) for e in eps)
        entries = doc.get("identities")
        if not isinstance(entries, list) or not entries:
            raise ConfigError("identities", "expected a non-empty list")
        cfg = cls(model, mc, [], cyl, pts, cms, eps,
                  Path(doc.get("out_dir", "out")), str(doc.get("name", "experiment")))
        for i, entry in enumerate(entries):
            cfg.identities.append(cfg._check_entry(entry, f"identities[{i}]"))
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path} ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON ({exc})") from None
        return cls.from_dict(doc, base_dir=path.parent)

    def _check_entry(self, entry, where):
        if isinstance(entry, str):
            entry = {"identity": entry}
        if not isinstance(entry, dict) or "identity" not in entry:
            raise ConfigError(where, "expected an identity name or an object with 'identity'")
        entry = dict(entry)
        name = str(entry["identity"]).replace("-", "_")
        if name not in IDENTITIES:
            raise ConfigError(f"{where}.identity", f"unknown identity {entry['identity']!r}; "
                              f"known: {', '.join(sorted(IDENTITIES))}")
        entry["identity"] = name
        entry["mc"] = parse_mc(entry.get("mc"), f"{where}.mc", base=self.mc)
        for key, table in (("F", self.cylinder_functions), ("G", self.cylinder_functions),
                           ("h", self.cm_paths), ("f", self.point_functions)):
            if key in entry:
                names = entry[key] if isinstance(entry[key], list) else [entry[key]]
                for nm in names:
                    if nm not in table:
                        raise ConfigError(f"{where}.{key}", f"unknown reference {nm!r}")
        if "eps" in entry:
            vals = entry["eps"] if isinstance(entry["eps"], list) else [entry["eps"]]
            entry["eps"] = [_number(e, f"{where}.eps", positive=True) for e in vals]
        if "dt_sweep" in entry:
            if not isinstance(entry["dt_sweep"], list):
                raise ConfigError(f"{where}.dt_sweep", "expected a list of dyadic steps")
            entry["dt_sweep"] = [check_dt(v, f"{where}.dt_sweep") for v in entry["dt_sweep"]]
        return entry

    def pick(self, entry, key, table):
        if key not in entry:
            return dict(table)
        names = entry[key] if isinstance(entry[key], list) else [entry[key]]
        return {nm: table[nm] for nm in names}

    def pick_one(self, entry, key, table, where):
        chosen = self.pick(entry, key, table)
        if not chosen:
            raise ConfigError(where, f"needs a '{key}' reference and none is defined")
        return next(iter(chosen.values()))


# ----------------------------------------------------------------------------
# identity runners; each returns a list of reports


def _mc(cfg, entry):
    return replace(entry["mc"], threads=cfg.threads)


@identity("weitzenbock", needs_mc=False)
def _run_weitzenbock(cfg, entry):
    funcs = cfg.pick(entry, "f", cfg.point_functions) if "f" in entry else None
    return [vh.verify_weitzenbock(cfg.model, tuple(entry.get("eps", cfg.epsilons)),
                                  functions=funcs)]


@identity("deterministic", needs_mc=False)
def _run_deterministic(cfg, entry):
    return [vh.verify_deterministic(cfg.model, int(entry.get("N", 1024)))]


@identity("sde_convergence")
def _run_convergence(cfg, entry):
    if not cfg.model.name.startswith("heisenberg"):
        raise ConfigError("identities.sde_convergence", "needs a Heisenberg model")
    return [vh.verify_sde_convergence(_mc(cfg, entry))]


def _ibp(cfg, entry, which):
    Fs = cfg.pick(entry, "F", cfg.cylinder_functions)
    hs = cfg.pick(entry, "h", cfg.cm_paths)
    if not Fs or not hs:
        raise ConfigError(f"identities.{entry['identity']}",
                          "needs cylinder_functions and cm_paths")
    pairs = entry.get("pairs")
    if pairs is not None:
        pairs = [tuple(p) for p in pairs]
        for p in pairs:
            for nm in p:
                if nm not in Fs:
                    raise ConfigError(f"identities.{entry['identity']}.pairs",
                                      f"unknown reference {nm!r}")
    eps = tuple(entry.get("eps", cfg.epsilons)) if "damped" in which else ()
    reps = vh.ibp_suite(cfg.model, Fs, hs, eps, _mc(cfg, entry), which=which, pairs=pairs)
    return list(reps.values())


@identity("ibp_suite")
def _run_ibp_suite(cfg, entry):
    return _ibp(cfg, entry, ("damped", "directional", "adjoint"))


@identity("ibp_damped")
def _run_ibp_damped(cfg, entry):
    return _ibp(cfg, entry, ("damped",))


@identity("ibp_directional")
def _run_ibp_directional(cfg, entry):
    return _ibp(cfg, entry, ("directional",))


@identity("adjoint_operator")
def _run_adjoint(cfg, entry):
    return _ibp(cfg, entry, ("adjoint",))


@identity("epsilon_independence")
def _run_eps_independence(cfg, entry):
    """Per-path directional Delta with damped transports at each eps computed alongside."""
    mc = _mc(cfg, entry)
    eps = list(entry.get("eps", [0.5, 2.0]))
    out = []
    for fn_name, F in cfg.pick(entry, "F", cfg.cylinder_functions).items():
        for hn, h in cfg.pick(entry, "h", cfg.cm_paths).items():
            out.append(vh.verify_epsilon_independence(cfg.model, F, h, mc, eps))
    return out


@identity("gradient_representation")
def _run_gradient(cfg, entry):
    f = cfg.pick_one(entry, "f", cfg.point_functions, "identities.gradient_representation")
    x = entry.get("x")
    x = cfg.model.chart.identity() if x is None else np.asarray(x, dtype=float)
    eps = entry.get("eps", [cfg.epsilons[0]])[0]
    return [vh.verify_gradient_representation(
        cfg.model, f, x, float(entry.get("s", 1.0)), eps, _mc(cfg, entry),
        float(entry.get("fd_step", 1e-4)), entry.get("closed_form"))]


def _d_choice(value, where):
    if value in (None, "bott"):
        return "bott"
    if isinstance(value, dict) and "adjoint" in value:
        return ("adjoint", _number(value["adjoint"], where, positive=True))
    raise ConfigError(where, "D must be \"bott\" or {\"adjoint\": eps}")


@identity("girsanov_density")
def _run_girsanov(cfg, entry):
    where = "identities.girsanov_density"
    F = cfg.pick_one(entry, "F", cfg.cylinder_functions, where)
    D = _d_choice(entry.get("D"), where + ".D")
    ts = entry.get("t", [0.1])
    ts = ts if isinstance(ts, list) else [ts]
    out = []
    for hn, h in cfg.pick(entry, "h", cfg.cm_paths).items():
        for t in ts:
            t = _number(t, where + ".t")
            if abs(t) > 1:
                raise ConfigError(where + ".t", "|t| must be at most 1")
            out.append(vh.verify_girsanov_density(cfg.model, h, t, F, D, _mc(cfg, entry)))
    return out


@identity("orthogonal_invariance")
def _run_oi(cfg, entry):
    where = "identities.orthogonal_invariance"
    f = cfg.pick_one(entry, "f", cfg.point_functions, where)
    O_spec = dict(entry.get("O", {"kind": "zero"}))
    if O_spec.get("kind") == "j_conjugation":
        hn = O_spec.get("h")
        if hn not in cfg.cm_paths:
            raise ConfigError(where + ".O.h", f"unknown reference {hn!r}")
        O_spec["h"] = cfg.cm_paths[hn]
    out = []
    for eps in entry.get("eps", [cfg.epsilons[0]]):
        try:
            out.append(vh.verify_orthogonal_invariance(cfg.model, f, O_spec, eps, _mc(cfg, entry)))
        except ValueError as exc:
            raise ConfigError(where + ".O", str(exc)) from None
    return out


def _heisenberg_n(cfg, where):
    if not cfg.model.name.startswith("heisenberg"):
        raise ConfigError(where, "needs a Heisenberg model")
    return cfg.model.n // 2


@identity("heisenberg_flow")
def _run_flow(cfg, entry):
    where = "identities.heisenberg_flow"
    n = _heisenberg_n(cfg, where)
    return [vh.verify_heisenberg_flow(n, h, float(entry.get("t", 1e-2)), _mc(cfg, entry))
            for h in cfg.pick(entry, "h", cfg.cm_paths).values()]


@identity("projection_driver")
def _run_projection(cfg, entry):
    where = "identities.projection_driver"
    n = _heisenberg_n(cfg, where)
    specs = entry.get("F_base")
    if specs is None:
        raise ConfigError(where + ".F_base", "missing cylinder spec on the flat base")
    specs = specs if isinstance(specs, list) else [specs]
    out = []
    for spec in specs:
        for h in cfg.pick(entry, "h", cfg.cm_paths).values():
            try:
                out.append(vh.verify_projection_driver(n, spec, h, _mc(cfg, entry)))
            except (ValueError, KeyError) as exc:
                raise ConfigError(where + ".F_base", str(exc)) from None
    return out


# ----------------------------------------------------------------------------
# outputs


def _slug(name):
    return re.sub(r"[^A-Za-z0-9_.=,-]+", "_", name).strip("_")


def summary_row(rep):
    return {
        "identity_name": rep.identity_name,
        "model": rep.model,
        "n_paths": rep.n_paths,
        "dt": repr(float(rep.dt)),
        "epsilon": "" if rep.epsilon is None else repr(float(rep.epsilon)),
        "estimate": repr(float(rep.estimate)),
        "stderr": repr(float(rep.stderr)),
        "verdict": "pass" if rep.verdict else "fail",
        "runtime": f"{rep.runtime_seconds:.3f}",
        "seed": rep.seed,
    }


def write_summary(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_report(out_dir, rep):
    rdir = Path(out_dir) / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    tag = rep.model.replace("(", "").replace(")", "").replace(",", "_")
    path = rdir / f"{_slug(tag)}__{_slug(rep.identity_name)}.json"
    path.write_text(rep.to_json() + "\n")
    return path


def write_convergence(out_dir, name, rows, fields):
    cdir = Path(out_dir) / "convergence"
    cdir.mkdir(parents=True, exist_ok=True)
    path = cdir / f"{_slug(name)}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fields})
    return path


def run_config(cfg, out_dir=None, log=print):
    """Execute every identity, write reports; returns (exit code, reports)."""
    out_dir = Path(out_dir or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports, sweeps = [], {}
    for entry in cfg.identities:
        fn, _ = IDENTITIES[entry["identity"]]
        reps = fn(cfg, entry)
        reports.extend(reps)
        for rep in reps:
            log(_line(rep))
        for dt in entry.get("dt_sweep", []):
            alt = dict(entry, mc=replace(entry["mc"], dt=dt))
            for rep in fn(cfg, alt):
                sweeps.setdefault(rep.identity_name, []).append(rep)
    for rep in reports:
        write_report(out_dir, rep)
        if rep.identity_name == "sde_weak_convergence":
            write_convergence(out_dir, rep.identity_name, rep.metadata["rows"],
                              ["dt", "weak_error", "stderr", "expected"])
    base = {r.identity_name: r for r in reports}
    for name, reps in sweeps.items():
        rows = sorted(reps + ([base[name]] if name in base else []), key=lambda r: -r.dt)
        write_convergence(out_dir, f"{reports[0].model}__{name}", [
            {"dt": repr(r.dt), "estimate": repr(r.estimate), "stderr": repr(r.stderr),
             "bias_budget": repr(r.bias_budget), "verdict": "pass" if r.verdict else "fail"}
            for r in rows], ["dt", "estimate", "stderr", "bias_budget", "verdict"])
    write_summary(out_dir / "summary.csv", [summary_row(r) for r in reports])
    ok = all(r.verdict for r in reports)
    return (EXIT_OK if ok else EXIT_FAIL), reports


def _line(rep):
    eps = "" if rep.epsilon is None else f" eps={rep.epsilon:g}"
    return (f"{'PASS' if rep.verdict else 'FAIL'}  {rep.model:16s} {rep.identity_name}{eps}  "
            f"est={rep.estimate:+.4e} se={rep.stderr:.3e} budget={rep.bias_budget:.3e}")


# ----------------------------------------------------------------------------
# subcommands


def cmd_suite(args):
    path = args.config_file or args.config
    if not path:
        raise ConfigError("config", "no config file given")
    cfg = ExperimentConfig.load(path)
    if args.seed is not None:
        cfg.mc = replace(cfg.mc, seed=args.seed)
        for entry in cfg.identities:
            entry["mc"] = replace(entry["mc"], seed=args.seed)
    cfg.threads = args.threads
    code, reports = run_config(cfg, args.out_dir)
    n_fail = sum(not r.verdict for r in reports)
    print(f"{len(reports)} reports, {n_fail} failed; written to {args.out_dir or cfg.out_dir}")
    return code


def default_functions(model):
    """Coordinate, square and two-time product cylinder functions on horizontal coordinates."""
    names = model.chart.coord_names
    a, b = names[0], names[1] if len(names) > 1 else names[0]
    if model.name.startswith("flat"):
        last = names[model.n - 1]
    else:
        last = names[-1]
    specs = {
        f"{a}(1)": {"kind": "coordinate", "params": [a]},
        f"{a}(1)^2": {"kind": "monomial", "params": [[a, 0, 2]]},
        f"{b}(1/2){last}(1)": {"kind": "product", "times": [0.5, 1.0], "params": [b, last]},
    }
    out = {}
    for key, spec in specs.items():
        out[key] = fns.cylinder_from_spec(model.chart, spec)
        out[key].name = key
    return out


def default_cm_path(model):
    n = model.n
    knots = [[0.5] + [0.3 * (-1) ** i for i in range(n)], [1.0] + [0.5 - 0.1 * i for i in range(n)]]
    h = CameronMartinPath("piecewise_linear", knots, n)
    h.name = "pl"
    return h


def cmd_verify(args):
    model = parse_model(args.model, where="--model")
    mc = vh.MCParams(n_paths=check_paths(args.n_paths, "--n-paths"), dt=check_dt(args.dt, "--dt"),
                     seed=args.seed if args.seed is not None else 0, C=args.C,
                     threads=args.threads)
    name = args.identity.replace("-", "_")
    if name not in IDENTITIES:
        raise ConfigError("identity", f"unknown identity {args.identity!r}; "
                          f"known: {', '.join(sorted(IDENTITIES))}")
    Fs = default_functions(model)
    if args.F:
        Fs = {args.F: fns.cylinder_from_spec(model.chart, {"kind": "expression",
                                                           "params": [args.F]})}
        Fs[args.F].name = args.F
    h = default_cm_path(model)
    f = fns.PointFunction(model.chart, args.f or _default_point(model), "f")
    cfg = ExperimentConfig(model, mc, [], Fs, {"f": f}, {h.name: h},
                           tuple(args.eps or [1.0]), Path(args.out_dir or "out"), "verify",
                           args.threads)
    entry = {"identity": name}
    if args.eps:
        entry["eps"] = list(args.eps)
    if name == "projection_driver":
        entry["F_base"] = {"kind": "monomial", "params": [["u1", 0, 2]]}
    if not args.all_functions and name in ("ibp_directional", "ibp_damped", "adjoint_operator",
                                           "ibp_suite", "epsilon_independence"):
        entry["F"] = [next(iter(Fs))] if args.F is None else [args.F]
    cfg.identities = [cfg._check_entry(entry, "verify")]
    fn, _ = IDENTITIES[name]
    reports = fn(cfg, cfg.identities[0])
    w = csv.DictWriter(sys.stdout, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        w.writerow(summary_row(rep))
        if args.out_dir:
            write_report(args.out_dir, rep)
    if args.out_dir:
        write_summary(Path(args.out_dir) / "summary.csv", [summary_row(r) for r in reports])
    return EXIT_OK if all(r.verdict for r in reports) else EXIT_FAIL


def _default_point(model):
    names = model.chart.coord_names
    return f"{names[0]}**2 + {names[1 if len(names) > 1 else 0]}**2"


def cmd_simulate(args):
    model = parse_model(args.model, where="--model")
    n_paths = int(args.n_paths)
    if n_paths < 1:
        raise ConfigError("--n-paths", "must be positive")
    dt = check_dt(args.dt, "--dt")
    N = vh.steps_for(1.0, dt)
    seed = args.seed if args.seed is not None else 0
    bott = bott_connection(model)
    noise = brownian_increments(seed, 0, n_paths, N, dt, model.n)
    path = simulate_batch(model, bott, model.chart.identity(), noise, dt, seed=seed)
    bott_transport(path, bott)
    if args.eps is not None:
        damped_transport(path, model, args.eps, bott)
    out = Path(args.out_dir or "out")
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"points": path.points, "noise": path.noise, "increments": path.increments,
              "times": path.times}
    if not path.trivial_frames:
        arrays["frames"] = path.frames
    if path.tau_eps is not None:
        arrays["tau_eps"] = path.tau_eps
    np.savez_compressed(out / "paths.npz", **arrays)
    end = path.points[:, -1]
    print(f"model={model.name} n_paths={n_paths} dt={dt!r} seed={seed}")
    print("mean endpoint: " + " ".join(f"{c}={v:+.6f}" for c, v in
                                       zip(model.chart.coord_names, end.mean(axis=0))))
    if args.dump:
        dump_paths(args.dump, model, path)
    return EXIT_OK


def dump_paths(target, model, path):
    """CSV rows (path, step, s, coordinates, frame, theta[, tau]) with matrices row-major."""
    names = model.chart.coord_names
    d = model.d
    mats = [("frame", path.frames), ("theta", path.theta_bott)]
    if path.tau_eps is not None:
        mats.append(("tau", path.tau_eps))
    header = ["path", "step", "s"] + list(names)
    for tag, _ in mats:
        header += [f"{tag}_{i}{j}" for i in range(d) for j in range(d)]
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for p in range(path.P):
            for k in range(path.N + 1):
                row = [p, k, repr(k * path.dt)] + [repr(float(v)) for v in path.points[p, k]]
                for _, arr in mats:
                    row += [repr(float(v)) for v in np.asarray(arr[p, k]).ravel()]
                w.writerow(row)


def _smooth_path(kind, model, radius, turns):
    d = model.d
    if kind == "circle":
        return SmoothPath.circle(d, radius=radius, turns=turns)
    if kind == "line":
        coeffs = np.zeros((2, d))
        coeffs[1, 0] = radius
        return SmoothPath.polynomial(coeffs)
    if kind == "figure8":
        def value(s):
            s = np.asarray(s, dtype=float)
            out = np.zeros(s.shape + (d,))
            out[..., 0] = radius * np.sin(2 * np.pi * turns * s)
            out[..., 1] = 0.5 * radius * np.sin(4 * np.pi * turns * s)
            return out

        def derivative(s):
            s = np.asarray(s, dtype=float)
            out = np.zeros(s.shape + (d,))
            w = 2 * np.pi * turns
            out[..., 0] = radius * w * np.cos(w * s)
            out[..., 1] = radius * w * np.cos(2 * w * s)
            return out

        return SmoothPath(value, derivative, d, "figure8")
    raise ConfigError("--path", f"unknown smooth path {kind!r}; use circle, line or figure8")


def cmd_develop(args):
    model = parse_model(args.model, where="--model")
    if args.N < 2:
        raise ConfigError("--N", "need at least 2 steps")
    omega = _smooth_path(args.path, model, args.radius, args.turns)
    dev = develop_smooth(model, omega, args.N)
    end = dev.points[-1]
    names = model.chart.coord_names
    print("endpoint: " + " ".join(f"{c}={v:+.12f}" for c, v in zip(names, end)))
    if model.name.startswith("heisenberg"):
        area = heisenberg_levy_area(omega)
        z = end[-1]
        print(f"levy area: {area:+.12f}  (vertical endpoint {z:+.12f} = 2 x area, "
              f"gap {abs(z - 2 * area):.3e})")
    if args.dump:
        with open(args.dump, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "s"] + list(names))
            for k, p in enumerate(dev.points):
                w.writerow([k, repr(k / args.N)] + [repr(float(v)) for v in p])
    return EXIT_OK


def merge_reports(paths, out):
    """Concatenate summary CSVs, keeping the first row per (identity, model, seed)."""
    seen = set()
    rows = []
    for p in paths:
        try:
            fh = open(p, newline="")
        except OSError as exc:
            raise ConfigError("report-merge", f"cannot read {p} ({exc.strerror})") from None
        with fh:
            reader = csv.DictReader(fh)
            missing = {"identity_name", "model", "seed"} - set(reader.fieldnames or [])
            if missing:
                raise ConfigError("report-merge", f"{p} lacks column(s) {sorted(missing)}")
            for row in reader:
                key = (row["identity_name"], row["model"], row["seed"])
                if key in seen:
                    continue
                seen.add(key)
                rows.append({k: row.get(k, "") for k in SUMMARY_FIELDS})
    write_summary(out, rows)
    return rows


def cmd_report_merge(args):
    out = args.output or (Path(args.out_dir or ".") / "merged_summary.csv")
    rows = merge_reports(args.inputs, out)
    print(f"{len(rows)} unique rows written to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


_COMMON_DEFAULTS = {"config": None, "out_dir": None, "threads": None, "seed": None, "dump": None}


def build_parser():
    # shared flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given at the top level
    common = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    common.add_argument("--config", default=S, help="experiment config (JSON)")
    common.add_argument("--out-dir", default=S, help="directory for reports and data files")
    common.add_argument("--threads", type=int, default=S,
                        help=f"worker cap (fallback: ${FOLIATED_THREADS_ENV}, else 1)")
    common.add_argument("--seed", type=int, default=S, help="master seed (overrides config)")
    common.add_argument("--dump", default=S, help="write plain CSV data to this file")

    parser = _Parser(prog="foliated_paths", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("suite", parents=[common], help="run every identity in a config")
    p.add_argument("config_file", nargs="?", help="config path (same as --config)")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("verify", parents=[common], help="run one identity with defaults")
    p.add_argument("identity", help="e.g. ibp-directional, ibp-damped, girsanov-density")
    p.add_argument("--model", default="heisenberg1")
    p.add_argument("--n-paths", type=int, default=100_000)
    p.add_argument("--dt", type=float, default=2.0**-9)
    p.add_argument("--eps", type=float, action="append")
    p.add_argument("--C", type=float, default=1.0, help="bias constant")
    p.add_argument("--F", help="cylinder function expression, e.g. 'x_0*z_0' at time 1")
    p.add_argument("--f", help="point function expression")
    p.add_argument("--all-functions", action="store_true",
                   help="use all default cylinder functions instead of the first")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", parents=[common], help="simulate horizontal Brownian paths")
    p.add_argument("--model", default="heisenberg1")
    p.add_argument("--n-paths", type=int, default=1000)
    p.add_argument("--dt", type=float, default=2.0**-9)
    p.add_argument("--eps", type=float, default=None, help="also compute damped transport")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("develop", parents=[common], help="develop a smooth path")
    p.add_argument("--model", default="heisenberg1")
    p.add_argument("--path", default="circle")
    p.add_argument("--N", type=int, default=4096)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--turns", type=float, default=1.0)
    p.set_defaults(func=cmd_develop)

    p = sub.add_parser("report-merge", parents=[common], help="merge summary CSVs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report_merge)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, val in _COMMON_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, val)
    if args.command is None:
        if args.config:
            args.config_file = None
            args.func = cmd_suite
        else:
            parser.print_usage(sys.stderr)
            return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print("error: --threads: must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    args.threads = resolve_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
