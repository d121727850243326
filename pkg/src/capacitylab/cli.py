"""Command-line front end: config parsing, dispatch and artifact emission.

Exit codes: 0 ok, 2 config error, 3 budget exceeded, 4 numeric failure,
5 selftest failure.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
import yaml

from . import experiments as ex
from .green import GreenTableError, get_table
from .io import write_csv, write_json, write_svg
from .lattice import ShapeSpec, blow_up
from .potential import BudgetError, SolverError, capacity, equilibrium_measure
from .spectral import EigenError

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_NUMERIC, EXIT_SELFTEST = 0, 2, 3, 4, 5
COMMANDS = ("capacity", "eigen", "interlace", "confine", "sweep", "lln", "selftest", "pilot")


class ConfigError(ValueError):
    pass


# schema ----------------------------------------------------------------------------

def _pos_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v > 0


def _nonneg_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0 and math.isfinite(v)


def _pos_num(v):
    return _nonneg_num(v) and v > 0


def _num_list(v):
    return isinstance(v, list) and len(v) > 0 and all(_pos_num(x) for x in v)


def _int_list(v):
    return isinstance(v, list) and len(v) > 0 and all(_pos_int(x) for x in v)


def _fraction(v):
    try:
        f = Fraction(str(v))
    except (ValueError, ZeroDivisionError):
        return False
    return 0 < f < 1


def _bool(v):
    return isinstance(v, bool)


def _int_vec(v):
    return isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v)


TOP = {
    "command": (lambda v: v in COMMANDS, f"one of {', '.join(COMMANDS)}"),
    "d": (lambda v: _pos_int(v) and 3 <= v <= 8, "integer in [3, 8]"),
    "shape": (lambda v: isinstance(v, (str, dict)), "shape name or mapping"),
    "seed": (lambda v: isinstance(v, int) and not isinstance(v, bool) and 0 <= v < 2 ** 64, "integer in [0, 2^64)"),
    "workers": (_pos_int, "positive integer"),
    "out": (lambda v: isinstance(v, str) and v != "", "directory path"),
    "replicas": (_pos_int, "positive integer"),
    "budgets": (lambda v: isinstance(v, dict), "mapping"),
    "params": (lambda v: isinstance(v, dict), "mapping"),
}
BUDGETS = {
    "mem_mb": (_pos_num, "positive number"),
    "step_cap": (_pos_int, "positive integer"),
    "solver_size": (_pos_int, "positive integer"),
}
PARAMS = {
    "capacity": {"N": (_pos_int, "positive integer"), "mc_walks": (_pos_int, "positive integer")},
    "eigen": {"N": (_pos_int, "positive integer"), "T": (_pos_int, "positive integer"),
              "second": (_bool, "boolean")},
    "interlace": {"N": (_pos_int, "positive integer"), "u": (_nonneg_num, "nonnegative number")},
    "confine": {"N": (_pos_int, "positive integer"), "t": (_pos_int, "positive integer"),
                "start": (_int_vec, "integer vector")},
    "sweep": {"kind": (lambda v: v in ex.KINDS, f"one of {', '.join(ex.KINDS)}"),
              "N": (_int_list, "nonempty list of positive integers"),
              "regime": (_num_list, "nonempty list of positive numbers"),
              "timing": (_bool, "boolean")},
    "lln": {"n": (_int_list, "nonempty list of positive integers"), "mc_walks": (_pos_int, "positive integer")},
    "selftest": {},
    "pilot": {"gap": (lambda v: isinstance(v, dict), "mapping"),
              "thresholds": (lambda v: isinstance(v, dict), "mapping")},
}
PILOT_GAP = {"d": (lambda v: v == 3 or _pos_int(v), "dimension"), "N": (_pos_int, "positive integer"),
             "eps": (_fraction, "fraction in (0, 1)"), "traces": (_pos_int, "positive integer"),
             "seed": (lambda v: isinstance(v, int) and v >= 0, "nonnegative integer")}
PILOT_THR = {"kind": (lambda v: v in ex.KINDS, f"one of {', '.join(ex.KINDS)}"),
             "d": (_pos_int, "dimension"), "N": (_int_list, "nonempty list of positive integers"),
             "low": (_pos_num, "positive number"), "high": (_pos_num, "positive number"),
             "replicas": (_pos_int, "positive integer"),
             "seed": (lambda v: isinstance(v, int) and v >= 0, "nonnegative integer")}
DEFAULT_BUDGETS = {"mem_mb": 2048, "step_cap": 10 ** 8, "solver_size": 4000}


@dataclass
class RunConfig:
    command: str
    d: int = 3
    shape: ShapeSpec = None
    seed: int = 0
    workers: int = 1
    out: str = "out"
    replicas: int = 100
    budgets: dict = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    params: dict = field(default_factory=dict)


def _lines(node, path=(), acc=None):
    """Map key paths to 1-based source lines."""
    acc = {} if acc is None else acc
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            acc[p] = k.start_mark.line + 1
            _lines(v, p, acc)
    return acc


def _where(lines, path):
    ln = lines.get(tuple(path))
    name = ".".join(str(p) for p in path)
    return f"line {ln}: {name}" if ln else name


def _check(table, data, lines, path):
    for k, v in data.items():
        if k not in table:
            raise ConfigError(f"{_where(lines, path + (k,))}: unknown field")
        ok, want = table[k]
        if not ok(v):
            raise ConfigError(f"{_where(lines, path + (k,))}: expected {want}, got {v!r}")


def parse_shape(d: int, spec) -> ShapeSpec:
    if spec is None or spec == "ball":
        return ShapeSpec.ball(d)
    if spec == "box":
        return ShapeSpec.box(d)
    if isinstance(spec, dict):
        kw = dict(spec)
        kind = kw.pop("kind", None)
        if kind == "union_of_boxes" and "boxes" in kw:
            kw["boxes"] = tuple((tuple(map(Fraction, map(str, lo))), tuple(map(Fraction, map(str, hi))))
                                for lo, hi in kw["boxes"])
        for key in ("radius", "inner", "outer"):
            if key in kw:
                kw[key] = Fraction(str(kw[key]))
        return ShapeSpec(kind=kind, d=d, **kw)
    raise ValueError(f"unknown shape {spec!r}")


def load_config_text(text: str) -> tuple:
    """(data, line map) from YAML text, with line diagnostics on syntax errors."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "config"
        raise ConfigError(f"{where}: {getattr(exc, 'problem', exc)}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("line 1: top level must be a mapping")
    return data, _lines(node) if node is not None else {}


def build_config(data: dict, lines: Optional[dict] = None) -> RunConfig:
    lines = lines or {}
    _check(TOP, data, lines, ())
    if "command" not in data:
        raise ConfigError("command: missing")
    cmd = data["command"]
    if "seed" not in data:
        raise ConfigError("seed: missing (runs are reproducible only with an explicit seed)")
    budgets = dict(DEFAULT_BUDGETS)
    budgets.update(data.get("budgets") or {})
    _check(BUDGETS, data.get("budgets") or {}, lines, ("budgets",))
    params = dict(data.get("params") or {})
    _check(PARAMS[cmd], params, lines, ("params",))
    if cmd == "pilot":
        if "gap" in params:
            _check(PILOT_GAP, params["gap"], lines, ("params", "gap"))
        if "thresholds" in params:
            _check(PILOT_THR, params["thresholds"], lines, ("params", "thresholds"))
    d = int(data.get("d", 3))
    try:
        shape = parse_shape(d, data.get("shape"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(lines, ('shape',))}: {exc}") from exc
    if cmd == "confine" and "start" in params and len(params["start"]) != d:
        raise ConfigError(f"{_where(lines, ('params', 'start'))}: expected {d} coordinates")
    return RunConfig(cmd, d, shape, int(data["seed"]), int(data.get("workers", 1)), str(data.get("out", "out")),
                     int(data.get("replicas", 100)), budgets, params)


# command implementations -----------------------------------------------------------------

def _need(cfg, key, default=None):
    if key in cfg.params:
        return cfg.params[key]
    if default is None:
        raise ConfigError(f"params.{key}: missing for command {cfg.command}")
    return default


def cmd_capacity(cfg: RunConfig) -> list:
    N = _need(cfg, "N")
    T = get_table(cfg.d)
    D = blow_up(cfg.shape, N)
    from .rng import stream
    res = capacity(D, T, budget=cfg.budgets["solver_size"], rng=stream(cfg.seed, "capacity"),
                   mc_walks=int(cfg.params.get("mc_walks", 20000)))
    path = os.path.join(cfg.out, "capacity.csv")
    write_csv(path, ("d", "shape", "N", "points", "cap", "stderr", "residual", "method", "seed"),
              [(cfg.d, cfg.shape.label(), N, len(D), repr(res.value), repr(res.stderr), repr(res.residual),
                res.method, cfg.seed)])
    return [path]


def cmd_eigen(cfg: RunConfig) -> list:
    from .spectral import principal_eigenpair, second_eigenvalue, survival_spectral
    N = _need(cfg, "N")
    D = blow_up(cfg.shape, N)
    pair = principal_eigenpair(D)
    lam2 = second_eigenvalue(D, pair) if cfg.params.get("second", False) else float("nan")
    T = cfg.params.get("T")
    surv = survival_spectral(pair, np.zeros(cfg.d, dtype=np.int64), int(T)) if T else float("nan")
    path = os.path.join(cfg.out, "eigen.csv")
    write_csv(path, ("d", "shape", "N", "points", "lambda", "lambda2", "residual", "scaled_gap", "T",
                     "spectral_survival"),
              [(cfg.d, cfg.shape.label(), N, len(D), repr(pair.lam), repr(lam2), repr(pair.residual),
                repr(2 * cfg.d * N * N * (1 - pair.lam)), T or "", repr(surv))])
    return [path]


def cmd_interlace(cfg: RunConfig) -> list:
    from .interlace import sample_interlacement
    from .rng import stream
    N, u = _need(cfg, "N"), float(_need(cfg, "u"))
    T = get_table(cfg.d)
    D, prof = ex.domain_context(cfg.d, cfg.shape, N, T)

    def one(r):
        s = sample_interlacement(u, prof, T, stream(cfg.seed, "interlace", 0, r), max_steps=cfg.budgets["step_cap"])
        return s.trajectory_count, len(s)

    rows = ex.run_replicas(one, cfg.replicas, cfg.workers)
    path = os.path.join(cfg.out, "interlace.csv")
    write_csv(path, ("d", "shape", "N", "u", "replica", "trajectories", "trace_size", "density", "seed"),
              [(cfg.d, cfg.shape.label(), N, repr(u), r, k, m, repr(m / len(D)), cfg.seed)
               for r, (k, m) in enumerate(rows)])
    return [path]


def cmd_confine(cfg: RunConfig) -> list:
    from .rng import stream
    from .walker import confined_sampler_build, confined_walks
    N, t = _need(cfg, "N"), int(_need(cfg, "t"))
    D = blow_up(cfg.shape, N)
    start = np.asarray(cfg.params.get("start", [0] * cfg.d), dtype=np.int64)
    samp = confined_sampler_build(D, t, mem_budget_mb=cfg.budgets["mem_mb"])
    q = samp.log_survival(start)
    sizes = []
    for c in range((cfg.replicas + ex.RW_CHUNK - 1) // ex.RW_CHUNK):
        k = min(ex.RW_CHUNK, cfg.replicas - c * ex.RW_CHUNK)
        b = confined_walks(samp, start, k, stream(cfg.seed, "confine", 0, c))
        sizes.extend(int(m.sum()) for m in b.marks)
    path = os.path.join(cfg.out, "confine.csv")
    write_csv(path, ("d", "shape", "N", "t", "replica", "trace_size", "log_survival", "seed"),
              [(cfg.d, cfg.shape.label(), N, t, r, s, repr(q), cfg.seed) for r, s in enumerate(sizes)])
    return [path]


def cmd_sweep(cfg: RunConfig) -> list:
    kind = _need(cfg, "kind")
    Ns, regs = _need(cfg, "N"), _need(cfg, "regime")
    rec = ex.sweep_phase_transition(kind, cfg.d, cfg.shape, Ns, regs, cfg.replicas, cfg.seed,
                                    workers=cfg.workers, timing=bool(cfg.params.get("timing", False)))
    base = os.path.join(cfg.out, f"sweep_{kind}_d{cfg.d}")
    write_csv(base + ".csv", ex.CSV_FIELDS, rec.rows())
    write_json(base + ".json", rec.summary())
    series = {}
    for e in rec.estimates:
        series.setdefault(f"N={e.N}", []).append((e.regime_parameter, e.mean, e.stderr))
    write_svg(base + ".svg", series, f"{kind} d={cfg.d}")
    return [base + ".csv", base + ".json", base + ".svg"]


def cmd_lln(cfg: RunConfig) -> list:
    ns = _need(cfg, "n")
    est = ex.lln_capacity(cfg.d, ns, cfg.replicas, cfg.seed, workers=cfg.workers,
                          mc_walks=int(cfg.params.get("mc_walks", ex.MC_WALKS)))
    rows = []
    for n, vals, meths in zip(est.n_grid, est.normalized_values, est.methods):
        rows.extend((cfg.d, n, r, repr(float(v)), m, cfg.seed) for r, (v, m) in enumerate(zip(vals, meths)))
    csv_path = os.path.join(cfg.out, f"lln_d{cfg.d}.csv")
    js_path = os.path.join(cfg.out, f"lln_d{cfg.d}.json")
    write_csv(csv_path, ("d", "n", "replica", "normalized_cap", "cap_method", "seed"), rows)
    write_json(js_path, {"d": cfg.d, "n": est.n_grid, "mean": est.means(), "stderr": est.stderrs(),
                         "replicas": cfg.replicas, "seed": cfg.seed})
    return [csv_path, js_path]


def cmd_pilot(cfg: RunConfig) -> list:
    if not cfg.params:
        raise ConfigError("params: empty pilot config (expected gap and/or thresholds)")
    out = {"seed": cfg.seed}
    if "gap" in cfg.params:
        g = cfg.params["gap"]
        out["gap"] = ex.fit_gap_constant(int(g.get("N", 16)), Fraction(str(g.get("eps", "0.15"))),
                                         int(g.get("traces", 5)), int(g.get("seed", cfg.seed)), d=int(g.get("d", 3)))
    if "thresholds" in cfg.params:
        t = cfg.params["thresholds"]
        out["thresholds"] = ex.pilot_thresholds(t.get("kind", "RI"), int(t.get("d", cfg.d)), t["N"],
                                                float(t["low"]), float(t["high"]), int(t.get("replicas", cfg.replicas)),
                                                int(t.get("seed", cfg.seed)), shape=cfg.shape, workers=cfg.workers)
    path = os.path.join(cfg.out, "calibration.json")
    write_json(path, out)
    return [path]


def selftest_checks() -> list:
    """(name, ok) for the definitional examples of every module."""
    from .interlace import sample_interlacement, u_to_p, vacancy_probability_mc
    from .lattice import ball, points_of
    from .rng import stream
    from .spectral import component_around, obstacle_gap, principal_eigenpair
    from .walker import confined_sampler_build, excursion_stats, srw_range

    T = get_table(3)
    B = ball(3, 3)
    prof = equilibrium_measure(B, T)
    rng = stream(0, "test")
    g0 = float(T.g0)
    single = equilibrium_measure(points_of([[0, 0, 0]], 3), T)
    checks = [
        ("theta d=3", ex.theta(3, 7) == 7.0),
        ("theta d=5", ex.theta(5, 7) == 49.0),
        ("singleton capacity 1/g0", abs(single.cap - 1.0 / g0) < 1e-12),
        ("empty capacity", capacity(points_of([], 3), T).value == 0.0),
        ("u = 0 empty interlacement", len(sample_interlacement(0.0, prof, T, rng)) == 0),
        ("u = 0 vacancy 1", vacancy_probability_mc(0.0, B, T, 10, rng)[0] == 1.0),
        ("p = 1 - e^-u", u_to_p(0.0) == 0.0),
        ("n = 0 range", len(srw_range(np.zeros(3, dtype=np.int64), 0, rng=rng)) == 1),
        ("empty obstacle component", component_around(B, np.empty((0, 3), dtype=np.int64)) is B),
        ("empty obstacle gap", obstacle_gap(B, np.empty((0, 3), dtype=np.int64), T).gap == 0.0),
        ("singleton eigenvalue", principal_eigenpair(points_of([[0, 0, 0]], 3)).lam == 0.0),
        ("N = 1 survival", abs(confined_sampler_build(ball(3, 1), 1).survival([0, 0, 0]) - 1.0) < 1e-15),
        ("inner path excursions", excursion_stats(np.zeros((5, 3), dtype=np.int64), 16, Fraction(3, 20),
                                                  Fraction(1, 20)).count == 0),
    ]
    return checks


def cmd_selftest(cfg: RunConfig) -> tuple:
    checks = selftest_checks()
    path = os.path.join(cfg.out, "selftest.csv")
    write_csv(path, ("check", "ok"), [(n, int(bool(ok))) for n, ok in checks])
    return [path], all(ok for _, ok in checks)


DISPATCH = {"capacity": cmd_capacity, "eigen": cmd_eigen, "interlace": cmd_interlace, "confine": cmd_confine,
            "sweep": cmd_sweep, "lln": cmd_lln, "pilot": cmd_pilot}


def run(cfg: RunConfig) -> int:
    """Dispatch one command; the return value is the process exit code."""
    try:
        if cfg.command == "selftest":
            paths, ok = cmd_selftest(cfg)
            for p in paths:
                print(p)
            return EXIT_OK if ok else EXIT_SELFTEST
        for p in DISPATCH[cfg.command](cfg):
            print(p)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetError, MemoryError) as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (SolverError, EigenError, GreenTableError, FloatingPointError, ex.PilotError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capacitylab", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.add_argument("--budget-mem-mb", type=float, dest="mem_mb")
    p.add_argument("--replicas", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--shape")
    p.add_argument("--N", type=int, nargs="+")
    p.add_argument("--u", type=float)
    p.add_argument("--t", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--kind", choices=ex.KINDS)
    p.add_argument("--regime", type=float, nargs="+")
    p.add_argument("--n", type=int, nargs="+")
    p.add_argument("--timing", action="store_true", default=None)
    return p


def merge_flags(data: dict, args) -> dict:
    """Flags win over file values."""
    data = dict(data)
    for key in ("command", "seed", "workers", "out", "replicas", "d", "shape"):
        v = getattr(args, key)
        if v is not None:
            data[key] = v
    if args.mem_mb is not None:
        data["budgets"] = dict(data.get("budgets") or {}, mem_mb=args.mem_mb)
    params = dict(data.get("params") or {})
    cmd = data.get("command")
    if args.N is not None:
        params["N"] = args.N if cmd == "sweep" else args.N[0]
    for key in ("u", "t", "T", "kind", "regime", "n", "timing"):
        v = getattr(args, key)
        if v is not None:
            params[key] = v
    if params:
        data["params"] = params
    return data


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        data, lines = {}, {}
        if args.config:
            try:
                with open(args.config) as f:
                    text = f.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
            data, lines = load_config_text(text)
        cfg = build_config(merge_flags(data, args), lines)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
