"""Capacity-ratio estimators, phase-transition sweeps and range LLN runs."""
from __future__ import annotations

import math
import multiprocessing as mp
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .green import GreenTable, get_table
from .interlace import sample_bernoulli_field, sample_interlacement, u_to_p
from .lattice import DomainInstance, ShapeSpec, blow_up
from .potential import (DENSE_BUDGET, BudgetError, EquilibriumProfile, capacity, equilibrium_measure,
                        sample_harmonic)
from .rng import stream, tag_id
from .walker import confined_sampler_build, confined_walks, range_in_window, srw_range

KINDS = ("RI", "RI_reduced", "RW", "Bernoulli", "Volume")
TAG_OF = {"RI": "ratio_ri", "RI_reduced": "ratio_ri_reduced", "RW": "ratio_rw",
          "Bernoulli": "ratio_bernoulli", "Volume": "volume"}
MC_WALKS = 20000
RW_CHUNK = 16
N_CAPS = {3: 48, 4: 24, 5: 14}
CSV_FIELDS = ("kind", "d", "shape", "N", "driver", "regime_parameter", "replica", "value",
              "cap_method", "seed", "wall_time_ms")


def theta(d: int, N) -> float:
    """Θ_N: N (d = 3), N²/ln N (d = 4), N² (d >= 5)."""
    if d < 3:
        raise ValueError("d must be >= 3")
    if N < 1 or (d == 4 and N < 2):
        raise ValueError("N too small for Θ_N")
    if d == 3:
        return float(N)
    if d == 4:
        return N * N / math.log(N)
    return float(N) ** 2


def regime_parameter(kind: str, d: int, N: int, driver: float) -> float:
    """u·Θ_N for interlacement and Bernoulli kinds, t·Θ_N/N^d for walk kinds."""
    if kind in ("RW", "Volume"):
        return driver * theta(d, N) / float(N) ** d
    return driver * theta(d, N)


def driver_for(kind: str, d: int, N: int, regime: float) -> float:
    """Inverse of regime_parameter; walk horizons are rounded to integers."""
    if kind in ("RW", "Volume"):
        return float(round(regime * float(N) ** d / theta(d, N)))
    return regime / theta(d, N)


def n_cap(d: int) -> int:
    return N_CAPS.get(d, 8)


@dataclass
class RatioEstimate:
    kind: str
    d: int
    shape: str
    N: int
    driver: float
    theta: float
    mean: float
    stderr: float
    replicas: int
    seed: int
    values: np.ndarray = field(repr=False, default=None)
    cap_methods: List[str] = field(repr=False, default_factory=list)
    wall_ms: List[int] = field(repr=False, default_factory=list)

    @property
    def regime_parameter(self) -> float:
        return regime_parameter(self.kind, self.d, self.N, self.driver)

    def csv_rows(self):
        reg = self.regime_parameter
        for r in range(self.replicas):
            yield (self.kind, self.d, self.shape, self.N, _fmt(self.driver), _fmt(reg), r,
                   _fmt(self.values[r]), self.cap_methods[r], self.seed,
                   self.wall_ms[r] if self.wall_ms else 0)

    def summary(self) -> dict:
        return {"kind": self.kind, "d": self.d, "shape": self.shape, "N": self.N,
                "driver": self.driver, "regime_parameter": self.regime_parameter,
                "theta": self.theta, "mean": self.mean, "stderr": self.stderr,
                "replicas": self.replicas, "seed": self.seed}


@dataclass
class SweepRecord:
    kind: str
    d: int
    shape: str
    grid: List[tuple]
    regimes: List[float]
    estimates: List[RatioEstimate]

    def rows(self):
        for est in self.estimates:
            yield from est.csv_rows()

    def summary(self) -> dict:
        return {"kind": self.kind, "d": self.d, "shape": self.shape,
                "points": [dict(e.summary(), requested_regime=r)
                           for e, r in zip(self.estimates, self.regimes)]}


@dataclass
class CapacityLLNEstimate:
    d: int
    n_grid: List[int]
    normalized_values: List[np.ndarray]
    methods: List[List[str]]
    alpha_estimate: Optional[float] = None

    def means(self) -> List[float]:
        return [float(np.mean(v)) for v in self.normalized_values]

    def stderrs(self) -> List[float]:
        return [float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else float("nan")
                for v in self.normalized_values]


def _fmt(x) -> str:
    return repr(float(x))


def lln_normalization(d: int, n: int) -> float:
    """Factor turning cap(R_n) into the quantity with a nondegenerate limit."""
    if d == 3:
        return 1.0 / math.sqrt(n)
    if d == 4:
        return math.log(n) / n
    return 1.0 / n


# replica scheduling -----------------------------------------------------------

_JOB: dict = {}


def _run_chunk(bounds):
    fn = _JOB["fn"]
    lo, hi = bounds
    return [fn(r) for r in range(lo, hi)]


def run_replicas(fn: Callable[[int], tuple], replicas: int, workers: int = 1,
                 chunk: int = 8) -> list:
    """fn(r) for r < replicas, in replica order. Each task derives its random
    stream from r alone, so the output does not depend on `workers`."""
    bounds = [(lo, min(lo + chunk, replicas)) for lo in range(0, replicas, chunk)]
    if workers <= 1 or len(bounds) <= 1:
        return [fn(r) for r in range(replicas)]
    _JOB["fn"] = fn
    try:
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=min(workers, len(bounds))) as pool:
            parts = pool.map(_run_chunk, bounds, chunksize=1)
    finally:
        _JOB.clear()
    return [x for part in parts for x in part]


def _mean_stderr(v: np.ndarray) -> tuple:
    n = v.shape[0]
    m = float(math.fsum(v.tolist()) / n)
    if n < 2:
        return m, float("nan")
    var = math.fsum(((v - m) ** 2).tolist()) / (n - 1)
    return m, math.sqrt(var / n)


def _estimate(kind, d, shape_label, N, driver, seed, results, timing) -> RatioEstimate:
    vals = np.array([r[0] for r in results], dtype=float)
    methods = [r[1] for r in results]
    wall = [int(r[2]) if timing else 0 for r in results]
    m, se = _mean_stderr(vals)
    return RatioEstimate(kind, d, shape_label, int(N), float(driver), theta(d, N), m, se,
                         len(results), int(seed), vals, methods, wall)


# trace capacities -------------------------------------------------------------

def trace_capacity(points: np.ndarray, d: int, table: GreenTable, rng: np.random.Generator,
                   window: Optional[EquilibriumProfile] = None, budget: int = DENSE_BUDGET,
                   mc_walks: int = MC_WALKS) -> tuple:
    """(capacity, method): exact when the inner boundary fits the budget,
    otherwise Monte Carlo (window identity when a window profile is given)."""
    if points.shape[0] == 0:
        return 0.0, "empty"
    res = capacity(DomainInstance.from_points(points, d=d), table, budget=budget, rng=rng,
                   mc_walks=mc_walks, window=window)
    return res.value, res.method


# shared domain context ----------------------------------------------------------

_DOMAINS: dict = {}


def domain_context(d: int, shape: ShapeSpec, N: int, table: Optional[GreenTable] = None) -> tuple:
    """(D_N, exact equilibrium profile of D_N), memoized."""
    key = (d, shape.label(), int(N))
    if key not in _DOMAINS:
        table = get_table(d) if table is None else table
        D = blow_up(shape, N)
        _DOMAINS[key] = (D, equilibrium_measure(D, table))
    return _DOMAINS[key]


def _shape(d, shape) -> ShapeSpec:
    if shape is None or shape == "ball":
        return ShapeSpec.ball(d)
    if isinstance(shape, str):
        if shape == "box":
            return ShapeSpec.box(d)
        raise ValueError(f"unknown shape {shape!r}")
    return shape


def _check_N(d, N):
    if N > n_cap(d):
        raise BudgetError(f"N = {N} above the desk-scale cap {n_cap(d)} for d = {d}")


# estimators ---------------------------------------------------------------------

def ratio_ri_direct(d: int, shape, N: int, u: float, replicas: int, seed: int, grid: int = 0,
                    workers: int = 1, timing: bool = False, table: Optional[GreenTable] = None) -> RatioEstimate:
    """ς^RI = cap(I(u) ∩ D_N) / cap(D_N), averaged over independent samples."""
    shape = _shape(d, shape)
    _check_N(d, N)
    table = get_table(d) if table is None else table
    D, prof = domain_context(d, shape, N, table)
    tag = tag_id(TAG_OF["RI"])

    def one(r):
        t0 = time.perf_counter()
        rng = stream(seed, tag, grid, r)
        s = sample_interlacement(u, prof, table, rng)
        c, how = trace_capacity(s.trace, d, table, rng, window=prof)
        return c / prof.cap, how, (time.perf_counter() - t0) * 1e3

    return _estimate("RI", d, shape.label(), N, u, seed, run_replicas(one, replicas, workers), timing)


def ratio_ri_reduced(d: int, shape, N: int, u: float, replicas: int, seed: int, grid: int = 0,
                     workers: int = 1, timing: bool = False, table: Optional[GreenTable] = None) -> RatioEstimate:
    """ς^RI through E[1 - ς] = Σ_x ē(x) E_x[exp(-u cap(R_∞ ∩ D_N))]: each replica
    contributes 1 - exp(-u cap(trace)) for a walk started at x ~ ē_{D_N}."""
    shape = _shape(d, shape)
    _check_N(d, N)
    table = get_table(d) if table is None else table
    D, prof = domain_context(d, shape, N, table)
    tag = tag_id(TAG_OF["RI_reduced"])

    def one(r):
        t0 = time.perf_counter()
        if u == 0:
            return 0.0, "none", 0.0
        rng = stream(seed, tag, grid, r)
        x = sample_harmonic(prof, rng)
        tr = range_in_window(x, prof, table, rng=rng)
        c, how = trace_capacity(tr.visited, d, table, rng, window=prof)
        return -math.expm1(-u * c), how, (time.perf_counter() - t0) * 1e3

    return _estimate("RI_reduced", d, shape.label(), N, u, seed, run_replicas(one, replicas, workers), timing)


def ratio_bernoulli(d: int, shape, N: int, u: float, replicas: int, seed: int, grid: int = 0,
                    workers: int = 1, timing: bool = False, table: Optional[GreenTable] = None) -> RatioEstimate:
    """κ = cap(B(p) ∩ D_N) / cap(D_N) with p = 1 - e^{-u}."""
    shape = _shape(d, shape)
    _check_N(d, N)
    table = get_table(d) if table is None else table
    D, prof = domain_context(d, shape, N, table)
    tag = tag_id(TAG_OF["Bernoulli"])
    p = u_to_p(u)

    def one(r):
        t0 = time.perf_counter()
        rng = stream(seed, tag, grid, r)
        f = sample_bernoulli_field(p, D, rng)
        c, how = trace_capacity(f.occupied, d, table, rng, window=prof)
        return c / prof.cap, how, (time.perf_counter() - t0) * 1e3

    return _estimate("Bernoulli", d, shape.label(), N, u, seed, run_replicas(one, replicas, workers), timing)


_SAMPLERS: dict = {}


def _confined(d, N, t):
    key = (d, N, t)
    if key not in _SAMPLERS:
        _SAMPLERS.clear()
        _SAMPLERS[key] = confined_sampler_build(blow_up(ShapeSpec.ball(d), N), t)
    return _SAMPLERS[key]


def ratio_rw(d: int, N: int, t: int, replicas: int, seed: int, grid: int = 0, workers: int = 1,
             timing: bool = False, volume: bool = False, table: Optional[GreenTable] = None) -> RatioEstimate:
    """ς^RW = cap(R_t)/cap(B_N) (or |R_t|/|B_N| when volume) for the walk
    from 0 conditioned on R_t ⊆ B_N.

    Walks are simulated in batches of RW_CHUNK replicas sharing one stream
    keyed by the batch index; the batching is fixed, so results do not depend
    on the worker count.
    """
    _check_N(d, N)
    t = int(t)
    if t < 0:
        raise ValueError("t must be >= 0")
    table = get_table(d) if table is None else table
    shape = ShapeSpec.ball(d)
    D, prof = domain_context(d, shape, N, table)
    kind = "Volume" if volume else "RW"
    tag = tag_id(TAG_OF[kind])
    origin = np.zeros(d, dtype=np.int64)
    if t > 0:
        sampler = _confined(d, N, t)

    def batch(c):
        t0 = time.perf_counter()
        lo, hi = c * RW_CHUNK, min((c + 1) * RW_CHUNK, replicas)
        rng = stream(seed, tag, grid, c)
        if t == 0:
            traces = [origin[None, :]] * (hi - lo)
        else:
            b = confined_walks(sampler, origin, hi - lo, rng)
            traces = [b.trace(k).visited for k in range(hi - lo)]
        out = []
        for tr in traces:
            if volume:
                out.append((tr.shape[0] / len(D), "count"))
            else:
                cval, how = trace_capacity(tr, d, table, rng, window=prof)
                out.append((cval / prof.cap, how))
        ms = (time.perf_counter() - t0) * 1e3 / max(hi - lo, 1)
        return [(v, how, ms) for v, how in out]

    n_chunks = (replicas + RW_CHUNK - 1) // RW_CHUNK
    parts = run_replicas(batch, n_chunks, workers, chunk=1)
    results = [x for part in parts for x in part]
    return _estimate(kind, d, shape.label(), N, t, seed, results, timing)


ESTIMATORS = {"RI": ratio_ri_direct, "RI_reduced": ratio_ri_reduced, "Bernoulli": ratio_bernoulli}


def estimate(kind: str, d: int, shape, N: int, driver: float, replicas: int, seed: int,
             grid: int = 0, workers: int = 1, timing: bool = False) -> RatioEstimate:
    if kind in ESTIMATORS:
        return ESTIMATORS[kind](d, shape, N, driver, replicas, seed, grid=grid, workers=workers, timing=timing)
    if kind in ("RW", "Volume"):
        return ratio_rw(d, N, int(driver), replicas, seed, grid=grid, workers=workers, timing=timing,
                        volume=kind == "Volume")
    raise ValueError(f"unknown kind {kind!r}")


def sweep_phase_transition(kind: str, d: int, shape, N_grid: Sequence[int], regime_grid: Sequence[float],
                           replicas: int, seed: int, workers: int = 1, timing: bool = False,
                           progress: Optional[Callable[[RatioEstimate], None]] = None) -> SweepRecord:
    """One estimate per (N, regime) with the driver solved from the regime."""
    if not N_grid or not regime_grid:
        raise ValueError("empty sweep grid")
    shape_spec = _shape(d, shape) if kind not in ("RW", "Volume") else ShapeSpec.ball(d)
    for N in N_grid:
        _check_N(d, N)
    grid, regimes, ests = [], [], []
    g = 0
    for N in N_grid:
        for reg in regime_grid:
            drv = driver_for(kind, d, N, reg)
            est = estimate(kind, d, shape_spec, N, drv, replicas, seed, grid=g, workers=workers, timing=timing)
            grid.append((int(N), drv))
            regimes.append(float(reg))
            ests.append(est)
            if progress is not None:
                progress(est)
            g += 1
    return SweepRecord(kind, d, shape_spec.label(), grid, regimes, ests)


# capacity of the range ------------------------------------------------------------

def lln_capacity(d: int, n_grid: Sequence[int], replicas: int, seed: int, workers: int = 1,
                 mc_walks: int = MC_WALKS, table: Optional[GreenTable] = None) -> CapacityLLNEstimate:
    """Normalized cap(R_n) over independent free ranges, per n."""
    table = get_table(d) if table is None else table
    tag = tag_id("lln")
    vals, meths = [], []
    for g, n in enumerate(n_grid):
        if n > 4_000_000:
            raise BudgetError("walk length above the desk-scale limit 4e6")
        norm = lln_normalization(d, n)

        def one(r, n=n, g=g, norm=norm):
            rng = stream(seed, tag, g, r)
            tr = srw_range(np.zeros(d, dtype=np.int64), n, rng=rng)
            c, how = trace_capacity(tr.visited, d, table, rng, mc_walks=mc_walks)
            return c * norm, how

        res = run_replicas(one, replicas, workers, chunk=1)
        vals.append(np.array([v for v, _ in res]))
        meths.append([h for _, h in res])
    alpha = float(np.mean(vals[-1])) if d >= 5 else None
    return CapacityLLNEstimate(d, list(map(int, n_grid)), vals, meths, alpha)


# pilot calibration -----------------------------------------------------------------

class PilotError(RuntimeError):
    pass


PILOT_MAX_REL_STDERR = 0.2


def gap_ratios(N: int, eps, count: int, seed: int, tag="obstacle", grid: int = 0, d: int = 3,
               table: Optional[GreenTable] = None) -> List[dict]:
    """Obstacle-gap ratios gap / min(N^-d cap, N^-2) over independent annulus traces."""
    from .spectral import obstacle_gap, principal_eigenpair
    from .walker import annulus_trace

    table = get_table(d) if table is None else table
    B, prof = domain_context(d, ShapeSpec.ball(d), N, table)
    base = principal_eigenpair(B)
    out = []
    for r in range(count):
        rng = stream(seed, tag, grid, r)
        tr = annulus_trace(prof, N, eps, table, rng)
        g = obstacle_gap(B, tr, table, base=base, rng=rng)
        scale = min(float(N) ** -d * g.obstacle_capacity, float(N) ** -2)
        out.append({"size": len(tr), "cap": g.obstacle_capacity, "gap": g.gap,
                    "ratio": g.gap / scale if scale > 0 else float("nan")})
    return out


def fit_gap_constant(N: int, eps, traces: int, seed: int, d: int = 3) -> dict:
    """Point estimate (mean ratio) with its relative stderr, and the
    conservative bound constant 0.5 * min ratio used for held-out checks."""
    if traces < 2:
        raise PilotError("gap pilot needs at least 2 traces")
    rows = gap_ratios(N, eps, traces, seed, tag="pilot", grid=0, d=d)
    r = np.array([x["ratio"] for x in rows])
    m, se = _mean_stderr(r)
    rel = se / m if m > 0 else float("inf")
    if not rel <= PILOT_MAX_REL_STDERR:
        raise PilotError(f"gap constant relative stderr {rel:.2f} above {PILOT_MAX_REL_STDERR}")
    return {"d": d, "N": N, "eps": str(eps), "traces": traces, "seed": seed, "c_mean": m,
            "c_stderr": se, "rel_stderr": rel, "c_bound": 0.5 * float(r.min()), "ratios": r.tolist()}


def pilot_thresholds(kind: str, d: int, N_grid: Sequence[int], low: float, high: float, replicas: int,
                     seed: int, shape="ball", workers: int = 1) -> dict:
    """Endpoint thresholds: low = max over N of mean + 3 stderr at the lowest
    regime, high = min over N of mean - 3 stderr at the highest."""
    if replicas < 2:
        raise PilotError("threshold pilot needs at least 2 replicas")
    rec = sweep_phase_transition(kind, d, shape, list(N_grid), [low, high], replicas, seed, workers=workers)
    lows = [e for e, r in zip(rec.estimates, rec.regimes) if r == low]
    highs = [e for e, r in zip(rec.estimates, rec.regimes) if r == high]
    t_low = min(max(e.mean + 3 * e.stderr for e in lows), 1.0)
    t_high = max(min(e.mean - 3 * e.stderr for e in highs), 0.0)
    if not t_low < t_high:
        raise PilotError(f"pilot thresholds do not separate: low {t_low:.3f} >= high {t_high:.3f}")
    return {"kind": kind, "d": d, "N": list(map(int, N_grid)), "low_regime": low, "high_regime": high,
            "replicas": replicas, "seed": seed, "pilot_low": t_low, "pilot_high": t_high,
            "points": [e.summary() for e in rec.estimates]}
