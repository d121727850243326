"""Walk engines: free ranges, window traces with teleport, confined walks,
annulus excursions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Optional

import numpy as np
from numba import njit

from . import _walks
from .green import GreenTable
from .lattice import DomainInstance, EmptyDomainError, as_fraction, ball, shrink
from .potential import (STEP_CAP, BudgetError, EquilibriumProfile, hit_before_exit_field,
                        sample_harmonic, window_walk_args)

MEM_BUDGET_MB = 2048


@dataclass
class Trace:
    """Visited points of a walk, restricted to a window when one is given."""

    visited: np.ndarray
    window: Optional[DomainInstance] = None
    steps_used: int = 0
    start: Optional[np.ndarray] = None

    def __len__(self):
        return self.visited.shape[0]

    @property
    def d(self):
        return self.visited.shape[1]

    def as_domain(self) -> DomainInstance:
        return DomainInstance.from_points(self.visited, d=self.visited.shape[1])


def _unique_rows(a):
    if a.shape[0] == 0:
        return a
    return np.unique(a, axis=0)


def srw_range(start, n: int, window: Optional[DomainInstance] = None,
              rng: Optional[np.random.Generator] = None, chunk: int = 1 << 20) -> Trace:
    """Range {S_0, ..., S_n} of an n-step SRW (points inside the window only)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    start = np.asarray(start, dtype=np.int64)
    d = start.shape[0]
    pieces = [start[None, :]]
    pos = start.copy()
    done = 0
    while done < n:
        m = min(chunk, n - done)
        k = rng.integers(0, 2 * d, m)
        inc = np.zeros((m, d), dtype=np.int64)
        inc[np.arange(m), k >> 1] = 1 - 2 * (k & 1)
        path = pos + np.cumsum(inc, axis=0)
        pos = path[-1].copy()
        pieces.append(_unique_rows(path))
        done += m
    pts = _unique_rows(np.concatenate(pieces))
    if window is not None:
        pts = pts[window.contains_many(pts)]
    return Trace(pts, window, int(n), start)


def range_in_window(start, profile: EquilibriumProfile, table: GreenTable,
                    R_out: Optional[float] = None, rng: Optional[np.random.Generator] = None,
                    max_steps: int = STEP_CAP) -> Trace:
    """Sample R_∞ ∩ W for the SRW started at `start`.

    Excursions that reach distance R_out from W are replaced by a return
    decision with probability P_z(H_W < ∞) = Σ_y g(z-y) e_W(y) and a re-entry
    point drawn ∝ g(z-y) e_W(y).
    """
    W = profile.support
    start = np.asarray(start, dtype=np.int64)
    if start.shape[0] != W.d:
        raise ValueError("start has the wrong dimension")
    if profile.cap <= 0:
        raise ValueError("profile/window mismatch: empty window")
    vis = np.full(len(W), np.inf)
    empty = W.index.arrays
    code, hits, steps = _walks.window_batch(
        np.ascontiguousarray(start[None, :]), np.zeros(1), *window_walk_args(profile, table, R_out),
        *empty, False, False, vis, True, rng, int(max_steps))
    if code == _walks.BUDGET:
        raise BudgetError(f"window walk exceeded {max_steps} steps")
    return Trace(W.points[vis <= 0.0], W, int(steps), start)


def naive_range_in_window(start, window: DomainInstance, n: int, rng) -> Trace:
    """Plain n-step SRW restricted to the window; brute-force reference."""
    return srw_range(start, n, window=window, rng=rng)


# confined walks --------------------------------------------------------------

@njit(cache=True)
def _apply_P(nbr, q, out):
    n, k = nbr.shape
    inv = 1.0 / k
    mx = 0.0
    for x in range(n):
        s = 0.0
        for j in range(k):
            y = nbr[x, j]
            if y >= 0:
                s += q[y]
        s *= inv
        out[x] = s
        if s > mx:
            mx = s
    return mx


def _propagate(nbr, q, steps):
    """Yield (normalized q_{s}, log scale increment) for `steps` further steps."""
    cur = q
    for _ in range(steps):
        nxt = np.empty_like(cur)
        mx = _apply_P(nbr, cur, nxt)
        if mx <= 0.0:
            yield nxt, -np.inf
            return
        nxt /= mx
        yield nxt, math.log(mx)
        cur = nxt


@dataclass
class ConfinedSampler:
    """Survival vectors q_s(x) = P_x(R_s ⊆ A), stored normalized with log scales.

    Exact iteration runs up to s_top = min(t - 1, s_conv), where s_conv is the
    first step at which the normalized q_s equals q_{s-2} to rtol; past it the
    shape repeats with period 2 and the scale grows by a constant factor.
    """

    domain: DomainInstance
    t: int
    stride: int
    checkpoints: dict
    logscale: np.ndarray
    s_top: int
    converged: bool
    tail_even: Optional[np.ndarray] = None
    tail_odd: Optional[np.ndarray] = None
    log_lambda2: float = 0.0
    dead_at: Optional[int] = None  # first s with q_s identically zero
    _q_t: Optional[tuple] = field(default=None, repr=False)

    @property
    def nbr(self):
        return self.domain.nbr

    def q_normalized(self, s: int) -> tuple:
        """(normalized vector, log scale) with q_s = vector * exp(scale)."""
        if self.dead_at is not None and s >= self.dead_at:
            return np.zeros(len(self.domain)), -math.inf
        if s <= self.s_top:
            base = (s // self.stride) * self.stride
            q = self.checkpoints[base]
            ls = self.logscale[base]
            for k, (v, inc) in enumerate(_propagate(self.nbr, q, s - base)):
                q = v
                ls = self.logscale[base + k + 1]
            return q, float(ls)
        par = (s - self.s_top) % 2
        ref = self.s_top if par == 0 else self.s_top - 1
        vec = self.tail_even if par == 0 else self.tail_odd
        return vec, float(self.logscale[ref] + (s - ref) * 0.5 * self.log_lambda2)

    def log_survival(self, x, s: Optional[int] = None) -> float:
        """log P_x(R_s ⊆ A), default s = t; -inf when the walk cannot survive."""
        s = self.t if s is None else int(s)
        k = self.domain.index_of(x)
        if k < 0:
            return -math.inf
        if s == self.t and self._q_t is not None:
            vec, ls = self._q_t
        else:
            vec, ls = self.q_normalized(s)
        if vec[k] <= 0.0:
            return -math.inf
        return float(math.log(vec[k]) + ls)

    def survival(self, x, s: Optional[int] = None) -> float:
        """P_x(R_s ⊆ A), default s = t (underflows to 0 for long horizons)."""
        return float(math.exp(self.log_survival(x, s)))


def confined_sampler_build(domain: DomainInstance, t: int, checkpoint_stride: Optional[int] = None,
                           rtol: float = 1e-12, mem_budget_mb: float = MEM_BUDGET_MB) -> ConfinedSampler:
    """Backward survival vectors for the SRW conditioned on R_t ⊆ A."""
    if t < 1:
        raise ValueError("horizon t must be >= 1")
    n = len(domain)
    if n == 0:
        raise ValueError("empty domain")
    nbr = domain.nbr
    q = np.ones(n)
    logscale = [0.0]
    hist = [q]  # last three normalized vectors
    s_top = t
    converged = False
    dead_at = None
    s = 0
    stride = checkpoint_stride
    checkpoints = {0: q}
    provisional = []  # vectors since last checkpoint when stride unknown
    if stride is None:
        provisional = [q]
    for v, inc in _propagate(nbr, q, t):
        s += 1
        logscale.append(logscale[-1] + inc)
        if stride is None:
            provisional.append(v)
            if len(provisional) * n * 8 > mem_budget_mb * 2 ** 20 / 2:
                # fix the stride now: keep every k-th vector
                stride = max(1, int(math.ceil(math.sqrt(s))))
                for j, pv in enumerate(provisional):
                    if j % stride == 0:
                        checkpoints[j] = pv
                provisional = []
        elif s % stride == 0:
            checkpoints[s] = v
        hist.append(v)
        if len(hist) > 3:
            hist.pop(0)
        if not np.isfinite(inc):
            s_top = s
            dead_at = s
            break
        if s >= 2 and s < t:
            if np.max(np.abs(v - hist[0])) <= rtol * np.max(v):
                s_top = s
                converged = True
                break
        if s == t:
            s_top = t
    if stride is None:
        stride = max(1, int(math.ceil(math.sqrt(max(s_top, 1)))))
        for j, pv in enumerate(provisional):
            if j % stride == 0 and j <= s_top:
                checkpoints[j] = pv
    mem = len(checkpoints) * n * 8 + stride * n * 8
    if mem > mem_budget_mb * 2 ** 20:
        raise BudgetError(f"confined sampler needs {mem / 2**20:.0f} MB > budget {mem_budget_mb} MB")
    ls = np.asarray(logscale)
    samp = ConfinedSampler(domain, int(t), int(stride), checkpoints, ls, int(s_top), converged, dead_at=dead_at)
    if converged:
        samp.tail_even = hist[-1]
        samp.tail_odd = hist[-2]
        samp.log_lambda2 = float(ls[s_top] - ls[s_top - 2])
    samp._q_t = samp.q_normalized(t)
    return samp


@njit(cache=True)
def _tilt_run(pos, nbr, q, nsteps, q_alt, alternate, marks, path, path_col, rng):
    """Advance every replica nsteps tilted steps; when `alternate` the weight
    vector swaps between q and q_alt after every step."""
    R = pos.shape[0]
    k = nbr.shape[1]
    w = np.empty(k)
    for r in range(R):
        x = pos[r]
        use_alt = False
        for s in range(nsteps):
            qq = q_alt if use_alt else q
            tot = 0.0
            for j in range(k):
                y = nbr[x, j]
                v = qq[y] if y >= 0 else 0.0
                w[j] = v
                tot += v
            if tot <= 0.0:
                return -1
            u = rng.random() * tot
            acc = 0.0
            pick = k - 1
            for j in range(k):
                acc += w[j]
                if u < acc and w[j] > 0.0:
                    pick = j
                    break
            while w[pick] <= 0.0:
                pick -= 1
            x = nbr[x, pick]
            marks[r, x] = 1
            if path.shape[1] > 0:
                path[r, path_col + s + 1] = x
            if alternate:
                use_alt = not use_alt
        pos[r] = x
    return 0


@njit(cache=True)
def _tilt_block(pos, nbr, block, lo, hi, marks, path, path_col, rng):
    """Steps using weights block[j] for j = hi, hi-1, ..., lo (one per step)."""
    R = pos.shape[0]
    k = nbr.shape[1]
    w = np.empty(k)
    for r in range(R):
        x = pos[r]
        col = path_col
        for j in range(hi, lo - 1, -1):
            q = block[j]
            tot = 0.0
            for m in range(k):
                y = nbr[x, m]
                v = q[y] if y >= 0 else 0.0
                w[m] = v
                tot += v
            if tot <= 0.0:
                return -1
            u = rng.random() * tot
            acc = 0.0
            pick = k - 1
            for m in range(k):
                acc += w[m]
                if u < acc and w[m] > 0.0:
                    pick = m
                    break
            while w[pick] <= 0.0:
                pick -= 1
            x = nbr[x, pick]
            marks[r, x] = 1
            col += 1
            if path.shape[1] > 0:
                path[r, col] = x
        pos[r] = x
    return 0


@dataclass
class ConfinedBatch:
    """Result of confined walks: visited marks per replica, optional paths."""

    sampler: ConfinedSampler
    marks: np.ndarray
    paths: Optional[np.ndarray]

    def trace(self, r: int) -> Trace:
        D = self.sampler.domain
        return Trace(D.points[self.marks[r].astype(bool)], D, self.sampler.t, None)

    def path_points(self, r: int) -> np.ndarray:
        return self.sampler.domain.points[self.paths[r]]


def confined_walks(sampler: ConfinedSampler, start, replicas: int, rng: np.random.Generator,
                   record_path: bool = False) -> ConfinedBatch:
    """Independent paths with law P_start(· | R_t ⊆ A).

    At time s the step x -> y has probability q_{t-s-1}(y) / (2d q_{t-s}(x));
    only ratios of q are used, so the per-vector normalization cancels.
    """
    D = sampler.domain
    x0 = D.index_of(start)
    if x0 < 0 or sampler.log_survival(start) == -math.inf:
        raise ValueError("start cannot survive t steps in the domain")
    t = sampler.t
    pos = np.full(replicas, x0, dtype=np.int64)
    marks = np.zeros((replicas, len(D)), dtype=np.uint8)
    marks[:, x0] = 1
    paths = np.zeros((replicas, t + 1), dtype=np.int32) if record_path else np.zeros((replicas, 0), dtype=np.int32)
    if record_path:
        paths[:, 0] = x0
    nbr = D.nbr
    s_top = sampler.s_top
    col = 0
    # remaining weights needed: q_{t-1}, q_{t-2}, ..., q_0
    if t - 1 > s_top:
        n_stat = t - 1 - s_top
        first = sampler.q_normalized(t - 1)[0]
        second = sampler.q_normalized(t - 2)[0]
        if _tilt_run(pos, nbr, first, n_stat, second, True, marks, paths, col, rng) < 0:
            raise FloatingPointError("survival weights vanished")
        col += n_stat
        top = s_top
    else:
        top = t - 1
    # exact part: q_top, ..., q_0 by block replay from checkpoints
    stride = sampler.stride
    hi = top
    while hi >= 0:
        base = (hi // stride) * stride
        vecs = [sampler.checkpoints[base]]
        for v, _ in _propagate(nbr, vecs[0], hi - base):
            vecs.append(v)
        block = np.ascontiguousarray(np.stack(vecs))
        if _tilt_block(pos, nbr, block, 0, hi - base, marks, paths, col, rng) < 0:
            raise FloatingPointError("survival weights vanished")
        col += hi - base + 1
        hi = base - 1
    return ConfinedBatch(sampler, marks, paths if record_path else None)


def confined_walk(sampler: ConfinedSampler, start, rng: np.random.Generator):
    """One conditioned path (as points) and its trace."""
    b = confined_walks(sampler, start, 1, rng, record_path=True)
    return b.path_points(0), b.trace(0)


# excursions ------------------------------------------------------------------

@dataclass
class ExcursionStats:
    count: int
    in_times: np.ndarray
    out_times: np.ndarray
    inner_shell: DomainInstance
    mid_shell: DomainInstance
    outer_shell: DomainInstance


@lru_cache(maxsize=32)
def _shells(d, N, eps, delta):
    B = ball(d, N)
    try:
        inner = shrink(B, 1 - 3 * eps)
        mid = shrink(B, 1 - 2 * delta)
        outer = shrink(B, 1 - delta)
    except EmptyDomainError as exc:
        raise ValueError(f"empty shell at N={N}: {exc}") from exc
    if len(mid) <= len(inner):
        raise ValueError("shell parameters leave no room between the inner and middle shells")
    return inner, mid, outer


@njit(cache=True)
def _excursions(r2, in_num, in_den, mid_num, mid_den, tin, tout):
    n_in = 0
    n_out = 0
    state = 0  # 0: waiting for entry into the inner shell, 1: waiting for exit of the middle shell
    for s in range(1, r2.shape[0]):
        if state == 0:
            if r2[s] * in_den <= in_num:
                tin[n_in] = s
                n_in += 1
                state = 1
        else:
            if r2[s] * mid_den > mid_num:
                tout[n_out] = s
                n_out += 1
                state = 0
    return n_in, n_out


def excursion_stats(path: np.ndarray, N: int, eps, delta, t: Optional[int] = None) -> ExcursionStats:
    """Completed excursions from B_N^{1-3ε} out of B_N^{1-2δ} along the path.

    τ^out_0 = 0, τ^in_{i+1} = first time after τ^out_i in the inner ball,
    τ^out_{i+1} = first time after τ^in_{i+1} outside the middle ball;
    count = max{i : τ^out_i <= t}.
    """
    eps, delta = as_fraction(eps), as_fraction(delta)
    if not (0 < delta < eps < Fraction(1, 4)):
        raise ValueError("need 0 < delta < eps < 1/4")
    path = np.asarray(path, dtype=np.int64)
    d = path.shape[1]
    inner, mid, outer = _shells(d, int(N), eps, delta)
    t = path.shape[0] - 1 if t is None else int(t)
    r2 = (path[: t + 1] ** 2).sum(axis=1)
    ri = (1 - 3 * eps) * N
    rm = (1 - 2 * delta) * N
    ri2, rm2 = ri * ri, rm * rm
    tin = np.zeros(r2.shape[0], dtype=np.int64)
    tout = np.zeros(r2.shape[0], dtype=np.int64)
    n_in, n_out = _excursions(r2, ri2.numerator, ri2.denominator, rm2.numerator, rm2.denominator, tin, tout)
    return ExcursionStats(n_out, tin[:n_in].copy(), tout[:n_out].copy(), inner, mid, outer)


def hit_trace_before_exit(domain_outer: DomainInstance, target, start) -> float:
    """P_start(H_target < H_∂), ∂ the inner boundary of domain_outer, times >= 0."""
    pts = target.visited if isinstance(target, Trace) else np.asarray(target, dtype=np.int64)
    k = domain_outer.index_of(start)
    if k < 0:
        raise ValueError("start outside the domain")
    mask = np.zeros(len(domain_outer), dtype=bool)
    if pts.shape[0]:
        idx = domain_outer.index.find(pts)
        if (idx < 0).any():
            raise ValueError("target not contained in the domain")
        mask[idx] = True
    if not mask.any():
        return 0.0
    return float(hit_before_exit_field(domain_outer, mask)[k])


def hit_trace_field(domain_outer: DomainInstance, target) -> np.ndarray:
    pts = target.visited if isinstance(target, Trace) else np.asarray(target, dtype=np.int64)
    mask = np.zeros(len(domain_outer), dtype=bool)
    if pts.shape[0]:
        mask[domain_outer.index.find(pts)] = True
    return hit_before_exit_field(domain_outer, mask)


# annulus excursion traces ----------------------------------------------------

@njit(cache=True)
def _annulus_segment(z, in_num, in_den, out_num, out_den, rng, max_len):
    """Record z, then step until |z|^2 <= r_in^2 or |z|^2 > r_out^2; the
    final point is not recorded."""
    d = z.shape[0]
    buf = np.empty((1024, d), dtype=np.int64)
    n = 0
    while True:
        r2 = 0
        for i in range(d):
            r2 += z[i] * z[i]
        if n > 0 and (r2 * in_den <= in_num or r2 * out_den > out_num):
            return buf[:n], 0
        if n == buf.shape[0]:
            nb = np.empty((2 * n, d), dtype=np.int64)
            nb[:n] = buf
            buf = nb
        for i in range(d):
            buf[n, i] = z[i]
        n += 1
        if n > max_len:
            return buf[:n], 1
        _walks.step(z, rng)


def annulus_trace(profile_ball: EquilibriumProfile, N: int, eps, table: GreenTable,
                  rng: np.random.Generator, R_out: Optional[float] = None,
                  max_tries: int = 1000, max_steps: int = STEP_CAP) -> Trace:
    """The obstacle R^{2,ε}_∞: the piece of a walk started from ē_{B_N}
    between its first visit to B_N^{1-2ε} and its exit from the annulus
    B_N^{1-ε} minus B_N^{1-3ε} (exit point excluded). Walks that never reach
    B_N^{1-2ε} are redrawn."""
    eps = as_fraction(eps)
    B = profile_ball.support
    d = B.d
    mid = shrink(B, 1 - 2 * eps)
    r_in2 = ((1 - 3 * eps) * N) ** 2
    r_out2 = ((1 - eps) * N) ** 2
    args = window_walk_args(profile_ball, table, R_out)
    z = np.empty(d, dtype=np.int64)
    for _ in range(max_tries):
        z[:] = sample_harmonic(profile_ball, rng)
        wbuf = np.empty(args[5].shape[0])
        dx = np.empty(d, dtype=np.int64)
        code, steps = _walks.window_walk(z, *args, *mid.index.arrays, True, np.empty(0), 0.0, False,
                                         rng, int(max_steps), wbuf, dx)
        if code == _walks.BUDGET:
            raise BudgetError("annulus trace walk exceeded the step budget")
        if code != _walks.HIT:
            continue
        seg, flag = _annulus_segment(z, r_in2.numerator, r_in2.denominator,
                                     r_out2.numerator, r_out2.denominator, rng, int(max_steps))
        if flag:
            raise BudgetError("annulus segment exceeded the step budget")
        return Trace(_unique_rows(seg), B, int(steps + seg.shape[0]), seg[0].copy())
    raise RuntimeError("no walk reached the middle shell")
