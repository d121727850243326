"""Exit laws of lattice balls, used to move walks through empty space.

If a lattice ball B(z, ρ) holds no point of interest, the walk started at its
center can be moved straight to its exit site drawn from the exact exit law;
nothing observable happens inside the ball.

The laws are computed on orbits of the hyperoctahedral group (coordinate
permutations and sign flips), which fix the center: the killed Green function
G_B(0, ·) is constant on orbits. A site is drawn by picking an orbit of exit
sites and applying a uniformly random signed permutation to its sorted
representative.
"""
from __future__ import annotations

import math
import os

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

RADII = {3: (2, 3, 4, 6, 8, 11, 16, 23, 32, 45, 64, 90, 128, 181, 256),
         4: (2, 3, 4, 6, 8, 11, 16, 23, 32, 45, 64, 90, 128),
         5: (2, 3, 4, 6, 8, 11, 16, 23, 32, 45, 64),
         6: (2, 3, 4, 6, 8, 11, 16), 7: (2, 3, 4, 6, 8, 11), 8: (2, 3, 4, 6, 8)}
VERSION = 3
DIRECT_LIMIT = 20_000

_MEMO: dict = {}


def _orbit_reps(d, r):
    """Sorted nonnegative vectors with |x| <= r."""
    rows = np.arange(r + 1, dtype=np.int64)[:, None]
    for _ in range(d - 1):
        last = rows[:, -1]
        used = (rows * rows).sum(axis=1)
        # next coordinate b >= last with used + b^2 <= r^2 would keep room for the rest
        hi = np.floor(np.sqrt(np.maximum(r * r - used, 0))).astype(np.int64)
        cnt = np.maximum(hi - last + 1, 0)
        rep = np.repeat(np.arange(rows.shape[0]), cnt)
        start = np.repeat(last, cnt)
        off = np.arange(rep.shape[0]) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        rows = np.hstack([rows[rep], (start + off)[:, None]])
    return rows[(rows * rows).sum(axis=1) <= r * r]


def _keys(v, base):
    k = np.zeros(v.shape[0], dtype=np.int64)
    for i in range(v.shape[1]):
        k = k * base + v[:, i]
    return k


def orbit_size(reps: np.ndarray) -> np.ndarray:
    """Number of signed permutations of each sorted nonnegative vector."""
    d = reps.shape[1]
    denom = np.ones(reps.shape[0])
    run = np.ones(reps.shape[0])
    for i in range(1, d):
        run = np.where(reps[:, i] == reps[:, i - 1], run + 1, 1.0)
        denom *= run
    return math.factorial(d) / denom * 2.0 ** (reps > 0).sum(axis=1)


def orbit_exit_law(d: int, r: int):
    """(exit orbit representatives, orbit probabilities, mean exit time) for
    the SRW from 0 leaving the lattice ball {|x| <= r}."""
    reps = _orbit_reps(d, r)
    base = r + 2
    keys = _keys(reps, base)
    order = np.argsort(keys)
    reps, keys = reps[order], keys[order]
    n = reps.shape[0]
    w = orbit_size(reps)
    rows, cols = [], []
    ex_src, ex_key, ex_vec = [], [], []
    for i in range(d):
        for s in (1, -1):
            y = reps.copy()
            y[:, i] += s
            c = np.sort(np.abs(y), axis=1)
            inside = (c * c).sum(axis=1) <= r * r
            ck = _keys(c, base)
            src = np.flatnonzero(inside)
            rows.append(src)
            cols.append(np.searchsorted(keys, ck[inside]))
            out = np.flatnonzero(~inside)
            ex_src.append(out)
            ex_key.append(ck[out])
            ex_vec.append(c[out])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    M = sp.csr_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n))
    A = sp.identity(n, format="csr") - M / (2 * d)
    rhs = np.zeros(n)
    rhs[0] = 1.0
    if n <= DIRECT_LIMIT:
        f = spla.spsolve(A.tocsc(), rhs)
    else:
        # W A is symmetric for the orbit weights W; solve the symmetrized system
        sq = np.sqrt(w)
        S = sp.diags(sq) @ A @ sp.diags(1.0 / sq)
        h, info = spla.cg(S.tocsr(), sq * rhs, rtol=1e-14, atol=0.0, maxiter=100 * n)
        if info != 0:
            raise RuntimeError(f"exit-law solve did not converge (d={d}, r={r})")
        f = h / sq
    src = np.concatenate(ex_src)
    ek = np.concatenate(ex_key)
    ev = np.concatenate(ex_vec)
    uk, first, inv = np.unique(ek, return_index=True, return_inverse=True)
    prob = np.bincount(inv, weights=w[src] * f[src] / (2 * d), minlength=uk.shape[0])
    return np.ascontiguousarray(ev[first]), prob, float(np.dot(w, f))


def _build(d):
    radii, offs, sites, cdf, msteps = [], [0], [], [], []
    for r in RADII[d]:
        s, p, steps = orbit_exit_law(d, r)
        c = np.cumsum(p)
        if abs(c[-1] - 1.0) > 1e-9:
            raise RuntimeError(f"exit law of radius {r} in d={d} has mass {c[-1]}")
        c /= c[-1]
        radii.append(r)
        sites.append(s)
        cdf.append(c)
        msteps.append(steps)
        offs.append(offs[-1] + s.shape[0])
    return (np.asarray(radii, dtype=np.int64), np.asarray(offs, dtype=np.int64),
            np.ascontiguousarray(np.concatenate(sites)), np.concatenate(cdf),
            np.asarray(msteps))


def jump_table(d: int, cache_dir: str | None = None):
    """(radii, offsets, exit orbit representatives, per-radius CDF, mean exit times)."""
    if d in _MEMO:
        return _MEMO[d]
    from .green import default_cache_dir

    cache_dir = default_cache_dir() if cache_dir is None else cache_dir
    path = os.path.join(cache_dir, f"jumps_d{d}_v{VERSION}.npz")
    jt = None
    if os.path.exists(path):
        try:
            z = np.load(path)
            if tuple(z["radii"]) == RADII[d]:
                jt = (z["radii"], z["offs"], z["sites"], z["cdf"], z["msteps"])
        except (OSError, ValueError, KeyError):
            jt = None
    if jt is None:
        jt = _build(d)
        try:
            os.makedirs(cache_dir, exist_ok=True)
            tmp = f"{path}.tmp{os.getpid()}.npz"
            np.savez(tmp, radii=jt[0], offs=jt[1], sites=jt[2], cdf=jt[3], msteps=jt[4])
            os.replace(tmp, path)
        except OSError:
            pass
    _MEMO[d] = jt
    return jt


def no_jumps(d: int):
    """Empty table: walks fall back to block steps only."""
    return (np.empty(0, dtype=np.int64), np.zeros(1, dtype=np.int64),
            np.empty((0, d), dtype=np.int64), np.empty(0), np.empty(0))
