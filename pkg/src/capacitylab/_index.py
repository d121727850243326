"""Point lookup kernels shared by every walk loop.

A point set is stored sorted; membership goes through either a dense int32
grid over the bounding box or an open-addressing hash of coordinates.
"""
import numpy as np
from numba import njit

DENSE_GRID_LIMIT = 20_000_000


@njit(cache=True)
def _hash_coords(x):
    h = np.uint64(1469598103934665603)
    for i in range(x.shape[0]):
        h ^= np.uint64(x[i] + 1048576)
        h *= np.uint64(1099511628211)
        h ^= h >> np.uint64(29)
    return h


@njit(cache=True)
def build_hash(pts, size):
    tab = -np.ones(size, dtype=np.int32)
    mask = np.uint64(size - 1)
    for n in range(pts.shape[0]):
        s = _hash_coords(pts[n]) & mask
        while tab[s] >= 0:
            s = (s + np.uint64(1)) & mask
        tab[s] = n
    return tab


@njit(cache=True)
def build_grid(pts, lo, ext):
    tot = 1
    for i in range(ext.shape[0]):
        tot *= ext[i]
    grid = -np.ones(tot, dtype=np.int32)
    for n in range(pts.shape[0]):
        key = 0
        for i in range(pts.shape[1]):
            key = key * ext[i] + (pts[n, i] - lo[i])
        grid[key] = n
    return grid


@njit(cache=True)
def locate(x, pts, lo, ext, grid, htab):
    """Index of x in pts, or -1."""
    d = x.shape[0]
    for i in range(d):
        if x[i] < lo[i] or x[i] >= lo[i] + ext[i]:
            return -1
    if grid.shape[0] > 0:
        key = 0
        for i in range(d):
            key = key * ext[i] + (x[i] - lo[i])
        return grid[key]
    mask = np.uint64(htab.shape[0] - 1)
    s = _hash_coords(x) & mask
    while True:
        n = htab[s]
        if n < 0:
            return -1
        same = True
        for i in range(d):
            if pts[n, i] != x[i]:
                same = False
                break
        if same:
            return n
        s = (s + np.uint64(1)) & mask


@njit(cache=True)
def locate_many(q, pts, lo, ext, grid, htab):
    out = np.empty(q.shape[0], dtype=np.int64)
    for n in range(q.shape[0]):
        out[n] = locate(q[n], pts, lo, ext, grid, htab)
    return out


@njit(cache=True)
def neighbor_table(pts, lo, ext, grid, htab):
    n, d = pts.shape
    nbr = np.empty((n, 2 * d), dtype=np.int32)
    y = np.empty(d, dtype=np.int64)
    for k in range(n):
        for i in range(d):
            y[i] = pts[k, i]
        for i in range(d):
            y[i] += 1
            nbr[k, 2 * i] = locate(y, pts, lo, ext, grid, htab)
            y[i] -= 2
            nbr[k, 2 * i + 1] = locate(y, pts, lo, ext, grid, htab)
            y[i] += 1
    return nbr


@njit(cache=True)
def _isqrt_bound(rem, den):
    # largest m >= 0 with m*m*den <= rem
    m = int(np.sqrt(rem / den))
    while m * m * den > rem:
        m -= 1
    while (m + 1) * (m + 1) * den <= rem:
        m += 1
    return m


@njit(cache=True)
def _radial_fill(d, R2num, R2den, I2num, I2den, has_inner, out, fill):
    """Depth-first lexicographic enumeration of |x|^2 * R2den <= R2num,
    optionally with |x|^2 * I2den > I2num."""
    x = np.zeros(d, dtype=np.int64)
    lim = np.zeros(d, dtype=np.int64)
    part = np.zeros(d + 1, dtype=np.int64)
    lim[0] = _isqrt_bound(R2num, R2den)
    x[0] = -lim[0]
    level = 0
    cnt = 0
    while level >= 0:
        if x[level] > lim[level]:
            level -= 1
            if level >= 0:
                x[level] += 1
            continue
        part[level + 1] = part[level] + x[level] * x[level]
        if level == d - 1:
            if not has_inner or part[d] * I2den > I2num:
                if fill:
                    for i in range(d):
                        out[cnt, i] = x[i]
                cnt += 1
            x[level] += 1
            continue
        level += 1
        lim[level] = _isqrt_bound(R2num - part[level] * R2den, R2den)
        x[level] = -lim[level]
    return cnt


def radial_points(d, R2, I2=None):
    """All x in Z^d with |x|^2 <= R2 (and |x|^2 > I2), lexicographically sorted.

    R2 and I2 are Fractions.
    """
    has_inner = I2 is not None
    inum, iden = (I2.numerator, I2.denominator) if has_inner else (0, 1)
    args = (d, R2.numerator, R2.denominator, inum, iden, has_inner)
    dummy = np.empty((0, d), dtype=np.int64)
    n = _radial_fill(*args, dummy, False)
    out = np.empty((n, d), dtype=np.int64)
    _radial_fill(*args, out, True)
    return out
