"""Free lattice Green function of the simple random walk.

Near field: g(x) = ∫_0^∞ Π_i e^{-t/d} I_{x_i}(t/d) dt, evaluated on a uniform
grid in log t with an asymptotic Bessel tail beyond t = T. Far field:
a_d |x|^{2-d} plus the first anisotropic correction.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from math import comb, gamma, pi

import numpy as np
from numba import njit
from scipy.special import ive

CACHE_VERSION = 1
DEFAULT_R0 = {3: 64, 4: 40, 5: 32, 6: 28, 7: 24, 8: 26}
DEFAULT_ORDER = 20
S_MIN = -35.0
T_MAX = 1e8
OVERLAP_TOL = 0.01


class GreenTableError(RuntimeError):
    pass


def far_field_constant(d: int) -> float:
    """a_d with g(x) ~ a_d |x|^{2-d}."""
    return d * gamma(d / 2 - 1) / (2 * pi ** (d / 2))


def asymptotic(x, d: int, correction: bool = True) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r2 = (x * x).sum(axis=1)
    r = np.sqrt(r2)
    a = far_field_constant(d)
    val = a * r ** (2 - d)
    if correction:
        s4 = (x ** 4).sum(axis=1)
        val = val + a * (d - 2) * d / 24.0 * r ** (-d) * ((d + 2) * s4 / r2 ** 2 - 3.0)
    return val


def _nodes(order):
    h = 1.0 / order
    s = np.arange(S_MIN, np.log(T_MAX), h)
    s = np.append(s, np.log(T_MAX))
    w = np.empty_like(s)
    ds = np.diff(s)
    w[0] = ds[0] / 2
    w[-1] = ds[-1] / 2
    w[1:-1] = (ds[:-1] + ds[1:]) / 2
    t = np.exp(s)
    return t, w * t


def _tail(y, d):
    y = np.asarray(y, dtype=float)
    a_ = (4.0 * y ** 2 - 1) / 8
    b_ = (4.0 * y ** 2 - 1) * (4.0 * y ** 2 - 9) / 128
    A = a_.sum(axis=-1)
    B = b_.sum(axis=-1) + (A ** 2 - (a_ ** 2).sum(axis=-1)) / 2
    c = (d / (2 * pi)) ** (d / 2)
    T = T_MAX
    return c * (T ** (1 - d / 2) / (d / 2 - 1) - A * d * T ** (-d / 2) / (d / 2)
                + B * d * d * T ** (-d / 2 - 1) / (d / 2 + 1))


def bessel_integral(points, d: int, order: int = DEFAULT_ORDER) -> np.ndarray:
    """g at integer displacements by direct quadrature (no table)."""
    pts = np.abs(np.atleast_2d(np.asarray(points, dtype=np.int64)))
    t, wt = _nodes(order)
    z = t / d
    m = int(pts.max()) if pts.size else 0
    iv = ive(np.arange(m + 1)[:, None], z[None, :])
    out = np.empty(pts.shape[0])
    for n, p in enumerate(pts):
        f = np.prod(iv[p], axis=0)
        out[n] = f @ wt
    return out + _tail(pts, d)


def sorted_vectors(d: int, r0: int) -> np.ndarray:
    """All 0 <= y_0 <= ... <= y_{d-1} with |y|^2 <= r0^2, as rows."""
    rows = []

    def rec(prefix, lo, rem):
        if len(prefix) == d:
            rows.append(prefix)
            return
        k = lo
        while k * k * (d - len(prefix)) <= rem or (k * k <= rem and len(prefix) == d - 1):
            if k * k > rem:
                break
            rec(prefix + [k], k, rem - k * k)
            k += 1

    rec([], 0, r0 * r0)
    return np.asarray(rows, dtype=np.int64)


def binom_table(r0: int, d: int) -> np.ndarray:
    B = np.zeros((r0 + d + 1, d + 2), dtype=np.int64)
    for n in range(r0 + d + 1):
        for k in range(d + 2):
            B[n, k] = comb(n, k)
    return B


def rank_sorted(y: np.ndarray, binom: np.ndarray) -> np.ndarray:
    """Combinatorial rank of ascending multisets y (rows)."""
    y = np.atleast_2d(y)
    d = y.shape[1]
    r = np.zeros(y.shape[0], dtype=np.int64)
    for i in range(d):
        r += binom[y[:, i] + i, i + 1]
    return r


@dataclass(frozen=True)
class GreenTable:
    d: int
    r0: int
    order: int
    table: np.ndarray
    binom: np.ndarray
    a_d: float
    correction: bool = True

    @property
    def g0(self) -> float:
        return float(self.table[0])

    @property
    def kernel_args(self):
        """Tuple passed to the numba evaluators."""
        return (self.table, self.binom, self.r0 * self.r0, self.a_d, self.correction)

    def __call__(self, x) -> np.ndarray:
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.int64)))
        return green_many(x, *self.kernel_args)

    def save(self, path):
        tmp = f"{path}.tmp{os.getpid()}.npz"
        np.savez(tmp, version=CACHE_VERSION, d=self.d, r0=self.r0, order=self.order,
                 table=self.table, a_d=self.a_d, correction=self.correction)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "GreenTable":
        z = np.load(path)
        if int(z["version"]) != CACHE_VERSION:
            raise GreenTableError(f"cache {path} has version {int(z['version'])}")
        d, r0 = int(z["d"]), int(z["r0"])
        return cls(d, r0, int(z["order"]), z["table"], binom_table(r0, d), float(z["a_d"]),
                   bool(z["correction"]))


def build_green_table(d: int, r0: int | None = None, quadrature_order: int = DEFAULT_ORDER,
                      correction: bool = True, check: bool = True) -> GreenTable:
    if not (3 <= d <= 8):
        raise ValueError("Green tables support 3 <= d <= 8")
    r0 = DEFAULT_R0[d] if r0 is None else int(r0)
    ys = sorted_vectors(d, r0)
    binom = binom_table(r0, d)
    size = comb(r0 + d, d)
    table = np.full(size, np.nan)
    t, wt = _nodes(quadrature_order)
    iv = ive(np.arange(r0 + 1)[:, None], (t / d)[None, :])
    vals = np.empty(ys.shape[0])
    chunk = max(1, 4_000_000 // iv.shape[1])
    for s in range(0, ys.shape[0], chunk):
        blk = ys[s:s + chunk]
        f = iv[blk[:, 0]].copy()
        for i in range(1, d):
            f *= iv[blk[:, i]]
        vals[s:s + chunk] = f @ wt
    vals += _tail(ys, d)
    table[rank_sorted(ys, binom)] = vals
    gt = GreenTable(d, r0, quadrature_order, table, binom, far_field_constant(d), correction)
    if check:
        err = overlap_error(gt, ys=ys, vals=vals)
        if err > OVERLAP_TOL:
            raise GreenTableError(
                f"overlap band mismatch {err:.3%} > {OVERLAP_TOL:.0%} (d={d}, r0={r0}, order={quadrature_order})")
    return gt


def overlap_error(gt: GreenTable, ys=None, vals=None) -> float:
    """max relative gap between table and far-field form on r0/2 <= |x| <= r0."""
    if ys is None:
        ys = sorted_vectors(gt.d, gt.r0)
        vals = gt.table[rank_sorted(ys, gt.binom)]
    r2 = (ys * ys).sum(axis=1)
    band = (4 * r2 >= gt.r0 ** 2) & (r2 <= gt.r0 ** 2)
    far = asymptotic(ys[band], gt.d, gt.correction)
    return float(np.max(np.abs(vals[band] / far - 1.0)))


def default_cache_dir():
    return os.path.join(os.path.expanduser("~"), ".cache", "capacitylab")


_MEMO: dict = {}


def get_table(d: int, r0: int | None = None, order: int = DEFAULT_ORDER,
              cache_dir: str | None = None) -> GreenTable:
    """Build or load the table for (d, r0, order); memoized per process."""
    r0 = DEFAULT_R0[d] if r0 is None else int(r0)
    key = (d, r0, order)
    if key in _MEMO:
        return _MEMO[key]
    cache_dir = default_cache_dir() if cache_dir is None else cache_dir
    path = os.path.join(cache_dir, f"green_d{d}_r{r0}_o{order}_v{CACHE_VERSION}.npz")
    gt = None
    if os.path.exists(path):
        try:
            gt = GreenTable.load(path)
        except (OSError, ValueError, KeyError, GreenTableError):
            gt = None
    if gt is None:
        gt = build_green_table(d, r0, order)
        try:
            os.makedirs(cache_dir, exist_ok=True)
            gt.save(path)
        except OSError:
            pass
    _MEMO[key] = gt
    return gt


@njit(cache=True)
def _green_row3(x, B, lo, out, table, binom, r0sq, a_d, corr):
    x0, x1, x2 = x[0], x[1], x[2]
    b1, b2, b3 = binom[:, 1], binom[:, 2], binom[:, 3]
    for j in range(lo, B.shape[0]):
        a = abs(x0 - B[j, 0])
        b = abs(x1 - B[j, 1])
        c = abs(x2 - B[j, 2])
        r2 = a * a + b * b + c * c
        if r2 <= r0sq:
            if a > b:
                a, b = b, a
            if b > c:
                b, c = c, b
            if a > b:
                a, b = b, a
            out[j] = table[b1[a] + b2[b + 1] + b3[c + 2]]
        else:
            rf = float(r2)
            val = a_d / np.sqrt(rf)
            if corr:
                s4 = float(a) ** 4 + float(b) ** 4 + float(c) ** 4
                val += a_d * 0.125 * rf ** -1.5 * (5.0 * s4 / (rf * rf) - 3.0)
            out[j] = val


@njit(cache=True)
def green_row(x, B, lo, out, table, binom, r0sq, a_d, corr):
    """out[j] = g(x - B[j]) for lo <= j < len(B).

    Whole rows per call: numba call overhead with array arguments is an order
    of magnitude above the cost of one lookup.
    """
    d = x.shape[0]
    if d == 3:
        _green_row3(x, B, lo, out, table, binom, r0sq, a_d, corr)
        return
    y = np.empty(d, dtype=np.int64)
    for j in range(lo, B.shape[0]):
        r2 = 0
        for i in range(d):
            v = x[i] - B[j, i]
            if v < 0:
                v = -v
            y[i] = v
            r2 += v * v
        if r2 <= r0sq:
            # odd-even transposition sort, branch free
            for p in range(d):
                for i in range(p & 1, d - 1, 2):
                    u = y[i]
                    w = y[i + 1]
                    y[i] = min(u, w)
                    y[i + 1] = max(u, w)
            rank = 0
            for i in range(d):
                rank += binom[y[i] + i, i + 1]
            out[j] = table[rank]
        else:
            rf = float(r2)
            val = a_d * rf ** (0.5 * (2 - d))
            if corr:
                s4 = 0.0
                for i in range(d):
                    q = float(y[i]) * y[i]
                    s4 += q * q
                val += a_d * (d - 2) * d / 24.0 * rf ** (-0.5 * d) * ((d + 2) * s4 / (rf * rf) - 3.0)
            out[j] = val


@njit(cache=True)
def green_at(dx, table, binom, r0sq, a_d, corr):
    """g(dx) for a single displacement."""
    out = np.empty(1)
    green_row(dx, np.zeros((1, dx.shape[0]), dtype=np.int64), 0, out, table, binom, r0sq, a_d, corr)
    return out[0]


@njit(cache=True)
def green_at_float(z, table, binom, r0sq, a_d, corr):
    """Far-field value at a real displacement (used only beyond r0)."""
    d = z.shape[0]
    rf = 0.0
    s4 = 0.0
    for i in range(d):
        q = z[i] * z[i]
        rf += q
        s4 += q * q
    r = np.sqrt(rf)
    val = a_d * r ** (2 - d)
    if corr:
        val += a_d * (d - 2) * d / 24.0 * r ** (-d) * ((d + 2) * s4 / (rf * rf) - 3.0)
    return val


@njit(cache=True)
def green_many(x, table, binom, r0sq, a_d, corr):
    out = np.empty(x.shape[0])
    green_row(np.zeros(x.shape[1], dtype=np.int64), -x, 0, out, table, binom, r0sq, a_d, corr)
    return out


@njit(cache=True)
def green_matrix(A, B, table, binom, r0sq, a_d, corr):
    """Dense matrix g(a - b) for rows a of A and b of B."""
    M = np.empty((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        green_row(A[i], B, 0, M[i], table, binom, r0sq, a_d, corr)
    return M


@njit(cache=True)
def green_matrix_sym(B, table, binom, r0sq, a_d, corr):
    """Symmetric matrix g(b_i - b_j), one triangle evaluated."""
    n = B.shape[0]
    M = np.empty((n, n))
    for i in range(n):
        green_row(B[i], B, i, M[i], table, binom, r0sq, a_d, corr)
        for j in range(i + 1, n):
            M[j, i] = M[i, j]
    return M


@njit(cache=True)
def green_potential(X, Y, w, table, binom, r0sq, a_d, corr):
    """Σ_j g(X_i - Y_j) w_j for every row of X."""
    out = np.empty(X.shape[0])
    row = np.empty(Y.shape[0])
    for i in range(X.shape[0]):
        green_row(X[i], Y, 0, row, table, binom, r0sq, a_d, corr)
        s = 0.0
        for j in range(Y.shape[0]):
            s += row[j] * w[j]
        out[i] = s
    return out


def green_free(x, table: GreenTable) -> float:
    return float(table(np.asarray(x, dtype=np.int64))[0])
