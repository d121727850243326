"""Green functions, equilibrium measures and capacities of finite sets."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit

from . import _walks
from .jumps import jump_table
from .green import GreenTable, binom_table, green_many, green_row, green_matrix, green_matrix_sym, green_potential, rank_sorted
from .lattice import DomainInstance, PointIndex, outer_boundary

DENSE_BUDGET = 4000
RESIDUAL_TOL = 1e-8
STEP_CAP = 10 ** 8
FULL_RESIDUAL_LIMIT = 5e7
MIXED_PRECISION_MIN = 400
SPLU_LIMIT = 60_000  # d = 3 only; LU fill-in is prohibitive in higher d


def _use_lu(n, d):
    return n <= 2000 or (d == 3 and n <= SPLU_LIMIT)


class SolverError(RuntimeError):
    pass


class BudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class EquilibriumProfile:
    support: DomainInstance
    e: np.ndarray
    cap: float
    residual: float
    method: str
    boundary: np.ndarray = field(repr=False)

    @property
    def ebar(self) -> np.ndarray:
        return self.e / self.cap if self.cap > 0 else np.zeros_like(self.e)

    @property
    def boundary_points(self) -> np.ndarray:
        return self.support.points[self.boundary]

    @property
    def boundary_e(self) -> np.ndarray:
        return np.ascontiguousarray(self.e[self.boundary])

    def to_csv_rows(self):
        eb = self.ebar
        for k in range(len(self.support)):
            yield (*map(int, self.support.points[k]), float(self.e[k]), float(eb[k]))


def _empty_profile(K):
    return EquilibriumProfile(K, np.zeros(len(K)), 0.0, 0.0, "empty", np.empty(0, dtype=np.int64))


def orbit_keys(pts: np.ndarray) -> np.ndarray:
    """Label of the hyperoctahedral orbit of each point (sorted |coords|)."""
    y = np.sort(np.abs(pts), axis=1)
    m = int(y.max()) if y.size else 0
    return rank_sorted(y, binom_table(m, pts.shape[1]))


@njit(cache=True)
def _orbit_matrix(reps, B, inv, n_orb, table, binom, r0sq, a_d, corr):
    M = np.zeros((reps.shape[0], n_orb))
    row = np.empty(B.shape[0])
    for i in range(reps.shape[0]):
        green_row(reps[i], B, 0, row, table, binom, r0sq, a_d, corr)
        for j in range(B.shape[0]):
            M[i, inv[j]] += row[j]
    return M


def _solve_dense(B, table):
    """Cholesky solve of G e = 1. Large systems factor in single precision
    and refine in double; the Green matrix is well conditioned (spectrum
    bounded below by 1/2), so two or three sweeps reach rounding level."""
    G = green_matrix_sym(B, *table.kernel_args)
    one = np.ones(B.shape[0])
    try:
        if B.shape[0] >= MIXED_PRECISION_MIN:
            cf = sla.cho_factor(G.astype(np.float32), lower=True, check_finite=False)
            eB = sla.cho_solve(cf, one.astype(np.float32)).astype(float)
            for _ in range(10):
                r = one - G @ eB
                if np.max(np.abs(r)) <= 1e-13:
                    break
                eB += sla.cho_solve(cf, r.astype(np.float32)).astype(float)
            res = float(np.max(np.abs(G @ eB - 1.0)))
            if res <= 1e-12:
                return eB, res
        cf = sla.cho_factor(G, lower=True, check_finite=True)
        eB = sla.cho_solve(cf, one)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"Green matrix not positive definite ({exc}); duplicate points?") from exc
    res = float(np.max(np.abs(G @ eB - 1.0)))
    return eB, res


def _solve_orbits(B, table, budget):
    keys = orbit_keys(B)
    _, rep_pos, inv = np.unique(keys, return_index=True, return_inverse=True)
    n_orb = rep_pos.shape[0]
    if n_orb > budget:
        return None
    reps = B[rep_pos]
    sizes = np.bincount(inv, minlength=n_orb).astype(float)
    M = _orbit_matrix(reps, B, inv.astype(np.int64), n_orb, *table.kernel_args)
    S = sizes[:, None] * M
    S = 0.5 * (S + S.T)
    try:
        cf = sla.cho_factor(S, lower=True)
        eo = sla.cho_solve(cf, sizes)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"orbit system not positive definite ({exc})") from exc
    res = float(np.max(np.abs(M @ eo - 1.0)))
    return eo[inv], res


def _solve_cg(B, table, tol):
    n = B.shape[0]
    args = table.kernel_args

    def mv(v):
        return green_potential(B, B, np.ascontiguousarray(v, dtype=float), *args)

    op = spla.LinearOperator((n, n), matvec=mv, dtype=float)
    pre = spla.LinearOperator((n, n), matvec=lambda v: v / table.g0, dtype=float)
    e, info = spla.cg(op, np.ones(n), rtol=tol / np.sqrt(n) * 0.1, atol=0.0, maxiter=5000, M=pre)
    res = float(np.max(np.abs(mv(e) - 1.0)))
    if info != 0 and res > tol:
        raise SolverError(f"conjugate gradient did not converge (info={info}, residual={res:.2e})")
    return e, res


def equilibrium_measure(K: DomainInstance, table: GreenTable, budget: int = DENSE_BUDGET,
                        tol: float = RESIDUAL_TOL, allow_iterative: bool = True,
                        full_residual: Optional[bool] = None) -> EquilibriumProfile:
    """Solve Σ_y g(x-y) e(y) = 1 for x on the inner boundary of K.

    Interior points satisfy the same equation by the maximum principle, and
    e vanishes there. Symmetric centered sets are reduced to orbit classes.
    """
    if table.d != K.d:
        raise ValueError("Green table dimension does not match the set")
    if len(K) == 0:
        return _empty_profile(K)
    bidx = K.boundary_indices
    B = np.ascontiguousarray(K.points[bidx])
    eB = None
    method = ""
    if K.hyperoctahedral() and B.shape[0] > 200:
        out = _solve_orbits(B, table, budget)
        if out is not None:
            eB, res = out
            method = "exact_sym"
    if eB is None:
        if B.shape[0] <= budget:
            eB, res = _solve_dense(B, table)
            method = "exact"
        elif allow_iterative:
            eB, res = _solve_cg(B, table, tol)
            method = "cg"
        else:
            raise BudgetError(f"|boundary| = {B.shape[0]} exceeds the dense budget {budget}")
    e = np.zeros(len(K))
    e[bidx] = eB
    if full_residual is None:
        full_residual = len(K) * B.shape[0] <= FULL_RESIDUAL_LIMIT
    if full_residual:
        pot = green_potential(K.points, B, np.ascontiguousarray(eB), *table.kernel_args)
        res = float(np.max(np.abs(pot - 1.0)))
    if not res <= tol:
        raise SolverError(f"equilibrium residual {res:.2e} above tolerance {tol:.0e}")
    if np.any(eB < -1e-12) or np.any(eB > 1 + 1e-12):
        raise SolverError("equilibrium weights outside [0,1]")
    return EquilibriumProfile(K, e, float(np.sum(eB)), res, method, bidx)


def residual_field(profile: EquilibriumProfile, table: GreenTable) -> np.ndarray:
    """Σ_y g(x-y) e(y) - 1 at every point x of the support."""
    K = profile.support
    return green_potential(K.points, profile.boundary_points, profile.boundary_e,
                           *table.kernel_args) - 1.0


def hitting_probability_far(profile: EquilibriumProfile, z, table: GreenTable) -> float:
    """P_z(H_K < ∞) = Σ_y g(z-y) e(y) for z outside K."""
    z = np.atleast_2d(np.asarray(z, dtype=np.int64))
    if profile.support.contains_many(z).any():
        raise ValueError("z lies in K")
    v = green_potential(z, profile.boundary_points, profile.boundary_e, *table.kernel_args)
    if np.any(v > 1 + 1e-6):
        raise SolverError(f"hitting probability {v.max():.8f} > 1: Green table or profile error")
    v = np.minimum(v, 1.0)
    return float(v[0]) if v.shape[0] == 1 else v


def sample_harmonic(profile: EquilibriumProfile, rng: np.random.Generator, size=None):
    """Draw points of K with probability ē_K by CDF inversion."""
    if profile.cap <= 0:
        raise ValueError("harmonic measure of an empty set")
    w = profile.boundary_e
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    n = 1 if size is None else int(size)
    k = np.searchsorted(cdf, rng.random(n), side="right")
    k = np.minimum(k, cdf.shape[0] - 1)
    pts = profile.boundary_points[k]
    return pts[0] if size is None else pts


@dataclass(frozen=True)
class CapacityResult:
    value: float
    stderr: float
    method: str
    residual: float = 0.0


def capacity(K: DomainInstance, table: GreenTable, budget: int = DENSE_BUDGET,
             rng: Optional[np.random.Generator] = None, mc_walks: int = 20000,
             window: Optional[EquilibriumProfile] = None) -> CapacityResult:
    """Capacity with the exact solver when the boundary fits the budget,
    Monte Carlo otherwise (window identity when a window profile is given)."""
    if len(K) == 0:
        return CapacityResult(0.0, 0.0, "empty")
    nb = int(K.boundary_mask.sum())
    if nb <= budget or K.hyperoctahedral():
        try:
            prof = equilibrium_measure(K, table, budget=budget, allow_iterative=False)
            return CapacityResult(prof.cap, 0.0, prof.method, prof.residual)
        except BudgetError:
            pass
    if rng is None:
        raise BudgetError(f"|boundary| = {nb} above budget {budget} and no rng for Monte Carlo")
    if window is not None:
        est, se = capacity_window_mc(K, window, table, mc_walks, rng)
        return CapacityResult(est, se, "mc_window")
    est, se = capacity_mc(K, table, walks=mc_walks, rng=rng)
    return CapacityResult(est, se, "mc_escape")


def _unique_cells(c: np.ndarray) -> np.ndarray:
    """Unique rows of a nonnegative integer array, via packed int64 keys when they fit."""
    ext = c.max(axis=0) + 1
    if float(np.prod(ext.astype(float))) >= 2.0 ** 62:
        return np.unique(c, axis=0)
    key = np.zeros(c.shape[0], dtype=np.int64)
    for i in range(c.shape[1]):
        key = key * ext[i] + c[:, i]
    u = np.unique(key)
    out = np.empty((u.shape[0], c.shape[1]), dtype=np.int64)
    for i in range(c.shape[1] - 1, -1, -1):
        out[:, i] = u % ext[i]
        u = u // ext[i]
    return out


def occupancy_index(K: DomainInstance, max_level: float):
    """Multiscale cell occupancy of K (cells of side 4, 8, 16, ...)."""
    origin = K.points.min(axis=0)
    levels = []
    L = 4
    while L <= max_level:
        levels.append(L)
        L *= 2
    if not levels:
        return origin, np.empty(0, dtype=np.int64), PointIndex(np.zeros((1, K.d + 1), dtype=np.int64))
    keys = []
    for j, L in enumerate(levels):
        c = _unique_cells((K.points - origin) // L)
        keys.append(np.hstack([np.full((c.shape[0], 1), j, dtype=np.int64), c]))
    occ = PointIndex(np.concatenate(keys))
    return origin, np.asarray(levels, dtype=np.int64), occ


def capacity_mc(K: DomainInstance, table: GreenTable, R: Optional[float] = None,
                walks: int = 100_000, rng: Optional[np.random.Generator] = None,
                max_steps: int = STEP_CAP, return_info: bool = False):
    """Escape-walk capacity estimate with a last-exit tail correction.

    Walks start on the inner boundary and stop at the first return to K or at
    distance R from the center of K. With Z the stopping point,
    P_x(no return) = E_x[escaped · (1 - P_Z(H_K < ∞))], and P_Z(H_K < ∞) is
    replaced by cap · ĝ(Z) where ĝ averages g(Z - y) over the escape-weighted
    start points; the resulting linear equation in cap is solved exactly.
    """
    if rng is None:
        raise ValueError("capacity_mc needs an rng stream")
    if len(K) == 0:
        return (0.0, 0.0, {}) if return_info else (0.0, 0.0)
    diam = K.diameter
    if R is None:
        R = max(5.0 * diam, 10.0)
    if R < 2.0 * diam:
        raise ValueError(f"truncation radius {R} below 2 x diameter {diam:.2f}")
    bidx = K.boundary_indices
    B = K.points[bidx]
    nb = B.shape[0]
    walks = int(walks)
    if nb <= walks:
        per = walks // nb
        strata = np.repeat(np.arange(nb), per)
        weights = np.full(strata.shape[0], 1.0 / per)
        stratified = True
    else:
        strata = rng.integers(0, nb, walks)
        weights = np.full(walks, nb / walks)
        stratified = False
    starts = np.ascontiguousarray(B[strata])
    center = K.center
    rho = K.radius_about(center)
    Kp, Klo, Kext, Kgrid, Khtab = K.index.arrays
    jt = jump_table(K.d)
    if len(K) > 1 and rho > 8:
        # cells larger than the largest tabulated ball cannot lengthen a jump
        origin, levels, occ = occupancy_index(K, max_level=min(2 * rho, float(jt[0][-1])))
    else:
        origin, levels, occ = Klo, np.empty(0, dtype=np.int64), PointIndex(np.zeros((1, K.d + 1), dtype=np.int64))
    esc = np.zeros(starts.shape[0], dtype=np.bool_)
    Z = np.zeros_like(starts)
    code = _walks.escape_walks(starts, Kp, Klo, Kext, Kgrid, Khtab, *occ.arrays, origin, levels,
                               center, float(rho), float(R), *jt, rng, int(max_steps),
                               esc, Z)
    if code == _walks.BUDGET:
        raise BudgetError(f"escape walk exceeded {max_steps} steps")
    # escape-weighted reference points for ĝ
    if stratified:
        mass = np.bincount(strata, weights=esc.astype(float), minlength=nb)
        ref, refw = B, mass
    else:
        sel = np.flatnonzero(esc)
        if sel.size > 256:
            sel = sel[np.linspace(0, sel.size - 1, 256).astype(np.int64)]
        ref, refw = starts[sel], np.ones(sel.size)
    keep = refw > 0
    ref, refw = np.ascontiguousarray(ref[keep]), refw[keep]
    ghat = np.zeros(starts.shape[0])
    ei = np.flatnonzero(esc)
    if ei.size and refw.sum() > 0:
        ghat[ei] = green_potential(np.ascontiguousarray(Z[ei]), ref, refw / refw.sum(), *table.kernel_args)
    S = float(np.sum(weights * esc))
    Q = float(np.sum(weights * esc * ghat))
    cap = S / (1.0 + Q)
    v = esc * (1.0 - cap * ghat)
    if stratified:
        per = starts.shape[0] // nb
        vv = v.reshape(nb, per)
        var = vv.var(axis=1, ddof=1).sum() / per if per > 1 else np.nan
        se = float(np.sqrt(var))
    else:
        se = float(nb * v.std(ddof=1) / np.sqrt(v.shape[0]))
    if return_info:
        return cap, se, {"S": S, "Q": Q, "R": R, "walks": starts.shape[0], "stratified": stratified}
    return cap, se


def window_walk_args(profile: EquilibriumProfile, table: GreenTable, R_out: Optional[float] = None,
                     min_R_out: float = 5.0):
    W = profile.support
    center = W.center
    rho = W.radius_about(center)
    if R_out is None:
        R_out = max(5.0 * max(W.diameter, 1.0), min_R_out)
    if R_out < 5.0 * W.diameter:
        raise ValueError("R_out must be at least 5 x diameter(window)")
    keep = profile.boundary_e > 0
    Bp = np.ascontiguousarray(profile.boundary_points[keep])
    Be = np.ascontiguousarray(profile.boundary_e[keep])
    return (*W.index.arrays, Bp, Be, center, float(rho), float(R_out), *table.kernel_args,
            *jump_table(W.d))


def capacity_window_mc(A: DomainInstance, window: EquilibriumProfile, table: GreenTable,
                       walks: int, rng: np.random.Generator, R_out: Optional[float] = None,
                       max_steps: int = STEP_CAP):
    """cap(A) = cap(W) · P_{ē_W}(the walk ever visits A), for A ⊆ W."""
    if len(A) == 0:
        return 0.0, 0.0
    if not window.support.contains_many(A.points).all():
        raise ValueError("set is not contained in the window")
    starts = np.ascontiguousarray(sample_harmonic(window, rng, walks))
    hit = np.zeros(walks, dtype=np.bool_)
    code = _walks.window_hits(starts, *window_walk_args(window, table, R_out), *A.index.arrays,
                              rng, int(max_steps), hit)
    if code == _walks.BUDGET:
        raise BudgetError(f"window walk exceeded {max_steps} steps")
    p = hit.mean()
    return float(window.cap * p), float(window.cap * np.sqrt(max(p * (1 - p), 0.0) / walks))


# killed walks ---------------------------------------------------------------

def killed_operator(domain: DomainInstance) -> sp.csr_matrix:
    """I - P_A as a sparse matrix, P_A(x,y) = 1/(2d) for neighbors inside A."""
    n = len(domain)
    nbr = domain.nbr
    rows = np.repeat(np.arange(n), nbr.shape[1])
    cols = nbr.ravel().astype(np.int64)
    ok = cols >= 0
    P = sp.csr_matrix((np.full(ok.sum(), 1.0 / nbr.shape[1]), (rows[ok], cols[ok])), shape=(n, n))
    return (sp.identity(n, format="csr") - P).tocsr()


def _solver(domain: DomainInstance):
    cached = getattr(domain, "_killed_solver", None)
    if cached is not None:
        return cached
    A = killed_operator(domain)
    if _use_lu(len(domain), domain.d):
        lu = spla.splu(A.tocsc())
        solve = lu.solve
    else:
        def solve(b):
            x, info = spla.cg(A, b, rtol=1e-13, atol=0.0, maxiter=100_000)
            if info != 0:
                raise SolverError(f"killed Green solve did not converge (info={info})")
            return x
    object.__setattr__(domain, "_killed_solver", solve)
    return solve


@dataclass(frozen=True)
class KilledGreenField:
    domain: DomainInstance
    source: np.ndarray
    values: np.ndarray


def killed_green(domain: DomainInstance, source) -> KilledGreenField:
    """G_A(source, ·): expected visits before leaving A."""
    s = domain.index_of(source)
    if s < 0:
        raise ValueError("source outside the domain")
    b = np.zeros(len(domain))
    b[s] = 1.0
    vals = _solver(domain)(b)
    return KilledGreenField(domain, np.asarray(source, dtype=np.int64), vals)


def exit_distribution(domain: DomainInstance, start, return_green: bool = False):
    """(exit sites, probabilities) of the first point outside A, from start."""
    G = killed_green(domain, start).values
    d2 = 2 * domain.d
    sites = outer_boundary(domain)
    idx = PointIndex(sites)
    prob = np.zeros(sites.shape[0])
    bidx = domain.boundary_indices
    for k in range(d2):
        sel = bidx[domain.nbr[bidx, k] < 0]
        if sel.size == 0:
            continue
        y = domain.points[sel].copy()
        y[:, k // 2] += 1 if k % 2 == 0 else -1
        np.add.at(prob, idx.find(y), G[sel] / d2)
    if return_green:
        return sites, prob, G
    return sites, prob


def hit_before_exit_field(domain: DomainInstance, target_mask: np.ndarray) -> np.ndarray:
    """h(x) = P_x(hit target before the inner boundary of the domain), times >= 0.

    h = 1 on the target, 0 on the inner boundary off the target, harmonic on
    the remaining interior points.
    """
    target_mask = np.asarray(target_mask, dtype=bool)
    n = len(domain)
    h = np.zeros(n)
    h[target_mask] = 1.0
    free = ~target_mask & ~domain.boundary_mask
    fidx = np.flatnonzero(free)
    if fidx.size == 0 or not target_mask.any():
        return h
    pos = -np.ones(n, dtype=np.int64)
    pos[fidx] = np.arange(fidx.size)
    nbr = domain.nbr[fidx].astype(np.int64)
    d2 = nbr.shape[1]
    rows = np.repeat(np.arange(fidx.size), d2)
    cols = nbr.ravel()
    inside = cols >= 0
    colpos = np.where(inside, pos[np.where(inside, cols, 0)], -1)
    okf = colpos >= 0
    A = sp.identity(fidx.size, format="csr") - sp.csr_matrix(
        (np.full(okf.sum(), 1.0 / d2), (rows[okf], colpos[okf])), shape=(fidx.size, fidx.size))
    tgt = inside & target_mask[np.where(inside, cols, 0)]
    rhs = np.bincount(rows[tgt], minlength=fidx.size) / d2
    if _use_lu(fidx.size, domain.d):
        sol = spla.splu(A.tocsc()).solve(rhs)
    else:
        sol, info = spla.cg(A, rhs, rtol=1e-12, atol=0.0, maxiter=100_000)
        if info != 0:
            raise SolverError(f"harmonic solve did not converge (info={info})")
    h[fidx] = sol
    return h


def escape_probabilities(K: DomainInstance, table: GreenTable, x_points) -> np.ndarray:
    """P_x(H_K = ∞) for points x, exact through the equilibrium profile of K."""
    prof = equilibrium_measure(K, table)
    x_points = np.atleast_2d(np.asarray(x_points, dtype=np.int64))
    inK = K.contains_many(x_points)
    out = np.zeros(x_points.shape[0])
    if (~inK).any():
        out[~inK] = 1.0 - np.atleast_1d(hitting_probability_far(prof, x_points[~inK], table))
    return out


__all__ = [
    "EquilibriumProfile", "KilledGreenField", "CapacityResult", "SolverError", "BudgetError",
    "equilibrium_measure", "capacity", "capacity_mc", "capacity_window_mc", "hitting_probability_far",
    "sample_harmonic", "killed_green", "exit_distribution", "hit_before_exit_field", "green_many",
    "residual_field", "escape_probabilities",
]
