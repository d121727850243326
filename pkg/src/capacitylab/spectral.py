"""Principal eigenpairs of killed transition kernels and obstacle gaps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit

from .green import GreenTable
from .lattice import DomainInstance
from .potential import capacity

POWER_LIMIT = 6000
ITER_CAP = 10 ** 6
DEFAULT_TOL = 1e-12


class EigenError(RuntimeError):
    pass


@dataclass(frozen=True)
class EigenPair:
    domain: DomainInstance
    lam: float
    phi: np.ndarray
    residual: float
    lam2: Optional[float] = None

    def sup(self) -> float:
        return float(self.phi.max())


@dataclass(frozen=True)
class SpectralGap:
    base_lambda: float
    obstructed_lambda: float
    gap: float
    obstacle_capacity: float
    component_size: int


def transition_matrix(domain: DomainInstance) -> sp.csr_matrix:
    """P_A(x,y) = 1/(2d) for nearest neighbors x, y both in A."""
    n = len(domain)
    nbr = domain.nbr
    rows = np.repeat(np.arange(n), nbr.shape[1])
    cols = nbr.ravel().astype(np.int64)
    ok = cols >= 0
    return sp.csr_matrix((np.full(ok.sum(), 1.0 / nbr.shape[1]), (rows[ok], cols[ok])), shape=(n, n))


@njit(cache=True)
def _apply(nbr, v, out):
    k = nbr.shape[1]
    inv = 1.0 / k
    for x in range(nbr.shape[0]):
        s = 0.0
        for j in range(k):
            y = nbr[x, j]
            if y >= 0:
                s += v[y]
        out[x] = s * inv


@njit(cache=True)
def _power(nbr, v, tol, max_iter, defl, check_every):
    """Lazy power iteration v <- (v + P v)/2 with l1 renormalization and
    optional deflation of the unit vector defl. lam is the Rayleigh quotient
    of P itself. Returns (lam, v, residual, iters)."""
    n = v.shape[0]
    pv = np.empty(n)
    lam = 0.0
    res = np.inf
    it = 0
    has_defl = defl.shape[0] == n
    while it < max_iter:
        _apply(nbr, v, pv)
        if has_defl:
            c = 0.0
            for x in range(n):
                c += pv[x] * defl[x]
            for x in range(n):
                pv[x] -= c * defl[x]
        it += 1
        if it % check_every == 0:
            num = 0.0
            den = 0.0
            for x in range(n):
                num += v[x] * pv[x]
                den += v[x] * v[x]
            lam = num / den
            res = 0.0
            for x in range(n):
                r = abs(pv[x] - lam * v[x])
                if r > res:
                    res = r
            s = 0.0
            for x in range(n):
                s += abs(v[x])
            res /= s
            if res <= tol:
                return lam, v, res, it
        s = 0.0
        for x in range(n):
            v[x] = 0.5 * (v[x] + pv[x])
            s += abs(v[x])
        if s == 0.0:
            return 0.0, v, 0.0, it
        for x in range(n):
            v[x] /= s
    return lam, v, res, it


def is_connected(domain: DomainInstance, root_index: int = 0) -> bool:
    return component_indices(domain, root_index).shape[0] == len(domain)


def component_indices(domain: DomainInstance, root_index: int, blocked: Optional[np.ndarray] = None) -> np.ndarray:
    """Indices reachable from root by nearest-neighbor moves avoiding `blocked`."""
    n = len(domain)
    blocked = np.zeros(n, dtype=bool) if blocked is None else blocked
    return np.flatnonzero(_bfs(domain.nbr, int(root_index), blocked))


@njit(cache=True)
def _bfs(nbr, root, blocked):
    n = nbr.shape[0]
    seen = np.zeros(n, dtype=np.bool_)
    queue = np.empty(n, dtype=np.int64)
    seen[root] = True
    queue[0] = root
    head, tail = 0, 1
    while head < tail:
        x = queue[head]
        head += 1
        for j in range(nbr.shape[1]):
            y = nbr[x, j]
            if y >= 0 and not seen[y] and not blocked[y]:
                seen[y] = True
                queue[tail] = y
                tail += 1
    return seen


def _residual(domain, lam, phi):
    pv = np.empty_like(phi)
    _apply(domain.nbr, phi, pv)
    return float(np.max(np.abs(pv - lam * phi)))


def _root_index(domain: DomainInstance, root=None) -> int:
    if root is None:
        k = domain.index_of(np.zeros(domain.d, dtype=np.int64))
        return k if k >= 0 else 0
    k = domain.index_of(root)
    if k < 0:
        raise ValueError("root outside the domain")
    return k


def principal_eigenpair(domain: DomainInstance, tol: float = DEFAULT_TOL, method: str = "auto",
                        with_second: bool = False, root=None) -> EigenPair:
    """(λ_A, Φ_A) with Φ_A > 0 and Σ Φ_A = 1."""
    n = len(domain)
    if n == 0:
        raise ValueError("empty domain")
    if not is_connected(domain, _root_index(domain, root)):
        raise ValueError("domain is not connected")
    if n == 1:
        return EigenPair(domain, 0.0, np.ones(1), 0.0, None)
    if method == "auto":
        method = "power" if n <= POWER_LIMIT else "lanczos"
    lam2 = None
    if method == "power":
        v = np.full(n, 1.0 / n)
        lz, v, res, it = _power(domain.nbr, v, tol / 4, ITER_CAP, np.empty(0), 16)
        lam = lz
        phi = v / v.sum()
        if not res <= tol / 4:
            raise EigenError(f"power iteration stalled at residual {res:.2e}")
    elif method == "lanczos":
        P = transition_matrix(domain)
        k = 2 if n > 2 else 1
        vals, vecs = spla.eigsh(P, k=k, which="LA", v0=np.ones(n), tol=0, maxiter=100_000)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        lam = float(vals[0])
        phi = vecs[:, 0]
        phi = phi * np.sign(phi.sum())
        phi = np.maximum(phi, 0.0)
        phi = phi / phi.sum()
        if k == 2:
            lam2 = float(vals[1])
    else:
        raise ValueError(f"unknown eigen method {method!r}")
    res = _residual(domain, lam, phi)
    if res > tol:
        # polish with a few lazy power steps from the current vector
        v = phi.copy()
        lz, v, res2, _ = _power(domain.nbr, v, tol / 4, 200_000, np.empty(0), 8)
        lam, phi = lz, v / v.sum()
        res = _residual(domain, lam, phi)
        if res > tol:
            raise EigenError(f"eigen residual {res:.2e} above tolerance {tol:.0e}")
    pair = EigenPair(domain, float(lam), phi, res, lam2)
    if with_second and lam2 is None:
        pair = EigenPair(domain, pair.lam, phi, res, second_eigenvalue(domain, pair, tol))
    return pair


def second_eigenvalue(domain: DomainInstance, principal: EigenPair, tol: float = DEFAULT_TOL,
                      method: str = "auto") -> float:
    """Largest eigenvalue of P_A below λ_A, by deflated lazy power iteration
    (the kernel is symmetric, so the Euclidean projector is exact)."""
    n = len(domain)
    if n <= 1:
        return 0.0
    if principal.residual > tol:
        raise ValueError("principal pair not converged")
    if method == "auto":
        method = "power" if n <= POWER_LIMIT else "lanczos"
    if method == "lanczos":
        if principal.lam2 is not None:
            return principal.lam2
        P = transition_matrix(domain)
        vals = spla.eigsh(P, k=2, which="LA", v0=np.ones(n), tol=0, return_eigenvectors=False,
                          maxiter=100_000)
        return float(np.sort(vals)[0])
    u = principal.phi / np.linalg.norm(principal.phi)
    rng = np.random.default_rng(12345)
    v = rng.random(n)
    v -= u * (u @ v)
    v /= np.abs(v).sum()
    lz, v, res, _ = _power(domain.nbr, v, tol, ITER_CAP, np.ascontiguousarray(u), 16)
    if not res <= tol:
        raise EigenError(f"deflated power iteration stalled at residual {res:.2e}")
    return float(lz)


def survival_spectral(pair: EigenPair, x, T: int) -> float:
    """λ^T Φ(x) / Σ_z Φ(z)^2."""
    k = pair.domain.index_of(x)
    if k < 0:
        return 0.0
    p = float(pair.phi[k])
    if p <= 0.0:
        return 0.0
    s2 = math.fsum((pair.phi ** 2).tolist())
    if T == 0:
        return p / s2
    if pair.lam <= 0.0:
        return 0.0
    return math.exp(T * math.log(pair.lam) + math.log(p) - math.log(s2))


def component_around(domain: DomainInstance, obstacle, root=None) -> DomainInstance:
    """Connected component of domain minus obstacle containing root (default 0)."""
    pts = getattr(obstacle, "visited", obstacle)
    pts = np.asarray(pts, dtype=np.int64).reshape(-1, domain.d)
    blocked = np.zeros(len(domain), dtype=bool)
    if pts.shape[0]:
        idx = domain.index.find(pts)
        blocked[idx[idx >= 0]] = True
    r = _root_index(domain, root)
    if blocked[r]:
        raise ValueError("root absorbed by the obstacle")
    keep = component_indices(domain, r, blocked)
    if keep.shape[0] == len(domain):
        return domain
    return DomainInstance(domain.points[keep])


def obstacle_gap(domain: DomainInstance, obstacle, table: GreenTable, root=None,
                 tol: float = DEFAULT_TOL, base: Optional[EigenPair] = None,
                 rng: Optional[np.random.Generator] = None) -> SpectralGap:
    """λ(domain) - λ(component of domain minus obstacle around root)."""
    base = principal_eigenpair(domain, tol) if base is None else base
    K = component_around(domain, obstacle, root)
    if K is domain:
        lamK = base.lam
    else:
        lamK = principal_eigenpair(K, tol).lam
    pts = getattr(obstacle, "visited", obstacle)
    obst = DomainInstance.from_points(np.asarray(pts, dtype=np.int64).reshape(-1, domain.d), d=domain.d)
    cap = capacity(obst, table, rng=rng).value if len(obst) else 0.0
    return SpectralGap(base.lam, lamK, max(base.lam - lamK, 0.0), cap, len(K))
