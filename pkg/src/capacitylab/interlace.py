"""Random interlacement traces in a finite window and i.i.d. Bernoulli fields."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _walks
from .green import GreenTable
from .lattice import DomainInstance, ball
from .potential import (STEP_CAP, BudgetError, EquilibriumProfile, equilibrium_measure,
                        sample_harmonic, window_walk_args)


@dataclass
class InterlacementSample:
    u: float
    window: DomainInstance
    trace: np.ndarray
    trajectory_count: int

    def __len__(self):
        return self.trace.shape[0]

    def as_domain(self) -> DomainInstance:
        return DomainInstance.from_points(self.trace, d=self.window.d)


@dataclass
class CoupledInterlacement:
    """One Poisson soup at intensity u_max; each trajectory carries a label
    uniform on [0, u_max] and I(u) keeps the trajectories with label <= u."""

    u_max: float
    window: DomainInstance
    first_label: np.ndarray  # smallest label of a trajectory visiting each window point
    trajectory_count: int

    def at(self, u: float) -> InterlacementSample:
        if u > self.u_max:
            raise ValueError("u exceeds the coupled intensity")
        keep = self.first_label <= u
        return InterlacementSample(float(u), self.window, self.window.points[keep], self.trajectory_count)


@dataclass
class BernoulliField:
    p: float
    window: DomainInstance
    occupied: np.ndarray

    def __len__(self):
        return self.occupied.shape[0]

    def as_domain(self) -> DomainInstance:
        return DomainInstance.from_points(self.occupied, d=self.window.d)


def _check_u(u):
    if not (u >= 0 and math.isfinite(u)):
        raise ValueError("intensity u must be a finite nonnegative number")


def _run(profile, table, starts, labels, rng, R_out, max_steps):
    W = profile.support
    vis = np.full(len(W), np.inf)
    if starts.shape[0]:
        code, _, _ = _walks.window_batch(
            np.ascontiguousarray(starts), np.ascontiguousarray(labels, dtype=float),
            *window_walk_args(profile, table, R_out), *W.index.arrays, False, False,
            vis, True, rng, int(max_steps))
        if code == _walks.BUDGET:
            raise BudgetError(f"interlacement walk exceeded {max_steps} steps")
    return vis


def sample_interlacement(u: float, profile: EquilibriumProfile, table: GreenTable,
                         rng: np.random.Generator, R_out: Optional[float] = None,
                         max_steps: int = STEP_CAP) -> InterlacementSample:
    """I(u) ∩ W: Poisson(u·cap W) trajectories entering W at ē_W.

    Each trajectory is parametrized from its first visit to W, so the part
    before that time contributes nothing inside W and only the forward walk
    is simulated.
    """
    _check_u(u)
    W = profile.support
    if u == 0 or profile.cap == 0:
        return InterlacementSample(float(u), W, np.empty((0, W.d), dtype=np.int64), 0)
    n = int(rng.poisson(u * profile.cap))
    starts = sample_harmonic(profile, rng, n).reshape(n, W.d)
    vis = _run(profile, table, starts, np.zeros(n), rng, R_out, max_steps)
    return InterlacementSample(float(u), W, W.points[vis <= 0.0], n)


def sample_interlacement_coupled(u_max: float, profile: EquilibriumProfile, table: GreenTable,
                                 rng: np.random.Generator, R_out: Optional[float] = None,
                                 max_steps: int = STEP_CAP) -> CoupledInterlacement:
    """Poisson thinning coupling: I(u1) ⊆ I(u2) for u1 <= u2 <= u_max."""
    _check_u(u_max)
    W = profile.support
    if u_max == 0 or profile.cap == 0:
        return CoupledInterlacement(float(u_max), W, np.full(len(W), np.inf), 0)
    n = int(rng.poisson(u_max * profile.cap))
    labels = rng.random(n) * u_max
    starts = sample_harmonic(profile, rng, n).reshape(n, W.d)
    vis = _run(profile, table, starts, labels, rng, R_out, max_steps)
    return CoupledInterlacement(float(u_max), W, vis, n)


def vacancy_window(K: DomainInstance, margin: int = 1) -> DomainInstance:
    """Origin-centred ball comfortably containing K."""
    r = math.ceil(float(np.sqrt((K.points.astype(float) ** 2).sum(axis=1).max()))) + margin
    return ball(K.d, r)


def vacancy_probability_mc(u: float, K: DomainInstance, table: GreenTable, replicas: int,
                           rng: np.random.Generator, window: Optional[EquilibriumProfile] = None,
                           R_out: Optional[float] = None, max_steps: int = STEP_CAP):
    """Monte Carlo estimate of P(I(u) ∩ K = ∅) with its binomial stderr."""
    _check_u(u)
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if len(K) == 0 or u == 0:
        return 1.0, 0.0
    if window is None:
        window = equilibrium_measure(vacancy_window(K), table)
    W = window.support
    if not W.contains_many(K.points).all():
        raise ValueError("K is not contained in the window")
    counts = rng.poisson(u * window.cap, replicas).astype(np.int64)
    keep = window.boundary_e > 0
    Sp = np.ascontiguousarray(window.boundary_points[keep])
    Scdf = np.cumsum(window.boundary_e[keep])
    Scdf /= Scdf[-1]
    vac = np.zeros(replicas, dtype=np.bool_)
    code = _walks.vacancy_batch(counts, Sp, Scdf, *window_walk_args(window, table, R_out),
                                *K.index.arrays, rng, int(max_steps), vac)
    if code == _walks.BUDGET:
        raise BudgetError(f"interlacement walk exceeded {max_steps} steps")
    p = float(vac.mean())
    return p, float(math.sqrt(p * (1 - p) / replicas))


def sample_bernoulli_field(p: float, window: DomainInstance, rng: np.random.Generator) -> BernoulliField:
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must lie in [0, 1]")
    keep = rng.random(len(window)) < p
    return BernoulliField(float(p), window, window.points[keep])


def u_to_p(u: float) -> float:
    """Occupation probability matching intensity u: p = 1 - e^{-u}."""
    return -math.expm1(-u)


def density_estimate(samples: Sequence[InterlacementSample]) -> tuple:
    """Mean occupied fraction of the window and its stderr."""
    f = np.array([len(s) / len(s.window) for s in samples])
    se = float(f.std(ddof=1) / math.sqrt(f.shape[0])) if f.shape[0] > 1 else float("nan")
    return float(f.mean()), se
