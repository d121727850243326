import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ks_2samp

from capacitylab.experiments import trace_capacity
from capacitylab.lattice import DomainInstance, ball, neighbors, points_of, shrink
from capacitylab.potential import capacity, equilibrium_measure, sample_harmonic
from capacitylab.rng import stream
from capacitylab.spectral import principal_eigenpair
from capacitylab.walker import (annulus_trace, confined_sampler_build, confined_walk, confined_walks,
                                excursion_stats, hit_trace_before_exit, hit_trace_field, range_in_window,
                                srw_range)

from oracles import confined_paths, naive_ball_visits, path_survival

ORIGIN = np.zeros(3, dtype=np.int64)


# free ranges ------------------------------------------------------------------

def test_range_zero_steps():
    tr = srw_range([4, -1, 2], 0, rng=stream(0, "range"))
    assert tr.visited.tolist() == [[4, -1, 2]]


def test_range_fraction_d3():
    fr = np.array([len(srw_range(ORIGIN, 10 ** 4, rng=stream(1, "range", 0, r))) / 10 ** 4 for r in range(100)])
    assert np.mean((fr > 0.5) & (fr < 0.8)) >= 0.99


def test_range_window_restriction():
    W = ball(3, 3)
    tr = srw_range(ORIGIN, 500, window=W, rng=stream(2, "range"))
    assert W.contains_many(tr.visited).all()
    assert W.contains(tr.start) and any((tr.visited == 0).all(axis=1))


def test_range_deterministic():
    a = srw_range(ORIGIN, 1000, rng=stream(3, "range")).visited
    b = srw_range(ORIGIN, 1000, rng=stream(3, "range")).visited
    assert np.array_equal(a, b)


# walks in a window with teleportation --------------------------------------------

def test_window_singleton_hitting(T3):
    prof = equilibrium_measure(points_of([[0, 0, 0]], 3), T3)
    rng = stream(9, "range")
    n = 10 ** 5
    empty = np.mean([len(range_in_window([10, 0, 0], prof, T3, rng=rng)) == 0 for _ in range(n)])
    target = 1 - T3([10, 0, 0])[0] / T3.g0
    assert abs(empty - target) <= 3 * math.sqrt(target * (1 - target) / n)


def test_window_trace_contained(T3):
    prof = equilibrium_measure(ball(3, 3), T3)
    for r in range(50):
        tr = range_in_window([3, 0, 0], prof, T3, rng=stream(4, "range", 0, r))
        assert prof.support.contains_many(tr.visited).all()
        assert any((tr.visited == [3, 0, 0]).all(axis=1))


def test_window_rejects_small_teleport_radius(T3):
    prof = equilibrium_measure(ball(3, 3), T3)
    with pytest.raises(ValueError):
        range_in_window([3, 0, 0], prof, T3, R_out=10.0, rng=stream(0))


@pytest.mark.slow
@pytest.mark.parametrize("N", [2, 4])
def test_teleport_matches_naive_walk(T3, N):
    # the plain walk is stopped at distance 300, where the chance of another
    # visit to the window is below 1% (N=4) and 0.6% (N=2)
    prof = equilibrium_measure(ball(3, N), T3)
    naive = naive_ball_visits([N, 0, 0], N, 300, 10 ** 4, 7)
    rng = stream(8, "range", N)
    tele = np.array([len(range_in_window([N, 0, 0], prof, T3, rng=rng)) for _ in range(10 ** 4)])
    assert ks_2samp(naive, tele).pvalue > 1e-3


@pytest.mark.slow
def test_window_capacity_scale(T3):
    N = 30
    prof = equilibrium_measure(ball(3, N), T3)
    v = []
    for r in range(200):
        rng = stream(10, "range", 0, r)
        x = sample_harmonic(prof, rng)
        tr = range_in_window(x, prof, T3, rng=rng)
        v.append(trace_capacity(tr.visited, 3, T3, rng, window=prof)[0] / N)
    v = np.array(v)
    assert np.mean((v >= 0.05) & (v <= 20)) > 0.9


# confined sampler ---------------------------------------------------------------

def test_survival_singleton():
    S = confined_sampler_build(points_of([[0, 0, 0]], 3), 1)
    assert S.survival(ORIGIN) == 0.0


def test_survival_vanishing_before_horizon():
    S = confined_sampler_build(points_of([[0, 0, 0], [5, 0, 0]], 3), 6)
    assert S.survival(ORIGIN) == 0.0 and S.log_survival(ORIGIN, 3) == -math.inf
    assert S.survival(ORIGIN, 0) == 1.0


def test_survival_unit_ball():
    S = confined_sampler_build(ball(3, 1), 1)
    assert S.survival(ORIGIN) == 1.0
    assert abs(S.survival([1, 0, 0]) - 1 / 6) < 1e-15


small_sets = st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 1)),
                      min_size=1, max_size=9, unique=True)


@given(small_sets, st.integers(1, 6))
def test_survival_matches_path_enumeration(rows, s):
    D = DomainInstance.from_points(rows, d=3)
    exact = path_survival(D.points.tolist(), s)
    S = confined_sampler_build(D, s)
    for x, q in exact.items():
        got = S.survival(list(x))
        assert abs(got - float(q)) <= 1e-13 * max(float(q), 1e-300) or (q == 0 and got == 0)


@pytest.mark.slow
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 1)),
                min_size=1, max_size=9, unique=True))
def test_survival_matches_path_enumeration_s8(rows):
    D = DomainInstance.from_points(rows, d=3)
    exact = path_survival(D.points.tolist(), 8)
    S = confined_sampler_build(D, 8)
    for x, q in exact.items():
        got = S.survival(list(x))
        assert abs(got - float(q)) <= 1e-13 * max(float(q), 1e-300) or (q == 0 and got == 0)


def test_survival_monotone_and_bounded():
    S = confined_sampler_build(ball(3, 4), 200, checkpoint_stride=7)
    prev = np.ones(len(S.domain))
    for s in range(0, 201, 9):
        q = np.array([S.survival(x, s) for x in S.domain.points])
        assert np.all(q <= prev * (1 + 1e-12)) and np.all(q >= 0)
        assert np.all(q[~S.domain.boundary_mask] > 0)
        prev = q


def test_survival_rate_matches_eigenvalue():
    N = 20
    B = ball(3, N)
    lam = principal_eigenpair(B).lam
    t = int(10 * N * N * math.log(N))
    S = confined_sampler_build(B, t)
    assert abs(math.exp(S.log_survival(ORIGIN) / t) - lam) <= 1e-4


def _path_tv(domain, start, t, n, seed):
    paths = confined_paths(domain.points.tolist(), start, t)
    S = confined_sampler_build(domain, t)
    b = confined_walks(S, start, n, stream(seed, "confine"), record_path=True)
    pts = domain.points
    got = Counter(tuple(map(tuple, pts[b.paths[r]].tolist())) for r in range(n))
    assert set(got) <= set(paths)
    p = 1 / len(paths)
    return 0.5 * sum(abs(got.get(q, 0) / n - p) for q in paths)


def test_confined_paths_unit_ball_t2():
    assert _path_tv(ball(3, 1), [0, 0, 0], 2, 10 ** 5, 21) <= 0.02


def test_confined_path_never_exits():
    B = ball(3, 3)
    S = confined_sampler_build(B, 300)
    b = confined_walks(S, [2, 1, 0], 50, stream(22, "confine"), record_path=True)
    assert (b.paths >= 0).all()
    steps = np.abs(np.diff(B.points[b.paths], axis=1)).sum(axis=2)
    assert (steps == 1).all()


@given(small_sets, st.integers(1, 12), st.integers(0, 2 ** 32 - 1))
def test_confined_paths_stay_inside_random_domains(rows, t, seed):
    D = DomainInstance.from_points(rows, d=3)
    S = confined_sampler_build(D, t)
    starts = [x for x in D.points if S.log_survival(x) > -math.inf]
    if not starts:
        return
    b = confined_walks(S, starts[0], 5, stream(seed, "confine"), record_path=True)
    path = D.points[b.paths]
    assert D.contains_many(path.reshape(-1, 3)).all()
    assert (np.abs(np.diff(path, axis=1)).sum(axis=2) == 1).all()


def test_confined_walk_unsurvivable_start():
    S = confined_sampler_build(points_of([[0, 0, 0]], 3), 1)
    with pytest.raises(ValueError):
        confined_walk(S, ORIGIN, stream(0))


def test_confined_long_horizon_no_underflow():
    S = confined_sampler_build(ball(3, 3), 30000)
    assert S.survival(ORIGIN) == 0.0 and S.log_survival(ORIGIN) > -math.inf
    p, tr = confined_walk(S, ORIGIN, stream(23, "confine"))
    assert p.shape == (30001, 3) and ball(3, 3).contains_many(p).all()


def test_confined_occupation_matches_eigenvector():
    N = 12
    B = ball(3, N)
    phi = principal_eigenpair(B).phi
    S = confined_sampler_build(B, 50 * N * N)
    b = confined_walks(S, ORIGIN, 40, stream(24, "confine"), record_path=True)
    occ = np.bincount(b.paths.ravel(), minlength=len(B)).astype(float)
    assert np.corrcoef(occ, phi ** 2)[0, 1] >= 0.95


def test_confined_deterministic():
    S = confined_sampler_build(ball(3, 4), 100)
    a = confined_walks(S, ORIGIN, 8, stream(5, "confine"), record_path=True).paths
    b = confined_walks(S, ORIGIN, 8, stream(5, "confine"), record_path=True).paths
    assert np.array_equal(a, b)


def test_confinement_capacity_bound():
    grid = [(8, 64), (8, 512), (12, 288), (12, 2304)]
    T = __import__("capacitylab.green", fromlist=["get_table"]).get_table(3)
    ratio = []
    for N, t in grid:
        S = confined_sampler_build(ball(3, N), t)
        b = confined_walks(S, ORIGIN, 200, stream(3, "confine", N, t))
        m = np.mean([capacity(b.trace(r).as_domain(), T).value for r in range(200)])
        ratio.append(m / ((t / N ** 2) * N + min(N, math.sqrt(t))))
    C = ratio[0]
    assert all(r <= C for r in ratio[1:])


# excursions ---------------------------------------------------------------------

EPS, DELTA = Fraction(3, 20), Fraction(1, 20)


def test_excursions_inner_path():
    st_ = excursion_stats(np.zeros((50, 3), dtype=np.int64), 16, EPS, DELTA)
    assert st_.count == 0


def test_excursion_times_ordered():
    N = 16
    S = confined_sampler_build(ball(3, N), 20 * N * N)
    p, _ = confined_walk(S, ORIGIN, stream(30, "confine"))
    e = excursion_stats(p, N, EPS, DELTA)
    # τ^out_0 = 0 is implicit; entries and exits alternate after it
    assert len(e.in_times) in (e.count, e.count + 1)
    times = [0]
    for k in range(len(e.in_times)):
        times.append(int(e.in_times[k]))
        if k < len(e.out_times):
            times.append(int(e.out_times[k]))
    assert all(x < y for x, y in zip(times, times[1:]))
    assert e.count == len(e.out_times) and e.count > 0


def test_excursion_shell_validation():
    with pytest.raises(ValueError):
        excursion_stats(np.zeros((5, 3), dtype=np.int64), 16, Fraction(1, 20), Fraction(3, 20))


def _median_count(N, t, seed):
    S = confined_sampler_build(ball(3, N), t)
    b = confined_walks(S, ORIGIN, 200, stream(seed, "confine", t), record_path=True)
    return np.array([excursion_stats(b.path_points(r), N, EPS, DELTA).count for r in range(200)])


def test_excursion_count_linear_in_time():
    N = 16
    m1 = np.median(_median_count(N, 40 * N * N, 1))
    m2 = np.median(_median_count(N, 80 * N * N, 1))
    assert 0.5 <= (m2 / m1) / 2 <= 2


def test_excursion_count_short_horizon():
    N = 16
    c = _median_count(N, N * N - 1, 2)
    assert np.mean(c <= 1) >= 0.9


# hitting a trace before leaving ----------------------------------------------------

def test_hit_trace_neighbors_and_empty():
    B = ball(3, 5)
    x = np.array([1, 1, 0])
    assert hit_trace_before_exit(B, neighbors(x), x) == 1.0
    assert hit_trace_before_exit(B, np.empty((0, 3), dtype=np.int64), x) == 0.0


def test_hit_trace_field_bounds():
    B = ball(3, 5)
    h = hit_trace_field(B, [[0, 0, 0], [1, 0, 0]])
    assert np.all(h >= 0) and np.all(h <= 1 + 1e-12)
    assert h[B.index_of([0, 0, 0])] == 1.0
    assert np.all(h[B.boundary_mask] == 0)


@pytest.mark.slow
def test_hit_trace_pilot_stability(T3):
    N = 16
    B = ball(3, N)
    prof = equilibrium_measure(B, T3)
    idx = B.index.find(shrink(B, 1 - 3 * EPS).points)
    norm = []
    for r in range(20):
        tr = annulus_trace(prof, N, EPS, T3, stream(5, "obstacle", 0, r))
        assert B.contains_many(tr.visited).all()
        m = hit_trace_field(B, tr)[idx].min()
        # η ε = cap / N for this trace
        norm.append(m / (capacity(tr.as_domain(), T3).value / N))
    norm = np.array(norm)
    c = np.median(norm)
    assert np.all(norm > 0)
    assert np.all(norm >= 0.5 * c)
    a, b = np.median(norm[:10]), np.median(norm[10:])
    assert abs(a - b) <= 0.3 * c
