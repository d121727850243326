import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from capacitylab.green import get_table
from capacitylab.interlace import (density_estimate, sample_bernoulli_field, sample_interlacement,
                                   sample_interlacement_coupled, u_to_p, vacancy_probability_mc, vacancy_window)
from capacitylab.lattice import ball, points_of
from capacitylab.potential import capacity, equilibrium_measure
from capacitylab.rng import stream


def test_zero_intensity(T3):
    prof = equilibrium_measure(ball(3, 4), T3)
    for r in range(5):
        s = sample_interlacement(0.0, prof, T3, stream(r, "interlace"))
        assert s.trajectory_count == 0 and len(s) == 0


def test_negative_intensity_rejected(T3):
    prof = equilibrium_measure(ball(3, 2), T3)
    with pytest.raises(ValueError):
        sample_interlacement(-1.0, prof, T3, stream(0))


def test_trace_inside_window_and_counts(T3):
    prof = equilibrium_measure(ball(3, 4), T3)
    u = 0.3
    counts = []
    for r in range(400):
        s = sample_interlacement(u, prof, T3, stream(1, "interlace", 0, r))
        assert prof.support.contains_many(s.trace).all()
        if s.trajectory_count == 0:
            assert len(s) == 0
        counts.append(s.trajectory_count)
    m = u * prof.cap
    assert abs(np.mean(counts) - m) <= 4 * math.sqrt(m / 400)


@pytest.mark.slow
def test_singleton_vacancy_through_full_sampler(T3):
    prof = equilibrium_measure(ball(3, 6), T3)
    n = 10 ** 5
    vac = np.fromiter((not (sample_interlacement(1.0, prof, T3, stream(2, "interlace", 0, r)).trace == 0)
                       .all(axis=1).any() for r in range(n)), dtype=bool, count=n)
    p = vac.mean()
    target = math.exp(-1 / T3.g0)
    assert abs(target - 0.5171) < 1e-4
    assert abs(p - target) <= 3 * math.sqrt(target * (1 - target) / n)


def test_coupled_monotone(T3):
    prof = equilibrium_measure(ball(3, 4), T3)
    c = sample_interlacement_coupled(3.0, prof, T3, stream(3, "interlace"))
    prev = set()
    for u in (0.1, 0.5, 1.0, 2.0, 3.0):
        cur = set(map(tuple, c.at(u).trace.tolist()))
        assert prev <= cur
        prev = cur
    with pytest.raises(ValueError):
        c.at(4.0)


def test_vacancy_zero_intensity_and_empty_set(T3):
    assert vacancy_probability_mc(0.0, ball(3, 2), T3, 10, stream(0))[0] == 1.0
    assert vacancy_probability_mc(1.0, points_of([], 3), T3, 10, stream(0))[0] == 1.0


@pytest.mark.parametrize("d,rows,u", [(3, [[0, 0, 0], [1, 0, 0]], 1.0), (5, None, 2.0)])
def test_vacancy_law(d, rows, u):
    T = get_table(d)
    K = points_of(rows, d) if rows is not None else ball(d, 3)
    cap = capacity(K, T).value
    est, se = vacancy_probability_mc(u, K, T, 10 ** 5, stream(4, "vacancy", d))
    target = math.exp(-u * cap)
    # binomial stderr at the oracle value (the estimate's own stderr is 0 when p̂ is 0 or 1)
    assert abs(est - target) <= 3 * math.sqrt(target * (1 - target) / 10 ** 5)


def test_vacancy_window_contains_set():
    K = points_of([[0, 0, 0], [2, 1, 0]], 3)
    W = vacancy_window(K)
    assert W.contains_many(K.points).all()


def test_vacancy_rejects_outside_window(T3):
    prof = equilibrium_measure(ball(3, 2), T3)
    with pytest.raises(ValueError):
        vacancy_probability_mc(1.0, points_of([[5, 0, 0]], 3), T3, 10, stream(0), window=prof)


def test_bernoulli_extremes():
    W = ball(3, 5)
    assert len(sample_bernoulli_field(0.0, W, stream(0))) == 0
    assert len(sample_bernoulli_field(1.0, W, stream(0))) == len(W)


def test_bernoulli_binomial_bounds():
    W = ball(3, 10)
    f = sample_bernoulli_field(0.3, W, stream(5, "bernoulli"))
    n = len(W)
    assert W.contains_many(f.occupied).all()
    assert abs(len(f) - 0.3 * n) <= 4 * math.sqrt(n * 0.3 * 0.7)


@given(st.floats(0, 50))
def test_u_to_p(u):
    assert abs(u_to_p(u) - (1 - math.exp(-u))) <= 1e-15
    assert 0 <= u_to_p(u) <= 1


def test_density_estimate_small(T3):
    prof = equilibrium_measure(ball(3, 6), T3)
    s = [sample_interlacement(0.5, prof, T3, stream(6, "interlace", 0, r)) for r in range(50)]
    m, se = density_estimate(s)
    target = 1 - math.exp(-0.5 / T3.g0)
    assert abs(m - target) <= 4 * se
