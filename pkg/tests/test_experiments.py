import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from capacitylab import experiments as ex
from capacitylab.green import get_table
from capacitylab.interlace import sample_interlacement_coupled
from capacitylab.lattice import ShapeSpec, ball
from capacitylab.potential import BudgetError, capacity, equilibrium_measure
from capacitylab.rng import stream


def test_theta_values():
    assert ex.theta(3, 7) == 7
    assert ex.theta(5, 10) == 100
    assert abs(ex.theta(4, 100) - 2171.47) < 0.01
    assert ex.theta(4, 100) == 10000 / math.log(100)


def test_theta_rejects_small_N_in_d4():
    with pytest.raises(ValueError):
        ex.theta(4, 1)


@given(st.sampled_from(["RI", "RI_reduced", "Bernoulli"]), st.integers(3, 8), st.integers(2, 48),
       st.floats(1e-3, 1e3))
def test_regime_roundtrip_interlacement(kind, d, N, reg):
    drv = ex.driver_for(kind, d, N, reg)
    assert abs(ex.regime_parameter(kind, d, N, drv) - reg) <= 1e-12 * reg


@given(st.sampled_from(["RW", "Volume"]), st.integers(3, 6), st.integers(2, 14), st.floats(0.05, 100))
def test_regime_roundtrip_walks(kind, d, N, reg):
    # horizons are integers, so the regime is hit up to rounding of t
    drv = ex.driver_for(kind, d, N, reg)
    assert drv == int(drv)
    step = ex.theta(d, N) / N ** d
    assert abs(ex.regime_parameter(kind, d, N, drv) - reg) <= 0.5 * step + 1e-12 * reg


def test_ri_direct_zero_intensity():
    e = ex.ratio_ri_direct(3, "ball", 6, 0.0, 20, 1)
    assert e.mean == 0.0 and np.all(e.values == 0)


def test_ri_reduced_zero_intensity():
    e = ex.ratio_ri_reduced(3, "ball", 6, 0.0, 20, 1)
    assert e.mean == 0.0


def test_ri_reduced_infinite_intensity_limit():
    e = ex.ratio_ri_reduced(3, "ball", 6, 1e9, 30, 2)
    assert e.mean == 1.0


def test_bernoulli_zero_intensity():
    assert ex.ratio_bernoulli(3, "ball", 6, 0.0, 10, 1).mean == 0.0


def test_rw_zero_horizon(T3):
    e = ex.ratio_rw(3, 6, 0, 5, 1)
    ref = 1 / T3.g0 / capacity(ball(3, 6), T3).value
    assert np.allclose(e.values, ref, rtol=1e-6, atol=0)


@pytest.mark.slow
def test_ri_large_intensity_d3_N16():
    N = 16
    e = ex.ratio_ri_direct(3, "ball", N, 1e3 / ex.theta(3, N), 20, 3)
    assert e.mean >= 0.9


def test_ri_coupled_monotone_in_u(T3):
    D, prof = ex.domain_context(3, ShapeSpec.ball(3), 6, T3)
    for r in range(5):
        c = sample_interlacement_coupled(2.0, prof, T3, stream(7, "ratio_ri", 0, r))
        vals = [capacity(c.at(u).as_domain(), T3).value if len(c.at(u)) else 0.0 for u in (0.01, 0.1, 0.5, 2.0)]
        assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


def test_estimators_agree_small():
    N = 8
    for reg in (0.1, 1.0, 10.0):
        u = reg / ex.theta(3, N)
        a = ex.ratio_ri_direct(3, "ball", N, u, 300, 5, grid=1)
        b = ex.ratio_ri_reduced(3, "ball", N, u, 300, 5, grid=1)
        assert abs(a.mean - b.mean) <= 3 * math.hypot(a.stderr, b.stderr)


def test_estimate_invariants():
    e = ex.ratio_bernoulli(3, "ball", 8, 0.05, 40, 8)
    assert 0 <= e.mean <= 1 and e.stderr >= 0
    assert e.theta == ex.theta(3, 8)
    assert np.all((e.values >= 0) & (e.values <= 1))
    assert len(list(e.csv_rows())) == 40


def test_stderr_shrinks_with_replicas():
    se = [ex.ratio_bernoulli(3, "ball", 8, 0.02, n, 9).stderr for n in (100, 200, 400)]
    assert se[0] > se[1] > se[2]
    assert 0.4 <= se[2] / se[0] <= 0.6


def test_replicas_independent_of_workers():
    a = ex.ratio_ri_direct(3, "ball", 6, 0.2, 24, 10, workers=1)
    b = ex.ratio_ri_direct(3, "ball", 6, 0.2, 24, 10, workers=3)
    assert np.array_equal(a.values, b.values)
    c = ex.ratio_rw(3, 6, 200, 40, 10, workers=1)
    d = ex.ratio_rw(3, 6, 200, 40, 10, workers=3)
    assert np.array_equal(c.values, d.values)


def test_volume_transition_d3():
    N = 10
    lo = ex.ratio_rw(3, N, int(0.1 * N ** 3), 32, 11, volume=True)
    hi = ex.ratio_rw(3, N, 20 * N ** 3, 32, 11, volume=True)
    assert lo.mean < 0.5 and hi.mean > 0.8


@pytest.mark.slow
def test_rw_separation_d5_N10():
    N = 10
    lo = ex.ratio_rw(5, N, int(0.05 * N ** 3), 16, 12)
    hi = ex.ratio_rw(5, N, 50 * N ** 3, 16, 12)
    assert hi.mean - lo.mean >= 0.3


@pytest.mark.slow
def test_bernoulli_thresholds_d3_N16():
    N = 16
    hi = ex.ratio_bernoulli(3, "ball", N, 100 / N ** 2, 20, 13)
    lo = ex.ratio_bernoulli(3, "ball", N, 0.01 / N ** 2, 20, 13)
    assert hi.mean >= 0.8 and lo.mean <= 0.2


@pytest.mark.slow
def test_bernoulli_vs_interlacement_low_regime():
    N = 16
    u = 0.1 / ex.theta(3, N)
    k = ex.ratio_bernoulli(3, "ball", N, u, 200, 14)
    s = ex.ratio_ri_direct(3, "ball", N, u, 200, 14)
    assert k.mean >= s.mean - 2 * math.hypot(k.stderr, s.stderr)


def test_sweep_grid_and_csv():
    rec = ex.sweep_phase_transition("Bernoulli", 3, "ball", [4, 6], [0.1, 10.0], 6, 15)
    assert [g[0] for g in rec.grid] == [4, 4, 6, 6]
    for e, reg in zip(rec.estimates, rec.regimes):
        assert abs(e.regime_parameter - reg) <= 1e-12 * reg
    rows = list(rec.rows())
    assert len(rows) == 24 and all(len(r) == len(ex.CSV_FIELDS) for r in rows)
    assert rec.summary()["points"][0]["requested_regime"] == 0.1


def test_sweep_rejects_empty_grid():
    with pytest.raises(ValueError):
        ex.sweep_phase_transition("RI", 3, "ball", [], [1.0], 2, 0)


def test_desk_scale_cap():
    with pytest.raises(BudgetError):
        ex.ratio_ri_direct(3, "ball", 60, 0.1, 2, 0)


def test_lln_normalization():
    assert ex.lln_normalization(3, 100) == 0.1
    assert ex.lln_normalization(4, 100) == math.log(100) / 100
    assert ex.lln_normalization(6, 100) == 0.01


def test_lln_budget():
    with pytest.raises(BudgetError):
        ex.lln_capacity(5, [5 * 10 ** 6], 1, 0)


@pytest.mark.slow
def test_lln_d3_distributional_stability():
    from scipy.stats import ks_2samp
    est = ex.lln_capacity(3, [10 ** 4, 4 * 10 ** 4], 100, 16)
    a, b = est.normalized_values
    assert ks_2samp(a, b).pvalue > 1e-3


def test_lln_small_run_methods():
    est = ex.lln_capacity(5, [2000], 3, 17)
    assert est.alpha_estimate == pytest.approx(est.means()[0])
    assert all(m in ("exact", "mc_escape") for m in est.methods[0])
