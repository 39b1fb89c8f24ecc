from functools import reduce

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doeblin.errors import BoundDoesNotVanish, DimensionMismatch, IndexOutOfRange, WindowExhausted
from doeblin.kernel import dobrushin_coefficient, tv_distance, validate_kernel
from doeblin.sequential import (
    ChainSpec,
    contraction_profile,
    fixed_lag_schedule,
    greedy_schedule,
    ledger_rows,
    limit_measure,
    one_step_bound,
    one_step_ledger,
    schedule_bound,
    schedule_coverage,
    window_kernel,
    window_matrix,
)

from conftest import REF, random_kernel

LAZY_CYCLE = [[0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]]


def periodic_chain(seed, period=None, s=None, zeros=0.5):
    rng = np.random.default_rng(seed)
    s = s or int(rng.integers(2, 6))
    period = period or int(rng.integers(1, 6))
    ks = [random_kernel(rng, s, zeros=zeros) for _ in range(period)]
    return ChainSpec(tuple(ks), np.full(s, 1 / s), mode="periodic")


def cycle_limit(chain, j):
    """Stationary vector of the one-period product ending at j (eigenvector oracle)."""
    p = chain.period
    prod = reduce(np.matmul, [chain.kernel(i).matrix for i in range(j - p, j)])
    w, v = np.linalg.eig(prod.T)
    if np.sum(np.abs(w - 1) < 1e-9) > 1:
        return None
    pi = np.real(v[:, np.argmin(np.abs(w - 1))])
    return pi / pi.sum()


def test_reference_ledger():
    chain = ChainSpec.constant(REF)
    led = one_step_ledger(chain, 0, 5)
    assert led.bound == pytest.approx(0.7**5, rel=1e-14)
    assert led.accumulated_mass == pytest.approx(1 - 0.7**5, abs=1e-14)
    assert led.consistency_error < 1e-14
    # A_{j,1} is the sub-measure gamma * m
    np.testing.assert_allclose(one_step_ledger(chain, 0, 1).accumulated_measure, [0.2, 0.1], atol=1e-15)


def test_reference_tv_rows():
    # two-state spectral form: P^n(x, .) - pi = 0.7^n (e_x - pi)
    w = window_matrix(ChainSpec.constant(REF), 0, 5)
    tv = [tv_distance(r, [2 / 3, 1 / 3]) for r in w]
    np.testing.assert_allclose(tv, [0.7**5 / 3, 2 * 0.7**5 / 3], atol=1e-15)


def test_window_matches_product():
    chain = periodic_chain(4, period=3, s=3)
    direct = chain.kernel(1).matrix @ chain.kernel(2).matrix @ chain.kernel(3).matrix @ chain.kernel(4).matrix
    np.testing.assert_allclose(window_kernel(chain, 1, 4).matrix, direct, atol=1e-15)
    np.testing.assert_allclose(window_matrix(chain, 5, 0), np.eye(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-7, 7))
def test_ledger_soundness_periodic(seed, j):
    chain = periodic_chain(seed)
    mu = cycle_limit(chain, j)
    prev_mass = 0.0
    prev_acc = None
    for n in range(1, 40):
        led = one_step_ledger(chain, j, n)
        assert led.consistency_error < 1e-12
        assert led.accumulated_mass == pytest.approx(1 - led.bound, abs=1e-12)
        assert led.accumulated_mass >= prev_mass - 1e-15
        if prev_acc is not None:
            assert np.all(led.accumulated_measure >= prev_acc - 1e-15)
        prev_mass, prev_acc = led.accumulated_mass, led.accumulated_measure
        if mu is not None:
            tv = max(tv_distance(r, mu) for r in led.window)
            assert tv <= led.bound + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_limit_measure_matches_cycle_oracle(seed):
    chain = periodic_chain(seed, zeros=0.2)
    mu_oracle = cycle_limit(chain, 3)
    try:
        mu, err, n = limit_measure(chain, 3, 1e-12)
    except BoundDoesNotVanish:
        return
    assert err <= 1e-12
    assert tv_distance(mu, mu_oracle) <= 2e-12


def test_limit_measure_reference():
    mu, err, n = limit_measure(ChainSpec.constant(REF), 0, 1e-12)
    np.testing.assert_allclose(mu, [2 / 3, 1 / 3], atol=1e-12)
    assert err <= 1e-12
    # 0.7^n <= 1e-12 first at n = 78
    assert n == 78


def test_limit_measure_without_contraction():
    with pytest.raises(BoundDoesNotVanish) as info:
        limit_measure(ChainSpec.constant(np.eye(2)), 0, 1e-6)
    assert info.value.best_bound == 1.0
    finite = ChainSpec((REF,) * 3, [0.5, 0.5], mode="finite")
    with pytest.raises(BoundDoesNotVanish):
        limit_measure(finite, 3, 1e-6)


def test_lazy_cycle_needs_blocks():
    chain = ChainSpec.constant(LAZY_CYCLE)
    assert one_step_bound(chain, 0, 10) == 1.0
    mu, err, n = limit_measure(chain, 0, 1e-10)
    np.testing.assert_allclose(mu, [1 / 3] * 3, atol=1e-10)
    prof = contraction_profile(chain, 0, 20)
    assert prof[1] == 1.0 and prof[2] == pytest.approx(0.25)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_contraction_profile_bounds_dobrushin(seed):
    chain = periodic_chain(seed)
    prof = contraction_profile(chain, -3, 30)
    assert np.all(np.diff(prof) <= 0)
    for n in range(1, 31):
        assert dobrushin_coefficient(window_kernel(chain, -3, n)) <= prof[n] + 1e-12


def test_fixed_lag_schedule_reduces_to_one_step():
    chain = periodic_chain(11, period=4, s=3, zeros=0.0)
    sched = fixed_lag_schedule(chain, 1, -30, 0)
    for depth in range(1, 12):
        n = schedule_coverage(sched, 0, depth)
        assert n == depth - 1
        assert schedule_bound(sched, 0, depth) == pytest.approx(one_step_bound(chain, 0, depth - 1) if depth > 1 else 1.0)
    assert sched.recursion_depths(0, 5) == [1] * 5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_schedule_bound_is_sound(seed, lag):
    chain = periodic_chain(seed, zeros=0.6)
    mu = cycle_limit(chain, 0)
    if mu is None:
        return
    sched = fixed_lag_schedule(chain, lag, -60, 0)
    for depth in range(1, 60 // lag):
        n = schedule_coverage(sched, 0, depth)
        b = schedule_bound(sched, 0, depth)
        for extra in (0, 1):
            if n + extra > 60:
                continue
            w = window_matrix(chain, -(n + extra), n + extra)
            assert max(tv_distance(r, mu) for r in w) <= b + 1e-12


def test_greedy_schedule_on_lazy_cycle():
    chain = ChainSpec.constant(LAZY_CYCLE)
    sched = greedy_schedule(chain, -40, 0, threshold=0.5)
    assert sched.lag(0) == 2 and sched.gammas[0] == pytest.approx(0.75)
    assert sched.window_ends(0, 4) == [0, -2, -4, -6]
    assert schedule_bound(sched, 0, 4) == pytest.approx(0.25**3)
    with pytest.raises(WindowExhausted):
        sched.window_ends(0, 30)


def test_finite_chain_windows():
    chain = ChainSpec((REF, REF), [1.0, 0.0], mode="finite")
    with pytest.raises(IndexOutOfRange):
        window_matrix(chain, 0, 3)
    with pytest.raises(IndexOutOfRange):
        chain.kernel(2)
    np.testing.assert_allclose(chain.laws(2)[2], [0.83, 0.17])


def test_dimension_chain_is_checked():
    with pytest.raises(DimensionMismatch):
        ChainSpec((REF, LAZY_CYCLE), [0.5, 0.5])
    rect = [[0.5, 0.25, 0.25], [0.0, 0.5, 0.5]]
    ChainSpec((rect, LAZY_CYCLE), [0.5, 0.5], mode="finite")
    with pytest.raises(DimensionMismatch):
        ChainSpec((rect, LAZY_CYCLE), [0.5, 0.5], mode="periodic")


def test_ledger_rows():
    rows, mu, err = ledger_rows(ChainSpec.constant(REF), 0, [1, 5])
    assert rows[1][:2] == (0, 5)
    assert rows[1][2] == pytest.approx(0.7**5)
    assert rows[1][3] == pytest.approx(2 * 0.7**5 / 3, abs=1e-12)
