import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doeblin.errors import (
    DegenerateVariance,
    InsufficientPastDepth,
    NotCrossed,
    WindowUnavailable,
)
from doeblin.kernel import tv_distance
from doeblin.random_env import (
    Environment,
    EnvironmentModel,
    GoodSetSpec,
    RandomKernelAssignment,
    RateRegime,
    ensemble_reports,
    equivariance_residual,
    equivariance_residuals,
    equivariant_measure,
    fit_exponential_decay,
    forward_contraction,
    hit_count_bound,
    hit_count_series,
    mixing_tail_check,
    mixing_time,
    mixing_times,
    pair_assignment,
    quenched_clt_check,
    quenched_variance,
    rate_constant,
    sample_ensemble,
    sample_environment,
    skew_correlation,
)

from conftest import REF, random_kernel

ALPHA = ("g", "b")
KI = RandomKernelAssignment.from_dict({"g": REF, "b": np.eye(2)}, [1.0, 0.0])
GOOD = GoodSetSpec.from_symbols(KI, ["g"], 0.3, 1)
HALF = EnvironmentModel.iid({"g": 0.5, "b": 0.5})
ALL_GOOD = EnvironmentModel.iid({"g": 1.0, "b": 0.0})
ALL_BAD = EnvironmentModel.iid({"g": 0.0, "b": 1.0})


def env_from(symbols, first=0):
    return Environment(np.array([ALPHA.index(c) for c in symbols]), first, ALPHA)


def backward_oracle(env, asg, t, depth):
    m = np.eye(asg.states)
    for k in range(t - 1, t - 1 - depth, -1):
        m = asg.kernels[env.code(k)].matrix @ m
    return m.mean(axis=0)


# ---------------------------------------------------------------- sampling


def test_degenerate_law_gives_constant_environment():
    env = sample_environment(ALL_GOOD, 50, 20, seed=1)
    assert env.first == -20 and env.last == 50
    assert set(env.symbols(-20, 51)) == {"g"}


def test_bernoulli_half_concentrates():
    env = sample_environment(HALF, 10**4, 0, seed=3)
    frac = np.mean(env.window(0, 10**4 + 1) == 0)
    assert abs(frac - 0.5) <= 4 * 0.5 / 100


def test_markov_identity_base_stays_put():
    model = EnvironmentModel(ALPHA, "markov", kernel=np.eye(2), probs=[0.5, 0.5])
    env = sample_environment(model, 30, 5, seed=0, start_symbol="g")
    assert set(env.symbols(-5, 31)) == {"g"}


def test_markov_base_is_stationary():
    model = EnvironmentModel(ALPHA, "markov", kernel=[[0.7, 0.3], [0.6, 0.4]])
    np.testing.assert_allclose(model.stationary_law(), [2 / 3, 1 / 3], atol=1e-12)
    codes, _ = sample_ensemble(model, 2000, 0, 0, seed=4)
    assert abs(np.mean(codes[:, 0] == 0) - 2 / 3) < 4 * math.sqrt(2 / 9 / 2000)


def test_sampling_is_deterministic():
    a = sample_environment(HALF, 100, 10, seed=9, index=3)
    b = sample_environment(HALF, 100, 10, seed=9, index=3)
    c = sample_environment(HALF, 100, 10, seed=9, index=4)
    np.testing.assert_array_equal(a.codes, b.codes)
    assert not np.array_equal(a.codes, c.codes)


# ---------------------------------------------------------------- hit counts


def test_hit_count_examples():
    env = sample_environment(ALL_GOOD, 20, 5, seed=0)
    count, bound = hit_count_bound(env, GOOD, 6)
    assert count == 5 and bound == pytest.approx(0.7**5, rel=1e-14)
    bad = sample_environment(ALL_BAD, 20, 5, seed=0)
    assert hit_count_bound(bad, GOOD, 6) == (0, 1.0)
    alt = env_from("gb" * 10, first=-4)
    assert {hit_count_bound(alt, GOOD, 10)[0], hit_count_bound(alt.shift(1), GOOD, 10)[0]} == {4, 5}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(0, 60))
def test_hit_counts_match_direct_count(seed, M, n):
    env = sample_environment(HALF, 80, 10, seed)
    good = GoodSetSpec.from_symbols(KI, ["g"], 0.3, M)
    series = hit_count_series(env.codes, env.first, good, n)
    direct = sum(env.code(j * M) == 0 for j in range(1, n // M))
    assert series[-1] == direct
    assert np.all(np.diff(series) >= 0)


def test_hit_count_window_unavailable():
    env = sample_environment(HALF, 5, 0, seed=0)
    with pytest.raises(WindowUnavailable):
        hit_count_bound(env, GOOD, 40)


def test_good_set_rejects_weak_symbols():
    with pytest.raises(ValueError):
        GoodSetSpec.from_symbols(KI, ["b"], 0.3)
    with pytest.raises(ValueError):
        GoodSetSpec(1.5, 1, lambda w: True)


def test_certified_good_set_uses_backward_windows():
    lazy = [[0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]]
    asg = RandomKernelAssignment.from_dict({"g": lazy, "b": np.eye(3)})
    good = GoodSetSpec.certified(asg, 0.7, M=2)
    w = np.array([[0, 0, 0, 0, 0], [1, 0, 0, 1, 1], [1, 1, 0, 0, 0]])
    # window omega_{t-2..t+2}; backward pairs (t-2, t-1) certify 0.75 only if both are "g"
    np.testing.assert_array_equal(good.membership(w), [True, False, False])


# ---------------------------------------------------------------- equivariant measures


def test_equivariant_measure_shared_stationary_vector():
    env = sample_environment(HALF, 10, 2000, seed=5)
    mu, err, depth = equivariant_measure(env, KI, 0)
    assert err <= 1e-14
    assert tv_distance(mu, [2 / 3, 1 / 3]) <= err + 1e-15


def test_equivariant_measure_rank_one():
    uni = np.full((3, 3), 1 / 3)
    asg = RandomKernelAssignment.from_dict({"g": uni, "b": uni})
    env = sample_environment(HALF, 5, 5, seed=0)
    mu, err, depth = equivariant_measure(env, asg, 0)
    assert depth == 1 and err == 0.0
    np.testing.assert_allclose(mu, [1 / 3] * 3)


def test_equivariant_measure_needs_mixing():
    env = sample_environment(ALL_BAD, 5, 200, seed=0)
    with pytest.raises(InsufficientPastDepth):
        equivariant_measure(env, KI, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_assignment_soundness(seed):
    rng = np.random.default_rng(seed)
    s = int(rng.integers(2, 5))
    asg = RandomKernelAssignment(ALPHA, (random_kernel(rng, s), np.eye(s)))
    delta = asg.certificates[0].gamma
    if delta < 0.05 or delta >= 1:
        return
    good = GoodSetSpec.from_symbols(asg, ["g"], delta, 1)
    env = sample_environment(EnvironmentModel.iid({"g": 0.6, "b": 0.4}), 80, 3000, seed)
    mu, err, depth = equivariant_measure(env, asg, 0)
    assert tv_distance(mu, backward_oracle(env, asg, 0, 2500)) <= err + 1e-13
    rep = forward_contraction(env, asg, good, 60)
    assert rep.sound()
    resid, allowed = equivariance_residual(env, asg, 3)
    assert resid <= allowed + 1e-15


def test_shift_consistency():
    env = sample_environment(HALF, 60, 500, seed=12)
    rep = forward_contraction(env, KI, GOOD, 40)
    shifted = forward_contraction(env.shift(1), KI, GOOD, 39)
    mu1 = rep.mu0 @ KI.kernels[env.code(0)].matrix
    assert tv_distance(shifted.mu0, mu1) <= rep.mu_error + shifted.mu_error
    # with M = 1 the shifted orbit misses exactly the visit at time 1
    hit1 = int(env.code(1) == 0)
    np.testing.assert_array_equal(shifted.hit_counts[1:], rep.hit_counts[2:] - hit1 * (np.arange(2, 41) >= 2))


def test_batched_residuals_match_single():
    codes, first = sample_ensemble(HALF, 20, 5, 800, seed=2)
    resid, allowed = equivariance_residuals(codes, first, KI)
    for w in range(3):
        env = Environment(codes[w], first, ALPHA, w)
        r, a = equivariance_residual(env, KI, 0)
        assert resid[w] == pytest.approx(r, abs=1e-15) and allowed[w] == pytest.approx(a)


# ---------------------------------------------------------------- forward contraction and mixing


def test_all_good_tv_series():
    env = sample_environment(ALL_GOOD, 120, 200, seed=0)
    rep = forward_contraction(env, KI, GOOD, 100)
    n = np.arange(101)
    np.testing.assert_allclose(rep.tv_actual, 2 * 0.7**n / 3, atol=1e-14)
    assert rep.sound()
    assert mixing_time(rep, 0.01) == 14  # 2 * 0.7^n / 3 <= 0.005 first at n = 14
    assert mixing_time(rep, 2.0) == 1


def test_all_bad_tv_is_flat():
    env = sample_environment(ALL_BAD, 30, 0, seed=0)
    rep = forward_contraction(env, KI, GOOD, 20, mu0=[2 / 3, 1 / 3])
    np.testing.assert_allclose(rep.tv_actual, 2 / 3)
    assert rate_constant(rep.tv_actual, RateRegime("polynomial", 1.0))[0] == math.inf
    with pytest.raises(NotCrossed):
        mixing_time(rep, 0.1)


def test_rate_constant_all_good_stretched():
    env = sample_environment(ALL_GOOD, 220, 200, seed=0)
    rep = forward_contraction(env, KI, GOOD, 200)
    n = np.arange(1, 201)
    expected = np.max(2 * 0.7**n / 3 * np.exp(np.sqrt(n)))
    k = rate_constant(rep.tv_actual, RateRegime("stretched", 0.5))[0]
    assert k == pytest.approx(expected, rel=1e-12)
    # the supremum sits at small n
    assert np.argmax(2 * 0.7**n / 3 * np.exp(np.sqrt(n))) < 5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mixing_time_monotone_in_eps(seed):
    codes, first = sample_ensemble(HALF, 1, 120, 600, seed)
    from doeblin.random_env import forward_tv

    tv, _, _ = forward_tv(codes, first, KI, 120)
    eps = np.array([0.5, 0.2, 0.1, 0.05, 0.01])
    times = [int(mixing_times(tv, e)[0]) for e in eps]
    crossed = [t for t in times if t > 0]
    assert crossed == sorted(crossed)


def test_ensemble_tail_domination():
    # horizon 400 drives every bound below 1e-14 so each K(omega) is certified
    codes, tv, counts, bounds, err, mu = ensemble_reports(HALF, KI, GOOD, 500, 400, seed=1)
    assert np.all(tv <= bounds + 1e-12)
    assert bounds[:, -1].max() < 1e-14
    rows, K = mixing_tail_check(tv, 0.05, 4, RateRegime("stretched", 0.5), range(1, 201))
    assert all(r.empirical <= r.bound for r in rows)
    assert np.all(np.isfinite(K))


# ---------------------------------------------------------------- quenched variance and CLT


def test_quenched_variance_all_good_matches_green_kubo():
    env = sample_environment(ALL_GOOD, 2000, 200, seed=0)
    qv = quenched_variance(env, KI, 2000)
    assert qv.Sigma_sq == pytest.approx(34 / 27, abs=1e-10)


def test_coboundary_observable_is_degenerate():
    pair = pair_assignment(KI, [1.0, -2.0])
    env = sample_environment(HALF, 400, 1000, seed=3)
    qv = quenched_variance(env, pair, 400)
    assert qv.sigma_sq.max() <= 4 * 4.0 + 1e-12
    assert qv.Sigma_sq < 1e-8
    with pytest.raises(DegenerateVariance):
        quenched_clt_check(env, pair, (16, 32, 64), 100, seed=0)


def test_zero_observable_has_zero_variance():
    zero = RandomKernelAssignment.from_dict({"g": REF, "b": np.eye(2)}, [0.0, 0.0])
    env = sample_environment(HALF, 100, 500, seed=0)
    assert quenched_variance(env, zero, 100).Sigma_sq == 0.0


def test_quenched_clt_small_run():
    env = sample_environment(HALF, 256, 1000, seed=8)
    est, rows = quenched_clt_check(env, KI, (16, 64, 256), 20000, seed=1)
    assert [r[0] for r in rows] == [16, 64, 256]
    assert all(0 < r[2] < 0.5 for r in rows)
    assert est.fitted_slope < 0


# ---------------------------------------------------------------- skew products


def test_skew_correlation_constant_observable_vanishes():
    codes, first = sample_ensemble(HALF, 200, 20, 800, seed=0)
    corr, _ = skew_correlation(codes, first, KI, [1.0, 1.0], [1.0, 0.0], range(10))
    np.testing.assert_allclose(corr, 0.0, atol=1e-14)


def test_skew_correlation_matches_per_environment_formula():
    # mu_omega = (2/3, 1/3) always, and each g step scales the centered indicator by 0.7
    codes, first = sample_ensemble(HALF, 300, 40, 800, seed=6)
    lags = list(range(0, 33))
    corr, _ = skew_correlation(codes, first, KI, [1.0, 0.0], [1.0, 0.0], lags)
    good = np.cumsum(codes[:, -first:-first + 32] == 0, axis=1)
    expected = [2 / 9] + [float(np.mean(2 / 9 * 0.7 ** good[:, n - 1])) for n in lags[1:]]
    np.testing.assert_allclose(corr, expected, atol=1e-13)
    rate, se = fit_exponential_decay(lags[1:], corr[1:])
    assert rate > 0.9 * -math.log(1 - 0.5 * 0.3)


def test_per_symbol_observables():
    f = np.array([[1.0, 0.0], [1.0, 0.0]])
    codes, first = sample_ensemble(HALF, 50, 10, 800, seed=6)
    a, _ = skew_correlation(codes, first, KI, f, f, range(5))
    b, _ = skew_correlation(codes, first, KI, [1.0, 0.0], [1.0, 0.0], range(5))
    np.testing.assert_allclose(a, b)
