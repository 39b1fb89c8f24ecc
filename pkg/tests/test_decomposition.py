import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doeblin.decomposition import (
    Observable,
    auto_truncation,
    coboundary,
    decompose,
    exact_variance,
    martingale_part,
    martingale_variances,
    telescoping_observable,
    variance_classification,
)
from doeblin.errors import DimensionMismatch, Inconclusive, IndexOutOfRange
from doeblin.sequential import ChainSpec

from conftest import REF, random_kernel

PI = np.array([2 / 3, 1 / 3])
IND = Observable.constant([1.0, 0.0])


def fundamental(p):
    s = p.shape[0]
    w, v = np.linalg.eig(p.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1))])
    pi = pi / pi.sum()
    big = np.tile(pi, (s, 1))
    return np.linalg.inv(np.eye(s) - p + big) - big, pi


def green_kubo(p, f):
    z, pi = fundamental(p)
    ft = f - pi @ f
    return 2 * pi @ (ft * (z @ ft)) - pi @ (ft * ft)


def brute_force_moments(chain, f, n):
    """Mean and variance of S_n by enumerating every path."""
    s0 = len(chain.initial_law)
    m1 = m2 = 0.0
    for path in itertools.product(*(range(chain.state_count(j)) for j in range(n))):
        pr = chain.initial_law[path[0]]
        for j in range(1, n):
            pr *= chain.kernel(j - 1).matrix[path[j - 1], path[j]]
        sn = sum(f.value(j)[x] for j, x in enumerate(path))
        m1 += pr * sn
        m2 += pr * sn * sn
    return m1, m2 - m1 * m1


def test_reference_h_matches_fundamental_matrix():
    chain = ChainSpec.constant(REF, PI)
    h, tail = coboundary(chain, IND, 5)
    z, _ = fundamental(np.array(REF))
    ft = np.array([1.0, 0.0]) - 2 / 3
    np.testing.assert_allclose(h, z @ ft - ft, atol=1e-9)
    np.testing.assert_allclose(h, [7 / 9, -14 / 9], atol=1e-8)
    assert tail <= 1e-10


def test_auto_truncation_reference():
    k, tail = auto_truncation(ChainSpec.constant(REF), IND)
    assert tail <= 1e-10
    # a shallower sum must miss the target
    h_k, _ = coboundary(ChainSpec.constant(REF, PI), IND, 0, truncation=k)
    h_far, _ = coboundary(ChainSpec.constant(REF, PI), IND, 0, truncation=4 * k)
    assert np.abs(h_k - h_far).max() <= tail


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_truncation_tail_is_certified(seed, k):
    rng = np.random.default_rng(seed)
    s, period = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    chain = ChainSpec(tuple(random_kernel(rng, s, zeros=0.3) for _ in range(period)), np.full(s, 1 / s), "periodic")
    f = Observable(tuple(rng.normal(size=s) for _ in range(period)), "periodic")
    try:
        h_k, tail = coboundary(chain, f, 2, truncation=k)
    except Exception as exc:  # no finite block contracts
        assert type(exc).__name__ == "BoundDoesNotVanish"
        return
    h_far, _ = coboundary(chain, f, 2, truncation=k + 400)
    assert np.abs(h_k - h_far).max() <= tail + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decomposition_identity_random_chains(seed):
    rng = np.random.default_rng(seed)
    s, period = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    chain = ChainSpec(tuple(random_kernel(rng, s) for _ in range(period)), rng.dirichlet(np.ones(s)), "periodic")
    f = Observable(tuple(rng.normal(size=s) for _ in range(period)), "periodic")
    dec = decompose(chain, f, 12)
    assert dec.truncation_tail <= 1e-10
    assert dec.identity_residual(chain, f) <= 2 * dec.truncation_tail + 1e-13
    assert dec.martingale_residual(chain) <= 2 * dec.truncation_tail + 1e-13


def test_martingale_part_matches_decomposition():
    chain = ChainSpec.constant(REF)
    dec = decompose(chain, IND, 4)
    np.testing.assert_allclose(martingale_part(chain, IND, 3), dec.M[3], atol=1e-14)
    with pytest.raises(IndexOutOfRange):
        martingale_part(chain, IND, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exact_variance_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    s = int(rng.integers(2, 4))
    chain = ChainSpec(tuple(random_kernel(rng, s, zeros=0.3) for _ in range(n)), rng.dirichlet(np.ones(s)), "finite")
    f = Observable(tuple(rng.normal(size=s) for _ in range(n + 1)), "finite")
    rep = exact_variance(chain, f, n)
    for m in range(1, n + 1):
        mean, var = brute_force_moments(chain, f, m)
        assert rep.means[m] == pytest.approx(mean, abs=1e-12)
        assert rep.sigma_sq[m] == pytest.approx(var, abs=1e-11)


def test_reference_variance_slope():
    rep = exact_variance(ChainSpec.constant(REF), IND, 2000)
    gk = green_kubo(np.array(REF), np.array([1.0, 0.0]))
    assert gk == pytest.approx(34 / 27, abs=1e-12)
    assert rep.asymptotic_slope == pytest.approx(gk, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_variance_bridge_finite_chains(seed):
    # S_n = (f~_0 + h_0)(X_0) + sum M_j - h_{n-1}(X_{n-1}) with orthogonal M_j
    rng = np.random.default_rng(seed)
    n, s = int(rng.integers(5, 40)), int(rng.integers(2, 5))
    chain = ChainSpec(tuple(random_kernel(rng, s, zeros=0.3) for _ in range(n)), rng.dirichlet(np.ones(s)), "finite")
    f = Observable(tuple(rng.normal(size=s) for _ in range(n + 1)), "finite")
    dec = decompose(chain, f, n)
    mv = martingale_variances(chain, dec)
    var = exact_variance(chain, f, n).sigma_sq
    hsup = max(np.abs(h).max() for h in dec.h)
    fsup = max(np.abs(f.value(j) - dec.centering[j]).max() for j in range(n))
    for m in range(2, n + 1):
        total = mv[1:m].sum()
        slack = (2 * hsup + fsup) ** 2 + 2 * hsup * np.sqrt(total)
        assert abs(var[m] - total) <= slack + 1e-9


def test_classification_reference_is_growing():
    rep = variance_classification(ChainSpec.constant(REF), IND)
    assert rep.classification == "growing"
    assert rep.asymptotic_slope == pytest.approx(34 / 27, abs=1e-8)


def test_telescoping_observable_stays_bounded():
    g = np.array([1.0, -0.5])
    chain, f = telescoping_observable(ChainSpec.constant(REF), g)
    rep = exact_variance(chain, f, 500)
    assert rep.sigma_sq.max() <= 4 * np.max(g**2) + 1e-12
    assert variance_classification(chain, f).classification == "bounded"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_telescoping_bound_random(seed):
    rng = np.random.default_rng(seed)
    s = int(rng.integers(2, 4))
    base = ChainSpec((random_kernel(rng, s),), rng.dirichlet(np.ones(s)), "constant")
    g = rng.normal(size=s)
    chain, f = telescoping_observable(base, g)
    sig = exact_variance(chain, f, 200).sigma_sq
    assert sig.max() <= 4 * np.max(g**2) + 1e-10


def test_zero_observable_is_bounded():
    rep = variance_classification(ChainSpec.constant(REF), Observable.constant([0.0, 0.0]))
    assert rep.classification == "bounded"
    assert rep.sigma_sq.max() == 0.0


def test_classification_can_be_inconclusive():
    # gamma = 2e-3 per step: by n = 40 the chain has barely started mixing
    eps = 1e-3
    slow = [[1 - eps, eps], [eps, 1 - eps]]
    with pytest.raises(Inconclusive):
        variance_classification(ChainSpec.constant(slow, [0.5, 0.5]), IND, horizon=40)


def test_observable_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        exact_variance(ChainSpec.constant(REF), Observable.constant([1.0, 0.0, 0.0]), 3)
