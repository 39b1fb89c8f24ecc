"""Martingale-coboundary decomposition and exact variances on finite spaces."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BoundDoesNotVanish, DimensionMismatch, Inconclusive, IndexOutOfRange
from .kernel import StochasticKernel, doeblin_extract
from .sequential import MODES, ChainSpec

DEFAULT_TAIL = 1e-10


@dataclass(frozen=True, eq=False)
class Observable:
    """Functions ``f_j`` on the state space at time ``j``, indexed like a chain."""

    values: tuple
    mode: str = "finite"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        vals = tuple(np.asarray(v, dtype=float) for v in self.values)
        if not vals:
            raise ValueError("an observable needs at least one function")
        for v in vals:
            if v.ndim != 1 or not np.all(np.isfinite(v)):
                raise ValueError("observable values must be finite vectors")
            v.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, values):
        return cls((values,), mode="constant")

    def value(self, j: int) -> np.ndarray:
        n = len(self.values)
        if self.mode == "finite":
            if not 0 <= j < n:
                raise IndexOutOfRange(f"observable index {j} outside 0..{n - 1}")
            return self.values[j]
        if self.mode == "periodic":
            return self.values[j % n]
        return self.values[min(max(j, 0), n - 1)]

    def has_index(self, j: int) -> bool:
        return self.mode != "finite" or 0 <= j < len(self.values)

    @property
    def sup_bound(self) -> float:
        return max(float(np.abs(v).max()) for v in self.values)

    @property
    def max_oscillation(self) -> float:
        return max(float(v.max() - v.min()) for v in self.values)


def _check_dims(chain: ChainSpec, f: Observable, j: int):
    if f.value(j).size != chain.state_count(j):
        raise DimensionMismatch(
            f"observable at index {j} has {f.value(j).size} entries, state space has {chain.state_count(j)}"
        )


class _Moments:
    """Marginal laws and centerings ``E f_j(X_j)`` along a chain, grown on demand."""

    def __init__(self, chain: ChainSpec, f: Observable):
        self.chain, self.f = chain, f
        self._laws = [np.asarray(chain.initial_law)]
        self._means = []

    def law(self, j: int) -> np.ndarray:
        if j < 0:
            raise IndexOutOfRange("centering is defined from the initial time 0 onward")
        while len(self._laws) <= j:
            self._laws.append(self._laws[-1] @ self.chain.kernel(len(self._laws) - 1).matrix)
        return self._laws[j]

    def mean(self, j: int) -> float:
        while len(self._means) <= j:
            k = len(self._means)
            _check_dims(self.chain, self.f, k)
            self._means.append(float(self.law(k) @ self.f.value(k)))
        return self._means[j]

    def centered(self, j: int) -> np.ndarray:
        return self.f.value(j) - self.mean(j)


def _tail_rate(chain: ChainSpec):
    """Block length ``B`` and factor ``rho < 1`` bounding every ``B``-step Dobrushin coefficient.

    Only meaningful for chains that extend to +infinity.
    """
    if chain.mode == "constant":
        phases = [chain.kernels[-1].matrix]
    else:
        phases = [k.matrix for k in chain.kernels]
    p = len(phases)
    s = chain.kernels[-1].n_target
    worst = 1.0
    for reps in range(1, (s - 1) ** 2 + 2):
        block = p * reps
        worst = 0.0
        for start in range(p):
            m = np.eye(phases[start].shape[0])
            for i in range(block):
                m = m @ phases[(start + i) % p]
            g = min(float(m.min(axis=0).sum()), 1.0)
            worst = max(worst, 1.0 - g)
        if worst < 1.0:
            return block, worst
    raise BoundDoesNotVanish(worst)


def auto_truncation(chain: ChainSpec, f: Observable, target_tail: float = DEFAULT_TAIL):
    """Truncation depth ``K`` and the certified tail bound it guarantees."""
    osc = f.max_oscillation
    if osc == 0.0:
        return 1, 0.0
    block, rho = _tail_rate(chain)
    if rho == 0.0:
        return block, 0.0
    # tail(K) <= osc * rho**floor(K / B) * B / (1 - rho)
    reps = math.ceil(math.log(target_tail * (1 - rho) / (osc * block)) / math.log(rho))
    k = max(block * max(reps, 0), 1)
    return k, tail_bound(osc, block, rho, k)


def tail_bound(osc: float, block: int, rho: float, k: int) -> float:
    if osc == 0.0 or rho == 0.0 and k >= block:
        return 0.0
    return osc * rho ** (k // block) * block / (1.0 - rho)


@dataclass(frozen=True)
class CoboundaryDecomposition:
    """``h[j]`` for ``j = 0..n`` and ``M[j]`` (a matrix over time j-1 by time j) for ``j = 1..n``."""

    h: tuple
    M: tuple
    centering: tuple
    truncation: int
    truncation_tail: float

    def identity_residual(self, chain: ChainSpec, f: Observable) -> float:
        """Largest ``|f~_j(y) - M_j(x,y) - h_{j-1}(x) + h_j(y)|`` over supported pairs."""
        worst = 0.0
        for j in range(1, len(self.h)):
            p = chain.kernel(j - 1).matrix
            ft = f.value(j) - self.centering[j]
            r = ft[None, :] - self.M[j] - self.h[j - 1][:, None] + self.h[j][None, :]
            worst = max(worst, float(np.abs(r[p > 0]).max(initial=0.0)))
        return worst

    def martingale_residual(self, chain: ChainSpec) -> float:
        """Largest ``|sum_y P_{j-1}(x,y) M_j(x,y)|``."""
        worst = 0.0
        for j in range(1, len(self.h)):
            p = chain.kernel(j - 1).matrix
            worst = max(worst, float(np.abs((p * self.M[j]).sum(axis=1)).max()))
        return worst


def _h_at(chain, moments, j, k_terms):
    v = np.zeros(chain.state_count(j + k_terms))
    for k in range(j + k_terms - 1, j - 1, -1):
        v = chain.kernel(k).matrix @ (moments.centered(k + 1) + v)
    return v


def _resolve_truncation(chain, f, truncation, last):
    """Truncation depth and tail; finite chains stop at the last available index."""
    if chain.mode == "finite":
        return None, 0.0
    if truncation is None:
        return auto_truncation(chain, f)
    if truncation < 1:
        raise ValueError("truncation must be at least 1")
    if f.max_oscillation == 0.0:
        return truncation, 0.0
    block, rho = _tail_rate(chain)
    return truncation, tail_bound(f.max_oscillation, block, rho, truncation)


def coboundary(chain: ChainSpec, f: Observable, index: int, truncation: Optional[int] = None):
    """``h_j(x) = sum_{k=j+1}^{j+K} E[f~_k(X_k) | X_j = x]`` and its certified tail.

    With ``truncation=None`` the depth is picked so the tail is at most 1e-10.
    On finite chains the series simply stops at the last index and is exact.
    """
    moments = _Moments(chain, f)
    k, tail = _resolve_truncation(chain, f, truncation, index)
    if k is None:
        k = len(chain.kernels) - index
        if k < 0:
            raise IndexOutOfRange(f"index {index} beyond the chain")
        if not f.has_index(index + k):
            raise IndexOutOfRange("observable shorter than the chain")
    return _h_at(chain, moments, index, k), tail


def decompose(chain: ChainSpec, f: Observable, horizon: int, truncation: Optional[int] = None) -> CoboundaryDecomposition:
    """``h_j`` for ``j = 0..horizon`` and ``M_j = f~_j(y) + h_j(y) - h_{j-1}(x)``."""
    moments = _Moments(chain, f)
    k, tail = _resolve_truncation(chain, f, truncation, horizon)
    hs = []
    for j in range(horizon + 1):
        kj = k if k is not None else len(chain.kernels) - j
        if kj < 0:
            raise IndexOutOfRange(f"horizon {horizon} beyond the chain")
        hs.append(_h_at(chain, moments, j, kj))
    ms = [None]
    for j in range(1, horizon + 1):
        ms.append(moments.centered(j)[None, :] + hs[j][None, :] - hs[j - 1][:, None])
    for a in hs + ms[1:]:
        a.setflags(write=False)
    cent = tuple(moments.mean(j) for j in range(horizon + 1))
    return CoboundaryDecomposition(tuple(hs), tuple(ms), cent, k if k is not None else 0, tail)


def martingale_part(chain: ChainSpec, f: Observable, index: int, truncation: Optional[int] = None) -> np.ndarray:
    if index < 1:
        raise IndexOutOfRange("martingale differences start at index 1")
    h_prev, _ = coboundary(chain, f, index - 1, truncation)
    h_cur, _ = coboundary(chain, f, index, truncation)
    moments = _Moments(chain, f)
    return moments.centered(index)[None, :] + h_cur[None, :] - h_prev[:, None]


@dataclass(frozen=True)
class VarianceReport:
    sigma_sq: np.ndarray
    means: np.ndarray
    martingale_variance_sum: Optional[float] = None
    classification: Optional[str] = None
    asymptotic_slope: Optional[float] = None
    sup_h: Optional[float] = None
    truncation_tail: Optional[float] = None

    @property
    def horizon(self) -> int:
        return len(self.sigma_sq) - 1


def _tail_increment(sigma_sq: np.ndarray) -> float:
    n = len(sigma_sq) - 1
    inc = np.diff(sigma_sq)
    return float(np.median(inc[max(n - max(n // 4, 1), 0):]))


def exact_variance(chain: ChainSpec, f: Observable, horizon: int) -> VarianceReport:
    """``Var(S_n)`` for ``n = 0..horizon`` by forward propagation of first and second moments.

    ``sigma_sq[n]`` is the variance of ``S_n = f_0(X_0) + ... + f_{n-1}(X_{n-1})``;
    ``means[n]`` is ``E S_n``. Each step centers ``f_j`` by its exact mean so
    the running first moment stays zero. Cost is O(horizon * states^2).
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    moments = _Moments(chain, f)
    sigma_sq = np.zeros(horizon + 1)
    means = np.zeros(horizon + 1)
    law = moments.law(0)
    ft = moments.centered(0)
    u = law * ft
    v = law * ft * ft
    sigma_sq[1] = v.sum()
    means[1] = moments.mean(0)
    for j in range(1, horizon):
        p = chain.kernel(j - 1).matrix
        law = moments.law(j)
        ft = moments.centered(j)
        w = u @ p
        u = w + ft * law
        v = v @ p + 2.0 * ft * w + ft * ft * law
        sigma_sq[j + 1] = v.sum()
        means[j + 1] = means[j] + moments.mean(j)
    np.maximum(sigma_sq, 0.0, out=sigma_sq)
    return VarianceReport(sigma_sq, means, asymptotic_slope=_tail_increment(sigma_sq))


def martingale_variances(chain: ChainSpec, dec: CoboundaryDecomposition) -> np.ndarray:
    """``Var(M_j(X_{j-1}, X_j))`` for ``j = 1..n`` (index 0 holds 0)."""
    laws = chain.laws(len(dec.h) - 1)
    out = np.zeros(len(dec.h))
    for j in range(1, len(dec.h)):
        p = chain.kernel(j - 1).matrix
        joint = laws[j - 1][:, None] * p
        m = dec.M[j]
        mean = (joint * m).sum()
        out[j] = (joint * m * m).sum() - mean * mean
    return np.maximum(out, 0.0)


def variance_classification(chain: ChainSpec, f: Observable, horizon: int = 400, truncation: Optional[int] = None) -> VarianceReport:
    """Finite-horizon reading of the bounded/growing variance dichotomy.

    "growing" requires the median increment of ``sigma_n^2`` over the last
    quarter to be non-negligible and ``sigma_n^2 > 0.5 * n * median`` over the
    whole second half. Otherwise the coboundary evidence decides: the
    martingale variances summed over the second half must be negligible.
    Raises :class:`Inconclusive` when neither test is decisive.
    """
    if horizon < 8:
        raise ValueError("horizon too short for a trend test")
    rep = exact_variance(chain, f, horizon)
    sig = rep.sigma_sq
    med = _tail_increment(sig)
    scale = max(1.0, f.sup_bound ** 2)
    ns = np.arange(horizon // 2, horizon + 1)
    dec = decompose(chain, f, horizon, truncation)
    mv = martingale_variances(chain, dec)
    sup_h = max(float(np.abs(h).max()) for h in dec.h)
    mv_sum = float(mv.sum())
    late = float(mv[horizon // 2:].sum())
    noise = 1e-8 * scale
    if med > noise and np.all(sig[ns] > 0.5 * ns * med):
        cls = "growing"
    elif late <= max(noise, 4 * horizon * dec.truncation_tail * (1 + sup_h)) and med <= noise:
        cls = "bounded"
    else:
        raise Inconclusive(horizon)
    return VarianceReport(sig, rep.means, mv_sum, cls, med, sup_h, dec.truncation_tail)


def telescoping_observable(base: ChainSpec, g) -> tuple:
    """Pair chain ``X_j = (Z_j, Z_{j+1})`` with ``f(X_j) = g(Z_j) - g(Z_{j+1})``.

    ``S_n = g(Z_0) - g(Z_n)`` telescopes, so ``Var(S_n) <= 4 sup|g|^2``. The
    pair state ``(a, b)`` is encoded as ``a * s + b``. Requires a square
    chain in ``"constant"`` or ``"periodic"`` mode.
    """
    if base.mode == "finite":
        raise ValueError("telescoping construction needs an unbounded base chain")
    s = base.kernels[0].n_source
    g = np.asarray(g, dtype=float)
    if g.shape != (s,):
        raise DimensionMismatch("g must be a function on the base state space")
    p = len(base.kernels)
    pair_kernels = []
    for j in range(p):
        q = base.kernel(j + 1).matrix
        m = np.zeros((s * s, s * s))
        for a in range(s):
            for b in range(s):
                m[a * s + b, b * s:(b + 1) * s] = q[b]
        pair_kernels.append(StochasticKernel(m))
    q0 = base.kernel(0).matrix
    init = (np.asarray(base.initial_law)[:, None] * q0).ravel()
    chain = ChainSpec(tuple(pair_kernels), init, mode=base.mode)
    f = Observable.constant(np.repeat(g, s) - np.tile(g, s))
    return chain, f


def decomposition_rows(dec: CoboundaryDecomposition):
    """CSV rows ``(j, state, h)`` and ``(j, x, y, M)``."""
    h_rows = [(j, x, float(v)) for j, h in enumerate(dec.h) for x, v in enumerate(h)]
    m_rows = [
        (j, x, y, float(m[x, y]))
        for j, m in enumerate(dec.M)
        if m is not None
        for x in range(m.shape[0])
        for y in range(m.shape[1])
    ]
    return h_rows, m_rows
