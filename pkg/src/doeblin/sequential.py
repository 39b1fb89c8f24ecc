"""Inhomogeneous chains: window kernels, contraction ledgers, limit measures.

Index conventions follow the chain: ``chain.kernel(i)`` moves the state from
time ``i`` to time ``i + 1``, so the window kernel ``P_{j,n}`` is the product
``P_j P_{j+1} ... P_{j+n-1}`` and maps laws at time ``j`` to laws at ``j + n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BoundDoesNotVanish, DimensionMismatch, IndexOutOfRange, WindowExhausted
from .kernel import (
    MinorizationCertificate,
    StochasticKernel,
    doeblin_extract,
    tv_distance,
    validate_distribution,
    validate_kernel,
)

HORIZON_CAP = 10**6
MODES = ("finite", "periodic", "constant")


@dataclass(frozen=True, eq=False)
class ChainSpec:
    """A family ``i -> P_i`` of kernels together with an initial law at time 0.

    ``mode`` decides how indices outside ``range(len(kernels))`` resolve:
    ``"finite"`` rejects them, ``"periodic"`` wraps them (all of Z is
    available), ``"constant"`` extends the first/last kernel to -inf/+inf.
    """

    kernels: tuple
    initial_law: np.ndarray
    mode: str = "finite"
    _certs: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.kernels:
            raise ValueError("a chain needs at least one kernel")
        ks = tuple(k if isinstance(k, StochasticKernel) else validate_kernel(k) for k in self.kernels)
        object.__setattr__(self, "kernels", ks)
        for i in range(len(ks) - 1):
            if ks[i].n_target != ks[i + 1].n_source:
                raise DimensionMismatch(
                    f"kernel {i} has {ks[i].n_target} target states but kernel {i + 1} "
                    f"has {ks[i + 1].n_source} source states"
                )
        if self.mode != "finite" and ks[-1].n_target != ks[0].n_source:
            raise DimensionMismatch(f"kernel {len(ks) - 1} cannot wrap around to kernel 0")
        law = validate_distribution(self.initial_law)
        if law.size != ks[0].n_source:
            raise DimensionMismatch(f"initial law has {law.size} states, kernel 0 has {ks[0].n_source}")
        object.__setattr__(self, "initial_law", law)

    @classmethod
    def constant(cls, kernel, initial_law=None):
        kernel = kernel if isinstance(kernel, StochasticKernel) else validate_kernel(kernel)
        if initial_law is None:
            initial_law = np.full(kernel.n_source, 1.0 / kernel.n_source)
        return cls((kernel,), initial_law, mode="constant")

    @property
    def period(self) -> int:
        return len(self.kernels)

    def lowest_index(self) -> Optional[int]:
        return 0 if self.mode == "finite" else None

    def highest_index(self) -> Optional[int]:
        """Last valid kernel index, or None when unbounded."""
        return len(self.kernels) - 1 if self.mode == "finite" else None

    def has_index(self, i: int) -> bool:
        return self.mode != "finite" or 0 <= i < len(self.kernels)

    def _resolve(self, i: int) -> int:
        n = len(self.kernels)
        if self.mode == "finite":
            if not 0 <= i < n:
                raise IndexOutOfRange(f"kernel index {i} outside 0..{n - 1}")
            return i
        if self.mode == "periodic":
            return i % n
        return min(max(i, 0), n - 1)

    def kernel(self, i: int) -> StochasticKernel:
        return self.kernels[self._resolve(i)]

    def certificate(self, i: int) -> MinorizationCertificate:
        k = self._resolve(i)
        cert = self._certs.get(k)
        if cert is None:
            cert = self._certs[k] = doeblin_extract(self.kernels[k])
        return cert

    def state_count(self, i: int) -> int:
        """Number of states at time ``i``."""
        if self.has_index(i):
            return self.kernel(i).n_source
        return self.kernel(i - 1).n_target

    def laws(self, horizon: int) -> list:
        """Marginal laws of X_0, ..., X_horizon from the initial law."""
        out = [np.asarray(self.initial_law)]
        for i in range(horizon):
            out.append(out[-1] @ self.kernel(i).matrix)
        return out


def _check_window(chain: ChainSpec, start: int, length: int):
    if length < 0:
        raise ValueError("window length must be nonnegative")
    if chain.mode == "finite":
        if start < 0 or start + length > len(chain.kernels):
            raise IndexOutOfRange(f"window [{start}, {start + length}) outside 0..{len(chain.kernels)}")
    if length > HORIZON_CAP:
        raise IndexOutOfRange(f"window length {length} exceeds the horizon cap {HORIZON_CAP}")


def window_matrix(chain: ChainSpec, start: int, length: int) -> np.ndarray:
    _check_window(chain, start, length)
    m = np.eye(chain.state_count(start))
    for i in range(start, start + length):
        m = m @ chain.kernel(i).matrix
        if (i - start) % 64 == 63:
            m /= m.sum(axis=1, keepdims=True)
    return m / m.sum(axis=1, keepdims=True)


def window_kernel(chain: ChainSpec, start: int, length: int) -> StochasticKernel:
    """``P_{start,length}``: left-to-right composition of ``length`` kernels."""
    if length < 1:
        raise ValueError("window length must be positive")
    m = window_matrix(chain, start, length)
    m.setflags(write=False)
    return StochasticKernel(m)


# ---------------------------------------------------------------- one-step ledger


@dataclass(frozen=True)
class ContractionLedger:
    target: int
    length: int
    bound: float
    accumulated_measure: np.ndarray
    window: np.ndarray
    residual_window: np.ndarray
    consistency_error: float
    limit_measure: Optional[np.ndarray] = None

    @property
    def accumulated_mass(self) -> float:
        return float(self.accumulated_measure.sum())


def log_contraction(gammas) -> float:
    """``sum log(1 - gamma)``; -inf as soon as one gamma equals one."""
    g = np.asarray(gammas, dtype=float)
    if np.any(g >= 1.0):
        return -math.inf
    return float(np.log1p(-g).sum())


def _exp_bound(log_b: float) -> float:
    return 0.0 if log_b == -math.inf else math.exp(log_b)


def one_step_ledger(chain: ChainSpec, target: int, length: int) -> ContractionLedger:
    """Coupling decomposition of ``P_{target-length, length}``.

    Builds ``A_{j,n}`` with the inductive recursion ``A_{j,n+1} = A_{j,n} + C_n``
    where ``C_n = gamma * prod * (m Q_{j-n,n})`` and checks that every row of
    the window kernel equals ``A_{j,n} + prod * Q_{j-n,n}(x, .)``.
    """
    if length < 1:
        raise ValueError("ledger length must be positive")
    start = target - length
    _check_window(chain, start, length)
    j = target
    cert = chain.certificate(j - 1)
    acc = cert.sub_measure.copy()
    q = cert.residual.matrix.copy()
    log_b = log_contraction([cert.gamma])
    for n in range(1, length):
        k = j - n - 1
        c = chain.certificate(k)
        prod = _exp_bound(log_b)
        if c.minorizer is not None and prod > 0.0:
            acc = acc + c.gamma * prod * (c.minorizer @ q)
        q = c.residual.matrix @ q
        log_b += log_contraction([c.gamma])
    bound = _exp_bound(log_b)
    window = window_matrix(chain, start, length)
    recon = acc[None, :] + bound * q
    err = float(np.abs(recon - window).max())
    acc.setflags(write=False)
    window.setflags(write=False)
    q.setflags(write=False)
    limit = acc / acc.sum() if bound == 0.0 and acc.sum() > 0 else None
    return ContractionLedger(j, length, bound, acc, window, q, err, limit)


def one_step_bound(chain: ChainSpec, target: int, length: int) -> float:
    """``prod_{k=target-length}^{target-1} (1 - gamma_k)`` computed in log space."""
    _check_window(chain, target - length, length)
    return _exp_bound(log_contraction([chain.certificate(k).gamma for k in range(target - length, target)]))


# ---------------------------------------------------------------- general schedules


@dataclass(frozen=True)
class MinorizationSchedule:
    """Lags ``l_j`` and the gamma certified by the window ``[j - l_j, j)``.

    ``lags`` and ``gammas`` map the window's end index to its lag and
    certificate strength. ``lowest`` is the smallest usable time index.
    """

    lags: dict
    gammas: dict
    lowest: Optional[int] = None
    minorizers: dict = field(default_factory=dict)

    def lag(self, j: int) -> int:
        try:
            return self.lags[j]
        except KeyError:
            raise WindowExhausted(j) from None

    def window_ends(self, target: int, depth: int) -> list:
        """End indices ``e_1 = target, e_{k+1} = e_k - l_{e_k}`` of the selected windows."""
        ends = [target]
        while len(ends) < depth:
            e = ends[-1]
            if e not in self.lags or (self.lowest is not None and e - self.lags[e] < self.lowest):
                raise WindowExhausted(len(ends))
            ends.append(e - self.lags[e])
        return ends

    def recursion_depths(self, target: int, depth: int) -> list:
        """The literal recursion ``N_{j,1} = l_{j-1}``, ``N_{j,n} = l_{j-1-N_{j,n-1}}``."""
        out = []
        prev = None
        for _ in range(depth):
            idx = target - 1 if prev is None else target - 1 - prev
            prev = self.lag(idx)
            out.append(prev)
        return out


def fixed_lag_schedule(chain: ChainSpec, lag: int, lowest: int, highest: int) -> MinorizationSchedule:
    """Schedule with ``l_j = lag`` for every end index ``j`` in ``[lowest + lag, highest]``."""
    lags, gammas, mins = {}, {}, {}
    for j in range(lowest + lag, highest + 1):
        cert = doeblin_extract(window_kernel(chain, j - lag, lag), lag=lag)
        lags[j], gammas[j], mins[j] = lag, cert.gamma, cert.minorizer
    return MinorizationSchedule(lags, gammas, lowest, mins)


def greedy_schedule(chain: ChainSpec, lowest: int, highest: int, threshold: float, cap: int = 64) -> MinorizationSchedule:
    """Smallest lag per end index whose backward window certifies ``gamma >= threshold``.

    End indices whose search fails within `cap` (or hits `lowest`) get the
    best lag found, possibly with gamma 0.
    """
    lags, gammas, mins = {}, {}, {}
    for j in range(lowest + 1, highest + 1):
        m = np.eye(chain.state_count(j))
        best = (1, 0.0, None)
        for lag in range(1, min(cap, j - lowest) + 1):
            m = chain.kernel(j - lag).matrix @ m
            cert = doeblin_extract(StochasticKernel(m / m.sum(axis=1, keepdims=True)), lag=lag)
            if cert.gamma > best[1]:
                best = (lag, cert.gamma, cert.minorizer)
            if cert.gamma >= threshold:
                best = (lag, cert.gamma, cert.minorizer)
                break
        lags[j], gammas[j], mins[j] = best
    return MinorizationSchedule(lags, gammas, lowest, mins)


def schedule_bound(schedule: MinorizationSchedule, target: int, depth: int) -> float:
    """``prod_{k=1}^{depth-1} (1 - gamma)`` over the windows selected backward from `target`.

    Valid for every window ``P_{target-n, n}`` that covers the selected
    windows, i.e. ``n >= target - e_depth``.
    """
    if depth < 1:
        raise ValueError("depth must be positive")
    if depth == 1:
        return 1.0
    ends = schedule.window_ends(target, depth)
    return _exp_bound(log_contraction([schedule.gammas[e] for e in ends[:-1]]))


def schedule_coverage(schedule: MinorizationSchedule, target: int, depth: int) -> int:
    """Minimal window length for which ``schedule_bound(target, depth)`` applies."""
    return target - schedule.window_ends(target, depth)[-1]


# ---------------------------------------------------------------- contraction profiles


def contraction_profile(chain: ChainSpec, start: int, length: int, block_cap: int = 64) -> np.ndarray:
    """Certified Dobrushin bounds for ``P_{start, n}``, ``n = 0..length``.

    Kernels are grouped greedily into blocks, each closed as soon as its
    composition has a positive Doeblin gamma; a block contributes the factor
    ``1 - gamma`` once it closes. Between closures the bound is carried over.
    """
    _check_window(chain, start, length)
    out = np.ones(length + 1)
    log_b = 0.0
    block = None
    size = 0
    for n in range(1, length + 1):
        i = start + n - 1
        c = chain.certificate(i)
        if block is None and c.gamma > 0:
            log_b += log_contraction([c.gamma])
        else:
            block = chain.kernel(i).matrix if block is None else block @ chain.kernel(i).matrix
            size += 1
            g = float(block.min(axis=0).sum())
            if g > 0 or size >= block_cap:
                log_b += log_contraction([min(g, 1.0)])
                block, size = None, 0
        out[n] = _exp_bound(log_b)
    return out


# ---------------------------------------------------------------- limit measures


def limit_measure(chain: ChainSpec, target: int, tolerance: float, max_length: Optional[int] = None):
    """Approximate ``mu_target`` with a certified total variation error.

    Returns ``(mu, certified_error, length)``: ``mu`` is the row average of
    ``P_{target-n, n}`` for the first ``n`` whose certified bound is at most
    `tolerance`.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if chain.mode == "finite":
        avail = target
    else:
        avail = HORIZON_CAP
    if max_length is not None:
        avail = min(avail, max_length)
    if avail < 1:
        raise BoundDoesNotVanish(1.0)
    m = np.eye(chain.state_count(target))
    log_b = 0.0
    block = None
    block_size = 0
    best = 1.0
    s = chain.state_count(target)
    # a period product with an eventually positive column has one by power
    # (s-1)^2 + 1; a block may start mid-period, hence the extra period
    stall_cap = chain.period * ((s - 1) ** 2 + 2)
    for n in range(1, avail + 1):
        i = target - n
        p = chain.kernel(i).matrix
        m = p @ m
        if n % 64 == 0:
            m /= m.sum(axis=1, keepdims=True)
        c = chain.certificate(i)
        if block is None and c.gamma > 0:
            log_b += log_contraction([c.gamma])
        else:
            block = p if block is None else p @ block
            block_size += 1
            g = float(block.min(axis=0).sum())
            if g > 0:
                log_b += log_contraction([min(g, 1.0)])
                block, block_size = None, 0
            elif chain.mode != "finite" and block_size > stall_cap:
                break
        bound = _exp_bound(log_b)
        best = min(best, bound)
        if bound <= tolerance:
            m = m / m.sum(axis=1, keepdims=True)
            mu = m.mean(axis=0)
            spread = max(tv_distance(a, b) for a in m for b in m)
            assert spread <= 2 * bound + 1e-12, "row spread exceeds the certified bound"
            return mu / mu.sum(), bound, n
    raise BoundDoesNotVanish(best)


def ledger_rows(chain: ChainSpec, target: int, lengths: Sequence[int], tolerance: float = 1e-12):
    """Rows ``(j, n, bound, certified_error)`` for CSV export.

    ``certified_error`` is the exact ``sup_x TV(P_{j-n,n}(x, .), mu_j)`` up to
    the tolerance used for ``mu_j``.
    """
    mu, err, _ = limit_measure(chain, target, tolerance)
    rows = []
    for n in lengths:
        b = one_step_bound(chain, target, n)
        w = window_matrix(chain, target - n, n)
        tv = max(tv_distance(r, mu) for r in w)
        rows.append((target, n, b, tv))
    return rows, mu, err
