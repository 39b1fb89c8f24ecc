"""Markov chains driven by a stationary random environment.

The environment is a two-sided symbol sequence ``omega``; the left shift
``theta`` acts by ``(theta omega)_k = omega_{k+1}``. The kernel used at time
``k`` along the orbit is ``P_{theta^k omega}``, which here depends on the
coordinate ``omega_k`` only. Every chain shares one finite state space.

Most computations run on a batch of environments at once (arrays with a
leading environment axis); the single-environment functions are thin views
onto the batched ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .decomposition import Observable, exact_variance
from .errors import (
    DegenerateVariance,
    DimensionMismatch,
    InsufficientPastDepth,
    InsufficientPoints,
    NotCrossed,
    WindowUnavailable,
)
from .kernel import StochasticKernel, doeblin_extract, validate_distribution, validate_kernel
from .montecarlo import SimulationPlan, fit_rate, kolmogorov_distance, simulate
from .rng import stream
from .sequential import ChainSpec

MAX_PAST_DEPTH = 1 << 16


# ---------------------------------------------------------------- environments


@dataclass(frozen=True)
class EnvironmentModel:
    """Stationary symbol process: i.i.d. with law ``probs`` or a stationary Markov chain."""

    alphabet: tuple
    base: str = "iid"
    probs: Optional[np.ndarray] = None
    kernel: Optional[np.ndarray] = None

    def __post_init__(self):
        alphabet = tuple(self.alphabet)
        if len(set(alphabet)) != len(alphabet) or not alphabet:
            raise ValueError("alphabet symbols must be distinct and nonempty")
        object.__setattr__(self, "alphabet", alphabet)
        if self.base == "iid":
            probs = validate_distribution(self.probs)
            if probs.size != len(alphabet):
                raise DimensionMismatch("one probability per symbol required")
            object.__setattr__(self, "probs", probs)
        elif self.base == "markov":
            k = validate_kernel(self.kernel)
            if k.matrix.shape != (len(alphabet), len(alphabet)):
                raise DimensionMismatch("symbol kernel must be square over the alphabet")
            object.__setattr__(self, "kernel", k.matrix)
            if self.probs is None:
                from .kernel import stationary_distribution

                object.__setattr__(self, "probs", stationary_distribution(k))
            else:
                object.__setattr__(self, "probs", validate_distribution(self.probs))
        else:
            raise ValueError("base must be 'iid' or 'markov'")

    @classmethod
    def iid(cls, probs: dict):
        return cls(tuple(probs), "iid", np.array(list(probs.values()), dtype=float))

    def stationary_law(self) -> np.ndarray:
        return self.probs


@dataclass(frozen=True)
class Environment:
    """Realized coordinates ``omega_k`` for ``k`` in ``[first, first + len(codes))``."""

    codes: np.ndarray
    first: int
    alphabet: tuple
    omega_id: int = 0

    @property
    def last(self) -> int:
        return self.first + self.codes.size - 1

    def code(self, k: int) -> int:
        if not self.first <= k <= self.last:
            raise WindowUnavailable(f"coordinate {k} outside sampled range [{self.first}, {self.last}]")
        return int(self.codes[k - self.first])

    def window(self, lo: int, hi: int) -> np.ndarray:
        """Codes for ``k`` in ``[lo, hi)``."""
        if lo < self.first or hi - 1 > self.last:
            raise WindowUnavailable(f"window [{lo}, {hi}) outside sampled range [{self.first}, {self.last}]")
        return self.codes[lo - self.first:hi - self.first]

    def symbols(self, lo: int, hi: int) -> list:
        return [self.alphabet[c] for c in self.window(lo, hi)]

    def shift(self, t: int = 1) -> "Environment":
        """``theta^t omega``: the same realization re-indexed by ``k -> k - t``."""
        return Environment(self.codes, self.first - t, self.alphabet, self.omega_id)


def sample_environment(model: EnvironmentModel, horizon: int, past_depth: int, seed: int, index: int = 0,
                       start_symbol=None) -> Environment:
    """Draw ``omega_{-past_depth}, ..., omega_{horizon}`` from the base process.

    The stream is keyed by ``(seed, index)``. A Markov base starts from its
    stationary law unless `start_symbol` pins ``omega_{-past_depth}``.
    """
    if horizon < 0 or past_depth < 0:
        raise ValueError("horizon and past depth must be nonnegative")
    rng = stream(seed, index)
    length = horizon + past_depth + 1
    u = rng.random(length)
    k = len(model.alphabet)
    if model.base == "iid":
        codes = np.searchsorted(np.cumsum(model.probs)[:-1], u, side="right")
    else:
        cum = np.cumsum(model.kernel, axis=1)[:, :-1]
        codes = np.empty(length, dtype=np.intp)
        if start_symbol is None:
            codes[0] = np.searchsorted(np.cumsum(model.probs)[:-1], u[0], side="right")
        else:
            codes[0] = model.alphabet.index(start_symbol)
        for i in range(1, length):
            codes[i] = np.searchsorted(cum[codes[i - 1]], u[i], side="right")
    codes = np.minimum(codes, k - 1).astype(np.intp)
    codes.setflags(write=False)
    return Environment(codes, -past_depth, model.alphabet, index)


def sample_ensemble(model, count, horizon, past_depth, seed):
    """Environments with indices ``0..count-1``; returns ``(codes[count, T], first)``."""
    envs = [sample_environment(model, horizon, past_depth, seed, i) for i in range(count)]
    return np.stack([e.codes for e in envs]), -past_depth


# ---------------------------------------------------------------- assignments


@dataclass(frozen=True)
class RandomKernelAssignment:
    """Symbol-indexed kernels (and optionally observables) on a common state space."""

    alphabet: tuple
    kernels: tuple
    observables: Optional[tuple] = None
    certificates: tuple = field(init=False)

    def __post_init__(self):
        ks = tuple(k if isinstance(k, StochasticKernel) else validate_kernel(k) for k in self.kernels)
        if len(ks) != len(self.alphabet):
            raise DimensionMismatch("one kernel per symbol required")
        s = ks[0].n_source
        for sym, k in zip(self.alphabet, ks):
            if k.matrix.shape != (s, s):
                raise DimensionMismatch(f"kernel for symbol {sym!r} is not {s}x{s}")
        object.__setattr__(self, "kernels", ks)
        object.__setattr__(self, "certificates", tuple(doeblin_extract(k) for k in ks))
        if self.observables is not None:
            obs = tuple(np.asarray(v, dtype=float) for v in self.observables)
            if len(obs) != len(ks) or any(v.shape != (s,) for v in obs):
                raise DimensionMismatch("one observable vector of length s per symbol required")
            object.__setattr__(self, "observables", obs)

    @classmethod
    def from_dict(cls, kernels: dict, observables=None):
        alphabet = tuple(kernels)
        obs = None
        if observables is not None:
            if isinstance(observables, dict):
                obs = tuple(observables[a] for a in alphabet)
            else:
                obs = tuple(observables for _ in alphabet)
        return cls(alphabet, tuple(kernels[a] for a in alphabet), obs)

    @property
    def states(self) -> int:
        return self.kernels[0].n_source

    @property
    def stack(self) -> np.ndarray:
        return np.stack([k.matrix for k in self.kernels])

    @property
    def gammas(self) -> np.ndarray:
        return np.array([c.gamma for c in self.certificates])

    @property
    def observable_stack(self) -> np.ndarray:
        if self.observables is None:
            raise ValueError("assignment has no observable map")
        return np.stack(self.observables)

    def codes_for(self, env: Environment) -> np.ndarray:
        """Map the environment's alphabet codes onto this assignment's kernel order."""
        if env.alphabet == self.alphabet:
            return env.codes
        lookup = np.array([self.alphabet.index(a) for a in env.alphabet])
        return lookup[env.codes]

    def realized_chain(self, env: Environment, start: int, length: int, initial_law) -> ChainSpec:
        codes = self.codes_for(env)[start - env.first:start - env.first + length]
        if codes.size != length or start < env.first:
            raise WindowUnavailable("realized chain leaves the sampled range")
        return ChainSpec(tuple(self.kernels[c] for c in codes), initial_law, mode="finite")

    def realized_observable(self, env: Environment, start: int, length: int) -> Observable:
        codes = self.codes_for(env)[start - env.first:start - env.first + length]
        return Observable(tuple(self.observables[c] for c in codes), mode="finite")


def pair_assignment(assignment: RandomKernelAssignment, h) -> RandomKernelAssignment:
    """Lift to pair states ``(a, b)`` with observable ``h(a) - h(b)`` for every symbol.

    Transitions ``(a, b) -> (b, c)`` follow the symbol's kernel from ``b``,
    so the partial sums telescope and the variance stays bounded.
    """
    s = assignment.states
    h = np.asarray(h, dtype=float)
    if h.shape != (s,):
        raise DimensionMismatch("h must be a function on the state space")
    lifted = []
    for k in assignment.kernels:
        m = np.zeros((s * s, s * s))
        for a in range(s):
            for b in range(s):
                m[a * s + b, b * s:(b + 1) * s] = k.matrix[b]
        lifted.append(StochasticKernel(m))
    f = np.repeat(h, s) - np.tile(h, s)
    return RandomKernelAssignment(assignment.alphabet, tuple(lifted), tuple(f for _ in lifted))


# ---------------------------------------------------------------- good sets and hit counts


@dataclass(frozen=True)
class GoodSetSpec:
    """``A = {gamma >= delta, n <= M}`` through a predicate on ``omega_{t-M..t+M}``."""

    delta: float
    M: int
    membership: Callable

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.M < 1:
            raise ValueError("M must be a positive integer")

    @classmethod
    def from_symbols(cls, assignment: RandomKernelAssignment, good: Sequence, delta: float, M: int = 1):
        """``theta^t omega`` is in A when ``omega_t`` is a good symbol.

        Each good symbol's kernel must certify ``gamma >= delta`` in one step.
        """
        idx = [assignment.alphabet.index(g) for g in good]
        for i in idx:
            if assignment.certificates[i].gamma < delta - 1e-15:
                raise ValueError(
                    f"symbol {assignment.alphabet[i]!r} certifies gamma "
                    f"{assignment.certificates[i].gamma:.6g} < delta {delta}"
                )
        mask = np.zeros(len(assignment.alphabet), dtype=bool)
        mask[idx] = True
        return cls(delta, M, lambda w: mask[w[..., M]])

    @classmethod
    def certified(cls, assignment: RandomKernelAssignment, delta: float, M: int = 1):
        """Membership when some backward window ``omega_{t-L..t-1}``, ``L <= M``, certifies delta."""
        stack = assignment.stack

        def member(w):
            w = np.atleast_2d(w)
            out = np.zeros(w.shape[0], dtype=bool)
            s = stack.shape[1]
            prod = np.broadcast_to(np.eye(s), (w.shape[0], s, s)).copy()
            for lag in range(1, M + 1):
                prod = stack[w[:, M - lag]] @ prod
                g = prod.min(axis=1).sum(axis=1)
                out |= g >= delta
            return out

        return cls(delta, M, member)


def _windows(codes: np.ndarray, first: int, centers: np.ndarray, M: int) -> np.ndarray:
    cols = centers[:, None] + np.arange(-M, M + 1)[None, :] - first
    if cols.size and (cols.min() < 0 or cols.max() >= codes.shape[-1]):
        raise WindowUnavailable("membership window outside the sampled environment")
    return codes[..., cols]


def hit_indicators(codes: np.ndarray, first: int, good: GoodSetSpec, count: int) -> np.ndarray:
    """``1(theta^{jM} omega in A)`` for ``j = 1..count`` (batched over a leading axis)."""
    if count <= 0:
        return np.zeros(codes.shape[:-1] + (0,), dtype=bool)
    centers = good.M * np.arange(1, count + 1)
    w = _windows(codes, first, centers, good.M)
    flat = w.reshape(-1, 2 * good.M + 1)
    return np.asarray(good.membership(flat), dtype=bool).reshape(w.shape[:-1])


def hit_count_series(codes: np.ndarray, first: int, good: GoodSetSpec, horizon: int) -> np.ndarray:
    """Hit counts ``sum_{j=1}^{[n/M]-1} 1(theta^{jM} omega in A)`` for ``n = 0..horizon``."""
    jmax = horizon // good.M - 1
    ind = hit_indicators(codes, first, good, jmax)
    cum = np.concatenate([np.zeros(codes.shape[:-1] + (1,), dtype=np.int64), np.cumsum(ind, axis=-1)], axis=-1)
    n = np.arange(horizon + 1)
    upto = np.maximum(n // good.M - 1, 0)
    return cum[..., upto]


def hit_count_bound(env: Environment, good: GoodSetSpec, horizon: int):
    """``(count, (1 - delta)^count)`` for the forward orbit up to `horizon`."""
    counts = hit_count_series(env.codes, env.first, good, horizon)
    c = int(counts[-1])
    return c, math.exp(c * math.log1p(-good.delta))


def bounds_from_counts(counts, delta):
    return np.exp(np.asarray(counts) * math.log1p(-delta))


# ---------------------------------------------------------------- equivariant measures


def _log1m(g):
    with np.errstate(divide="ignore"):
        return np.where(g >= 1.0, -np.inf, np.log1p(-np.minimum(g, 1.0)))


def _dobrushin_batch(prod):
    return 0.5 * np.abs(prod[:, :, None, :] - prod[:, None, :, :]).sum(axis=3).max(axis=(1, 2))


def equivariant_measures(codes, first, assignment, t, tolerance=1e-14, max_depth=MAX_PAST_DEPTH):
    """Backward compositions ``P_{theta^{t-d} omega, d}`` averaged over rows, batched.

    ``mu_{theta^t omega}`` lies in the convex hull of the rows, so the row
    average is within the product's Dobrushin coefficient of it. That
    coefficient is at most ``prod (1 - gamma_{omega_k})`` over
    ``k in [t-d, t)``; the smaller of the two is the certified error. It also
    certifies assignments whose kernels only minorize over several steps.
    ``d`` grows until every environment is within `tolerance`.
    Returns ``(mu[E, s], error[E], depth)``.
    """
    codes = np.atleast_2d(codes)
    stack = assignment.stack
    logg = _log1m(assignment.gammas)
    E, s = codes.shape[0], assignment.states
    prod = np.broadcast_to(np.eye(s), (E, s, s)).copy()
    log_err = np.zeros(E)
    err = np.ones(E)
    avail = min(t - first, max_depth)
    log_tol = math.log(tolerance)
    d = 0
    for d in range(1, avail + 1):
        c = codes[:, t - d - first]
        prod = stack[c] @ prod
        log_err += logg[c]
        if d % 64 == 0:
            prod /= prod.sum(axis=2, keepdims=True)
        if np.all(log_err <= log_tol):
            err = np.minimum(np.exp(log_err), _dobrushin_batch(prod))
            break
        if d % 8 == 0 or d == avail:
            err = np.minimum(np.exp(log_err), _dobrushin_batch(prod))
            if np.all(err <= tolerance):
                break
    if d == 0 or np.any(err > tolerance):
        raise InsufficientPastDepth(float(err.max()) if d else 1.0)
    prod /= prod.sum(axis=2, keepdims=True)
    mu = prod.mean(axis=1)
    return mu / mu.sum(axis=1, keepdims=True), err, d


def equivariant_measure(env: Environment, assignment: RandomKernelAssignment, t: int = 0, tolerance: float = 1e-14,
                        max_depth: int = MAX_PAST_DEPTH):
    """``(mu_{theta^t omega}, certified_error, depth)`` for one environment."""
    mu, err, d = equivariant_measures(assignment.codes_for(env)[None, :], env.first, assignment, t, tolerance, max_depth)
    return mu[0], float(err[0]), d


def equivariance_residual(env, assignment, t=0, tolerance=1e-14):
    """``(TV(mu_t P_{omega_t}, mu_{t+1}), err_t + err_{t+1})``."""
    mu0, e0, _ = equivariant_measure(env, assignment, t, tolerance)
    mu1, e1, _ = equivariant_measure(env, assignment, t + 1, tolerance)
    pushed = mu0 @ assignment.kernels[assignment.codes_for(env)[t - env.first]].matrix
    return float(0.5 * np.abs(pushed - mu1).sum()), e0 + e1


def equivariance_residuals(codes, first, assignment, tolerance=1e-14):
    """Batched :func:`equivariance_residual` at ``t = 0``: ``(residual[E], err0 + err1)``."""
    codes = np.atleast_2d(codes)
    mu0, e0, _ = equivariant_measures(codes, first, assignment, 0, tolerance)
    mu1, e1, _ = equivariant_measures(codes, first, assignment, 1, tolerance)
    pushed = np.einsum("es,est->et", mu0, assignment.stack[codes[:, -first]])
    return 0.5 * np.abs(pushed - mu1).sum(axis=1), e0 + e1


# ---------------------------------------------------------------- forward contraction


@dataclass(frozen=True)
class QuenchedReport:
    omega_id: object
    hit_counts: np.ndarray
    bounds: np.ndarray
    tv_actual: np.ndarray
    mu0: np.ndarray
    mu_error: float
    delta: float

    @property
    def horizon(self) -> int:
        return len(self.tv_actual) - 1

    def sound(self, slack: float = 1e-12) -> bool:
        return bool(np.all(self.tv_actual <= self.bounds + slack))


def forward_tv(codes, first, assignment, horizon, tolerance=1e-14, mu0=None):
    """``sup_x TV(P_{omega,n}(x, .), mu_{theta^n omega})`` for ``n = 0..horizon``, batched.

    ``mu_{theta^n omega}`` is ``mu_omega`` pushed forward ``n`` steps, which
    is exact equivariance; its error never exceeds that of ``mu_omega``.
    An explicit `mu0` (carrying error 0 by convention) replaces the
    backward computation, e.g. for environments that never mix.
    Returns ``(tv[E, horizon+1], mu0[E, s], mu_error[E])``.
    """
    codes = np.atleast_2d(codes)
    if horizon - 1 - first >= codes.shape[1]:
        raise WindowUnavailable("forward horizon beyond the sampled environment")
    if mu0 is None:
        mu, err, _ = equivariant_measures(codes, first, assignment, 0, tolerance)
    else:
        mu = np.broadcast_to(validate_distribution(mu0), (codes.shape[0], assignment.states)).copy()
        err = np.zeros(codes.shape[0])
    stack = assignment.stack
    E, s = codes.shape[0], assignment.states
    prod = np.broadcast_to(np.eye(s), (E, s, s)).copy()
    law = mu.copy()
    tv = np.empty((E, horizon + 1))
    tv[:, 0] = 0.5 * np.abs(prod - law[:, None, :]).sum(axis=2).max(axis=1)
    for n in range(1, horizon + 1):
        k = stack[codes[:, n - 1 - first]]
        prod = prod @ k
        law = np.einsum("es,est->et", law, k)
        if n % 64 == 0:
            prod /= prod.sum(axis=2, keepdims=True)
            law /= law.sum(axis=1, keepdims=True)
        tv[:, n] = 0.5 * np.abs(prod - law[:, None, :]).sum(axis=2).max(axis=1)
    return tv, mu, err


def forward_contraction(env: Environment, assignment: RandomKernelAssignment, good: GoodSetSpec, horizon: int,
                        tolerance: float = 1e-14, mu0=None) -> QuenchedReport:
    codes = assignment.codes_for(env)[None, :]
    tv, mu, err = forward_tv(codes, env.first, assignment, horizon, tolerance, mu0)
    counts = hit_count_series(env.codes[None, :], env.first, good, horizon)[0]
    return QuenchedReport(env.omega_id, counts, bounds_from_counts(counts, good.delta), tv[0], mu[0], float(err[0]), good.delta)


def ensemble_reports(model, assignment, good, count, horizon, seed, past_depth=1024, tolerance=1e-14):
    """Batched :func:`forward_contraction` over environments ``0..count-1``.

    Returns ``(codes, tv, counts, bounds, mu_error, mu0)``.
    """
    raw, first = sample_ensemble(model, count, horizon + good.M, past_depth, seed)
    lookup = np.array([assignment.alphabet.index(a) for a in model.alphabet])
    codes = lookup[raw]
    tv, mu, err = forward_tv(codes, first, assignment, horizon, tolerance)
    counts = hit_count_series(raw, first, good, horizon)
    return codes, tv, counts, bounds_from_counts(counts, good.delta), err, mu


# ---------------------------------------------------------------- rate constants and mixing times


@dataclass(frozen=True)
class RateRegime:
    """``a_n = n^{-exponent}`` ("polynomial") or ``exp(-scale * n^exponent)`` ("stretched")."""

    kind: str
    exponent: float
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "stretched"):
            raise ValueError("regime kind must be 'polynomial' or 'stretched'")
        if self.exponent <= 0:
            raise ValueError("regime exponent must be positive")

    def log_a(self, n):
        n = np.asarray(n, dtype=float)
        if self.kind == "polynomial":
            return -self.exponent * np.log(n)
        return -self.scale * n ** self.exponent

    def a(self, n):
        return np.exp(self.log_a(n))


def rate_constant(tv, regime: RateRegime, factor: float = 1.0, certify_floor: float = 1e-14,
                  bound_at_horizon: Optional[float] = None):
    """``K = sup_{n >= 1} factor * tv(n) / a_n`` over the computed horizon (batched over rows).

    Rows whose contraction bound at the horizon (default: ``tv`` itself)
    is not below `certify_floor` get ``inf``: the supremum is not certified.
    """
    tv = np.atleast_2d(np.asarray(tv, dtype=float))
    n = np.arange(1, tv.shape[1])
    with np.errstate(divide="ignore"):
        logk = np.log(factor * tv[:, 1:]) - regime.log_a(n)[None, :]
    k = np.exp(np.max(logk, axis=1))
    last = tv[:, -1] if bound_at_horizon is None else np.broadcast_to(bound_at_horizon, k.shape)
    return np.where(last < certify_floor, k, np.inf)


def mixing_times(tv, eps: float) -> np.ndarray:
    """``N_eps = min{n >= 1 : 2 tv(n) <= eps}`` per row; -1 where not crossed."""
    tv = np.atleast_2d(np.asarray(tv, dtype=float))
    hit = 2.0 * tv[:, 1:] <= eps
    first = np.argmax(hit, axis=1) + 1
    return np.where(hit.any(axis=1), first, -1)


def mixing_time(report: QuenchedReport, eps: float) -> int:
    """Operator-norm mixing time, the operator norm being ``2 sup_x TV``."""
    n = int(mixing_times(report.tv_actual, eps)[0])
    if n < 0:
        raise NotCrossed(report.horizon)
    return n


@dataclass(frozen=True)
class TailRow:
    N: int
    empirical: float
    stderr: float
    bound: float


def mixing_tail_check(tv, eps: float, p: float, regime: RateRegime, Ns: Sequence[int], certify_floor=1e-14):
    """Empirical ``P(N_eps > N)`` against ``E[K^p] eps^{-p} a_N^p`` with ``K`` from the same ensemble.

    ``K(omega) = sup_n 2 tv(n) / a_n``; environments whose mixing time was
    not crossed count as exceeding every ``N``.
    """
    K = rate_constant(tv, regime, factor=2.0, certify_floor=certify_floor)
    times = mixing_times(tv, eps)
    E = times.size
    kp = float(np.mean(K ** p))
    rows = []
    for N in Ns:
        exceed = np.count_nonzero((times > N) | (times < 0))
        emp = exceed / E
        rows.append(TailRow(int(N), emp, math.sqrt(max(emp * (1 - emp), 1.0 / E) / E),
                            kp * eps ** (-p) * float(regime.a(N)) ** p))
    return rows, K


# ---------------------------------------------------------------- quenched variance and CLT


@dataclass(frozen=True)
class QuenchedVariance:
    var_over_n: np.ndarray
    sigma_sq: np.ndarray
    Sigma_sq: float
    initial_law: np.ndarray


def quenched_variance(env: Environment, assignment: RandomKernelAssignment, horizon: int, initial_law=None,
                      tolerance: float = 1e-14) -> QuenchedVariance:
    """``Var(S_n^omega) / n`` along the realized kernels, started from ``mu_omega``.

    ``Sigma^2`` is estimated by the average increment of ``Var(S_n)`` over the
    second half of the horizon.
    """
    if initial_law is None:
        initial_law, _, _ = equivariant_measure(env, assignment, 0, tolerance)
    chain = assignment.realized_chain(env, 0, horizon, initial_law)
    f = assignment.realized_observable(env, 0, horizon)
    rep = exact_variance(chain, f, horizon)
    n = np.arange(horizon + 1)
    ratio = np.zeros(horizon + 1)
    ratio[1:] = rep.sigma_sq[1:] / n[1:]
    half = horizon // 2
    sig2 = (rep.sigma_sq[horizon] - rep.sigma_sq[half]) / (horizon - half)
    return QuenchedVariance(ratio, rep.sigma_sq, max(float(sig2), 0.0), np.asarray(initial_law))


def quenched_clt_check(env: Environment, assignment: RandomKernelAssignment, horizons: Sequence[int], paths: int,
                       seed: int, normalization: str = "finite", threads: int = 1, degenerate_tol: float = 1e-8):
    """Kolmogorov distances for one fixed environment and their fitted rate in ``n``.

    Degeneracy (``Sigma^2`` below `degenerate_tol`) is checked over the
    whole sampled forward range, not just the requested horizons.
    ``normalization="finite"`` scales by the exact ``Sigma_{omega,n}``;
    ``"sqrt"`` scales by ``Sigma sqrt(n)``. Returns ``(RateEstimate, rows)``
    with rows ``(n, scale, kolmogorov)``; the rate is the slope of
    ``log distance`` against ``log n``.
    """
    horizons = tuple(int(h) for h in horizons)
    # degeneracy is judged on the longest sampled stretch: a bounded
    # variance needs time to show its flat increments
    probe = max(horizons[-1], min(env.last, 16384))
    qv = quenched_variance(env, assignment, probe)
    if qv.Sigma_sq < degenerate_tol:
        raise DegenerateVariance(f"Sigma^2 = {qv.Sigma_sq:.3g} for environment {env.omega_id}")
    chain = assignment.realized_chain(env, 0, horizons[-1], qv.initial_law)
    f = assignment.realized_observable(env, 0, horizons[-1])
    rep = exact_variance(chain, f, horizons[-1])
    if normalization == "finite":
        moments = {n: (rep.means[n], math.sqrt(rep.sigma_sq[n])) for n in horizons}
    elif normalization == "sqrt":
        moments = {n: (rep.means[n], math.sqrt(qv.Sigma_sq * n)) for n in horizons}
    else:
        raise ValueError("normalization must be 'finite' or 'sqrt'")
    plan = SimulationPlan(chain, f, horizons, paths, seed)
    cdfs = simulate(plan, threads, moments)
    rows = [(n, cdfs[n].sigma_n, kolmogorov_distance(cdfs[n])) for n in horizons]
    est = fit_rate([(n, d) for n, _, d in rows], paths)
    return est, rows


# ---------------------------------------------------------------- skew-product correlations


def _per_symbol(values, assignment, codes):
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        return np.broadcast_to(v, codes.shape + v.shape)
    return v[codes]


def skew_correlation(codes, first, assignment, f, g, lags, tolerance=1e-14):
    """``E_mu[(f o pi_0)(g o pi_n)] - E_mu[f o pi_0] E_mu[g o pi_n]`` per lag.

    `f` and `g` are either one vector on the state space or one vector per
    symbol (rows in assignment order). Inner expectations are exact under
    ``mu_omega``; the outer average runs over the environment batch.
    Returns ``(correlations, per_environment_products)``.
    """
    codes = np.atleast_2d(codes)
    lags = np.asarray(sorted(lags), dtype=int)
    mu, _, _ = equivariant_measures(codes, first, assignment, 0, tolerance)
    stack = assignment.stack
    E, s = codes.shape[0], assignment.states
    f0 = _per_symbol(f, assignment, codes[:, -first])
    fmu = mu * f0
    row = fmu.copy()  # row vector (mu f) P_{omega,n}
    law = mu.copy()
    out = np.empty(lags.size)
    inner = np.empty((E, lags.size))
    k = 0
    for n in range(lags[-1] + 1):
        if n > 0:
            kn = stack[codes[:, n - 1 - first]]
            row = np.einsum("es,est->et", row, kn)
            law = np.einsum("es,est->et", law, kn)
        if k < lags.size and lags[k] == n:
            gn = _per_symbol(g, assignment, codes[:, n - first])
            joint = (row * gn).sum(axis=1)
            mf = fmu.sum(axis=1)
            mg = (law * gn).sum(axis=1)
            inner[:, k] = joint
            out[k] = joint.mean() - mf.mean() * mg.mean()
            k += 1
    return out, inner


def fit_exponential_decay(lags, values, floor: float = 0.0):
    """Slope of ``-log |value|`` against lag, for values above `floor`: ``(rate, stderr)``."""
    lags = np.asarray(lags, dtype=float)
    v = np.abs(np.asarray(values, dtype=float))
    keep = v > floor
    if keep.sum() < 3:
        raise InsufficientPoints("need at least 3 correlations above the floor")
    x, y = lags[keep], np.log(v[keep])
    xm = x.mean()
    sxx = ((x - xm) ** 2).sum()
    slope = ((x - xm) * (y - y.mean())).sum() / sxx
    resid = y - y.mean() - slope * (x - xm)
    se = math.sqrt((resid ** 2).sum() / max(len(x) - 2, 1) / sxx)
    return float(-slope), float(se)
