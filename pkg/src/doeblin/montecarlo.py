"""Path simulation and empirical distances to the standard normal law.

Randomness is counter-based: paths are cut into fixed blocks of
``block_size`` and block ``b`` draws from a Philox stream keyed by
``(seed, b)``. Path ``i`` therefore has the derivable key
``(seed, i // block_size)`` and results never depend on how blocks are
scheduled over threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.special import ndtr, ndtri

from .decomposition import Observable, exact_variance
from .errors import AllPointsBelowNoise, InsufficientPoints, ZeroVariance
from .rng import stream
from .sequential import ChainSpec

DEFAULT_BLOCK = 1 << 16
NOISE_CONSTANT = 0.6
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Philox stream for path block ``block``."""
    return stream(seed, block)


def _phi(t):
    t = np.asarray(t, dtype=float)
    out = np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
    return np.where(np.isfinite(t), out, 0.0)


@dataclass(frozen=True)
class SimulationPlan:
    chain: ChainSpec
    observable: Observable
    horizons: tuple
    paths: int
    seed: int
    block_size: int = DEFAULT_BLOCK

    def __post_init__(self):
        hs = tuple(int(h) for h in self.horizons)
        if not hs or any(b <= a for a, b in zip(hs, hs[1:])) or hs[0] < 1:
            raise ValueError("horizons must be positive and strictly increasing")
        if self.paths < 1:
            raise ValueError("paths must be at least 1")
        if not 0 <= int(self.seed) < 1 << 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "horizons", hs)


@dataclass(frozen=True)
class EmpiricalCdf:
    sorted_samples: np.ndarray
    n: int
    sigma_n: float
    mean: float = 0.0

    def __post_init__(self):
        if self.sigma_n <= 0:
            raise ValueError("sigma_n must be positive")

    @classmethod
    def from_samples(cls, samples, n=0, sigma_n=1.0, mean=0.0):
        x = np.sort(np.asarray(samples, dtype=float))
        x.setflags(write=False)
        return cls(x, n, sigma_n, mean)

    @property
    def size(self) -> int:
        return self.sorted_samples.size

    def atoms(self):
        """Distinct values with right-continuous CDF values ``F(v)`` and left limits ``F(v-)``."""
        v, counts = np.unique(self.sorted_samples, return_counts=True)
        cum = np.cumsum(counts) / self.size
        left = np.concatenate(([0.0], cum[:-1]))
        return v, left, cum


# ---------------------------------------------------------------- simulation


def _thresholds(matrix):
    """Integer cut points so that ``u32 >= cut[x, k]`` counts the states passed.

    A 32-bit uniform lands below ``cut`` with probability ``cut / 2**32``,
    within 2**-33 of the kernel's cumulative probability.
    """
    c = np.cumsum(matrix, axis=1)[:, :-1]
    return np.minimum(np.rint(c * 2.0**32), 2.0**32).astype(np.uint64)


def _uniform32(rng, count):
    raw = rng.bit_generator.random_raw(-(-count // 2))
    return raw.view(np.uint32)[:count].astype(np.uint64)


def _simulate_block(plan: SimulationPlan, block: int, count: int, cuts, f_values):
    # every draw spans the full block so a path's stream is fixed by its index
    full = plan.block_size
    rng = block_rng(plan.seed, block)
    init = np.cumsum(plan.chain.initial_law)[:-1]
    x = np.searchsorted(init, rng.random(full)[:count], side="right")
    total = np.zeros(count)
    out = np.empty((len(plan.horizons), count))
    k = 0
    for j in range(plan.horizons[-1]):
        total += f_values[j].take(x)
        if j + 1 == plan.horizons[k]:
            out[k] = total
            k += 1
            if k == len(plan.horizons):
                break
        c = cuts[j]
        u = _uniform32(rng, full)[:count]
        if c.shape[1] == 1:
            x = (u >= c[:, 0].take(x)).view(np.uint8)
        else:
            x = (u[:, None] >= c[x]).sum(axis=1)
    return out


def simulate_sums(plan: SimulationPlan, threads: int = 1) -> np.ndarray:
    """Raw path sums ``S_n`` with shape ``(len(horizons), paths)``, ordered by path index."""
    steps = plan.horizons[-1]
    cache = {}
    cums = []
    for j in range(steps):
        k = plan.chain.kernel(j)
        key = id(k)
        if key not in cache:
            cache[key] = _thresholds(k.matrix)
        cums.append(cache[key])
    f_values = [plan.observable.value(j) for j in range(steps)]
    nblocks = -(-plan.paths // plan.block_size)
    sizes = [min(plan.block_size, plan.paths - b * plan.block_size) for b in range(nblocks)]
    work = lambda b: _simulate_block(plan, b, sizes[b], cums, f_values)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, range(nblocks)))
    else:
        parts = [work(b) for b in range(nblocks)]
    return np.concatenate(parts, axis=1)


def simulate(plan: SimulationPlan, threads: int = 1, moments=None) -> dict:
    """Standardized empirical CDFs per horizon.

    Sums are centered and scaled by the exact ``E S_n`` and ``sigma_n`` from
    :func:`exact_variance` (or by `moments`, a ``{n: (mean, sigma)}`` map).
    """
    if moments is None:
        rep = exact_variance(plan.chain, plan.observable, plan.horizons[-1])
        moments = {n: (rep.means[n], math.sqrt(rep.sigma_sq[n])) for n in plan.horizons}
    for n in plan.horizons:
        if moments[n][1] < 1e-12:
            raise ZeroVariance(n)
    sums = simulate_sums(plan, threads)
    out = {}
    for k, n in enumerate(plan.horizons):
        mean, sigma = moments[n]
        out[n] = EmpiricalCdf.from_samples((sums[k] - mean) / sigma, n, sigma, mean)
    return out


# ---------------------------------------------------------------- distances


def kolmogorov_distance(cdf: EmpiricalCdf) -> float:
    """``sup_t |F_N(t) - Phi(t)|``, attained at a sample point or its left limit."""
    v, left, right = cdf.atoms()
    p = ndtr(v)
    return float(max(np.abs(right - p).max(), np.abs(left - p).max()))


def _weight(t, s):
    if s == 0:
        return np.ones_like(np.asarray(t, dtype=float))
    return 1.0 + np.abs(t) ** s


def _max_on_interval(c, a, b, s):
    g = lambda t: -float(_weight(t, s) * abs(c - ndtr(t)))
    grid = np.linspace(a, b, 33)
    vals = _weight(grid, s) * np.abs(c - ndtr(grid))
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, 32)]
    res = optimize.minimize_scalar(g, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    return max(float(vals[i]), -float(res.fun))


def weighted_sup_distance(cdf: EmpiricalCdf, s: float) -> float:
    """``sup_t (1 + |t|^s) |F_N(t) - Phi(t)|``; the weight is 1 when ``s == 0``.

    Gaps between atoms are searched on a grid plus a bounded refinement;
    the two unbounded tails are searched out to 40 units beyond the extreme
    samples, past which the normal tail makes the product negligible.
    """
    if s < 0 or not math.isfinite(s):
        raise ValueError("s must be finite and nonnegative")
    v, left, right = cdf.atoms()
    p = ndtr(v)
    w = _weight(v, s)
    best = float(max((w * np.abs(right - p)).max(), (w * np.abs(left - p)).max()))
    if s == 0:
        return best
    # interior of gaps: F is constant at right[k] on [v_k, v_{k+1})
    gaps = np.flatnonzero(np.diff(v) > 1e-3)
    if gaps.size:
        a, b = v[gaps], v[gaps + 1]
        ts = a[:, None] + (b - a)[:, None] * np.linspace(0, 1, 17)[None, :]
        vals = _weight(ts, s) * np.abs(right[gaps, None] - ndtr(ts))
        top = np.argsort(vals.max(axis=1))[-8:]
        best = max(best, float(vals.max()))
        for k in top:
            best = max(best, _max_on_interval(right[gaps[k]], a[k], b[k], s))
    best = max(best, _max_on_interval(0.0, v[0] - 40.0, v[0], s))
    best = max(best, _max_on_interval(1.0, v[-1], v[-1] + 40.0, s))
    return best


def _int_phi(a, b):
    """``int_a^b Phi(t) dt`` using the antiderivative ``t Phi(t) + phi(t)``."""
    G = lambda t: np.where(np.isfinite(t), np.nan_to_num(t) * ndtr(t), 0.0) + _phi(t)
    return G(b) - G(a)


def _l1_gaps(c, a, b):
    """``int_a^b |c - Phi(t)| dt`` vectorized over finite gaps."""
    cross = np.clip(ndtri(np.clip(c, 1e-300, 1 - 1e-16)), a, b)
    cross = np.where(c <= 0, a, np.where(c >= 1, b, cross))
    below = (c * (cross - a) - _int_phi(a, cross))  # Phi <= c on [a, cross]
    above = (_int_phi(cross, b) - c * (b - cross))
    return np.abs(below) + np.abs(above)


def _gl_integral(func, a, b):
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    t = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    return (func(t) * _GL_WEIGHTS[None, :]).sum(axis=1) * half


def lq_distance(cdf: EmpiricalCdf, q: float) -> float:
    """``(int |F_N - Phi|^q dt)^{1/q}``.

    ``q == 1`` is exact through the antiderivative of Phi; other ``q`` use
    Gauss-Legendre on each gap, split where ``Phi`` crosses the step, and
    adaptive quadrature on the two tails.
    """
    if q <= 0:
        raise ValueError("q must be positive")
    v, _, right = cdf.atoms()
    c = right[:-1]
    a, b = v[:-1], v[1:]
    if q == 1:
        mid = float(_l1_gaps(c, a, b).sum()) if a.size else 0.0
        lower = float(_int_phi(-np.inf, v[0]))
        upper = float(_phi(v[-1]) - v[-1] * ndtr(-v[-1]))
        return mid + lower + upper
    mid = 0.0
    if a.size:
        cross = np.where((c > 0) & (c < 1), ndtri(np.clip(c, 1e-300, 1 - 1e-16)), a)
        cross = np.clip(cross, a, b)
        for lo, hi in ((a, cross), (cross, b)):
            keep = hi > lo
            if keep.any():
                cc = c[keep][:, None]
                mid += float(_gl_integral(lambda t: np.abs(cc - ndtr(t)) ** q, lo[keep], hi[keep]).sum())
    lower = integrate.quad(lambda t: ndtr(t) ** q, -np.inf, v[0], epsabs=1e-12, limit=200)[0]
    upper = integrate.quad(lambda t: ndtr(-t) ** q, v[-1], np.inf, epsabs=1e-12, limit=200)[0]
    return (mid + lower + upper) ** (1.0 / q)


def wasserstein(cdf: EmpiricalCdf, p: float) -> float:
    """``W_p`` to the standard normal via quantile functions.

    Each atom ``v`` occupies the quantile cell ``[F(v-), F(v)]``; on it the
    integral of ``|v - Phi^{-1}(u)|^p`` becomes ``int |v - t|^p phi(t) dt``
    over ``t`` in ``[Phi^{-1}(F(v-)), Phi^{-1}(F(v))]``, which is closed form
    for ``p = 1, 2``.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    v, left, right = cdf.atoms()
    ta, tb = ndtri(left), ndtri(right)  # -inf / +inf at the ends
    Pa, Pb = left, right
    fa, fb = _phi(ta), _phi(tb)
    if p == 1:
        # split each cell at t = v: (v - t) below, (t - v) above
        tv = np.clip(v, ta, tb)
        Pv, fv = ndtr(tv), _phi(tv)
        below = v * (Pv - Pa) + (fv - fa)
        above = (fv - fb) - v * (Pb - Pv)
        return float(np.sum(below + above))
    if p == 2:
        ta_f = np.where(np.isfinite(ta), ta, 0.0)
        tb_f = np.where(np.isfinite(tb), tb, 0.0)
        m0 = Pb - Pa
        m1 = fa - fb
        m2 = (Pb - tb_f * fb) - (Pa - ta_f * fa)
        total = np.sum(v * v * m0 - 2 * v * m1 + m2)
        return float(math.sqrt(max(total, 0.0)))
    total = 0.0
    for k in range(v.size):
        total += integrate.quad(lambda u: abs(v[k] - ndtri(u)) ** p, left[k], right[k], epsabs=1e-13, limit=200)[0]
    return total ** (1.0 / p)


def noise_floor(paths: int) -> float:
    return NOISE_CONSTANT / math.sqrt(paths)


# ---------------------------------------------------------------- rate fitting


@dataclass(frozen=True)
class RateEstimate:
    pairs: tuple
    fitted_slope: float
    intercept: float
    slope_stderr: float
    excluded: tuple = ()
    noise_floor: float = 0.0

    @property
    def constant(self) -> float:
        """Fitted constant ``C`` in ``distance ~ C * sigma^slope``."""
        return math.exp(self.intercept)


def fit_rate(points: Sequence, paths: Optional[int] = None) -> RateEstimate:
    """Least squares of ``log distance`` on ``log sigma_n``.

    When `paths` is given, points with distance below ``3 * 0.6 / sqrt(paths)``
    are excluded as dominated by sampling error.
    """
    pts = [(float(s), float(d)) for s, d in points]
    if len(pts) < 3:
        raise InsufficientPoints(f"need at least 3 points, got {len(pts)}")
    if any(d < 0 for _, d in pts):
        raise ValueError("distances must be nonnegative")
    floor = noise_floor(paths) if paths else 0.0
    keep = [(s, d) for s, d in pts if d > 3 * floor and d > 0]
    excluded = tuple((s, d) for s, d in pts if (s, d) not in keep)
    if not keep:
        raise AllPointsBelowNoise(f"every distance is below {3 * floor:.3g}")
    if len(keep) < 3:
        raise InsufficientPoints(f"only {len(keep)} points above the noise floor")
    x = np.log([s for s, _ in keep])
    y = np.log([d for _, d in keep])
    xm = x.mean()
    sxx = float(((x - xm) ** 2).sum())
    slope = float(((x - xm) * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * xm)
    resid = y - intercept - slope * x
    dof = len(keep) - 2
    stderr = float(math.sqrt((resid ** 2).sum() / dof / sxx)) if dof > 0 else math.inf
    return RateEstimate(tuple(pts), slope, intercept, stderr, excluded, floor)


DISTANCE_COLUMNS = ("n", "sigma_n", "N", "kolmogorov", "weighted_s", "lq", "w1", "w2")


def distance_row(cdf: EmpiricalCdf, s: float = 2.0, q: float = 2.0) -> tuple:
    return (
        cdf.n,
        cdf.sigma_n,
        cdf.size,
        kolmogorov_distance(cdf),
        weighted_sup_distance(cdf, s),
        lq_distance(cdf, q),
        wasserstein(cdf, 1),
        wasserstein(cdf, 2),
    )


# ---------------------------------------------------------------- moderate deviations


@dataclass(frozen=True)
class MdpRow:
    n: int
    a_n: float
    hits: int
    samples: int
    value: float
    ci_low: float
    ci_high: float

    @property
    def no_hits(self) -> bool:
        return self.hits == 0


def _wilson(k, n, z=1.96):
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(centre - half, 0.0), min(centre + half, 1.0)


def mdp_table(samples_by_n: dict, interval, rho: float = 0.1, z: float = 1.96) -> list:
    """``a_n^{-2} log P(W_n in interval)`` with ``W_n = X / a_n`` and ``a_n = n^rho``.

    `samples_by_n` maps ``n`` to standardized samples ``X`` (unit variance).
    Rows with no hits carry ``value = -inf`` and are reported, not raised.
    """
    lo, hi = interval
    rows = []
    for n in sorted(samples_by_n):
        x = np.asarray(samples_by_n[n], dtype=float)
        a = float(n) ** rho
        w = x / a
        hits = int(np.count_nonzero((w >= lo) & (w <= hi)))
        total = x.size
        if hits == 0:
            rows.append(MdpRow(n, a, 0, total, -math.inf, -math.inf, math.log(_wilson(0, total, z)[1]) / a**2))
            continue
        lo_p, hi_p = _wilson(hits, total, z)
        val = math.log(hits / total) / a**2
        rows.append(MdpRow(n, a, hits, total, val, math.log(max(lo_p, 1e-300)) / a**2, math.log(hi_p) / a**2))
    return rows


def mdp_rate_target(interval) -> float:
    """``-inf_{x in interval} x^2 / 2``."""
    lo, hi = interval
    if lo <= 0 <= hi:
        return 0.0
    return -0.5 * min(lo * lo, hi * hi)


def mdp_limit(rows: Sequence[MdpRow]):
    """Extrapolate the normalized log-probabilities to ``a_n -> infinity``.

    Weighted least squares on
    ``value = L + b log(a)/a^2 + c/a^2 + d log(1 + 2/a^2)/a^2``, the shape of
    the Gaussian tail ``log P(Z > a) = -a^2/2 - log a - log(2 pi)/2 + ...``
    with a rational Mills-ratio correction (on exact normal tails over
    ``a`` in [1.15, 4] the extrapolation is off by about 5e-4).
    Returns ``(L, stderr)``.
    """
    good = [r for r in rows if r.hits > 0 and r.hits < r.samples]
    if len(good) < 5:
        raise InsufficientPoints("need at least 5 rows with hits")
    a = np.array([r.a_n for r in good])
    y = np.array([r.value for r in good])
    p = np.array([r.hits / r.samples for r in good])
    n = np.array([r.samples for r in good], dtype=float)
    se = np.sqrt((1 - p) / (n * p)) / a**2
    X = np.column_stack([np.ones_like(a), np.log(a) / a**2, 1 / a**2, np.log1p(2 / a**2) / a**2])
    W = 1 / se
    coef, *_ = np.linalg.lstsq(X * W[:, None], y * W, rcond=None)
    cov = np.linalg.inv((X * W[:, None]).T @ (X * W[:, None]))
    return float(coef[0]), float(math.sqrt(cov[0, 0]))


def mdp_probe(plan: SimulationPlan, interval, rho: float = 0.1, threads: int = 1) -> list:
    """Normalized log-probabilities of ``(S_n - E S_n) / (sigma_n a_n)`` falling in `interval`."""
    cdfs = simulate(plan, threads)
    return mdp_table({n: c.sorted_samples for n, c in cdfs.items()}, interval, rho)
