"""Finite-state stochastic kernels and Doeblin minorization certificates."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import CapExceeded, DimensionMismatch, NegativeEntry, RowSumViolation

STOCHASTIC_TOL = 1e-12
RENORMALIZE_TOL = 1e-9


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def validate_distribution(weights, tol=STOCHASTIC_TOL):
    """Return `weights` as a read-only probability vector.

    Sums off by less than 1e-9 are renormalized; larger deviations raise.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise DimensionMismatch(f"expected a nonempty vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite probability weight")
    neg = np.flatnonzero(w < 0)
    if neg.size:
        raise NegativeEntry(0, int(neg[0]), float(w[neg[0]]))
    total = w.sum()
    if abs(total - 1.0) > tol:
        if abs(total - 1.0) >= RENORMALIZE_TOL:
            raise RowSumViolation(0, float(total))
        w = w / total
    return _frozen(w)


@dataclass(frozen=True)
class StochasticKernel:
    """Row-stochastic matrix; ``matrix[x, y]`` is the probability of x -> y."""

    matrix: np.ndarray
    labels: Optional[tuple] = None

    @property
    def n_source(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_target(self) -> int:
        return self.matrix.shape[1]

    @property
    def is_square(self) -> bool:
        return self.n_source == self.n_target

    def push(self, law) -> np.ndarray:
        """Action on measures (row vector times matrix)."""
        law = np.asarray(law, dtype=float)
        if law.shape != (self.n_source,):
            raise DimensionMismatch(f"measure of length {law.shape} against {self.n_source} source states")
        return law @ self.matrix

    def apply(self, g) -> np.ndarray:
        """Action on functions: ``(Pg)(x) = sum_y P(x, y) g(y)``."""
        g = np.asarray(g, dtype=float)
        if g.shape != (self.n_target,):
            raise DimensionMismatch(f"function of length {g.shape} against {self.n_target} target states")
        return self.matrix @ g

    def __eq__(self, other):
        if not isinstance(other, StochasticKernel):
            return NotImplemented
        return self.matrix.shape == other.matrix.shape and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash((self.matrix.shape, self.matrix.tobytes()))


def validate_kernel(rows, labels=None) -> StochasticKernel:
    """Check that `rows` is a rectangular row-stochastic matrix.

    Raises
    ------
    NegativeEntry
        If any entry is negative.
    RowSumViolation
        If a row sum deviates from one by 1e-9 or more. Deviations between
        1e-12 and 1e-9 are renormalized away.
    """
    try:
        m = np.array(rows, dtype=float)
    except ValueError as exc:
        raise DimensionMismatch(f"kernel rows are not rectangular: {exc}") from None
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise DimensionMismatch(f"kernel must be a nonempty matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("kernel contains non-finite entries")
    neg = np.argwhere(m < 0)
    if neg.size:
        r, c = (int(v) for v in neg[0])
        raise NegativeEntry(r, c, float(m[r, c]))
    sums = m.sum(axis=1)
    dev = np.abs(sums - 1.0)
    bad = np.flatnonzero(dev >= RENORMALIZE_TOL)
    if bad.size:
        r = int(bad[0])
        raise RowSumViolation(r, float(sums[r]))
    drift = dev > STOCHASTIC_TOL
    if drift.any():
        m[drift] /= sums[drift, None]
    if labels is not None:
        labels = tuple(labels)
        if len(labels) != m.shape[0]:
            raise DimensionMismatch("one label per source state required")
    return StochasticKernel(_frozen(m), labels)


def identity_kernel(n: int) -> StochasticKernel:
    return StochasticKernel(_frozen(np.eye(n)))


def compose(first: StochasticKernel, second: StochasticKernel) -> StochasticKernel:
    """Kernel of "first, then second" (the matrix product)."""
    if first.n_target != second.n_source:
        raise DimensionMismatch(f"cannot compose {first.matrix.shape} with {second.matrix.shape}")
    return StochasticKernel(_frozen(_renormalize(first.matrix @ second.matrix)))


def _renormalize(m):
    # float drift from long products; sums stay within ~1e-15 per product
    return m / m.sum(axis=1, keepdims=True)


def matrix_power(kernel: StochasticKernel, n: int) -> StochasticKernel:
    if not kernel.is_square:
        raise DimensionMismatch("power of a non-square kernel")
    return StochasticKernel(_frozen(_renormalize(np.linalg.matrix_power(kernel.matrix, n))))


def tv_distance(a, b) -> float:
    """Total variation distance, half the L1 distance on a finite space."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"measures of shapes {a.shape} and {b.shape}")
    return float(0.5 * np.abs(a - b).sum())


def dobrushin_coefficient(kernel: StochasticKernel) -> float:
    """Largest total variation distance between two rows."""
    m = kernel.matrix
    return float(0.5 * np.abs(m[:, None, :] - m[None, :, :]).sum(axis=2).max())


def stationary_distribution(kernel: StochasticKernel) -> np.ndarray:
    """Solve ``pi P = pi`` with ``sum(pi) = 1`` by least squares."""
    if not kernel.is_square:
        raise DimensionMismatch("stationary law needs a square kernel")
    n = kernel.n_source
    a = np.vstack([kernel.matrix.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


@dataclass(frozen=True)
class MinorizationCertificate:
    """Witness of ``P = gamma * (1 ⊗ m) + (1 - gamma) * Q``.

    ``minorizer`` is ``None`` when ``gamma == 0`` (no minorization), in which
    case ``residual`` is the kernel itself.
    """

    gamma: float
    minorizer: Optional[np.ndarray]
    residual: StochasticKernel
    lag: int = 1

    @property
    def has_minorization(self) -> bool:
        return self.gamma > 0.0

    def reconstruct(self) -> np.ndarray:
        q = self.residual.matrix
        if self.minorizer is None:
            return q.copy()
        return self.gamma * np.broadcast_to(self.minorizer, q.shape) + (1.0 - self.gamma) * q

    @property
    def sub_measure(self) -> np.ndarray:
        """``gamma * m``, the columnwise minima; zero when there is no minorization."""
        if self.minorizer is None:
            return np.zeros(self.residual.n_target)
        return self.gamma * self.minorizer


def doeblin_extract(kernel: StochasticKernel, lag: int = 1) -> MinorizationCertificate:
    """Maximal Doeblin certificate of `kernel` from its columnwise minima.

    Any feasible pair has ``gamma' m'(y) <= min_x P(x, y)`` for every y, so
    summing over y shows no larger gamma exists.
    """
    if lag < 1:
        raise ValueError("lag must be a positive integer")
    p = kernel.matrix
    colmin = p.min(axis=0)
    gamma = float(colmin.sum())
    if gamma <= 0.0:
        return MinorizationCertificate(0.0, None, kernel, lag)
    gamma = min(gamma, 1.0)
    minorizer = _frozen(colmin / colmin.sum())
    if gamma >= 1.0 - 1e-15:
        # residual weight is zero, any kernel works; identity when square
        if kernel.is_square:
            residual = identity_kernel(kernel.n_target)
        else:
            residual = StochasticKernel(_frozen(np.tile(minorizer, (kernel.n_source, 1))))
        return MinorizationCertificate(1.0, minorizer, residual, lag)
    q = (p - colmin[None, :]) / (1.0 - gamma)
    q = np.clip(q, 0.0, None)
    q = q / q.sum(axis=1, keepdims=True)
    return MinorizationCertificate(gamma, minorizer, StochasticKernel(_frozen(q)), lag)


def minimal_doeblin_lag(kernel: StochasticKernel, threshold: float, cap: int = 64):
    """Smallest ``n <= cap`` whose n-step kernel certifies ``gamma >= threshold``.

    Returns ``(lag, certificate)``; raises :class:`CapExceeded` otherwise.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if not kernel.is_square:
        raise DimensionMismatch("lag search needs a square kernel")
    best = 0.0
    power = kernel
    for n in range(1, cap + 1):
        if n > 1:
            power = compose(power, kernel)
        cert = doeblin_extract(power, lag=n)
        best = max(best, cert.gamma)
        if cert.gamma >= threshold:
            return n, cert
    raise CapExceeded(cap, best)


def read_kernel_csv(path) -> StochasticKernel:
    rows = []
    with open(path, newline="") as fh:
        for line in csv.reader(row for row in fh if row.strip() and not row.lstrip().startswith("#")):
            rows.append([float(v) for v in line])
    return validate_kernel(rows)


def write_kernel_csv(path, kernel: StochasticKernel, comment: Optional[Sequence[str]] = None):
    with open(path, "w", newline="") as fh:
        for c in comment or ():
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in kernel.matrix:
            w.writerow([repr(float(v)) for v in row])
