"""Exception hierarchy.

Every error raised for a violated mathematical precondition derives from
:class:`DoeblinError`; the CLI maps that family to exit code 3.
"""


class DoeblinError(Exception):
    """Base class for precondition failures in the numerical modules."""


class DimensionMismatch(DoeblinError, ValueError):
    pass


class NegativeEntry(DoeblinError, ValueError):
    def __init__(self, row, col, value=None):
        self.row, self.col, self.value = row, col, value
        super().__init__(f"negative entry at ({row}, {col}): {value!r}")


class RowSumViolation(DoeblinError, ValueError):
    def __init__(self, row, total):
        self.row, self.sum = row, total
        super().__init__(f"row {row} sums to {total!r}")


class CapExceeded(DoeblinError):
    def __init__(self, cap, best_gamma):
        self.cap, self.best_gamma = cap, best_gamma
        super().__init__(f"no lag <= {cap} reaches the threshold (best gamma {best_gamma:.6g})")


class IndexOutOfRange(DoeblinError, IndexError):
    pass


class WindowExhausted(DoeblinError):
    def __init__(self, depth_reached):
        self.depth_reached = depth_reached
        super().__init__(f"schedule recursion left the index window at depth {depth_reached}")


class BoundDoesNotVanish(DoeblinError):
    def __init__(self, best_bound):
        self.best_bound = best_bound
        super().__init__(f"contraction bound stalls at {best_bound:.6g}")


class Inconclusive(DoeblinError):
    def __init__(self, horizon):
        self.horizon = horizon
        super().__init__(f"variance trend ambiguous at horizon {horizon}")


class ZeroVariance(DoeblinError):
    def __init__(self, n):
        self.n = n
        super().__init__(f"sigma_n vanishes at n={n}")


class InsufficientPoints(DoeblinError):
    pass


class AllPointsBelowNoise(DoeblinError):
    pass


class WindowUnavailable(DoeblinError, IndexError):
    pass


class InsufficientPastDepth(DoeblinError):
    def __init__(self, best_bound):
        self.best_bound = best_bound
        super().__init__(f"past depth exhausted with certified error {best_bound:.6g}")


class NotCrossed(DoeblinError):
    def __init__(self, horizon):
        self.horizon = horizon
        super().__init__(f"threshold not crossed within horizon {horizon}")


class DegenerateVariance(DoeblinError):
    pass


class ConfigInvalid(Exception):
    def __init__(self, path, message):
        self.path, self.message = path, message
        super().__init__(f"{path}: {message}")


class IoFailure(Exception):
    def __init__(self, path, message):
        self.path, self.message = path, message
        super().__init__(f"{path}: {message}")
