"""Discrete finite measure spaces and functions living on them.

A control is stored as one value per lattice point; integrals over the
underlying measure space become weighted sums with the per-point weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidExponentError, SetupError


@dataclass(frozen=True, eq=False)
class MeasureSpace:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size == 0:
            raise SetupError("measure space needs at least one point")
        if not np.all(np.isfinite(w)) or np.any(w <= 0.0):
            raise SetupError("measure weights must be finite and strictly positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def point_count(self) -> int:
        return self.weights.size

    @property
    def total_measure(self) -> float:
        return float(self.weights.sum())

    def same_as(self, other: MeasureSpace) -> bool:
        return self is other or (
            self.point_count == other.point_count
            and np.array_equal(self.weights, other.weights)
        )

    def function(self, values) -> GridFunction:
        return GridFunction(self, values)

    def constant(self, value: float) -> GridFunction:
        return GridFunction(self, np.full(self.point_count, float(value)))

    def zeros(self) -> GridFunction:
        return self.constant(0.0)


@dataclass(frozen=True, eq=False)
class GridFunction:
    space: MeasureSpace
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.space.point_count:
            raise DimensionError(
                f"got {v.size} values for a space of {self.space.point_count} points"
            )
        object.__setattr__(self, "values", v)

    def _check(self, other: GridFunction):
        if not self.space.same_as(other.space):
            raise DimensionError("grid functions live on different measure spaces")

    def with_values(self, values) -> GridFunction:
        return GridFunction(self.space, values)

    def __add__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return self.with_values(self.values + other.values)
        return self.with_values(self.values + other)

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return self.with_values(self.values - other.values)
        return self.with_values(self.values - other)

    def __mul__(self, scalar):
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)

    def __truediv__(self, scalar):
        return self.with_values(self.values / float(scalar))


@dataclass(frozen=True)
class BoxBounds:
    """Pointwise bounds ``lower <= u <= upper`` with possibly infinite sides.

    ``exponent_p`` is the integrability exponent of the control space; when it
    exceeds 2 both bounds have to be finite.
    """

    lower: float = -np.inf
    upper: float = np.inf
    exponent_p: float = 2.0

    def __post_init__(self):
        lo, up, p = float(self.lower), float(self.upper), float(self.exponent_p)
        if np.isnan(lo) or np.isnan(up) or not lo < up:
            raise SetupError(f"need lower < upper, got [{lo}, {up}]")
        if lo == np.inf or up == -np.inf:
            raise SetupError("bounds must leave a nonempty admissible set")
        if not p >= 2.0:
            raise SetupError("exponent_p must lie in [2, inf]")
        if p > 2.0 and not (np.isfinite(lo) and np.isfinite(up)):
            raise SetupError("finite bounds are required when exponent_p > 2")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        object.__setattr__(self, "exponent_p", p)

    def contains(self, v: GridFunction | np.ndarray) -> bool:
        x = v.values if isinstance(v, GridFunction) else np.asarray(v)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass(frozen=True)
class ActiveSetPartition:
    lower_active: np.ndarray = field(repr=False)
    upper_active: np.ndarray = field(repr=False)
    free: np.ndarray = field(repr=False)

    @classmethod
    def from_masks(cls, lower: np.ndarray, upper: np.ndarray) -> ActiveSetPartition:
        free = ~(lower | upper)
        return cls(np.flatnonzero(lower), np.flatnonzero(upper), np.flatnonzero(free))

    @property
    def counts(self) -> tuple[int, int, int]:
        """(free, lower, upper) sizes, the column order of convergence tables."""
        return self.free.size, self.lower_active.size, self.upper_active.size


def weighted_norm(v: GridFunction, q: float = 2.0) -> float:
    """Discrete L^q norm ``(sum_i w_i |v_i|^q)^(1/q)``; max |v_i| for q = inf."""
    q = float(q)
    if np.isnan(q) or q < 1.0:
        raise InvalidExponentError(f"exponent must be >= 1, got {q}")
    a = np.abs(v.values)
    if q == np.inf:
        return float(a.max())
    amax = a.max()
    if amax == 0.0:
        return 0.0
    # scaling by the max keeps large q from overflowing
    return float(amax * np.sum(v.space.weights * (a / amax) ** q) ** (1.0 / q))


def weighted_inner(v: GridFunction, w: GridFunction) -> float:
    v._check(w)
    return float(np.dot(v.space.weights * v.values, w.values))


def project_box(v: GridFunction, b: BoxBounds) -> GridFunction:
    return v.with_values(np.clip(v.values, b.lower, b.upper))


def classify_active(v: GridFunction, b: BoxBounds, tol: float = 0.0) -> ActiveSetPartition:
    """Split lattice points into lower-active, upper-active and free sets.

    A point is lower-active when ``v_i <= lower + tol``; lower activity wins
    when both tests hold so that the three sets always partition the points.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    x = v.values
    lower = x <= b.lower + tol if np.isfinite(b.lower) else np.zeros(x.size, bool)
    upper = x >= b.upper - tol if np.isfinite(b.upper) else np.zeros(x.size, bool)
    upper &= ~lower
    return ActiveSetPartition.from_masks(lower, upper)
