"""Weighted grids, grid functions and the norms used throughout the package.

A :class:`Grid` is a finite measure space: every cell carries a positive
weight (its Lebesgue measure) and a centre coordinate.  Grid functions hold
one value per cell; indicators hold one flag per cell.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Grid",
    "GridFunction",
    "Indicator",
    "GridMismatchError",
    "fsum",
    "inner",
    "default_zero_tol",
    "l0_measure",
    "weighted_norm_sq",
    "support",
    "indicator_l1_distance",
    "write_grid_function",
    "read_grid_function",
]


class GridMismatchError(ValueError):
    """Raised when two objects that must share a grid do not."""


def fsum(values) -> float:
    """Correctly rounded, order-independent sum of a float array."""
    return math.fsum(np.asarray(values, dtype=float).ravel())


@dataclass(frozen=True, eq=False)
class Grid:
    """Cells with positive weights and centre coordinates.

    ``shape`` is the logical resolution (``(n,)`` or ``(nx, ny)``); cells are
    ordered lexicographically by their multi-index, i.e. C order on ``shape``.
    ``spacing`` is set for uniform grids and ``None`` for general weights.
    """

    weights: np.ndarray
    coords: np.ndarray
    shape: tuple
    spacing: tuple | None = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        x = np.array(self.coords, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if w.size == 0:
            raise ValueError("grid must have at least one cell")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("cell weights must be positive and finite")
        if x.shape[0] != w.size:
            raise ValueError("one coordinate per cell required")
        if int(np.prod(self.shape)) != w.size:
            raise ValueError(f"shape {self.shape} does not match {w.size} cells")
        w.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "coords", x)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @classmethod
    def uniform(cls, extents, resolution) -> "Grid":
        """Uniform cell-centred grid on ``[0, e_1] x ... x [0, e_d]``, d in {1, 2}."""
        extents = tuple(float(e) for e in np.atleast_1d(extents))
        resolution = tuple(int(r) for r in np.atleast_1d(resolution))
        if len(extents) != len(resolution) or len(extents) not in (1, 2):
            raise ValueError("extents and resolution must both have length 1 or 2")
        if any(e <= 0 for e in extents):
            raise ValueError("extents must be positive")
        if any(r < 1 for r in resolution):
            raise ValueError("resolution must be positive")
        spacing = tuple(e / r for e, r in zip(extents, resolution))
        axes = [(np.arange(r) + 0.5) * h for r, h in zip(resolution, spacing)]
        mesh = np.meshgrid(*axes, indexing="ij")
        coords = np.stack([m.ravel() for m in mesh], axis=1)
        weights = np.full(coords.shape[0], float(np.prod(spacing)))
        return cls(weights, coords, resolution, spacing)

    @classmethod
    def from_weights(cls, weights, coords=None) -> "Grid":
        """1-D grid with arbitrary weights; coordinates default to cell midpoints."""
        w = np.asarray(weights, dtype=float).ravel()
        if coords is None:
            right = np.cumsum(w)
            coords = right - 0.5 * w
        return cls(w, coords, (w.size,))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def total_measure(self) -> float:
        return fsum(self.weights)

    @property
    def max_weight(self) -> float:
        return float(self.weights.max())

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.coords, other.coords)
        )

    __hash__ = object.__hash__

    def zeros(self) -> "GridFunction":
        return GridFunction(self, np.zeros(self.size))

    def function(self, values) -> "GridFunction":
        return GridFunction(self, values)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """One real value per cell of ``grid``; values are stored read-only."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size != self.grid.size:
            raise ValueError(
                f"expected {self.grid.size} values, got {v.size}"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def _other(self, other):
        if isinstance(other, GridFunction):
            _check_same_grid(self.grid, other.grid)
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.grid, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - self._other(other))

    def __rsub__(self, other):
        return GridFunction(self.grid, self._other(other) - self.values)

    def __mul__(self, other):
        return GridFunction(self.grid, self.values * self._other(other))

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.grid, -self.values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True, eq=False)
class Indicator:
    """Characteristic function of a set of cells."""

    grid: Grid
    flags: np.ndarray

    def __post_init__(self):
        f = np.array(self.flags, dtype=bool).ravel()
        if f.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} flags, got {f.size}")
        f.setflags(write=False)
        object.__setattr__(self, "flags", f)

    @property
    def measure(self) -> float:
        return fsum(self.grid.weights[self.flags])

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    def __eq__(self, other):
        if not isinstance(other, Indicator):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.flags, other.flags)

    __hash__ = object.__hash__


def _check_same_grid(a: Grid, b: Grid):
    if not a == b:
        raise GridMismatchError("objects live on different grids")


def inner(u: GridFunction, v: GridFunction) -> float:
    """Weighted L2 inner product."""
    _check_same_grid(u.grid, v.grid)
    return fsum(u.grid.weights * u.values * v.values)


def default_zero_tol(u: GridFunction) -> float:
    return 1e-12 * (1.0 + u.max_abs())


def support(u: GridFunction, zero_tol: float | None = None) -> Indicator:
    """Cells where ``|u| > zero_tol``."""
    if zero_tol is None:
        zero_tol = default_zero_tol(u)
    if zero_tol < 0:
        raise ValueError("zero_tol must be non-negative")
    return Indicator(u.grid, np.abs(u.values) > zero_tol)


def l0_measure(u: GridFunction, zero_tol: float | None = None) -> float:
    """Measure of the support of ``u``."""
    return support(u, zero_tol).measure


def weighted_norm_sq(u: GridFunction) -> float:
    """Squared weighted L2 norm, sum of ``weight * u**2``."""
    return fsum(u.grid.weights * u.values * u.values)


def indicator_l1_distance(a: Indicator, b: Indicator) -> float:
    """L1 distance of two characteristic functions: measure of the symmetric difference."""
    _check_same_grid(a.grid, b.grid)
    return fsum(a.grid.weights[a.flags != b.flags])


# -- CSV exchange -----------------------------------------------------------

_AXES = ("x", "y")


def _fmt(v: float) -> str:
    return repr(float(v)) if not math.isfinite(v) else format(float(v), ".17g")


def write_grid_function(path, u: GridFunction) -> None:
    """Write ``index, x[, y], value`` rows with 17 significant digits."""
    path = Path(path)
    header = ["index", *_AXES[: u.grid.dim], "value"]
    with path.open("w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, (x, v) in enumerate(zip(u.grid.coords, u.values)):
            writer.writerow([i, *(_fmt(c) for c in x), _fmt(v)])


def read_grid_function(path, grid: Grid | None = None) -> GridFunction:
    """Read a CSV written by :func:`write_grid_function`.

    When ``grid`` is given, the file must have one row per cell in cell order
    and coordinates are checked against it; otherwise a grid with unit
    weights is built from the coordinates in the file.
    """
    path = Path(path)
    with path.open(newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if header[0] != "index" or header[-1] != "value":
        raise ValueError(f"{path}: expected columns index, coordinates..., value")
    ncoord = len(header) - 2
    try:
        index = np.array([int(r[0]) for r in rows])
        coords = np.array([[float(c) for c in r[1:-1]] for r in rows]).reshape(-1, ncoord)
        values = np.array([float(r[-1]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed row ({exc})") from exc
    if not np.array_equal(index, np.arange(len(rows))):
        raise ValueError(f"{path}: indices must be 0..n-1 in order")
    if grid is None:
        grid = Grid(np.ones(len(rows)), coords, (len(rows),))
    else:
        if len(rows) != grid.size or ncoord != grid.dim:
            raise GridMismatchError(f"{path}: does not match grid of {grid.size} cells")
        if not np.allclose(coords, grid.coords, rtol=1e-12, atol=1e-14):
            raise GridMismatchError(f"{path}: coordinates do not match grid")
    return GridFunction(grid, values)
