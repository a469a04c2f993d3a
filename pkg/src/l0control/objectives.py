"""Smooth parts ``f`` of the composite objective ``f(u) + alpha/2 ||u||^2``.

All objectives work in the weighted L2 space of their grid: gradients are
Riesz representers with respect to the cell-weighted inner product, and
Lipschitz constants are measured in the weighted norm.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import Grid, GridFunction, _check_same_grid, fsum, inner, weighted_norm_sq

__all__ = [
    "SmoothObjective",
    "QuadraticObjective",
    "LinearObjective",
    "PoissonTracking",
    "CGConvergenceError",
    "LIPSCHITZ_SAFETY",
    "power_iteration",
    "poisson_matrix",
]

log = logging.getLogger(__name__)

LIPSCHITZ_SAFETY = 1.05


class CGConvergenceError(RuntimeError):
    """Conjugate gradients did not reach the requested residual."""


class SmoothObjective:
    """Contract: ``value``, ``gradient`` and a Lipschitz bound for the gradient."""

    grid: Grid

    def value(self, u: GridFunction) -> float:
        return self.value_and_gradient(u)[0]

    def gradient(self, u: GridFunction) -> GridFunction:
        return self.value_and_gradient(u)[1]

    def value_and_gradient(self, u: GridFunction) -> tuple[float, GridFunction]:
        raise NotImplementedError

    def estimate_lipschitz(self) -> float:
        raise NotImplementedError

    def lipschitz_bound(self) -> float:
        """Upper bound for the Lipschitz constant of the gradient."""
        return LIPSCHITZ_SAFETY * self.estimate_lipschitz()


def power_iteration(apply, grid: Grid, start=None, rtol=1e-12, max_iter=2000):
    """Largest eigenvalue of a weighted-self-adjoint, positive semidefinite map.

    Returns ``(estimate, converged)``.  The estimate is the Rayleigh quotient
    in the weighted inner product.
    """
    w = grid.weights
    v = np.ones(grid.size) if start is None else np.asarray(start, dtype=float).copy()
    v /= math.sqrt(fsum(w * v * v))
    estimate = 0.0
    for _ in range(max_iter):
        Tv = apply(v)
        new = fsum(w * v * Tv)
        norm = math.sqrt(fsum(w * Tv * Tv))
        if norm == 0.0:
            return 0.0, True
        v = Tv / norm
        if abs(new - estimate) <= rtol * abs(new):
            return new, True
        estimate = new
    return estimate, False


class QuadraticObjective(SmoothObjective):
    """``f(u) = 1/2 ||K u - b||^2`` on a single grid.

    ``K`` is a square matrix acting on cell values (dense array or scipy
    sparse matrix).
    """

    def __init__(self, grid: Grid, K, b=None):
        self.grid = grid
        self.K = K if sp.issparse(K) else np.asarray(K, dtype=float)
        if self.K.shape != (grid.size, grid.size):
            raise ValueError(f"K must be {grid.size}x{grid.size}")
        if b is None:
            b = grid.zeros()
        elif not isinstance(b, GridFunction):
            b = GridFunction(grid, b)
        _check_same_grid(b.grid, grid)
        self.b = b

    @classmethod
    def identity(cls, grid: Grid, b=None):
        return cls(grid, sp.identity(grid.size, format="csr"), b)

    def value_and_gradient(self, u):
        _check_same_grid(u.grid, self.grid)
        w = self.grid.weights
        r = self.K @ u.values - self.b.values
        value = 0.5 * fsum(w * r * r)
        grad = (self.K.T @ (w * r)) / w
        return value, GridFunction(self.grid, grad)

    def estimate_lipschitz(self):
        sw = np.sqrt(self.grid.weights)
        K = self.K.toarray() if sp.issparse(self.K) else self.K
        M = (sw[:, None] * K) / sw[None, :]
        return float(np.linalg.norm(M, 2) ** 2)


class LinearObjective(SmoothObjective):
    """``f(u) = <c, u>`` in the weighted inner product; the gradient is ``c``."""

    def __init__(self, grid: Grid, coefficient):
        self.grid = grid
        if not isinstance(coefficient, GridFunction):
            coefficient = GridFunction(grid, coefficient)
        self.coefficient = coefficient

    def value_and_gradient(self, u):
        return inner(self.coefficient, u), self.coefficient

    def estimate_lipschitz(self):
        return 0.0


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def poisson_matrix(grid: Grid, coefficient) -> sp.csr_matrix:
    """Cell-centred finite-difference matrix of ``-div(a grad y)`` with ``y = 0`` on the boundary.

    Interior faces use the harmonic mean of the adjacent cell coefficients.
    Boundary faces sit half a cell away from the centre and use the cell's own
    coefficient.
    """
    if grid.spacing is None:
        raise ValueError("Poisson operator needs a uniform grid")
    a = np.asarray(coefficient, dtype=float)
    a = np.broadcast_to(a, (grid.size,)).reshape(grid.shape)
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise ValueError("diffusion coefficient must be positive")
    idx = np.arange(grid.size).reshape(grid.shape)
    rows, cols, vals = [], [], []
    diag = np.zeros(grid.shape)
    for axis, h in enumerate(grid.spacing):
        n = grid.shape[axis]
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        face = _harmonic(a[lo], a[hi]) / h**2
        diag[lo] += face
        diag[hi] += face
        rows += [idx[lo].ravel(), idx[hi].ravel()]
        cols += [idx[hi].ravel(), idx[lo].ravel()]
        vals += [-face.ravel(), -face.ravel()]
        first = [slice(None)] * grid.dim
        last = [slice(None)] * grid.dim
        first[axis] = 0
        last[axis] = n - 1
        diag[tuple(first)] += 2.0 * a[tuple(first)] / h**2
        diag[tuple(last)] += 2.0 * a[tuple(last)] / h**2
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )
    return A.tocsr()


class PoissonTracking(SmoothObjective):
    """Tracking functional ``1/2 ||y_u - y_d||^2`` with ``-div(a grad y_u) = u``, ``y_u = 0`` on the boundary.

    State and adjoint equations are solved by diagonally preconditioned CG.
    """

    def __init__(self, grid: Grid, target=None, coefficient=1.0, cg_tol=1e-10, cg_maxiter=None):
        if grid.spacing is None:
            raise ValueError("PoissonTracking needs a uniform grid")
        self.grid = grid
        if target is None:
            target = grid.zeros()
        elif not isinstance(target, GridFunction):
            target = GridFunction(grid, target)
        _check_same_grid(target.grid, grid)
        self.target = target
        self.coefficient = np.broadcast_to(
            np.asarray(coefficient, dtype=float), (grid.size,)
        ).copy()
        self.A = poisson_matrix(grid, self.coefficient)
        self.cg_tol = float(cg_tol)
        self.cg_maxiter = int(cg_maxiter) if cg_maxiter else 10 * grid.size
        self._precond = sp.diags(1.0 / self.A.diagonal())

    def apply_operator(self, y: GridFunction) -> GridFunction:
        return GridFunction(self.grid, self.A @ y.values)

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        scale = max(1.0, float(np.linalg.norm(rhs)))
        limit = self.cg_tol * scale
        if not np.any(rhs):
            return np.zeros_like(rhs)
        x = np.zeros_like(rhs)
        # scipy's recursive residual can drift from the true one; restart once if needed
        for _ in range(3):
            x, info = spla.cg(
                self.A, rhs, x0=x, rtol=self.cg_tol, atol=limit,
                maxiter=self.cg_maxiter, M=self._precond,
            )
            residual = float(np.linalg.norm(self.A @ x - rhs))
            if residual <= limit:
                return x
            if info > 0:
                break
        raise CGConvergenceError(
            f"CG residual {residual:.3e} above {limit:.3e} after {self.cg_maxiter} iterations"
        )

    def solve_state(self, u: GridFunction) -> GridFunction:
        _check_same_grid(u.grid, self.grid)
        if not np.all(np.isfinite(u.values)):
            raise ValueError("control must be finite")
        return GridFunction(self.grid, self._solve(u.values))

    def solve_adjoint(self, y: GridFunction) -> GridFunction:
        """Adjoint state ``phi`` with ``A phi = y - y_d`` (``A`` is symmetric)."""
        _check_same_grid(y.grid, self.grid)
        return GridFunction(self.grid, self._solve(y.values - self.target.values))

    def value_and_gradient(self, u):
        y = self.solve_state(u)
        value = 0.5 * weighted_norm_sq(y - self.target)
        return value, self.solve_adjoint(y)

    def value(self, u):
        y = self.solve_state(u)
        return 0.5 * weighted_norm_sq(y - self.target)

    def estimate_lipschitz(self):
        estimate, converged = power_iteration(
            lambda v: self._solve(self._solve(v)), self.grid
        )
        if converged:
            return estimate
        log.warning("power iteration stagnated; falling back to eigensolver bound")
        return self._fallback_lipschitz()

    def _fallback_lipschitz(self):
        # ||A^-1||^2 from the smallest eigenvalue of A
        if self.grid.size <= 2048:
            lam_min = float(np.linalg.eigvalsh(self.A.toarray())[0])
        else:
            lam_min = float(spla.eigsh(self.A, k=1, sigma=0, which="LM")[0][0])
        return 1.0 / lam_min**2
