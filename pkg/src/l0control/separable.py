"""Exact minimisation of separable integral functionals under a support-measure budget.

The problem is

    minimise  sum_x w(x) g(x, u(x))   subject to  ||u||_0 <= tau,

where ``g(x, .)`` is a per-cell integrand.  Off the support the optimal
control is zero; on the support it is the pointwise minimiser of ``g``.  The
choice of support only depends on the gains

    tilde_v(x) = min_v g(x, v) - g(x, 0) <= 0,

and a threshold ``s <= 0`` on these gains separates selected from
non-selected cells.  ``lambda = -s`` acts as multiplier of the budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import (
    Grid,
    GridFunction,
    Indicator,
    _check_same_grid,
    fsum,
    l0_measure,
)

__all__ = [
    "InvalidIntegrandError",
    "SeparableIntegrand",
    "QuadraticIntegrand",
    "L0Solution",
    "PenalizedReport",
    "integral",
    "compute_tilde_v",
    "select_support",
    "solve_l0",
    "brute_force_l0",
    "check_penalized_equivalence",
]

BRUTE_FORCE_MAX_CELLS = 20


class InvalidIntegrandError(ValueError):
    """The integrand is not finite at zero or has no finite pointwise minimiser."""


class SeparableIntegrand:
    """Per-cell family ``g(x, .)``.

    Subclasses implement :meth:`evaluate` and :meth:`pointwise_min`, both
    vectorised over all cells.  ``+inf`` is an admissible value away from
    ``u = 0``.
    """

    def evaluate(self, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pointwise_min(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(argmin, min)`` per cell."""
        raise NotImplementedError

    def at_zero(self) -> np.ndarray:
        return self.evaluate(np.zeros(self.size))

    def tilde_v(self) -> np.ndarray:
        _, m = self.pointwise_min()
        return np.minimum(m - self.at_zero(), 0.0)

    @property
    def size(self) -> int:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class QuadraticIntegrand(SeparableIntegrand):
    """``g(x, u) = a(x) u + (q/2) (u - c(x))**2 + offset(x)``.

    ``q`` is a positive scalar or per-cell array.
    """

    a: np.ndarray
    c: np.ndarray
    q: float | np.ndarray = 1.0
    offset: np.ndarray | float = 0.0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        c = np.asarray(self.c, dtype=float).ravel()
        if a.shape != c.shape:
            raise ValueError("a and c must have the same length")
        q = np.broadcast_to(np.asarray(self.q, dtype=float), a.shape).copy()
        offset = np.broadcast_to(np.asarray(self.offset, dtype=float), a.shape).copy()
        if np.any(q <= 0):
            raise InvalidIntegrandError("curvature q must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "offset", offset)

    @property
    def size(self) -> int:
        return self.a.size

    def evaluate(self, values):
        u = np.asarray(values, dtype=float)
        return self.a * u + 0.5 * self.q * (u - self.c) ** 2 + self.offset

    def pointwise_min(self):
        ustar = self.c - self.a / self.q
        return ustar, self.evaluate(ustar)

    def tilde_v(self):
        # closed form; avoids cancellation against large offsets
        ustar = self.c - self.a / self.q
        return -0.5 * self.q * ustar**2


@dataclass(frozen=True, eq=False)
class L0Solution:
    """Minimiser of a separable problem together with its threshold data.

    ``lam`` is the multiplier ``-s``.
    """

    u: GridFunction
    s: float
    lam: float
    support: Indicator
    support_measure: float
    objective: float
    tau: float
    tilde_v: GridFunction = field(repr=False)


@dataclass(frozen=True)
class PenalizedReport:
    """Worst margins of the penalised comparisons, negative means beaten.

    ``margin_l0`` compares ``G(u) + lam ||u||_0``; ``margin_excess`` compares
    ``G(u) + lam (||u||_0 - tau)^+``; ``margin_realized`` uses the realised
    support measure of the solution in place of ``tau``.
    """

    margin_l0: float
    margin_excess: float
    margin_realized: float
    violations_l0: tuple
    violations_excess: tuple
    violations_realized: tuple
    tol: float

    @property
    def ok(self) -> bool:
        return not (self.violations_l0 or self.violations_excess)


def integral(g: SeparableIntegrand, grid: Grid, u: GridFunction) -> float:
    """``sum_x w(x) g(x, u(x))``, summed exactly."""
    vals = g.evaluate(u.values)
    if np.any(np.isposinf(vals)):
        return math.inf
    return fsum(grid.weights * vals)


def _check_integrand(g: SeparableIntegrand, grid: Grid):
    if g.size != grid.size:
        raise ValueError(f"integrand has {g.size} cells, grid has {grid.size}")
    if not np.all(np.isfinite(g.at_zero())):
        raise InvalidIntegrandError("g(x, 0) must be finite on every cell")


def compute_tilde_v(g: SeparableIntegrand, grid: Grid) -> GridFunction:
    """Gain of the best non-zero value over zero, per cell (always <= 0)."""
    _check_integrand(g, grid)
    ustar, m = g.pointwise_min()
    if not (np.all(np.isfinite(ustar)) and np.all(np.isfinite(m))):
        raise InvalidIntegrandError("pointwise minimiser must be finite")
    return GridFunction(grid, g.tilde_v())


def _fits(weights: np.ndarray, idx, tau: float) -> bool:
    return fsum(weights[list(idx)]) <= tau


def _greedy(tv: np.ndarray, w: np.ndarray, tau: float, order: np.ndarray) -> list:
    """Threshold selection: the longest prefix of ``order`` that fits.

    Inside the tie group at the cut, later cells may still be taken if they
    fit, which keeps the selection sandwiched between the sub-level sets.
    """
    chosen: list = []
    cut_value = None
    for i in order:
        if cut_value is not None and tv[i] != cut_value:
            break
        if _fits(w, chosen + [i], tau):
            chosen.append(i)
        elif cut_value is None:
            cut_value = tv[i]
    return chosen


def _uniform_count(w0: float, n_neg: int, tau: float) -> int:
    k = min(n_neg, int(tau // w0))
    while k > 0 and math.fsum([w0] * k) > tau:
        k -= 1
    while k < n_neg and math.fsum([w0] * (k + 1)) <= tau:
        k += 1
    return k


def _branch_and_bound(gain: np.ndarray, w: np.ndarray, tau: float, incumbent: list):
    """Exact 0/1 knapsack over items already sorted by decreasing gain density.

    Returns the best index list into ``gain``.
    """
    n = gain.size
    best_set = list(incumbent)
    best = fsum(gain[best_set]) if best_set else 0.0

    def bound(i, cap):
        total = 0.0
        for j in range(i, n):
            if w[j] <= cap:
                cap -= w[j]
                total += gain[j]
            else:
                total += gain[j] * cap / w[j]
                break
        return total

    # explicit stack: (next item, chosen items, gain so far)
    stack = [(0, [], 0.0)]
    while stack:
        i, chosen, got = stack.pop()
        if i == n:
            if got > best:
                best, best_set = got, chosen
            continue
        cap = tau - fsum(w[chosen]) if chosen else tau
        if got + bound(i, cap) <= best * (1 + 1e-13) + 1e-300:
            continue
        stack.append((i + 1, chosen, got))
        if _fits(w, chosen + [i], tau):
            stack.append((i + 1, chosen + [i], got + gain[i]))
    return best_set


def _threshold(tv: np.ndarray, flags: np.ndarray) -> float:
    neg = tv < 0
    excluded = neg & ~flags
    if not np.any(excluded):
        return 0.0
    most_negative_excluded = float(tv[excluded].min())
    selected = tv[flags]
    if selected.size == 0:
        return most_negative_excluded
    least_negative_selected = float(selected.max())
    if most_negative_excluded == least_negative_selected:
        return most_negative_excluded
    return least_negative_selected


def select_support(tilde_v: GridFunction, tau: float) -> tuple[Indicator, float]:
    """Optimal support for the gains ``tilde_v`` under the budget ``tau``.

    Cells are ranked by ``(tilde_v, index)``; cells with zero gain are never
    selected.  On uniform grids the best prefix is optimal.  With mixed
    weights the prefix is only an incumbent for an exact branch-and-bound
    search, and it is kept unless strictly beaten.

    Returns the support and the threshold ``s <= 0``.
    """
    grid = tilde_v.grid
    tv = tilde_v.values
    w = grid.weights
    if not 0 < tau < grid.total_measure:
        raise ValueError(f"tau must lie in (0, {grid.total_measure}), got {tau}")
    if np.any(tv > 0):
        raise ValueError("tilde_v must be non-positive")

    order = np.lexsort((np.arange(tv.size), tv))
    order = order[tv[order] < 0]
    if grid.is_uniform:
        chosen = list(order[: _uniform_count(w[0], order.size, tau)])
    else:
        chosen = _greedy(tv, w, tau, order)
        pos = {c: k for k, c in enumerate(order)}
        gain = -w[order] * tv[order]
        best = _branch_and_bound(gain, w[order], tau, [pos[c] for c in chosen])
        candidate = sorted(order[best])
        prefix_value = fsum(w[chosen] * tv[chosen])
        candidate_value = fsum(w[candidate] * tv[candidate])
        if candidate_value < prefix_value - 1e-14 * (1.0 + abs(prefix_value)):
            chosen = candidate

    flags = np.zeros(tv.size, dtype=bool)
    flags[np.asarray(chosen, dtype=int)] = True
    return Indicator(grid, flags), _threshold(tv, flags)


def _solution(g, grid, tau, tilde_v, flags, s) -> L0Solution:
    ustar, _ = g.pointwise_min()
    u = GridFunction(grid, np.where(flags, ustar, 0.0))
    supp = Indicator(grid, flags)
    return L0Solution(
        u=u,
        s=float(s),
        lam=float(-s) + 0.0,
        support=supp,
        support_measure=supp.measure,
        objective=integral(g, grid, u),
        tau=float(tau),
        tilde_v=tilde_v,
    )


def solve_l0(g: SeparableIntegrand, grid: Grid, tau: float) -> L0Solution:
    """Global minimiser of ``sum w g(x, u)`` over ``||u||_0 <= tau``."""
    tv = compute_tilde_v(g, grid)
    supp, s = select_support(tv, tau)
    return _solution(g, grid, tau, tv, supp.flags, s)


def brute_force_l0(
    g: SeparableIntegrand, grid: Grid, tau: float, max_cells: int = BRUTE_FORCE_MAX_CELLS
) -> L0Solution:
    """Enumerate every support of measure ``<= tau``; test oracle for :func:`solve_l0`.

    Ties are broken by the smallest subset bit mask (bit ``i`` is cell ``i``).
    """
    n = grid.size
    if n > max_cells:
        raise ValueError(f"brute force limited to {max_cells} cells, got {n}")
    if not 0 < tau < grid.total_measure:
        raise ValueError(f"tau must lie in (0, {grid.total_measure}), got {tau}")
    tv = compute_tilde_v(g, grid)
    w = grid.weights
    wv = w * tv.values
    # subset sums indexed by bit mask, built by doubling
    approx_measure = np.zeros(1)
    gains = np.zeros(1)
    for i in range(n):
        approx_measure = np.concatenate([approx_measure, approx_measure + w[i]])
        gains = np.concatenate([gains, gains + wv[i]])

    def flags_of(k):
        return ((int(k) >> np.arange(n)) & 1).astype(bool)

    feasible = approx_measure <= tau
    # settle subsets whose floating-point measure is too close to tau to trust
    borderline = np.flatnonzero(np.abs(approx_measure - tau) <= 1e-9 * (1.0 + tau))
    for k in borderline:
        feasible[k] = fsum(w[flags_of(k)]) <= tau
    gains[~feasible] = np.inf
    lowest = gains.min()
    near = np.flatnonzero(gains <= lowest + 1e-12 * (1.0 + abs(lowest)))
    exact = [fsum(wv[flags_of(k)]) for k in near]
    flags = flags_of(near[int(np.argmin(exact))])
    return _solution(g, grid, tau, tv, flags, _threshold(tv.values, flags))


def check_penalized_equivalence(
    sol: L0Solution,
    g: SeparableIntegrand,
    grid: Grid,
    trial_points,
    tol: float = 1e-10,
    zero_tol: float | None = 0.0,
) -> PenalizedReport:
    """Compare ``sol`` against trial controls in the penalised forms.

    Every margin is ``penalised(trial) - penalised(sol)``; a trial is a
    violation if its margin is below ``-tol``.
    """
    lam = sol.lam
    base = sol.objective
    sol_l0 = l0_measure(sol.u, zero_tol)
    margins = {"l0": [], "excess": [], "realized": []}
    for trial in trial_points:
        _check_same_grid(trial.grid, grid)
        value = integral(g, grid, trial)
        m = l0_measure(trial, zero_tol)
        margins["l0"].append((value + lam * m) - (base + lam * sol_l0))
        margins["excess"].append((value + lam * max(m - sol.tau, 0.0)) - base)
        margins["realized"].append((value + lam * max(m - sol_l0, 0.0)) - base)

    def worst(key):
        vals = margins[key]
        return min(vals) if vals else math.inf

    def bad(key):
        return tuple(i for i, v in enumerate(margins[key]) if v < -tol)

    return PenalizedReport(
        margin_l0=worst("l0"),
        margin_excess=worst("excess"),
        margin_realized=worst("realized"),
        violations_l0=bad("l0"),
        violations_excess=bad("excess"),
        violations_realized=bad("realized"),
        tol=tol,
    )
