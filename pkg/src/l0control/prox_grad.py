"""Proximal gradient method for ``min f(u) + alpha/2 ||u||^2`` subject to ``||u||_0 <= tau``.

Each step minimises the linearised objective plus ``L/2 ||u - u_k||^2`` over
the budget set.  The subproblem is separable with a quadratic integrand, so
it is solved exactly by :func:`l0control.separable.solve_l0`: the new
iterate equals ``(L u_k - grad f(u_k)) / (L + alpha)`` on the selected cells
and zero elsewhere.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import (
    GridFunction,
    _check_same_grid,
    _fmt,
    indicator_l1_distance,
    inner,
    support,
    weighted_norm_sq,
)
from .objectives import SmoothObjective
from .separable import L0Solution, QuadraticIntegrand, solve_l0

__all__ = [
    "Backtracking",
    "ProxGradConfig",
    "IterateRecord",
    "Trajectory",
    "BacktrackingError",
    "prox_integrand",
    "prox_step",
    "backtrack_L",
    "run",
    "TRAJECTORY_COLUMNS",
]

TRAJECTORY_COLUMNS = (
    "k",
    "objective",
    "lambda",
    "step_norm_sq",
    "support_measure",
    "support_change",
    "descent_slack",
    "away_slack",
    "change_slack",
)


class BacktrackingError(RuntimeError):
    """No acceptable prox parameter within the allowed number of increases."""


@dataclass(frozen=True)
class Backtracking:
    gamma: float = 2.0
    L0: float = 1.0
    max_increases: int = 60

    def __post_init__(self):
        if self.gamma <= 1:
            raise ValueError("backtracking factor gamma must exceed 1")
        if self.L0 <= 0:
            raise ValueError("initial L0 must be positive")


@dataclass(frozen=True)
class ProxGradConfig:
    """Solver parameters.  ``L`` is required unless backtracking is enabled."""

    tau: float
    alpha: float = 0.0
    L: float | None = None
    max_iter: int = 500
    step_norm_tol: float = 0.0
    backtracking: Backtracking | None = None
    zero_tol: float | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.backtracking is None and (self.L is None or self.L <= 0):
            raise ValueError("a positive L is required without backtracking")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.step_norm_tol < 0:
            raise ValueError("step_norm_tol must be non-negative")


@dataclass(frozen=True)
class IterateRecord:
    """Diagnostics of iterate ``k``; step quantities refer to the step ``k-1 -> k``.

    Slack fields are non-negative (up to rounding) whenever the corresponding
    inequality holds; ``nan`` marks quantities that are undefined at ``k``.
    """

    k: int
    objective: float
    lambda_: float
    step_norm_sq: float
    support_measure: float
    support_change: float
    descent_slack: float = math.nan
    away_from_zero_slack: float = math.nan
    support_change_slack: float = math.nan
    comp_slack: float = math.nan
    fixed_point_residual: float = math.nan
    L: float = math.nan

    @property
    def s(self) -> float:
        return -self.lambda_

    def row(self) -> list:
        return [
            self.k, self.objective, self.lambda_, self.step_norm_sq,
            self.support_measure, self.support_change, self.descent_slack,
            self.away_from_zero_slack, self.support_change_slack,
        ]


@dataclass(frozen=True)
class Trajectory:
    config: ProxGradConfig
    records: tuple
    u: GridFunction
    termination: str
    lipschitz: float
    final_step: L0Solution | None = field(default=None, repr=False)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([r.lambda_ for r in self.records])

    @property
    def final_lambda(self) -> float:
        return self.records[-1].lambda_

    @property
    def iterations(self) -> int:
        return self.records[-1].k

    def tail_min_lambda(self, window: int = 10) -> float:
        lams = self.lambdas[1:]
        return float(np.min(lams[-window:])) if lams.size else math.nan

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRAJECTORY_COLUMNS)
            for rec in self.records:
                k, *rest = rec.row()
                writer.writerow([k, *(_fmt(v) for v in rest)])


def prox_integrand(u_k: GridFunction, grad_k: GridFunction, L: float, alpha: float) -> QuadraticIntegrand:
    """Integrand of the prox subproblem, without the constant ``f(u_k)``.

    ``g(x, u) = grad(x) (u - u_k(x)) + L/2 (u - u_k(x))**2 + alpha/2 u**2``
    """
    uk, gk = u_k.values, grad_k.values
    q = L + alpha
    centre = (L * uk - gk) / q
    offset = 0.5 * L * uk**2 - gk * uk - 0.5 * q * centre**2
    return QuadraticIntegrand(a=np.zeros_like(uk), c=centre, q=q, offset=offset)


def prox_step(u_k: GridFunction, grad_k: GridFunction, L: float, alpha: float, tau: float) -> L0Solution:
    """One exact prox step; the result's ``u``, ``lam`` and ``s`` are the new iterate and multiplier."""
    if L <= 0:
        raise ValueError("prox parameter L must be positive")
    _check_same_grid(u_k.grid, grad_k.grid)
    return solve_l0(prox_integrand(u_k, grad_k, L, alpha), u_k.grid, tau)


def backtrack_L(objective: SmoothObjective, u_k: GridFunction, candidate, L0: float,
                gamma: float = 2.0, max_increases: int = 60, f_k=None, grad_k=None):
    """Smallest ``L = L0 * gamma**j`` passing the sufficient-decrease test.

    ``candidate(L)`` returns the prox step (an :class:`L0Solution`) for ``L``.
    The test is ``f(u+) <= f(u_k) + <grad f(u_k), u+ - u_k> + L/2 ||u+ - u_k||^2``.
    Returns ``(L, step)``.
    """
    if f_k is None or grad_k is None:
        f_k, grad_k = objective.value_and_gradient(u_k)
    L = L0
    for _ in range(max_increases + 1):
        step = candidate(L)
        delta = step.u - u_k
        model = f_k + inner(grad_k, delta) + 0.5 * L * weighted_norm_sq(delta)
        if objective.value(step.u) <= model + 1e-12 * (1.0 + abs(f_k)):
            return L, step
        L *= gamma
    raise BacktrackingError(f"no acceptable L up to {L / gamma:.3e}")


def run(config: ProxGradConfig, objective: SmoothObjective, u0: GridFunction | None = None) -> Trajectory:
    """Iterate prox steps until the step norm drops below tolerance or ``max_iter``.

    Runs are deterministic: the trajectory depends only on the arguments.
    """
    grid = objective.grid
    u = grid.zeros() if u0 is None else u0
    _check_same_grid(u.grid, grid)
    alpha, tau = config.alpha, config.tau
    if not 0 < tau < grid.total_measure:
        raise ValueError(f"tau must lie in (0, {grid.total_measure}), got {tau}")

    L_f = objective.lipschitz_bound()
    bt = config.backtracking
    L = bt.L0 if bt else config.L
    if bt is None and L <= L_f:
        warnings.warn(
            f"L = {L:.6g} does not exceed the Lipschitz bound {L_f:.6g}; descent is not guaranteed",
            RuntimeWarning,
            stacklevel=2,
        )

    f, grad = objective.value_and_gradient(u)
    F = f + 0.5 * alpha * weighted_norm_sq(u)
    chi = support(u, config.zero_tol)
    records = [
        IterateRecord(
            k=0, objective=F, lambda_=math.nan, step_norm_sq=math.nan,
            support_measure=chi.measure, support_change=math.nan,
        )
    ]
    lam_prev = math.nan
    termination = "max_iter"
    step = None

    for k in range(config.max_iter):
        if bt:
            try:
                L, step = backtrack_L(
                    objective, u, lambda Lc: prox_step(u, grad, Lc, alpha, tau),
                    L0=L, gamma=bt.gamma, max_increases=bt.max_increases,
                    f_k=f, grad_k=grad,
                )
            except BacktrackingError:
                termination = "backtracking failure"
                break
        else:
            step = prox_step(u, grad, L, alpha, tau)
        u_next, lam = step.u, step.lam
        f_next, grad_next = objective.value_and_gradient(u_next)
        F_next = f_next + 0.5 * alpha * weighted_norm_sq(u_next)

        delta = u_next - u
        dsq = weighted_norm_sq(delta)
        chi_next = support(u_next, config.zero_tol)
        change = indicator_l1_distance(chi_next, chi)
        on = chi_next.flags
        q = L + alpha

        if on.any():
            away = float(np.min(np.abs(u_next.values[on]))) - math.sqrt(2.0 * lam / q)
        else:
            away = math.inf
        if k >= 1:
            change_slack = dsq - 2.0 * min(lam_prev, lam) / q * change
        else:
            change_slack = math.nan
        comp = np.where(on, step.tilde_v.values + lam, 0.0)
        fixed_point = alpha * u_next.values + np.where(on, grad.values + L * delta.values, 0.0)

        records.append(
            IterateRecord(
                k=k + 1,
                objective=F_next,
                lambda_=lam,
                step_norm_sq=dsq,
                support_measure=chi_next.measure,
                support_change=change,
                descent_slack=F - F_next - 0.5 * (L - L_f) * dsq,
                away_from_zero_slack=away,
                support_change_slack=change_slack,
                comp_slack=-float(np.max(comp)),
                fixed_point_residual=float(np.max(np.abs(fixed_point))),
                L=L,
            )
        )
        u, f, grad, F, chi, lam_prev = u_next, f_next, grad_next, F_next, chi_next, lam
        if math.sqrt(dsq) < config.step_norm_tol:
            termination = "tolerance"
            break

    return Trajectory(
        config=config,
        records=tuple(records),
        u=u,
        termination=termination,
        lipschitz=L_f,
        final_step=step,
    )


def config_to_dict(config: ProxGradConfig) -> dict:
    return dataclasses.asdict(config)
