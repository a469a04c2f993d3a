"""Residuals of the necessary optimality conditions at a candidate control.

For ``min f(u) + alpha/2 ||u||^2`` with ``||u||_0 <= tau`` a local solution
admits ``s <= 0`` with

* ``s (||u||_0 - tau) = 0``,
* ``u(x) = -grad f(u)(x) / alpha`` wherever ``u(x) != 0``,
* ``|u(x)|_0 (-|grad f(u)(x)|**2 / (2 alpha) - s) <= 0``,

and, when ``alpha = 0``, ``grad f(u) = 0``.  In the PDE setting the same
conditions read as a pointwise minimum of the Hamiltonian penalised by
``-s |u|_0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .domain import GridFunction, fsum, support
from .objectives import PoissonTracking, SmoothObjective
from .separable import QuadraticIntegrand

__all__ = ["OptimalityReport", "check_noc", "check_pmp_pointwise"]


@dataclass(frozen=True)
class OptimalityReport:
    """Residuals at a candidate; ``None`` marks a residual that does not apply.

    The ``_rms`` and ``_mean`` fields are the support-measure-normalised
    counterparts of the maximum-based residuals.
    """

    s_est: float
    comp_tau_residual: float | None
    stationarity_residual: float
    pointwise_comp_residual: float | None
    hamiltonian_gap: float | None
    comp_tau_raw: float | None
    stationarity_residual_rms: float
    pointwise_comp_residual_mean: float | None
    alpha: float
    tau: float | None
    lambda_hint: float | None
    support_measure: float
    max_cell_weight: float
    feasible: bool | None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _max_over(values: np.ndarray, mask: np.ndarray) -> float:
    return float(np.max(values[mask])) if mask.any() else 0.0


def _report(u, grad, alpha, tau, lam_hint, zero_tol, state_cost=None) -> OptimalityReport:
    grid = u.grid
    w = grid.weights
    chi = support(u, zero_tol).flags
    measure = fsum(w[chi])
    g = grad.values

    if alpha > 0:
        if lam_hint is not None:
            s = -float(lam_hint)
        else:
            s = _max_over(-(g**2) / (2 * alpha), chi) if chi.any() else 0.0
        s = min(s, 0.0) + 0.0
        defect = np.abs(u.values + g / alpha)
        stationarity = _max_over(defect, chi)
        pc = np.maximum(0.0, -(g**2) / (2 * alpha) - s)
        pointwise = _max_over(pc, chi)
        pointwise_mean = fsum(w[chi] * pc[chi]) / measure if measure > 0 else 0.0
        # Hamiltonian in u: alpha/2 v^2 + phi v (+ state cost, which cancels in the gap)
        ham = QuadraticIntegrand(a=g, c=np.zeros_like(g), q=alpha,
                                 offset=0.0 if state_cost is None else state_cost)
        lam = -s
        current = ham.evaluate(u.values) + lam * chi
        best = np.minimum(ham.at_zero(), ham.pointwise_min()[1] + lam)
        gap = float(np.max(current - best))
        rms_mask = chi
    else:
        s = -float(lam_hint) + 0.0 if lam_hint is not None else 0.0
        defect = np.abs(g)
        stationarity = float(np.max(defect))
        pointwise = pointwise_mean = gap = None
        rms_mask = np.ones_like(chi)
    rms_measure = fsum(w[rms_mask])
    rms = math.sqrt(fsum(w[rms_mask] * defect[rms_mask] ** 2) / rms_measure) if rms_measure > 0 else 0.0

    if tau is not None:
        comp = abs(s) * max(0.0, tau - measure - grid.max_weight)
        comp_raw = abs(s) * abs(tau - measure)
        feasible = measure <= tau
    else:
        comp = comp_raw = feasible = None

    return OptimalityReport(
        s_est=s,
        comp_tau_residual=comp,
        stationarity_residual=stationarity,
        pointwise_comp_residual=pointwise,
        hamiltonian_gap=gap,
        comp_tau_raw=comp_raw,
        stationarity_residual_rms=rms,
        pointwise_comp_residual_mean=pointwise_mean,
        alpha=float(alpha),
        tau=None if tau is None else float(tau),
        lambda_hint=None if lam_hint is None else float(lam_hint),
        support_measure=measure,
        max_cell_weight=grid.max_weight,
        feasible=feasible,
    )


def check_noc(u: GridFunction, objective: SmoothObjective, alpha: float, tau: float,
              lambda_hint: float | None = None, zero_tol: float | None = None) -> OptimalityReport:
    """Residuals of the first-order conditions at ``u``.

    Without ``lambda_hint`` the threshold estimate is the largest ``s <= 0``
    for which the pointwise complementarity holds, i.e.
    ``s = -min_{supp u} |grad f(u)|**2 / (2 alpha)``.  For ``alpha = 0``
    only the stationarity residual ``||grad f(u)||_inf`` is defined.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    grad = objective.gradient(u)
    return _report(u, grad, alpha, tau, lambda_hint, zero_tol)


def check_pmp_pointwise(p: PoissonTracking, u: GridFunction, alpha: float, lam: float,
                        tau: float | None = None, zero_tol: float | None = None) -> OptimalityReport:
    """Pointwise maximum-principle check for the Poisson tracking problem.

    With state ``y`` and adjoint ``phi`` the Hamiltonian per cell is
    ``H(v) = 1/2 (y - y_d)**2 + alpha/2 v**2 + phi v`` and its
    ``lam``-penalised minimum is ``min(H(0), H(-phi/alpha) + lam)``.
    ``stationarity_residual`` measures ``|u + phi/alpha|`` on the support.
    """
    if alpha <= 0:
        raise ValueError("pointwise Hamiltonian minimum is degenerate for alpha = 0")
    y = p.solve_state(u)
    phi = p.solve_adjoint(y)
    state_cost = 0.5 * (y.values - p.target.values) ** 2
    return _report(u, phi, alpha, tau, lam, zero_tol, state_cost=state_cost)
