"""Support-measure-constrained minimisation on grids.

Exact solvers for separable problems with an L0 budget, a proximal gradient
method for smooth objectives with Tikhonov term, Poisson-tracking objectives
with adjoint gradients, and residual checkers for the associated optimality
conditions.
"""

from .domain import (
    Grid,
    GridFunction,
    Indicator,
    indicator_l1_distance,
    l0_measure,
    read_grid_function,
    support,
    weighted_norm_sq,
    write_grid_function,
)
from .objectives import LinearObjective, PoissonTracking, QuadraticObjective, SmoothObjective
from .optimality import OptimalityReport, check_noc, check_pmp_pointwise
from .prox_grad import Backtracking, ProxGradConfig, Trajectory, prox_step, run
from .separable import (
    L0Solution,
    QuadraticIntegrand,
    SeparableIntegrand,
    brute_force_l0,
    check_penalized_equivalence,
    compute_tilde_v,
    select_support,
    solve_l0,
)

__version__ = "0.1.0"
