import csv
import math
import warnings

import numpy as np
import pytest

from l0control.domain import Grid
from l0control.objectives import LinearObjective, PoissonTracking, QuadraticObjective
from l0control.prox_grad import (
    TRAJECTORY_COLUMNS,
    Backtracking,
    ProxGradConfig,
    prox_step,
    run,
)

from conftest import random_quadratic, spike_poisson


def test_prox_step_example():
    grid = Grid.from_weights(np.ones(4))
    step = prox_step(grid.zeros(), grid.function([4.0, 1.0, 0.0, -2.0]), L=1.0, alpha=1.0, tau=2.0)
    np.testing.assert_allclose(step.u.values, [-2.0, 0.0, 0.0, 1.0])
    assert step.lam == 1.0 and step.s == -1.0
    # away-from-zero bound sqrt(2 lam / (L + alpha)) = 1 is attained at cell 3
    assert abs(step.u.values[3]) == math.sqrt(2 * step.lam / 2.0)


def test_prox_step_matches_direct_minimisation(rng):
    # on a fixed support the step minimises the quadratic model; compare with closed form per cell
    grid = Grid.uniform(1.0, 10)
    uk = grid.function(rng.standard_normal(10))
    gk = grid.function(rng.standard_normal(10))
    L, alpha = 3.0, 0.5
    step = prox_step(uk, gk, L, alpha, 0.3)
    on = step.support.flags
    np.testing.assert_allclose(step.u.values[on], ((L * uk.values - gk.values) / (L + alpha))[on])
    assert step.support_measure <= 0.3


def test_zero_problem_stays_at_zero():
    grid = Grid.uniform(1.0, 16)
    f = QuadraticObjective.identity(grid)
    traj = run(ProxGradConfig(tau=0.25, L=1.1 * f.lipschitz_bound(), max_iter=5), f)
    np.testing.assert_array_equal(traj.u.values, 0.0)
    assert np.all(traj.objectives == 0.0)
    assert np.all(traj.lambdas[1:] == 0.0)


def test_identity_quadratic_reaches_best_sparse_approximation(rng):
    grid = Grid.uniform(1.0, 20)
    b = rng.standard_normal(20)
    f = QuadraticObjective.identity(grid, b)
    traj = run(ProxGradConfig(tau=0.25, L=1.1 * f.lipschitz_bound(), max_iter=300, step_norm_tol=1e-12), f)
    keep = np.argsort(-np.abs(b), kind="stable")[:5]
    expected = np.zeros(20)
    expected[keep] = b[keep]
    np.testing.assert_allclose(traj.u.values, expected, atol=1e-10)
    assert traj.termination == "tolerance"


def test_tikhonov_shrinks(rng):
    grid = Grid.uniform(1.0, 10)
    b = rng.standard_normal(10)
    f = QuadraticObjective.identity(grid, b)
    alpha = 1.0
    traj = run(ProxGradConfig(tau=0.5, alpha=alpha, L=1.2, max_iter=400, step_norm_tol=1e-13), f)
    on = traj.u.values != 0
    np.testing.assert_allclose(traj.u.values[on], b[on] / (1 + alpha), atol=1e-10)


@pytest.fixture(scope="module")
def spike_run():
    p, truth = spike_poisson(n=64)
    cfg = ProxGradConfig(tau=0.125, alpha=1e-4, L=1.1 * p.lipschitz_bound(), max_iter=200)
    return p, truth, run(cfg, p)


def test_spike_run_monotone(spike_run):
    _, _, traj = spike_run
    F = traj.objectives
    assert np.all(np.diff(F) <= 1e-12 * (1 + np.abs(F[:-1])))


def test_spike_run_summability(spike_run):
    p, _, traj = spike_run
    dsq = sum(r.step_norm_sq for r in traj.records[1:])
    L = traj.config.L
    assert dsq <= 2 * (traj.objectives[0] - traj.objectives[-1]) / (L - traj.lipschitz) + 1e-10


def test_spike_run_slacks(spike_run):
    _, _, traj = spike_run
    recs = traj.records[1:]
    assert min(r.descent_slack for r in recs) >= -1e-10
    assert min(r.away_from_zero_slack for r in recs) >= -1e-10
    assert min(r.support_change_slack for r in recs[1:]) >= -1e-10
    assert min(r.comp_slack for r in recs) >= -1e-10
    assert max(r.fixed_point_residual for r in recs) <= 1e-10
    assert all(r.support_measure <= 0.125 for r in recs)


def test_spike_run_is_sparse_and_deterministic(spike_run):
    p, _, traj = spike_run
    again = run(traj.config, p)
    np.testing.assert_array_equal(again.u.values, traj.u.values)
    assert again.objectives.tolist() == traj.objectives.tolist()


def test_trajectory_csv(tmp_path, spike_run):
    _, _, traj = spike_run
    path = tmp_path / "trajectory.csv"
    traj.write_csv(path)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRAJECTORY_COLUMNS
    assert len(rows) == len(traj.records) + 1
    assert float(rows[-1][1]) == traj.objectives[-1]
    assert rows[1][2] == "nan"


def test_warning_when_L_too_small():
    p, _ = spike_poisson(n=32, cells=(5, 15, 25))
    with pytest.warns(RuntimeWarning):
        run(ProxGradConfig(tau=0.1, L=0.5 * p.lipschitz_bound(), max_iter=2), p)


def test_no_warning_with_adequate_L():
    f = QuadraticObjective.identity(Grid.uniform(1.0, 8))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run(ProxGradConfig(tau=0.25, L=2.0, max_iter=2), f)


def test_backtracking_bounds(rng):
    f = random_quadratic(n=32, seed=3)
    L_f = f.estimate_lipschitz()
    bt = Backtracking(gamma=2.0, L0=L_f / 8)
    traj = run(ProxGradConfig(tau=0.25, alpha=1e-3, backtracking=bt, max_iter=100), f)
    Ls = [r.L for r in traj.records[1:]]
    assert max(Ls) <= 2.0 * L_f
    assert Ls == sorted(Ls)
    increases = round(math.log2(Ls[-1] / Ls[0])) + (Ls[0] > bt.L0)
    assert increases <= 3
    F = traj.objectives
    assert np.all(np.diff(F) <= 1e-12 * (1 + np.abs(F[:-1])))


def test_backtracking_accepts_first_trial_when_large():
    f = random_quadratic(n=16, seed=5)
    L0 = 4 * f.lipschitz_bound()
    traj = run(ProxGradConfig(tau=0.25, backtracking=Backtracking(L0=L0), max_iter=10), f)
    assert all(r.L == L0 for r in traj.records[1:])


def test_backtracking_failure_terminates():
    f = random_quadratic(n=16, seed=5)
    bt = Backtracking(gamma=2.0, L0=1e-8, max_increases=1)
    traj = run(ProxGradConfig(tau=0.25, backtracking=bt, max_iter=10), f)
    assert traj.termination == "backtracking failure"


@pytest.mark.parametrize("kwargs", [
    dict(tau=0.1, alpha=-1.0, L=1.0),
    dict(tau=0.1),
    dict(tau=0.1, L=1.0, max_iter=0),
    dict(tau=0.1, L=1.0, step_norm_tol=-1.0),
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ProxGradConfig(**kwargs)


def test_tau_out_of_range():
    f = QuadraticObjective.identity(Grid.uniform(1.0, 4))
    with pytest.raises(ValueError):
        run(ProxGradConfig(tau=1.0, L=2.0), f)


def test_linear_objective_one_step():
    grid = Grid.from_weights(np.ones(4))
    f = LinearObjective(grid, [4.0, 1.0, 0.0, -2.0])
    traj = run(ProxGradConfig(tau=2.0, alpha=1.0, L=1e-9, max_iter=3), f)
    np.testing.assert_allclose(traj.u.values, [-4.0, 0.0, 0.0, 2.0], rtol=1e-8)


def test_2d_poisson_run(rng):
    grid = Grid.uniform([1.0, 1.0], [10, 10])
    truth = np.zeros(100)
    truth[[23, 67]] = [5.0, -5.0]
    y = PoissonTracking(grid, cg_tol=1e-12).solve_state(grid.function(truth))
    p = PoissonTracking(grid, target=y)
    traj = run(ProxGradConfig(tau=0.05, alpha=1e-6, L=1.1 * p.lipschitz_bound(), max_iter=50), p)
    F = traj.objectives
    assert F[-1] < F[0]
    assert np.all(np.diff(F) <= 1e-12 * (1 + np.abs(F[:-1])))
