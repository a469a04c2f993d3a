"""Acceptance criteria; each test prints one ``criterion N PASS|FAIL`` line."""

import math
import time

import numpy as np
import pytest

from l0control.cli import BUILTINS, main
from l0control.domain import Grid, inner
from l0control.objectives import PoissonTracking
from l0control.optimality import check_noc
from l0control.prox_grad import ProxGradConfig, run
from l0control.separable import (
    QuadraticIntegrand,
    brute_force_l0,
    check_penalized_equivalence,
    solve_l0,
)

from conftest import ACCEPTANCE_LINES, random_quadratic, spike_poisson

N_INSTANCES = 240
N_TRIALS = 100


def report(number, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def make_instance(rng):
    n = int(rng.integers(4, 13))
    grid = Grid.from_weights(rng.uniform(0.1, 1.0, n))
    g = QuadraticIntegrand(
        a=rng.standard_normal(n),
        c=rng.standard_normal(n),
        q=rng.uniform(0.2, 3.0, n),
        offset=rng.standard_normal(n),
    )
    tau = float(rng.uniform(0.0, 1.0)) * grid.total_measure
    while not 0 < tau < grid.total_measure:
        tau = float(rng.uniform(0.0, 1.0)) * grid.total_measure
    return g, grid, tau


@pytest.fixture(scope="module")
def instances():
    rng = np.random.default_rng(1234)
    return [make_instance(rng) for _ in range(N_INSTANCES)]


def _pairs(sol):
    idx = sol.support.indices
    grid_w = sol.u.grid.weights
    return sorted(zip(grid_w[idx].tolist(), sol.tilde_v.values[idx].tolist()))


def test_criterion_1_oracle_equivalence(instances):
    start = time.perf_counter()
    worst, support_mismatch = 0.0, 0
    for g, grid, tau in instances:
        fast, slow = solve_l0(g, grid, tau), brute_force_l0(g, grid, tau)
        worst = max(worst, abs(fast.objective - slow.objective))
        if fast.support != slow.support and _pairs(fast) != _pairs(slow):
            support_mismatch += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and support_mismatch == 0 and elapsed < 10.0
    report(1, ok, f"{len(instances)} instances, max |diff| {worst:.2e} (tol 1e-12), "
                  f"support mismatches beyond ties {support_mismatch}, {elapsed:.2f}s (< 10s)")
    assert ok


def test_criterion_2_characterisation(instances):
    sandwich = pointwise = relaxed = 0
    for g, grid, tau in instances:
        sol = solve_l0(g, grid, tau)
        tv, s, on = sol.tilde_v.values, sol.s, sol.support.flags
        if not (np.all(on[tv < s]) and np.all(tv[on] <= s)):
            sandwich += 1
        if np.any(np.where(on, tv - s, 0.0) > 0):
            pointwise += 1
        if sol.lam > 0 and not tau - sol.support_measure < grid.max_weight:
            relaxed += 1
    ok = sandwich == pointwise == relaxed == 0
    report(2, ok, f"violating instances of {len(instances)}: sandwich {sandwich}, "
                  f"pointwise complementarity {pointwise}, relaxed complementarity {relaxed}")
    assert ok


def _trial_controls(rng, g, grid, count):
    ustar, _ = g.pointwise_min()
    trials = []
    for _ in range(count):
        mask = rng.random(grid.size) < rng.uniform(0.0, 1.0)
        values = np.where(rng.random(grid.size) < 0.5, ustar, ustar + rng.standard_normal(grid.size))
        trials.append(grid.function(np.where(mask, values, 0.0)))
    return trials


def test_criterion_3_penalised_equivalence(instances):
    rng = np.random.default_rng(99)
    worst_l0 = worst_excess = worst_realized = math.inf
    bad_l0 = bad_excess = 0
    for g, grid, tau in instances:
        sol = solve_l0(g, grid, tau)
        rep = check_penalized_equivalence(sol, g, grid, _trial_controls(rng, g, grid, N_TRIALS), tol=1e-10)
        worst_l0 = min(worst_l0, rep.margin_l0)
        worst_excess = min(worst_excess, rep.margin_excess)
        worst_realized = min(worst_realized, rep.margin_realized)
        bad_l0 += bool(rep.violations_l0)
        bad_excess += bool(rep.violations_excess)
    ok = worst_l0 >= -1e-10 and worst_excess >= -1e-10
    report(3, ok, f"min margin lam*||u||_0 {worst_l0:.3e} ({bad_l0} instances beaten), "
                  f"lam*(||u||_0-tau)^+ {worst_excess:.3e} ({bad_excess} instances beaten), "
                  f"tol -1e-10; realised-support form {worst_realized:.3e}")
    assert ok


# -- iterative solver ---------------------------------------------------------

def _problems():
    p, _ = spike_poisson(n=64)
    q = random_quadratic(n=32, seed=0)
    return [("poisson n=64", p, 1e-4, 0.125), ("quadratic n=32", q, 1e-3, 0.25)]


@pytest.fixture(scope="module")
def short_runs():
    start = time.perf_counter()
    runs = []
    for name, f, alpha, tau in _problems():
        cfg = ProxGradConfig(tau=tau, alpha=alpha, L=1.1 * f.lipschitz_bound(), max_iter=500)
        runs.append((name, run(cfg, f)))
    return runs, time.perf_counter() - start


def test_criterion_4_descent_and_summability(short_runs):
    runs, elapsed = short_runs
    ok = elapsed < 30.0
    parts = []
    for name, traj in runs:
        F = traj.objectives
        rises = int(np.sum(np.diff(F) > 1e-12 * (1 + np.abs(F[:-1]))))
        total = math.fsum(r.step_norm_sq for r in traj.records[1:])
        bound = 2 * (F[0] - F[-1]) / (traj.config.L - traj.lipschitz) + 1e-10
        ok &= rises == 0 and total <= bound
        parts.append(f"{name}: {rises} increases, sum |step|^2 {total:.3e} <= {bound:.3e}")
    report(4, ok, "; ".join(parts) + f"; {elapsed:.1f}s (< 30s)")
    assert ok


def test_criterion_5_per_iterate_slacks(short_runs):
    runs, _ = short_runs
    ok, parts = True, []
    for name, traj in runs:
        recs = traj.records[1:]
        away = min(r.away_from_zero_slack for r in recs)
        comp = min(r.comp_slack for r in recs)
        change = min(r.support_change_slack for r in recs[1:])
        descent = min(r.descent_slack for r in recs)
        worst = min(away, comp, change, descent)
        ok &= worst >= -1e-10
        parts.append(f"{name}: min away {away:.2e}, comp {comp:.2e}, change {change:.2e}, descent {descent:.2e}")
    report(5, ok, "; ".join(parts) + " (tol -1e-10)")
    assert ok


def test_criterion_6_fixed_point_identity(short_runs):
    runs, _ = short_runs
    worst = max(r.fixed_point_residual for _, traj in runs for r in traj.records[1:])
    ok = worst <= 1e-10
    report(6, ok, f"max residual {worst:.2e} (tol 1e-10)")
    assert ok


def test_criterion_7_gradient(rng):
    grid = Grid.uniform(1.0, 16)
    p = PoissonTracking(grid, target=rng.standard_normal(16), cg_tol=1e-13)
    u = grid.function(rng.standard_normal(16))
    g = p.gradient(u)
    h = 1e-5
    worst = 0.0
    for _ in range(10):
        d = grid.function(rng.standard_normal(16))
        fd = (p.value(u + d * h) - p.value(u + d * -h)) / (2 * h)
        exact = inner(g, d)
        worst = max(worst, abs(fd - exact) / abs(exact))
    ok = worst <= 1e-6
    report(7, ok, f"max relative error {worst:.2e} over 10 directions (tol 1e-6)")
    assert ok


def test_criterion_8_lipschitz():
    ref = 1.0 / math.pi**4
    errs = [abs(PoissonTracking(Grid.uniform(1.0, n)).estimate_lipschitz() - ref) / ref
            for n in (64, 128, 256)]
    ok = errs[0] > errs[1] > errs[2] and errs[2] <= 0.02
    report(8, ok, "relative error to 1/pi^4 at n=64,128,256: "
                  + ", ".join(f"{e:.2e}" for e in errs) + " (monotone, last <= 2e-2)")
    assert ok


def test_criterion_9_optimality_at_convergence():
    ok, parts = True, []
    for name, f, alpha, tau in _problems():
        cfg = ProxGradConfig(tau=tau, alpha=alpha, L=1.1 * f.lipschitz_bound(),
                             max_iter=20000, step_norm_tol=1e-10)
        traj = run(cfg, f)
        rep = check_noc(traj.u, f, alpha, tau, lambda_hint=traj.final_lambda)
        comp_bound = rep.max_cell_weight * abs(rep.s_est)
        good = (traj.termination == "tolerance"
                and rep.stationarity_residual <= 1e-6
                and rep.pointwise_comp_residual <= 1e-8
                and rep.comp_tau_raw <= comp_bound)
        ok &= good
        parts.append(
            f"{name} ({traj.iterations} its, {traj.termination}): stationarity "
            f"{rep.stationarity_residual:.2e} (<= 1e-6), pointwise comp "
            f"{rep.pointwise_comp_residual:.2e} (<= 1e-8), comp {rep.comp_tau_raw:.2e} "
            f"(<= {comp_bound:.2e})"
        )
    report(9, ok, "; ".join(parts))
    assert ok


def test_criterion_10_determinism(tmp_path):
    ok, parts = True, []
    for name in sorted(BUILTINS):
        for d in ("a", "b"):
            code = main(["solve", f"builtin:{name}", "--output-dir", str(tmp_path / name / d), "--quiet"])
            ok &= code == 0
        same = all(
            (tmp_path / name / "a" / f).read_bytes() == (tmp_path / name / "b" / f).read_bytes()
            for f in ("trajectory.csv", "solution.csv")
        )
        ok &= same
        parts.append(f"{name} {'identical' if same else 'DIFFERENT'}")
    report(10, ok, "; ".join(parts))
    assert ok
