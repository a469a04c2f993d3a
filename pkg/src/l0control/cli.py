"""Command-line experiment runner.

    l0control solve  CONFIG [--output-dir DIR] [--max-iter N] [--quiet]
    l0control verify SOLUTION CONFIG [--quiet]
    l0control oracle CONFIG [--quiet]

CONFIG is a JSON file or ``builtin:<name>``.  Exit codes: 0 success,
2 invalid input, 3 solver failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .domain import Grid, GridFunction, _fmt, read_grid_function, write_grid_function
from .objectives import (
    CGConvergenceError,
    LinearObjective,
    PoissonTracking,
    QuadraticObjective,
)
from .optimality import check_noc
from .prox_grad import Backtracking, ProxGradConfig, TRAJECTORY_COLUMNS, prox_integrand, run
from .separable import (
    BRUTE_FORCE_MAX_CELLS,
    InvalidIntegrandError,
    QuadraticIntegrand,
    brute_force_l0,
    solve_l0,
)

log = logging.getLogger("l0control")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4
PROBLEMS = ("quadratic", "poisson-tracking", "separable-direct")

DEFAULTS = {
    "grid": {"dim": 1, "extents": [1.0], "resolution": [64]},
    "objective": {},
    "alpha": 0.0,
    "solver": {
        "tau": None,
        "L": None,
        "L_factor": 1.1,
        "max_iter": 500,
        "step_norm_tol": 1e-10,
        "backtracking": None,
        "zero_tol": None,
    },
    "initial": "zero",
    "seed": 0,
    "output_dir": "output",
    "tolerances": {"stationarity": 1e-6, "comp_tau": 1e-12},
}

BUILTINS = {
    "quadratic-zero": {
        "problem": "quadratic",
        "grid": {"dim": 1, "extents": [1.0], "resolution": [16]},
        "objective": {"operator": "identity", "target": "zero"},
        "alpha": 0.0,
        "solver": {"tau": 0.25, "max_iter": 200},
        "output_dir": "output/quadratic-zero",
    },
    "spike-recovery-1d": {
        "problem": "poisson-tracking",
        "grid": {"dim": 1, "extents": [1.0], "resolution": [64]},
        "objective": {
            "target": {"generator": "spikes", "count": 3, "amplitude": 1.0},
            "coefficient": 1.0,
        },
        "alpha": 1e-4,
        "solver": {"tau": 0.125, "max_iter": 5000, "step_norm_tol": 1e-10},
        "seed": 7,
        "output_dir": "output/spike-recovery-1d",
    },
    "poisson-2d": {
        "problem": "poisson-tracking",
        "grid": {"dim": 2, "extents": [1.0, 1.0], "resolution": [16, 16]},
        "objective": {"target": {"generator": "spikes", "count": 4, "amplitude": 10.0}},
        "alpha": 1e-5,
        "solver": {"tau": 0.05, "max_iter": 300, "step_norm_tol": 1e-9},
        "seed": 3,
        "output_dir": "output/poisson-2d",
    },
    "separable-small": {
        "problem": "separable-direct",
        "grid": {"dim": 1, "extents": [1.0], "resolution": [12]},
        "objective": {"coefficient": "random"},
        "alpha": 1.0,
        "solver": {"tau": 0.4},
        "seed": 11,
        "output_dir": "output/separable-small",
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


# -- configuration ----------------------------------------------------------

def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(source: str) -> tuple[dict, Path]:
    """Read and normalise a config; returns ``(config, base_dir)`` for relative paths."""
    if source.startswith("builtin:"):
        name = source.split(":", 1)[1]
        if name not in BUILTINS:
            raise ConfigError("config", f"unknown builtin {name!r}; choose from {sorted(BUILTINS)}")
        raw, base = BUILTINS[name], Path.cwd()
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {source}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON ({exc})") from exc
        base = path.parent
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    cfg = _merge(DEFAULTS, raw)
    _validate(cfg, base)
    return cfg, base


def _validate(cfg: dict, base: Path) -> None:
    if cfg.get("problem") not in PROBLEMS:
        raise ConfigError("problem", f"must be one of {PROBLEMS}")
    g = cfg["grid"]
    if g.get("dim") not in (1, 2):
        raise ConfigError("grid.dim", "must be 1 or 2")
    for key in ("extents", "resolution"):
        if not isinstance(g.get(key), list) or len(g[key]) != g["dim"]:
            raise ConfigError(f"grid.{key}", f"must be a list of length {g['dim']}")
    if any(not isinstance(r, int) or r < 2 for r in g["resolution"]):
        raise ConfigError("grid.resolution", "every entry must be an integer >= 2")
    if any(not isinstance(e, (int, float)) or e <= 0 for e in g["extents"]):
        raise ConfigError("grid.extents", "every entry must be positive")
    if not isinstance(cfg["alpha"], (int, float)) or cfg["alpha"] < 0:
        raise ConfigError("alpha", "must be a non-negative number")
    if cfg["problem"] == "separable-direct" and cfg["alpha"] <= 0:
        raise ConfigError("alpha", "must be positive for separable-direct problems")
    s = cfg["solver"]
    total = float(np.prod(g["extents"]))
    tau = s.get("tau")
    if not isinstance(tau, (int, float)) or not 0 < tau < total:
        raise ConfigError("solver.tau", f"must lie in (0, {total}) (total measure)")
    if s["L"] is not None and (not isinstance(s["L"], (int, float)) or s["L"] <= 0):
        raise ConfigError("solver.L", "must be positive or null")
    if not isinstance(s["max_iter"], int) or s["max_iter"] < 1:
        raise ConfigError("solver.max_iter", "must be a positive integer")
    if s["L_factor"] <= 0:
        raise ConfigError("solver.L_factor", "must be positive")
    bt = s["backtracking"]
    if bt is not None and not isinstance(bt, dict):
        raise ConfigError("solver.backtracking", "must be null or an object")
    for field, value in _file_refs(cfg):
        if not (base / value).is_file():
            raise ConfigError(field, f"file not found: {value}")


def _file_refs(cfg):
    obj = cfg["objective"]
    for key in ("target", "coefficient", "operator"):
        value = obj.get(key)
        if isinstance(value, dict) and "file" in value:
            yield f"objective.{key}", value["file"]
    init = cfg.get("initial")
    if isinstance(init, dict) and "file" in init:
        yield "initial", init["file"]


# -- problem construction ---------------------------------------------------

def build_grid(cfg) -> Grid:
    g = cfg["grid"]
    return Grid.uniform(g["extents"], g["resolution"])


def _spikes(grid, spec, rng):
    count = int(spec.get("count", 3))
    if count < 1 or count > grid.size:
        raise ConfigError("objective.target.count", f"must lie in [1, {grid.size}]")
    amplitude = float(spec.get("amplitude", 1.0))
    values = np.zeros(grid.size)
    cells = spec.get("cells")
    if cells is None:
        cells = np.sort(rng.choice(grid.size, size=count, replace=False))
    signs = rng.choice([-1.0, 1.0], size=len(cells))
    values[np.asarray(cells, dtype=int)] = amplitude * signs * rng.uniform(0.5, 1.5, len(cells))
    return GridFunction(grid, values)


def _field(grid, spec, rng, base, name, default=None):
    """Scalar, list, ``"zero"``, ``"random"`` or ``{"file": path}``."""
    if spec is None:
        spec = default
    if spec == "zero":
        return np.zeros(grid.size)
    if spec == "random":
        return rng.standard_normal(grid.size)
    if isinstance(spec, (int, float)):
        return np.full(grid.size, float(spec))
    if isinstance(spec, list):
        if len(spec) != grid.size:
            raise ConfigError(name, f"expected {grid.size} values")
        return np.asarray(spec, dtype=float)
    if isinstance(spec, dict) and "file" in spec:
        try:
            return read_grid_function(base / spec["file"], grid).values
        except ValueError as exc:
            raise ConfigError(name, str(exc)) from exc
    raise ConfigError(name, f"unsupported value {spec!r}")


def _operator(grid, spec, rng):
    n = grid.size
    if spec in (None, "identity"):
        return np.eye(n)
    if spec == "random":
        return rng.standard_normal((n, n)) / math.sqrt(n)
    if spec == "smoothing":
        d = np.linalg.norm(grid.coords[:, None, :] - grid.coords[None, :, :], axis=2)
        width = 4.0 * min(grid.spacing)
        return np.exp(-0.5 * (d / width) ** 2) * grid.weights[None, :] / (math.sqrt(2 * math.pi) * width) ** grid.dim
    raise ConfigError("objective.operator", f"unsupported value {spec!r}")


def build_problem(cfg, base: Path):
    """Return ``(grid, objective, alpha, extra)`` for a normalised config."""
    grid = build_grid(cfg)
    rng = np.random.default_rng(cfg["seed"])
    obj = cfg["objective"]
    kind = cfg["problem"]
    extra = {}
    if kind == "quadratic":
        K = _operator(grid, obj.get("operator"), rng)
        target = obj.get("target", "zero")
        if isinstance(target, dict) and target.get("generator") == "spikes":
            truth = _spikes(grid, target, rng)
            b = K @ truth.values
            extra["truth"] = truth
        else:
            b = _field(grid, target, rng, base, "objective.target")
        objective = QuadraticObjective(grid, K, b)
    elif kind == "poisson-tracking":
        coefficient = _field(grid, obj.get("coefficient"), rng, base, "objective.coefficient", 1.0)
        options = {k: obj[k] for k in ("cg_tol", "cg_maxiter") if k in obj}
        target = obj.get("target", "zero")
        if isinstance(target, dict) and target.get("generator") == "spikes":
            truth = _spikes(grid, target, rng)
            y_d = PoissonTracking(grid, None, coefficient, **options).solve_state(truth)
            extra["truth"] = truth
        else:
            y_d = GridFunction(grid, _field(grid, target, rng, base, "objective.target"))
        objective = PoissonTracking(grid, y_d, coefficient, **options)
    else:
        coefficient = _field(grid, obj.get("coefficient"), rng, base, "objective.coefficient", "random")
        objective = LinearObjective(grid, coefficient)
    return grid, objective, float(cfg["alpha"]), extra


def _initial(cfg, grid, base):
    init = cfg.get("initial", "zero")
    if init == "zero":
        return grid.zeros()
    if isinstance(init, dict) and "file" in init:
        try:
            return read_grid_function(base / init["file"], grid)
        except ValueError as exc:
            raise ConfigError("initial", str(exc)) from exc
    raise ConfigError("initial", f"unsupported value {init!r}")


def solver_config(cfg, objective) -> ProxGradConfig:
    s = cfg["solver"]
    bt = s["backtracking"]
    backtracking = None
    if bt is not None:
        try:
            backtracking = Backtracking(**bt)
        except (TypeError, ValueError) as exc:
            raise ConfigError("solver.backtracking", str(exc)) from exc
    L = s["L"]
    if L is None and backtracking is None:
        L = s["L_factor"] * objective.lipschitz_bound()
        if L <= 0:
            raise ConfigError("solver.L", "Lipschitz bound is zero; give L explicitly")
    try:
        return ProxGradConfig(
            tau=float(s["tau"]),
            alpha=float(cfg["alpha"]),
            L=L,
            max_iter=s["max_iter"],
            step_norm_tol=float(s["step_norm_tol"]),
            backtracking=backtracking,
            zero_tol=s["zero_tol"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError("solver", str(exc)) from exc


def separable_integrand(objective: LinearObjective, alpha: float) -> QuadraticIntegrand:
    """``g(x, u) = c(x) u + alpha/2 u**2`` for a linear objective with coefficient ``c``."""
    c = objective.coefficient.values
    return QuadraticIntegrand(a=c, c=np.zeros_like(c), q=alpha)


# -- output -----------------------------------------------------------------

def _clean(obj):
    """Replace non-finite floats by None for strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def _solve(cfg, base, quiet) -> int:
    grid, objective, alpha, extra = build_problem(cfg, base)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    tau = float(cfg["solver"]["tau"])
    run_info = {}

    if cfg["problem"] == "separable-direct":
        sol = solve_l0(separable_integrand(objective, alpha), grid, tau)
        u, lam = sol.u, sol.lam
        with (out / "trajectory.csv").open("w", newline="", encoding="ascii") as fh:
            fh.write(",".join(TRAJECTORY_COLUMNS) + "\n")
            row = [1, sol.objective, lam, math.nan, sol.support_measure, math.nan,
                   math.nan, math.nan, math.nan]
            fh.write(",".join([str(row[0])] + [_fmt(v) for v in row[1:]]) + "\n")
        status = EXIT_OK
        run_info.update(termination="exact", iterations=1, objective_final=sol.objective)
    else:
        config = solver_config(cfg, objective)
        traj = run(config, objective, _initial(cfg, grid, base))
        traj.write_csv(out / "trajectory.csv")
        u, lam = traj.u, traj.final_lambda
        status = EXIT_SOLVER if traj.termination == "backtracking failure" else EXIT_OK
        run_info.update(
            termination=traj.termination,
            iterations=traj.iterations,
            objective_final=traj.records[-1].objective,
            lipschitz_bound=traj.lipschitz,
            L=config.L,
            tail_min_lambda=traj.tail_min_lambda(),
        )
        if "truth" in extra:
            truth = extra["truth"]
            run_info["objective_truth"] = (
                objective.value(truth) + 0.5 * alpha * float(np.sum(grid.weights * truth.values**2))
            )
    write_grid_function(out / "solution.csv", u)
    report = check_noc(u, objective, alpha, tau, lambda_hint=lam)
    run_info["lambda_final"] = lam
    _dump(out / "report.json", {**report.to_dict(), "run": run_info})
    _dump(out / "config_echo.json", cfg)
    if not quiet:
        print(json.dumps(_clean({"output_dir": str(out), **run_info}), sort_keys=True))
    return status


def _asserted(report, cfg) -> dict:
    tol = cfg["tolerances"]
    checks = {
        "feasible": bool(report.feasible),
        "stationarity": report.stationarity_residual <= tol["stationarity"],
        "comp_tau": report.comp_tau_residual <= tol["comp_tau"],
    }
    return checks


def _verify(solution_path, cfg, base, quiet) -> int:
    grid, objective, alpha, _ = build_problem(cfg, base)
    path = Path(solution_path)
    if not path.is_file():
        raise ConfigError("solution", f"file not found: {solution_path}")
    try:
        u = read_grid_function(path, grid)
    except ValueError as exc:
        raise ConfigError("solution", str(exc)) from exc
    report = check_noc(u, objective, alpha, float(cfg["solver"]["tau"]))
    checks = _asserted(report, cfg)
    if not quiet:
        print(json.dumps(_clean({**report.to_dict(), "checks": checks}), indent=2, sort_keys=True))
    return EXIT_OK if all(checks.values()) else EXIT_VERIFY


def _oracle(cfg, base, quiet) -> int:
    grid, objective, alpha, _ = build_problem(cfg, base)
    if grid.size > BRUTE_FORCE_MAX_CELLS:
        raise ConfigError("grid.resolution", f"oracle needs at most {BRUTE_FORCE_MAX_CELLS} cells")
    tau = float(cfg["solver"]["tau"])
    if cfg["problem"] == "separable-direct":
        g = separable_integrand(objective, alpha)
    else:
        # first prox subproblem from the initial point
        config = solver_config(cfg, objective)
        u0 = _initial(cfg, grid, base)
        L = config.L if config.L is not None else config.backtracking.L0
        g = prox_integrand(u0, objective.gradient(u0), L, alpha)
    fast = solve_l0(g, grid, tau)
    slow = brute_force_l0(g, grid, tau)
    diff = abs(fast.objective - slow.objective)
    result = {
        "solve_objective": fast.objective,
        "brute_force_objective": slow.objective,
        "difference": diff,
        "solve_support": fast.support.indices.tolist(),
        "brute_force_support": slow.support.indices.tolist(),
        "s": fast.s,
        "lambda": fast.lam,
    }
    if not quiet:
        print(json.dumps(_clean(result), indent=2, sort_keys=True))
    return EXIT_OK if diff <= 1e-12 else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="l0control", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run the proximal gradient solver")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("verify", help="check optimality conditions of a solution")
    p.add_argument("solution")
    p.add_argument("config")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("oracle", help="compare exact and brute-force subproblem solutions")
    p.add_argument("config")
    p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg, base = load_config(args.config)
        if args.command == "solve":
            if args.output_dir:
                cfg["output_dir"] = args.output_dir
            if args.max_iter is not None:
                if args.max_iter < 1:
                    raise ConfigError("--max-iter", "must be a positive integer")
                cfg["solver"]["max_iter"] = args.max_iter
            return _solve(cfg, base, args.quiet)
        if args.command == "verify":
            return _verify(args.solution, cfg, base, args.quiet)
        return _oracle(cfg, base, args.quiet)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CGConvergenceError, InvalidIntegrandError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
