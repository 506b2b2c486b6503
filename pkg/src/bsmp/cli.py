"""Experiment runner: configuration, subcommands, reproducible outputs.

Usage:
    bsmp <solve|cost|optimize|verify|benchmark> --config FILE
         [--seed K] [--threads W] [--out DIR]

Flag overrides beat file values.  Every run writes its resolved
configuration next to its outputs; CSV and JSON outputs are byte-identical
across repeated runs of one configuration, and the thread count never
affects results.  Wall-clock data lives only in run.log.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import report
from .adjoint import hamiltonian_fd_error, solve_adjoint
from .bsde import ControlProcess, RegressionBasis, solve_bsde, solve_variational
from .diagnostics import duality_check, empirical_norms, lemma4_table, lemma5_table, lemma6_check
from .errors import BsmpError, ConfigError
from .model import ProblemSpec, grad_check, validate_assumptions
from .models import REGISTRY, build_model, model_oracle
from .sampling import PathEnsemble, TimeGrid, mean_and_se, sample_ensemble
from .smp import (
    check_stationarity,
    evaluate_cost_augmented,
    evaluate_cost_direct,
    optimize,
)

_DEFAULTS = {
    "model": {"key": "lq", "params": {}},
    "horizon": 1.0,
    "steps": 50,
    "paths": 10000,
    "seed": 7,
    "antithetic": True,
    "basis": {"kind": "poly", "degree_or_cells": 3, "ridge": 1e-8},
    "picard_iters": 2,
    "optimizer": {"step_size": 0.5, "max_iters": 50, "tolerance": 1e-4, "u0": [0.0]},
    "control": [0.0],
    "theta_grid": [0.2, 0.1, 0.05, 0.025],
    "output_dir": "out",
    "winsor_cap": None,
    "eta": 0.0,
    "dump_brownian": False,
}


@dataclass
class RunConfig:
    model_key: str
    model_params: dict
    horizon: float
    steps: int
    paths: int
    seed: int
    antithetic: bool
    basis: RegressionBasis
    picard_iters: int
    step_size: float
    max_iters: int
    tolerance: float
    u0: list
    control: list
    theta_grid: list
    output_dir: str
    winsor_cap: Optional[float]
    eta: float
    dump_brownian: bool
    resolved: dict = field(default_factory=dict)

    @staticmethod
    def load(path: str, seed: Optional[int] = None, out: Optional[str] = None) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        merged = json.loads(json.dumps(_DEFAULTS))
        for key, value in raw.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                bad = set(value) - set(merged[key])
                if bad:
                    raise ConfigError(f"unknown keys under {key!r}: {sorted(bad)}")
                merged[key].update(value)
            else:
                merged[key] = value
        if seed is not None:
            merged["seed"] = int(seed)
        if out is not None:
            merged["output_dir"] = out

        key = merged["model"]["key"]
        if key not in REGISTRY:
            raise ConfigError(f"unknown model key {key!r}; registered: {sorted(REGISTRY)}")
        for name in ("steps", "paths", "seed", "picard_iters"):
            if int(merged[name]) < 0 or (name in ("steps", "paths") and int(merged[name]) < 1):
                raise ConfigError(f"{name} must be positive, got {merged[name]}")
        thetas = [float(x) for x in merged["theta_grid"]]
        if any(not 0.0 < x <= 1.0 for x in thetas):
            raise ConfigError(f"theta values must lie in (0, 1], got {thetas}")
        if merged["horizon"] <= 0:
            raise ConfigError(f"horizon must be positive, got {merged['horizon']}")
        opt = merged["optimizer"]
        if opt["step_size"] < 0 or opt["max_iters"] < 1 or opt["tolerance"] <= 0:
            raise ConfigError(f"optimizer settings invalid: {opt}")

        basis = RegressionBasis(
            kind=merged["basis"]["kind"],
            degree_or_cells=int(merged["basis"]["degree_or_cells"]),
            ridge=float(merged["basis"]["ridge"]),
        )
        return RunConfig(
            model_key=key,
            model_params=dict(merged["model"]["params"]),
            horizon=float(merged["horizon"]),
            steps=int(merged["steps"]),
            paths=int(merged["paths"]),
            seed=int(merged["seed"]),
            antithetic=bool(merged["antithetic"]),
            basis=basis,
            picard_iters=int(merged["picard_iters"]),
            step_size=float(opt["step_size"]),
            max_iters=int(opt["max_iters"]),
            tolerance=float(opt["tolerance"]),
            u0=[float(x) for x in opt["u0"]],
            control=[float(x) for x in merged["control"]],
            theta_grid=thetas,
            output_dir=merged["output_dir"],
            winsor_cap=None if merged["winsor_cap"] is None else float(merged["winsor_cap"]),
            eta=float(merged["eta"]),
            dump_brownian=bool(merged["dump_brownian"]),
            resolved=merged,
        )

    def build(self) -> tuple[ProblemSpec, dict]:
        params = dict(self.model_params)
        params["horizon"] = self.horizon
        return build_model(self.model_key, params)

    def ensemble(self, spec: ProblemSpec, paths: Optional[int] = None, seed: Optional[int] = None, threads: int = 1) -> PathEnsemble:
        grid = TimeGrid(self.horizon, self.steps)
        return sample_ensemble(
            grid,
            paths or self.paths,
            seed=self.seed if seed is None else seed,
            antithetic=self.antithetic,
            brownian_dim=spec.dims.d,
            threads=threads,
        )


class RunContext:
    """Output directory, log buffer and accumulated verdicts for one run."""

    def __init__(self, cfg: RunConfig, command: str, threads: int):
        self.cfg = cfg
        self.command = command
        self.threads = threads
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.figures = self.out / "figures"
        self.verdicts: list[dict] = []
        self.extras: dict = {}
        self._log: list[str] = []
        self.started = time.time()

    def check(self, name: str, value, threshold, passed: bool) -> None:
        self.verdicts.append(report.verdict(name, float(value), float(threshold), passed))

    def log(self, message: str) -> None:
        stamp = datetime.now(timezone.utc).isoformat()
        self._log.append(f"{stamp} {message}")

    def finish(self, J: float, J_stderr: float, residual: float) -> int:
        summary = {
            "config_hash": report.config_hash(self.cfg.resolved),
            "model": self.cfg.model_key,
            "J": J,
            "J_stderr": J_stderr,
            "residual": residual,
            "verdicts": self.verdicts,
            "runtime_seconds": None,
        }
        summary.update(self.extras)
        report.write_json(self.out / "resolved_config.json", self.cfg.resolved)
        report.write_json(self.out / "summary.json", summary)
        if self.verdicts:
            report.verdict_figure(self.figures / "verdicts.png", self.verdicts)
        runtime = time.time() - self.started
        self.log(f"runtime_seconds {runtime:.3f}")
        (self.out / "run.log").write_text("\n".join(self._log) + "\n")
        return 0 if all(v["pass"] for v in self.verdicts) else 2


def _constant(cfg: RunConfig, spec: ProblemSpec, vector) -> ControlProcess:
    vec = np.asarray(vector, dtype=float)
    if vec.shape != (spec.dims.m,):
        raise ConfigError(f"control vector must have length {spec.dims.m}, got {vec.tolist()}")
    projected = spec.control_set.project(vec)
    return ControlProcess.constant(projected, cfg.paths, cfg.steps, spec.control_set)


def _feedback(spec: ProblemSpec, ensemble: PathEnsemble, gain: float) -> ControlProcess:
    """Admissible adapted control driven by the running Brownian state."""
    N = ensemble.grid.step_count
    values = np.empty((ensemble.path_count, N, spec.dims.m))
    for i in range(N):
        raw = gain * np.tile(ensemble.W[:, i, :1], (1, spec.dims.m))
        values[:, i, :] = spec.control_set.project(raw)
    return ControlProcess(values=values, admissible=True)


def _random_constants(spec: ProblemSpec, count: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [spec.control_set.project(rng.normal(scale=1.0, size=spec.dims.m)) for _ in range(count)]


def _dump_trajectory(ctx: RunContext, bundle) -> None:
    P, Np1, n = bundle.y.shape
    N = Np1 - 1
    d = bundle.z.shape[3]
    header = (
        ["path_id", "step"]
        + [f"y_{i + 1}" for i in range(n)]
        + [f"z_{i + 1}{j + 1}" for i in range(n) for j in range(d)]
    )

    def rows():
        for p in range(P):
            for s in range(Np1):
                row = [p, s] + [bundle.y[p, s, i] for i in range(n)]
                if s < N:
                    row += [bundle.z[p, s, i, j] for i in range(n) for j in range(d)]
                else:
                    row += [""] * (n * d)
                yield row

    report.write_csv(ctx.out / "trajectory.csv", header, rows())


def _dump_brownian(ctx: RunContext, ensemble: PathEnsemble) -> None:
    def rows():
        for p in range(ensemble.path_count):
            for s in range(ensemble.grid.step_count + 1):
                for c in range(ensemble.brownian_dim):
                    yield [p, s, c, ensemble.W[p, s, c]]

    report.write_csv(ctx.out / "brownian.csv", ["path_id", "step", "coordinate", "value"], rows())


def _dump_adjoint(ctx: RunContext, adjoint) -> None:
    P, Np1, n = adjoint.p.shape
    header = ["path_id", "step"] + [f"p_{i + 1}" for i in range(n)]

    def rows():
        for p in range(P):
            for s in range(Np1):
                yield [p, s] + [adjoint.p[p, s, i] for i in range(n)]

    report.write_csv(ctx.out / "adjoint.csv", header, rows())


def _norms_block(ctx: RunContext, cfg: RunConfig, spec: ProblemSpec, bundle, oracle: dict) -> None:
    """Path-space norms with the L1-regime stability battery."""
    grid = bundle.ensemble.grid
    norms = empirical_norms(bundle.y, grid, [0.5, 0.9, 2.0])
    ctx.extras["norms"] = {
        "sp": {str(k): v for k, v in norms.sp.items()},
        "mp": {str(k): v for k, v in norms.mp.items()},
        "classD_proxy": norms.classD_proxy,
        "max_square_share": norms.max_square_share,
    }
    ctx.check("norms_finite", 1.0 if norms.finite else 0.0, 1.0, norms.finite)

    if "y0" in oracle:
        y0 = float(bundle.y[:, 0, 0].mean())
        ctx.extras["y0_estimate"] = y0
        ctx.extras["y0_oracle"] = oracle["y0"]
        gap = abs(y0 - oracle["y0"])
        if oracle.get("y0_check") == "terminal_mean":
            # martingale models: y0 estimates E[xi], so Monte Carlo error rules
            xi = np.asarray(spec.terminal(bundle.ensemble.terminal))[:, 0]
            _, se = mean_and_se(xi, bundle.ensemble)
            bound = max(5.0 * se, 1e-8)
            ctx.check("y0_matches_quadrature", gap, bound, gap <= bound)
        else:
            rel = gap / max(abs(oracle["y0"]), 1e-300)
            ctx.check("y0_matches_oracle", rel, 0.02, rel <= 0.02)

    if spec.assumption_profile.terminal_in_l1_only:
        doubled = cfg.ensemble(spec, paths=2 * cfg.paths, threads=ctx.threads)
        control2 = ControlProcess.constant(
            spec.control_set.project(np.asarray(cfg.control)), 2 * cfg.paths, cfg.steps, spec.control_set
        )
        bundle2 = solve_bsde(spec, doubled, control2, cfg.basis, cfg.picard_iters, cfg.winsor_cap, ctx.threads)
        norms2 = empirical_norms(bundle2.y, grid, [0.5, 0.9, 2.0])
        cd_ratio = norms2.classD_proxy / norms.classD_proxy
        sp2_ratio = norms2.sp[2.0] / norms.sp[2.0]
        ctx.extras["doubling"] = {
            "classD_ratio": cd_ratio,
            "sp2_ratio": sp2_ratio,
            "sp05_ratio": norms2.sp[0.5] / norms.sp[0.5],
            "sp09_ratio": norms2.sp[0.9] / norms.sp[0.9],
        }
        ctx.check("classD_stable_under_doubling", cd_ratio, 1.25, 0.8 <= cd_ratio <= 1.25)
        ctx.check("sp2_unstable_under_doubling", sp2_ratio, 1.5, sp2_ratio > 1.5)


def run_solve(ctx: RunContext) -> int:
    cfg = ctx.cfg
    spec, params = cfg.build()
    ctx.log(f"solve model={cfg.model_key} params={params}")
    ens = cfg.ensemble(spec, threads=ctx.threads)
    control = _constant(cfg, spec, cfg.control)
    bundle = solve_bsde(spec, ens, control, cfg.basis, cfg.picard_iters, cfg.winsor_cap, ctx.threads)
    adj = solve_adjoint(spec, ens, bundle)
    cost = evaluate_cost_direct(spec, ens, bundle)
    stat = check_stationarity(spec, ens, bundle, adj, [], tolerance=cfg.tolerance)

    _dump_trajectory(ctx, bundle)
    _dump_adjoint(ctx, adj)
    if cfg.dump_brownian:
        _dump_brownian(ctx, ens)
    report.solve_figure(ctx.figures / "solve_trajectories.png", ens.grid.nodes, bundle.y)

    per_step = {
        "mean_y": bundle.y[:, :, 0].mean(axis=0),
        "var_y": bundle.y[:, :, 0].var(axis=0),
        "mean_z": np.concatenate([bundle.z[:, :, 0, 0].mean(axis=0), [np.nan]]),
        "var_z": np.concatenate([bundle.z[:, :, 0, 0].var(axis=0), [np.nan]]),
    }
    ctx.extras["per_step"] = {k: list(v) for k, v in per_step.items()}
    if bundle.winsor_cap is not None:
        ctx.extras["winsor"] = {"cap": bundle.winsor_cap, "clipped": bundle.winsor_clipped}

    _norms_block(ctx, cfg, spec, bundle, model_oracle(cfg.model_key, params))
    return ctx.finish(cost.J, cost.standard_error, stat.residual)


def run_cost(ctx: RunContext) -> int:
    cfg = ctx.cfg
    spec, params = cfg.build()
    ctx.log(f"cost model={cfg.model_key} params={params}")
    ens = cfg.ensemble(spec, threads=ctx.threads)
    control = _constant(cfg, spec, cfg.control)
    bundle = solve_bsde(spec, ens, control, cfg.basis, cfg.picard_iters, cfg.winsor_cap, ctx.threads)
    direct = evaluate_cost_direct(spec, ens, bundle)
    augmented = evaluate_cost_augmented(spec, ens, bundle, eta=cfg.eta, threads=ctx.threads)

    gap = abs(direct.J - augmented.J)
    combined = float(np.hypot(direct.standard_error, augmented.standard_error))
    # zero-variance costs (constant controls on exact models) leave roundoff
    bound = max(5.0 * combined, 1e-12)
    ctx.extras["direct"] = {"J": direct.J, "initial_term": direct.initial_term, "running_term": direct.running_term, "se": direct.standard_error}
    ctx.extras["augmented"] = {"J": augmented.J, "initial_term": augmented.initial_term, "running_term": augmented.running_term, "se": augmented.standard_error}
    ctx.check("cost_duality_gap", gap, bound, gap <= bound)
    report.cost_figure(ctx.figures / "cost_duality.png", direct, augmented)

    adj = solve_adjoint(spec, ens, bundle)
    stat = check_stationarity(spec, ens, bundle, adj, [], tolerance=cfg.tolerance)
    return ctx.finish(direct.J, direct.standard_error, stat.residual)


def run_optimize(ctx: RunContext) -> int:
    cfg = ctx.cfg
    spec, params = cfg.build()
    ctx.log(f"optimize model={cfg.model_key} params={params}")
    ens = cfg.ensemble(spec, threads=ctx.threads)
    u0 = _constant(cfg, spec, cfg.u0)
    result = optimize(
        spec,
        ens,
        u0,
        step_size=cfg.step_size,
        max_iters=cfg.max_iters,
        basis=cfg.basis,
        tolerance=cfg.tolerance,
        picard_iters=cfg.picard_iters,
        winsor_cap=cfg.winsor_cap,
        threads=ctx.threads,
    )
    report.write_csv(
        ctx.out / "history.csv",
        ["iter", "J", "J_stderr", "residual", "step_size"],
        [[h["iter"], h["J"], h["J_stderr"], h["residual"], h["step_size"]] for h in result.history],
    )
    report.optimize_figure(ctx.figures / "optimize_history.png", result.history, result.validation_cost.J)

    last = result.history[-1]
    ctx.extras["termination"] = result.termination
    ctx.extras["iterations"] = result.iterations
    ctx.extras["validation_J"] = result.validation_cost.J
    ctx.extras["validation_J_stderr"] = result.validation_cost.standard_error
    ctx.extras["control_mean"] = list(result.control.values.mean(axis=(0, 1)))
    ctx.check("no_step_size_failure", 0.0 if result.termination == "step size too large" else 1.0, 1.0, result.termination != "step size too large")
    ctx.check("stationarity_reached", last["residual"], cfg.tolerance, result.termination == "converged")

    oracle = model_oracle(cfg.model_key, params)
    if "optimal_control" in oracle:
        target = float(oracle["optimal_control"])
        err_sq = ((result.control.values - target) ** 2).sum(axis=(1, 2)) * ens.grid.dt
        control_err = float(np.sqrt(err_sq.mean()))
        ctx.extras["control_error_vs_oracle"] = control_err
    if "optimal_cost" in oracle:
        ctx.extras["cost_error_vs_oracle"] = abs(result.final_cost.J - float(oracle["optimal_cost"]))

    return ctx.finish(result.final_cost.J, result.final_cost.standard_error, last["residual"])


def _verify_model(ctx: RunContext) -> tuple[float, float, float]:
    cfg = ctx.cfg
    spec, params = cfg.build()
    oracle = model_oracle(cfg.model_key, params)
    ctx.log(f"verify model={cfg.model_key} params={params}")
    ens = cfg.ensemble(spec, threads=ctx.threads)

    # gradient hygiene and declared assumptions
    assumptions = validate_assumptions(spec, probe_budget=128, seed=cfg.seed)
    ctx.check("assumptions_pass", 1.0 if assumptions.all_passed else 0.0, 1.0, assumptions.all_passed)
    ctx.extras["assumptions"] = [
        {"name": c.name, "pass": c.passed, "worst_ratio": c.worst_ratio} for c in assumptions.checks
    ]
    interior = spec.control_set.project(np.full(spec.dims.m, 0.1))
    gc = grad_check(spec, (0.3 * cfg.horizon, np.full(spec.dims.n, 0.4), np.full((spec.dims.n, spec.dims.d), 0.2), interior))
    ctx.check("grad_check", gc, 1e-4, gc <= 1e-4)
    hfd = hamiltonian_fd_error(spec, points=20, seed=cfg.seed)
    ctx.check("hamiltonian_fd", hfd, 1e-6, hfd <= 1e-6)

    # base solve at the configured control, probe direction from feedback
    u = _constant(cfg, spec, cfg.control)
    bundle = solve_bsde(spec, ens, u, cfg.basis, cfg.picard_iters, cfg.winsor_cap, ctx.threads)
    adj = solve_adjoint(spec, ens, bundle)
    cost = evaluate_cost_direct(spec, ens, bundle)
    probe = _feedback(spec, ens, gain=0.4)

    # cost duality on three admissible controls
    duality_controls = [
        ("zero", _constant(cfg, spec, np.zeros(spec.dims.m))),
        ("configured", u),
        ("feedback", probe),
    ]
    for label, ctrl in duality_controls:
        b = bundle if ctrl is u else solve_bsde(spec, ens, ctrl, cfg.basis, cfg.picard_iters, cfg.winsor_cap, ctx.threads)
        direct = evaluate_cost_direct(spec, ens, b)
        augmented = evaluate_cost_augmented(spec, ens, b, eta=cfg.eta, threads=ctx.threads)
        gap = abs(direct.J - augmented.J)
        bound = 5.0 * float(np.hypot(direct.standard_error, augmented.standard_error))
        # both estimators are exact for control-independent costs; keep the
        # verdict meaningful with a roundoff floor
        bound = max(bound, 1e-12)
        ctx.check(f"cost_duality_{label}", gap, bound, gap <= bound)

    # perturbation tables
    t4 = lemma4_table(spec, ens, u, probe, cfg.theta_grid, cfg.basis, cfg.picard_iters, ctx.threads)
    report.write_csv(
        ctx.out / "lemma4.csv",
        ["theta", "sup_mean_square_y", "sup_se", "integrated_mean_square_z", "int_se"],
        [
            [t4.theta_grid[i], t4.metrics["sup_mean_square_y"][i], t4.stderrs["sup_mean_square_y"][i],
             t4.metrics["integrated_mean_square_z"][i], t4.stderrs["integrated_mean_square_z"][i]]
            for i in range(len(t4.theta_grid))
        ],
    )
    report.convergence_figure(ctx.figures / "lemma4_convergence.png", t4.theta_grid, t4.metrics, "perturbation gap vs theta")
    if t4.is_zero("sup_mean_square_y"):
        ctx.check("lemma4_zero_dynamics", 0.0, 0.0, True)
    else:
        slope = t4.slopes["sup_mean_square_y"]
        ctx.check("lemma4_slope", slope, 0.9, slope >= 0.9)

    t5 = lemma5_table(spec, ens, u, probe, cfg.theta_grid, cfg.basis, cfg.picard_iters, ctx.threads)
    report.write_csv(
        ctx.out / "lemma5.csv",
        ["theta"] + [f"{name}{suffix}" for name in t5.metrics for suffix in ("", "_se")],
        [
            [t5.theta_grid[i]] + [col[i] for name in t5.metrics for col in (t5.metrics[name], t5.stderrs[name])]
            for i in range(len(t5.theta_grid))
        ],
    )
    report.convergence_figure(ctx.figures / "lemma5_convergence.png", t5.theta_grid, t5.metrics, "quotient gap vs theta")
    quotient_ok = all(t5.is_zero(name) or t5.monotone[name] for name in t5.metrics)
    worst_metric = max(float(np.max(v)) for v in t5.metrics.values())
    ctx.check("lemma5_quotient_convergence", worst_metric, worst_metric if quotient_ok else -1.0, quotient_ok)

    # duality identity at (u, probe)
    var = solve_variational(spec, ens, bundle, probe, cfg.basis, cfg.picard_iters, ctx.threads)
    dual = duality_check(spec, ens, bundle, adj, var, probe)
    ctx.extras["duality"] = {
        "st_mean": dual.st_mean,
        "st_se": dual.st_se,
        "expansion_value": dual.expansion_value,
        "hamiltonian_value": dual.hamiltonian_value,
        "gap": dual.gap,
        "ito_residual": dual.ito_residual,
    }
    ctx.check("duality_st_zero", abs(dual.st_mean), 3.0 * dual.st_se, dual.st_passed)
    ctx.check("duality_gap", dual.gap, 3.0 * float(np.hypot(dual.expansion_se, dual.hamiltonian_se)) + dual.ito_residual, dual.gap_passed)

    # stationarity and first-order nonnegativity at the documented optimum
    if "optimal_control" in oracle:
        star = _constant(cfg, spec, np.full(spec.dims.m, float(oracle["optimal_control"])))
        b_star = solve_bsde(spec, ens, star, cfg.basis, cfg.picard_iters, cfg.winsor_cap, ctx.threads)
        adj_star = solve_adjoint(spec, ens, b_star)
        probes = [
            ControlProcess.constant(c, cfg.paths, cfg.steps, spec.control_set)
            for c in _random_constants(spec, 5, cfg.seed + 1)
        ]
        stat = check_stationarity(spec, ens, b_star, adj_star, probes, tolerance=1e-3)
        ctx.extras["stationarity_at_optimum"] = {
            "residual": stat.residual,
            "probes": [{"value": val, "se": se} for val, se in stat.probe_values],
        }
        ctx.check("stationarity_at_optimum", stat.residual, 1e-3, stat.passed)
        worst_probe = 0.0
        probe_ok = True
        for k, probe_ctrl in enumerate(probes):
            var_k = solve_variational(spec, ens, b_star, probe_ctrl, cfg.basis, cfg.picard_iters, ctx.threads)
            val, se = lemma6_check(spec, ens, b_star, var_k, probe_ctrl)
            # zero-variance probes leave only float error, hence the floor
            slack = 3.0 * se + 1e-10
            worst_probe = min(worst_probe, val + slack)
            if val < -slack:
                probe_ok = False
        ctx.check("first_order_nonneg_at_optimum", worst_probe, 0.0, probe_ok)

    _norms_block(ctx, cfg, spec, bundle, oracle)

    adj_res = check_stationarity(spec, ens, bundle, adj, [], tolerance=cfg.tolerance)
    return cost.J, cost.standard_error, adj_res.residual


def run_verify(ctx: RunContext) -> int:
    J, se, residual = _verify_model(ctx)
    return ctx.finish(J, se, residual)


def run_benchmark(ctx: RunContext) -> int:
    """End-to-end runs of every registered problem with a documented oracle."""
    cfg = ctx.cfg
    rows = []

    def add(model, check, value, threshold, passed):
        rows.append([model, check, value, threshold, passed])
        ctx.check(f"{model}:{check}", value, threshold, passed)

    grid = TimeGrid(cfg.horizon, cfg.steps)
    rms_bound = 5.0 * max(np.sqrt(grid.dt), 1.0 / np.sqrt(cfg.paths))

    # constant terminal, control-free dynamics: exact propagation
    spec, params = build_model("zero_driver", {"terminal": "constant", "terminal_value": 3.0, "horizon": cfg.horizon})
    ens = cfg.ensemble(spec, threads=ctx.threads)
    b = solve_bsde(spec, ens, _constant(cfg, spec, [0.2]), cfg.basis, cfg.picard_iters, threads=ctx.threads)
    add("zero_driver", "constant_terminal_y_exact", float(np.max(np.abs(b.y - 3.0))), 1e-8, float(np.max(np.abs(b.y - 3.0))) <= 1e-8)
    add("zero_driver", "constant_terminal_z_exact", float(np.max(np.abs(b.z))), 1e-8, float(np.max(np.abs(b.z))) <= 1e-8)

    # Brownian terminal: y tracks W, z tracks 1
    spec, params = build_model("zero_driver", {"terminal": "brownian", "horizon": cfg.horizon})
    ens = cfg.ensemble(spec, threads=ctx.threads)
    b = solve_bsde(spec, ens, _constant(cfg, spec, [0.0]), cfg.basis, cfg.picard_iters, threads=ctx.threads)
    rms = float(np.sqrt(((b.y[:, :, 0] - ens.W[:, :, 0]) ** 2).mean(axis=0)).max())
    add("zero_driver", "brownian_terminal_rms", rms, rms_bound, rms <= rms_bound)

    # linear drift: backward ODE oracle
    spec, params = build_model("linear_drift", {"horizon": cfg.horizon})
    oracle = model_oracle("linear_drift", params)
    ens = cfg.ensemble(spec, threads=ctx.threads)
    b = solve_bsde(spec, ens, _constant(cfg, spec, [0.0]), cfg.basis, cfg.picard_iters, threads=ctx.threads)
    exact = oracle["y_of_t"](ens.grid.nodes)
    rel = float(np.max(np.abs(b.y[:, :, 0].mean(axis=0) - exact) / np.abs(exact)))
    add("linear_drift", "ode_oracle_rel_error", rel, 0.02, rel <= 0.02)
    add("linear_drift", "z_near_zero", float(np.abs(b.z).max()), 0.05, float(np.abs(b.z).max()) <= 0.05)

    # heavy tail: quadrature oracle for the initial value
    spec, params = build_model("heavy_tail", {"horizon": cfg.horizon})
    oracle = model_oracle("heavy_tail", params)
    ens = cfg.ensemble(spec, threads=ctx.threads)
    b = solve_bsde(spec, ens, _constant(cfg, spec, [0.0]), cfg.basis, cfg.picard_iters, threads=ctx.threads)
    xi = np.asarray(spec.terminal(ens.terminal))[:, 0]
    _, se = mean_and_se(xi, ens)
    y0 = float(b.y[:, 0, 0].mean())
    add("heavy_tail", "y0_quadrature", abs(y0 - oracle["y0"]), 5.0 * se, abs(y0 - oracle["y0"]) <= 5.0 * se)
    add("heavy_tail", "all_finite", 1.0 if np.all(np.isfinite(b.y)) and np.all(np.isfinite(b.z)) else 0.0, 1.0, bool(np.all(np.isfinite(b.y)) and np.all(np.isfinite(b.z))))

    # lq: full optimizer run against the closed form
    spec, params = build_model("lq", {"horizon": cfg.horizon})
    oracle = model_oracle("lq", params)
    ens = cfg.ensemble(spec, threads=ctx.threads)
    result = optimize(
        spec,
        ens,
        _constant(cfg, spec, cfg.u0),
        step_size=cfg.step_size,
        max_iters=cfg.max_iters,
        basis=cfg.basis,
        tolerance=cfg.tolerance,
        picard_iters=cfg.picard_iters,
        threads=ctx.threads,
    )
    target = float(oracle["optimal_control"])
    err_sq = ((result.control.values - target) ** 2).sum(axis=(1, 2)) * ens.grid.dt
    control_err = float(np.sqrt(err_sq.mean()))
    cost_err = abs(result.final_cost.J - float(oracle["optimal_cost"]))
    add("lq", "optimizer_control_error", control_err, 0.02, control_err <= 0.02)
    add("lq", "optimizer_cost_error", cost_err, 0.02, cost_err <= 0.02)
    add("lq", "optimizer_iterations", result.iterations, cfg.max_iters, result.iterations <= cfg.max_iters and result.termination == "converged")

    star = _constant(cfg, spec, [target])
    b_star = solve_bsde(spec, ens, star, cfg.basis, cfg.picard_iters, threads=ctx.threads)
    adj_star = solve_adjoint(spec, ens, b_star)
    probes = [ControlProcess.constant(c, cfg.paths, cfg.steps, spec.control_set) for c in _random_constants(spec, 5, cfg.seed + 1)]
    stat = check_stationarity(spec, ens, b_star, adj_star, probes, tolerance=1e-3)
    add("lq", "stationarity_at_oracle", stat.residual, 1e-3, stat.passed)

    report.write_csv(ctx.out / "benchmark.csv", ["model", "check", "value", "threshold", "pass"], rows)
    return ctx.finish(result.final_cost.J, result.final_cost.standard_error, stat.residual)


_COMMANDS = {
    "solve": run_solve,
    "cost": run_cost,
    "optimize": run_optimize,
    "verify": run_verify,
    "benchmark": run_benchmark,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="bsmp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker bound; never affects results")
        p.add_argument("--out", default=None, help="override the output directory")
    args = parser.parse_args(argv)

    try:
        cfg = RunConfig.load(args.config, seed=args.seed, out=args.out)
        ctx = RunContext(cfg, args.command, max(1, args.threads))
        ctx.log(f"command {args.command} config {args.config}")
        return _COMMANDS[args.command](ctx)
    except ConfigError as exc:
        print(f"bsmp-error: config: {exc}", file=sys.stderr)
        return 1
    except BsmpError as exc:
        print(f"bsmp-error: runtime: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"bsmp-error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
