"""Cost evaluation, convex perturbations, stationarity certificates and the
projected-gradient control optimizer.

The optimizer works on a frozen ensemble (sample-average approximation with
common random numbers): controls are per-path, per-step arrays, each
iteration re-solves the state and adjoint, and the pointwise update ascends
the Hamiltonian, u <- proj_U(u + gamma * H_v), which is the cost-descent
direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjoint import AdjointPath, hamiltonian, solve_adjoint
from .bsde import (
    ControlProcess,
    RegressionBasis,
    TrajectoryBundle,
    _backward_solve,
    _StepRegressor,
    solve_bsde,
)
from .model import ProblemSpec
from .sampling import PathEnsemble, mean_and_se, sample_ensemble


@dataclass(frozen=True)
class CostBreakdown:
    """J split into its initial and running parts; J is their exact sum."""

    J: float
    initial_term: float
    running_term: float
    standard_error: float
    method: str


@dataclass(frozen=True)
class StationarityReport:
    """First-order certificate at a control.

    residual estimates the time-integrated squared gap between u and the
    projection of u + H_v; probe_values maps probe index to the estimated
    directional functional and its standard error, which must not be
    significantly negative at a stationary point.
    """

    residual: float
    probe_values: tuple
    tolerance: float
    passed: bool


def _running_cost_paths(spec: ProblemSpec, bundle: TrajectoryBundle) -> np.ndarray:
    """Per-path trapezoid estimate of the running cost integral.

    z and v live on intervals, so both trapezoid endpoints reuse the
    interval values while y and t advance.
    """
    ens = bundle.ensemble
    nodes, dt = ens.grid.nodes, ens.grid.dt
    N = ens.grid.step_count
    u = bundle.control.values
    total = np.zeros(ens.path_count)
    for i in range(N):
        z_i, u_i = bundle.z[:, i, :, :], u[:, i, :]
        left = np.asarray(spec.running_cost(nodes[i], bundle.y[:, i, :], z_i, u_i))
        right = np.asarray(spec.running_cost(nodes[i + 1], bundle.y[:, i + 1, :], z_i, u_i))
        if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
            bad = int(np.flatnonzero(~(np.isfinite(left) & np.isfinite(right)))[0])
            raise ValueError(f"non-finite running cost on path {bad} at step {i}")
        total += 0.5 * dt * (left + right)
    return total


def evaluate_cost_direct(spec: ProblemSpec, ensemble: PathEnsemble, bundle: TrajectoryBundle) -> CostBreakdown:
    """J = E[g(y_0) + int h dt], trapezoid in time, mean over paths."""
    if bundle.ensemble is not ensemble:
        raise ValueError("bundle was solved on a different ensemble")
    initial_paths = np.asarray(spec.initial_cost(bundle.y[:, 0, :]))
    running_paths = _running_cost_paths(spec, bundle)
    initial_term, _ = mean_and_se(initial_paths, ensemble)
    running_term, _ = mean_and_se(running_paths, ensemble)
    _, se = mean_and_se(initial_paths + running_paths, ensemble)
    return CostBreakdown(
        J=initial_term + running_term,
        initial_term=initial_term,
        running_term=running_term,
        standard_error=se,
        method="direct",
    )


def evaluate_cost_augmented(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    bundle: TrajectoryBundle,
    eta: float = 0.0,
    threads: int = 1,
) -> CostBreakdown:
    """Dual cost via the stacked system that carries the running cost as an
    extra backward state x with terminal eta: J = E[g(y_0) - x_0] + E[eta].

    Solved with the bundle's basis and refinement settings on the same
    ensemble, so the estimate must agree with the direct one up to Monte
    Carlo error.
    """
    if bundle.ensemble is not ensemble:
        raise ValueError("bundle was solved on a different ensemble")
    P, N = ensemble.path_count, ensemble.grid.step_count
    n, d, m = spec.dims.n, spec.dims.d, spec.dims.m
    nodes = ensemble.grid.nodes
    u = bundle.control.values

    terminal_y = np.asarray(spec.terminal(ensemble.terminal), dtype=float).reshape(P, n)
    if bundle.winsor_cap is not None:
        terminal_y = np.clip(terminal_y, -bundle.winsor_cap, bundle.winsor_cap)
    terminal = np.concatenate([terminal_y, np.full((P, 1), float(eta))], axis=1)

    def driver_at(i, state, zstate):
        y_i = state[:, :n]
        z_i = zstate[:, :n, :].reshape(P, n, d)
        u_i = u[:, i, :]
        b = np.asarray(spec.driver(nodes[i], y_i, z_i, u_i)).reshape(P, n)
        h = np.asarray(spec.running_cost(nodes[i], y_i, z_i, u_i)).reshape(P, 1)
        return np.concatenate([b, h], axis=1)

    state, _ = _backward_solve(ensemble, terminal, driver_at, bundle.basis, bundle.picard_iters, threads)
    y0 = state[:, 0, :n]
    x0 = state[:, 0, n]
    tilted = np.asarray(spec.initial_cost(y0)) - x0
    initial_term, _ = mean_and_se(tilted, ensemble)
    running_term = float(eta)
    _, se = mean_and_se(tilted + eta, ensemble)
    return CostBreakdown(
        J=initial_term + running_term,
        initial_term=initial_term,
        running_term=running_term,
        standard_error=se,
        method="augmented",
    )


def perturb(u: ControlProcess, v: ControlProcess, theta: float) -> ControlProcess:
    """Convex perturbation u + theta (v - u); admissible by convexity."""
    if u.shape != v.shape:
        raise ValueError(f"control shapes differ: {u.shape} vs {v.shape}")
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    if theta == 0.0:
        values = u.values.copy()
    elif theta == 1.0:
        values = v.values.copy()
    else:
        values = u.values + theta * (v.values - u.values)
    return ControlProcess(values=values, admissible=u.admissible and v.admissible)


def hamiltonian_control_grad(
    spec: ProblemSpec, bundle: TrajectoryBundle, adjoint: AdjointPath
) -> np.ndarray:
    """H_v along the trajectory at every interval, shape (P, N, m)."""
    ens = bundle.ensemble
    nodes = ens.grid.nodes
    N = ens.grid.step_count
    out = np.empty_like(bundle.control.values)
    for i in range(N):
        ham = hamiltonian(
            spec, nodes[i], bundle.y[:, i, :], bundle.z[:, i, :, :], bundle.control.values[:, i, :], adjoint.p[:, i, :]
        )
        out[:, i, :] = ham.grad_v
    return out


def directional_derivative(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    bundle_u: TrajectoryBundle,
    adjoint: AdjointPath,
    v: ControlProcess,
) -> tuple[float, float]:
    """Estimate of E int H_v(t, y^u, z^u, u, p) . (u - v) dt with its SE.

    This is the limit of (J(u + theta (v - u)) - J(u)) / theta as theta
    drops to zero.
    """
    if bundle_u.ensemble is not ensemble or adjoint.ensemble is not ensemble:
        raise ValueError("inputs must share one ensemble")
    nodes, dt = ensemble.grid.nodes, ensemble.grid.dt
    N = ensemble.grid.step_count
    u = bundle_u.control.values
    total = np.zeros(ensemble.path_count)
    for i in range(N):
        z_i, u_i = bundle_u.z[:, i, :, :], u[:, i, :]
        gap = u_i - v.values[:, i, :]
        left = hamiltonian(spec, nodes[i], bundle_u.y[:, i, :], z_i, u_i, adjoint.p[:, i, :]).grad_v
        right = hamiltonian(spec, nodes[i + 1], bundle_u.y[:, i + 1, :], z_i, u_i, adjoint.p[:, i + 1, :]).grad_v
        total += 0.5 * dt * (np.einsum("pm,pm->p", left, gap) + np.einsum("pm,pm->p", right, gap))
    return mean_and_se(total, ensemble)


def check_stationarity(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    bundle_u: TrajectoryBundle,
    adjoint: AdjointPath,
    probe_directions: list[ControlProcess],
    tolerance: float = 1e-3,
) -> StationarityReport:
    """Projection-residual certificate for the first-order condition.

    On a convex control set, u is stationary iff u equals the projection of
    u + H_v; the residual integrates the squared gap.  Signed probes retain
    the literal inequality: each probe value must be >= -3 SE.
    """
    hv = hamiltonian_control_grad(spec, bundle_u, adjoint)
    u = bundle_u.control.values
    projected = spec.control_set.project(u + hv)
    gap_sq = np.einsum("pim,pim->pi", u - projected, u - projected)
    residual, _ = mean_and_se(gap_sq.sum(axis=1) * ensemble.grid.dt, ensemble)

    probe_values = []
    probes_ok = True
    for probe in probe_directions:
        value, se = directional_derivative(spec, ensemble, bundle_u, adjoint, probe)
        probe_values.append((value, se))
        if value < -3.0 * se:
            probes_ok = False
    passed = residual <= tolerance and probes_ok
    return StationarityReport(
        residual=residual,
        probe_values=tuple(probe_values),
        tolerance=tolerance,
        passed=passed,
    )


@dataclass
class OptimizeResult:
    """Iterate history and the final control of the projected-gradient run."""

    control: ControlProcess
    history: list = field(default_factory=list)  # dicts: iter, J, J_stderr, residual, step_size
    final_cost: Optional[CostBreakdown] = None
    validation_cost: Optional[CostBreakdown] = None
    termination: str = ""
    iterations: int = 0


def _transfer_control(
    control: ControlProcess,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
    target: PathEnsemble,
    spec: ProblemSpec,
) -> ControlProcess:
    """Carry a per-path control to a fresh ensemble as a feedback policy.

    Each step's values are regressed on the adapted basis and the fitted
    function is evaluated on the target paths, then projected back onto the
    control set.
    """
    regressor = _StepRegressor(ensemble, basis)
    N = ensemble.grid.step_count
    out = np.empty((target.path_count, N, control.values.shape[2]))
    for i in range(N):
        fit = regressor.fit(i, control.values[:, i, :])
        if i == 0:
            design = np.ones((target.path_count, 1))
        else:
            design = basis.matrix(target.W[:, i, :])
        out[:, i, :] = spec.control_set.project(design @ fit.coefficients)
    return ControlProcess(values=out, admissible=True)


def optimize(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    u0: ControlProcess,
    step_size: float,
    max_iters: int = 50,
    basis: Optional[RegressionBasis] = None,
    tolerance: float = 1e-4,
    picard_iters: int = 2,
    winsor_cap: Optional[float] = None,
    validation_ensemble: Optional[PathEnsemble] = None,
    threads: int = 1,
) -> OptimizeResult:
    """Projected Hamiltonian ascent on a frozen ensemble.

    Stops when the stationarity residual drops below tolerance or after
    max_iters; a cost increase over 5 consecutive iterations terminates
    with a step-size diagnostic instead of silently diverging.  The final
    cost is re-estimated on a fresh validation ensemble to expose overfit
    to the training paths.
    """
    if step_size < 0:
        raise ValueError(f"step_size must be nonnegative, got {step_size}")
    basis = basis or RegressionBasis()
    if validation_ensemble is None:
        validation_ensemble = sample_ensemble(
            ensemble.grid,
            ensemble.path_count,
            seed=ensemble.seed + 1_000_003,
            antithetic=ensemble.antithetic,
            brownian_dim=ensemble.brownian_dim,
        )

    u = ControlProcess(values=spec.control_set.project(u0.values), admissible=True)
    result = OptimizeResult(control=u)
    consecutive_increases = 0
    previous_J = np.inf
    bundle = None

    for k in range(max_iters):
        bundle = solve_bsde(spec, ensemble, u, basis, picard_iters, winsor_cap, threads)
        adj = solve_adjoint(spec, ensemble, bundle)
        cost = evaluate_cost_direct(spec, ensemble, bundle)
        hv = hamiltonian_control_grad(spec, bundle, adj)
        projected = spec.control_set.project(u.values + hv)
        gap_sq = np.einsum("pim,pim->pi", u.values - projected, u.values - projected)
        residual, _ = mean_and_se(gap_sq.sum(axis=1) * ensemble.grid.dt, ensemble)

        result.history.append(
            {"iter": k, "J": cost.J, "J_stderr": cost.standard_error, "residual": residual, "step_size": step_size}
        )
        result.control = u
        result.final_cost = cost
        result.iterations = k + 1

        if residual <= tolerance:
            result.termination = "converged"
            break
        consecutive_increases = consecutive_increases + 1 if cost.J > previous_J else 0
        if consecutive_increases >= 5:
            result.termination = "step size too large"
            break
        previous_J = cost.J

        u = ControlProcess(values=spec.control_set.project(u.values + step_size * hv), admissible=True)
    else:
        result.termination = "max_iters"

    transferred = _transfer_control(result.control, ensemble, basis, validation_ensemble, spec)
    val_bundle = solve_bsde(spec, validation_ensemble, transferred, basis, picard_iters, winsor_cap, threads)
    result.validation_cost = evaluate_cost_direct(spec, validation_ensemble, val_bundle)
    return result
