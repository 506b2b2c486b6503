"""Numerical verification suites: perturbation convergence tables, the
variational inequality functional, the duality/martingale identity, and
empirical path-space norms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjoint import AdjointPath, hamiltonian
from .bsde import ControlProcess, RegressionBasis, TrajectoryBundle, VariationalSolution, solve_bsde, solve_variational
from .model import ProblemSpec
from .sampling import PathEnsemble, TimeGrid, mean_and_se
from .smp import perturb

# squared metrics of O(1) processes bottom out near (1e-13)^2; anything
# below this floor is solver roundoff, not signal
_ZERO_METRIC = 1e-20


@dataclass(frozen=True)
class ConvergenceTable:
    """Metric values over a decreasing theta grid with fitted decay rates.

    slopes fit log(metric) against log(theta); a slope is NaN when the
    metric vanishes identically (nothing to fit).  monotone flags record
    whether each metric is nonincreasing as theta decreases, with one
    standard error of slack per step.
    """

    theta_grid: np.ndarray
    metrics: dict
    stderrs: dict
    slopes: dict
    monotone: dict

    def is_zero(self, name: str) -> bool:
        return bool(np.all(np.asarray(self.metrics[name]) < _ZERO_METRIC))


@dataclass(frozen=True)
class NormEstimates:
    """Empirical S^p / M^p norms and the class-(D) proxy of a process.

    classD_proxy maximizes E|X_tau| over the deterministic grid times and
    the first hitting times of |X| at levels 1, 2, 4, 8 (a computable lower
    bound for the stopping-time supremum).  max_square_share is the largest
    single-path share of the sup-square sum; shares of order one reveal an
    infinite second moment far more reliably than growth ratios.
    """

    sp: dict
    mp: dict
    classD_proxy: float
    max_square_share: float
    finite: bool


def _validate_theta_grid(theta_grid) -> np.ndarray:
    grid = np.asarray(theta_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("theta grid must be a nonempty 1-d sequence")
    if np.any(grid <= 0) or np.any(grid > 1):
        raise ValueError("theta values must lie in (0, 1]")
    if np.any(np.diff(grid) >= 0):
        raise ValueError("theta grid must be strictly decreasing")
    return grid


def _fit_slope(theta: np.ndarray, values: np.ndarray) -> float:
    if np.any(values < _ZERO_METRIC):
        return float("nan")
    return float(np.polyfit(np.log(theta), np.log(values), 1)[0])


def _monotone_within_se(values: np.ndarray, stderrs: np.ndarray) -> bool:
    values = np.where(values < _ZERO_METRIC, 0.0, values)
    return bool(np.all(values[1:] <= values[:-1] + stderrs[1:]))


def _table(theta_grid, metric_rows: dict, stderr_rows: dict) -> ConvergenceTable:
    metrics = {k: np.asarray(v) for k, v in metric_rows.items()}
    stderrs = {k: np.asarray(v) for k, v in stderr_rows.items()}
    slopes = {k: _fit_slope(theta_grid, v) for k, v in metrics.items()}
    monotone = {k: _monotone_within_se(metrics[k], stderrs[k]) for k in metrics}
    return ConvergenceTable(theta_grid=theta_grid, metrics=metrics, stderrs=stderrs, slopes=slopes, monotone=monotone)


def _sup_mean_square(delta: np.ndarray, ensemble: PathEnsemble) -> tuple[float, float]:
    """max over grid times of E|delta_t|^2 with the SE at the maximizing time."""
    sq = np.einsum("pik,pik->pi", delta, delta)
    means = sq.mean(axis=0)
    worst = int(np.argmax(means))
    return mean_and_se(sq[:, worst], ensemble)


def _integrated_mean_square(delta: np.ndarray, ensemble: PathEnsemble) -> tuple[float, float]:
    per_path = np.einsum("pikd,pikd->pi", delta, delta).sum(axis=1) * ensemble.grid.dt
    return mean_and_se(per_path, ensemble)


def lemma4_table(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    u: ControlProcess,
    v: ControlProcess,
    theta_grid,
    basis: Optional[RegressionBasis] = None,
    picard_iters: int = 2,
    threads: int = 1,
) -> ConvergenceTable:
    """State and z gaps between the perturbed and base solves per theta.

    Both solves share the ensemble and regression matrices, so the gap is a
    clean function of theta; the fitted slope should be at least the linear
    rate the perturbation bound guarantees.
    """
    theta_grid = _validate_theta_grid(theta_grid)
    basis = basis or RegressionBasis()
    base = solve_bsde(spec, ensemble, u, basis, picard_iters, threads=threads)
    sup_y, sup_y_se, int_z, int_z_se = [], [], [], []
    for theta in theta_grid:
        pert = solve_bsde(spec, ensemble, perturb(u, v, theta), basis, picard_iters, threads=threads)
        m, se = _sup_mean_square(pert.y - base.y, ensemble)
        sup_y.append(m)
        sup_y_se.append(se)
        m, se = _integrated_mean_square(pert.z - base.z, ensemble)
        int_z.append(m)
        int_z_se.append(se)
    return _table(
        theta_grid,
        {"sup_mean_square_y": sup_y, "integrated_mean_square_z": int_z},
        {"sup_mean_square_y": sup_y_se, "integrated_mean_square_z": int_z_se},
    )


def lemma5_table(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    u: ControlProcess,
    v: ControlProcess,
    theta_grid,
    basis: Optional[RegressionBasis] = None,
    picard_iters: int = 2,
    threads: int = 1,
) -> ConvergenceTable:
    """Gap between the difference quotients and the linearized solution.

    For affine dynamics the quotient equals the linear solution exactly and
    every metric sits at roundoff; otherwise the metrics must shrink as
    theta decreases.
    """
    theta_grid = _validate_theta_grid(theta_grid)
    basis = basis or RegressionBasis()
    base = solve_bsde(spec, ensemble, u, basis, picard_iters, threads=threads)
    var = solve_variational(spec, ensemble, base, v, basis, picard_iters, threads=threads)

    at0, at0_se, sup_y, sup_y_se, int_z, int_z_se = [], [], [], [], [], []
    for theta in theta_grid:
        pert = solve_bsde(spec, ensemble, perturb(u, v, theta), basis, picard_iters, threads=threads)
        gap_y = var.Y - (pert.y - base.y) / theta
        gap_z = var.Z - (pert.z - base.z) / theta
        sq0 = np.einsum("pk,pk->p", gap_y[:, 0, :], gap_y[:, 0, :])
        m, se = mean_and_se(sq0, ensemble)
        at0.append(m)
        at0_se.append(se)
        m, se = _sup_mean_square(gap_y, ensemble)
        sup_y.append(m)
        sup_y_se.append(se)
        m, se = _integrated_mean_square(gap_z, ensemble)
        int_z.append(m)
        int_z_se.append(se)
    return _table(
        theta_grid,
        {
            "y_quotient_gap_at_0": at0,
            "sup_y_quotient_gap": sup_y,
            "integrated_z_quotient_gap": int_z,
        },
        {
            "y_quotient_gap_at_0": at0_se,
            "sup_y_quotient_gap": sup_y_se,
            "integrated_z_quotient_gap": int_z_se,
        },
    )


def _first_order_paths(
    spec: ProblemSpec,
    bundle_u: TrajectoryBundle,
    variational: VariationalSolution,
    v: ControlProcess,
    trapezoid: bool,
) -> np.ndarray:
    """Pathwise first-order expansion functional of the cost."""
    ens = bundle_u.ensemble
    nodes, dt = ens.grid.nodes, ens.grid.dt
    N = ens.grid.step_count
    u = bundle_u.control.values
    g_y = np.asarray(spec.initial_cost_grad(bundle_u.y[:, 0, :]))
    total = np.einsum("pn,pn->p", g_y, variational.Y[:, 0, :])

    def integrand(t_idx, y_idx):
        y_i, z_i, u_i = bundle_u.y[:, y_idx, :], bundle_u.z[:, t_idx, :, :], u[:, t_idx, :]
        hy = np.asarray(spec.running_cost_grad_y(nodes[y_idx], y_i, z_i, u_i))
        hz = np.asarray(spec.running_cost_grad_z(nodes[y_idx], y_i, z_i, u_i))
        hv = np.asarray(spec.running_cost_grad_v(nodes[y_idx], y_i, z_i, u_i))
        out = np.einsum("pn,pn->p", hy, variational.Y[:, y_idx, :])
        out += np.einsum("pnd,pnd->p", hz, variational.Z[:, t_idx, :, :])
        out += np.einsum("pm,pm->p", hv, v.values[:, t_idx, :] - u[:, t_idx, :])
        return out

    for i in range(N):
        if trapezoid:
            total += 0.5 * dt * (integrand(i, i) + integrand(i, i + 1))
        else:
            total += dt * integrand(i, i)
    return total


def lemma6_check(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    bundle_u: TrajectoryBundle,
    variational: VariationalSolution,
    v: ControlProcess,
) -> tuple[float, float]:
    """First-order expansion of the cost in the direction v - u, with SE.

    This targets the theta -> 0 limit of (J(u^theta) - J(u)) / theta; at an
    optimal u it cannot be significantly negative for any admissible v.
    """
    if bundle_u.ensemble is not ensemble or variational.ensemble is not ensemble:
        raise ValueError("inputs must share one ensemble")
    paths = _first_order_paths(spec, bundle_u, variational, v, trapezoid=True)
    return mean_and_se(paths, ensemble)


@dataclass(frozen=True)
class DualityReport:
    """Martingale zero test and the gap between the two derivative forms."""

    st_mean: float
    st_se: float
    expansion_value: float
    expansion_se: float
    hamiltonian_value: float
    hamiltonian_se: float
    gap: float
    ito_residual: float
    st_passed: bool
    gap_passed: bool


def duality_check(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    bundle_u: TrajectoryBundle,
    adjoint: AdjointPath,
    variational: VariationalSolution,
    v: ControlProcess,
) -> DualityReport:
    """Verify E[S_T] = 0 and that the first-order expansion matches the
    Hamiltonian derivative up to the discrete product-rule defect.

    S_T accumulates (Y^T H_z - p^T Z) . dW over the grid.  Both functionals
    here use left-endpoint quadrature so their difference decomposes exactly
    into the pathwise Ito defect plus S_T; the defect's mean is the reported
    O(dt) residual.
    """
    ens = ensemble
    nodes, dt = ens.grid.nodes, ens.grid.dt
    N = ens.grid.step_count
    u = bundle_u.control.values

    st = np.zeros(ens.path_count)
    ham_paths = np.zeros(ens.path_count)
    for i in range(N):
        ham = hamiltonian(spec, nodes[i], bundle_u.y[:, i, :], bundle_u.z[:, i, :, :], u[:, i, :], adjoint.p[:, i, :])
        y_part = np.einsum("pn,pnd->pd", variational.Y[:, i, :], ham.grad_z)
        z_part = np.einsum("pn,pnd->pd", adjoint.p[:, i, :], variational.Z[:, i, :, :])
        st += np.einsum("pd,pd->p", y_part - z_part, ens.dW[:, i, :])
        gap_i = u[:, i, :] - v.values[:, i, :]
        ham_paths += dt * np.einsum("pm,pm->p", ham.grad_v, gap_i)

    exp_paths = _first_order_paths(spec, bundle_u, variational, v, trapezoid=False)

    st_mean, st_se = mean_and_se(st, ens)
    e16, se16 = mean_and_se(exp_paths, ens)
    e21, se21 = mean_and_se(ham_paths, ens)
    ito_residual = abs(float(np.mean(exp_paths - ham_paths - st)))
    gap = abs(e16 - e21)
    combined = float(np.hypot(se16, se21))
    # zero-variance cases (deterministic integrands) leave only float error
    floor = 1e-12
    return DualityReport(
        st_mean=st_mean,
        st_se=st_se,
        expansion_value=e16,
        expansion_se=se16,
        hamiltonian_value=e21,
        hamiltonian_se=se21,
        gap=gap,
        ito_residual=ito_residual,
        st_passed=abs(st_mean) <= 3.0 * st_se + floor,
        gap_passed=gap <= 3.0 * combined + ito_residual + floor,
    )


def empirical_norms(process: np.ndarray, grid: TimeGrid, p_list) -> NormEstimates:
    """Empirical S^p and M^p norms of a discrete process (P, N+1, k).

    The M^p integral uses the left endpoints, matching processes defined on
    intervals.  No monotonicity in p is asserted; only nonnegativity and
    finiteness are meaningful in general.
    """
    process = np.asarray(process, dtype=float)
    if process.ndim != 3 or process.shape[0] == 0:
        raise ValueError("process must be a nonempty (P, N+1, k) array")
    p_list = [float(p) for p in p_list]
    if any(p <= 0 for p in p_list):
        raise ValueError("norm orders must be positive")

    path_norms = np.linalg.norm(process, axis=2)  # (P, N+1)
    sup_abs = path_norms.max(axis=1)
    int_sq = (path_norms[:, :-1] ** 2).sum(axis=1) * grid.dt

    sp = {p: float(np.mean(sup_abs**p) ** min(1.0, 1.0 / p)) for p in p_list}
    mp = {p: float(np.mean(int_sq ** (p / 2.0)) ** min(1.0, 1.0 / p)) for p in p_list}

    candidates = [float(path_norms[:, i].mean()) for i in range(path_norms.shape[1])]
    for level in (1.0, 2.0, 4.0, 8.0):
        hit = path_norms >= level
        first = np.where(hit.any(axis=1), hit.argmax(axis=1), path_norms.shape[1] - 1)
        candidates.append(float(path_norms[np.arange(path_norms.shape[0]), first].mean()))
    classd = max(candidates)

    sup_sq = sup_abs**2
    total = float(sup_sq.sum())
    share = float(sup_sq.max() / total) if total > 0 else 0.0
    finite = bool(np.all(np.isfinite(sup_abs)) and all(np.isfinite(val) for val in sp.values()))
    return NormEstimates(sp=sp, mp=mp, classD_proxy=classd, max_square_share=share, finite=finite)
