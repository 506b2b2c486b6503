"""Backward least-squares Monte Carlo solver for the controlled system,
its frozen-coefficient linear (variational) form, and difference solves.

Conditional expectations on the grid are realized by cross-path ridge
regression on basis functions of W_{t_i}.  The z process is extracted from
the increment correlation E[(y_{i+1} - E_i y_{i+1}) dW^T | F_i] / dt; the
centering leaves the conditional expectation unchanged and makes the
estimator exact when y_{i+1} is already measurable at t_i.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np

from .errors import RegressionError, SolverError
from .model import ControlSet, ProblemSpec
from .sampling import PathEnsemble

_GRAM_BLOCK = 4096


@dataclass(frozen=True)
class RegressionBasis:
    """Adapted basis in W_{t_i}: global polynomials or hypercube indicators.

    kind "poly" uses all monomials of total degree <= degree_or_cells;
    kind "piecewise" partitions each W coordinate range into
    degree_or_cells equal cells and uses cell indicators.
    """

    kind: str = "poly"
    degree_or_cells: int = 3
    ridge: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("poly", "piecewise"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree_or_cells < 1:
            raise ValueError("degree_or_cells must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")

    def matrix(self, w: np.ndarray) -> np.ndarray:
        """Design matrix at one grid step, w of shape (P, d)."""
        P, d = w.shape
        if self.kind == "poly":
            cols = [np.ones(P)]
            for total in range(1, self.degree_or_cells + 1):
                for combo in combinations_with_replacement(range(d), total):
                    col = np.ones(P)
                    for j in combo:
                        col = col * w[:, j]
                    cols.append(col)
            return np.column_stack(cols)
        K = self.degree_or_cells
        lo = w.min(axis=0)
        hi = w.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        cell = np.minimum(((w - lo) / span * K).astype(int), K - 1)
        flat = np.zeros(P, dtype=int)
        for j in range(w.shape[1]):
            flat = flat * K + cell[:, j]
        out = np.zeros((P, K ** d))
        out[np.arange(P), flat] = 1.0
        return out


@dataclass(frozen=True)
class RegressionFit:
    """Least-squares projection onto the step-i basis span."""

    step: int
    coefficients: np.ndarray  # (B, k)
    fitted: np.ndarray  # (P, k)
    condition: float


@dataclass
class ControlProcess:
    """Piecewise-constant control values, shape (P, N, m)."""

    values: np.ndarray
    admissible: bool = True

    @property
    def shape(self):
        return self.values.shape

    @staticmethod
    def constant(vector, path_count: int, step_count: int, control_set: Optional[ControlSet] = None) -> "ControlProcess":
        vec = np.atleast_1d(np.asarray(vector, dtype=float))
        values = np.broadcast_to(vec, (path_count, step_count, vec.shape[0])).copy()
        admissible = True
        if control_set is not None:
            admissible = bool(np.all(control_set.contains(vec)))
        return ControlProcess(values=values, admissible=admissible)

    @staticmethod
    def from_array(values: np.ndarray, control_set: Optional[ControlSet] = None) -> "ControlProcess":
        values = np.asarray(values, dtype=float)
        if values.ndim != 3:
            raise ValueError("control values must have shape (P, N, m)")
        admissible = True
        if control_set is not None:
            admissible = bool(np.all(control_set.contains(values)))
        return ControlProcess(values=values, admissible=admissible)


@dataclass
class TrajectoryBundle:
    """Discrete adapted solution (y, z) plus the control that produced it."""

    y: np.ndarray  # (P, N+1, n)
    z: np.ndarray  # (P, N, n, d)
    control: ControlProcess
    ensemble: PathEnsemble
    basis: RegressionBasis
    picard_iters: int
    winsor_cap: Optional[float] = None
    winsor_clipped: int = 0


@dataclass
class VariationalSolution:
    """Solution (Y, Z) of the linear system in the direction v - u."""

    Y: np.ndarray  # (P, N+1, n)
    Z: np.ndarray  # (P, N, n, d)
    control: ControlProcess
    direction: ControlProcess
    ensemble: PathEnsemble


class _StepRegressor:
    """Per-step ridge solver with an unpenalized intercept-like component.

    Columns are scaled to unit RMS before solving so the ridge parameter is
    meaningful at every grid time; Gram matrices accumulate over fixed path
    blocks so the result does not depend on the worker count.
    """

    def __init__(self, ensemble: PathEnsemble, basis: RegressionBasis, threads: int = 1):
        self.ensemble = ensemble
        self.basis = basis
        self.threads = threads
        self._cache: dict[int, tuple] = {}

    def _design(self, step: int):
        if step in self._cache:
            return self._cache[step]
        if step == 0:
            # F_0 is trivial: only the constant function is adapted
            A = np.ones((self.ensemble.path_count, 1))
        else:
            A = self.basis.matrix(self.ensemble.W[:, step, :])
        scale = np.sqrt(self._block_sum(lambda blk: (A[blk] ** 2).sum(axis=0)) / A.shape[0])
        scale = np.where(scale > 0, scale, 1.0)
        scaled = A / scale
        gram = self._block_sum(lambda blk: scaled[blk].T @ scaled[blk])
        penalty = self.basis.ridge * np.ones(A.shape[1])
        if self.basis.kind == "poly" or step == 0:
            penalty[0] = 0.0  # constants are never shrunk
        gram_r = gram + np.diag(penalty)
        try:
            chol = np.linalg.cholesky(gram_r)
        except np.linalg.LinAlgError as exc:
            cond = float(np.linalg.cond(gram_r))
            raise RegressionError(step, cond) from exc
        diag = np.diagonal(chol)
        cond = float((diag.max() / diag.min()) ** 2) if diag.min() > 0 else np.inf
        # a repaired Gram keeps cond near max_eig / ridge; anything beyond
        # this is exact collinearity the ridge did not touch
        if cond > 1e14:
            raise RegressionError(step, cond)
        entry = (scaled, scale, chol, cond)
        self._cache[step] = entry
        return entry

    def _block_sum(self, fn):
        P = self.ensemble.path_count
        blocks = [slice(lo, min(lo + _GRAM_BLOCK, P)) for lo in range(0, P, _GRAM_BLOCK)]
        if self.threads > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                parts = list(pool.map(fn, blocks))
        else:
            parts = [fn(blk) for blk in blocks]
        total = parts[0].copy()
        for part in parts[1:]:
            total += part
        return total

    def fit(self, step: int, samples: np.ndarray) -> RegressionFit:
        samples = np.asarray(samples, dtype=float)
        flat = samples.reshape(samples.shape[0], -1)
        if not np.all(np.isfinite(flat)):
            raise RegressionError(step, np.inf, f"non-finite regression samples at step {step}")
        scaled, scale, chol, cond = self._design(step)
        rhs = self._block_sum(lambda blk: scaled[blk].T @ flat[blk])
        coef_scaled = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        if not np.all(np.isfinite(coef_scaled)):
            raise RegressionError(step, cond)
        fitted = scaled @ coef_scaled
        coef = coef_scaled / scale[:, None]
        return RegressionFit(
            step=step,
            coefficients=coef.reshape((coef.shape[0],) + samples.shape[1:]),
            fitted=fitted.reshape(samples.shape),
            condition=cond,
        )


def regress(
    ensemble: PathEnsemble,
    step: int,
    samples: np.ndarray,
    basis: Optional[RegressionBasis] = None,
    threads: int = 1,
) -> RegressionFit:
    """Project per-path samples onto the adapted basis span at one step.

    At step 0 the basis degenerates to the constant function, so the fit is
    the cross-path mean.
    """
    if not 0 <= step <= ensemble.grid.step_count:
        raise ValueError(f"step {step} outside grid")
    reg = _StepRegressor(ensemble, basis or RegressionBasis(), threads=threads)
    return reg.fit(step, samples)


def _check_finite(step: int, name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise SolverError(step, f"non-finite {name} values")


def _backward_solve(
    ensemble: PathEnsemble,
    terminal_values: np.ndarray,
    driver_at: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
    basis: RegressionBasis,
    picard_iters: int,
    threads: int = 1,
):
    """Shared backward induction for any driver.

    driver_at(i, y, z) evaluates the dt coefficient at grid step i with the
    relevant control already baked in; y is (P, k), z is (P, k, d).
    The scheme steps y_i = E_i[y_{i+1}] - driver(t_i, y_i, z_i) dt with
    picard_iters fixed-point passes on the implicit y_i.
    """
    grid = ensemble.grid
    N, dt = grid.step_count, grid.dt
    P = ensemble.path_count
    k = terminal_values.shape[1]
    d = ensemble.brownian_dim

    regressor = _StepRegressor(ensemble, basis, threads=threads)
    y = np.empty((P, N + 1, k))
    z = np.empty((P, N, k, d))
    y[:, N, :] = terminal_values
    _check_finite(N, "terminal", terminal_values)

    for i in range(N - 1, -1, -1):
        nxt = y[:, i + 1, :]
        mean_fit = regressor.fit(i, nxt)
        centered = nxt - mean_fit.fitted
        prods = centered[:, :, None] * ensemble.dW[:, i, None, :]
        z_i = regressor.fit(i, prods).fitted / dt
        # explicit step plus picard_iters refinements of the implicit y_i
        y_i = mean_fit.fitted
        for _ in range(picard_iters + 1):
            y_i = mean_fit.fitted - driver_at(i, y_i, z_i) * dt
        _check_finite(i, "y", y_i)
        _check_finite(i, "z", z_i)
        y[:, i, :] = y_i
        z[:, i, :, :] = z_i
    return y, z


def solve_bsde(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    control: ControlProcess,
    basis: Optional[RegressionBasis] = None,
    picard_iters: int = 2,
    winsor_cap: Optional[float] = None,
    threads: int = 1,
) -> TrajectoryBundle:
    """Solve the controlled system backward from y_N = xi(W_T).

    The terminal condition is never truncated by default; when winsor_cap is
    set the terminal samples are clipped to +/- cap and the clip count is
    recorded on the bundle.
    """
    basis = basis or RegressionBasis()
    P, N = ensemble.path_count, ensemble.grid.step_count
    if control.shape != (P, N, spec.dims.m):
        raise ValueError(f"control shape {control.shape} does not match ensemble/problem")
    if not control.admissible:
        raise ValueError("control is not admissible for the problem's control set")
    if ensemble.brownian_dim != spec.dims.d:
        raise ValueError("ensemble Brownian dimension does not match the problem")
    if abs(ensemble.grid.horizon - spec.horizon) > 1e-12:
        raise ValueError("ensemble horizon does not match the problem")

    terminal = np.asarray(spec.terminal(ensemble.terminal), dtype=float).reshape(P, spec.dims.n)
    clipped = 0
    if winsor_cap is not None:
        mask = np.abs(terminal) > winsor_cap
        clipped = int(mask.sum())
        terminal = np.clip(terminal, -winsor_cap, winsor_cap)

    nodes = ensemble.grid.nodes
    u = control.values

    def driver_at(i, y_i, z_i):
        return np.asarray(spec.driver(nodes[i], y_i, z_i.reshape(P, spec.dims.n, spec.dims.d), u[:, i, :]))

    y, z = _backward_solve(ensemble, terminal, driver_at, basis, picard_iters, threads)
    return TrajectoryBundle(
        y=y,
        z=z.reshape(P, N, spec.dims.n, spec.dims.d),
        control=control,
        ensemble=ensemble,
        basis=basis,
        picard_iters=picard_iters,
        winsor_cap=winsor_cap,
        winsor_clipped=clipped,
    )


def solve_variational(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    base: TrajectoryBundle,
    direction: ControlProcess,
    basis: Optional[RegressionBasis] = None,
    picard_iters: int = 2,
    threads: int = 1,
) -> VariationalSolution:
    """Solve the linear system for the state derivative along v - u.

    Coefficients are frozen along the base trajectory (y^u, z^u, u); the
    drift is b_y Y + b_z Z + b_v (v - u) and the terminal value is zero, so
    the solution is exactly linear in the direction.
    """
    if base.ensemble is not ensemble:
        raise ValueError("base bundle was solved on a different ensemble")
    if direction.shape != base.control.shape:
        raise ValueError("direction shape does not match the base control")
    basis = basis or base.basis
    P, N = ensemble.path_count, ensemble.grid.step_count
    n, d = spec.dims.n, spec.dims.d
    nodes = ensemble.grid.nodes
    u = base.control.values
    dv = direction.values - u

    coeff_y = np.empty((N, P, n, n))
    coeff_z = np.empty((N, P, d, n, n))
    forcing = np.empty((N, P, n))
    for i in range(N):
        y_i, z_i, u_i = base.y[:, i, :], base.z[:, i, :, :], u[:, i, :]
        coeff_y[i] = spec.driver_grad_y(nodes[i], y_i, z_i, u_i)
        coeff_z[i] = spec.driver_grad_z(nodes[i], y_i, z_i, u_i)
        forcing[i] = np.einsum("pnm,pm->pn", spec.driver_grad_v(nodes[i], y_i, z_i, u_i), dv[:, i, :])

    def driver_at(i, Y_i, Z_i):
        Z_mat = Z_i.reshape(P, n, d)
        lin_y = np.einsum("pij,pj->pi", coeff_y[i], Y_i)
        lin_z = np.einsum("pkij,pjk->pi", coeff_z[i], Z_mat)
        return lin_y + lin_z + forcing[i]

    Y, Z = _backward_solve(ensemble, np.zeros((P, n)), driver_at, basis, picard_iters, threads)
    return VariationalSolution(
        Y=Y,
        Z=Z.reshape(P, N, n, d),
        control=base.control,
        direction=direction,
        ensemble=ensemble,
    )


@dataclass(frozen=True)
class DifferenceFunctionals:
    """L2 size of the gap between two solutions sharing one terminal."""

    sup_mean_square_y: float
    integrated_mean_square_z: float
    per_step_mean_square_y: np.ndarray = field(repr=False)


def solve_difference(
    spec: ProblemSpec,
    ensemble: PathEnsemble,
    bundle_v: TrajectoryBundle,
    bundle_w: TrajectoryBundle,
) -> tuple[np.ndarray, np.ndarray, DifferenceFunctionals]:
    """Difference trajectories (y^v - y^w, z^v - z^w) and their L2 sizes.

    Both solves share the terminal condition, so the difference stays
    square-integrable even when the terminal data itself is only L1.
    """
    if bundle_v.ensemble is not ensemble or bundle_w.ensemble is not ensemble:
        raise ValueError("bundles were not solved on the given ensemble")
    dy = bundle_v.y - bundle_w.y
    dz = bundle_v.z - bundle_w.z
    dt = ensemble.grid.dt
    per_step = np.einsum("pin,pin->pi", dy, dy).mean(axis=0)
    z_sq = np.einsum("pind,pind->pi", dz, dz).mean(axis=0)
    return dy, dz, DifferenceFunctionals(
        sup_mean_square_y=float(per_step.max()),
        integrated_mean_square_z=float(z_sq.sum() * dt),
        per_step_mean_square_y=per_step,
    )
