"""Hamiltonian evaluation and forward Euler simulation of the adjoint
process on the same ensemble as the state (common random numbers)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import TrajectoryBundle
from .errors import SolverError
from .model import ProblemSpec
from .sampling import PathEnsemble


@dataclass(frozen=True)
class HamiltonianEval:
    """H = p . b - h and its partials at a batch of points.

    value is (P,), grad_y is (P, n), grad_z is (P, n, d), grad_v is (P, m).
    """

    value: np.ndarray
    grad_y: np.ndarray
    grad_z: np.ndarray
    grad_v: np.ndarray


@dataclass
class AdjointPath:
    """Forward-simulated adjoint, shape (P, N+1, n), started at g_y(y_0)."""

    p: np.ndarray
    sup_square_moment: float
    ensemble: PathEnsemble


def hamiltonian(spec: ProblemSpec, t: float, y, z, v, p) -> HamiltonianEval:
    """Evaluate H(t, y, z, v, p) = p . b - h with all three partials.

    Accepts single points or batches; single points gain a batch axis of 1.
    H_y = b_y^T p - h_y, H_z column k = b_z[k]^T p - h_z[:, k], and
    H_v = b_v^T p - h_v.
    """
    y = np.asarray(y, dtype=float)
    squeeze = y.ndim == 1
    n, d, m = spec.dims.n, spec.dims.d, spec.dims.m
    y = y.reshape(-1, n)
    P = y.shape[0]
    z = np.asarray(z, dtype=float).reshape(P, n, d)
    v = np.asarray(v, dtype=float).reshape(P, m)
    p = np.asarray(p, dtype=float).reshape(P, n)

    b = np.asarray(spec.driver(t, y, z, v)).reshape(P, n)
    h = np.asarray(spec.running_cost(t, y, z, v)).reshape(P)
    value = np.einsum("pi,pi->p", p, b) - h
    grad_y = np.einsum("pij,pi->pj", spec.driver_grad_y(t, y, z, v), p) - spec.running_cost_grad_y(t, y, z, v)
    grad_z = np.einsum("pkij,pi->pjk", spec.driver_grad_z(t, y, z, v), p) - spec.running_cost_grad_z(t, y, z, v)
    grad_v = np.einsum("pij,pi->pj", spec.driver_grad_v(t, y, z, v), p) - spec.running_cost_grad_v(t, y, z, v)
    if squeeze:
        return HamiltonianEval(value[0], grad_y[0], grad_z[0], grad_v[0])
    return HamiltonianEval(value, grad_y, grad_z, grad_v)


def hamiltonian_fd_error(spec: ProblemSpec, points: int = 20, seed: int = 0, step: float = 1e-5) -> float:
    """Max relative error of the analytic H partials against central
    differences of H itself, over seeded random interior points."""
    rng = np.random.default_rng(seed)
    n, d, m = spec.dims.n, spec.dims.d, spec.dims.m
    worst = 0.0
    for _ in range(points):
        t = float(rng.uniform(0.0, spec.horizon))
        y = rng.normal(size=n)
        z = rng.normal(size=(n, d))
        v = spec.control_set.project(rng.normal(scale=0.5, size=m))
        p = rng.normal(size=n)

        def value(yy=None, zz=None, vv=None):
            point = hamiltonian(spec, t, yy if yy is not None else y, zz if zz is not None else z, vv if vv is not None else v, p)
            return float(point.value)

        ham = hamiltonian(spec, t, y, z, v, p)
        for analytic, x, rebuild in [
            (ham.grad_y, y, lambda xx: value(yy=xx)),
            (ham.grad_z, z, lambda xx: value(zz=xx)),
            (ham.grad_v, v, lambda xx: value(vv=xx)),
        ]:
            fd = np.empty_like(np.asarray(x, dtype=float))
            it = np.nditer(np.asarray(x), flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                xp, xm = np.array(x, dtype=float), np.array(x, dtype=float)
                xp[idx] += step
                xm[idx] -= step
                fd[idx] = (rebuild(xp) - rebuild(xm)) / (2.0 * step)
            err = np.max(np.abs(np.asarray(analytic) - fd) / (1.0 + np.abs(np.asarray(analytic))))
            worst = max(worst, float(err))
    return worst


def solve_adjoint(spec: ProblemSpec, ensemble: PathEnsemble, bundle: TrajectoryBundle) -> AdjointPath:
    """Euler-step the adjoint equation -dp = H_y dt + H_z dW forward from
    p_0 = g_y(y_0), pathwise aligned with the state trajectories."""
    if bundle.ensemble is not ensemble:
        raise ValueError("bundle was solved on a different ensemble")
    P, N = ensemble.path_count, ensemble.grid.step_count
    n = spec.dims.n
    dt = ensemble.grid.dt
    nodes = ensemble.grid.nodes
    u = bundle.control.values

    p = np.empty((P, N + 1, n))
    p[:, 0, :] = np.asarray(spec.initial_cost_grad(bundle.y[:, 0, :])).reshape(P, n)
    for i in range(N):
        ham = hamiltonian(spec, nodes[i], bundle.y[:, i, :], bundle.z[:, i, :, :], u[:, i, :], p[:, i, :])
        step = ham.grad_y * dt + np.einsum("pnd,pd->pn", ham.grad_z, ensemble.dW[:, i, :])
        p[:, i + 1, :] = p[:, i, :] - step
        if not np.all(np.isfinite(p[:, i + 1, :])):
            raise SolverError(i + 1, "non-finite adjoint values")

    sup_sq = float(np.einsum("pin,pin->pi", p, p).max(axis=1).mean())
    return AdjointPath(p=p, sup_square_moment=sup_sq, ensemble=ensemble)
