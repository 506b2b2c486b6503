import dataclasses

import numpy as np
import pytest

from bsmp import (
    build_model,
    hamiltonian,
    sample_ensemble,
    solve_adjoint,
    solve_bsde,
)
from bsmp.adjoint import hamiltonian_fd_error
from tests.conftest import PATHS, STEPS, constant_control
from tests.test_model import scalar_spec


class TestHamiltonian:
    def test_zero_costate_leaves_negative_running_cost(self, lq):
        out = hamiltonian(lq, 0.5, [0.3], [[0.2]], [0.8], [0.0])
        assert out.value == -0.5 * 0.8**2
        assert out.grad_v[0] == -0.8

    def test_linear_quadratic_point(self, lq):
        out = hamiltonian(lq, 0.0, [0.0], [[0.0]], [2.0], [1.0])
        assert out.value == 0.0  # 1*2 - 2
        assert out.grad_v[0] == -1.0  # p - v

    def test_affine_in_costate(self, nonlinear):
        rng = np.random.default_rng(0)
        for _ in range(10):
            y, z, v = rng.normal(size=1), rng.normal(size=(1, 1)), rng.normal(size=1) * 0.5
            p1, p2 = rng.normal(size=1), rng.normal(size=1)
            h = float(nonlinear.running_cost(0.3, y[None], z[None], v[None])[0])
            a = hamiltonian(nonlinear, 0.3, y, z, v, p1).value + h
            b = hamiltonian(nonlinear, 0.3, y, z, v, p2).value + h
            c = hamiltonian(nonlinear, 0.3, y, z, v, p1 + p2).value + h
            assert abs(c - (a + b)) <= 1e-12 * (1.0 + abs(c))

    def test_partials_match_finite_differences(self):
        for key in ("lq", "nonlinear", "zero_driver", "heavy_tail", "linear_drift"):
            spec, _ = build_model(key)
            assert hamiltonian_fd_error(spec, points=20, seed=1) <= 1e-6


class TestSolveAdjoint:
    def test_constant_costate_for_linear_initial_cost(self, ensemble, lq):
        bundle = solve_bsde(lq, ensemble, constant_control(lq, 0.3))
        adj = solve_adjoint(lq, ensemble, bundle)
        assert np.all(adj.p == 0.5)  # g_y is the constant kappa

    def test_initial_value_bitwise(self, ensemble, nonlinear):
        bundle = solve_bsde(nonlinear, ensemble, constant_control(nonlinear, 0.2))
        adj = solve_adjoint(nonlinear, ensemble, bundle)
        expected = nonlinear.initial_cost_grad(bundle.y[:, 0, :])
        assert np.array_equal(adj.p[:, 0, :], expected)

    def test_constant_drift_integrates_linearly(self, ensemble):
        # h = -a y makes the costate drift a, so p(t) = 1 - a t exactly
        a = 0.7
        spec = scalar_spec(
            b=lambda t, y, z, v: v.copy(),
            b_y=lambda t, y, z, v: np.zeros_like(y),
            b_z=lambda t, y, z, v: np.zeros_like(y),
            b_v=lambda t, y, z, v: np.ones_like(v),
            h=lambda t, y, z, v: -a * y,
        )
        spec = dataclasses.replace(spec, running_cost_grad_y=lambda t, y, z, v: np.full((y.shape[0], 1), -a))
        bundle = solve_bsde(spec, ensemble, constant_control(spec, 0.0))
        adj = solve_adjoint(spec, ensemble, bundle)
        expected = 1.0 - a * ensemble.grid.nodes
        assert np.allclose(adj.p[:, :, 0], expected[None, :], atol=1e-12)

    def test_constant_diffusion_tracks_brownian(self, grid):
        # h = -z gives H_z = 1, so p(t) = 1 - W_t and var(p_t) = t
        P = 10_000
        ens = sample_ensemble(grid, P, seed=29, antithetic=False)
        spec = scalar_spec(
            b=lambda t, y, z, v: np.zeros_like(y),
            b_y=lambda t, y, z, v: np.zeros_like(y),
            b_z=lambda t, y, z, v: np.zeros_like(y),
            b_v=lambda t, y, z, v: np.zeros_like(v),
            h=lambda t, y, z, v: -z,
        )
        spec = dataclasses.replace(spec, running_cost_grad_z=lambda t, y, z, v: np.full((y.shape[0], 1, 1), -1.0))
        bundle = solve_bsde(spec, ens, constant_control(spec, 0.0, P))
        adj = solve_adjoint(spec, ens, bundle)
        assert np.allclose(adj.p[:, :, 0], 1.0 - ens.W[:, :, 0], atol=1e-12)
        for i in (10, 25, 49):
            t_i = grid.nodes[i]
            var = adj.p[:, i, 0].var()
            assert abs(var - t_i) <= 4.0 * t_i / np.sqrt(P)

    def test_sup_moment_stable_under_doubling(self, grid, nonlinear):
        values = []
        for P in (4000, 8000):
            ens = sample_ensemble(grid, P, seed=31, antithetic=True)
            bundle = solve_bsde(nonlinear, ens, constant_control(nonlinear, 0.2, P))
            adj = solve_adjoint(nonlinear, ens, bundle)
            values.append(adj.sup_square_moment)
        assert np.isfinite(values[1])
        assert 0.5 <= values[1] / values[0] <= 2.0

    def test_requires_matching_ensemble(self, grid, ensemble, lq):
        other = sample_ensemble(grid, PATHS, seed=77, antithetic=True)
        bundle = solve_bsde(lq, ensemble, constant_control(lq, 0.0))
        with pytest.raises(ValueError):
            solve_adjoint(lq, other, bundle)
