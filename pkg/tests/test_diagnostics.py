import numpy as np
import pytest

from bsmp import (
    TimeGrid,
    build_model,
    duality_check,
    empirical_norms,
    lemma4_table,
    lemma5_table,
    lemma6_check,
    sample_ensemble,
    solve_adjoint,
    solve_bsde,
    solve_variational,
)
from tests.conftest import PATHS, constant_control

THETAS = [0.2, 0.1, 0.05, 0.025]


class TestLemma4:
    def test_same_control_gives_zero(self, ensemble, nonlinear):
        u = constant_control(nonlinear, 0.3)
        table = lemma4_table(nonlinear, ensemble, u, u, THETAS)
        assert table.is_zero("sup_mean_square_y")
        assert table.is_zero("integrated_mean_square_z")
        assert np.isnan(table.slopes["sup_mean_square_y"])

    def test_control_free_dynamics_give_zero(self, ensemble):
        spec, _ = build_model("zero_driver", {"terminal": "brownian"})
        table = lemma4_table(spec, ensemble, constant_control(spec, 0.0), constant_control(spec, 1.0), THETAS)
        assert table.is_zero("sup_mean_square_y")

    def test_linear_dynamics_quadratic_decay(self, ensemble, lq):
        # y^theta - y^u = -theta (T - t): the sup metric is theta^2 T^2
        table = lemma4_table(lq, ensemble, constant_control(lq, 0.0), constant_control(lq, 1.0), THETAS)
        assert np.allclose(table.metrics["sup_mean_square_y"], np.asarray(THETAS) ** 2, atol=1e-10)
        assert table.slopes["sup_mean_square_y"] >= 1.9
        assert table.slopes["sup_mean_square_y"] >= 0.9  # the guaranteed linear rate

    def test_nonlinear_rate_at_least_linear(self, ensemble, nonlinear):
        table = lemma4_table(nonlinear, ensemble, constant_control(nonlinear, 0.0), constant_control(nonlinear, 0.8), THETAS)
        assert table.slopes["sup_mean_square_y"] >= 0.9
        assert table.slopes["integrated_mean_square_z"] >= 0.9

    def test_theta_grid_validated(self, ensemble, lq):
        u = constant_control(lq, 0.0)
        with pytest.raises(ValueError):
            lemma4_table(lq, ensemble, u, u, [0.1, 0.2])
        with pytest.raises(ValueError):
            lemma4_table(lq, ensemble, u, u, [1.5, 0.5])


class TestLemma5:
    def test_same_control_gives_zero(self, ensemble, nonlinear):
        u = constant_control(nonlinear, 0.3)
        table = lemma5_table(nonlinear, ensemble, u, u, THETAS)
        for name in table.metrics:
            assert table.is_zero(name)

    def test_affine_dynamics_quotient_is_exact(self, ensemble, lq):
        table = lemma5_table(lq, ensemble, constant_control(lq, 0.0), constant_control(lq, 1.0), THETAS)
        for name, values in table.metrics.items():
            assert np.max(values) <= 1e-20, name

    def test_nonlinear_quotients_shrink_monotonically(self, ensemble, nonlinear):
        table = lemma5_table(nonlinear, ensemble, constant_control(nonlinear, 0.0), constant_control(nonlinear, 0.8), THETAS)
        for name in table.metrics:
            assert table.monotone[name], name
        assert table.metrics["sup_y_quotient_gap"][-1] < table.metrics["sup_y_quotient_gap"][0]


class TestLemma6:
    def test_zero_direction_is_exactly_zero(self, ensemble, nonlinear):
        u = constant_control(nonlinear, 0.2)
        bundle = solve_bsde(nonlinear, ensemble, u)
        var = solve_variational(nonlinear, ensemble, bundle, u)
        value, se = lemma6_check(nonlinear, ensemble, bundle, var, u)
        assert value == 0.0

    def test_vanishes_at_lq_optimum(self, ensemble, lq):
        star = constant_control(lq, 0.5)
        bundle = solve_bsde(lq, ensemble, star)
        for c in (-1.0, 0.2, 1.4):
            probe = constant_control(lq, c)
            var = solve_variational(lq, ensemble, bundle, probe)
            value, se = lemma6_check(lq, ensemble, bundle, var, probe)
            assert value >= -(3.0 * se + 1e-10)
            assert abs(value) <= 3.0 * se + 1e-10

    def test_lq_away_from_optimum_closed_form(self, ensemble, lq):
        u = constant_control(lq, 0.0)
        probe = constant_control(lq, 0.5)
        bundle = solve_bsde(lq, ensemble, u)
        var = solve_variational(lq, ensemble, bundle, probe)
        value, se = lemma6_check(lq, ensemble, bundle, var, probe)
        assert abs(value - (-0.25)) <= max(4.0 * se, 1e-10)


class TestDuality:
    def test_zero_direction_martingale_vanishes(self, ensemble, nonlinear):
        u = constant_control(nonlinear, 0.2)
        bundle = solve_bsde(nonlinear, ensemble, u)
        adj = solve_adjoint(nonlinear, ensemble, bundle)
        var = solve_variational(nonlinear, ensemble, bundle, u)
        rep = duality_check(nonlinear, ensemble, bundle, adj, var, u)
        assert rep.st_mean == 0.0
        assert rep.gap <= 1e-12

    def test_lq_martingale_is_identically_zero(self, ensemble, lq):
        u = constant_control(lq, 0.1)
        v = constant_control(lq, 0.9)
        bundle = solve_bsde(lq, ensemble, u)
        adj = solve_adjoint(lq, ensemble, bundle)
        var = solve_variational(lq, ensemble, bundle, v)
        rep = duality_check(lq, ensemble, bundle, adj, var, v)
        # H_z = 0 and Z = 0 up to the roundoff of the constant fits
        assert abs(rep.st_mean) <= 1e-12
        assert np.abs(var.Z).max() <= 1e-10
        assert rep.st_passed and rep.gap_passed

    def test_z_coupled_dynamics_zero_test(self, grid, nonlinear):
        P = 10_000
        ens = sample_ensemble(grid, P, seed=7, antithetic=True)
        u = constant_control(nonlinear, 0.1, P)
        v = constant_control(nonlinear, 0.6, P)
        bundle = solve_bsde(nonlinear, ens, u)
        adj = solve_adjoint(nonlinear, ens, bundle)
        var = solve_variational(nonlinear, ens, bundle, v)
        rep = duality_check(nonlinear, ens, bundle, adj, var, v)
        assert rep.st_se > 0.0
        assert rep.st_passed
        assert rep.gap_passed
        assert rep.gap <= 3.0 * np.hypot(rep.expansion_se, rep.hamiltonian_se) + rep.ito_residual + 1e-12


class TestEmpiricalNorms:
    def test_constant_process(self, grid):
        process = np.ones((64, grid.step_count + 1, 1))
        norms = empirical_norms(process, grid, [0.5, 1.0, 2.0])
        for p, value in norms.sp.items():
            assert abs(value - 1.0) <= 1e-12
        assert abs(norms.mp[2.0] - 1.0) <= 1e-12  # sqrt(T) with T = 1
        assert abs(norms.classD_proxy - 1.0) <= 1e-12

    def test_mp_norm_scales_with_horizon(self):
        grid = TimeGrid(4.0, 16)
        process = np.ones((8, 17, 1))
        norms = empirical_norms(process, grid, [2.0])
        assert abs(norms.mp[2.0] - 2.0) <= 1e-12  # sqrt(4)

    def test_brownian_sup_norm_stable_under_doubling(self, grid):
        values = []
        for P in (5000, 10_000):
            ens = sample_ensemble(grid, P, seed=3, antithetic=True)
            values.append(empirical_norms(ens.W, grid, [2.0]).sp[2.0])
        assert 0.8 <= values[1] / values[0] <= 1.25

    def test_heavy_terminal_flags_second_moment(self, grid):
        spec, _ = build_model("heavy_tail")
        norms = []
        for P in (10_000, 20_000):
            ens = sample_ensemble(grid, P, seed=35, antithetic=True)
            bundle = solve_bsde(spec, ens, constant_control(spec, 0.0, P))
            norms.append(empirical_norms(bundle.y, grid, [0.5, 0.9, 2.0]))
        assert 0.8 <= norms[1].classD_proxy / norms[0].classD_proxy <= 1.25
        assert norms[1].sp[2.0] / norms[0].sp[2.0] > 1.5
        assert 0.8 <= norms[1].sp[0.5] / norms[0].sp[0.5] <= 1.25
        assert norms[0].max_square_share > 0.05  # one path carries the moment
        assert norms[0].finite and norms[1].finite

    def test_input_validation(self, grid):
        with pytest.raises(ValueError):
            empirical_norms(np.ones((0, 5, 1)), grid, [2.0])
        with pytest.raises(ValueError):
            empirical_norms(np.ones((4, 5)), grid, [2.0])
        with pytest.raises(ValueError):
            empirical_norms(np.ones((4, 5, 1)), grid, [0.0])
