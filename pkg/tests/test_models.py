import numpy as np
import pytest
from scipy import special

from bsmp import ConfigError, REGISTRY, build_model, grad_check, model_oracle, validate_assumptions
from bsmp.adjoint import hamiltonian_fd_error

ALL_KEYS = ("lq", "zero_driver", "heavy_tail", "nonlinear", "linear_drift")


def test_required_models_registered():
    for key in ("lq", "zero_driver", "heavy_tail", "nonlinear"):
        assert key in REGISTRY


@pytest.mark.parametrize("key", ALL_KEYS)
def test_assumptions_pass_at_default_parameters(key):
    spec, _ = build_model(key)
    report = validate_assumptions(spec, probe_budget=128, seed=0)
    failed = [c.name for c in report.checks if not c.passed]
    assert not failed, failed


@pytest.mark.parametrize("key", ALL_KEYS)
def test_gradients_consistent(key):
    spec, _ = build_model(key)
    interior = spec.control_set.project(np.full(spec.dims.m, 0.1))
    err = grad_check(spec, (0.3, np.full(spec.dims.n, 0.4), np.full((spec.dims.n, spec.dims.d), 0.2), interior), step=1e-5)
    assert err <= 1e-4, (key, err)


@pytest.mark.parametrize("key", ALL_KEYS)
def test_hamiltonian_partials_consistent(key):
    spec, _ = build_model(key)
    assert hamiltonian_fd_error(spec, points=20, seed=2) <= 1e-6


def test_lq_oracle_values():
    oracle = model_oracle("lq", {"kappa": 0.5})
    assert oracle["optimal_control"] == 0.5
    assert oracle["optimal_cost"] == -0.125
    assert abs(oracle["cost_of_constant"](0.5) - (-0.125)) <= 1e-15


def test_heavy_tail_quadrature_matches_gamma_closed_form():
    # E|W_T|^q = (2T)^(q/2) Gamma((q+1)/2) / sqrt(pi)
    for T in (1.0, 2.0):
        oracle = model_oracle("heavy_tail", {"horizon": T})
        closed = (2.0 * T) ** (-0.25) * special.gamma(0.25) / np.sqrt(np.pi)
        assert abs(oracle["y0"] - closed) <= 1e-9


def test_linear_drift_oracle():
    oracle = model_oracle("linear_drift", {"beta": 0.5, "terminal_value": 2.0})
    assert abs(oracle["y0"] - 2.0 * np.exp(-0.5)) <= 1e-15
    assert abs(oracle["y_of_t"](1.0) - 2.0) <= 1e-15


def test_zero_driver_terminal_kinds():
    spec, _ = build_model("zero_driver", {"terminal": "constant", "terminal_value": 2.5})
    wt = np.array([[0.4], [-1.0]])
    assert np.allclose(spec.terminal(wt), 2.5)
    spec, _ = build_model("zero_driver", {"terminal": "brownian"})
    assert np.allclose(spec.terminal(wt), wt)
    with pytest.raises(ConfigError):
        build_model("zero_driver", {"terminal": "quadratic"})


def test_heavy_tail_exponent_range_enforced():
    with pytest.raises(ConfigError):
        build_model("heavy_tail", {"exponent": -1.5})


def test_unknown_model_and_parameter_rejected():
    with pytest.raises(ConfigError):
        build_model("missing_model")
    with pytest.raises(ConfigError):
        build_model("lq", {"gamma": 1.0})


def test_params_merge_preserves_defaults():
    spec, params = build_model("lq", {"kappa": 0.9})
    assert params["kappa"] == 0.9
    assert params["control_lo"] == -2.0
