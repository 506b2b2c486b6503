"""Registry of benchmark control problems with analytic derivatives.

Each entry builds a ProblemSpec from a parameter map and documents any
closed-form quantities an end-to-end run can be checked against.  All
registered problems are scalar (n = d = m = 1); the solver itself is
dimension-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import ConfigError
from .model import AssumptionProfile, ControlSet, Dimensions, ProblemSpec

_SCALAR = Dimensions(n=1, d=1, m=1)


def _scalar_spec(
    horizon: float,
    control_set: ControlSet,
    b: Callable,
    b_y: Callable,
    b_z: Callable,
    b_v: Callable,
    h: Callable,
    h_y: Callable,
    h_z: Callable,
    h_v: Callable,
    g: Callable,
    g_y: Callable,
    xi: Callable,
    profile: AssumptionProfile,
) -> ProblemSpec:
    """Lift scalar fields f(t, y, z, v) on (P,) arrays to the batched API."""

    def flat(arr):
        return np.asarray(arr, dtype=float).reshape(-1)

    def args(t, y, z, v):
        return t, flat(y), flat(z), flat(v)

    return ProblemSpec(
        dims=_SCALAR,
        horizon=horizon,
        control_set=control_set,
        driver=lambda t, y, z, v: b(*args(t, y, z, v))[:, None],
        driver_grad_y=lambda t, y, z, v: b_y(*args(t, y, z, v))[:, None, None],
        driver_grad_z=lambda t, y, z, v: b_z(*args(t, y, z, v))[:, None, None, None],
        driver_grad_v=lambda t, y, z, v: b_v(*args(t, y, z, v))[:, None, None],
        running_cost=lambda t, y, z, v: h(*args(t, y, z, v)),
        running_cost_grad_y=lambda t, y, z, v: h_y(*args(t, y, z, v))[:, None],
        running_cost_grad_z=lambda t, y, z, v: h_z(*args(t, y, z, v))[:, None, None],
        running_cost_grad_v=lambda t, y, z, v: h_v(*args(t, y, z, v))[:, None],
        initial_cost=lambda y: g(flat(y)),
        initial_cost_grad=lambda y: g_y(flat(y))[:, None],
        terminal=lambda wt: xi(flat(wt))[:, None],
        assumption_profile=profile,
    )


@dataclass(frozen=True)
class ModelRegistryEntry:
    key: str
    description: str
    default_params: dict
    build: Callable[[dict], ProblemSpec]
    oracle: Callable[[dict], dict]


def _merge_params(entry: "ModelRegistryEntry", params: dict | None) -> dict:
    merged = dict(entry.default_params)
    if params:
        unknown = set(params) - set(merged)
        if unknown:
            raise ConfigError(f"unknown parameters for model {entry.key!r}: {sorted(unknown)}")
        merged.update(params)
    return merged


def _zeros(t, y, z, v):
    return np.zeros_like(y)


def _build_lq(p: dict) -> ProblemSpec:
    kappa = float(p["kappa"])
    return _scalar_spec(
        horizon=float(p["horizon"]),
        control_set=ControlSet.box([p["control_lo"]], [p["control_hi"]]),
        b=lambda t, y, z, v: v.copy(),
        b_y=_zeros,
        b_z=_zeros,
        b_v=lambda t, y, z, v: np.ones_like(v),
        h=lambda t, y, z, v: 0.5 * v**2,
        h_y=_zeros,
        h_z=_zeros,
        h_v=lambda t, y, z, v: v.copy(),
        g=lambda y: kappa * y,
        g_y=lambda y: np.full_like(y, kappa),
        xi=lambda wt: wt.copy(),
        profile=AssumptionProfile(lipschitz_bound=max(4.0, 2.0 * abs(kappa))),
    )


def _oracle_lq(p: dict) -> dict:
    kappa, T = float(p["kappa"]), float(p["horizon"])
    return {
        "optimal_control": kappa,
        "optimal_cost": -0.5 * kappa**2 * T,
        "cost_of_constant": lambda c: -kappa * c * T + 0.5 * c**2 * T,
    }


def _build_zero_driver(p: dict) -> ProblemSpec:
    kind = p["terminal"]
    value = float(p["terminal_value"])
    if kind == "constant":
        xi = lambda wt: np.full_like(wt, value)
    elif kind == "brownian":
        xi = lambda wt: wt.copy()
    else:
        raise ConfigError(f"zero_driver terminal must be 'constant' or 'brownian', got {kind!r}")
    return _scalar_spec(
        horizon=float(p["horizon"]),
        control_set=ControlSet.box([-1.0], [1.0]),
        b=_zeros,
        b_y=_zeros,
        b_z=_zeros,
        b_v=_zeros,
        h=lambda t, y, z, v: v**2,
        h_y=_zeros,
        h_z=_zeros,
        h_v=lambda t, y, z, v: 2.0 * v,
        g=lambda y: y.copy(),
        g_y=lambda y: np.ones_like(y),
        xi=xi,
        profile=AssumptionProfile(lipschitz_bound=4.0),
    )


def _oracle_zero_driver(p: dict) -> dict:
    y0 = float(p["terminal_value"]) if p["terminal"] == "constant" else 0.0
    return {"y0": y0, "y0_check": "terminal_mean", "optimal_control": 0.0, "optimal_cost": y0}


def _half_moment(exponent: float, T: float) -> float:
    """E|W_T|^exponent by quadrature, exponent in (-1, 0).

    Substituting w = s^(1/(1+exponent)) absorbs the integrable singularity
    at zero, leaving a smooth rapidly-decaying integrand.
    """
    a = 1.0 / (1.0 + exponent)
    density = lambda w: np.exp(-(w**2) / (2.0 * T)) / np.sqrt(2.0 * np.pi * T)
    value, _ = integrate.quad(lambda s: 2.0 * a * density(s**a), 0.0, np.inf)
    return value


def _build_heavy_tail(p: dict) -> ProblemSpec:
    exponent = float(p["exponent"])
    if not -1.0 < exponent < 0.0:
        raise ConfigError(f"heavy_tail exponent must lie in (-1, 0), got {exponent}")
    return _scalar_spec(
        horizon=float(p["horizon"]),
        control_set=ControlSet.box([-1.0], [1.0]),
        b=_zeros,
        b_y=_zeros,
        b_z=_zeros,
        b_v=_zeros,
        h=lambda t, y, z, v: np.zeros_like(v),
        h_y=_zeros,
        h_z=_zeros,
        h_v=lambda t, y, z, v: np.zeros_like(v),
        g=lambda y: y.copy(),
        g_y=lambda y: np.ones_like(y),
        xi=lambda wt: np.abs(wt) ** exponent,
        profile=AssumptionProfile(lipschitz_bound=2.0, terminal_in_l1_only=True),
    )


def _oracle_heavy_tail(p: dict) -> dict:
    return {"y0": _half_moment(float(p["exponent"]), float(p["horizon"])), "y0_check": "terminal_mean"}


def _build_nonlinear(p: dict) -> ProblemSpec:
    a = float(p["coupling"])
    return _scalar_spec(
        horizon=float(p["horizon"]),
        control_set=ControlSet.box([-1.0], [1.0]),
        b=lambda t, y, z, v: np.sin(v) + a * np.tanh(y) + a * z,
        b_y=lambda t, y, z, v: a * (1.0 - np.tanh(y) ** 2),
        b_z=lambda t, y, z, v: np.full_like(z, a),
        b_v=lambda t, y, z, v: np.cos(v),
        h=lambda t, y, z, v: 0.5 * v**2 + a * y**2,
        h_y=lambda t, y, z, v: 2.0 * a * y,
        h_z=_zeros,
        h_v=lambda t, y, z, v: v.copy(),
        g=lambda y: np.tanh(y),
        g_y=lambda y: 1.0 - np.tanh(y) ** 2,
        xi=lambda wt: wt.copy(),
        profile=AssumptionProfile(lipschitz_bound=4.0),
    )


def _build_linear_drift(p: dict) -> ProblemSpec:
    beta = float(p["beta"])
    value = float(p["terminal_value"])
    return _scalar_spec(
        horizon=float(p["horizon"]),
        control_set=ControlSet.box([-1.0], [1.0]),
        b=lambda t, y, z, v: beta * y,
        b_y=lambda t, y, z, v: np.full_like(y, beta),
        b_z=_zeros,
        b_v=_zeros,
        h=lambda t, y, z, v: np.zeros_like(v),
        h_y=_zeros,
        h_z=_zeros,
        h_v=lambda t, y, z, v: np.zeros_like(v),
        g=lambda y: y.copy(),
        g_y=lambda y: np.ones_like(y),
        xi=lambda wt: np.full_like(wt, value),
        profile=AssumptionProfile(lipschitz_bound=max(2.0, 2.0 * abs(beta))),
    )


def _oracle_linear_drift(p: dict) -> dict:
    beta, value, T = float(p["beta"]), float(p["terminal_value"]), float(p["horizon"])
    return {
        "y_of_t": lambda t: value * np.exp(beta * (np.asarray(t) - T)),
        "y0": value * np.exp(-beta * T),
        "y0_check": "ode",
    }


REGISTRY: dict[str, ModelRegistryEntry] = {
    "lq": ModelRegistryEntry(
        key="lq",
        description="linear dynamics b = v, quadratic control cost, linear initial cost",
        default_params={"kappa": 0.5, "control_lo": -2.0, "control_hi": 2.0, "horizon": 1.0},
        build=_build_lq,
        oracle=_oracle_lq,
    ),
    "zero_driver": ModelRegistryEntry(
        key="zero_driver",
        description="control-free dynamics with a configurable terminal condition",
        default_params={"terminal": "brownian", "terminal_value": 3.0, "horizon": 1.0},
        build=_build_zero_driver,
        oracle=_oracle_zero_driver,
    ),
    "heavy_tail": ModelRegistryEntry(
        key="heavy_tail",
        description="integrable terminal |W_T|^q with infinite second moment",
        default_params={"exponent": -0.5, "horizon": 1.0},
        build=_build_heavy_tail,
        oracle=_oracle_heavy_tail,
    ),
    "nonlinear": ModelRegistryEntry(
        key="nonlinear",
        description="smooth nonlinear dynamics coupled in y, z and v; no closed form",
        default_params={"coupling": 0.1, "horizon": 1.0},
        build=_build_nonlinear,
        oracle=lambda p: {},
    ),
    "linear_drift": ModelRegistryEntry(
        key="linear_drift",
        description="control-free linear drift with constant terminal; backward ODE oracle",
        default_params={"beta": 0.5, "terminal_value": 2.0, "horizon": 1.0},
        build=_build_linear_drift,
        oracle=_oracle_linear_drift,
    ),
}


def build_model(key: str, params: dict | None = None) -> tuple[ProblemSpec, dict]:
    """Instantiate a registered model; returns the spec and resolved params."""
    if key not in REGISTRY:
        raise ConfigError(f"unknown model key {key!r}; registered: {sorted(REGISTRY)}")
    entry = REGISTRY[key]
    merged = _merge_params(entry, params)
    return entry.build(merged), merged


def model_oracle(key: str, params: dict | None = None) -> dict:
    if key not in REGISTRY:
        raise ConfigError(f"unknown model key {key!r}; registered: {sorted(REGISTRY)}")
    entry = REGISTRY[key]
    return entry.oracle(_merge_params(entry, params))
