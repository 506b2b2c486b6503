import numpy as np
import pytest

from bsmp import ControlProcess, TimeGrid, build_model, sample_ensemble

PATHS = 4000
STEPS = 50


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(1.0, STEPS)


@pytest.fixture(scope="session")
def ensemble(grid):
    return sample_ensemble(grid, PATHS, seed=7, antithetic=True)


@pytest.fixture(scope="session")
def lq():
    spec, params = build_model("lq")
    return spec


@pytest.fixture(scope="session")
def nonlinear():
    spec, params = build_model("nonlinear")
    return spec


def constant_control(spec, value, paths=PATHS, steps=STEPS):
    vec = np.full(spec.dims.m, float(value))
    return ControlProcess.constant(vec, paths, steps, spec.control_set)
