"""Control problem definition: dynamics, costs, terminal data, control set.

All model callables are vectorized over a leading path axis: y is (P, n),
z is (P, n, d), v is (P, m) and t is a scalar grid time.  Derivative layout
follows the solver's contraction conventions:

    driver_grad_y -> (P, n, n)     entry [i, j] = d b_i / d y_j
    driver_grad_z -> (P, d, n, n)  slice k, entry [i, j] = d b_i / d z_{jk}
    driver_grad_v -> (P, n, m)     entry [i, j] = d b_i / d v_j
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GradCheckError


@dataclass(frozen=True)
class Dimensions:
    """State, Brownian and control dimensions (n, d, m)."""

    n: int
    d: int
    m: int

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or self.m < 1:
            raise ValueError(f"dimensions must all be >= 1, got {self}")


@dataclass(frozen=True)
class ControlSet:
    """Closed convex subset of R^m with a Euclidean projection.

    kind is one of "box", "ball" or "halfspaces".  Box sets carry lo/hi
    bounds, balls a center and radius, halfspace intersections a list of
    (normal, offset) rows meaning normal . x <= offset.
    """

    kind: str
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = 0.0
    normals: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None

    @staticmethod
    def box(lo, hi) -> "ControlSet":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box bounds must satisfy lo <= hi componentwise")
        return ControlSet(kind="box", lo=lo, hi=hi)

    @staticmethod
    def ball(center, radius: float) -> "ControlSet":
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if radius <= 0:
            raise ValueError(f"ball radius must be positive, got {radius}")
        return ControlSet(kind="ball", center=center, radius=float(radius))

    @staticmethod
    def halfspaces(rows: Sequence[tuple]) -> "ControlSet":
        normals = np.asarray([r[0] for r in rows], dtype=float)
        offsets = np.asarray([r[1] for r in rows], dtype=float)
        if normals.ndim != 2 or normals.shape[0] != offsets.shape[0]:
            raise ValueError("halfspace rows must be (normal vector, offset) pairs")
        return ControlSet(kind="halfspaces", normals=normals, offsets=offsets)

    @property
    def dim(self) -> int:
        if self.kind == "box":
            return self.lo.shape[0]
        if self.kind == "ball":
            return self.center.shape[0]
        return self.normals.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        """Euclidean projection onto the set, batched over leading axes."""
        x = np.asarray(x, dtype=float)
        if self.kind == "box":
            return np.clip(x, self.lo, self.hi)
        if self.kind == "ball":
            offset = x - self.center
            norm = np.linalg.norm(offset, axis=-1, keepdims=True)
            factor = np.where(norm > self.radius, self.radius / np.maximum(norm, 1e-300), 1.0)
            return self.center + offset * factor
        return self._project_halfspaces(x)

    def _project_halfspaces(self, x: np.ndarray, max_iter: int = 500, tol: float = 1e-13):
        # Dykstra's alternating projections: exact limit for intersections
        # of convex sets, and each halfspace projection is closed-form.
        flat = x.reshape(-1, x.shape[-1]).copy()
        increments = np.zeros((self.normals.shape[0],) + flat.shape)
        norms_sq = np.einsum("ij,ij->i", self.normals, self.normals)
        for _ in range(max_iter):
            start = flat.copy()
            for k, (a, b) in enumerate(zip(self.normals, self.offsets)):
                y = flat + increments[k]
                excess = (y @ a - b) / norms_sq[k]
                projected = y - np.outer(np.maximum(excess, 0.0), a)
                increments[k] = y - projected
                flat = projected
            if np.max(np.abs(flat - start)) < tol:
                break
        return flat.reshape(x.shape)

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "box":
            ok = (x >= self.lo - tol) & (x <= self.hi + tol)
            return np.all(ok, axis=-1)
        if self.kind == "ball":
            return np.linalg.norm(x - self.center, axis=-1) <= self.radius + tol
        slack = np.einsum("...j,kj->...k", x, self.normals) - self.offsets
        return np.all(slack <= tol, axis=-1)


def project_control(control_set: ControlSet, x: np.ndarray) -> np.ndarray:
    """argmin over the set of |u - x|; identity on members."""
    return control_set.project(x)


@dataclass(frozen=True)
class AssumptionProfile:
    """Declared constants for the derivative-bound and growth checks.

    phi and psi are optional nonnegative scalar functions of time; only phi
    enters the growth probe, psi is stored for completeness.
    """

    lipschitz_bound: float = 1.0
    growth_alpha: float = 0.5
    phi: Optional[Callable[[float], float]] = None
    psi: Optional[Callable[[float], float]] = None
    terminal_in_l1_only: bool = False

    def __post_init__(self):
        if not (0.0 < self.growth_alpha < 1.0):
            raise ValueError(f"growth_alpha must lie in (0, 1), got {self.growth_alpha}")
        if self.lipschitz_bound < 0:
            raise ValueError("lipschitz_bound must be nonnegative")


@dataclass(frozen=True)
class ProblemSpec:
    """The tuple (b, h, g, xi, U, T) with analytic first derivatives."""

    dims: Dimensions
    horizon: float
    control_set: ControlSet
    driver: Callable  # (t, y, z, v) -> (P, n)
    driver_grad_y: Callable  # -> (P, n, n)
    driver_grad_z: Callable  # -> (P, d, n, n)
    driver_grad_v: Callable  # -> (P, n, m)
    running_cost: Callable  # (t, y, z, v) -> (P,)
    running_cost_grad_y: Callable  # -> (P, n)
    running_cost_grad_z: Callable  # -> (P, n, d)
    running_cost_grad_v: Callable  # -> (P, m)
    initial_cost: Callable  # (y0) -> (P,)
    initial_cost_grad: Callable  # (y0) -> (P, n)
    terminal: Callable  # (W_T: (P, d)) -> (P, n)
    assumption_profile: AssumptionProfile = field(default_factory=AssumptionProfile)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.control_set.dim != self.dims.m:
            raise ValueError("control set dimension does not match dims.m")


# ---------------------------------------------------------------------------
# finite differences


def _central_diff(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float):
    """Central finite-difference jacobian of f w.r.t. the flat vector x.

    Returns an array of shape f(x).shape + x.shape.
    """
    base = np.asarray(f(x))
    out = np.empty(base.shape + x.shape)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += step
        xm[idx] -= step
        out[(...,) + idx] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * step)
    return out


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - fd) / (1.0 + np.abs(analytic))))


def grad_check(spec: ProblemSpec, point: tuple, step: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    point is (t, y, z, v) with y in R^n, z in R^{n x d}, v in R^m; v should
    sit in the interior of the control set so v +/- step stays meaningful.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    t, y, z, v = point
    y = np.asarray(y, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(spec.dims.n, spec.dims.d)
    v = np.asarray(v, dtype=float).reshape(-1)

    def batched(fn, *args):
        return np.asarray(fn(*args))[0]

    checks = {
        "driver_grad_y": (
            batched(spec.driver_grad_y, t, y[None], z[None], v[None]),
            _central_diff(lambda yy: batched(spec.driver, t, yy[None], z[None], v[None]), y, step),
        ),
        "driver_grad_v": (
            batched(spec.driver_grad_v, t, y[None], z[None], v[None]),
            _central_diff(lambda vv: batched(spec.driver, t, y[None], z[None], vv[None]), v, step),
        ),
        "running_cost_grad_y": (
            batched(spec.running_cost_grad_y, t, y[None], z[None], v[None]),
            _central_diff(lambda yy: batched(spec.running_cost, t, yy[None], z[None], v[None]), y, step),
        ),
        "running_cost_grad_z": (
            batched(spec.running_cost_grad_z, t, y[None], z[None], v[None]),
            _central_diff(lambda zz: batched(spec.running_cost, t, y[None], zz[None], v[None]), z, step),
        ),
        "running_cost_grad_v": (
            batched(spec.running_cost_grad_v, t, y[None], z[None], v[None]),
            _central_diff(lambda vv: batched(spec.running_cost, t, y[None], z[None], vv[None]), v, step),
        ),
        "initial_cost_grad": (
            batched(spec.initial_cost_grad, y[None]),
            _central_diff(lambda yy: batched(spec.initial_cost, yy[None]), y, step),
        ),
    }
    # d b_i / d z_{jk} lives at [k, i, j] in the analytic layout but at
    # [i, j, k] in the finite-difference jacobian
    fd_bz = _central_diff(lambda zz: batched(spec.driver, t, y[None], zz[None], v[None]), z, step)
    checks["driver_grad_z"] = (
        batched(spec.driver_grad_z, t, y[None], z[None], v[None]),
        np.transpose(fd_bz, (2, 0, 1)),
    )

    worst = 0.0
    for name, (analytic, fd) in checks.items():
        if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(fd))):
            raise GradCheckError(f"non-finite value while checking {name}")
        worst = max(worst, _rel_err(analytic, fd))
    return worst


# ---------------------------------------------------------------------------
# assumption probing


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    worst_ratio: float
    detail: str = ""


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _sample_control(control_set: ControlSet, rng: np.random.Generator, count: int):
    raw = rng.normal(scale=1.5, size=(count, control_set.dim))
    return control_set.project(raw)


def validate_assumptions(spec: ProblemSpec, probe_budget: int = 128, seed: int = 0) -> AssumptionReport:
    """Randomized probing of the differentiability, boundedness and growth
    assumptions against the declared profile constants.

    An assumption passes when no probe violates it, i.e. the worst observed
    ratio of |value| to its declared bound stays <= 1.  Non-finite values
    are a hard failure of the smoothness check.  Violations are reported,
    never enforced.
    """
    if probe_budget < 1:
        raise ValueError(f"probe_budget must be >= 1, got {probe_budget}")
    rng = np.random.default_rng(seed)
    n, d, m = spec.dims.n, spec.dims.d, spec.dims.m
    C = spec.assumption_profile.lipschitz_bound
    alpha = spec.assumption_profile.growth_alpha
    phi = spec.assumption_profile.phi or (lambda t: 0.0)
    P = probe_budget

    t = rng.uniform(0.0, spec.horizon)
    y = rng.normal(scale=2.0, size=(P, n))
    z = rng.normal(scale=1.5, size=(P, n, d))
    v = _sample_control(spec.control_set, rng, P)
    z2 = rng.normal(scale=1.5, size=(P, n, d))

    checks = []

    # (4.1) smoothness: finite values, and central differences that agree
    # across a 4x step refinement
    smooth_ok, smooth_worst, smooth_detail = True, 0.0, ""
    values = [spec.driver(t, y, z, v), spec.running_cost(t, y, z, v), spec.initial_cost(y)]
    if not all(np.all(np.isfinite(np.asarray(val))) for val in values):
        smooth_ok, smooth_detail = False, "non-finite function value at a probe"
        smooth_worst = np.inf
    else:
        # one random probe plus the origin: jumps typically sit at zero,
        # where random points almost never land
        origin_v = spec.control_set.project(np.zeros(m))
        probe_points = [(y[0], z[0], v[0]), (np.zeros(n), np.zeros((n, d)), origin_v)]
        for probe_y, probe_z, probe_v in probe_points:
            for name, fn, x in [
                ("driver/y", lambda x_: spec.driver(t, x_[None], probe_z[None], probe_v[None]), probe_y),
                ("driver/v", lambda x_: spec.driver(t, probe_y[None], probe_z[None], x_[None]), probe_v),
                ("running_cost/v", lambda x_: spec.running_cost(t, probe_y[None], probe_z[None], x_[None]), probe_v),
                ("initial_cost/y", lambda x_: spec.initial_cost(x_[None]), probe_y),
            ]:
                coarse = _central_diff(fn, np.asarray(x, dtype=float), 1e-3)
                fine = _central_diff(fn, np.asarray(x, dtype=float), 2.5e-4)
                gap = float(np.max(np.abs(coarse - fine) / (1.0 + np.abs(fine))))
                if gap > smooth_worst:
                    smooth_worst, smooth_detail = gap, f"divergent finite differences for {name}"
                if not (np.all(np.isfinite(coarse)) and np.all(np.isfinite(fine))):
                    smooth_ok, smooth_detail = False, f"non-finite finite-difference quotient for {name}"
                    smooth_worst = np.inf
        if smooth_worst > 1e-2:
            smooth_ok = False
    checks.append(AssumptionCheck("4.1_differentiable", smooth_ok, smooth_worst, smooth_detail))

    # (4.2) bounded first derivatives
    derivative_mags = {
        "b_y": spec.driver_grad_y(t, y, z, v),
        "b_z": spec.driver_grad_z(t, y, z, v),
        "b_v": spec.driver_grad_v(t, y, z, v),
        "h_y": spec.running_cost_grad_y(t, y, z, v),
        "h_z": spec.running_cost_grad_z(t, y, z, v),
        "h_v": spec.running_cost_grad_v(t, y, z, v),
        "g_y": spec.initial_cost_grad(y),
    }
    worst, detail = 0.0, ""
    for name, arr in derivative_mags.items():
        ratio = float(np.max(np.abs(arr))) / max(C, 1e-300)
        if ratio > worst:
            worst, detail = ratio, f"max |{name}| = {ratio * C:.4g} vs C = {C:.4g}"
    checks.append(AssumptionCheck("4.2_bounded_derivatives", worst <= 1.0, worst, detail))

    # (4.3) linear growth of g, probed over several magnitudes of |y|
    worst = 0.0
    for scale in (1.0, 10.0, 100.0):
        yy = y * scale
        ratio = np.abs(spec.initial_cost(yy)) / (C * (1.0 + np.linalg.norm(yy, axis=-1)))
        worst = max(worst, float(np.max(ratio)))
    checks.append(AssumptionCheck("4.3_initial_cost_growth", worst <= 1.0, worst))

    # (4.4) finiteness of the local modulus phi_r(t) at probes
    b_disp = np.abs(spec.driver(t, y, np.zeros_like(z), v) - spec.driver(t, np.zeros_like(y), np.zeros_like(z), v))
    h_disp = np.abs(spec.running_cost(t, y, np.zeros_like(z), v) - spec.running_cost(t, np.zeros_like(y), np.zeros_like(z), v))
    finite = bool(np.all(np.isfinite(b_disp)) and np.all(np.isfinite(h_disp)))
    checks.append(AssumptionCheck("4.4_local_modulus_finite", finite, float(max(b_disp.max(), h_disp.max()))))

    # (4.5) sublinear growth in z of the drivers
    envelope = C * (phi(t) + np.linalg.norm(y, axis=-1) + np.linalg.norm(z.reshape(P, -1), axis=-1) + np.linalg.norm(v, axis=-1)) ** alpha
    b_gap = np.linalg.norm(spec.driver(t, y, z, v) - spec.driver(t, y, np.zeros_like(z), v), axis=-1)
    h_gap = np.abs(spec.running_cost(t, y, z, v) - spec.running_cost(t, y, np.zeros_like(z), v))
    worst = float(np.max(np.maximum(b_gap, h_gap) / np.maximum(envelope, 1e-300)))
    checks.append(AssumptionCheck("4.5_sublinear_in_z", worst <= 1.0, worst))

    # (4.6) Lipschitz-in-z derivatives
    dz = np.linalg.norm((z - z2).reshape(P, -1), axis=-1)
    worst, detail = 0.0, ""
    for name, fn in [
        ("b_y", spec.driver_grad_y),
        ("b_z", spec.driver_grad_z),
        ("b_v", spec.driver_grad_v),
        ("h_y", spec.running_cost_grad_y),
        ("h_z", spec.running_cost_grad_z),
        ("h_v", spec.running_cost_grad_v),
    ]:
        a = np.asarray(fn(t, y, z, v)).reshape(P, -1)
        b = np.asarray(fn(t, y, z2, v)).reshape(P, -1)
        ratio = np.linalg.norm(a - b, axis=-1) / np.maximum(C * dz, 1e-300)
        r = float(np.max(ratio))
        if r > worst:
            worst, detail = r, f"{name} varies faster than C|z1 - z2|"
    checks.append(AssumptionCheck("4.6_lipschitz_derivatives_in_z", worst <= 1.0, worst, detail))

    return AssumptionReport(checks=tuple(checks))
