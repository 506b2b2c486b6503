"""Time grid and Brownian path ensemble generation.

All solvers in this package share one ensemble (common random numbers), so
generation must be deterministic: the same (grid, path_count, seed,
antithetic) always produces bit-identical arrays, and path p draws from its
own counter-based stream so extending the ensemble preserves existing paths.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_N = T."""

    horizon: float
    step_count: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.step_count < 1:
            raise ValueError(f"step_count must be >= 1, got {self.step_count}")

    @property
    def dt(self) -> float:
        return self.horizon / self.step_count

    @property
    def nodes(self) -> np.ndarray:
        # linspace pins the last node to the horizon exactly
        return np.linspace(0.0, self.horizon, self.step_count + 1)


@dataclass(frozen=True)
class PathEnsemble:
    """Brownian increments and cumulative paths on a shared grid.

    dW has shape (P, N, d) and W has shape (P, N+1, d) with W[:, 0] = 0.
    dW is defined as np.diff(W) so that W[:, i+1] - W[:, i] == dW[:, i]
    holds bitwise.  When antithetic is set, path 2b+1 is the negation of
    path 2b.
    """

    grid: TimeGrid
    path_count: int
    seed: int
    antithetic: bool
    brownian_dim: int
    dW: np.ndarray = field(repr=False)
    W: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dW.setflags(write=False)
        self.W.setflags(write=False)

    @property
    def terminal(self) -> np.ndarray:
        """W_T per path, shape (P, d)."""
        return self.W[:, -1, :]


def _path_stream(seed: int, stream_index: int) -> np.random.Generator:
    # one Philox stream per path, strided 2^64 counters apart so streams
    # never overlap however many values each consumes
    bg = np.random.Philox(key=seed)
    bg.advance(stream_index << 64)
    return np.random.Generator(bg)


def sample_ensemble(
    grid: TimeGrid,
    path_count: int,
    seed: int,
    antithetic: bool = False,
    brownian_dim: int = 1,
    threads: int = 1,
) -> PathEnsemble:
    """Draw a seeded Brownian ensemble on the given grid.

    Deterministic in all arguments; the thread count only schedules work.
    With antithetic sampling path_count must be even and paths come in
    (draw, -draw) pairs, interleaved so that truncating the ensemble keeps
    whole pairs.
    """
    if path_count < 2:
        raise ValueError(f"path_count must be >= 2, got {path_count}")
    if antithetic and path_count % 2 != 0:
        raise ValueError("antithetic sampling requires an even path_count")
    if brownian_dim < 1:
        raise ValueError(f"brownian_dim must be >= 1, got {brownian_dim}")

    N, d = grid.step_count, brownian_dim
    n_streams = path_count // 2 if antithetic else path_count
    scale = np.sqrt(grid.dt)

    raw = np.empty((n_streams, N, d))

    def fill_block(bounds):
        lo, hi = bounds
        for s in range(lo, hi):
            raw[s] = _path_stream(seed, s).standard_normal((N, d))
        return lo

    block = 1024
    bounds = [(lo, min(lo + block, n_streams)) for lo in range(0, n_streams, block)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_block, bounds))
    else:
        for b in bounds:
            fill_block(b)

    increments = raw * scale
    if antithetic:
        paired = np.empty((path_count, N, d))
        paired[0::2] = increments
        paired[1::2] = -increments
        increments = paired

    W = np.zeros((path_count, N + 1, d))
    np.cumsum(increments, axis=1, out=W[:, 1:, :])
    dW = np.diff(W, axis=1)
    return PathEnsemble(
        grid=grid,
        path_count=path_count,
        seed=seed,
        antithetic=antithetic,
        brownian_dim=d,
        dW=dW,
        W=W,
    )


def mean_and_se(values: np.ndarray, ensemble: PathEnsemble) -> tuple[float, float]:
    """Cross-path mean and standard error of a per-path statistic.

    Antithetic ensembles carry P/2 independent pairs, not P independent
    paths, so the standard error is computed over pair averages.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] != ensemble.path_count:
        raise ValueError("per-path statistic does not match the ensemble")
    if ensemble.antithetic:
        values = 0.5 * (values[0::2] + values[1::2])
    n = values.shape[0]
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return mean, se
