"""Deterministic output writers: delimited files, JSON summaries and the
matplotlib figures rendered alongside them.

Floats serialize with 17 significant digits so equal inputs give
byte-identical files; wall-clock data never enters these writers (it goes
to the run log).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(path: Path, header: list[str], rows: Iterable[Iterable]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def config_hash(resolved: dict) -> str:
    canon = json.dumps(_jsonable(resolved), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def verdict(name: str, value: float, threshold: float, passed: bool) -> dict:
    return {"name": name, "value": value, "threshold": threshold, "pass": bool(passed)}


# ---------------------------------------------------------------------------
# figures


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def solve_figure(path: Path, nodes: np.ndarray, y: np.ndarray, sample_paths: int = 20) -> None:
    """Cross-path mean band of the first state component plus sample paths."""
    comp = y[:, :, 0]
    mean = comp.mean(axis=0)
    std = comp.std(axis=0)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(nodes, mean, color="C0", label="mean")
    axes[0].fill_between(nodes, mean - std, mean + std, color="C0", alpha=0.25, label="+/- std")
    axes[0].set_xlabel("t")
    axes[0].set_ylabel("y")
    axes[0].set_title("cross-path mean")
    axes[0].legend()
    for p in range(min(sample_paths, comp.shape[0])):
        axes[1].plot(nodes, comp[p], lw=0.7, alpha=0.7)
    axes[1].set_xlabel("t")
    axes[1].set_title("sample paths")
    fig.tight_layout()
    _save(fig, path)


def optimize_figure(path: Path, history: list[dict], validation_J: Optional[float] = None) -> None:
    iters = [h["iter"] for h in history]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(iters, [h["J"] for h in history], marker="o", ms=3)
    if validation_J is not None:
        axes[0].axhline(validation_J, color="C3", ls="--", lw=1, label="validation")
        axes[0].legend()
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("J")
    axes[0].set_title("cost")
    axes[1].semilogy(iters, [max(h["residual"], 1e-300) for h in history], marker="o", ms=3)
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("stationarity residual")
    axes[1].set_title("residual")
    fig.tight_layout()
    _save(fig, path)


def convergence_figure(path: Path, theta: np.ndarray, metrics: dict, title: str) -> None:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    plotted = False
    for name, vals in metrics.items():
        vals = np.asarray(vals, dtype=float)
        if np.all(vals > 0):
            ax.loglog(theta, vals, marker="o", ms=4, label=name)
            plotted = True
    if not plotted:
        ax.text(0.5, 0.5, "all metrics at roundoff", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("theta")
    ax.set_ylabel("metric")
    ax.set_title(title)
    if plotted:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def cost_figure(path: Path, direct, augmented) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    labels = ["direct", "augmented"]
    values = [direct.J, augmented.J]
    errors = [3 * direct.standard_error, 3 * augmented.standard_error]
    ax.bar(labels, values, yerr=errors, capsize=4, color=["C0", "C1"])
    ax.set_ylabel("J")
    ax.set_title("cost estimators (3 SE bars)")
    fig.tight_layout()
    _save(fig, path)


def verdict_figure(path: Path, verdicts: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 0.42 * max(4, len(verdicts))))
    names = [v["name"] for v in verdicts]
    colors = ["C2" if v["pass"] else "C3" for v in verdicts]
    ax.barh(range(len(names)), [1.0] * len(names), color=colors)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xticks([])
    ax.invert_yaxis()
    ax.set_title("verdicts (green = pass)")
    fig.tight_layout()
    _save(fig, path)
