"""Pearson correlation between the joints of two persons in a scene."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Scene

__all__ = ["PccMatrix", "pcc", "pcc_flagged", "joint_activity", "pcc_matrix", "export_pcc_csv", "read_pcc_csv"]

SCALARIZATION = "displacement-norm-from-temporal-mean"


def pcc_flagged(x, y) -> tuple[float, bool]:
    """Sample Pearson correlation and a flag set when either series is constant.

    A degenerate series gives a correlation of 0 rather than NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"pcc needs two 1-D series of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("pcc needs at least 2 samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    r = float(np.dot(dx, dy)) / np.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r)), False


def pcc(x, y) -> float:
    return pcc_flagged(x, y)[0]


@dataclass(frozen=True)
class PccMatrix:
    values: np.ndarray  # (J, J), rows: joints of person_a, columns: joints of person_b
    person_a: int
    person_b: int
    degenerate: np.ndarray  # (J, J) bool
    scalarization: str = SCALARIZATION

    def mean_abs(self) -> float:
        return float(np.abs(self.values).mean())


def joint_activity(positions: np.ndarray) -> np.ndarray:
    """``(T, J, 3) -> (T, J)``: distance of each joint from its own temporal mean."""
    positions = np.asarray(positions, dtype=np.float64)
    return np.linalg.norm(positions - positions.mean(axis=0, keepdims=True), axis=-1)


def pcc_matrix(scene: Scene, person_a: int, person_b: int, window: tuple[int, int] | None = None) -> PccMatrix:
    """J x J correlations between the joints of two persons over observed frames.

    ``window`` is a ``(start, stop)`` slice into the observed frames; by
    default the whole observed window is used.
    """
    for p in (person_a, person_b):
        if not 0 <= p < scene.N:
            raise IndexError(f"person index {p} out of range for N={scene.N}")
    start, stop = (0, scene.T) if window is None else window
    if not 0 <= start < stop <= scene.T or stop - start < 2:
        raise ValueError(f"window {window} must lie within the {scene.T} observed frames and span >= 2")
    obs = scene.observed[:, start:stop]
    sa = joint_activity(obs[person_a])
    sb = joint_activity(obs[person_b])
    j = scene.J
    values = np.zeros((j, j))
    flags = np.zeros((j, j), dtype=bool)
    for i in range(j):
        for k in range(j):
            values[i, k], flags[i, k] = pcc_flagged(sa[:, i], sb[:, k])
    return PccMatrix(values, person_a, person_b, flags)


def export_pcc_csv(m: PccMatrix, path) -> None:
    path = Path(path)
    if not str(path) or str(path) == ".":
        raise OSError("empty output path")
    j = m.values.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(range(j))
        for row in m.values:
            w.writerow([f"{v:.17g}" for v in row])


def read_pcc_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)
