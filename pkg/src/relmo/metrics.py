"""VIM and MPJPE on predictions shaped ``(N, P, J, 3)``.

Frame indices ``t`` are 1-based positions inside the prediction horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = ["HorizonReport", "vim_at", "mpjpe", "mpjpe_upto", "vim_average", "mpjpe_report", "ms_to_frame"]


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 4 or pred.shape[-1] != 3:
        raise ValueError(f"expected matching (N, P, J, 3) arrays, got {pred.shape} and {truth.shape}")
    return pred, truth


def _check_frame(t: int, horizon: int) -> None:
    if not 1 <= t <= horizon:
        raise IndexError(f"frame {t} outside the prediction horizon 1..{horizon}")


def vim_at(pred, truth, t: int) -> float:
    """Mean over persons of the norm of the stacked ``J*3`` error vector at frame ``t``."""
    pred, truth = _pair(pred, truth)
    _check_frame(t, pred.shape[1])
    diff = truth[:, t - 1] - pred[:, t - 1]
    return float(np.sqrt((diff**2).sum(axis=(1, 2))).mean())


def mpjpe(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.linalg.norm(truth - pred, axis=-1).mean())


def mpjpe_upto(pred, truth, t: int) -> float:
    """MPJPE averaged over prediction frames ``1..t``."""
    pred, truth = _pair(pred, truth)
    _check_frame(t, pred.shape[1])
    return mpjpe(pred[:, :t], truth[:, :t])


@dataclass
class HorizonReport:
    metric: str
    values: list[tuple[int, float]] = field(default_factory=list)

    @property
    def average(self) -> float:
        return float(np.mean([v for _, v in self.values]))

    def csv_rows(self) -> list[str]:
        rows = [f"{self.metric},{h},{v!r}" for h, v in self.values]
        rows.append(f"{self.metric},AVG,{self.average!r}")
        return rows


def vim_average(pred, truth, horizons: Sequence[int]) -> HorizonReport:
    if not len(horizons):
        raise ValueError("need at least one horizon")
    return HorizonReport("VIM", [(int(h), vim_at(pred, truth, int(h))) for h in horizons])


def mpjpe_report(pred, truth, horizons: Sequence[int]) -> HorizonReport:
    if not len(horizons):
        raise ValueError("need at least one horizon")
    return HorizonReport("MPJPE", [(int(h), mpjpe_upto(pred, truth, int(h))) for h in horizons])


def ms_to_frame(ms: float, fps: float) -> int:
    """Prediction frame reached after ``ms`` milliseconds (at least frame 1)."""
    return max(1, int(round(ms * fps / 1000.0)))
