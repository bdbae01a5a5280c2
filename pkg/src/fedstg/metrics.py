"""Forecast error metrics and per-horizon tables."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAPE_EPS = 1e-5
DEFAULT_HORIZONS = (3, 6, 12)


@dataclass
class MetricSet:
    mae: float
    rmse: float
    mape: float  # percent
    label: str = ""


def _check(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    return pred, target


def mae(pred, target) -> float:
    pred, target = _check(pred, target)
    return float(np.mean(np.abs(pred - target)))


def rmse(pred, target) -> float:
    pred, target = _check(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def mape(pred, target, eps: float = MAPE_EPS) -> float:
    if eps <= 0:
        raise ValueError("eps must be positive")
    pred, target = _check(pred, target)
    return float(100.0 * np.mean(np.abs(pred - target) / (np.abs(target) + eps)))


def metric_set(pred, target, label: str = "", eps: float = MAPE_EPS) -> MetricSet:
    return MetricSet(mae(pred, target), rmse(pred, target), mape(pred, target, eps), label)


def per_horizon_report(pred, target, horizons: Sequence[int] = DEFAULT_HORIZONS,
                       minutes_per_step: float = 5.0, eps: float = MAPE_EPS) -> list[MetricSet]:
    """Metrics on the first ``h`` forecast steps for each horizon ``h``.

    ``pred`` and ``target`` are ``(N, β, ...)``; horizons longer than β
    are skipped.  Labels read ``"15 min"`` etc.
    """
    pred, target = _check(pred, target)
    beta = pred.shape[1]
    rows = []
    for h in horizons:
        if h > beta:
            continue
        label = f"{h * minutes_per_step:g} min"
        rows.append(metric_set(pred[:, :h], target[:, :h], label, eps))
    return rows
