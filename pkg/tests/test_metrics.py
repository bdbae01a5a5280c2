from __future__ import annotations

import numpy as np
import pytest

from fedstg import metrics


def test_single_point_example():
    m = metrics.metric_set([110.0], [100.0])
    assert (m.mae, m.rmse) == (10.0, 10.0)
    assert m.mape == pytest.approx(10.0, abs=1e-5)


def test_two_point_example():
    m = metrics.metric_set([1.0, 3.0], [2.0, 2.0])
    assert m.mae == 1.0 and m.rmse == 1.0
    assert m.mape == pytest.approx(50.0, abs=1e-3)


def test_zero_target_is_finite():
    assert np.isfinite(metrics.mape([1.0], [0.0]))
    with pytest.raises(ValueError):
        metrics.mape([1.0], [0.0], eps=0.0)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        metrics.mae(np.zeros(3), np.zeros(4))


def test_horizon_labels_and_skip():
    pred = np.zeros((4, 12, 2))
    rows = metrics.per_horizon_report(pred, pred)
    assert [r.label for r in rows] == ["15 min", "30 min", "60 min"]
    assert [r.label for r in metrics.per_horizon_report(pred[:, :6], pred[:, :6])] == ["15 min", "30 min"]


def test_error_growing_with_horizon():
    target = np.zeros((5, 12, 3))
    pred = target + np.arange(1, 13)[None, :, None]
    rows = metrics.per_horizon_report(pred, target)
    assert rows[0].mae <= rows[1].mae <= rows[2].mae
    assert rows[0].mae == 2.0
