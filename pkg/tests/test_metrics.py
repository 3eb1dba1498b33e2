import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relmo.metrics import mpjpe, mpjpe_report, mpjpe_upto, ms_to_frame, vim_at, vim_average


def loop_vim(pred, truth, t) -> float:
    n, _, j, _ = pred.shape
    total = 0.0
    for a in range(n):
        sq = 0.0
        for k in range(j):
            for c in range(3):
                sq += (truth[a, t - 1, k, c] - pred[a, t - 1, k, c]) ** 2
        total += math.sqrt(sq)
    return total / n


def loop_mpjpe(pred, truth) -> float:
    n, p, j, _ = pred.shape
    total = 0.0
    for a in range(n):
        for f in range(p):
            for k in range(j):
                total += math.sqrt(sum((truth[a, f, k, c] - pred[a, f, k, c]) ** 2 for c in range(3)))
    return total / (n * p * j)


@given(st.integers(0, 2**32 - 1))
def test_metrics_match_loops(seed):
    rng = np.random.default_rng(seed)
    shape = (rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5), 3)
    pred, truth = rng.normal(size=shape), rng.normal(size=shape)
    assert abs(mpjpe(pred, truth) - loop_mpjpe(pred, truth)) <= 1e-12
    for t in range(1, shape[1] + 1):
        assert abs(vim_at(pred, truth, t) - loop_vim(pred, truth, t)) <= 1e-12
        assert abs(mpjpe_upto(pred, truth, t) - loop_mpjpe(pred[:, :t], truth[:, :t])) <= 1e-12


def test_examples():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 3))
    assert mpjpe(x, x) == 0.0 and vim_at(x, x, 2) == 0.0
    pred = np.zeros((1, 1, 1, 3))
    truth = np.array([3.0, 4.0, 0.0]).reshape(1, 1, 1, 3)
    assert mpjpe(pred, truth) == 5.0
    shifted = x.copy()
    shifted[..., 1] += 1.0
    assert abs(mpjpe(x, shifted) - 1.0) < 1e-15


def test_horizon_reports():
    rng = np.random.default_rng(1)
    pred, truth = rng.normal(size=(2, 5, 3, 3)), rng.normal(size=(2, 5, 3, 3))
    single = vim_average(pred, truth, [3])
    assert single.average == single.values[0][1]
    rep = vim_average(pred, truth, [1, 4])
    a, b = vim_at(pred, truth, 1), vim_at(pred, truth, 4)
    assert rep.average == (a + b) / 2
    assert rep.csv_rows() == [f"VIM,1,{a!r}", f"VIM,4,{b!r}", f"VIM,AVG,{(a + b) / 2!r}"]
    zero = mpjpe_report(pred, pred, [1, 2, 5])
    assert all(v == 0.0 for _, v in zero.values) and zero.average == 0.0


def test_errors():
    x = np.zeros((1, 3, 2, 3))
    with pytest.raises(IndexError):
        vim_at(x, x, 0)
    with pytest.raises(IndexError):
        mpjpe_upto(x, x, 4)
    with pytest.raises(ValueError):
        mpjpe(x, np.zeros((1, 3, 2, 2)))
    with pytest.raises(ValueError):
        vim_average(x, x, [])


def test_ms_to_frame():
    assert ms_to_frame(200, 15) == 3
    assert ms_to_frame(1000, 25) == 25
    assert ms_to_frame(10, 15) == 1
