import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roidepth.metrics import EvalResult, evaluate

GT5 = np.array([1.0, 2.0, 4.0, 8.0, 10.0])
PRED5 = np.array([1.1, 1.8, 5.0, 8.0, 13.0])


def test_perfect_prediction():
    gt = np.random.default_rng(0).uniform(1, 50, size=(1, 4, 6))
    r = evaluate(gt, gt)
    assert (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log) == (0.0, 0.0, 0.0, 0.0)
    assert (r.a1, r.a2, r.a3) == (1.0, 1.0, 1.0)


def test_global_scale_removed():
    gt = np.random.default_rng(1).uniform(1, 50, size=(1, 4, 6))
    r = evaluate(1.2 * gt, gt)
    assert r.abs_rel == pytest.approx(0.0, abs=1e-12)
    assert r.a1 == 1.0


def test_five_pixel_hand_oracle():
    # |gt-pred|/gt = 0.1, 0.1, 0.25, 0, 0.3 -> mean 0.15
    # max ratios 1.1, 1.111, 1.25, 1.0, 1.3 -> 3 of 5 strictly below 1.25
    r = evaluate(PRED5, GT5, median_scaling=False)
    assert r.abs_rel == pytest.approx(0.15, abs=1e-15)
    assert r.a1 == 0.6
    sq = (0.01 / 1 + 0.04 / 2 + 1.0 / 4 + 0.0 + 9.0 / 10) / 5
    assert r.sq_rel == pytest.approx(sq, rel=1e-12)
    assert r.rmse == pytest.approx(np.sqrt((0.01 + 0.04 + 1 + 0 + 9) / 5), rel=1e-12)


def test_invalid_gt_pixels_ignored():
    gt = np.array([0.0, 2.0, 4.0, 100.0])
    pred = np.array([9.0, 2.0, 4.0, 1.0])
    assert evaluate(pred, gt, median_scaling=False).abs_rel == 0.0


def test_no_valid_pixels():
    with pytest.raises(ValueError):
        evaluate(np.ones(3), np.zeros(3))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        evaluate(np.ones(3), np.ones(4))


@settings(max_examples=100)
@given(st.integers(0, 1_000_000), st.booleans())
def test_delta_monotone(seed, scaling):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 80, size=50)
    pred = gt * np.exp(rng.normal(0, rng.uniform(0.01, 1.0), size=50))
    r = evaluate(pred, gt, median_scaling=scaling)
    assert 0 <= r.a1 <= r.a2 <= r.a3 <= 1
    assert min(r.abs_rel, r.sq_rel, r.rmse, r.rmse_log) >= 0


def test_header_matches_row():
    r = evaluate(PRED5, GT5)
    assert len(EvalResult.header()) == len(r.row()) == 7
