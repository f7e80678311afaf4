import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ensda.metrics import box_stats, data_mismatch, ensemble_mismatch, rmse
from ensda.utils import InvalidArgumentError

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_mismatch_zero_residual():
    d = np.array([1.0, -2.0, 3.5])
    assert data_mismatch(d, d, np.ones(3)) == 0.0


def test_mismatch_scalar_hand_value():
    assert data_mismatch([2.0], [0.0], [4.0]) == pytest.approx(1.0, abs=1e-15)


def test_mismatch_length_mismatch():
    with pytest.raises(InvalidArgumentError):
        data_mismatch([1.0, 2.0], [1.0], [1.0, 1.0])
    with pytest.raises(InvalidArgumentError):
        data_mismatch([1.0], [1.0], [0.0])


def test_ensemble_mismatch_matches_columns():
    rng = np.random.default_rng(0)
    d, P, v = rng.normal(size=5), rng.normal(size=(5, 4)), rng.uniform(0.5, 2, 5)
    expect = [data_mismatch(d, P[:, j], v) for j in range(4)]
    np.testing.assert_allclose(ensemble_mismatch(d, P, v), expect, rtol=1e-14)


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite),
       st.floats(0.1, 100.0))
def test_mismatch_scales_inversely_with_variance(d, s, k):
    v = np.linspace(0.5, 3.0, 6)
    base = data_mismatch(d, s, v)
    assert data_mismatch(d, s, k * v) == pytest.approx(base / k, rel=1e-12, abs=1e-12)


def test_rmse_hand_values():
    assert rmse([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]) == pytest.approx(np.sqrt(14 / 3), abs=1e-14)
    assert rmse(np.ones(17), np.zeros(17)) == pytest.approx(1.0, abs=1e-15)
    assert rmse([4.0, 5.0], [4.0, 5.0]) == 0.0


def test_rmse_errors():
    with pytest.raises(InvalidArgumentError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(InvalidArgumentError):
        rmse([], [])


@given(arrays(np.float64, 8, elements=finite), arrays(np.float64, 8, elements=finite),
       arrays(np.float64, 8, elements=finite))
def test_rmse_triangle(a, b, c):
    assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-9


def test_box_stats_constant():
    b = box_stats(np.full(7, 2.5))
    assert (b.min, b.q1, b.median, b.q3, b.max, b.mean) == (2.5,) * 6
    assert b.std == 0.0


def test_box_stats_linear_quartiles():
    b = box_stats([1, 2, 3, 4])
    assert b.median == 2.5 and b.mean == 2.5
    # linear interpolation between order statistics
    assert b.q1 == pytest.approx(1.75) and b.q3 == pytest.approx(3.25)


def test_box_stats_empty():
    with pytest.raises(InvalidArgumentError):
        box_stats([])
