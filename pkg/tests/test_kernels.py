import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ensda.gmm import GmmModel
from ensda.kernels import (CenterDataDA, CenterSet1D, KernelParams1D, KernelParamsMD, eval_kernel_1d,
                           eval_kernel_md, eval_model_1d, eval_residual_da, params_from_csv, params_to_csv,
                           predict_mixture)
from ensda.utils import InvalidArgumentError

val = st.floats(-50, 50, allow_nan=False)
scale = st.floats(-5, 5, allow_nan=False)


def test_kernel_1d_hand_values():
    assert eval_kernel_1d(0.3, 0.3, 7.0) == 1.0
    assert eval_kernel_1d(1.0, 0.0, 1.0) == pytest.approx(np.exp(-0.5), abs=1e-15)
    assert eval_kernel_1d(1.0, 0.0, 2.0) == pytest.approx(np.exp(-2.0), abs=1e-15)


def test_kernel_underflow_is_exact_zero():
    assert eval_kernel_1d(100.0, 0.0, 1.0) == 0.0
    assert eval_kernel_1d(0.0, 37.0, 1.0) > 0.0


@given(val, val, scale)
def test_kernel_range_and_sign_invariance(x, c, b):
    k = eval_kernel_1d(x, c, b)
    assert 0.0 <= k <= 1.0
    assert k == eval_kernel_1d(x, c, -b)
    if x == c:
        assert k == 1.0


def test_model_1d_examples():
    centers = CenterSet1D(np.array([0.0, 1.0]))
    assert eval_model_1d(0.4, KernelParams1D(np.zeros(2), np.ones(2)), centers) == 0.0
    got = eval_model_1d(0.0, KernelParams1D(np.array([1.0, 2.0]), np.ones(2)), centers)
    assert got == pytest.approx(1 + 2 * np.exp(-0.5), abs=1e-14)
    single = CenterSet1D(np.array([1.5]))
    assert eval_model_1d(1.5, KernelParams1D(np.array([3.0]), np.array([0.7])), single) == 3.0


def test_model_1d_length_mismatch():
    with pytest.raises(InvalidArgumentError):
        eval_model_1d(0.0, KernelParams1D(np.zeros(3), np.ones(3)), CenterSet1D(np.array([0.0, 1.0])))


@given(arrays(np.float64, 4, elements=val), arrays(np.float64, 4, elements=val),
       arrays(np.float64, 4, elements=scale), val)
def test_model_linear_in_weights(c1, c2, b, x):
    centers = CenterSet1D(np.array([-3.0, -1.0, 1.0, 3.0]))
    lhs = eval_model_1d(x, KernelParams1D(c1 + c2, b), centers)
    rhs = eval_model_1d(x, KernelParams1D(c1, b), centers) + eval_model_1d(x, KernelParams1D(c2, b), centers)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-9)


def test_kernel_md_examples():
    assert eval_kernel_md([1.0, 2.0], [1.0, 2.0], [3.0, 4.0]) == 1.0
    assert eval_kernel_md([1.0, 1.0], [0.0, 0.0], [1.0, 1.0]) == pytest.approx(np.exp(-0.5), abs=1e-15)
    with pytest.raises(InvalidArgumentError):
        eval_kernel_md([1.0, 2.0], [1.0], [1.0, 1.0])


def test_kernel_md_reduces_to_1d():
    rng = np.random.default_rng(3)
    for x, c, b in rng.normal(scale=3, size=(100, 3)):
        assert abs(eval_kernel_md([x], [c], [b]) - eval_kernel_1d(x, c, b)) < 1e-12


def test_residual_da_examples():
    cd = CenterDataDA(np.array([0.5]), np.array([2.0]))
    eta = KernelParamsMD(np.array([1.7]), np.array([[3.0, 4.0]]))
    assert eval_residual_da(0.5, 9.0, 2.0, eta, cd) == pytest.approx(1.7, abs=1e-15)
    zero = KernelParamsMD(np.zeros(1), np.ones((1, 2)))
    assert eval_residual_da(0.1, 3.0, 1.0, zero, cd) == 0.0
    cd2 = CenterDataDA(np.array([0.0]), np.array([5.0]))
    one = KernelParamsMD(np.ones(1), np.ones((1, 2)))
    assert eval_residual_da(2.0, 7.0, 5.0, one, cd2) == pytest.approx(np.exp(-1.0), abs=1e-15)


def test_residual_da_checks_dimensions():
    cd = CenterDataDA(np.zeros(2), np.zeros(2))
    with pytest.raises(InvalidArgumentError):
        eval_residual_da(0.0, 0.0, 0.0, KernelParamsMD(np.zeros(2), np.ones((2, 3))), cd)
    with pytest.raises(InvalidArgumentError):
        eval_residual_da(0.0, 0.0, 0.0, KernelParamsMD(np.zeros(3), np.ones((3, 2))), cd)


def test_mixture_examples():
    centers = CenterSet1D(np.array([-1.0, 0.0, 2.0]))
    p = KernelParams1D(np.array([0.5, -1.0, 2.0]), np.array([1.0, 0.5, 2.0]))
    xs = np.linspace(-3, 3, 13)
    one = GmmModel(np.array([1.0]), np.array([0.0]), np.array([1.0]))
    np.testing.assert_allclose(predict_mixture(xs, one, [p], centers), eval_model_1d(xs, p, centers), rtol=1e-14)
    two = GmmModel(np.array([0.3, 0.7]), np.array([-2.0, 1.0]), np.array([1.0, 0.5]))
    np.testing.assert_allclose(predict_mixture(xs, two, [p, p], centers), eval_model_1d(xs, p, centers),
                               rtol=1e-12)
    # constant models 2 and 4 from one center with beta = 0
    c0 = CenterSet1D(np.array([0.0]))
    sym = GmmModel(np.array([0.5, 0.5]), np.array([-1.0, 1.0]), np.array([1.0, 1.0]))
    out = predict_mixture(0.0, sym, [KernelParams1D([2.0], [0.0]), KernelParams1D([4.0], [0.0])], c0)
    assert out == pytest.approx(3.0, abs=1e-14)
    with pytest.raises(InvalidArgumentError):
        predict_mixture(0.0, sym, [p], centers)


@given(val, st.floats(0.01, 0.99), val, val)
def test_mixture_is_convex_combination(x, w, a, b):
    c0 = CenterSet1D(np.array([0.0]))
    g = GmmModel(np.array([w, 1 - w]), np.array([-2.0, 3.0]), np.array([1.0, 2.0]))
    out = predict_mixture(x, g, [KernelParams1D([a], [0.0]), KernelParams1D([b], [0.0])], c0)
    assert min(a, b) - 1e-9 <= out <= max(a, b) + 1e-9


def test_parameter_vector_layouts():
    p = KernelParams1D(np.arange(3.0), np.arange(3.0, 6.0))
    np.testing.assert_array_equal(KernelParams1D.from_vector(p.to_vector(), 3).to_vector(), p.to_vector())
    q = KernelParamsMD(np.arange(2.0), np.array([[10.0, 20.0], [11.0, 21.0]]))
    np.testing.assert_array_equal(q.to_vector(), [0, 1, 10, 11, 20, 21])
    np.testing.assert_array_equal(KernelParamsMD.from_vector(q.to_vector(), 2, 2).scales, q.scales)


def test_centers():
    c = CenterSet1D.evenly_spaced(-6, 6, 200)
    assert len(c) == 200 and c.centers[0] == -6 and c.centers[-1] < 6
    assert np.allclose(np.diff(c.centers), 0.06)
    with pytest.raises(InvalidArgumentError):
        CenterSet1D(np.array([1.0, 1.0]))


def test_params_csv_roundtrip(tmp_path):
    E = np.random.default_rng(1).normal(size=(6, 4))
    params_to_csv(tmp_path / "p.csv", E, n_cp=2, m=2)
    header = (tmp_path / "p.csv").read_text().splitlines()[0]
    assert header == "c_1,c_2,beta1_1,beta1_2,beta2_1,beta2_2"
    np.testing.assert_array_equal(params_from_csv(tmp_path / "p.csv"), E)
