import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ensda.kernel_init import init_beta_ensemble, init_da_eta_ensemble, init_kernel_ensemble, init_weight_vector
from ensda.kernels import CenterDataDA, CenterSet1D, predict_1d
from ensda.utils import InvalidArgumentError


def test_beta_examples():
    np.testing.assert_array_equal(init_beta_ensemble(1.0, 4, 3, xi=np.zeros((4, 3))), 1.0)
    b = init_beta_ensemble(2.0, 100, 1000, seed=5)
    assert abs(np.median(b) - 0.5) < 0.01
    np.testing.assert_array_equal(init_beta_ensemble(1.3, 5, 6, seed=2), init_beta_ensemble(1.3, 5, 6, seed=2))
    with pytest.raises(InvalidArgumentError):
        init_beta_ensemble(0.0, 2, 2)


def test_log_beta_is_standard_normal():
    b = init_beta_ensemble(3.0, 100, 1000, seed=11)
    lz = np.log(b * 3.0)
    assert abs(lz.mean()) < 0.02
    assert 0.97 <= lz.std() <= 1.03


def test_weight_vector_examples():
    centers = CenterSet1D(np.linspace(-2, 2, 9))
    betas = np.full(9, 1.3)
    np.testing.assert_array_equal(init_weight_vector((0.4, 0.0), betas, centers, seed=1), 0.0)
    c = init_weight_vector((0.4, 3.0), betas, centers, xi=0.0)
    pred = predict_1d(np.array([0.4]), c, betas, centers.centers)[0]
    assert pred == pytest.approx(1.5, rel=1e-14)
    one = CenterSet1D(np.array([0.7]))
    assert init_weight_vector((0.7, -4.0), np.array([5.0]), one, xi=0.0)[0] == pytest.approx(-2.0, abs=1e-15)


def test_weight_vector_underflow(caplog):
    centers = CenterSet1D(np.array([0.0, 1.0]))
    with caplog.at_level(logging.WARNING):
        c, alpha, under = init_weight_vector((500.0, 2.0), np.ones(2), centers, xi=0.0, return_info=True)
    assert under and np.all(c == 0.0)
    assert "underflow" in caplog.text


@given(st.floats(-3, 3), st.floats(-10, 10), st.floats(-2, 2))
def test_anchor_prediction_fraction(x0, dy, xi):
    centers = CenterSet1D(np.linspace(-4, 4, 11))
    betas = np.linspace(0.5, 2.0, 11)
    c = init_weight_vector((x0, dy), betas, centers, xi=xi)
    pred = predict_1d(np.array([x0]), c, betas, centers.centers)[0]
    assert pred == pytest.approx(dy / (1 + np.exp(xi)), rel=1e-10, abs=1e-12)


def test_kernel_ensemble_shapes_and_anchors():
    rng = np.random.default_rng(0)
    x = rng.normal(size=300)
    dy = np.sin(x)
    centers = CenterSet1D.evenly_spaced(-3, 3, 20)
    theta, diag = init_kernel_ensemble(x, dy, centers, 50, seed=3, xi_weight=np.zeros(50))
    assert theta.shape == (40, 50)
    # anchors drawn without replacement
    assert np.unique(diag.pair_index).size == 50
    pred = np.array([predict_1d(x[[i]], theta[:20, j], theta[20:, j], centers.centers)[0]
                     for j, i in enumerate(diag.pair_index)])
    np.testing.assert_allclose(pred, dy[diag.pair_index] / 2, rtol=1e-10, atol=1e-14)
    again, _ = init_kernel_ensemble(x, dy, centers, 50, seed=3, xi_weight=np.zeros(50))
    np.testing.assert_array_equal(theta, again)


def _toy_da(n=40, n_e=8, seed=0):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, n_e))
    g = np.square
    obs = np.sqrt(np.abs(Z.mean(axis=1)) ** 3 + 1)
    cd = CenterDataDA(np.linspace(-2, 2, 5), np.linspace(1, 3, 5))
    return Z, obs, g, cd


def test_da_eta_layout():
    Z, obs, g, cd = _toy_da()
    eta, diag = init_da_eta_ensemble(Z, obs, g, cd, seed=1)
    assert eta.shape == (15, 8)
    assert np.all(eta[5:] > 0)
    assert diag.pair_index.shape == (8,)
    with pytest.raises(InvalidArgumentError):
        init_da_eta_ensemble(Z, obs, g, cd, n_e=7)


def test_da_eta_zero_labels_give_zero_weights():
    Z, obs, g, cd = _toy_da()
    cand = np.arange(10)
    obs = obs.copy()
    # labels d - g(z) vanish at the candidate gridblocks for every member's anchor value
    Zc = Z.copy()
    Zc[cand] = 1.0
    obs[cand] = 1.0
    obs[10:] += np.arange(30) * 0.1
    # one extra gridblock with a nonzero label keeps the residual spread positive
    eta0, diag = init_da_eta_ensemble(Zc, obs, g, cd, seed=2, candidates=np.concatenate([cand, [20]]))
    zero_members = np.isin(diag.pair_index, cand)
    assert zero_members.any()
    np.testing.assert_array_equal(eta0[:5, zero_members], 0.0)


def test_da_eta_degenerate_spread():
    Z, obs, g, cd = _toy_da()
    with pytest.raises(InvalidArgumentError):
        init_da_eta_ensemble(np.ones_like(Z), obs, g, cd)
