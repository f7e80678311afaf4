import numpy as np
import pytest
from sklearn.base import clone

from ensda.gmm import GmmModel
from ensda.kernels import CenterSet1D, predict_1d
from ensda.slp import (GRID, EnsembleKernelRegressor, MultiModalKernelRegressor, SlpDataset, SlpRun, audit_run,
                       baseline_mae, biased_function, cv_mismatch_clustered, eval_grid, gen_slp_data, parse_modes,
                       run_slp_experiment, split_dataset, train_mmls, train_unimodal, true_function,
                       write_slp_outputs)
from ensda.smoother import IesConfig, IesHistory
from ensda.utils import InvalidArgumentError


def bisect(fn, lo, hi, tol=1e-13):
    flo = fn(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if np.sign(fn(mid)) == np.sign(flo):
            lo, flo = mid, fn(mid)
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_noise_free_labels():
    ds = gen_slp_data([(2.0, 0.0, 1), (0.0, 0.0, 1)], seed=0, noise=False)
    np.testing.assert_allclose(ds.labels, [-1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(ds.noise_std, [0.3, 0.1])


def test_label_sign_change_at_intersection():
    # f = g  <=>  t^4 - t^3 - 1 = 0 with t = |x|
    root = bisect(lambda t: t**4 - t**3 - 1, 1.0, 2.0)
    assert root == pytest.approx(1.3803, abs=1e-4)
    resid = lambda x: true_function(x) - biased_function(x)
    for r in (root, -root):
        assert abs(resid(r)) < 1e-9
        assert np.sign(resid(r - 1e-3)) != np.sign(resid(r + 1e-3))


def test_parse_modes():
    assert parse_modes("-5,1,10000") == [(-5.0, 1.0, 10000)]
    assert parse_modes("-5,1,10;0,1,20; 5,2,30") == [(-5.0, 1.0, 10), (0.0, 1.0, 20), (5.0, 2.0, 30)]
    for bad in ("", "1,2", "1,2,x", "0,-1,5"):
        with pytest.raises(InvalidArgumentError):
            parse_modes(bad)


@pytest.mark.parametrize("n,n_tr", [(10_000, 8_000), (30_000, 24_000)])
def test_split_sizes_disjoint(n, n_tr):
    ds = gen_slp_data([(0.0, 1.0, n)], seed=1)
    tr, cv = split_dataset(ds, 0.8, seed=2)
    assert (len(tr), len(cv)) == (n_tr, n - n_tr)
    xs = np.sort(np.concatenate([tr.x, cv.x]))
    np.testing.assert_array_equal(xs, np.sort(ds.x))


def test_grid():
    assert GRID.size == 201 and GRID[0] == -10 and GRID[-1] == 10
    assert np.allclose(np.diff(GRID), 0.1)


def _tiny_run(n_e=6, n_cp=4, weights=0.0):
    centers = CenterSet1D.evenly_spaced(-2, 2, n_cp)
    E = np.vstack([np.full((n_cp, n_e), weights), np.ones((n_cp, n_e))])
    return SlpRun(centers, None, [E], [E.copy()], [IesHistory()], [0])


def test_zero_weights_reproduce_simulator():
    x, members, mean = eval_grid(_tiny_run())
    np.testing.assert_array_equal(members, np.repeat(biased_function(GRID)[:, None], 6, axis=1))
    np.testing.assert_allclose(mean, biased_function(GRID), rtol=1e-15)
    assert baseline_mae() == pytest.approx(np.mean(np.abs(true_function(GRID) - biased_function(GRID))))


def test_cv_mismatch_examples():
    run = _tiny_run(n_e=3)
    # single CV point: zero prediction, label two noise STDs away
    cv = SlpDataset(np.array([0.3]), np.array([1.0]), np.array([0.5]))
    np.testing.assert_allclose(cv_mismatch_clustered(cv, run, 0), 4.0)
    # responsibilities vanishing for the cluster
    far = GmmModel([0.5, 0.5], [-50.0, 50.0], [1.0, 1.0])
    run2 = SlpRun(run.centers, far, run.ensembles * 2, run.initial_ensembles * 2, [IesHistory()] * 2, [0, 0])
    cv2 = SlpDataset(np.array([49.0, 51.0]), np.array([3.0, -2.0]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(cv_mismatch_clustered(cv2, run2, 0), 0.0)


def test_learns_a_kernel_model_to_target():
    centers = CenterSet1D.evenly_spaced(-3, 3, 8)
    rng = np.random.default_rng(0)
    x = rng.uniform(-3, 3, 150)
    c_true = rng.normal(size=8)
    y = predict_1d(x, c_true, np.full(8, 1.2), centers.centers)
    ds = SlpDataset(x, y, np.full(x.size, 0.05))
    run = train_unimodal(ds, centers, n_e=60, seed=1, ies_cfg=IesConfig(max_outer=30))
    mm = run.histories[0].mean_mismatch()
    assert run.histories[0].stop_reason == "target_mismatch"
    assert mm[-1] < 4 * x.size
    assert audit_run(run) == []


def test_mmls_with_one_cluster_is_unimodal():
    ds = gen_slp_data([(-5.0, 1.0, 400)], seed=3)
    centers = CenterSet1D.evenly_spaced(-6, 6, 30)
    cfg = IesConfig(max_outer=3)
    a = train_unimodal(ds, centers, n_e=20, ies_cfg=cfg, seed=4)
    b = train_mmls(ds, 1, centers, n_e=20, ies_cfg=cfg, seed=4)
    np.testing.assert_array_equal(a.ensembles[0], b.ensembles[0])
    np.testing.assert_array_equal(a.histories[0].mean_mismatch(), b.histories[0].mean_mismatch())


def test_multimodal_run_and_outputs(tmp_path):
    exp = run_slp_experiment([(-5.0, 1.0, 500), (5.0, 1.0, 500)], n_cl=2, seed=0, n_e=20, n_cp=40,
                             ies_cfg=IesConfig(max_outer=3))
    run = exp.run
    assert run.n_clusters == 2 and sum(run.cluster_sizes) == 800
    np.testing.assert_allclose(run.gmm.means, [-5, 5], atol=0.3)
    for s in range(2):
        mm = run.histories[s].mean_mismatch()
        assert mm[-1] <= mm[0]
        assert len(run.cv_mismatch[s]) == len(run.histories[s].records)
    summary = write_slp_outputs(exp, tmp_path)
    for name in ("slp_mismatch.csv", "slp_grid.csv", "slp_params.csv", "slp_summary.json"):
        assert (tmp_path / name).exists()
    assert summary["audit"] == []
    grid_lines = (tmp_path / "slp_grid.csv").read_text().splitlines()
    assert len(grid_lines) == 1 + 201 * 21
    head = (tmp_path / "slp_params.csv").read_text().splitlines()[0].split(",")
    assert head[:3] == ["cluster", "member", "c_1"] and head[-1] == "beta1_40"


def test_deterministic_experiment():
    kw = dict(n_cl=1, seed=5, n_e=10, n_cp=20, ies_cfg=IesConfig(max_outer=2))
    a = run_slp_experiment([(-5.0, 1.0, 300)], **kw)
    b = run_slp_experiment([(-5.0, 1.0, 300)], **kw)
    np.testing.assert_array_equal(a.run.ensembles[0], b.run.ensembles[0])


def test_estimators():
    rng = np.random.default_rng(2)
    x = np.concatenate([rng.normal(-4, 0.7, 300), rng.normal(3, 0.7, 300)])
    y = true_function(x) - biased_function(x)
    est = MultiModalKernelRegressor(n_clusters=2, n_centers=30, n_ensemble=20, max_outer=4).fit(x[:, None], y)
    assert est.predict(x[:5, None]).shape == (5,)
    assert est.predict_ensemble(x[:5]).shape == (5, 20)
    base = np.mean(np.abs(y))
    assert np.mean(np.abs(est.predict(x[:, None]) - y)) < base
    single = EnsembleKernelRegressor(n_centers=30, n_ensemble=20, max_outer=2)
    assert "n_clusters" not in single.get_params()
    assert clone(single).get_params() == single.get_params()
    single.fit(x, y)
    assert single.run_.n_clusters == 1
    with pytest.raises(InvalidArgumentError):
        est.predict(np.ones((3, 2)))
