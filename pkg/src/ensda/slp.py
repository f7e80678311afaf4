"""Supervised learning of a simulator residual with ensemble kernel models.

Data follow ``y = f(x) + eps`` with ``f(x) = sqrt(|x|**3 + 1)``; the biased
simulator is ``g(x) = x**2`` and models learn the residual ``y - g(x)``.
Multi-modal inputs are clustered with a Gaussian mixture; each cluster trains
its own kernel-parameter ensemble and predictions blend the clusters by their
responsibilities.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ensda.gmm import GmmModel, fit_gmm, hard_assign, responsibilities
from ensda.kernel_init import InitDiagnostics, init_kernel_ensemble
from ensda.kernels import CenterSet1D, _exp_inplace
from ensda.metrics import ensemble_mismatch
from ensda.smoother import IesConfig, IesHistory, run_ies
from ensda.utils import InvalidArgumentError, NDArrayFloat, child_rng, derive_seed

logger = logging.getLogger(__name__)

NOISE_FLOOR = 1e-6
GRID = np.linspace(-10.0, 10.0, 201)
DEFAULT_CENTER_RANGE = (-6.0, 6.0)


def true_function(x):
    return np.sqrt(np.abs(x) ** 3 + 1.0)


def biased_function(x):
    return np.asarray(x, dtype=np.float64) ** 2


def true_residual(x):
    return true_function(x) - biased_function(x)


@dataclass
class SlpDataset:
    """Inputs, residual labels and per-point noise STD."""

    x: NDArrayFloat
    labels: NDArrayFloat
    noise_std: NDArrayFloat

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        self.noise_std = np.asarray(self.noise_std, dtype=np.float64).ravel()
        if not (self.x.size == self.labels.size == self.noise_std.size):
            raise InvalidArgumentError("x, labels and noise_std must have equal lengths")
        if np.any(self.noise_std < NOISE_FLOOR):
            raise InvalidArgumentError(f"noise_std must be >= {NOISE_FLOOR}")

    def __len__(self) -> int:
        return self.x.size

    def subset(self, idx) -> "SlpDataset":
        return SlpDataset(self.x[idx], self.labels[idx], self.noise_std[idx])


def parse_modes(text: str) -> List[Tuple[float, float, int]]:
    """Parse ``"mean,std,count;mean,std,count"``."""
    modes = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 3:
            raise InvalidArgumentError(f"mode {chunk!r} must be 'mean,std,count'")
        try:
            mean, std, count = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError as exc:
            raise InvalidArgumentError(f"mode {chunk!r}: {exc}") from None
        if std < 0 or count < 1:
            raise InvalidArgumentError(f"mode {chunk!r} needs std >= 0 and count >= 1")
        modes.append((mean, std, count))
    if not modes:
        raise InvalidArgumentError("no modes given")
    return modes


def gen_slp_data(modes: Sequence[Tuple[float, float, int]], seed: Optional[int] = 0,
                 noise: bool = True) -> SlpDataset:
    """Draw inputs from a list of Gaussians and label them with noisy residuals.

    Parameters
    ----------
    modes : sequence of (mean, std, count)
    seed : int
    noise : bool
        When False the labels are the exact residuals ``f(x) - g(x)``.
    """
    rng = child_rng(seed)
    xs = []
    for mean, std, count in modes:
        if count < 1 or std < 0:
            raise InvalidArgumentError(f"invalid mode ({mean}, {std}, {count})")
        xs.append(rng.normal(mean, std, size=int(count)))
    x = np.concatenate(xs)
    fx = true_function(x)
    sigma = np.maximum(NOISE_FLOOR, 0.1 * np.abs(fx))
    eps = rng.standard_normal(x.size) * sigma if noise else 0.0
    return SlpDataset(x, fx + eps - biased_function(x), sigma)


def split_dataset(ds: SlpDataset, train_frac: float = 0.8, seed: Optional[int] = 0) -> Tuple[SlpDataset, SlpDataset]:
    """Random disjoint split with ``floor(train_frac * n)`` training points."""
    if not (0 < train_frac < 1):
        raise InvalidArgumentError(f"train_frac must lie in (0, 1), got {train_frac}")
    perm = child_rng(seed).permutation(len(ds))
    n_tr = int(np.floor(train_frac * len(ds)))
    return ds.subset(np.sort(perm[:n_tr])), ds.subset(np.sort(perm[n_tr:]))


# ------------------------------------------------------------------- training


@dataclass
class SlpRun:
    """Result of (multi-modal) ensemble kernel learning.

    ``ensembles[s]`` has shape ``(2 * n_cp, n_e)``; ``cv_mismatch[s][t]`` holds
    per-member CV mismatch after outer step ``t`` of cluster ``s``.
    """

    centers: CenterSet1D
    gmm: Optional[GmmModel]
    ensembles: List[NDArrayFloat]
    initial_ensembles: List[NDArrayFloat]
    histories: List[IesHistory]
    cluster_sizes: List[int]
    cv_mismatch: List[List[NDArrayFloat]] = field(default_factory=list)
    init_diagnostics: List[InitDiagnostics] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.ensembles)

    @property
    def n_e(self) -> int:
        return self.ensembles[0].shape[1]

    def proba(self, x) -> NDArrayFloat:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if self.gmm is None:
            return np.ones((x.size, 1))
        return np.atleast_2d(responsibilities(x, self.gmm))

    def predict_members(self, x, which: str = "final") -> NDArrayFloat:
        """Residual predictions ``(n, n_e)`` of every member."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        ens = self.ensembles if which == "final" else self.initial_ensembles
        P = self.proba(x)
        out = np.zeros((x.size, self.n_e))
        sq = (x[:, None] - self.centers.centers[None, :]) ** 2
        for s, E in enumerate(ens):
            out += P[:, s, None] * _predict_ensemble(E, sq)
        return out


def _predict_ensemble(E: NDArrayFloat, sq_dist: NDArrayFloat) -> NDArrayFloat:
    n_cp = sq_dist.shape[1]
    out = np.empty((sq_dist.shape[0], E.shape[1]))
    for j in range(E.shape[1]):
        out[:, j] = _predict(E[:, j], sq_dist, n_cp)
    return out


def _predict(theta: NDArrayFloat, sq_dist: NDArrayFloat, n_cp: int) -> NDArrayFloat:
    b = theta[n_cp:]
    return _exp_inplace((-0.5 * b * b)[None, :] * sq_dist) @ theta[:n_cp]


def _merge_small_components(gmm: GmmModel, x: NDArrayFloat, min_size: int = 2) -> GmmModel:
    while gmm.n_components > 1:
        counts = np.bincount(hard_assign(x, gmm), minlength=gmm.n_components)
        small = np.flatnonzero(counts < min_size)
        if small.size == 0:
            break
        s = int(small[0])
        others = np.delete(np.arange(gmm.n_components), s)
        near = others[np.argmin(np.abs(gmm.means[others] - gmm.means[s]))]
        logger.warning("cluster %d holds %d training points; merging it into cluster %d", s, counts[s], near)
        w = gmm.weights.copy()
        w[near] += w[s]
        keep = np.delete(np.arange(gmm.n_components), s)
        gmm = GmmModel(w[keep], gmm.means[keep], gmm.variances[keep])
    return gmm


def cv_mismatch_clustered(cv: SlpDataset, run: SlpRun, cluster: int) -> NDArrayFloat:
    """Per-member CV mismatch of one cluster with responsibility-weighted residuals."""
    P = run.proba(cv.x)[:, cluster]
    sq = (cv.x[:, None] - run.centers.centers[None, :]) ** 2
    pred = _predict_ensemble(run.ensembles[cluster], sq)
    return _weighted_mismatch(cv, P, pred)


def _weighted_mismatch(cv: SlpDataset, P: NDArrayFloat, pred: NDArrayFloat) -> NDArrayFloat:
    r = P[:, None] * (cv.labels[:, None] - pred)
    return np.sum(r * r / (cv.noise_std**2)[:, None], axis=0)


def train_mmls(train: SlpDataset, n_cl: int, centers: CenterSet1D, n_e: int = 100,
               ies_cfg: Optional[IesConfig] = None, seed: Optional[int] = 0,
               cv: Optional[SlpDataset] = None, gmm: Optional[GmmModel] = None) -> SlpRun:
    """Cluster the training inputs and train one kernel ensemble per cluster.

    Parameters
    ----------
    train : SlpDataset
    n_cl : int
        Number of mixture components; ``1`` skips clustering.
    centers : CenterSet1D
        Shared by all clusters.
    n_e : int
    ies_cfg : IesConfig, optional
    seed : int
    cv : SlpDataset, optional
        When given, the responsibility-weighted CV mismatch is recorded after
        every outer step.
    gmm : GmmModel, optional
        Pre-fitted mixture overriding the internal fit.
    """
    if n_cl < 1:
        raise InvalidArgumentError(f"n_cl must be >= 1, got {n_cl}")
    cfg = ies_cfg or IesConfig()
    n_cp = len(centers)
    if n_cl == 1:
        gmm = None
        labels = np.zeros(len(train), dtype=int)
    else:
        if gmm is None:
            gmm = fit_gmm(train.x, n_cl, seed=derive_seed(seed, 0))
        gmm = _merge_small_components(gmm, train.x)
        labels = hard_assign(train.x, gmm)
    n_clusters = 1 if gmm is None else gmm.n_components

    run = SlpRun(centers, gmm, [], [], [], [])
    P_cv = run.proba(cv.x) if cv is not None else None
    sq_cv = (cv.x[:, None] - centers.centers[None, :]) ** 2 if cv is not None else None
    for s in range(n_clusters):
        idx = np.flatnonzero(labels == s)
        part = train.subset(idx)
        sigma_ti = float(np.std(part.x))
        if not sigma_ti > 0:
            raise InvalidArgumentError(f"cluster {s} has zero input spread")
        init, diag = init_kernel_ensemble(part.x, part.labels, centers, n_e, seed=derive_seed(seed, 1, s),
                                          sigma_ti=sigma_ti)
        sq = (part.x[:, None] - centers.centers[None, :]) ** 2

        def forward(theta, sq=sq):
            return _predict(theta, sq, n_cp)

        cv_series: List[NDArrayFloat] = []
        callback = None
        if cv is not None:
            def callback(it, E, P, s=s):
                cv_series.append(_weighted_mismatch(cv, P_cv[:, s], _predict_ensemble(E, sq_cv)))

        final, hist = run_ies(forward, init, part.labels, part.noise_std**2, cfg, callback=callback)
        logger.info("cluster %d: %d points, stop %s after %d steps", s, idx.size, hist.stop_reason, hist.n_outer)
        run.ensembles.append(final)
        run.initial_ensembles.append(init)
        run.histories.append(hist)
        run.cluster_sizes.append(int(idx.size))
        run.cv_mismatch.append(cv_series)
        run.init_diagnostics.append(diag)
    return run


def train_unimodal(train: SlpDataset, centers: CenterSet1D, n_e: int = 100, ies_cfg: Optional[IesConfig] = None,
                   seed: Optional[int] = 0, cv: Optional[SlpDataset] = None) -> SlpRun:
    """Single-ensemble training; identical to :func:`train_mmls` with one cluster."""
    return train_mmls(train, 1, centers, n_e, ies_cfg, seed, cv=cv)


def eval_grid(run: SlpRun, grid: Optional[NDArrayFloat] = None, which: str = "final"):
    """Corrected predictions ``g(x) + residual`` on the evaluation grid.

    Returns
    -------
    grid : ndarray, shape (n,)
    members : ndarray, shape (n, n_e)
    mean : ndarray, shape (n,)
    """
    x = GRID.copy() if grid is None else np.asarray(grid, dtype=np.float64)
    members = biased_function(x)[:, None] + run.predict_members(x, which)
    return x, members, members.mean(axis=1)


def grid_mae(run: SlpRun, low: float = -np.inf, high: float = np.inf, which: str = "final") -> float:
    """Mean absolute error of the mean corrected curve against ``f`` on grid points in ``[low, high]``."""
    x, _, mean = eval_grid(run, which=which)
    sel = (x >= low - 1e-12) & (x <= high + 1e-12)
    return float(np.mean(np.abs(mean[sel] - true_function(x[sel]))))


def baseline_mae(low: float = -np.inf, high: float = np.inf) -> float:
    """Same error for the uncorrected simulator ``g``."""
    sel = (GRID >= low - 1e-12) & (GRID <= high + 1e-12)
    return float(np.mean(np.abs(true_residual(GRID[sel]))))


@dataclass
class SlpExperiment:
    train: SlpDataset
    cv: SlpDataset
    run: SlpRun


def run_slp_experiment(modes, n_cl: int = 1, seed: Optional[int] = 0, n_e: int = 100, n_cp: int = 200,
                       center_range: Tuple[float, float] = DEFAULT_CENTER_RANGE, train_frac: float = 0.8,
                       ies_cfg: Optional[IesConfig] = None, track_cv: bool = True) -> SlpExperiment:
    """Generate data, split, and train; runs with equal seeds share their data."""
    data = gen_slp_data(modes, derive_seed(seed, 10))
    train, cv = split_dataset(data, train_frac, derive_seed(seed, 11))
    centers = CenterSet1D.evenly_spaced(center_range[0], center_range[1], n_cp)
    run = train_mmls(train, n_cl, centers, n_e, ies_cfg, derive_seed(seed, 12), cv=cv if track_cv else None)
    return SlpExperiment(train, cv, run)


def audit_run(run: SlpRun) -> List[str]:
    """Invariant violations of a trained run (empty when all hold)."""
    problems = []
    for s, h in enumerate(run.histories):
        if not h.accepted_monotone():
            problems.append(f"cluster {s}: accepted steps increased the average mismatch")
        mm = h.mean_mismatch()
        if mm[-1] > mm[0]:
            problems.append(f"cluster {s}: final average mismatch exceeds the initial one")
    return problems


# -------------------------------------------------------------------- output


def write_slp_outputs(exp: SlpExperiment, out_dir: Union[str, Path], extra: Optional[dict] = None) -> dict:
    """Write ``slp_mismatch.csv``, ``slp_grid.csv``, ``slp_params.csv`` and ``slp_summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = exp.run
    with open(out / "slp_mismatch.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "cluster", "member", "train_mismatch", "cv_mismatch"])
        for s, h in enumerate(run.histories):
            cvs = run.cv_mismatch[s] if s < len(run.cv_mismatch) else []
            for t, rec in enumerate(h.records):
                cv_row = cvs[t] if t < len(cvs) else None
                for j, m in enumerate(rec.mismatch):
                    w.writerow([t, s, j, repr(float(m)), "" if cv_row is None else repr(float(cv_row[j]))])
    x, members, mean = eval_grid(run)
    with open(out / "slp_grid.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "member", "prediction"])
        for i, xv in enumerate(x):
            for j in range(members.shape[1]):
                w.writerow([repr(float(xv)), j, repr(float(members[i, j]))])
            w.writerow([repr(float(xv)), "mean", repr(float(mean[i]))])
    n_cp = len(run.centers)
    with open(out / "slp_params.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "member"] + [f"c_{k + 1}" for k in range(n_cp)] + [f"beta1_{k + 1}" for k in range(n_cp)])
        for s, E in enumerate(run.ensembles):
            for j in range(E.shape[1]):
                w.writerow([s, j] + [repr(float(v)) for v in E[:, j]])
    summary = {
        "n_train": len(exp.train),
        "n_cv": len(exp.cv),
        "n_clusters": run.n_clusters,
        "cluster_sizes": run.cluster_sizes,
        "gmm": None if run.gmm is None else run.gmm.to_dict(),
        "stop_reason": [h.stop_reason for h in run.histories],
        "train_mean_mismatch": [[float(v) for v in h.mean_mismatch()] for h in run.histories],
        "cv_mean_mismatch": [[float(np.mean(v)) for v in c] for c in run.cv_mismatch],
        "grid_mae_initial": grid_mae(run, which="initial"),
        "grid_mae_final": grid_mae(run),
        "grid_mae_baseline": baseline_mae(),
        "audit": audit_run(run),
    }
    if extra:
        summary.update(extra)
    (out / "slp_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return summary


# ----------------------------------------------------------------- estimators


class MultiModalKernelRegressor(RegressorMixin, BaseEstimator):
    """Ensemble kernel regression with optional mixture clustering of the inputs.

    ``fit(X, y)`` learns ``y`` as a function of the scalar input; ``predict``
    returns the ensemble-mean prediction.

    Parameters
    ----------
    n_clusters : int, default=1
    n_centers : int, default=200
    center_range : tuple of float, default=(-6, 6)
        Half-open interval spanned by the centers.
    n_ensemble : int, default=100
    max_outer : int, default=10
    svd_energy : float, default=0.999
    noise_fraction : float, default=0.1
        Observation-error STD as a fraction of ``|y|`` when ``fit`` gets no
        ``noise_std``.
    random_state : int, default=0
    """

    def __init__(self, n_clusters: int = 1, n_centers: int = 200, center_range=DEFAULT_CENTER_RANGE,
                 n_ensemble: int = 100, max_outer: int = 10, svd_energy: float = 0.999,
                 noise_fraction: float = 0.1, random_state: Optional[int] = 0):
        self.n_clusters = n_clusters
        self.n_centers = n_centers
        self.center_range = center_range
        self.n_ensemble = n_ensemble
        self.max_outer = max_outer
        self.svd_energy = svd_energy
        self.noise_fraction = noise_fraction
        self.random_state = random_state

    def fit(self, X, y, noise_std=None):
        x = _single_feature(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if noise_std is None:
            noise_std = np.maximum(NOISE_FLOOR, self.noise_fraction * np.abs(y))
        noise_std = np.broadcast_to(np.asarray(noise_std, dtype=np.float64), y.shape)
        ds = SlpDataset(x, y, noise_std)
        centers = CenterSet1D.evenly_spaced(self.center_range[0], self.center_range[1], self.n_centers)
        cfg = IesConfig(max_outer=self.max_outer, svd_energy=self.svd_energy)
        self.run_ = train_mmls(ds, self.n_clusters, centers, self.n_ensemble, cfg, self.random_state)
        self.n_features_in_ = 1
        return self

    def predict_ensemble(self, X) -> NDArrayFloat:
        check_is_fitted(self, "run_")
        return self.run_.predict_members(_single_feature(X))

    def predict(self, X) -> NDArrayFloat:
        return self.predict_ensemble(X).mean(axis=1)


class EnsembleKernelRegressor(MultiModalKernelRegressor):
    """Single-ensemble variant of :class:`MultiModalKernelRegressor`."""

    def __init__(self, n_centers: int = 200, center_range=DEFAULT_CENTER_RANGE, n_ensemble: int = 100,
                 max_outer: int = 10, svd_energy: float = 0.999, noise_fraction: float = 0.1,
                 random_state: Optional[int] = 0):
        self.n_centers = n_centers
        self.center_range = center_range
        self.n_ensemble = n_ensemble
        self.max_outer = max_outer
        self.svd_energy = svd_energy
        self.noise_fraction = noise_fraction
        self.random_state = random_state

    n_clusters = 1


def _single_feature(X) -> NDArrayFloat:
    x = np.asarray(X, dtype=np.float64)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise InvalidArgumentError(f"expected one input feature, got {x.shape[1]}")
        x = x[:, 0]
    return np.atleast_1d(x).ravel()
