"""One-dimensional Gaussian mixtures fitted by expectation-maximization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ensda.utils import (
    DegenerateComponentError,
    InvalidArgumentError,
    NDArrayFloat,
    as_float_array,
    child_rng,
)

_LOG_2PI = np.log(2.0 * np.pi)
_LOG_TINY = np.log(np.finfo(np.float64).tiny)
VAR_FLOOR_FACTOR = 1e-6
N_RESTARTS = 5
MIN_COMPONENT_MASS = 2.0


@dataclass(eq=False)
class GmmModel:
    """Mixture weights, means and variances, sorted by mean ascending."""

    weights: NDArrayFloat
    means: NDArrayFloat
    variances: NDArrayFloat
    log_likelihood: List[float] = field(default_factory=list, compare=False, repr=False)
    converged: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        self.weights = as_float_array(self.weights, "weights", 1)
        self.means = as_float_array(self.means, "means", 1)
        self.variances = as_float_array(self.variances, "variances", 1)
        if not (self.weights.size == self.means.size == self.variances.size) or self.weights.size < 1:
            raise InvalidArgumentError("weights, means and variances must share a length >= 1")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise InvalidArgumentError(f"weights must be a probability vector, sum = {self.weights.sum()}")
        if np.any(self.variances <= 0):
            raise InvalidArgumentError("variances must be positive")

    @property
    def n_components(self) -> int:
        return self.weights.size

    def to_dict(self) -> dict:
        return {
            "components": [
                {"w": float(w), "mu": float(m), "var": float(v)}
                for w, m, v in zip(self.weights, self.means, self.variances)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GmmModel":
        comps = data["components"]
        return cls(
            np.array([c["w"] for c in comps], dtype=np.float64),
            np.array([c["mu"] for c in comps], dtype=np.float64),
            np.array([c["var"] for c in comps], dtype=np.float64),
        )

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "GmmModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _log_joint(x: NDArrayFloat, w, mu, var) -> NDArrayFloat:
    """``log(w_s) + log n(x; mu_s, var_s)`` with shape ``(n, N_cl)``."""
    d = x[:, None] - mu[None, :]
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    return logw[None, :] - 0.5 * (_LOG_2PI + np.log(var))[None, :] - 0.5 * d * d / var[None, :]


def _seed_means(x: NDArrayFloat, n_cl: int, rng: np.random.Generator) -> NDArrayFloat:
    # k-means++ on a quantile grid of the samples
    n_q = min(x.size, 1000)
    pool = np.quantile(x, (np.arange(n_q) + 0.5) / n_q)
    chosen = [pool[rng.integers(n_q)]]
    for _ in range(1, n_cl):
        d2 = np.min((pool[:, None] - np.array(chosen)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            chosen.append(pool[rng.integers(n_q)])
        else:
            chosen.append(pool[rng.choice(n_q, p=d2 / total)])
    return np.sort(np.array(chosen))


def _em(x, mu0, var_floor, max_iter, tol):
    n = x.size
    n_cl = mu0.size
    labels = np.argmin(np.abs(x[:, None] - mu0[None, :]), axis=1)
    counts = np.bincount(labels, minlength=n_cl).astype(np.float64)
    if np.any(counts < MIN_COMPONENT_MASS):
        return None
    w = counts / n
    mu = np.bincount(labels, weights=x, minlength=n_cl) / counts
    var = np.bincount(labels, weights=(x - mu[labels]) ** 2, minlength=n_cl) / counts
    var = np.maximum(var, var_floor)

    history: List[float] = []
    converged = False
    for _ in range(max_iter):
        logp = _log_joint(x, w, mu, var)
        lse = logsumexp(logp, axis=1)
        ll = float(lse.sum())
        if history:
            thr = tol if tol is not None else 1e-7 * abs(ll)
            if ll - history[-1] < thr:
                history.append(ll)
                converged = True
                break
        history.append(ll)
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk < MIN_COMPONENT_MASS):
            return None
        w = nk / n
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk
        var = np.maximum(var, var_floor)
    else:
        logp = _log_joint(x, w, mu, var)
        history.append(float(logsumexp(logp, axis=1).sum()))
    w = w / w.sum()
    return w, mu, var, history, converged


def fit_gmm(samples, n_cl: int, max_iter: int = 500, tol: Optional[float] = None,
            seed: Optional[int] = 0, n_restarts: int = N_RESTARTS) -> GmmModel:
    """Fit a 1D Gaussian mixture by EM with k-means++ seeding and restarts.

    Parameters
    ----------
    samples : array_like
        At least ``10 * n_cl`` scalar samples.
    n_cl : int
        Number of components.
    max_iter : int
        EM iteration cap per restart.
    tol : float, optional
        Absolute log-likelihood improvement threshold. Defaults to
        ``1e-7 * |LL|``.
    seed : int
        Seed of the restart streams.
    n_restarts : int
        Independent initializations; the highest final log-likelihood wins.

    Returns
    -------
    GmmModel
        Components sorted by mean. ``log_likelihood`` holds the EM trace of
        the winning restart.

    Raises
    ------
    InvalidArgumentError
        Too few samples or ``n_cl < 1``.
    DegenerateComponentError
        Every restart lost a component (fewer than two samples of mass) or the
        samples have zero variance.
    """
    x = as_float_array(samples, "samples").ravel()
    if n_cl < 1:
        raise InvalidArgumentError(f"n_cl must be >= 1, got {n_cl}")
    if x.size < 10 * n_cl:
        raise InvalidArgumentError(f"need at least {10 * n_cl} samples for {n_cl} components, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("samples must be finite")
    sample_var = float(np.var(x))
    if sample_var <= 0:
        raise DegenerateComponentError("samples have zero variance")
    var_floor = VAR_FLOOR_FACTOR * sample_var

    best = None
    for r in range(n_restarts if n_cl > 1 else 1):
        mu0 = _seed_means(x, n_cl, child_rng(seed, r))
        res = _em(x, mu0, var_floor, max_iter, tol)
        if res is None:
            continue
        if best is None or res[3][-1] > best[3][-1]:
            best = res
    if best is None:
        raise DegenerateComponentError(
            f"every restart produced a collapsed component for n_cl = {n_cl}"
        )
    w, mu, var, history, converged = best
    order = np.argsort(mu, kind="stable")
    return GmmModel(w[order], mu[order], var[order], log_likelihood=history, converged=converged)


def responsibilities(x, gmm: GmmModel, return_fallback: bool = False):
    """Posterior component probabilities ``P_s(x)``.

    Where every weighted component density underflows to zero in double
    precision, the point is assigned one-hot to the component with the
    nearest mean and flagged.

    Parameters
    ----------
    x : float or array_like
    gmm : GmmModel
    return_fallback : bool
        Also return the boolean fallback mask.

    Returns
    -------
    proba : ndarray
        Shape ``(N_cl,)`` for scalar input, else ``(n, N_cl)``.
    fallback : ndarray of bool, optional
    """
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64)).ravel()
    logp = _log_joint(xs, gmm.weights, gmm.means, gmm.variances)
    lse = logsumexp(logp, axis=1)
    proba = np.exp(logp - lse[:, None])
    fallback = np.max(logp, axis=1) < _LOG_TINY
    if fallback.any():
        nearest = np.argmin(np.abs(xs[fallback, None] - gmm.means[None, :]), axis=1)
        proba[fallback] = 0.0
        proba[np.flatnonzero(fallback), nearest] = 1.0
    if np.ndim(x) == 0:
        proba, fallback = proba[0], fallback[0]
    return (proba, fallback) if return_fallback else proba


def hard_assign(x, gmm: GmmModel) -> np.ndarray:
    """Index of the maximum-responsibility component for each input."""
    return np.argmax(np.atleast_2d(responsibilities(np.atleast_1d(x), gmm)), axis=1)


class GaussianMixture1D(BaseEstimator):
    """Estimator wrapper around :func:`fit_gmm`.

    Parameters
    ----------
    n_components : int, default=1
    max_iter : int, default=500
    tol : float or None, default=None
        Absolute log-likelihood tolerance; ``None`` uses ``1e-7 * |LL|``.
    n_init : int, default=5
    random_state : int, default=0

    Attributes
    ----------
    model_ : GmmModel
    weights_, means_, variances_ : ndarray
    """

    def __init__(self, n_components: int = 1, max_iter: int = 500, tol: Optional[float] = None,
                 n_init: int = N_RESTARTS, random_state: Optional[int] = 0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        x = _as_1d_inputs(X)
        self.model_ = fit_gmm(x, self.n_components, self.max_iter, self.tol,
                              self.random_state, self.n_init)
        self.weights_ = self.model_.weights
        self.means_ = self.model_.means
        self.variances_ = self.model_.variances
        self.n_features_in_ = 1
        return self

    def predict_proba(self, X) -> NDArrayFloat:
        check_is_fitted(self, "model_")
        return np.atleast_2d(responsibilities(_as_1d_inputs(X), self.model_))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def score_samples(self, X) -> NDArrayFloat:
        check_is_fitted(self, "model_")
        m = self.model_
        return logsumexp(_log_joint(_as_1d_inputs(X), m.weights, m.means, m.variances), axis=1)


def _as_1d_inputs(X) -> NDArrayFloat:
    x = np.asarray(X, dtype=np.float64)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise InvalidArgumentError(f"expected a single input feature, got {x.shape[1]}")
        x = x[:, 0]
    return np.atleast_1d(x).ravel()


def split_by_component(x, gmm: GmmModel) -> Tuple[np.ndarray, ...]:
    """Indices of the inputs hard-assigned to each component."""
    labels = hard_assign(x, gmm)
    return tuple(np.flatnonzero(labels == s) for s in range(gmm.n_components))
