"""Data mismatch, RMSE and box-plot summaries."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ensda.utils import InvalidArgumentError, as_float_array, check_same_length


@dataclass(frozen=True)
class BoxStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    std: float

    def to_dict(self) -> dict:
        return asdict(self)


def data_mismatch(d_obs, d_sim, obs_var) -> float:
    """Squared residual normalized by a diagonal observation-error covariance.

    Parameters
    ----------
    d_obs, d_sim : array_like
        Observed and simulated data, same length.
    obs_var : array_like
        Diagonal of the observation-error covariance (variances, > 0).

    Returns
    -------
    float
        ``sum((d_obs - d_sim)**2 / obs_var)``.
    """
    d_obs = as_float_array(d_obs, "d_obs", 1)
    d_sim = as_float_array(d_sim, "d_sim", 1)
    obs_var = as_float_array(obs_var, "obs_var", 1)
    check_same_length(d_obs, d_sim, "d_obs and d_sim")
    check_same_length(d_obs, obs_var, "d_obs and obs_var")
    if np.any(obs_var <= 0):
        raise InvalidArgumentError("obs_var must be strictly positive")
    r = d_obs - d_sim
    return float(np.sum(r * r / obs_var))


def ensemble_mismatch(d_obs, d_sim, obs_var) -> np.ndarray:
    """Column-wise :func:`data_mismatch` for an ``(n_d, n_e)`` prediction matrix."""
    d_sim = np.asarray(d_sim, dtype=np.float64)
    r = np.asarray(d_obs, dtype=np.float64)[:, None] - d_sim
    return np.sum(r * r / np.asarray(obs_var, dtype=np.float64)[:, None], axis=0)


def rmse(z, z_true) -> float:
    """Root-mean-square deviation ``||z - z_true||_2 / sqrt(m)``."""
    z = as_float_array(z, "z", 1)
    z_true = as_float_array(z_true, "z_true", 1)
    check_same_length(z, z_true, "z and z_true")
    if z.size == 0:
        raise InvalidArgumentError("rmse of empty vectors is undefined")
    return float(np.linalg.norm(z - z_true) / np.sqrt(z.size))


def box_stats(values) -> BoxStats:
    """Five-number summary plus mean and population standard deviation.

    Quartiles use linear interpolation between order statistics.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InvalidArgumentError("box_stats needs at least one value")
    q = np.percentile(v, [0, 25, 50, 75, 100], method="linear")
    return BoxStats(
        min=float(q[0]),
        q1=float(q[1]),
        median=float(q[2]),
        q3=float(q[3]),
        max=float(q[4]),
        mean=float(np.mean(v)),
        std=float(np.std(v)),
    )
