"""Gaussian RBF kernel models.

Univariate model::

    h(x; c, beta) = sum_k c_k * exp(-beta_k**2 * (x - x_k)**2 / 2)

Multivariate kernels average the squared, scaled coordinate distances over the
``m`` input axes before exponentiating, which keeps the exponent of the same
order as in the univariate case::

    K(x - x_k; beta_k) = exp(-(1 / (2 m)) * sum_l beta_kl**2 * (x_l - x_kl)**2)

Exponents below ``-700`` evaluate to exactly zero.

Parameter vectors use the layout ``[c_1..c_N | beta_{1,1}..beta_{N,1} | ... |
beta_{1,m}..beta_{N,m}]`` everywhere (flat vectors, ensemble matrices and CSV
files).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from ensda.utils import InvalidArgumentError, NDArrayFloat, as_float_array

EXP_FLOOR = -700.0


def _exp_inplace(arg: NDArrayFloat) -> NDArrayFloat:
    mask = arg < EXP_FLOOR
    np.exp(arg, out=arg)
    arg[mask] = 0.0
    return arg


def _safe_exp(arg) -> NDArrayFloat:
    return _exp_inplace(np.array(arg, dtype=np.float64, ndmin=1))


@dataclass
class KernelParams1D:
    weights: NDArrayFloat
    scales: NDArrayFloat

    def __post_init__(self):
        self.weights = as_float_array(self.weights, "weights", 1)
        self.scales = as_float_array(self.scales, "scales", 1)
        if self.weights.shape != self.scales.shape:
            raise InvalidArgumentError(
                f"weights and scales differ in length: {self.weights.size} != {self.scales.size}"
            )

    @property
    def n_cp(self) -> int:
        return self.weights.size

    def to_vector(self) -> NDArrayFloat:
        return np.concatenate([self.weights, self.scales])

    @classmethod
    def from_vector(cls, theta, n_cp: int) -> "KernelParams1D":
        theta = as_float_array(theta, "theta", 1)
        if theta.size != 2 * n_cp:
            raise InvalidArgumentError(f"expected {2 * n_cp} parameters, got {theta.size}")
        return cls(theta[:n_cp].copy(), theta[n_cp:].copy())


@dataclass
class KernelParamsMD:
    """Weights ``(N,)`` and anisotropic scales ``(N, m)``."""

    weights: NDArrayFloat
    scales: NDArrayFloat

    def __post_init__(self):
        self.weights = as_float_array(self.weights, "weights", 1)
        self.scales = as_float_array(self.scales, "scales", 2)
        if self.scales.shape[0] != self.weights.size or self.scales.shape[1] < 1:
            raise InvalidArgumentError(
                f"scales must have shape ({self.weights.size}, m>=1), got {self.scales.shape}"
            )

    @property
    def n_cp(self) -> int:
        return self.weights.size

    @property
    def m(self) -> int:
        return self.scales.shape[1]

    def to_vector(self) -> NDArrayFloat:
        return np.concatenate([self.weights, self.scales.T.ravel()])

    @classmethod
    def from_vector(cls, eta, n_cp: int, m: int) -> "KernelParamsMD":
        eta = as_float_array(eta, "eta", 1)
        if eta.size != (m + 1) * n_cp:
            raise InvalidArgumentError(f"expected {(m + 1) * n_cp} parameters, got {eta.size}")
        return cls(eta[:n_cp].copy(), eta[n_cp:].reshape(m, n_cp).T.copy())


@dataclass
class CenterSet1D:
    centers: NDArrayFloat

    def __post_init__(self):
        self.centers = as_float_array(self.centers, "centers", 1)
        if self.centers.size < 1:
            raise InvalidArgumentError("at least one center point is required")
        if np.any(np.diff(self.centers) <= 0):
            raise InvalidArgumentError("center points must be strictly increasing")

    def __len__(self) -> int:
        return self.centers.size

    @classmethod
    def evenly_spaced(cls, low: float, high: float, n_cp: int) -> "CenterSet1D":
        """``n_cp`` points evenly spanning the half-open interval ``[low, high)``."""
        return cls(low + (high - low) * np.arange(n_cp) / n_cp)


@dataclass
class CenterDataDA:
    """Center points ``z_cp`` of the model axis and their associated data ``d_cp``."""

    z_cp: NDArrayFloat
    d_cp: NDArrayFloat

    def __post_init__(self):
        self.z_cp = as_float_array(self.z_cp, "z_cp", 1)
        self.d_cp = as_float_array(self.d_cp, "d_cp", 1)
        if self.z_cp.shape != self.d_cp.shape:
            raise InvalidArgumentError("z_cp and d_cp must have equal lengths")
        if not (np.all(np.isfinite(self.z_cp)) and np.all(np.isfinite(self.d_cp))):
            raise InvalidArgumentError("center data must be finite")

    def __len__(self) -> int:
        return self.z_cp.size


# ----------------------------------------------------------------- scalar API


def eval_kernel_1d(x: float, x_cp: float, beta: float) -> float:
    """Gaussian RBF ``exp(-beta**2 * (x - x_cp)**2 / 2)``."""
    return float(_safe_exp(-0.5 * beta**2 * (x - x_cp) ** 2)[0])


def eval_kernel_md(x, x_cp, betas) -> float:
    """Anisotropic Gaussian RBF with the ``1/(2m)`` exponent normalization."""
    x = as_float_array(x, "x", 1)
    x_cp = as_float_array(x_cp, "x_cp", 1)
    betas = as_float_array(betas, "betas", 1)
    if not (x.size == x_cp.size == betas.size) or x.size < 1:
        raise InvalidArgumentError("x, x_cp and betas must share a length m >= 1")
    m = x.size
    return float(_safe_exp(-np.sum(betas**2 * (x - x_cp) ** 2) / (2 * m))[0])


def kernel_vector_1d(x: float, params_scales, centers: CenterSet1D) -> NDArrayFloat:
    """Kernel values of one input against every center, shape ``(N,)``."""
    scales = as_float_array(params_scales, "scales", 1)
    if scales.size != len(centers):
        raise InvalidArgumentError("scales and centers differ in length")
    return _safe_exp(-0.5 * scales**2 * (x - centers.centers) ** 2)


def eval_model_1d(x, params: KernelParams1D, centers: CenterSet1D):
    """Evaluate ``sum_k c_k K(x - x_k; beta_k)`` at a scalar or an array of inputs."""
    if params.n_cp != len(centers):
        raise InvalidArgumentError(f"params have {params.n_cp} kernels but {len(centers)} centers")
    out = predict_1d(np.atleast_1d(np.asarray(x, dtype=np.float64)), params.weights, params.scales, centers.centers)
    return float(out[0]) if np.ndim(x) == 0 else out


def eval_residual_da(z: float, d_o: float, g_of_z: float, eta: KernelParamsMD, cdata: CenterDataDA) -> float:
    """Kernel residual correction at one gridblock.

    The kernel input is the pair ``(z, d_o - g(z))`` and center ``k`` sits at
    ``(z_k, d_o - d_k)``, so the second coordinate difference is
    ``d_k - g(z)``.
    """
    if eta.m != 2:
        raise InvalidArgumentError(f"residual kernels need m = 2, got m = {eta.m}")
    if eta.n_cp != len(cdata):
        raise InvalidArgumentError(f"eta has {eta.n_cp} kernels but center data has {len(cdata)}")
    out = residual_da(
        np.array([z], dtype=np.float64),
        np.array([g_of_z], dtype=np.float64),
        eta.weights,
        eta.scales[:, 0],
        eta.scales[:, 1],
        cdata,
        d_obs=np.array([d_o], dtype=np.float64),
    )
    return float(out[0])


def predict_mixture(x, proba, cluster_params: Sequence[KernelParams1D], centers: CenterSet1D):
    """Responsibility-weighted combination of per-cluster kernel models.

    Parameters
    ----------
    x : float or array_like
        Inputs.
    proba : array_like or GmmModel
        Either a responsibilities array of shape ``(n, N_cl)`` or a fitted
        :class:`ensda.gmm.GmmModel` from which they are computed.
    cluster_params : sequence of KernelParams1D
        One parameter set per mixture component.
    centers : CenterSet1D
    """
    from ensda.gmm import GmmModel, responsibilities

    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if isinstance(proba, GmmModel):
        if proba.n_components != len(cluster_params):
            raise InvalidArgumentError(
                f"{len(cluster_params)} parameter sets for a {proba.n_components}-component mixture"
            )
        proba = responsibilities(xs, proba)
    proba = np.atleast_2d(np.asarray(proba, dtype=np.float64))
    if proba.shape[1] != len(cluster_params):
        raise InvalidArgumentError("responsibility columns and cluster parameter count differ")
    out = np.zeros(xs.shape, dtype=np.float64)
    for s, params in enumerate(cluster_params):
        out += proba[:, s] * eval_model_1d(xs, params, centers)
    return float(out[0]) if np.ndim(x) == 0 else out


# ------------------------------------------------------------ vectorized API


def predict_1d(x: NDArrayFloat, weights: NDArrayFloat, scales: NDArrayFloat, centers: NDArrayFloat,
               sq_dist: NDArrayFloat = None) -> NDArrayFloat:
    """Vectorized univariate model for one parameter set.

    ``sq_dist`` may carry a precomputed ``(x[:, None] - centers)**2`` matrix.
    """
    if sq_dist is None:
        sq_dist = (x[:, None] - centers[None, :]) ** 2
    k = _exp_inplace((-0.5 * scales * scales)[None, :] * sq_dist)
    return k @ weights


def residual_da(z, g_of_z, weights, beta_z, beta_r, cdata: CenterDataDA, d_obs=None) -> NDArrayFloat:
    """Vectorized residual correction over gridblocks.

    ``d_obs`` only enters through a difference that cancels; when given, the
    coordinates are formed exactly as ``(d_o - g(z)) - (d_o - d_k)``.
    """
    dz = z[:, None] - cdata.z_cp[None, :]
    if d_obs is None:
        dr = cdata.d_cp[None, :] - g_of_z[:, None]
    else:
        dr = (d_obs - g_of_z)[:, None] - (d_obs[:, None] - cdata.d_cp[None, :])
    dz *= dz
    dz *= (-0.25 * beta_z * beta_z)[None, :]
    dr *= dr
    dr *= (-0.25 * beta_r * beta_r)[None, :]
    dz += dr
    return _exp_inplace(dz) @ weights


# -------------------------------------------------------------------- CSV I/O


def params_to_csv(path: Union[str, Path], ensemble: NDArrayFloat, n_cp: int, m: int = 1) -> None:
    """Write a ``((m+1)*n_cp, n_e)`` parameter ensemble, one row per member."""
    ensemble = np.asarray(ensemble, dtype=np.float64)
    if ensemble.shape[0] != (m + 1) * n_cp:
        raise InvalidArgumentError(f"ensemble has {ensemble.shape[0]} rows, expected {(m + 1) * n_cp}")
    names = [f"c_{k + 1}" for k in range(n_cp)]
    for ell in range(m):
        names += [f"beta{ell + 1}_{k + 1}" for k in range(n_cp)]
    np.savetxt(path, ensemble.T, delimiter=",", header=",".join(names), comments="", fmt="%.17g")


def params_from_csv(path: Union[str, Path]) -> NDArrayFloat:
    """Read a parameter ensemble written by :func:`params_to_csv` as ``(n_var, n_e)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data.T.copy()
