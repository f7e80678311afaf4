"""Initial ensembles of kernel scales and weights.

Scales are lognormal around the inverse spread of the training inputs. Each
member's weights come from a regularized one-point fit to a randomly chosen
training pair::

    c = dy * K / (alpha + K^T K),    alpha = exp(xi) * K^T K,

which reproduces ``dy / (1 + exp(xi))`` at the anchor input, half the label
when ``xi = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from ensda.kernels import CenterDataDA, CenterSet1D, _exp_inplace, kernel_vector_1d
from ensda.utils import InvalidArgumentError, NDArrayFloat, child_rng

logger = logging.getLogger(__name__)


@dataclass
class InitDiagnostics:
    """Per-member anchor index, weight-regularization draw and ``alpha``."""

    pair_index: np.ndarray
    xi: NDArrayFloat
    alpha: NDArrayFloat
    underflow: np.ndarray


def init_beta_ensemble(sigma_ti: float, n_cp: int, n_e: int, seed: Optional[int] = 0,
                       xi: Optional[NDArrayFloat] = None) -> NDArrayFloat:
    """Lognormal scale ensemble ``exp(xi) / sigma_ti`` of shape ``(n_cp, n_e)``.

    ``xi`` overrides the standard-normal draws.
    """
    if not (np.isfinite(sigma_ti) and sigma_ti > 0):
        raise InvalidArgumentError(f"sigma_ti must be positive, got {sigma_ti}")
    if xi is None:
        xi = child_rng(seed).standard_normal((n_cp, n_e))
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (n_cp, n_e):
        raise InvalidArgumentError(f"xi must have shape {(n_cp, n_e)}, got {xi.shape}")
    return np.exp(xi) / sigma_ti


def _one_point_weights(dy: NDArrayFloat, K: NDArrayFloat, xi: NDArrayFloat):
    # rows of K are members
    kk = np.einsum("jk,jk->j", K, K)
    under = kk <= 0
    alpha = np.exp(xi) * kk
    denom = np.where(under, 1.0, alpha + kk)
    c = (dy / denom)[:, None] * K
    c[under] = 0.0
    if under.any():
        logger.warning("%d members have all anchor kernels underflowing; weights set to zero", under.sum())
    return c, alpha, under


def init_weight_vector(pair: Tuple[float, float], betas, centers: CenterSet1D, seed: Optional[int] = 0,
                       xi: Optional[float] = None, return_info: bool = False):
    """Regularized one-point weights for a single member.

    Parameters
    ----------
    pair : (float, float)
        Anchor input and its label.
    betas : array_like, shape (n_cp,)
        The member's scales.
    centers : CenterSet1D
    seed : int, optional
        Seed of the ``xi`` draw; ignored when ``xi`` is given.
    xi : float, optional
        Fixed regularization draw.
    return_info : bool
        Also return ``(alpha, underflow)``.
    """
    x0, dy = float(pair[0]), float(pair[1])
    K = kernel_vector_1d(x0, betas, centers)
    if xi is None:
        xi = child_rng(seed).standard_normal()
    c, alpha, under = _one_point_weights(np.array([dy]), K[None, :], np.array([xi], dtype=np.float64))
    if return_info:
        return c[0], float(alpha[0]), bool(under[0])
    return c[0]


def _pick_anchors(n_pool: int, n_e: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n_pool, size=n_e, replace=n_e > n_pool)


def init_kernel_ensemble(x, dy, centers: CenterSet1D, n_e: int, seed: Optional[int] = 0,
                         sigma_ti: Optional[float] = None,
                         xi_beta: Optional[NDArrayFloat] = None,
                         xi_weight: Optional[NDArrayFloat] = None) -> Tuple[NDArrayFloat, InitDiagnostics]:
    """Initial ``(2 * n_cp, n_e)`` ensemble for the univariate model.

    Anchor pairs are drawn without replacement when ``n_e`` does not exceed
    the number of training pairs.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    dy = np.asarray(dy, dtype=np.float64).ravel()
    if x.size != dy.size or x.size == 0:
        raise InvalidArgumentError("x and dy must be nonempty with equal lengths")
    if sigma_ti is None:
        sigma_ti = float(np.std(x))
    n_cp = len(centers)
    if xi_beta is None:
        xi_beta = child_rng(seed, 0).standard_normal((n_cp, n_e))
    betas = init_beta_ensemble(sigma_ti, n_cp, n_e, xi=xi_beta)
    idx = _pick_anchors(x.size, n_e, child_rng(seed, 1))
    if xi_weight is None:
        xi_weight = child_rng(seed, 2).standard_normal(n_e)
    xi_weight = np.asarray(xi_weight, dtype=np.float64)
    K = _exp_inplace(-0.5 * betas.T**2 * (x[idx, None] - centers.centers[None, :]) ** 2)
    c, alpha, under = _one_point_weights(dy[idx], K, xi_weight)
    theta = np.vstack([c.T, betas])
    return theta, InitDiagnostics(idx, xi_weight, alpha, under)


def init_da_eta_ensemble(init_models, obs, g: Callable[[NDArrayFloat], NDArrayFloat], cdata: CenterDataDA,
                         n_e: Optional[int] = None, seed: Optional[int] = 0,
                         candidates: Optional[np.ndarray] = None, anchor: str = "member",
                         ) -> Tuple[NDArrayFloat, InitDiagnostics]:
    """Initial residual-kernel parameters ``eta`` with the ``m = 2`` layout.

    Parameters
    ----------
    init_models : ndarray, shape (m_z, n_e)
        Initial model ensemble.
    obs : ndarray, shape (m_z,)
    g : callable
        Elementwise run simulator.
    cdata : CenterDataDA
    n_e : int, optional
        Must equal the number of columns of ``init_models`` when given.
    seed : int
    candidates : ndarray of int, optional
        Gridblocks used for the scale statistics and the anchor draws
        (default: all).
    anchor : {"member", "mean"}
        Anchor on each member's own model values or on the ensemble mean.

    Returns
    -------
    eta : ndarray, shape (3 * n_cp, n_e)
        ``[c | beta_z | beta_r]`` per member.
    diagnostics : InitDiagnostics
    """
    Z = np.asarray(init_models, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != obs.size:
        raise InvalidArgumentError("init_models must be (m_z, n_e) with m_z = len(obs)")
    if n_e is not None and n_e != Z.shape[1]:
        raise InvalidArgumentError(f"n_e = {n_e} but init_models has {Z.shape[1]} members")
    if anchor not in ("member", "mean"):
        raise InvalidArgumentError(f"anchor must be 'member' or 'mean', got {anchor!r}")
    n_e = Z.shape[1]
    if candidates is None:
        candidates = np.arange(obs.size)
    candidates = np.asarray(candidates)
    if candidates.size == 0:
        raise InvalidArgumentError("no candidate gridblocks")
    Zc = Z[candidates]
    sigma_z = float(np.std(Zc))
    sigma_r = float(np.std(np.mean(obs[candidates, None] - g(Zc), axis=1)))
    if not (sigma_z > 0 and sigma_r > 0):
        raise InvalidArgumentError(f"degenerate initial spreads: sigma_z = {sigma_z}, sigma_r = {sigma_r}")
    n_cp = len(cdata)
    beta_z = init_beta_ensemble(sigma_z, n_cp, n_e, xi=child_rng(seed, 0).standard_normal((n_cp, n_e)))
    beta_r = init_beta_ensemble(sigma_r, n_cp, n_e, xi=child_rng(seed, 1).standard_normal((n_cp, n_e)))
    pick = _pick_anchors(candidates.size, n_e, child_rng(seed, 2))
    loc = candidates[pick]
    xi = child_rng(seed, 3).standard_normal(n_e)
    if anchor == "member":
        z0 = Z[loc, np.arange(n_e)]
    else:
        z0 = Z.mean(axis=1)[loc]
    g0 = g(z0)
    dy = obs[loc] - g0
    arg = -0.25 * (beta_z.T**2 * (z0[:, None] - cdata.z_cp[None, :]) ** 2
                   + beta_r.T**2 * (cdata.d_cp[None, :] - g0[:, None]) ** 2)
    K = _exp_inplace(arg)
    c, alpha, under = _one_point_weights(dy, K, xi)
    eta = np.vstack([c.T, beta_z, beta_r])
    return eta, InitDiagnostics(loc, xi, alpha, under)
