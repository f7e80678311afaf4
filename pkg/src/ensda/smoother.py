"""Iterative ensemble smoother with a regularized, TSVD-subspace update.

Each outer step replaces every member by

    theta_j <- theta_j + S_theta S_h^T (S_h S_h^T + gamma C_y)^{-1} (d - H(theta_j))

where ``S_theta`` holds the scaled parameter anomalies and ``S_h`` the scaled
prediction anomalies, centered on the prediction of the ensemble mean. The
inversion is carried out in the subspace of a truncated SVD of the whitened
``C_y^{-1/2} S_h``, so ``C_y`` (diagonal) is never formed.

The outer loop adapts ``gamma``. An analysis that lowers the ensemble-average
data mismatch is accepted and the next step is lengthened by the factor
``gamma_grow``; otherwise up to ``max_inner`` trial analyses are computed from
the same background, each back-tracking by ``gamma_shrink``, and the last
trial is adopted. Since a larger ``gamma`` means a shorter step, the default
``gamma_mode="step"`` divides ``gamma`` by these factors; ``"multiply"``
applies them to ``gamma`` literally. Iteration stops at ``max_outer``, when
the relative change of the average mismatch drops below ``rel_change_stop``,
or the first time the average mismatch falls below ``target_factor`` times the
number of data.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from ensda.metrics import ensemble_mismatch
from ensda.utils import ForwardModelError, InvalidArgumentError, NDArrayFloat

logger = logging.getLogger(__name__)

STOP_MAX_OUTER = "max_outer"
STOP_REL_CHANGE = "rel_change"
STOP_TARGET = "target_mismatch"

GAMMA0_RULES = ("subspace", "trace", "whitened")
GAMMA_MODES = ("multiply", "step")


@dataclass
class IesConfig:
    """Iteration schedule of :func:`run_ies`.

    ``gamma0_rule`` selects the initial regularization: ``"subspace"`` uses
    the mean squared singular value retained by the TSVD of the whitened
    ``S_h``; ``"trace"`` balances ``gamma0 * trace(C_y)`` against
    ``trace(S_h S_h^T)``; ``"whitened"`` uses the average diagonal of the
    whitened ``S_h S_h^T``. A numeric ``gamma0`` overrides the rule.

    ``gamma_mode="step"`` applies ``gamma_grow`` and ``gamma_shrink`` to the
    step length, dividing ``gamma`` by them, so accepted steps lengthen and
    trials back-track. ``"multiply"`` multiplies ``gamma`` by ``gamma_grow``
    after an accepted step and by ``gamma_shrink`` per trial.
    """

    max_outer: int = 10
    max_inner: int = 5
    gamma_grow: float = 2.0
    gamma_shrink: float = 0.9
    rel_change_stop: float = 0.01
    target_factor: float = 4.0
    svd_energy: float = 0.999
    gamma0_rule: str = "subspace"
    gamma0: Optional[float] = None
    gamma_mode: str = "step"
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.max_outer < 1:
            raise InvalidArgumentError("max_outer must be >= 1")
        if self.max_inner < 0:
            raise InvalidArgumentError("max_inner must be >= 0")
        if not (0 < self.gamma_shrink < 1 < self.gamma_grow):
            raise InvalidArgumentError("need 0 < gamma_shrink < 1 < gamma_grow")
        if not (0 < self.svd_energy <= 1):
            raise InvalidArgumentError("svd_energy must lie in (0, 1]")
        if self.gamma0_rule not in GAMMA0_RULES:
            raise InvalidArgumentError(f"gamma0_rule must be one of {GAMMA0_RULES}")
        if self.gamma_mode not in GAMMA_MODES:
            raise InvalidArgumentError(f"gamma_mode must be one of {GAMMA_MODES}")
        if self.gamma0 is not None and not self.gamma0 > 0:
            raise InvalidArgumentError("gamma0 must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationRecord:
    iteration: int
    mismatch: NDArrayFloat
    gamma: float
    accepted: bool
    inner_trials: int
    non_improving: bool = False
    reverted: int = 0

    @property
    def mean_mismatch(self) -> float:
        m = self.mismatch[np.isfinite(self.mismatch)]
        return float(np.mean(m))


@dataclass
class IesHistory:
    records: List[IterationRecord] = field(default_factory=list)
    stop_reason: Optional[str] = None
    gamma0: Optional[float] = None
    n_data: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def mean_mismatch(self) -> NDArrayFloat:
        return np.array([r.mean_mismatch for r in self.records])

    @property
    def n_outer(self) -> int:
        return len(self.records) - 1

    def accepted_monotone(self, slack: float = 0.0) -> bool:
        """True when every accepted step did not raise the average mismatch."""
        means = self.mean_mismatch()
        return all(
            means[i] <= means[i - 1] * (1 + slack)
            for i, r in enumerate(self.records)
            if i > 0 and r.accepted
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "member", "mismatch", "gamma", "accepted", "inner_trials"])
            for r in self.records:
                for j, m in enumerate(r.mismatch):
                    w.writerow([r.iteration, j, repr(float(m)), repr(float(r.gamma)), int(r.accepted), r.inner_trials])

    def summary(self) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "n_outer": self.n_outer,
            "gamma0": self.gamma0,
            "n_data": self.n_data,
            "mean_mismatch": [float(v) for v in self.mean_mismatch()],
            "gamma": [float(r.gamma) for r in self.records],
            "accepted": [bool(r.accepted) for r in self.records],
            "inner_trials": [int(r.inner_trials) for r in self.records],
            "non_improving": [bool(r.non_improving) for r in self.records],
        }

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2), encoding="utf-8")


# ---------------------------------------------------------------- primitives


def anomalies(ensemble) -> NDArrayFloat:
    """Mean-removed members scaled by ``1/sqrt(n_e - 1)``, shape ``(n_var, n_e)``."""
    E = np.asarray(ensemble, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] < 2:
        raise InvalidArgumentError(f"ensemble must be (n_var, n_e >= 2), got {E.shape}")
    return (E - E.mean(axis=1, keepdims=True)) / np.sqrt(E.shape[1] - 1)


def tsvd(matrix, energy: float, max_rank: Optional[int] = None) -> Tuple[NDArrayFloat, NDArrayFloat, NDArrayFloat]:
    """Truncated SVD keeping a fraction ``energy`` of the singular-value sum.

    The retained rank is the smallest ``r`` with
    ``sum(s[:r]) >= energy * sum(s)``, capped at ``max_rank``.

    Returns
    -------
    U : ndarray, shape (n, r)
    s : ndarray, shape (r,)
    Vt : ndarray, shape (r, m)
    """
    if not (0 < energy <= 1):
        raise InvalidArgumentError(f"energy must lie in (0, 1], got {energy}")
    A = np.asarray(matrix, dtype=np.float64)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    total = s.sum()
    if total <= 0:
        return U[:, :0], s[:0], Vt[:0]
    cum = np.cumsum(s)
    r = int(np.searchsorted(cum, energy * total * (1 - 1e-12))) + 1
    r = min(r, s.size)
    if max_rank is not None:
        r = min(r, max_rank)
    return U[:, :r], s[:r], Vt[:r]


def ies_update(background, predictions, pred_of_mean, obs, obs_var, gamma: float,
               svd_energy: float = 0.999) -> NDArrayFloat:
    """One regularized ensemble-smoother analysis.

    Parameters
    ----------
    background : ndarray, shape (n_var, n_e)
    predictions : ndarray, shape (n_d, n_e)
        Forward predictions of the background members.
    pred_of_mean : ndarray, shape (n_d,)
        Forward prediction of the background ensemble mean; centers ``S_h``.
    obs, obs_var : ndarray, shape (n_d,)
        Observations and their (diagonal) error variances.
    gamma : float
        Regularization weight on ``C_y``.
    svd_energy : float
        Singular-value fraction kept by the TSVD (rank capped at ``n_e - 1``).
    """
    E = np.asarray(background, dtype=np.float64)
    P = np.asarray(predictions, dtype=np.float64)
    pm = np.asarray(pred_of_mean, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    obs_var = np.asarray(obs_var, dtype=np.float64)
    if E.ndim != 2 or P.ndim != 2 or E.shape[1] != P.shape[1]:
        raise InvalidArgumentError("background and predictions must be 2D with equal member counts")
    n_d, n_e = P.shape
    if not (pm.shape == obs.shape == obs_var.shape == (n_d,)):
        raise InvalidArgumentError("pred_of_mean, obs and obs_var must have length n_d")
    if not gamma > 0:
        raise InvalidArgumentError("gamma must be positive")
    if np.any(obs_var <= 0):
        raise InvalidArgumentError("obs_var must be strictly positive")
    for arr, name in ((E, "background"), (P, "predictions"), (pm, "pred_of_mean"), (obs, "obs")):
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError(f"{name} contains non-finite values")

    w = 1.0 / np.sqrt(obs_var)
    S_theta = anomalies(E)
    S_h = (P - pm[:, None]) * (w / np.sqrt(n_e - 1))[:, None]
    U, s, Vt = tsvd(S_h, svd_energy, max_rank=n_e - 1)
    if s.size == 0:
        return E.copy()
    innov = (obs[:, None] - P) * w[:, None]
    coef = Vt.T @ ((s / (s * s + gamma))[:, None] * (U.T @ innov))
    return E + S_theta @ coef


def initial_gamma(predictions, pred_of_mean, obs_var, rule: str = "subspace", svd_energy: float = 0.999) -> float:
    """Initial regularization weight from the background prediction spread."""
    P = np.asarray(predictions, dtype=np.float64)
    obs_var = np.asarray(obs_var, dtype=np.float64)
    n_d, n_e = P.shape
    dev = (P - np.asarray(pred_of_mean)[:, None]) / np.sqrt(n_e - 1)
    if rule == "subspace":
        _, s, _ = tsvd(dev / np.sqrt(obs_var)[:, None], svd_energy, max_rank=n_e - 1)
        g = float(np.mean(s * s)) if s.size else 0.0
    elif rule == "trace":
        g = np.sum(dev * dev) / np.sum(obs_var)
    elif rule == "whitened":
        g = np.sum(dev * dev / obs_var[:, None]) / n_d
    else:
        raise InvalidArgumentError(f"unknown gamma0 rule {rule!r}")
    if not g > 0:
        raise InvalidArgumentError("background predictions have zero spread; gamma0 is undefined")
    return float(g)


# ------------------------------------------------------------------ iteration


def _evaluate(forward: Callable, E: NDArrayFloat, n_jobs: int) -> NDArrayFloat:
    cols = [E[:, j] for j in range(E.shape[1])]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            out = list(pool.map(forward, cols))
    else:
        out = [forward(c) for c in cols]
    return np.column_stack([np.asarray(o, dtype=np.float64) for o in out])


def _finite_columns(P: NDArrayFloat) -> np.ndarray:
    return np.all(np.isfinite(P), axis=0)


def run_ies(forward: Callable[[NDArrayFloat], NDArrayFloat], init, obs, obs_var,
            config: Optional[IesConfig] = None,
            callback: Optional[Callable[[int, NDArrayFloat, NDArrayFloat], None]] = None,
            fixed_rows: Optional[np.ndarray] = None) -> Tuple[NDArrayFloat, IesHistory]:
    """Iterate :func:`ies_update` with adaptive ``gamma`` and stopping rules.

    Parameters
    ----------
    forward : callable
        Pure map from one member vector ``(n_var,)`` to predictions ``(n_d,)``.
    init : ndarray, shape (n_var, n_e)
        Initial ensemble.
    obs, obs_var : ndarray, shape (n_d,)
    config : IesConfig, optional
    callback : callable, optional
        Called as ``callback(iteration, ensemble, predictions)`` for the
        initial ensemble (iteration 0) and after every outer step.
    fixed_rows : ndarray of bool, shape (n_var,), optional
        State rows held at their initial values; they still enter the
        forward map but are never updated.

    Returns
    -------
    ensemble : ndarray, shape (n_var, n_e)
    history : IesHistory

    Raises
    ------
    ForwardModelError
        More than half of the members return non-finite predictions.
    """
    cfg = config or IesConfig()
    E = np.array(init, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    obs_var = np.asarray(obs_var, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] < 2:
        raise InvalidArgumentError(f"init must be (n_var, n_e >= 2), got {E.shape}")
    if not np.all(np.isfinite(E)):
        raise InvalidArgumentError("init contains non-finite values")
    n_e = E.shape[1]
    n_d = obs.size
    if fixed_rows is not None:
        fixed_rows = np.asarray(fixed_rows, dtype=bool)
        if fixed_rows.shape != (E.shape[0],):
            raise InvalidArgumentError("fixed_rows must be a boolean mask over the state rows")

    P = _evaluate(forward, E, cfg.n_jobs)
    if P.shape != (n_d, n_e):
        raise InvalidArgumentError(f"forward returned shape {P.shape}, expected {(n_d, n_e)}")
    active = _finite_columns(P)
    if active.sum() * 2 < n_e or active.sum() < 2:
        raise ForwardModelError(f"{n_e - active.sum()} of {n_e} members returned non-finite predictions")
    if not active.all():
        logger.warning("excluding %d members with non-finite initial predictions", n_e - active.sum())

    def mismatch(Pm):
        m = np.full(n_e, np.inf)
        m[active] = ensemble_mismatch(obs, Pm[:, active], obs_var)
        return m

    def pred_of_mean(Em):
        pm = np.asarray(forward(Em[:, active].mean(axis=1)), dtype=np.float64)
        if not np.all(np.isfinite(pm)):
            raise ForwardModelError("prediction of the ensemble mean is non-finite")
        return pm

    def analyse(Eb, Pb, pm, gamma):
        Ea = Eb.copy()
        Ea[:, active] = ies_update(Eb[:, active], Pb[:, active], pm, obs, obs_var, gamma, cfg.svd_energy)
        if fixed_rows is not None:
            Ea[fixed_rows] = Eb[fixed_rows]
        Pa = Pb.copy()
        Pa[:, active] = _evaluate(forward, Ea[:, active], cfg.n_jobs)
        bad = active & ~_finite_columns(Pa)
        if bad.sum() * 2 > n_e:
            raise ForwardModelError(f"{bad.sum()} of {n_e} analysis members returned non-finite predictions")
        if bad.any():
            Ea[:, bad] = Eb[:, bad]
            Pa[:, bad] = Pb[:, bad]
        return Ea, Pa, int(bad.sum())

    hist = IesHistory(n_data=n_d)
    mis = mismatch(P)
    hist.records.append(IterationRecord(0, mis, float("nan"), True, 0))
    if callback is not None:
        callback(0, E, P)
    avg_prev = float(np.mean(mis[active]))

    pm = pred_of_mean(E)
    if cfg.gamma0 is not None:
        gamma = float(cfg.gamma0)
    else:
        gamma = initial_gamma(P[:, active], pm, obs_var, cfg.gamma0_rule, cfg.svd_energy)
    hist.gamma0 = gamma

    if cfg.gamma_mode == "multiply":
        grow, shrink = cfg.gamma_grow, cfg.gamma_shrink
    else:
        grow, shrink = 1.0 / cfg.gamma_grow, 1.0 / cfg.gamma_shrink
    target = cfg.target_factor * n_d
    stop = STOP_MAX_OUTER
    for it in range(1, cfg.max_outer + 1):
        if it > 1:
            pm = pred_of_mean(E)
        Ea, Pa, reverted = analyse(E, P, pm, gamma)
        mis_a = mismatch(Pa)
        avg_a = float(np.mean(mis_a[active]))
        gamma_used = gamma
        trials = 0
        improved = avg_a < avg_prev
        if improved:
            gamma *= grow
        else:
            while trials < cfg.max_inner:
                trials += 1
                gamma *= shrink
                Ea, Pa, reverted = analyse(E, P, pm, gamma)
                mis_a = mismatch(Pa)
                avg_a = float(np.mean(mis_a[active]))
                gamma_used = gamma
                if avg_a < avg_prev:
                    improved = True
                    break
            if not improved:
                logger.info("outer step %d: adopting non-improving trial analysis", it)
        E, P = Ea, Pa
        hist.records.append(
            IterationRecord(it, mis_a, gamma_used, improved, trials, non_improving=not improved, reverted=reverted)
        )
        logger.info("outer step %d: mean mismatch %.6g (gamma %.4g, trials %d)", it, avg_a, gamma_used, trials)
        if callback is not None:
            callback(it, E, P)
        if avg_a < target:
            stop = STOP_TARGET
            break
        if abs(avg_a - avg_prev) < cfg.rel_change_stop * avg_prev:
            stop = STOP_REL_CHANGE
            break
        avg_prev = avg_a
    hist.stop_reason = stop
    return E, hist
