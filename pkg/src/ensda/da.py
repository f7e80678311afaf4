"""Two-dimensional data assimilation with kernel-based model-error correction.

Observations are gridblock-wise ``d = f(z_true) + eps`` with
``f(z) = sqrt(|z|**3 + 1)``. The run simulator ``g`` equals ``f`` in the
perfect scenario and ``z**2`` in the imperfect one. Three variants are run
with the iterative ensemble smoother:

* ``none``: the state is ``z`` and the forward map is ``g``;
* ``kernel``: the state is ``[z | eta_1 | ... | eta_Ncl]`` and the forward
  map adds a responsibility-weighted residual kernel model to ``g(z)``;
* ``bias``: the state is ``[z | b]`` and the forward map is ``g(z) + b``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ensda.gmm import GmmModel, fit_gmm, hard_assign, responsibilities
from ensda.grf import CovarianceSpec, Field, fields_to_matrix, simulate_ensemble, simulate_field
from ensda.kernel_init import init_da_eta_ensemble
from ensda.kernels import CenterDataDA, residual_da
from ensda.metrics import box_stats, ensemble_mismatch, rmse
from ensda.smoother import IesConfig, IesHistory, anomalies, run_ies
from ensda.utils import InvalidArgumentError, NDArrayFloat, child_rng, derive_seed

logger = logging.getLogger(__name__)

SCENARIOS = ("perfect", "imperfect")
MEC_MODES = ("none", "kernel", "bias")
REF_COV = CovarianceSpec(2.0, 15.0, 25.0)
INIT_COV = CovarianceSpec(2.2, 17.0, 23.0)
NOISE_FLOOR = 1e-6


def true_simulator(z):
    return np.sqrt(np.abs(z) ** 3 + 1.0)


def imperfect_simulator(z):
    return np.asarray(z, dtype=np.float64) ** 2


@dataclass
class DaProblem:
    reference: Field
    obs: NDArrayFloat
    obs_var: NDArrayFloat
    scenario: str

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidArgumentError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.obs_var = np.asarray(self.obs_var, dtype=np.float64)
        if self.obs.shape != (self.m_z,) or self.obs_var.shape != (self.m_z,):
            raise InvalidArgumentError("obs and obs_var must have one entry per gridblock")
        if np.any(self.obs_var <= 0):
            raise InvalidArgumentError("obs_var must be strictly positive")

    @property
    def m_z(self) -> int:
        return self.reference.nx * self.reference.ny

    @property
    def nx(self) -> int:
        return self.reference.nx

    @property
    def ny(self) -> int:
        return self.reference.ny

    def g(self, z):
        return true_simulator(z) if self.scenario == "perfect" else imperfect_simulator(z)

    @staticmethod
    def f(z):
        return true_simulator(z)


def gen_da_problem(nx: int = 100, ny: int = 120, ref_cov: CovarianceSpec = REF_COV, scenario: str = "perfect",
                   seed: Optional[int] = 0, obs_var_mode: str = "truth") -> DaProblem:
    """Reference field, noisy observations and their error variances.

    ``obs_var_mode="truth"`` scales the noise STD with the noise-free datum;
    ``"observed"`` rescales ``C_d`` with the observed magnitudes afterwards.
    """
    ref = simulate_field(nx, ny, ref_cov, derive_seed(seed, 0))
    fz = true_simulator(ref.values)
    sigma = np.maximum(NOISE_FLOOR, 0.1 * np.abs(fz))
    obs = fz + child_rng(seed, 1).standard_normal(fz.size) * sigma
    if obs_var_mode == "observed":
        sigma = np.maximum(NOISE_FLOOR, 0.1 * np.abs(obs))
    elif obs_var_mode != "truth":
        raise InvalidArgumentError(f"obs_var_mode must be 'truth' or 'observed', got {obs_var_mode!r}")
    return DaProblem(ref, obs, sigma**2, scenario)


def gen_initial_ensemble(nx: int, ny: int, n_e: int = 100, cov: CovarianceSpec = INIT_COV,
                         seed: Optional[int] = 0) -> NDArrayFloat:
    """Initial model ensemble as an ``(nx * ny, n_e)`` matrix."""
    return fields_to_matrix(simulate_ensemble(n_e, nx, ny, cov, derive_seed(seed, 2)))


def _as_matrix(init_ensemble) -> NDArrayFloat:
    if isinstance(init_ensemble, (list, tuple)):
        if not init_ensemble:
            raise InvalidArgumentError("initial ensemble is empty")
        return fields_to_matrix(list(init_ensemble))
    Z = np.asarray(init_ensemble, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] < 1:
        raise InvalidArgumentError("initial ensemble must be an (m_z, n_e) matrix or a list of fields")
    return Z


def build_center_points(init_ensemble, obs, n_cp: int = 200, n_neighbors: int = 20) -> CenterDataDA:
    """Center points over the widened initial value range and their data.

    ``d_cp[k]`` averages the observations at the ``n_neighbors`` gridblocks
    whose ensemble-mean values lie closest to ``z_cp[k]`` (ties broken by
    gridblock index).
    """
    Z = _as_matrix(init_ensemble)
    obs = np.asarray(obs, dtype=np.float64)
    if obs.size != Z.shape[0]:
        raise InvalidArgumentError("obs length differs from the number of gridblocks")
    if Z.shape[0] < n_neighbors:
        raise InvalidArgumentError(f"need at least {n_neighbors} gridblocks, got {Z.shape[0]}")
    zmin, zmax = float(Z.min()), float(Z.max())
    low = zmin - 0.1 * abs(zmin)
    high = zmax + 0.1 * abs(zmax)
    z_cp = low + (high - low) * np.arange(n_cp) / n_cp
    zhat = Z.mean(axis=1)
    d_cp = np.empty(n_cp)
    for k in range(n_cp):
        near = np.argsort(np.abs(zhat - z_cp[k]), kind="stable")[:n_neighbors]
        d_cp[k] = obs[near].mean()
    return CenterDataDA(z_cp, d_cp)


@dataclass(frozen=True)
class AugmentedState:
    """Layout ``[z (m_z) | block_1 | ... | block_n]`` of the assimilated state.

    Kernel blocks hold ``3 * n_cp`` values ``[c | beta_z | beta_r]``; a bias
    block holds ``m_z`` values.
    """

    m_z: int
    n_blocks: int = 0
    block_size: int = 0

    @classmethod
    def kernel(cls, m_z: int, n_cp: int, n_cl: int) -> "AugmentedState":
        return cls(m_z, n_cl, 3 * n_cp)

    @classmethod
    def bias(cls, m_z: int) -> "AugmentedState":
        return cls(m_z, 1, m_z)

    @property
    def size(self) -> int:
        return self.m_z + self.n_blocks * self.block_size

    def pack(self, z, blocks: Sequence = ()) -> NDArrayFloat:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[0] != self.m_z or len(blocks) != self.n_blocks:
            raise InvalidArgumentError("z or block count inconsistent with the layout")
        parts = [z] + [np.asarray(b, dtype=np.float64) for b in blocks]
        if any(p.shape[0] != self.block_size for p in parts[1:]):
            raise InvalidArgumentError(f"blocks must have {self.block_size} rows")
        return np.concatenate(parts, axis=0)

    def unpack(self, theta) -> Tuple[NDArrayFloat, List[NDArrayFloat]]:
        theta = np.asarray(theta)
        if theta.shape[0] != self.size:
            raise InvalidArgumentError(f"state has {theta.shape[0]} rows, layout expects {self.size}")
        z = theta[: self.m_z]
        blocks = [theta[self.m_z + i * self.block_size: self.m_z + (i + 1) * self.block_size]
                  for i in range(self.n_blocks)]
        return z, blocks


def residual_correction(z, g_of_z, eta_blocks: Sequence, cdata: CenterDataDA,
                        proba: Optional[NDArrayFloat] = None) -> NDArrayFloat:
    """Responsibility-weighted sum of the per-cluster residual kernel models."""
    n_cp = len(cdata)
    out = np.zeros_like(g_of_z)
    for s, eta in enumerate(eta_blocks):
        r = residual_da(z, g_of_z, eta[:n_cp], eta[n_cp:2 * n_cp], eta[2 * n_cp:], cdata)
        out += r if proba is None else proba[:, s] * r
    return out


def effective_forward(z, eta_blocks: Sequence, gmm: Optional[GmmModel], problem: DaProblem,
                      cdata: Optional[CenterDataDA] = None, include_residual: bool = True,
                      proba: Optional[NDArrayFloat] = None) -> NDArrayFloat:
    """Simulated observations ``g(z) + sum_s P_s(z) r(z; eta_s)``.

    ``proba`` fixes the responsibilities; otherwise they are evaluated at
    ``z`` from ``gmm`` (and are identically one without a mixture).
    """
    z = np.asarray(z, dtype=np.float64)
    gz = problem.g(z)
    if not include_residual or len(eta_blocks) == 0:
        return gz
    if cdata is None:
        raise InvalidArgumentError("center data are required for the residual term")
    if proba is None and gmm is not None:
        proba = np.atleast_2d(responsibilities(z, gmm))
    return gz + residual_correction(z, gz, eta_blocks, cdata, proba)


def init_bias_ensemble(problem: DaProblem, init_ensemble, seed: Optional[int] = 0,
                       n_samples: Optional[int] = None) -> NDArrayFloat:
    """Bias members ``rbar + S_r xi`` sharing the initial residuals' mean and covariance."""
    Z = _as_matrix(init_ensemble)
    if Z.shape[1] < 2:
        raise InvalidArgumentError("need at least two members")
    R = problem.obs[:, None] - problem.g(Z)
    rbar = R.mean(axis=1)
    S = anomalies(R)
    n = Z.shape[1] if n_samples is None else int(n_samples)
    xi = child_rng(seed).standard_normal((Z.shape[1], n))
    return rbar[:, None] + S @ xi


def mismatch_difference(ensemble, layout: AugmentedState, problem: DaProblem, cdata: CenterDataDA,
                        gmm: Optional[GmmModel] = None, proba: Optional[NDArrayFloat] = None) -> NDArrayFloat:
    """Per-member mismatch without the residual term minus mismatch with it."""
    E = np.asarray(ensemble, dtype=np.float64)
    out = np.empty(E.shape[1])
    for j in range(E.shape[1]):
        z, blocks = layout.unpack(E[:, j])
        plain = problem.g(z)
        full = effective_forward(z, blocks, gmm, problem, cdata, True, proba)
        out[j] = _xi(problem, plain) - _xi(problem, full)
    return out


def _xi(problem: DaProblem, sim) -> float:
    r = problem.obs - sim
    return float(np.sum(r * r / problem.obs_var))


# ------------------------------------------------------------------------ run


@dataclass
class DaResults:
    scenario: str
    mec: str
    n_cl: int
    history: IesHistory
    rmse: List[NDArrayFloat]
    rmse_of_mean: List[float]
    dmdiff: List[NDArrayFloat]
    final_ensemble: NDArrayFloat
    layout: AugmentedState
    mean_fields: Dict[str, Field] = field(default_factory=dict)
    cdata: Optional[CenterDataDA] = None
    gmm: Optional[GmmModel] = None

    @property
    def final_mismatch(self) -> NDArrayFloat:
        return self.history.records[-1].mismatch

    @property
    def final_rmse(self) -> NDArrayFloat:
        return self.rmse[-1]

    def summary(self) -> dict:
        mis = self.final_mismatch
        e = self.final_rmse
        out = {
            "scenario": self.scenario,
            "mec": self.mec,
            "n_cl": self.n_cl,
            "stop_reason": self.history.stop_reason,
            "n_outer": self.history.n_outer,
            "mismatch_mean": float(np.mean(mis)),
            "mismatch_std": float(np.std(mis)),
            "rmse_mean": float(np.mean(e)),
            "rmse_std": float(np.std(e)),
            "rmse_of_mean": float(self.rmse_of_mean[-1]),
            "initial_mismatch_mean": float(np.mean(self.history.records[0].mismatch)),
            "initial_rmse_mean": float(np.mean(self.rmse[0])),
            "mismatch_box": box_stats(mis).to_dict(),
            "rmse_box": box_stats(e).to_dict(),
        }
        if self.dmdiff:
            out["dmdiff_positive_fraction"] = float(np.mean(self.dmdiff[-1] > 0))
        return out


def default_da_config(**overrides) -> IesConfig:
    """Smoother schedule used by :func:`run_da` when none is given.

    The trace-balanced initial ``gamma`` suits the dense, well-observed field
    better than the subspace rule, which starts with overly short steps.
    """
    opts = {"gamma0_rule": "trace"}
    opts.update(overrides)
    return IesConfig(**opts)


def run_da(problem: DaProblem, init_ensemble, mec: str = "none", n_cl: int = 1,
           ies_cfg: Optional[IesConfig] = None, seed: Optional[int] = 0, n_cp: int = 200,
           n_neighbors: int = 20, gmm_source: str = "mean", proba_mode: str = "dynamic",
           anchor: str = "member", eta_init: Optional[Sequence[NDArrayFloat]] = None,
           freeze_eta: bool = False) -> DaResults:
    """Assimilate the observations with the chosen model-error treatment.

    Parameters
    ----------
    problem : DaProblem
    init_ensemble : ndarray (m_z, n_e) or list of Field
    mec : {"none", "kernel", "bias"}
    n_cl : int
        Mixture components for kernel correction.
    ies_cfg : IesConfig, optional
        Defaults to :func:`default_da_config`.
    seed : int
    n_cp, n_neighbors : int
        Center-point count and neighbors averaged for their data.
    gmm_source : {"mean", "pooled"}
        Fit the mixture to the initial ensemble-mean values or to all
        initial values.
    proba_mode : {"dynamic", "frozen"}
        Re-evaluate responsibilities at the current ``z`` or keep those of
        the initial ensemble mean.
    anchor : {"member", "mean"}
        Anchor values for the initial kernel weights.
    eta_init : sequence of ndarray, optional
        Initial kernel blocks ``(3 * n_cp, n_e)`` overriding the default
        initialization.
    freeze_eta : bool
        Keep the kernel blocks fixed at their initial values.
    """
    if mec not in MEC_MODES:
        raise InvalidArgumentError(f"mec must be one of {MEC_MODES}, got {mec!r}")
    if gmm_source not in ("mean", "pooled") or proba_mode not in ("dynamic", "frozen"):
        raise InvalidArgumentError("gmm_source must be 'mean'|'pooled' and proba_mode 'dynamic'|'frozen'")
    cfg = ies_cfg or default_da_config()
    Z0 = _as_matrix(init_ensemble)
    m_z, n_e = Z0.shape
    if m_z != problem.m_z:
        raise InvalidArgumentError(f"initial ensemble has {m_z} gridblocks, problem has {problem.m_z}")
    zhat0 = Z0.mean(axis=1)
    cdata = None
    gmm = None
    fixed_proba = None

    if mec == "kernel":
        if n_cl < 1:
            raise InvalidArgumentError(f"n_cl must be >= 1, got {n_cl}")
        cdata = build_center_points(Z0, problem.obs, n_cp, n_neighbors)
        if n_cl > 1:
            samples = zhat0 if gmm_source == "mean" else Z0.ravel()
            gmm = fit_gmm(samples, n_cl, seed=derive_seed(seed, 0))
            labels = hard_assign(zhat0, gmm)
            if proba_mode == "frozen":
                fixed_proba = np.atleast_2d(responsibilities(zhat0, gmm))
        else:
            labels = np.zeros(m_z, dtype=int)
        if eta_init is not None:
            blocks = [np.asarray(b, dtype=np.float64) for b in eta_init]
        else:
            blocks = []
            for s in range(n_cl):
                cand = np.flatnonzero(labels == s)
                if cand.size == 0:
                    logger.warning("no gridblock of the mean field falls in cluster %d; using all gridblocks", s)
                    cand = None
                eta, _ = init_da_eta_ensemble(Z0, problem.obs, problem.g, cdata, seed=derive_seed(seed, 1, s),
                                              candidates=cand, anchor=anchor)
                blocks.append(eta)
        layout = AugmentedState.kernel(m_z, n_cp, len(blocks))
        init = layout.pack(Z0, blocks)
    elif mec == "bias":
        layout = AugmentedState.bias(m_z)
        init = layout.pack(Z0, [init_bias_ensemble(problem, Z0, derive_seed(seed, 2))])
    else:
        layout = AugmentedState(m_z)
        init = Z0.copy()

    if mec == "kernel":
        def forward(theta):
            z, blocks = layout.unpack(theta)
            return effective_forward(z, blocks, gmm, problem, cdata, True, fixed_proba)
    elif mec == "bias":
        def forward(theta):
            z, (b,) = layout.unpack(theta)
            return problem.g(z) + b
    else:
        def forward(theta):
            return problem.g(theta)

    res = DaResults(problem.scenario, mec, n_cl if mec == "kernel" else 0, IesHistory(), [], [], [], init, layout,
                    cdata=cdata, gmm=gmm)
    z_true = problem.reference.values

    def callback(it, E, P):
        Z = E[:m_z]
        res.rmse.append(np.sqrt(np.mean((Z - z_true[:, None]) ** 2, axis=0)))
        res.rmse_of_mean.append(rmse(Z.mean(axis=1), z_true))
        if mec == "kernel":
            plain = ensemble_mismatch(problem.obs, problem.g(Z), problem.obs_var)
            full = ensemble_mismatch(problem.obs, P, problem.obs_var)
            res.dmdiff.append(plain - full)

    fixed = None
    if mec == "kernel" and freeze_eta:
        fixed = np.zeros(layout.size, dtype=bool)
        fixed[m_z:] = True
    final, hist = run_ies(forward, init, problem.obs, problem.obs_var, cfg, callback=callback, fixed_rows=fixed)
    res.history = hist
    res.final_ensemble = final
    res.mean_fields["initial"] = Field(problem.nx, problem.ny, zhat0)
    res.mean_fields["final"] = Field(problem.nx, problem.ny, final[:m_z].mean(axis=1))
    return res


# --------------------------------------------------------------------- output


def write_da_outputs(res: DaResults, out_dir: Union[str, Path], extra: Optional[dict] = None) -> dict:
    """Write history, mean fields, mismatch differences and the run summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "da_history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "member", "mismatch", "rmse", "gamma", "accepted"])
        for t, rec in enumerate(res.history.records):
            for j, m in enumerate(rec.mismatch):
                w.writerow([t, j, repr(float(m)), repr(float(res.rmse[t][j])), repr(float(rec.gamma)),
                            int(rec.accepted)])
    for stage, fld in res.mean_fields.items():
        fld.to_csv(out / f"da_mean_field_{stage}.csv")
    with open(out / "da_dmdiff.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "member", "difference"])
        for t, diff in enumerate(res.dmdiff):
            for j, v in enumerate(diff):
                w.writerow([t, j, repr(float(v))])
    summary = res.summary()
    if extra:
        summary.update(extra)
    (out / "da_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return summary


def audit_results(res: DaResults) -> List[str]:
    """Invariant violations of a finished run (empty when all hold)."""
    problems = []
    if not res.history.accepted_monotone():
        problems.append("accepted steps increased the average mismatch")
    if len(res.rmse) != len(res.history.records):
        problems.append("RMSE missing for some outer steps")
    if not np.all(np.isfinite(res.final_ensemble)):
        problems.append("final ensemble contains non-finite values")
    return problems
