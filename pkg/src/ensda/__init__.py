"""Ensemble kernel learning and model-error correction for iterative ensemble smoothers."""

from ensda.da import DaProblem, DaResults, gen_da_problem, gen_initial_ensemble, run_da
from ensda.gmm import GaussianMixture1D, GmmModel, fit_gmm, responsibilities
from ensda.grf import CovarianceSpec, Field, simulate_ensemble, simulate_field
from ensda.kernels import CenterDataDA, CenterSet1D, KernelParams1D, KernelParamsMD
from ensda.metrics import data_mismatch, ensemble_mismatch, rmse
from ensda.slp import EnsembleKernelRegressor, MultiModalKernelRegressor, run_slp_experiment
from ensda.smoother import IesConfig, IesHistory, ies_update, run_ies
from ensda.utils import DegenerateComponentError, ForwardModelError, InvalidArgumentError

__version__ = "0.1.0"

__all__ = [
    "CenterDataDA", "CenterSet1D", "CovarianceSpec", "DaProblem", "DaResults", "DegenerateComponentError",
    "EnsembleKernelRegressor", "Field", "ForwardModelError", "GaussianMixture1D", "GmmModel", "IesConfig",
    "IesHistory", "InvalidArgumentError", "KernelParams1D", "KernelParamsMD", "MultiModalKernelRegressor",
    "data_mismatch", "ensemble_mismatch", "fit_gmm", "gen_da_problem", "gen_initial_ensemble", "ies_update",
    "responsibilities", "rmse", "run_da", "run_ies", "run_slp_experiment", "simulate_ensemble", "simulate_field",
]
