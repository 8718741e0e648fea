"""Bayesian calibration of computer models with GaSP and S-GaSP discrepancy."""

from .emulator import bind_emulator, emu_predict, fit_ppgasp, fit_scalar, load_emulator, save_emulator
from .kernels import KernelSpec, corr_matrix, cross_corr, scaled_corr
from .mcmc import McmcConfig, PosteriorSamples, run_mcmc
from .mle import MleResult, OptimizerFailure, run_mle
from .model import CalibrationProblem, profile_loglik
from .multisource import MultiSourceProblem, Source, ms_mcmc, ms_predict, stack_sources
from .predict import PredictionResult, predict_plugin, predict_posterior

__version__ = "0.1.0"

__all__ = [
    "CalibrationProblem",
    "KernelSpec",
    "McmcConfig",
    "MleResult",
    "MultiSourceProblem",
    "OptimizerFailure",
    "PosteriorSamples",
    "PredictionResult",
    "Source",
    "bind_emulator",
    "corr_matrix",
    "cross_corr",
    "emu_predict",
    "fit_ppgasp",
    "fit_scalar",
    "load_emulator",
    "ms_mcmc",
    "ms_predict",
    "predict_plugin",
    "predict_posterior",
    "profile_loglik",
    "run_mcmc",
    "run_mle",
    "save_emulator",
    "scaled_corr",
    "stack_sources",
]
