"""Bayesian integrative factor models for multi-study data.

Seven estimators (Stack FA, Ind FA, PFA, MOM-SS, SUFA, BMSFA, Tetris), shared
post-processing, and a simulation benchmark harness under ``bifa.bench``.
"""

__version__ = "0.1.0"

from .data import MultiStudyDataset, PreprocessSpec, load_dataset, preprocess, save_dataset
from .errors import (
    BifaError,
    ConfigError,
    DimensionError,
    DomainError,
    GuardRefusal,
    NumericError,
    ParseError,
    SchemaError,
    TimeBudgetExceeded,
    TruncationError,
)
from .gibbs import fit_bmsfa, fit_ind_fa, fit_stack_fa, mgps_point_estimates
from .mcmc import McmcControl
from .methods import METHODS, MethodConfig, run_method
from .momss import fit_momss, momss_effective_k, momss_point_estimates
from .pfa import fit_pfa, pfa_point_estimates
from .postprocess import FitResult, evd_num_factors, op_align, spectral_loadings, varimax
from .priors import IbpConfig, NlpSpikeSlabConfig
from .sufa import fit_sufa, sufa_point_estimates, sufa_select_kmax
from .tetris import SharingMatrix, choose_sharing_mode, fit_tetris, tetris_decompose
