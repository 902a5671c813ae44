"""One entry point per estimator: fit, post-process and (for MGPS methods) refit.

Used by the CLI and the benchmark grid so both follow the same workflow.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import MultiStudyDataset, PreprocessSpec, preprocess
from .errors import ConfigError
from .gibbs import MgpsHyper, fit_bmsfa, fit_ind_fa, fit_stack_fa, mgps_point_estimates
from .mcmc import McmcControl
from .momss import fit_momss, momss_point_estimates
from .pfa import fit_pfa, pfa_point_estimates
from .postprocess import FitResult, order_by_variance
from .priors import IbpConfig, NlpSpikeSlabConfig
from .sufa import HmcConfig, fit_sufa, sufa_point_estimates
from .tetris import SharingMatrix, fit_tetris, tetris_decompose

METHODS = ("stackfa", "indfa", "pfa", "momss", "sufa", "bmsfa", "tetris")
TWO_PASS = ("stackfa", "indfa", "bmsfa")


@dataclass(frozen=True)
class MethodConfig:
    """Hyperparameters for any method; each method reads the fields it needs.

    Defaults follow common reference-software defaults. ``J`` may be a single
    count (used for every study) or one count per study; when unset, BMSFA
    uses 2, Ind FA uses K and SUFA uses floor(K / S).
    """

    K: int = 6
    J: object = None
    nrun: int = 10000
    burn: int = 8000
    thin: int = 1
    seed: int = 0
    evd_threshold: float = 0.05
    two_pass: bool = True
    # MGPS and residual priors
    kappa: float = 3.0
    a1: float = 2.1
    a2: float = 3.1
    psi_shape: float = 1.0
    psi_rate: float = 0.3
    # PFA
    cutoff: float = 1e-3
    alpha_q: float | None = None
    allow_large_p: bool = False
    # MOM-SS
    tau0: float = 0.026
    tau1: float = 0.28
    a_zeta: float = 1.0
    b_zeta: float = 1.0
    max_iter: int = 500
    tol: float = 1e-6
    inclusion_threshold: float = 0.5
    # SUFA
    hmc_steps: int = 20
    hmc_stepsize: float = 0.01
    hmc_target: float = 0.8
    j_remainder: str = "drop"
    # Tetris
    alpha_t: float | None = None
    beta_t: float = 1.0
    k_init: int = 5
    mode_radius: int = 0
    time_budget: float | None = None
    checkpoint: str | None = None
    resume: bool = False
    fixed_t: tuple | None = None

    @property
    def ctrl(self) -> McmcControl:
        return McmcControl(self.nrun, self.burn, self.thin, self.seed)

    @property
    def hyper(self) -> MgpsHyper:
        return MgpsHyper(self.kappa, self.a1, self.a2, self.psi_shape, self.psi_rate)

    def j_list(self, S: int, default: int | None = None) -> list:
        J = self.J if self.J is not None else default
        if J is None:
            raise ConfigError("this method needs J")
        if np.isscalar(J):
            return [int(J)] * S
        J = [int(j) for j in J]
        if len(J) != S:
            raise ConfigError(f"J has {len(J)} entries for {S} studies")
        return J


def prepare_data(method: str, ds: MultiStudyDataset, spec: PreprocessSpec | None = None) -> MultiStudyDataset:
    """Apply ``spec`` per study; MOM-SS keeps only the log transform since its intercepts absorb the means."""
    spec = spec or PreprocessSpec()
    if method == "momss":
        spec = replace(spec, center=False, scale=False)
    return preprocess(ds, spec)


@dataclass
class MethodRun:
    result: FitResult
    meta: dict = field(default_factory=dict)


def _mgps_fit(method, ds, K, J, cfg):
    ctrl, hyper = cfg.ctrl, cfg.hyper
    if method == "stackfa":
        fit = fit_stack_fa(ds, K, ctrl, hyper)
    elif method == "indfa":
        fit = fit_ind_fa(ds, J, ctrl, hyper)
    else:
        fit = fit_bmsfa(ds, K, J, ctrl, hyper)
    return mgps_point_estimates(fit, cfg.evd_threshold)


def order_columns(res: FitResult) -> FitResult:
    """Sort common and study-specific loading columns by descending explained variance."""
    phi = order_by_variance(res.phi) if res.phi is not None else None
    lam = tuple(order_by_variance(l) for l in res.lambda_s) if res.lambda_s is not None else None
    return replace(res, phi=phi, lambda_s=lam)


def run_method(method: str, ds: MultiStudyDataset, cfg: MethodConfig) -> MethodRun:
    """Fit ``method`` on already-preprocessed data and return its FitResult.

    For Stack FA, Ind FA and BMSFA the first pass uses (K, J) from ``cfg``;
    when ``cfg.two_pass`` holds, the model is refit at the EVD-selected counts.
    A selected count of zero is not floored: the first pass is kept and a
    warning is issued. Loading columns are finally sorted by explained variance.
    """
    run = _run_method(method, ds, cfg)
    run.result = order_columns(run.result)
    return run


def _run_method(method: str, ds: MultiStudyDataset, cfg: MethodConfig) -> MethodRun:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    S = ds.S
    meta = {"method": method}
    if method in TWO_PASS:
        K = cfg.K if method != "indfa" else 0
        J = cfg.j_list(S, 2 if method == "bmsfa" else cfg.K) if method != "stackfa" else [0] * S
        res = _mgps_fit(method, ds, K, J, cfg)
        k1 = res.extras.get("suggested_k")
        j1 = res.extras.get("suggested_j")
        meta["first_pass"] = {"K": K if method != "indfa" else None, "J": J if method != "stackfa" else None,
                              "suggested_k": k1, "suggested_j": list(j1) if j1 is not None else None}
        if cfg.two_pass:
            K2 = k1 if k1 is not None else 0
            J2 = list(j1) if j1 is not None else [0] * S
            zero_k = method != "indfa" and K2 == 0
            zero_j = method != "stackfa" and any(j == 0 for j in J2)
            if zero_k or (method == "indfa" and zero_j):
                warnings.warn("EVD selected zero factors; keeping the first-pass fit", RuntimeWarning, stacklevel=2)
                meta["refit"] = None
            else:
                if method == "bmsfa" and zero_j:
                    warnings.warn("EVD selected zero specific factors for some studies", RuntimeWarning, stacklevel=2)
                res = _mgps_fit(method, ds, K2, J2, cfg)
                meta["refit"] = {"K": K2 if method != "indfa" else None, "J": J2 if method != "stackfa" else None}
        return MethodRun(res, meta)
    if method == "pfa":
        fit = fit_pfa(ds, cfg.K, cfg.ctrl, cutoff=cfg.cutoff, alpha_q=cfg.alpha_q, allow_large_p=cfg.allow_large_p)
        res = pfa_point_estimates(fit)
        meta["modal_k"] = res.k_hat
        return MethodRun(res, meta)
    if method == "momss":
        nlp = NlpSpikeSlabConfig(cfg.tau0, cfg.tau1, cfg.a_zeta, cfg.b_zeta)
        fit = fit_momss(ds, cfg.K, nlp, cfg.max_iter, cfg.tol, seed=cfg.seed)
        res = momss_point_estimates(fit, cfg.inclusion_threshold)
        meta.update({"iterations": fit.n_iter, "init_choice": fit.init_choice, "converged": bool(fit.converged),
                     "trace_min_step": float(np.min(np.diff(fit.trace))) if len(fit.trace) > 1 else 0.0})
        return MethodRun(res, meta)
    if method == "sufa":
        J = None if cfg.J is None else cfg.j_list(S)
        hmc = HmcConfig(cfg.hmc_steps, cfg.hmc_stepsize, cfg.hmc_target)
        fit = fit_sufa(ds, cfg.K, cfg.ctrl, J=J, hmc=hmc, remainder=cfg.j_remainder)
        res = sufa_point_estimates(fit)
        meta.update({"j_alloc": list(fit.j_alloc), **fit.diagnostics})
        return MethodRun(res, meta)
    ibp = IbpConfig(cfg.alpha_t if cfg.alpha_t is not None else 1.25 * S, cfg.beta_t)
    fixed = SharingMatrix(np.array(cfg.fixed_t)) if cfg.fixed_t is not None else None
    fit = fit_tetris(ds, ibp, cfg.ctrl, fixed_t=fixed, k_init=cfg.k_init, radius=cfg.mode_radius,
                     time_budget=cfg.time_budget, checkpoint=cfg.checkpoint, resume=cfg.resume)
    res = tetris_decompose(fit)
    meta.update({"t_hat": fit.t_hat.t.tolist(), **fit.diagnostics})
    return MethodRun(res, meta)
