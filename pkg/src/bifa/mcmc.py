"""MCMC control settings and small linear-algebra samplers shared across chains."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class McmcControl:
    """Iteration counts and seed; draws kept are iterations burn, burn+thin, ... < nrun."""

    nrun: int = 10000
    burn: int = 8000
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.burn < self.nrun):
            raise ConfigError(f"need 0 <= burn < nrun, got burn={self.burn}, nrun={self.nrun}")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")

    @property
    def n_keep(self) -> int:
        return len(range(self.burn, self.nrun, self.thin))

    def keep(self, it: int) -> bool:
        return it >= self.burn and (it - self.burn) % self.thin == 0


def data_rng(seed: int, *arrays) -> np.random.Generator:
    """Generator keyed on the seed and the data bytes, so identical inputs give identical streams."""
    key = [int(seed) & 0xFFFFFFFF]
    for a in arrays:
        key.append(zlib.crc32(np.ascontiguousarray(a, dtype=float).tobytes()))
    return np.random.default_rng(key)


def inv_gamma_draw(shape, rate, rng):
    """Inverse-gamma draws via the reciprocal of Gamma(shape, rate)."""
    return 1.0 / rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float))


def chol_jitter(a, jitter: float = 1e-8):
    """Lower Cholesky factor; retries with growing diagonal jitter on failure."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    scale = max(1.0, float(np.mean(np.abs(np.diagonal(a, axis1=-2, axis2=-1)))))
    eye = np.eye(a.shape[-1])
    for k in range(8):
        try:
            return np.linalg.cholesky(a + jitter * 10**k * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericError("Cholesky factorisation failed even with jitter")


def draw_rows_from_precision(prec, rhs, rng):
    """Independent draws x_p ~ N(prec_p^{-1} rhs_p, prec_p^{-1}) for stacked (P, K, K) precisions."""
    L = chol_jitter(prec)
    z = rng.standard_normal(rhs.shape)
    w = np.linalg.solve(L, rhs[..., None])[..., 0] + z
    return np.linalg.solve(np.swapaxes(L, -1, -2), w[..., None])[..., 0]


def draw_factors(Y, B, psi, rng):
    """Rows f_i ~ N(M^{-1} B' Psi^{-1} y_i, M^{-1}) with M = I + B' Psi^{-1} B."""
    D = B.shape[1]
    if D == 0:
        return np.zeros((Y.shape[0], 0))
    Bw = B / psi[:, None]
    M = np.eye(D) + B.T @ Bw
    L = chol_jitter(M)
    rhs = Y @ Bw
    w = linalg.solve_triangular(L, rhs.T, lower=True) + rng.standard_normal((D, Y.shape[0]))
    return linalg.solve_triangular(L.T, w, lower=False).T
