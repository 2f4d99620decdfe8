"""Squared-exponential ARD kernel and FITC sparse Gaussian-process algebra.

All heavy lifting runs in torch float64 so the marginal likelihood can be
differentiated with respect to every hyperparameter.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import torch

from .errors import DimensionMismatch, NumericalFailure
from .series_core import EmbeddedSeries

logger = logging.getLogger(__name__)

DTYPE = torch.float64
# multiples of the mean diagonal
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
# exact factorization first for the inner solves
SOLVE_LADDER = (0.0,) + JITTER_LADDER
SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-8
MAX_INDUCING = 32

Inputs = Union[EmbeddedSeries, np.ndarray, torch.Tensor]


def as_tensor(value) -> torch.Tensor:
    """float64 tensor view; tensors already in float64 keep their autograd graph."""
    if isinstance(value, EmbeddedSeries):
        value = value.rows
    if isinstance(value, torch.Tensor):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64).copy(), dtype=DTYPE)


@dataclass(frozen=True, eq=False)
class HyperparameterSet:
    amplitude: torch.Tensor
    lengthscales: torch.Tensor
    noise_var: torch.Tensor
    inducing: torch.Tensor

    def __post_init__(self):
        amplitude = as_tensor(self.amplitude).reshape(())
        lengthscales = as_tensor(self.lengthscales).reshape(-1)
        noise_var = as_tensor(self.noise_var).reshape(())
        inducing = as_tensor(self.inducing)
        if inducing.ndim == 1:
            inducing = inducing.reshape(-1, 1)
        if inducing.ndim != 2 or inducing.shape[0] < 1:
            raise DimensionMismatch(f"inducing points must form an M x D matrix with M >= 1, got {tuple(inducing.shape)}")
        if inducing.shape[1] != lengthscales.shape[0]:
            raise DimensionMismatch(
                f"inducing points have dimension {inducing.shape[1]}, lengthscales {lengthscales.shape[0]}"
            )
        with torch.no_grad():
            if not (amplitude > 0 and noise_var > 0 and bool((lengthscales > 0).all())):
                raise ValueError("amplitude, lengthscales and noise_var must be strictly positive")
            if not bool(torch.isfinite(inducing).all()):
                raise ValueError("inducing points must be finite")
        object.__setattr__(self, "amplitude", amplitude)
        object.__setattr__(self, "lengthscales", lengthscales)
        object.__setattr__(self, "noise_var", noise_var)
        object.__setattr__(self, "inducing", inducing)

    @property
    def dimension(self) -> int:
        return int(self.lengthscales.shape[0])

    @property
    def n_inducing(self) -> int:
        return int(self.inducing.shape[0])

    def detach(self) -> "HyperparameterSet":
        return HyperparameterSet(
            self.amplitude.detach(), self.lengthscales.detach(), self.noise_var.detach(), self.inducing.detach()
        )

    def to_dict(self) -> dict:
        return {
            "amplitude": float(self.amplitude),
            "lengthscales": self.lengthscales.detach().tolist(),
            "noise_var": float(self.noise_var),
            "inducing": self.inducing.detach().tolist(),
        }


@dataclass(frozen=True, eq=False)
class PosteriorCovariance:
    matrix: torch.Tensor
    log_det: float
    jitter: float = 0.0


def _check_dims(rows: torch.Tensor, theta: HyperparameterSet, label: str):
    if rows.ndim != 2 or rows.shape[1] != theta.dimension:
        raise DimensionMismatch(
            f"{label} has shape {tuple(rows.shape)} but the kernel expects vectors of dimension {theta.dimension}"
        )


def kernel_matrix(A: Inputs, B: Inputs, theta: HyperparameterSet) -> torch.Tensor:
    """K[i, j] = sigma^2 exp(-sum_k (a_ik - b_jk)^2 / (2 l_k^2))."""
    a, b = as_tensor(A), as_tensor(B)
    _check_dims(a, theta, "left input")
    _check_dims(b, theta, "right input")
    scaled = (a[:, None, :] - b[None, :, :]) / theta.lengthscales
    return theta.amplitude ** 2 * torch.exp(-0.5 * (scaled ** 2).sum(dim=-1))


def se_ard_kernel(a, b, theta: HyperparameterSet) -> float:
    a, b = as_tensor(a).reshape(1, -1), as_tensor(b).reshape(1, -1)
    return float(kernel_matrix(a, b, theta)[0, 0])


def jittered_cholesky(matrix: torch.Tensor, ladder: Tuple[float, ...] = SOLVE_LADDER) -> Tuple[torch.Tensor, float]:
    """Lower Cholesky factor of ``matrix + jitter * I`` and the jitter it took.

    ``jitter`` walks ``ladder`` in units of the mean diagonal until the
    factorization succeeds.
    """
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {tuple(matrix.shape)}")
    if not bool(torch.isfinite(matrix).all()):
        raise NumericalFailure("matrix contains NaN or Inf")
    n = matrix.shape[0]
    scale = float(matrix.detach().diagonal().mean().abs()) or 1.0
    eye = torch.eye(n, dtype=matrix.dtype)
    for level in ladder:
        jitter = level * scale
        factor, info = torch.linalg.cholesky_ex(matrix + jitter * eye if jitter else matrix)
        if int(info) == 0 and bool(torch.isfinite(factor).all()):
            if level > ladder[0]:
                logger.debug(f"Cholesky of a {n}x{n} matrix needed jitter {jitter:.3e}")
            return factor, jitter
    raise NumericalFailure(f"Cholesky failed on a {n}x{n} matrix even with jitter {ladder[-1] * scale:.3e}")


def _log_det_tensor(matrix: torch.Tensor) -> Tuple[torch.Tensor, float]:
    factor, jitter = jittered_cholesky(matrix, JITTER_LADDER)
    return 2.0 * torch.log(factor.diagonal()).sum(), jitter


def log_det_psd(matrix) -> float:
    """log|M| of a symmetric PSD matrix, eigenvalues down to -1e-8 (relative) tolerated."""
    m = as_tensor(matrix).detach()
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {tuple(m.shape)}")
    if not bool(torch.isfinite(m).all()):
        raise NumericalFailure("matrix contains NaN or Inf")
    size = max(1.0, float(m.abs().max())) if m.numel() else 1.0
    if float((m - m.T).abs().max()) > SYMMETRY_TOL * size:
        raise NumericalFailure("matrix is not symmetric")
    if float(torch.linalg.eigvalsh(m).min()) < -PSD_TOL * size:
        raise NumericalFailure("matrix is not positive semidefinite")
    return float(_log_det_tensor(m)[0])


@dataclass(frozen=True, eq=False)
class _FitcFactors:
    V: torch.Tensor  # L_mm^{-1} K_mn, so Q = V^T V
    diag_gap: torch.Tensor  # diag(K_nn - Q), clamped at zero
    lam: torch.Tensor  # diag_gap + noise_var


def _fitc_factors(X: Inputs, theta: HyperparameterSet) -> _FitcFactors:
    x = as_tensor(X)
    _check_dims(x, theta, "embedding")
    k_mm = kernel_matrix(theta.inducing, theta.inducing, theta)
    k_mn = kernel_matrix(theta.inducing, x, theta)
    l_mm, _ = jittered_cholesky(k_mm)
    V = torch.linalg.solve_triangular(l_mm, k_mn, upper=False)
    diag_gap = torch.clamp(theta.amplitude ** 2 - (V ** 2).sum(dim=0), min=0.0)
    return _FitcFactors(V, diag_gap, diag_gap + theta.noise_var)


def fitc_prior_cov(X: Inputs, theta: HyperparameterSet) -> torch.Tensor:
    """The FITC prior Q + diag(K_nn - Q)."""
    f = _fitc_factors(X, theta)
    return f.V.T @ f.V + torch.diag(f.diag_gap)


def sparse_posterior_cov(X: Inputs, theta: HyperparameterSet) -> PosteriorCovariance:
    """Posterior covariance of the latent targets under the FITC prior.

    Evaluated as diag(s D / lam) + W^T W with A = I + V lam^{-1} V^T and
    W = chol(A)^{-1} V diag(s / lam), which is exact for the FITC prior and
    never subtracts two large matrices.
    """
    f = _fitc_factors(X, theta)
    s = theta.noise_var
    m = f.V.shape[0]
    A = torch.eye(m, dtype=DTYPE) + (f.V / f.lam) @ f.V.T
    l_a, _ = jittered_cholesky(A)
    W = torch.linalg.solve_triangular(l_a, f.V * (s / f.lam), upper=False)
    matrix = torch.diag(s * f.diag_gap / f.lam) + W.T @ W
    matrix = 0.5 * (matrix + matrix.T)
    log_det, jitter = _log_det_tensor(matrix)
    return PosteriorCovariance(matrix, float(log_det), jitter)


def gp_log_marginal(targets, X: Inputs, theta: HyperparameterSet) -> torch.Tensor:
    """log N(targets | 0, K_fitc + noise_var I) as a differentiable 0-dim tensor."""
    y = as_tensor(targets).reshape(-1)
    f = _fitc_factors(X, theta)
    d = f.V.shape[1]
    if y.shape[0] != d:
        raise DimensionMismatch(f"{y.shape[0]} targets for {d} embedding rows")
    if not bool(torch.isfinite(y).all()):
        raise ValueError("targets contain NaN or Inf")
    m = f.V.shape[0]
    A = torch.eye(m, dtype=DTYPE) + (f.V / f.lam) @ f.V.T
    l_a, _ = jittered_cholesky(A)
    beta = torch.linalg.solve_triangular(l_a, (f.V @ (y / f.lam)).reshape(-1, 1), upper=False).reshape(-1)
    quad = (y ** 2 / f.lam).sum() - (beta ** 2).sum()
    log_det = 2.0 * torch.log(l_a.diagonal()).sum() + torch.log(f.lam).sum()
    return -0.5 * (quad + log_det + d * math.log(2.0 * math.pi))


# Dense O(d^3) references


def dense_posterior_cov(X: Inputs, theta: HyperparameterSet) -> PosteriorCovariance:
    """K - K (K + noise_var I)^{-1} K without any inducing-point approximation."""
    x = as_tensor(X)
    K = kernel_matrix(x, x, theta)
    C = K + theta.noise_var * torch.eye(K.shape[0], dtype=DTYPE)
    l_c, _ = jittered_cholesky(C)
    half = torch.linalg.solve_triangular(l_c, K, upper=False)
    matrix = K - half.T @ half
    matrix = 0.5 * (matrix + matrix.T)
    log_det, jitter = _log_det_tensor(matrix)
    return PosteriorCovariance(matrix, float(log_det), jitter)


def dense_log_marginal(targets, X: Inputs, theta: HyperparameterSet) -> torch.Tensor:
    y = as_tensor(targets).reshape(-1)
    x = as_tensor(X)
    K = kernel_matrix(x, x, theta)
    C = K + theta.noise_var * torch.eye(K.shape[0], dtype=DTYPE)
    l_c, _ = jittered_cholesky(C)
    alpha = torch.linalg.solve_triangular(l_c, y.reshape(-1, 1), upper=False).reshape(-1)
    log_det = 2.0 * torch.log(l_c.diagonal()).sum()
    return -0.5 * ((alpha ** 2).sum() + log_det + y.shape[0] * math.log(2.0 * math.pi))


def default_inducing_count(d: int) -> int:
    return max(1, min(MAX_INDUCING, d // 2))
