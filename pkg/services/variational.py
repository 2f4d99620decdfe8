"""Mean-field variational posterior over GP hyperparameters.

Each hyperparameter block (amplitude, ARD lengthscales, noise variance,
inducing points) gets an independent factor: log-normal for the positive
blocks, normal for the inducing coordinates. Scales are stored as
log-scales. The ELBO is a Monte Carlo average of the FITC log marginal over
reparameterized draws minus the analytic KL to the prior, and is maximized by
stochastic gradient ascent with global-norm clipping.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
import torch

from .errors import Divergence, FamilyMismatch, ValidationError
from .gp_core import DTYPE, HyperparameterSet, Inputs, as_tensor, default_inducing_count, gp_log_marginal
from .seeding import derive_seed

logger = logging.getLogger(__name__)

LOGNORMAL = "lognormal"
NORMAL = "normal"
FAMILIES = (LOGNORMAL, NORMAL)
BLOCKS = ("amplitude", "lengthscales", "noise_var", "inducing")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True, eq=False)
class FactorParams:
    """Independent factors sharing one family; loc and log_scale have equal shapes."""

    family: str
    loc: torch.Tensor
    log_scale: torch.Tensor

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown factor family '{self.family}'")
        loc, log_scale = as_tensor(self.loc), as_tensor(self.log_scale)
        if loc.shape != log_scale.shape:
            raise ValueError(f"loc shape {tuple(loc.shape)} differs from scale shape {tuple(log_scale.shape)}")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "log_scale", log_scale)

    @classmethod
    def create(cls, family: str, loc, scale) -> "FactorParams":
        loc = as_tensor(loc)
        scale = torch.broadcast_to(as_tensor(scale), loc.shape)
        if not bool((scale > 0).all()):
            raise ValueError("factor scales must be strictly positive")
        return cls(family, loc, torch.log(scale))

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    @property
    def size(self) -> int:
        return int(self.loc.numel())

    def transform(self, eps: torch.Tensor) -> torch.Tensor:
        z = self.loc + self.scale * eps
        return torch.exp(z) if self.family == LOGNORMAL else z

    def mode(self) -> torch.Tensor:
        if self.family == LOGNORMAL:
            return torch.exp(self.loc - self.scale ** 2)
        return self.loc


@dataclass(frozen=True, eq=False)
class VariationalPosterior:
    amplitude: FactorParams
    lengthscales: FactorParams
    noise_var: FactorParams
    inducing: FactorParams

    def factors(self) -> Dict[str, FactorParams]:
        return {name: getattr(self, name) for name in BLOCKS}

    @property
    def n_parameters(self) -> int:
        return 2 * sum(f.size for f in self.factors().values())

    def to_vector(self) -> torch.Tensor:
        """Flat (loc, log_scale) vector, block by block in BLOCKS order."""
        parts = []
        for f in self.factors().values():
            parts.append(f.loc.reshape(-1))
            parts.append(f.log_scale.reshape(-1))
        return torch.cat(parts)

    def from_vector(self, vector: torch.Tensor) -> "VariationalPosterior":
        """Same structure with parameters read from ``vector``; keeps autograd links."""
        vector = as_tensor(vector)
        if vector.numel() != self.n_parameters:
            raise ValueError(f"expected {self.n_parameters} parameters, got {vector.numel()}")
        blocks, start = {}, 0
        for name, f in self.factors().items():
            n = f.size
            loc = vector[start:start + n].reshape(f.loc.shape)
            log_scale = vector[start + n:start + 2 * n].reshape(f.loc.shape)
            blocks[name] = FactorParams(f.family, loc, log_scale)
            start += 2 * n
        return VariationalPosterior(**blocks)

    def detach(self) -> "VariationalPosterior":
        return self.from_vector(self.to_vector().detach().clone())

    def to_dict(self) -> dict:
        return {
            name: {"family": f.family, "loc": f.loc.detach().tolist(), "scale": f.scale.detach().tolist()}
            for name, f in self.factors().items()
        }


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-2
    iterations: int = 500
    mc_draws: int = 10
    clip_norm: float = 10.0
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate", "must be non-negative")
        if self.iterations < 1:
            raise ValidationError("iterations", "must be at least 1")
        if self.mc_draws < 1:
            raise ValidationError("mc_draws", "must be at least 1")
        if not self.clip_norm > 0:
            raise ValidationError("clip_norm", "must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError("optimizer", f"must be one of {OPTIMIZERS}")


@dataclass
class OptimizationTrace:
    iteration: List[int] = field(default_factory=list)
    elbo: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)
    clipped_norm: List[float] = field(default_factory=list)

    def append(self, iteration: int, elbo: float, grad_norm: float, clipped_norm: float):
        self.iteration.append(iteration)
        self.elbo.append(elbo)
        self.grad_norm.append(grad_norm)
        self.clipped_norm.append(clipped_norm)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "iteration": self.iteration,
                "elbo": self.elbo,
                "grad_norm": self.grad_norm,
                "clipped_norm": self.clipped_norm,
            }
        )

    def save_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


@dataclass(frozen=True, eq=False)
class VariationalFit:
    posterior: VariationalPosterior
    trace: OptimizationTrace


def default_prior(
    X_emb: Inputs,
    n_inducing: Optional[int] = None,
    seed: int = 0,
    location: float = 1.0,
    scale: float = 1.0,
) -> VariationalPosterior:
    """Log-normal(location, scale) on amplitude, lengthscales and noise variance;
    normal(scale) on inducing coordinates centred on a seeded subset of rows."""
    rows = as_tensor(X_emb).detach()
    d, dim = rows.shape
    m = n_inducing or default_inducing_count(d)
    if m > d:
        raise ValueError(f"cannot pick {m} inducing points from {d} embedding rows")
    picked = np.sort(np.random.default_rng(seed).choice(d, size=m, replace=False))
    centres = rows[torch.as_tensor(picked)].clone()
    return VariationalPosterior(
        amplitude=FactorParams.create(LOGNORMAL, torch.tensor(float(location), dtype=DTYPE), scale),
        lengthscales=FactorParams.create(LOGNORMAL, torch.full((dim,), float(location), dtype=DTYPE), scale),
        noise_var=FactorParams.create(LOGNORMAL, torch.tensor(float(location), dtype=DTYPE), scale),
        inducing=FactorParams.create(NORMAL, centres, scale),
    )


def draw_noise(q: VariationalPosterior, seed: int) -> Dict[str, torch.Tensor]:
    generator = torch.Generator().manual_seed(int(seed))
    return {
        name: torch.randn(f.loc.shape, generator=generator, dtype=DTYPE) for name, f in q.factors().items()
    }


def transform(q: VariationalPosterior, noise: Dict[str, torch.Tensor]) -> HyperparameterSet:
    return HyperparameterSet(**{name: f.transform(noise[name]) for name, f in q.factors().items()})


def sample_reparameterized(q: VariationalPosterior, seed: int) -> HyperparameterSet:
    return transform(q, draw_noise(q, seed))


def map_point(q: VariationalPosterior) -> HyperparameterSet:
    """Per-factor mode: exp(loc - scale^2) for log-normal, loc for normal."""
    return HyperparameterSet(**{name: f.mode() for name, f in q.factors().items()})


def with_scale(q: VariationalPosterior, scale: float) -> VariationalPosterior:
    """Copy of ``q`` with every factor scale set to ``scale``."""
    return VariationalPosterior(
        **{name: FactorParams.create(f.family, f.loc, scale) for name, f in q.factors().items()}
    )


def kl_factor(q: FactorParams, p: FactorParams) -> torch.Tensor:
    """KL(q || p) summed over the factors of one block.

    Log-normal and normal factors share the closed form
    log(s_p / s_q) + (s_q^2 + (mu_q - mu_p)^2) / (2 s_p^2) - 1/2.
    """
    if q.family != p.family:
        raise FamilyMismatch(f"cannot compare a {q.family} factor with a {p.family} factor")
    if q.loc.shape != p.loc.shape:
        raise ValueError(f"factor shapes differ: {tuple(q.loc.shape)} vs {tuple(p.loc.shape)}")
    var_ratio = torch.exp(2.0 * (q.log_scale - p.log_scale))
    mean_term = (q.loc - p.loc) ** 2 / torch.exp(2.0 * p.log_scale)
    return ((p.log_scale - q.log_scale) + 0.5 * (var_ratio + mean_term) - 0.5).sum()


def kl_total(q: VariationalPosterior, priors: VariationalPosterior) -> torch.Tensor:
    return sum(kl_factor(q_f, p_f) for q_f, p_f in zip(q.factors().values(), priors.factors().values()))


def _elbo_tensor(q, priors, targets, X_emb, mc_draws: int, seed: int) -> torch.Tensor:
    kl = kl_total(q, priors)
    if mc_draws == 0:
        return -kl
    expected = sum(
        gp_log_marginal(targets, X_emb, sample_reparameterized(q, derive_seed(seed, s)))
        for s in range(mc_draws)
    ) / mc_draws
    return expected - kl


def elbo_estimate(
    q: VariationalPosterior,
    priors: VariationalPosterior,
    targets,
    X_emb: Inputs,
    mc_draws: int = 10,
    seed: int = 0,
) -> float:
    """Monte Carlo ELBO; ``mc_draws=0`` leaves only the -KL term."""
    if mc_draws < 0:
        raise ValueError("mc_draws must be non-negative")
    with torch.no_grad():
        return float(_elbo_tensor(q, priors, targets, X_emb, mc_draws, seed))


def elbo_gradient(
    q: VariationalPosterior,
    priors: VariationalPosterior,
    targets,
    X_emb: Inputs,
    mc_draws: int = 10,
    seed: int = 0,
) -> np.ndarray:
    """Pathwise gradient of ``elbo_estimate`` with respect to ``q.to_vector()``.

    Differentiates with respect to (loc, log_scale), at the same noise draws
    ``elbo_estimate`` uses for this seed.
    """
    vector = q.to_vector().detach().clone().requires_grad_(True)
    elbo = _elbo_tensor(q.from_vector(vector), priors, targets, X_emb, mc_draws, seed)
    (grad,) = torch.autograd.grad(elbo, vector)
    return grad.numpy()


def _make_optimizer(params: List[torch.Tensor], cfg: OptimizerConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, maximize=True)
    return torch.optim.SGD(params, lr=cfg.learning_rate, maximize=True)


def optimize_elbo(
    priors: VariationalPosterior,
    targets,
    X_emb: Inputs,
    cfg: OptimizerConfig,
    init: Optional[VariationalPosterior] = None,
) -> VariationalFit:
    """Stochastic gradient ascent on the ELBO, starting from ``init`` (the prior by default).

    The full gradient is clipped to global norm ``cfg.clip_norm`` before every
    step; iteration ``t`` uses draw seed ``derive_seed(cfg.seed, t)``.
    """
    start = init if init is not None else priors
    vector = start.to_vector().detach().clone().requires_grad_(True)
    optimizer = _make_optimizer([vector], cfg)
    trace = OptimizationTrace()

    for iteration in range(cfg.iterations):
        optimizer.zero_grad()
        elbo = _elbo_tensor(
            start.from_vector(vector), priors, targets, X_emb, cfg.mc_draws, derive_seed(cfg.seed, iteration)
        )
        if not bool(torch.isfinite(elbo)):
            raise Divergence(iteration)
        elbo.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_([vector], cfg.clip_norm))
        if not math.isfinite(grad_norm):
            raise Divergence(iteration, f"gradient became non-finite at iteration {iteration}")
        clipped_norm = float(vector.grad.norm())
        trace.append(iteration, float(elbo.detach()), grad_norm, clipped_norm)
        optimizer.step()
        if iteration % 100 == 0:
            logger.debug(f"ELBO iteration {iteration}: {float(elbo.detach()):.4f} (grad norm {grad_norm:.3f})")

    return VariationalFit(start.from_vector(vector.detach().clone()), trace)


def smoothed(values: List[float], window: int = 50) -> np.ndarray:
    """Trailing moving average, used to read noisy ELBO traces."""
    series = pd.Series(values, dtype=np.float64)
    return series.rolling(window, min_periods=1).mean().to_numpy()


def to_prior_location(value: Union[float, str]) -> float:
    """Accept a number or the string ``"e"`` for the alternative prior location."""
    if isinstance(value, str):
        if value.strip().lower() == "e":
            return math.e
        raise ValidationError("prior_location", f"expected a number or 'e', got '{value}'")
    return float(value)

