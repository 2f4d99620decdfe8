"""Coupling statistic, permutation nulls, p-values and specificity.

``raw_statistic(x_emb, y_emb, theta_x, theta_y)`` is
log|Sigma_{X|Y}| - log|Sigma_{Y|X}|, where Sigma_{Y|X} is the posterior
covariance of the GP over x's state space. It grows when x's state space
is the one recovered from y, i.e. when y drives x. A directed test
``source -> target`` therefore reports K(target, source).
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import DimensionMismatch, EmptyNull, NoNullTests, ValidationError
from .gp_core import HyperparameterSet, sparse_posterior_cov
from .seeding import derive_seed
from .series_core import EmbeddedSeries, EmbeddingConfig, TimeSeries, embed_pair, permute_series
from .variational import (
    OptimizerConfig,
    VariationalFit,
    VariationalPosterior,
    default_prior,
    map_point,
    optimize_elbo,
    sample_reparameterized,
)

logger = logging.getLogger(__name__)

GPCCM = "gpccm"
VGPCCM = "vgpccm"
MODES = (GPCCM, VGPCCM)
HYPERFIT_TARGETS = ("cross", "self")
NORM_DIVISORS = ("d", "N")

# seed stream tags
_PRIOR, _FIT, _OBSERVED, _PERMUTE, _NULL_DRAW = range(5)


@dataclass(frozen=True)
class TestConfig:
    n_permutations: int = 30
    alpha: float = 0.05
    mc_draws_observed: int = 10
    mode: str = VGPCCM
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    seed: int = 0
    norm_divisor: str = "d"
    hyperfit_target: str = "cross"
    n_inducing: Optional[int] = None
    prior_location: float = 1.0
    prior_scale: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    # not a test case
    __test__ = False

    def __post_init__(self):
        if self.n_permutations < 1:
            raise ValidationError("n_permutations", "must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha", "must lie strictly between 0 and 1")
        if self.mc_draws_observed < 1:
            raise ValidationError("mc_draws_observed", "must be at least 1")
        if self.mode not in MODES:
            raise ValidationError("mode", f"must be one of {MODES}")
        if self.norm_divisor not in NORM_DIVISORS:
            raise ValidationError("norm_divisor", f"must be one of {NORM_DIVISORS}")
        if self.hyperfit_target not in HYPERFIT_TARGETS:
            raise ValidationError("hyperfit_target", f"must be one of {HYPERFIT_TARGETS}")
        if self.n_inducing is not None and self.n_inducing < 1:
            raise ValidationError("n_inducing", "must be at least 1")
        if not self.prior_scale > 0:
            raise ValidationError("prior_scale", "must be positive")


@dataclass(frozen=True)
class CouplingTestResult:
    direction: str
    mode: str
    k_observed: float
    null_samples: Tuple[float, ...]
    p_value: float
    reject_h0: bool

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "mode": self.mode,
            "k_observed": self.k_observed,
            "null_samples": list(self.null_samples),
            "p_value": self.p_value,
            "reject": self.reject_h0,
        }


@dataclass(frozen=True)
class ConfusionCounts:
    correct_accepts: int = 0
    incorrect_rejects: int = 0

    def __post_init__(self):
        if self.correct_accepts < 0 or self.incorrect_rejects < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.correct_accepts + other.correct_accepts, self.incorrect_rejects + other.incorrect_rejects
        )

    @property
    def total(self) -> int:
        return self.correct_accepts + self.incorrect_rejects


def raw_statistic(
    x_emb: EmbeddedSeries, y_emb: EmbeddedSeries, theta_x: HyperparameterSet, theta_y: HyperparameterSet
) -> float:
    if x_emb.d != y_emb.d:
        raise DimensionMismatch(f"embeddings have {x_emb.d} and {y_emb.d} rows")
    with torch.no_grad():
        sigma_y_given_x = sparse_posterior_cov(x_emb, theta_x)
        sigma_x_given_y = sparse_posterior_cov(y_emb, theta_y)
    return sigma_x_given_y.log_det - sigma_y_given_x.log_det


def normalize_statistic(raw: float, d: int) -> float:
    if d < 1:
        raise ValueError("normalization divisor must be at least 1")
    return math.tanh(raw / d)


def _divisor(emb: EmbeddedSeries, cfg: TestConfig) -> int:
    return emb.d if cfg.norm_divisor == "d" else emb.source_length


def fit_posteriors(
    x: TimeSeries, y: TimeSeries, cfg: TestConfig
) -> Tuple[VariationalFit, VariationalFit, VariationalPosterior, VariationalPosterior]:
    """Fit Q(theta_x) and Q(theta_y) by ELBO ascent.

    With ``hyperfit_target == "cross"`` theta_x is fitted to the evidence of
    y's current values over x's state space, otherwise to x's own values.
    Returns both fits followed by both priors.
    """
    x_emb, y_emb = embed_pair(x, y, cfg.embedding)
    fits, priors = [], []
    for key, (own, other) in enumerate(((x_emb, y_emb), (y_emb, x_emb))):
        prior = default_prior(
            own,
            n_inducing=cfg.n_inducing,
            seed=derive_seed(cfg.seed, _PRIOR, key),
            location=cfg.prior_location,
            scale=cfg.prior_scale,
        )
        targets = other.current if cfg.hyperfit_target == "cross" else own.current
        opt_cfg = replace(cfg.optimizer, seed=derive_seed(cfg.seed, _FIT, key))
        fits.append(optimize_elbo(prior, targets, own, opt_cfg))
        priors.append(prior)
        logger.debug(f"fitted Q over '{own.name}' state space, final ELBO {fits[-1].trace.elbo[-1]:.4f}")
    return fits[0], fits[1], priors[0], priors[1]


def observed_statistic(
    x: TimeSeries, y: TimeSeries, q_x: VariationalPosterior, q_y: VariationalPosterior, cfg: TestConfig
) -> float:
    """Normalized K(x, y): at the MAP point (gpccm) or averaged over paired posterior draws (vgpccm)."""
    x_emb, y_emb = embed_pair(x, y, cfg.embedding)
    if cfg.mode == GPCCM:
        raw = raw_statistic(x_emb, y_emb, map_point(q_x), map_point(q_y))
    else:
        draws = [
            raw_statistic(
                x_emb,
                y_emb,
                sample_reparameterized(q_x, derive_seed(cfg.seed, _OBSERVED, s, 0)),
                sample_reparameterized(q_y, derive_seed(cfg.seed, _OBSERVED, s, 1)),
            )
            for s in range(cfg.mc_draws_observed)
        ]
        raw = float(np.mean(draws))
    return normalize_statistic(raw, _divisor(x_emb, cfg))


def null_distribution(
    x: TimeSeries, y: TimeSeries, q_x: VariationalPosterior, q_y: VariationalPosterior, cfg: TestConfig
) -> np.ndarray:
    """Normalized K over ``n_permutations`` independently permuted copies of x and y.

    gpccm keeps the MAP hyperparameters fixed; vgpccm draws one fresh
    hyperparameter set per permutation.
    """
    if cfg.mode == GPCCM:
        fixed = map_point(q_x), map_point(q_y)
    samples = np.empty(cfg.n_permutations)
    for k in range(cfg.n_permutations):
        x_perm = permute_series(x, derive_seed(cfg.seed, _PERMUTE, k, 0))
        y_perm = permute_series(y, derive_seed(cfg.seed, _PERMUTE, k, 1))
        x_emb, y_emb = embed_pair(x_perm, y_perm, cfg.embedding)
        if cfg.mode == GPCCM:
            theta_x, theta_y = fixed
        else:
            theta_x = sample_reparameterized(q_x, derive_seed(cfg.seed, _NULL_DRAW, k, 0))
            theta_y = sample_reparameterized(q_y, derive_seed(cfg.seed, _NULL_DRAW, k, 1))
        samples[k] = normalize_statistic(raw_statistic(x_emb, y_emb, theta_x, theta_y), _divisor(x_emb, cfg))
    return samples


def p_value(k_obs: float, null: Sequence[float]) -> float:
    """Fraction of null samples strictly below ``k_obs``."""
    null = np.asarray(null, dtype=np.float64)
    if null.size == 0:
        raise EmptyNull("null distribution has no samples")
    return float(np.count_nonzero(null < k_obs)) / null.size


def decide(p: float, alpha: float) -> bool:
    """Reject H0 when less than ``alpha`` of the null reaches the observed statistic."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value {p} outside [0, 1]")
    return (1.0 - p) < alpha


def specificity(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        raise NoNullTests("specificity needs at least one test of a true null")
    return counts.correct_accepts / counts.total


class CouplingTestService:
    """Directed coupling tests on one pair of standardized series.

    Posteriors are fitted once and the pair statistics per mode are cached,
    so both directions and both modes share the same fits. Statistics are
    computed as K(a, b); the test a -> b reads them with the sign flipped.
    """

    def __init__(self, a: TimeSeries, b: TimeSeries, cfg: TestConfig):
        self.a = a
        self.b = b
        self.cfg = cfg
        self.fits: Optional[Tuple[VariationalFit, VariationalFit]] = None
        self.priors: Optional[Tuple[VariationalPosterior, VariationalPosterior]] = None
        self._pair_stats: Dict[str, Tuple[float, np.ndarray]] = {}

    def fit(self) -> Tuple[VariationalFit, VariationalFit]:
        if self.fits is None:
            fit_a, fit_b, prior_a, prior_b = fit_posteriors(self.a, self.b, self.cfg)
            self.fits = fit_a, fit_b
            self.priors = prior_a, prior_b
        return self.fits

    def save_traces(self, out_dir: Union[str, Path], prefix: str = "") -> List[Path]:
        """ELBO traces of both fits as ``<prefix>trace_<series>.csv``."""
        out_dir = Path(out_dir)
        return [
            fit.trace.save_csv(out_dir / f"{prefix}trace_{series.name}.csv")
            for fit, series in zip(self.fit(), (self.a, self.b))
        ]

    @property
    def posteriors(self) -> Tuple[VariationalPosterior, VariationalPosterior]:
        fit_a, fit_b = self.fit()
        return fit_a.posterior, fit_b.posterior

    def pair_statistics(self, mode: str) -> Tuple[float, np.ndarray]:
        if mode not in MODES:
            raise ValueError(f"unknown mode '{mode}'")
        if mode not in self._pair_stats:
            q_a, q_b = self.posteriors
            cfg = replace(self.cfg, mode=mode)
            observed = observed_statistic(self.a, self.b, q_a, q_b, cfg)
            null = null_distribution(self.a, self.b, q_a, q_b, cfg)
            self._pair_stats[mode] = observed, null
        return self._pair_stats[mode]

    def test(self, source: str, target: str, mode: str) -> CouplingTestResult:
        names = (self.a.name, self.b.name)
        if (source, target) == names:
            sign = -1.0
        elif (target, source) == names:
            sign = 1.0
        else:
            raise ValueError(f"direction {source}->{target} does not match the pair {names}")
        observed, null = self.pair_statistics(mode)
        k_obs = sign * observed
        null = sign * null
        p = p_value(k_obs, null)
        return CouplingTestResult(
            direction=f"{source}->{target}",
            mode=mode,
            k_observed=float(k_obs),
            null_samples=tuple(float(v) for v in null),
            p_value=p,
            reject_h0=decide(p, self.cfg.alpha),
        )

    def test_all(self, modes: Sequence[str] = MODES) -> List[CouplingTestResult]:
        a, b = self.a.name, self.b.name
        return [self.test(src, dst, mode) for mode in modes for src, dst in ((a, b), (b, a))]
