"""Ground-truth generators: coupled stochastic Lorenz-Rossler systems and a
two-voxel bilinear neural model driving balloon-Windkessel hemodynamics."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .errors import NonPositiveState, NumericalBlowup, ValidationError, ZeroPowerSignal
from .seeding import derive_seed, stable_hash
from .series_core import TimeSeries

logger = logging.getLogger(__name__)

BLOWUP_BOUND = 1e6
LORENZ_ROSSLER = "lorenz_rossler"
NEUROVASCULAR = "neurovascular"
LORENZ_CHANNELS = ("X0", "X1", "X2")
ROSSLER_CHANNELS = ("Y0", "Y1", "Y2")
VOXEL_CHANNELS = ("V1", "V2")
COUPLING_FORMS = ("product", "diffusive")
ROSSLER_FEEDBACK = ("y0", "y1")
COUPLING_GRID = ((0.0, 0.0), (2.0, 0.0), (4.0, 0.0), (0.0, 0.2), (0.0, 0.5))


@dataclass(frozen=True)
class LorenzRosslerConfig:
    eps_x: float = 0.0
    eps_y: float = 0.0
    sigma_L: float = 1e-5
    sigma_R: float = 0.1
    dt: float = 0.1
    lorenz_sigma: float = 10.0
    lorenz_beta: float = 8.0 / 3.0
    lorenz_rho: float = 28.0
    # carried for completeness, no equation uses it
    rossler_omega1: float = 1.015
    rossler_omega2: float = 0.918
    rossler_a: float = 0.15
    rossler_b: float = 0.2
    rossler_c: float = 10.0
    n_steps: int = 2000
    burn_in: int = 500
    # "y1" and "product" are the printed forms; substeps=1 leaves the attractor at dt=0.1
    substeps: int = 10
    coupling_form: str = "diffusive"
    rossler_feedback: str = "y0"
    lorenz_init: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    rossler_init: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    init_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.eps_x < 0 or self.eps_y < 0:
            raise ValidationError("eps", "coupling gains must be non-negative")
        if self.sigma_L < 0 or self.sigma_R < 0:
            raise ValidationError("sigma", "diffusion amplitudes must be non-negative")
        if not self.dt > 0:
            raise ValidationError("dt", "must be positive")
        if not self.n_steps > self.burn_in >= 0:
            raise ValidationError("n_steps", "must exceed burn_in, which must be non-negative")
        if self.substeps < 1:
            raise ValidationError("substeps", "must be at least 1")
        if self.coupling_form not in COUPLING_FORMS:
            raise ValidationError("coupling_form", f"must be one of {COUPLING_FORMS}")
        if self.rossler_feedback not in ROSSLER_FEEDBACK:
            raise ValidationError("rossler_feedback", f"must be one of {ROSSLER_FEEDBACK}")
        if self.init_jitter < 0:
            raise ValidationError("init_jitter", "must be non-negative")
        object.__setattr__(self, "lorenz_init", tuple(float(v) for v in self.lorenz_init))
        object.__setattr__(self, "rossler_init", tuple(float(v) for v in self.rossler_init))

    @property
    def coupling(self) -> Tuple[float, float]:
        return self.eps_x, self.eps_y


@dataclass(frozen=True)
class NeuroConfig:
    a_diag: float = -1.0
    c_diag: Tuple[float, float] = (1.0, 1.0)
    background_gain: float = 1.0
    coupling_rho: Optional[float] = None
    n_events: int = 10
    event_duration: float = 6.0
    event_spacing: float = 60.0
    event_onset: float = 0.0
    horizon: float = 1000.0
    u3_rate: float = 0.3
    u3_slot: float = 1.0
    kappa: float = 0.64
    gamma: float = 0.32
    tau_h: float = 2.0
    alpha_h: float = 0.32
    e0: float = 0.4
    dt: float = 0.01
    sample_interval: float = 1.0
    snr_db: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("dt", "must be positive")
        if not 0.0 < self.u3_rate < 1.0:
            raise ValidationError("u3_rate", "must lie strictly between 0 and 1")
        if self.n_events < 0:
            raise ValidationError("n_events", "must be non-negative")
        if not 0 < self.event_duration <= self.event_spacing / 2:
            raise ValidationError("event_duration", "must be positive and at most half the event spacing")
        last_end = self.event_onset + (self.n_events - 1) * self.event_spacing + self.event_spacing / 2 + self.event_duration
        if self.n_events and last_end > self.horizon:
            raise ValidationError("horizon", f"too short for {self.n_events} events per condition")
        if not self.u3_slot >= self.dt:
            raise ValidationError("u3_slot", "must be at least one integration step")
        if not self.sample_interval >= self.dt:
            raise ValidationError("sample_interval", "must be at least one integration step")
        for name in ("kappa", "gamma", "tau_h", "alpha_h"):
            if not getattr(self, name) > 0:
                raise ValidationError(name, "must be positive")
        if not 0.0 < self.e0 < 1.0:
            raise ValidationError("e0", "must lie strictly between 0 and 1")
        object.__setattr__(self, "c_diag", tuple(float(v) for v in self.c_diag))

    @property
    def n_grid(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True, eq=False)
class Realization:
    system: str
    channels: pd.DataFrame
    dt_out: float
    seed: int
    config_hash: str
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.channels.to_numpy(dtype=np.float64)).all():
            raise ValueError(f"{self.system} realization contains non-finite values")

    @property
    def channel_names(self) -> Tuple[str, ...]:
        return tuple(self.channels.columns)

    @property
    def length(self) -> int:
        return len(self.channels)

    def series(self, name: str) -> TimeSeries:
        return TimeSeries(self.channels[name].to_numpy(dtype=np.float64), name)


@dataclass(frozen=True, eq=False)
class EventTrains:
    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray
    dt: float

    def stacked(self) -> np.ndarray:
        return np.stack([self.u1, self.u2, self.u3], axis=1)


@dataclass(frozen=True, eq=False)
class HemodynamicState:
    s: np.ndarray
    f: np.ndarray
    v: np.ndarray
    q: np.ndarray


# Lorenz-Rossler


def _lorenz_rossler_drift(state: np.ndarray, cfg: LorenzRosslerConfig) -> np.ndarray:
    x0, x1, x2, y0, y1, y2 = state
    if cfg.coupling_form == "product":
        drive_x = cfg.eps_y * x0 * (y0 - 1.0)
        drive_y = cfg.eps_x * y0 * (x0 - 1.0)
    else:
        drive_x = cfg.eps_y * (y0 - x0)
        drive_y = cfg.eps_x * (x0 - y0)
    feedback = y0 if cfg.rossler_feedback == "y0" else y1
    return np.array(
        [
            cfg.lorenz_sigma * (x1 - x0) + drive_x,
            x0 * (cfg.lorenz_rho - x2) - x1,
            x0 * x1 - cfg.lorenz_beta * x2,
            -cfg.rossler_omega2 * y1 - y2 + drive_y,
            cfg.rossler_omega2 * y0 + cfg.rossler_a * y1,
            cfg.rossler_b + y2 * (feedback - cfg.rossler_c),
        ]
    )


def simulate_lorenz_rossler(cfg: LorenzRosslerConfig) -> Realization:
    """Euler-Maruyama integration; one output row per ``dt`` after the burn-in.

    Each output step is split into ``cfg.substeps`` integration steps of
    ``dt / substeps`` with their own Wiener increments.
    """
    rng = np.random.default_rng(cfg.seed)
    state = np.concatenate(
        [
            np.asarray(cfg.lorenz_init) + cfg.init_jitter * rng.standard_normal(3),
            np.asarray(cfg.rossler_init) + cfg.init_jitter * rng.standard_normal(3),
        ]
    )
    h = cfg.dt / cfg.substeps
    diffusion = np.sqrt(h) * np.array([cfg.sigma_L] * 3 + [cfg.sigma_R] * 3)
    out = np.empty((cfg.n_steps - cfg.burn_in, 6))

    for step in range(cfg.n_steps):
        for sub in range(cfg.substeps):
            state = state + h * _lorenz_rossler_drift(state, cfg) + diffusion * rng.standard_normal(6)
            if not np.all(np.abs(state) < BLOWUP_BOUND):
                raise NumericalBlowup(step * cfg.substeps + sub, LORENZ_ROSSLER)
        if step >= cfg.burn_in:
            out[step - cfg.burn_in] = state

    channels = pd.DataFrame(out, columns=list(LORENZ_CHANNELS + ROSSLER_CHANNELS))
    return Realization(LORENZ_ROSSLER, channels, cfg.dt, cfg.seed, stable_hash(cfg), asdict(cfg))


# Neurovascular


def generate_event_trains(cfg: NeuroConfig) -> EventTrains:
    """u1 and u2: ``n_events`` blocks each, ``event_spacing`` apart, u2 offset by
    half a spacing. u3: one Bernoulli(``u3_rate``) draw per ``u3_slot``."""
    n = cfg.n_grid
    length = int(round(cfg.event_duration / cfg.dt))
    u1, u2 = np.zeros(n), np.zeros(n)
    for k in range(cfg.n_events):
        start = cfg.event_onset + k * cfg.event_spacing
        for train, offset in ((u1, 0.0), (u2, cfg.event_spacing / 2)):
            i = int(round((start + offset) / cfg.dt))
            train[i:i + length] = 1.0

    rng = np.random.default_rng(derive_seed(cfg.seed, 2))
    slot = int(round(cfg.u3_slot / cfg.dt))
    n_slots = -(-n // slot)
    u3 = np.repeat(rng.random(n_slots) < cfg.u3_rate, slot)[:n].astype(np.float64)
    return EventTrains(u1, u2, u3, cfg.dt)


def draw_modulation(cfg: NeuroConfig) -> np.ndarray:
    """B^1..B^3 as a (3, 2, 2) array; only B^1 couples voxel 1 into voxel 2."""
    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    B = np.zeros((3, 2, 2))
    for j in range(3):
        B[j, 0, 0], B[j, 1, 1] = rng.standard_normal(2)
    rho = rng.standard_normal()
    B[0, 1, 0] = rho if cfg.coupling_rho is None else cfg.coupling_rho
    return B


def simulate_bilinear_neural(
    cfg: NeuroConfig,
    u: EventTrains,
    x0: Tuple[float, float] = (0.0, 0.0),
    B: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Euler integration of dx/dt = A x + sum_j u_j B^j x + C u on the event grid."""
    B = draw_modulation(cfg) if B is None else np.asarray(B, dtype=np.float64)
    A = cfg.a_diag * np.eye(2)
    C = np.array([[cfg.c_diag[0], 0.0, cfg.background_gain], [0.0, cfg.c_diag[1], cfg.background_gain]])
    inputs = u.stacked()
    x = np.empty((len(inputs), 2))
    state = np.asarray(x0, dtype=np.float64)
    for t, u_t in enumerate(inputs):
        x[t] = state
        jacobian = A + np.tensordot(u_t, B, axes=1)
        state = state + u.dt * (jacobian @ state + C @ u_t)
        if not np.all(np.abs(state) < BLOWUP_BOUND):
            raise NumericalBlowup(t, "bilinear_neural")
    return x


def oxygen_extraction(f: np.ndarray, e0: float) -> np.ndarray:
    return 1.0 - (1.0 - e0) ** (1.0 / f)


def simulate_balloon(x: np.ndarray, cfg: NeuroConfig) -> HemodynamicState:
    """Balloon-Windkessel states for every channel of ``x``, started at rest (0, 1, 1, 1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, channels = x.shape
    s, f, v, q = np.zeros(channels), np.ones(channels), np.ones(channels), np.ones(channels)
    out = {name: np.empty((n, channels)) for name in ("s", "f", "v", "q")}
    for t in range(n):
        out["s"][t], out["f"][t], out["v"][t], out["q"][t] = s, f, v, q
        outflow = v ** (1.0 / cfg.alpha_h)
        ds = x[t] - cfg.kappa * s - cfg.gamma * (f - 1.0)
        dv = (f - outflow) / cfg.tau_h
        dq = (f * oxygen_extraction(f, cfg.e0) / cfg.e0 - outflow * q / v) / cfg.tau_h
        s, f, v, q = s + cfg.dt * ds, f + cfg.dt * s, v + cfg.dt * dv, q + cfg.dt * dq
        for name, value in (("f", f), ("v", v), ("q", q)):
            if np.any(value <= 0):
                raise NonPositiveState(t + 1, name)
        if not np.all(np.abs(s) < BLOWUP_BOUND) or not np.all(f < BLOWUP_BOUND):
            raise NumericalBlowup(t + 1, "balloon")
    return HemodynamicState(**out)


def add_noise_snr(signal: np.ndarray, snr_db: float, seed: int) -> np.ndarray:
    """Add white Gaussian noise of variance power / 10^(snr_db / 10); ``inf`` adds none."""
    signal = np.asarray(signal, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return signal.copy()
    power = np.mean((signal - signal.mean()) ** 2)
    if not power > 0:
        raise ZeroPowerSignal("cannot set an SNR on a signal with zero power")
    noise_var = power / 10.0 ** (snr_db / 10.0)
    return signal + np.sqrt(noise_var) * np.random.default_rng(seed).standard_normal(signal.shape)


def simulate_neurovascular(cfg: NeuroConfig) -> Realization:
    """Deoxyhemoglobin q per voxel, sampled every ``sample_interval`` seconds with SNR noise."""
    u = generate_event_trains(cfg)
    x = simulate_bilinear_neural(cfg, u)
    hemo = simulate_balloon(x, cfg)
    stride = int(round(cfg.sample_interval / cfg.dt))
    sampled = hemo.q[::stride]
    noisy = {
        name: add_noise_snr(sampled[:, i], cfg.snr_db, derive_seed(cfg.seed, 3, i))
        for i, name in enumerate(VOXEL_CHANNELS)
    }
    return Realization(
        NEUROVASCULAR, pd.DataFrame(noisy), cfg.sample_interval, cfg.seed, stable_hash(cfg), asdict(cfg)
    )


# Persistence


def save_realization(realization: Realization, path: Union[str, Path]) -> Path:
    """Channels as CSV plus a JSON sidecar (same stem) with seed and config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    realization.channels.to_csv(path, index=False)
    sidecar = {
        "system": realization.system,
        "dt_out": realization.dt_out,
        "seed": realization.seed,
        "config_hash": realization.config_hash,
        "config": realization.config,
    }
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
    return path


def load_realization(path: Union[str, Path]) -> Realization:
    path = Path(path)
    with open(path.with_suffix(".json"), encoding="utf-8") as f:
        meta: Dict = json.load(f)
    return Realization(
        meta["system"], pd.read_csv(path), meta["dt_out"], meta["seed"], meta["config_hash"], meta.get("config", {})
    )
