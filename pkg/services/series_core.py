"""Time-series preprocessing: standardization, delay embedding, alignment, permutation."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import (
    ConstantSeries,
    IncompatibleLengths,
    InsufficientLength,
    TooShort,
    ValidationError,
)

logger = logging.getLogger(__name__)

VALUE_COLUMN = "value"


@dataclass(frozen=True, eq=False)
class TimeSeries:
    values: np.ndarray
    name: str = "x"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError(f"series '{self.name}' must be one-dimensional, got shape {values.shape}")
        if values.size == 0:
            raise TooShort(f"series '{self.name}' is empty")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"series '{self.name}' contains NaN or Inf")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def length(self) -> int:
        return int(self.values.size)

    def tail(self, n: int) -> "TimeSeries":
        if n > self.length:
            raise TooShort(f"series '{self.name}' has {self.length} samples, {n} requested")
        return TimeSeries(self.values[self.length - n:], self.name)

    def renamed(self, name: str) -> "TimeSeries":
        return TimeSeries(self.values, name)


@dataclass(frozen=True)
class EmbeddingConfig:
    m: int = 3
    tau: int = 1

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 0:
            raise ValidationError("m", "must be a non-negative integer")
        if int(self.tau) != self.tau or self.tau < 1:
            raise ValidationError("tau", "must be a positive integer")

    @property
    def dimension(self) -> int:
        return self.m + 1

    @property
    def span(self) -> int:
        """Samples consumed before the first complete row."""
        return self.tau * self.m


@dataclass(frozen=True, eq=False)
class EmbeddedSeries:
    """Rows ordered current-to-oldest; row i starts at source index ``offset + i``."""

    rows: np.ndarray
    source_config: EmbeddingConfig
    offset: int
    source_length: int
    name: str = "x"

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def d(self) -> int:
        return int(self.rows.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.rows.shape[1])

    @property
    def current(self) -> np.ndarray:
        """Column 0: the series values at each row's own time index."""
        return self.rows[:, 0]


def standardize(series: TimeSeries) -> TimeSeries:
    """Zero mean, unit population variance."""
    if series.length < 2:
        raise TooShort(f"series '{series.name}' needs at least 2 samples to standardize")
    values = series.values
    centered = values - values.mean()
    std = np.sqrt(np.mean(centered ** 2))
    if not std > 0.0:
        raise ConstantSeries(f"series '{series.name}' has zero variance")
    return TimeSeries(centered / std, series.name)


def delay_embed(series: TimeSeries, cfg: EmbeddingConfig) -> EmbeddedSeries:
    n = series.length
    d = n - cfg.span
    if d < 2:
        raise InsufficientLength(
            f"series '{series.name}' of length {n} leaves {d} rows for m={cfg.m}, tau={cfg.tau}"
        )
    # column k holds x_{i - k*tau}
    index = cfg.span + np.arange(d)[:, None] - cfg.tau * np.arange(cfg.dimension)[None, :]
    return EmbeddedSeries(series.values[index], cfg, cfg.span, n, series.name)


def _truncate(emb: EmbeddedSeries, offset: int) -> EmbeddedSeries:
    start = offset - emb.offset
    return EmbeddedSeries(emb.rows[start:], emb.source_config, offset, emb.source_length, emb.name)


def align_pair(a: EmbeddedSeries, b: EmbeddedSeries) -> Tuple[EmbeddedSeries, EmbeddedSeries]:
    """Truncate both embeddings to the time indices they share."""
    if a.source_length != b.source_length:
        raise IncompatibleLengths(
            f"'{a.name}' has {a.source_length} samples but '{b.name}' has {b.source_length}"
        )
    offset = max(a.offset, b.offset)
    aligned = _truncate(a, offset), _truncate(b, offset)
    if aligned[0].d < 2:
        raise InsufficientLength(f"only {aligned[0].d} aligned rows remain")
    return aligned


def embed_pair(x: TimeSeries, y: TimeSeries, cfg: EmbeddingConfig) -> Tuple[EmbeddedSeries, EmbeddedSeries]:
    if x.length != y.length:
        raise IncompatibleLengths(f"'{x.name}' has {x.length} samples but '{y.name}' has {y.length}")
    return align_pair(delay_embed(x, cfg), delay_embed(y, cfg))


def permute_series(series: TimeSeries, seed: int) -> TimeSeries:
    """Uniform random rearrangement (Fisher-Yates) under a seeded generator."""
    rng = np.random.default_rng(seed)
    return TimeSeries(rng.permutation(series.values), series.name)


# I/O

def load_series_csv(path: Union[str, Path], name: str = None) -> TimeSeries:
    path = Path(path)
    frame = pd.read_csv(path)
    if VALUE_COLUMN not in frame.columns:
        raise ValueError(f"{path}: expected a '{VALUE_COLUMN}' column, found {list(frame.columns)}")
    return TimeSeries(frame[VALUE_COLUMN].to_numpy(dtype=np.float64), name or path.stem)


def save_series_csv(series: TimeSeries, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({VALUE_COLUMN: series.values}).to_csv(path, index=False)
    return path


def load_series_json(path: Union[str, Path], name: str = None) -> TimeSeries:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        values = json.load(f)
    if not isinstance(values, list):
        raise ValueError(f"{path}: expected a JSON array of numbers")
    return TimeSeries(np.asarray(values, dtype=np.float64), name or path.stem)


def save_series_json(series: TimeSeries, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(series.values.tolist(), f)
    return path


def as_series(values: Union[TimeSeries, Sequence[float], np.ndarray], name: str = "x") -> TimeSeries:
    if isinstance(values, TimeSeries):
        return values
    return TimeSeries(np.asarray(values, dtype=np.float64), name)
