"""Experiment configuration: JSON parsing, profiles, validation and the resolved-config dump."""

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from .ccm_stats import MODES, TestConfig
from .errors import ParseError, UnknownKeyError, ValidationError
from .seeding import stable_hash
from .series_core import EmbeddingConfig
from .simulators import (
    COUPLING_GRID,
    LORENZ_CHANNELS,
    LORENZ_ROSSLER,
    NEUROVASCULAR,
    ROSSLER_CHANNELS,
    VOXEL_CHANNELS,
    LorenzRosslerConfig,
    NeuroConfig,
)
from .variational import OptimizerConfig, to_prior_location

logger = logging.getLogger(__name__)

CSV_INPUT = "csv_input"
SYSTEMS = (LORENZ_ROSSLER, NEUROVASCULAR, CSV_INPUT)
PROFILES = ("desk", "full")
RESOLVED_CONFIG_FILE = "resolved_config.json"


def _field_names(cls, exclude=()) -> set:
    return {f.name for f in dataclasses.fields(cls)} - set(exclude)


# Keys each section accepts; nested dicts describe nested sections.
SCHEMA: Dict[str, Any] = {
    "system": None,
    "base_seed": None,
    "profile": None,
    "n_realizations": None,
    "couplings": None,
    "pairs": None,
    "modes": None,
    "analysis_length": None,
    "output_dir": None,
    "inputs": None,
    "save_traces": None,
    "test": {
        **{name: None for name in _field_names(TestConfig, ("mode", "seed", "embedding", "optimizer"))},
        "embedding": {name: None for name in _field_names(EmbeddingConfig)},
        "optimizer": {name: None for name in _field_names(OptimizerConfig, ("seed",))},
    },
    "lorenz_rossler": {name: None for name in _field_names(LorenzRosslerConfig, ("eps_x", "eps_y", "seed"))},
    "neurovascular": {name: None for name in _field_names(NeuroConfig, ("seed",))},
}

DEFAULTS: Dict[str, Any] = {
    "n_realizations": 10,
    "couplings": [list(c) for c in COUPLING_GRID],
    "modes": list(MODES),
    "analysis_length": 500,
    "output_dir": "results",
    "inputs": [],
    "save_traces": False,
    "test": {"n_permutations": 30, "alpha": 0.05, "mc_draws_observed": 10, "n_inducing": 16},
    "lorenz_rossler": {},
    "neurovascular": {},
}

PROFILE_OVERRIDES: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "full": {"n_realizations": 30, "test": {"n_inducing": None}},
}


@dataclass(frozen=True)
class ExperimentSpec:
    system: str
    base_seed: int
    n_realizations: int = 10
    couplings: Tuple[Tuple[float, float], ...] = COUPLING_GRID
    pairs: Tuple[Tuple[str, str], ...] = ()
    modes: Tuple[str, ...] = MODES
    analysis_length: Optional[int] = 500
    output_dir: str = "results"
    inputs: Tuple[str, ...] = ()
    profile: str = "desk"
    save_traces: bool = False
    test: TestConfig = field(default_factory=TestConfig)
    lorenz_rossler: LorenzRosslerConfig = field(default_factory=LorenzRosslerConfig)
    neurovascular: NeuroConfig = field(default_factory=NeuroConfig)

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValidationError("system", f"must be one of {SYSTEMS}")
        if self.base_seed < 0:
            raise ValidationError("base_seed", "must be non-negative")
        if self.n_realizations < 1:
            raise ValidationError("n_realizations", "must be at least 1")
        if not self.pairs:
            raise ValidationError("pairs", "must name at least one directed comparison")
        if not self.modes or any(mode not in MODES for mode in self.modes):
            raise ValidationError("modes", f"must be a non-empty subset of {MODES}")
        if self.analysis_length is not None and self.analysis_length < 2:
            raise ValidationError("analysis_length", "must be at least 2")
        if self.system != CSV_INPUT and not self.couplings:
            raise ValidationError("couplings", "must not be empty")
        if self.system == CSV_INPUT and not self.inputs:
            raise ValidationError("inputs", "csv_input needs at least one input file")
        for source, target in self.pairs:
            if source == target:
                raise ValidationError("pairs", f"'{source}' cannot be tested against itself")
            known = self.channels
            if known and (source not in known or target not in known):
                raise ValidationError("pairs", f"{source}->{target} uses a channel outside {known}")

    @property
    def channels(self) -> Tuple[str, ...]:
        if self.system == LORENZ_ROSSLER:
            return LORENZ_CHANNELS + ROSSLER_CHANNELS
        if self.system == NEUROVASCULAR:
            return VOXEL_CHANNELS
        return ()

    @property
    def realization_count(self) -> int:
        return len(self.inputs) if self.system == CSV_INPUT else self.n_realizations

    def resolved(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @property
    def config_hash(self) -> str:
        return stable_hash(self.resolved())

    def dump_resolved(self, out_dir: Union[str, Path, None] = None) -> Path:
        path = Path(out_dir or self.output_dir) / RESOLVED_CONFIG_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"config_hash": self.config_hash, "config": self.resolved()}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return path


def default_pairs(system: str) -> List[List[str]]:
    if system == LORENZ_ROSSLER:
        forward = [[x, y] for x in LORENZ_CHANNELS for y in ROSSLER_CHANNELS]
        return forward + [[y, x] for x, y in forward]
    if system == NEUROVASCULAR:
        return [["V1", "V2"], ["V2", "V1"]]
    return []


def deep_merge(base: Mapping, override: Mapping) -> dict:
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def check_keys(raw: Mapping, schema: Mapping = SCHEMA, prefix: str = ""):
    for key, value in raw.items():
        dotted = f"{prefix}{key}"
        if key not in schema:
            raise UnknownKeyError(dotted)
        sub = schema[key]
        if sub is not None:
            if not isinstance(value, Mapping):
                raise ValidationError(dotted, "must be an object")
            check_keys(value, sub, f"{dotted}.")


def _build(cls, section: str, values: Mapping, **extra):
    try:
        return cls(**values, **extra)
    except ValidationError as e:
        if not section:
            raise
        raise ValidationError(f"{section}.{e.field}", e.constraint) from e
    except (TypeError, ValueError) as e:
        raise ValidationError(section or cls.__name__, str(e)) from e


def _integer(raw: Mapping, name: str, default=None):
    value = raw.get(name, default)
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValidationError(name, "must be an integer")
    return value


def _flag(raw: Mapping, name: str, default: bool = False) -> bool:
    value = raw.get(name, default)
    if not isinstance(value, bool):
        raise ValidationError(name, "must be true or false")
    return value


def _build_test(values: Mapping) -> TestConfig:
    values = dict(values)
    embedding = _build(EmbeddingConfig, "test.embedding", values.pop("embedding", {}))
    optimizer = _build(OptimizerConfig, "test.optimizer", values.pop("optimizer", {}))
    if "prior_location" in values:
        try:
            values["prior_location"] = to_prior_location(values["prior_location"])
        except ValidationError as e:
            raise ValidationError(f"test.{e.field}", e.constraint) from e
    return _build(TestConfig, "test", values, embedding=embedding, optimizer=optimizer)


def _as_pairs(raw, name: str, cast) -> tuple:
    try:
        pairs = tuple((cast(a), cast(b)) for a, b in raw)
    except (TypeError, ValueError) as e:
        raise ValidationError(name, "must be a list of two-element lists") from e
    return pairs


def build_spec(raw: Mapping) -> ExperimentSpec:
    """Validate an already merged config mapping."""
    check_keys(raw)
    for required in ("system", "base_seed"):
        if required not in raw:
            raise ValidationError(required, "is required")
    system = raw["system"]
    if system not in SYSTEMS:
        raise ValidationError("system", f"must be one of {SYSTEMS}")
    base_seed = _integer(raw, "base_seed")
    analysis_length = raw.get("analysis_length")
    if analysis_length is not None:
        analysis_length = _integer(raw, "analysis_length")

    pairs = raw.get("pairs") or default_pairs(system)
    return _build(
        ExperimentSpec,
        "",
        {
            "system": system,
            "base_seed": base_seed,
            "n_realizations": _integer(raw, "n_realizations", 10),
            "couplings": _as_pairs(raw.get("couplings", COUPLING_GRID), "couplings", float),
            "pairs": _as_pairs(pairs, "pairs", str),
            "modes": tuple(raw.get("modes", MODES)),
            "analysis_length": analysis_length,
            "output_dir": str(raw.get("output_dir", "results")),
            "inputs": tuple(str(p) for p in raw.get("inputs", ())),
            "profile": raw.get("profile", "desk"),
            "save_traces": _flag(raw, "save_traces"),
        },
        test=_build_test(raw.get("test", {})),
        lorenz_rossler=_build(LorenzRosslerConfig, "lorenz_rossler", raw.get("lorenz_rossler", {})),
        neurovascular=_build(NeuroConfig, "neurovascular", raw.get("neurovascular", {})),
    )


def read_config_file(path: Union[str, Path]) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ParseError(f"config file {path} not found") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e.msg}", e.lineno, e.colno) from e
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: top level must be a JSON object")
    return raw


def resolve(
    raw: Optional[Mapping] = None, profile: Optional[str] = None, overrides: Optional[Mapping] = None
) -> ExperimentSpec:
    """defaults <- profile <- file contents <- command-line overrides."""
    raw = dict(raw or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    check_keys(raw)
    check_keys(overrides)
    profile = profile or raw.get("profile") or "desk"
    if profile not in PROFILES:
        raise ValidationError("profile", f"must be one of {PROFILES}")
    merged = deep_merge(deep_merge(DEFAULTS, PROFILE_OVERRIDES[profile]), raw)
    merged = deep_merge(merged, overrides)
    merged["profile"] = profile
    spec = build_spec(merged)
    logger.info(f"Resolved {spec.system} experiment (profile {profile}, hash {spec.config_hash})")
    return spec


def parse_config(
    path: Union[str, Path], profile: Optional[str] = None, overrides: Optional[Mapping] = None
) -> ExperimentSpec:
    return resolve(read_config_file(path), profile, overrides)


def resolve_test_config(raw: Optional[Mapping] = None, profile: Optional[str] = None, seed: int = 0) -> TestConfig:
    """Test settings for a single pair, with the same defaults and profiles as a full experiment."""
    raw = dict(raw or {})
    check_keys({"test": raw})
    profile = profile or "desk"
    if profile not in PROFILES:
        raise ValidationError("profile", f"must be one of {PROFILES}")
    merged = deep_merge(deep_merge(DEFAULTS["test"], PROFILE_OVERRIDES[profile].get("test", {})), raw)
    merged["seed"] = seed
    return _build_test(merged)
