"""Seed derivation and config fingerprints."""

import dataclasses
import hashlib
import json
from typing import Any

import numpy as np


def derive_seed(base: int, *keys: int) -> int:
    """Independent 32-bit seed for the stream addressed by (base, *keys)."""
    entropy = [int(base)] + [int(k) for k in keys]
    if any(value < 0 for value in entropy):
        raise ValueError(f"seed components must be non-negative, got {entropy}")
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {k: _plain(v) for k, v in dataclasses.asdict(value).items()}
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def canonical_json(payload: Any) -> str:
    return json.dumps(_plain(payload), sort_keys=True, separators=(",", ":"))


def stable_hash(payload: Any) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]
