"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

CONSOLIDATION_MODES = ("naive", "merge", "merge_refine")
INIT_MODES = ("null", "det_scores", "gt_overlap")


@dataclass
class Config:
    """Everything that influences a discovery run.

    ``d`` is the corpus-wide feature dimension and has no sensible default;
    all other fields default to the standard operating point.
    """

    d: int
    n_proposals_per_image: int = 150
    slot_cap: int = 2000
    semantic_prior_score: float = 0.9
    tau_semantic: float = 0.0
    tau_working: float = 0.7
    ridge_lambda: float = 1e-3
    min_images_per_slot: int = 5
    merge_edge_threshold: float = 0.0
    rounds: int = 2
    rng_seed: int = 0
    consolidation_mode: str = "merge_refine"
    init_mode: str = "det_scores"
    l2_normalize: bool = False
    affinity_per_sample: bool = False

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.n_proposals_per_image < 1:
            raise ValueError("n_proposals_per_image must be >= 1")
        if self.slot_cap < 1:
            raise ValueError("slot_cap must be >= 1")
        if not (0.0 < self.semantic_prior_score <= 1.0):
            raise ValueError("semantic_prior_score must be in (0, 1]")
        if not (-1.0 <= self.tau_working <= 1.0):
            raise ValueError("tau_working must be in [-1, 1]")
        if self.ridge_lambda <= 0.0:
            raise ValueError("ridge_lambda must be > 0")
        if self.min_images_per_slot < 1:
            raise ValueError("min_images_per_slot must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not (0 <= self.rng_seed < 2**64):
            raise ValueError("rng_seed must be an unsigned 64-bit integer")
        if self.consolidation_mode not in CONSOLIDATION_MODES:
            raise ValueError(f"consolidation_mode must be one of {CONSOLIDATION_MODES}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(field: dataclasses.Field, raw: str) -> object:
    if field.type in ("bool", bool):
        low = raw.lower()
        if low not in ("true", "false"):
            raise ValueError(f"config key '{field.name}': expected true/false, got '{raw}'")
        return low == "true"
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    return raw


def save_config(config: Config, path: str | Path) -> None:
    """Write the config as one ``key = value`` line per field, in field order."""
    lines = [
        f"{f.name} = {_format_value(getattr(config, f.name))}"
        for f in dataclasses.fields(config)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path: str | Path, **overrides: object) -> Config:
    """Parse a ``key = value`` config file; keyword overrides win over file values."""
    fields = {f.name: f for f in dataclasses.fields(Config)}
    values: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got '{stripped}'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown config key '{key}'")
        values[key] = _parse_value(fields[key], raw.strip())
    values.update(overrides)
    if "d" not in values:
        raise ValueError(f"{path}: config file must define 'd'")
    return Config(**values)  # type: ignore[arg-type]


def config_hash(config: Config) -> str:
    """Stable hash over every field, so runs with different parameters never collide."""
    canonical = "\n".join(
        f"{f.name}={_format_value(getattr(config, f.name))}"
        for f in dataclasses.fields(config)
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
