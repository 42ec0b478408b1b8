"""Experiment configuration: one flat JSON document, strictly validated.

Unknown keys are rejected rather than ignored — a typo silently falling
back to a default is the classic way benchmark numbers stop meaning what
the filename says. config_hash() gives a stable digest of the resolved
configuration for embedding in result files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

_SWITCH_DEFAULTS = {"semantic_loss_on": True, "fingerprint_on": True, "gft_on": True}


@dataclass(frozen=True)
class ExperimentConfig:
    # corpus
    source: str = "synthetic"          # "synthetic" or a directory of PGM files
    image_count: int = 50
    image_size: int = 64
    # fragmentation grid
    grid_rows: int = 4
    grid_cols: int = 4
    # overlay network
    nodes: int = 20
    m0: int = 4
    m: int = 2
    leader_fraction: float = 0.1
    policy: str = "gft_locality"
    policy_d: int | None = 3
    # consensus / latency model
    P: int = 4
    f: int = 1
    base_delay_ms: float = 5.0
    jitter_ms: float = 2.0
    t_verify_ms: float = 1.0
    t_aggregate_ms: float = 0.0
    t_assemble_ms: float = 0.5
    t_encode_ms: float = 2.0
    t_push_ms: float = 1.5
    weight_threshold: float | None = None
    # reconstruction
    dim: int = 64
    kind: str = "full"
    alpha: float = 0.6
    lambda1: float = 0.1
    lambda2: float = 0.1
    fallback: str = "nearest"
    # benchmark sweeps
    sigmas: tuple[float, ...] = (0.02, 0.05, 0.10)
    batches: tuple[int, ...] = (200, 400, 600, 800, 1000)
    workers: tuple[int, ...] = (1, 2, 4, 8)
    scale_n: int = 1024
    table4_rounds: int = 25
    robustness_images: int = 100
    # bookkeeping
    seed: int = 0
    output_dir: str = "results"
    # ablation switches
    semantic_loss_on: bool = True
    fingerprint_on: bool = True
    gft_on: bool = True

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigError("grid must be at least 1x1")
        if self.image_count < 1:
            raise ConfigError("image_count must be positive")
        if not (0.0 < self.leader_fraction <= 1.0):
            raise ConfigError("leader_fraction must be in (0, 1]")
        if self.P < 1 or self.f < 0 or self.P < 3 * self.f + 1:
            raise ConfigError(f"need P >= 3f+1, got P={self.P} f={self.f}")
        if self.P > self.nodes:
            raise ConfigError(f"P={self.P} exceeds node count {self.nodes}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha must be in [0, 1]")
        if any(s < 0 for s in self.sigmas):
            raise ConfigError("sigmas must be nonnegative")
        if any(b < 1 for b in self.batches):
            raise ConfigError("batches must be positive")
        if any(w < 1 for w in self.workers):
            raise ConfigError("workers must be positive")
        if self.kind not in ("full", "semantic"):
            raise ConfigError(f"unknown latent kind {self.kind!r}")
        if self.fallback not in ("nearest", "exact_only"):
            raise ConfigError(f"unknown fallback {self.fallback!r}")

    @property
    def effective_policy(self) -> str:
        """The placement policy after applying the gft_on ablation switch."""
        return self.policy if self.gft_on else "random_dup"

    @property
    def effective_lambda2(self) -> float:
        return self.lambda2 if self.semantic_loss_on else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("sigmas", "batches", "workers"):
            d[k] = list(d[k])
        return d


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}
_TUPLE_FIELDS = {"sigmas", "batches", "workers"}


def config_from_dict(data: dict, overrides: dict | None = None) -> ExperimentConfig:
    merged = dict(data)
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    unknown = set(merged) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in merged.items():
        if k in _TUPLE_FIELDS:
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{k} must be a list")
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object, got {type(data).__name__}")
    return config_from_dict(data, overrides)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
