"""Run configuration: one document drives data generation, training, and eval.

Every field has a default; unknown keys are rejected; the canonical hash is
stable under key reordering and is stamped into manifests, checkpoints, and
reports.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

CONFIG_VERSION = 1
SEED_ENV_VAR = "SOP_MTASR_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    feature_dim: int = 16
    num_content_tokens: int = 28
    talker_counts: list[int] = field(default_factory=lambda: [2, 3])
    transcript_len: list[int] = field(default_factory=lambda: [4, 12])
    duration_range: list[int] = field(default_factory=lambda: [4, 8])
    min_gap: int = 4
    emission_noise_sigma: float = 0.05
    mix_noise_sigma: float = 0.5
    train_size: int = 2000
    dev_size: int = 200
    eval_size: int = 200


@dataclass
class ModelConfig:
    encoder_dim: int = 64
    encoder_blocks: int = 2
    conv_dim: int = 64
    decoder_dim: int = 64
    decoder_layers: int = 4
    decoder_heads: int = 4
    decoder_ff_dim: int = 128
    lora_rank: int = 8
    lora_alpha: float = 16.0
    sop_delimiter: bool = True
    max_positions: int = 512


@dataclass
class TrainConfig:
    alpha: float = 0.3
    batch_size: int = 16
    steps: dict = field(
        default_factory=lambda: {"stage1": 900, "stage2": 700, "stage3": 4000, "single": 900}
    )
    lr: dict = field(
        default_factory=lambda: {
            "stage1": 1e-3,
            "stage2": 1e-3,
            "stage3": 3e-3,
            "single": 1e-3,
        }
    )
    warmup_frac: float = 0.05
    eval_every: int = 0
    num_threads: int = 1
    num_talkers: int = 2
    condition: str = "noisy"
    data_dir: str = "data"

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0,1], got {self.alpha}")


@dataclass
class EvalConfig:
    max_decode_len: int = 64
    bootstrap_resamples: int = 10000


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    device: str = "cpu"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


def _build_section(cls, values: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in config section '{path}'")
    return cls(**values)


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    known_top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known_top
    if unknown:
        raise ConfigError(f"unknown top-level config key(s) {sorted(unknown)}")
    version = doc.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    kwargs = {"version": version}
    for name in ("seed", "device"):
        if name in doc:
            kwargs[name] = doc.pop(name)
    for name, cls in _SECTIONS.items():
        section = doc.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section '{name}' must be an object")
        kwargs[name] = _build_section(cls, section, name)
    return RunConfig(**kwargs)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Load a JSON config file (or defaults), apply flag overrides, then the
    SOP_MTASR_SEED environment variable (highest precedence for the seed)."""
    doc: dict = {}
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
    cfg = config_from_dict(doc)
    if overrides:
        merged = cfg.to_dict()
        for dotted, value in overrides.items():
            parts = dotted.split(".")
            node = merged
            for p in parts[:-1]:
                if p not in node:
                    raise ConfigError(f"unknown config key '{dotted}'")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key '{dotted}'")
            node[parts[-1]] = value
        cfg = config_from_dict(merged)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        merged = cfg.to_dict()
        merged["seed"] = int(env_seed)
        cfg = config_from_dict(merged)
    return cfg
