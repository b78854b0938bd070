"""Flat JSON run configuration. Command-line flags override file values."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

COMMANDS = (
    "train-backbone", "train-processor", "eval", "ablate-k", "ablate-rsw",
    "instrument", "ib-verify", "gen-data",
)
K_GRID = (16, 32, 64, 128, 256)
R_GRID = (16, 32, 48, 64, 96)


class ConfigError(ValueError):
    """Invalid configuration; ``flag`` names the offending option."""

    def __init__(self, message: str, flag: str | None = None):
        super().__init__(message)
        self.flag = flag


@dataclass
class RunConfig:
    command: str = "eval"
    # model and data paths
    backbone: str | None = None
    processor: str | None = None
    data: str | None = None
    test_data: str | None = None
    out: str = "runs/out"
    # Processor behaviour
    trigger: str = "newline"
    k: int = 32
    R: int = 32
    d_p: int = 64
    # training
    seeds: list[int] = field(default_factory=lambda: [0])
    epochs: int = 1
    lr: float = 1e-3
    batch_size: int = 16
    schedule: str = "constant"
    # backbone shape (train-backbone)
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    # evaluation
    max_new: int = 64
    limit: int | None = None
    baseline: str | None = None      # pause | latent_rollout
    n_special: int = 16
    # sweeps
    grid: list[int] | None = None
    # synthetic data
    n: int = 1000
    split: str = "train"
    modulus: int = 10
    chain_length: int = 3
    distractors: int = 4
    # ib-verify
    trials: int = 1000
    models: int = 200

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}", "command")
        if self.k < 0:
            raise ConfigError("k must be >= 0", "--k")
        if self.trigger not in ("newline", "every_R"):
            raise ConfigError(f"unknown trigger {self.trigger!r}", "--trigger")
        if self.trigger == "every_R" and self.R < 1:
            raise ConfigError("R must be >= 1 with trigger every_R", "--R")
        if self.baseline not in (None, "pause", "latent_rollout"):
            raise ConfigError(f"unknown baseline {self.baseline!r}", "--baseline")
        needs = {
            "train-backbone": ("data",),
            "train-processor": ("backbone", "data"),
            "eval": ("backbone", "test_data"),
            "ablate-k": ("backbone", "data", "test_data"),
            "ablate-rsw": ("backbone", "data", "test_data"),
            "instrument": ("backbone", "processor", "test_data"),
        }.get(self.command, ())
        for name in needs:
            if getattr(self, name) is None:
                raise ConfigError(f"{self.command} needs --{name.replace('_', '-')}", f"--{name.replace('_', '-')}")
        for name in ("backbone", "processor", "data", "test_data"):
            value = getattr(self, name)
            if value is None:
                continue
            p = Path(value)
            if name in ("backbone", "processor") and p.suffix != ".json":
                p = p.with_suffix(".json")
            if not p.exists():
                raise ConfigError(f"--{name.replace('_', '-')}: no such file {value}", f"--{name.replace('_', '-')}")
        return self


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}", "--config") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object", "--config")
    unknown = set(doc) - set(RunConfig.field_names())
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}", "--config")
    return doc


def merge(file_values: dict, flag_values: dict) -> RunConfig:
    """File values first, then any flag that was given explicitly."""
    values = dict(file_values)
    values.update({k: v for k, v in flag_values.items() if v is not None})
    return RunConfig(**values)
