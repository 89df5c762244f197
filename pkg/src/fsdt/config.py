"""Run configuration: model, beam, training, and path settings.

Configs load from a JSON document and any field can be overridden from the
command line with dotted ``section.field=value`` assignments.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .decoding import BeamConfig
from .errors import ContractError, DataError, UsageError
from .model import ModelConfig


@dataclass
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 8
    lambda_fast: float = 0.5
    mask_p: float = 0.1
    seed: int = 0
    ar_left: int = 1
    ar_right: int = 4
    use_alignment: bool = True
    stage2_lr: float = 0.0       # 0 = lr / 100
    stage2_epochs: int = 0       # 0 = epochs / 2
    freeze: str = ""             # comma-separated parameter-name prefixes

    @property
    def effective_stage2_lr(self) -> float:
        return self.stage2_lr if self.stage2_lr > 0 else self.lr / 100.0

    @property
    def effective_stage2_epochs(self) -> int:
        return self.stage2_epochs if self.stage2_epochs > 0 else max(1, self.epochs // 2)

    def frozen_prefixes(self) -> tuple[str, ...]:
        return tuple(p for p in self.freeze.split(",") if p)


@dataclass
class PathsConfig:
    manifest: str = ""
    checkpoint_in: str = ""
    checkpoint_out: str = ""
    hyp_out: str = ""
    trace_out: str = ""
    report_out: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    frame_ms: float = 40.0
    slice_threshold_s: float = 3.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        cfg = cls()
        for section in ("model", "beam", "train", "paths"):
            if section in payload:
                target = getattr(cfg, section)
                for key, value in payload[section].items():
                    if not hasattr(target, key):
                        raise DataError(f"unknown config field {section}.{key}")
                    setattr(target, key, value)
        for key in ("frame_ms", "slice_threshold_s"):
            if key in payload:
                setattr(cfg, key, payload[key])
        return cfg


def load_run_config(path) -> RunConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read config {path}: {err}") from err
    return RunConfig.from_dict(payload)


def save_run_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _coerce(value: str, current) -> object:
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"cannot parse boolean from {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, str):
        return value
    raise UsageError(f"cannot override field of type {type(current).__name__}")


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``section.field=value`` overrides in place."""
    for assignment in assignments:
        if "=" not in assignment:
            raise UsageError(f"override {assignment!r} is not of the form section.field=value")
        dotted, value = assignment.split("=", 1)
        parts = dotted.strip().split(".")
        target = cfg
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise UsageError(f"unknown config section {dotted!r}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise UsageError(f"unknown config field {dotted!r}")
        try:
            setattr(target, leaf, _coerce(value.strip(), getattr(target, leaf)))
        except ValueError as err:
            raise UsageError(f"bad value for {dotted}: {err}") from err
    return cfg
