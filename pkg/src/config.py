"""
Experiment configuration for medpatch runs.

Handles loading the versioned JSON config, applying CLI overrides, and the
atomic writers every persisted artifact goes through.
"""

import json
import logging
import math
import os
import tempfile
import time
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import filelock
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.data import (
    ANCHOR_MODALITY,
    MODALITY_ORDER,
    CONDITION_NAMES,
    GeneratorConfig,
    ordered_modalities,
)
from src.errors import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

TASKS = ("mortality", "conditions")
# Discharge notes summarise the stay's outcome, so they are excluded from
# mortality prediction.
TASK_MODALITIES = {
    "mortality": ("EHR", "CXR", "RR"),
    "conditions": ("EHR", "CXR", "RR", "DN"),
}
LEAKY_MODALITIES = {"mortality": ("DN",)}

LOCK_NAME = ".medpatch.lock"
# Seconds to wait for another pipeline holding the output directory.
LOCK_TIMEOUT = 10


def _atomic_write(path: Path, render, mode: str = 'w', encoding: Optional[str] = 'utf-8') -> None:
    """Durably replace `path` with whatever `render(fh)` writes.

    A tempfile in the SAME directory (so the rename can't cross a filesystem
    boundary), flush + fsync, then os.replace. A crash mid-write leaves the
    previous file intact, and a concurrent reader sees either the old file or
    the new one. The temp file is removed on any failure.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = tempfile.NamedTemporaryFile(
        mode=mode,
        dir=str(path.parent),
        prefix=f'.{path.name}.',
        suffix='.tmp',
        delete=False,
        encoding=encoding if 'b' not in mode else None,
    )
    try:
        render(tmp)
        tmp.flush()
        os.fsync(tmp.fileno())
        tmp.close()
        # Windows can transiently refuse the replace while a reader holds
        # the destination open.
        for attempt in range(3):
            try:
                os.replace(tmp.name, path)
                return
            except PermissionError:
                if attempt == 2:
                    raise
                time.sleep(0.05)
    except Exception:
        try:
            tmp.close()
        except Exception:
            pass
        try:
            os.unlink(tmp.name)
        except OSError:
            pass
        raise


def _atomic_write_json(path: Path, payload) -> None:
    """Write `payload` as JSON to `path` atomically (manifest, reports, τ)."""
    _atomic_write(path, lambda fh: fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n"))


def _atomic_write_text(path: Path, text: str, encoding: str = 'utf-8') -> None:
    """Write `text` to `path` atomically (CSV tables, dataset lines)."""
    _atomic_write(path, lambda fh: fh.write(text), encoding=encoding)


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write raw bytes atomically (parameter checkpoints)."""
    _atomic_write(path, lambda fh: fh.write(data), mode='wb', encoding=None)


def output_lock(out_dir: Path) -> filelock.FileLock:
    """Cross-process lock: one pipeline per output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return filelock.FileLock(str(out_dir / LOCK_NAME), timeout=LOCK_TIMEOUT)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    path: Optional[str] = None
    synth: Optional[GeneratorConfig] = None
    split: Tuple[float, float, float] = (0.70, 0.10, 0.20)
    document_chunk: Optional[int] = None
    encoder: Literal["stub", "identity"] = "stub"
    embed_dim: int = 16

    @model_validator(mode="after")
    def _check(self) -> "DataSection":
        if any(r <= 0 for r in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must be positive and sum to 1, got {self.split}")
        if self.document_chunk is not None and self.document_chunk < 1:
            raise ValueError("document_chunk must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        return self


class ModelSection(_Section):
    d_proj: int = 64
    theta: float = 0.75
    patching: Literal["confidence", "entropy"] = "confidence"
    theta_entropy: Optional[float] = None
    per_class_heads: bool = False
    low_target: Literal["low", "late"] = "low"
    ablation: int = 0

    @model_validator(mode="after")
    def _check(self) -> "ModelSection":
        if self.d_proj < 1:
            raise ValueError("d_proj must be >= 1")
        if not 0.5 < self.theta <= 1.0:
            raise ValueError(f"theta must be in (0.5, 1], got {self.theta}")
        if self.theta_entropy is not None and not 0.0 <= self.theta_entropy <= 1.0:
            raise ValueError(f"theta_entropy must be in [0, 1], got {self.theta_entropy}")
        if self.ablation not in (0, 1, 2, 3, 4):
            raise ValueError(f"ablation must be 0..4, got {self.ablation}")
        return self

    def entropy_threshold(self) -> float:
        """Explicit θ_H, else the binary entropy at γ = θ (same partition)."""
        if self.theta_entropy is not None:
            return self.theta_entropy
        t = self.theta
        if t >= 1.0:
            return 0.0
        return -(t * math.log2(t) + (1.0 - t) * math.log2(1.0 - t))


class TrainingSection(_Section):
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 15
    lr_bounds: Tuple[float, float] = (1e-5, 1e-3)
    sweeps: int = 10
    confidence_lr: float = 1e-3
    confidence_epochs: int = 20
    calibration_epochs: int = 5
    calibration_lr: float = 0.05
    baselines: bool = True

    @model_validator(mode="after")
    def _check(self) -> "TrainingSection":
        for name in ("batch_size", "max_epochs", "patience", "sweeps",
                     "confidence_epochs", "calibration_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.lr_bounds
        if not (0 < lo < hi):
            raise ValueError(f"lr_bounds must satisfy 0 < lo < hi, got {self.lr_bounds}")
        if self.confidence_lr <= 0 or self.calibration_lr <= 0:
            raise ValueError("learning rates must be positive")
        return self


class EvaluationSection(_Section):
    replicates: int = 1000
    metric_seed: int = 0
    ece_bins: int = 15

    @model_validator(mode="after")
    def _check(self) -> "EvaluationSection":
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.ece_bins < 1:
            raise ValueError("ece_bins must be >= 1")
        return self


class ExperimentConfig(_Section):
    """Versioned experiment config; unknown keys anywhere are errors."""

    schema_version: Literal[1] = SCHEMA_VERSION
    task: Literal["mortality", "conditions"] = "mortality"
    modalities: Optional[List[str]] = None
    seed: int = 0
    out_dir: Optional[str] = None
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)

    @model_validator(mode="after")
    def _task_guard(self) -> "ExperimentConfig":
        mods = self.active_modalities
        raw = self.modalities if self.modalities is not None else mods
        if len(set(raw)) != len(raw) or not mods:
            raise ValueError("modalities must be a non-empty list of unique names")
        for m in LEAKY_MODALITIES.get(self.task, ()):
            if m in mods:
                raise ValueError(
                    f"modalities: {m} is excluded for the {self.task} task (outcome leakage)"
                )
        if ANCHOR_MODALITY not in mods:
            raise ValueError(f"modalities must include the anchor modality {ANCHOR_MODALITY}")
        if self.data.synth is not None:
            requested = self.data.synth.num_classes
            if "num_classes" in self.data.synth.model_fields_set:
                if self.task == "mortality" and requested != 1:
                    raise ValueError("mortality task needs num_classes = 1")
        return self

    @property
    def active_modalities(self) -> Tuple[str, ...]:
        if self.modalities is not None:
            return ordered_modalities(self.modalities)
        synth = self.data.synth
        if synth is not None and "modalities" in synth.model_fields_set:
            return ordered_modalities(synth.modalities)
        return TASK_MODALITIES[self.task]

    @property
    def num_classes(self) -> int:
        if self.task == "mortality":
            return 1
        synth = self.data.synth
        if synth is not None and "num_classes" in synth.model_fields_set:
            return synth.num_classes
        return len(CONDITION_NAMES)

    def generator_config(self) -> GeneratorConfig:
        """The synthetic generator settings, reconciled with task and seed."""
        base: Dict[str, Any] = {}
        if self.data.synth is not None:
            base = self.data.synth.model_dump(exclude_unset=True)
        base["modalities"] = list(self.active_modalities)
        base["num_classes"] = self.num_classes
        base.setdefault("seed", self.seed)
        return GeneratorConfig.model_validate(base)

    def snapshot(self) -> Dict[str, Any]:
        """Full config with modalities and generator settings resolved."""
        data = self.model_dump(mode="json")
        data["modalities"] = list(self.active_modalities)
        if self.data.synth is not None:
            data["data"]["synth"] = self.generator_config().model_dump(mode="json")
        return data


def _raise_config_error(source: str, err: ValidationError) -> None:
    first = err.errors()[0]
    where = ".".join(str(p) for p in first.get("loc", ())) or "config"
    raise ConfigError(f"{source}: {where}: {first.get('msg')}") from err


def load_config(path: Optional[Path] = None) -> ExperimentConfig:
    """Load and validate a config file; None gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root is not an object")
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        _raise_config_error(str(path), e)
    logger.info(f"Loaded config from {path}")
    return config


def load_generator_config(path: Path) -> GeneratorConfig:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
        return GeneratorConfig.model_validate(raw)
    except FileNotFoundError as e:
        raise ConfigError(f"generator config not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    except ValidationError as e:
        _raise_config_error(str(path), e)


# CLI flag -> dotted config field.
_OVERRIDE_FIELDS = {
    "seed": "seed",
    "task": "task",
    "out_dir": "out_dir",
    "data_path": "data.path",
    "ablation": "model.ablation",
    "theta": "model.theta",
    "patching": "model.patching",
    "theta_entropy": "model.theta_entropy",
    "ece_bins": "evaluation.ece_bins",
    "replicates": "evaluation.replicates",
    "metric_seed": "evaluation.metric_seed",
}


def apply_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Return a re-validated copy with CLI overrides applied (None = keep)."""
    raw = config.model_dump(exclude_unset=True)
    synth = overrides.pop("synth", None)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _OVERRIDE_FIELDS:
            raise ConfigError(f"unknown override: {key}")
        *parents, leaf = _OVERRIDE_FIELDS[key].split(".")
        node = raw
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    if synth is not None:
        raw.setdefault("data", {})["synth"] = synth.model_dump(exclude_unset=True)
    if raw.get("data", {}).get("path") and raw.get("data", {}).get("synth"):
        logger.warning("Both --data and a synthetic config given; using --data")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        _raise_config_error("overrides", e)


__all__ = [
    "ExperimentConfig",
    "GeneratorConfig",
    "MODALITY_ORDER",
    "SCHEMA_VERSION",
    "TASKS",
    "TASK_MODALITIES",
    "apply_overrides",
    "load_config",
    "load_generator_config",
    "output_lock",
]
