"""Multimodal samples: synthetic generation, embedding-file ingestion, splits.

A sample carries one token matrix per modality (empty when the modality is
missing), the availability vector ``a`` derived from those matrices and a
binary label vector. The synthetic generator gives every modality its own
label-dependent signal direction per class so each stream is independently
(and only partially) predictive; the anchor modality is never dropped.

Ingestion format (one JSON object per line)::

    {"id": "s000001", "label": [0, 1, ...],
     "modalities": {"EHR": {"tokens": [[0.1, ...], ...]}, "RR": {...}}}

A modality key that is absent means the modality is missing for that record.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import ConfigError, IngestionError

logger = logging.getLogger(__name__)

# Canonical modality order; every concatenation and report follows it.
MODALITY_ORDER = ("EHR", "CXR", "RR", "DN")
TEXT_MODALITIES = ("RR", "DN")
ANCHOR_MODALITY = "EHR"

DEFAULT_CHUNK = 512

MORTALITY_PREVALENCE = 0.125

# Training-split prevalence of the 25 clinical conditions (acute, chronic and
# mixed care), in report order.
CONDITION_PREVALENCE = {
    "Acute and unspecified renal failure": 0.269,
    "Acute cerebrovascular disease": 0.056,
    "Acute myocardial infarction": 0.075,
    "Cardiac dysrhythmias": 0.326,
    "Chronic kidney disease": 0.206,
    "Chronic obstructive pulmonary disease and bronchiectasis": 0.143,
    "Complications of surgical procedures or medical care": 0.189,
    "Conduction disorders": 0.100,
    "Congestive heart failure; nonhypertensive": 0.255,
    "Coronary atherosclerosis and other heart disease": 0.311,
    "Diabetes mellitus with complications": 0.114,
    "Diabetes mellitus without complication": 0.172,
    "Disorders of lipid metabolism": 0.405,
    "Essential hypertension": 0.418,
    "Fluid and electrolyte disorders": 0.372,
    "Gastrointestinal hemorrhage": 0.070,
    "Hypertension with complications and secondary hypertension": 0.215,
    "Other liver diseases": 0.125,
    "Other lower respiratory disease": 0.095,
    "Other upper respiratory disease": 0.048,
    "Pleurisy; pneumothorax; pulmonary collapse": 0.067,
    "Pneumonia (except that caused by tuberculosis or sexually transmitted disease)": 0.127,
    "Respiratory failure; insufficiency; arrest (adult)": 0.160,
    "Septicemia (except in labor)": 0.158,
    "Shock": 0.123,
}
CONDITION_NAMES = tuple(CONDITION_PREVALENCE)

# Per-modality generator defaults: token-count range, signal strength,
# missingness probability.
_DEFAULT_TOKEN_RANGE = {"EHR": (12, 24), "CXR": (16, 16), "RR": (2, 8), "DN": (4, 12)}
_DEFAULT_SIGNAL = {"EHR": 0.6, "CXR": 0.4, "RR": 0.5, "DN": 0.7}
_DEFAULT_MISSING = {"EHR": 0.0, "CXR": 0.4, "RR": 0.15, "DN": 0.1}

# Signal amplitude per unit strength, relative to unit-variance token noise.
SIGNAL_SCALE = 0.5


def class_names(num_classes: int, task: str = "mortality") -> Tuple[str, ...]:
    if num_classes == 1 and task == "mortality":
        return ("mortality",)
    if num_classes == len(CONDITION_NAMES):
        return CONDITION_NAMES
    return tuple(f"class_{c}" for c in range(num_classes))


def ordered_modalities(names) -> Tuple[str, ...]:
    """Known modalities in canonical order, then any others as first seen."""
    names = list(dict.fromkeys(names))
    known = [m for m in MODALITY_ORDER if m in names]
    return tuple(known + [m for m in names if m not in MODALITY_ORDER])


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModalityTokens:
    modality: str
    tokens: np.ndarray
    present: bool

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"{self.modality}: token matrix must be 2-D, got {self.tokens.shape}")
        if self.present and self.tokens.shape[0] < 1:
            raise ValueError(f"{self.modality}: present modality needs at least one token")
        if not self.present and self.tokens.shape[0] != 0:
            raise ValueError(f"{self.modality}: missing modality must have no tokens")

    @classmethod
    def missing(cls, modality: str, dim: int) -> "ModalityTokens":
        return cls(modality, np.zeros((0, dim), dtype=np.float64), False)

    @classmethod
    def of(cls, modality: str, tokens) -> "ModalityTokens":
        arr = np.asarray(tokens, dtype=np.float64)
        return cls(modality, arr, arr.shape[0] > 0)


@dataclass
class Sample:
    sample_id: str
    modalities: Dict[str, ModalityTokens]
    label: np.ndarray

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=np.int8)
        if not np.all((self.label == 0) | (self.label == 1)):
            raise ValueError(f"{self.sample_id}: labels must be 0/1")

    @property
    def availability(self) -> np.ndarray:
        """Missingness vector ``a`` in the sample's modality order."""
        return np.array([1 if t.present else 0 for t in self.modalities.values()], dtype=np.int8)

    def tokens(self, modality: str) -> np.ndarray:
        return self.modalities[modality].tokens

    def has(self, modality: str) -> bool:
        return self.modalities[modality].present


@dataclass
class Dataset:
    modalities: Tuple[str, ...]
    num_classes: int
    token_dims: Dict[str, int]
    samples: List[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, idx: int) -> Sample:
        return self.samples[idx]

    @property
    def ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    def subset(self, ids: Sequence[str]) -> "Dataset":
        by_id = {s.sample_id: s for s in self.samples}
        return Dataset(self.modalities, self.num_classes, dict(self.token_dims),
                       [by_id[i] for i in ids])

    def restrict(self, modalities: Sequence[str]) -> "Dataset":
        """Same samples viewed through ``modalities`` only (absent ones count as missing)."""
        order = ordered_modalities(modalities)
        dims = {m: self.token_dims.get(m, 0) for m in order}
        samples = [
            Sample(s.sample_id,
                   {m: s.modalities.get(m, ModalityTokens.missing(m, dims[m])) for m in order},
                   s.label)
            for s in self.samples
        ]
        return Dataset(order, self.num_classes, dims, samples)

    def labels(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.num_classes), dtype=np.int8)
        return np.stack([s.label for s in self.samples])

    def availability(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(self.modalities)), dtype=np.int8)
        return np.stack([s.availability for s in self.samples])


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[str, ...]
    validation: Tuple[str, ...]
    test: Tuple[str, ...]

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

class GeneratorConfig(BaseModel):
    """Synthetic benchmark parameters. Per-modality maps fall back to defaults."""

    model_config = ConfigDict(extra="forbid")

    modalities: List[str] = Field(default_factory=lambda: list(MODALITY_ORDER))
    anchor: str = ANCHOR_MODALITY
    token_range: Dict[str, Tuple[int, int]] = Field(default_factory=dict)
    token_dim: int = 16
    signal: Dict[str, float] = Field(default_factory=dict)
    missing: Dict[str, float] = Field(default_factory=dict)
    noise: float = 1.0
    num_classes: int = 1
    prevalence: Optional[List[float]] = None
    missing_label_shift: float = 0.0
    n_samples: int = 8000
    seed: int = 0

    @model_validator(mode="after")
    def _fill_and_check(self) -> "GeneratorConfig":
        if not self.modalities or len(set(self.modalities)) != len(self.modalities):
            raise ValueError("modalities must be a non-empty list of unique names")
        if self.anchor not in self.modalities:
            raise ValueError(f"anchor: {self.anchor} is not among modalities {self.modalities}")
        if self.token_dim < 1:
            raise ValueError("token_dim must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.missing_label_shift < 0:
            raise ValueError("missing_label_shift must be >= 0")
        for m in self.modalities:
            lo, hi = self.token_range_for(m)
            if lo < 1 or hi < lo:
                raise ValueError(f"token_range[{m}] must satisfy 1 <= lo <= hi, got {(lo, hi)}")
            if not 0.0 <= self.signal_for(m) <= 1.0:
                raise ValueError(f"signal[{m}] must be in [0, 1], got {self.signal_for(m)}")
            if not 0.0 <= self.missing_for(m) <= 1.0:
                raise ValueError(f"missing[{m}] must be in [0, 1], got {self.missing_for(m)}")
        prevalence = self.prevalence_vector()
        if len(prevalence) != self.num_classes:
            raise ValueError(
                f"prevalence has {len(prevalence)} entries for {self.num_classes} classes"
            )
        for c, p in enumerate(prevalence):
            if not 0.0 < p < 1.0:
                raise ValueError(f"prevalence[{c}] must be in (0, 1), got {p}")
        return self

    def token_range_for(self, modality: str) -> Tuple[int, int]:
        return tuple(self.token_range.get(modality, _DEFAULT_TOKEN_RANGE.get(modality, (4, 12))))

    def signal_for(self, modality: str) -> float:
        return float(self.signal.get(modality, _DEFAULT_SIGNAL.get(modality, 0.5)))

    def missing_for(self, modality: str) -> float:
        return float(self.missing.get(modality, _DEFAULT_MISSING.get(modality, 0.0)))

    def prevalence_vector(self) -> List[float]:
        if self.prevalence is not None:
            return list(self.prevalence)
        if self.num_classes == 1:
            return [MORTALITY_PREVALENCE]
        if self.num_classes == len(CONDITION_NAMES):
            return list(CONDITION_PREVALENCE.values())
        return [0.2] * self.num_classes


def _unit_directions(rng: np.random.Generator, num_classes: int, dim: int) -> np.ndarray:
    d = rng.standard_normal((num_classes, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def generate_dataset(config: GeneratorConfig) -> Dataset:
    """Draw a seeded synthetic dataset.

    Token ``i`` of modality ``m`` is ``noise * eps + g_i * s_m * SIGNAL_SCALE *
    sum_c (2 y_c - 1) u_{m,c}`` with a per-token gain ``g_i ~ U(0, 2)`` so
    tokens differ in how decisive they are.
    """
    modalities = ordered_modalities(config.modalities)
    C, d = config.num_classes, config.token_dim
    dir_ss, label_ss, miss_ss, token_ss = np.random.SeedSequence(config.seed).spawn(4)
    dir_rng = np.random.default_rng(dir_ss)
    directions = {m: _unit_directions(dir_rng, C, d) for m in modalities}
    label_rng = np.random.default_rng(label_ss)
    miss_rng = np.random.default_rng(miss_ss)
    token_rng = np.random.default_rng(token_ss)
    prevalence = np.asarray(config.prevalence_vector(), dtype=np.float64)

    samples: List[Sample] = []
    for idx in range(config.n_samples):
        label = (label_rng.random(C) < prevalence).astype(np.int8)
        signs = 2.0 * label - 1.0
        drops = miss_rng.random(len(modalities))
        mods: Dict[str, ModalityTokens] = {}
        for j, m in enumerate(modalities):
            p_miss = config.missing_for(m)
            if label[0] == 1:
                p_miss = min(1.0, p_miss * (1.0 + config.missing_label_shift))
            if m != config.anchor and drops[j] < p_miss:
                mods[m] = ModalityTokens.missing(m, d)
                continue
            lo, hi = config.token_range_for(m)
            T = int(token_rng.integers(lo, hi + 1))
            gains = token_rng.uniform(0.0, 2.0, size=(T, 1))
            direction = signs @ directions[m]
            amplitude = config.signal_for(m) * SIGNAL_SCALE
            x = config.noise * token_rng.standard_normal((T, d)) + gains * amplitude * direction
            mods[m] = ModalityTokens(m, x, True)
        samples.append(Sample(f"s{idx:06d}", mods, label))
    logger.info(
        f"Generated {len(samples)} samples ({C} classes, modalities {','.join(modalities)}, "
        f"seed {config.seed})"
    )
    return Dataset(modalities, C, {m: d for m in modalities}, samples)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    """Floor each share of ``n``; hand leftovers to the largest fractional parts
    (earlier split wins ties)."""
    exact = [n * r for r in ratios]
    base = [math.floor(x + 1e-9) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - base[i]), i))
    leftover = n - sum(base)
    if leftover >= 0:
        for i in order[:leftover]:
            base[i] += 1
    else:
        for i in list(reversed(order))[:-leftover]:
            base[i] -= 1
    return base


def split_dataset(dataset: Dataset, ratios: Sequence[float] = (0.70, 0.10, 0.20),
                  seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then contiguous train/validation/test blocks."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    ids = dataset.ids
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n_train, n_val, _ = _largest_remainder(len(ids), ratios)
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
    )


# ---------------------------------------------------------------------------
# Document pooling
# ---------------------------------------------------------------------------

def _chunks(tokens: np.ndarray, chunk: int) -> List[np.ndarray]:
    if chunk < 1:
        raise ValueError(f"chunk size must be >= 1, got {chunk}")
    return [tokens[i:i + chunk] for i in range(0, tokens.shape[0], chunk)]


def chunk_tokens(tokens, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """One mean vector per non-overlapping chunk."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("chunk_tokens needs a non-empty 2-D token sequence")
    return np.stack([c.mean(axis=0) for c in _chunks(tokens, chunk)])


def chunk_pool_document(tokens, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Pool a document split into chunks into one vector.

    The chunk means are combined with weights proportional to chunk length,
    which equals the plain mean over every token.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("chunk_pool_document needs a non-empty 2-D token sequence")
    parts = _chunks(tokens, chunk)
    weights = np.array([p.shape[0] for p in parts], dtype=np.float64)
    means = np.stack([p.mean(axis=0) for p in parts])
    return (weights[:, None] * means).sum(axis=0) / weights.sum()


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _parse_record(raw: str, line_no: int):
    try:
        rec = json.loads(raw)
    except json.JSONDecodeError as e:
        raise IngestionError(f"invalid JSON ({e.msg})", line_no) from e
    if not isinstance(rec, dict):
        raise IngestionError("record must be a JSON object", line_no)
    for key in ("id", "label", "modalities"):
        if key not in rec:
            raise IngestionError(f"missing key '{key}'", line_no)
    if not isinstance(rec["id"], str) or not rec["id"]:
        raise IngestionError("'id' must be a non-empty string", line_no)
    label = rec["label"]
    if not isinstance(label, list) or not label or any(v not in (0, 1) for v in label):
        raise IngestionError("'label' must be a non-empty list of 0/1", line_no)
    if not isinstance(rec["modalities"], dict):
        raise IngestionError("'modalities' must be an object", line_no)
    tokens = {}
    for name, block in rec["modalities"].items():
        if not isinstance(block, dict) or "tokens" not in block:
            raise IngestionError(f"modality '{name}' needs a 'tokens' array", line_no)
        try:
            arr = np.array(block["tokens"], dtype=np.float64)
        except (ValueError, TypeError) as e:
            raise IngestionError(f"modality '{name}': ragged or non-numeric tokens", line_no) from e
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise IngestionError(
                f"modality '{name}': tokens must be a non-empty matrix, got shape {arr.shape}",
                line_no,
            )
        if not np.all(np.isfinite(arr)):
            raise IngestionError(f"modality '{name}': non-finite token values", line_no)
        tokens[name] = arr
    return rec["id"], np.array(label, dtype=np.int8), tokens


def load_embeddings(path, modalities: Optional[Sequence[str]] = None,
                    document_chunk: Optional[int] = None) -> Dataset:
    """Read a line-delimited embedding file into a Dataset.

    ``modalities`` pins the modality set (records naming others are errors);
    otherwise it is the union of the file's modality keys. With
    ``document_chunk`` set, text modalities are reduced to one token per chunk.
    """
    path = Path(path)
    records = []
    seen_ids = set()
    dims: Dict[str, Tuple[int, int]] = {}
    num_classes: Optional[int] = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            sample_id, label, tokens = _parse_record(raw, line_no)
            if sample_id in seen_ids:
                raise IngestionError(f"duplicate sample id '{sample_id}'", line_no)
            seen_ids.add(sample_id)
            if num_classes is None:
                num_classes = label.shape[0]
            elif label.shape[0] != num_classes:
                raise IngestionError(
                    f"label length {label.shape[0]} differs from earlier records ({num_classes})",
                    line_no,
                )
            for name, arr in tokens.items():
                if modalities is not None and name not in modalities:
                    raise IngestionError(f"unknown modality '{name}'", line_no)
                first = dims.setdefault(name, (arr.shape[1], line_no))
                if first[0] != arr.shape[1]:
                    raise IngestionError(
                        f"shape mismatch: modality '{name}' has dim {arr.shape[1]}, "
                        f"line {first[1]} had {first[0]}",
                        line_no,
                    )
            records.append((sample_id, label, tokens))

    order = tuple(modalities) if modalities is not None else ordered_modalities(dims)
    token_dims = {m: dims[m][0] if m in dims else 0 for m in order}
    samples = []
    for sample_id, label, tokens in records:
        mods = {}
        for m in order:
            if m in tokens:
                arr = tokens[m]
                if document_chunk and m in TEXT_MODALITIES:
                    arr = chunk_tokens(arr, document_chunk)
                mods[m] = ModalityTokens(m, arr, True)
            else:
                mods[m] = ModalityTokens.missing(m, token_dims[m])
        samples.append(Sample(sample_id, mods, label))
    logger.info(f"Loaded {len(samples)} samples from {path} (modalities {','.join(order)})")
    return Dataset(order, num_classes or 0, token_dims, samples)


def dataset_to_lines(dataset: Dataset) -> List[str]:
    lines = []
    for s in dataset:
        rec = {
            "id": s.sample_id,
            "label": [int(v) for v in s.label],
            "modalities": {
                m: {"tokens": t.tokens.tolist()} for m, t in s.modalities.items() if t.present
            },
        }
        lines.append(json.dumps(rec, allow_nan=False))
    return lines


def save_embeddings(dataset: Dataset, path) -> None:
    """Write ``dataset`` in the ingestion format (atomic replace)."""
    from src.config import _atomic_write_text
    lines = dataset_to_lines(dataset)
    _atomic_write_text(Path(path), "".join(line + "\n" for line in lines))
