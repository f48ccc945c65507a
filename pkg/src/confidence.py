"""Token-level confidence heads, temperature scaling, calibrated confidence γ.

Every token inherits its sample's label. A confidence head is a per-token
linear layer; its logits divided by a per-(modality, class) temperature give
σ(l/τ), and γ = max(σ(l/τ), 1 - σ(l/τ)) measures how decisive a token is.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, field_validator

from src.errors import ShapeError
from src.models import TrainingRecord
from src.numeric import Node, ParameterStore, Tape, adam_step, backward, bce_loss, sigmoid
from src.training import fit_early_stopping, minibatches
from src.unimodal import HEAD_INIT_SCALE, EncodedSplit

logger = logging.getLogger(__name__)

DEFAULT_ECE_BINS = 15
# Tokens per temperature-calibration minibatch.
CALIBRATION_BATCH = 64


# ---------------------------------------------------------------------------
# Confidence heads
# ---------------------------------------------------------------------------

@dataclass
class ConfidenceHead:
    modality: str
    store: ParameterStore

    @classmethod
    def init(cls, modality: str, num_classes: int, dim: int, seed: int = 0) -> "ConfidenceHead":
        rng = np.random.default_rng([seed, 2])
        store = ParameterStore()
        store.add("weight", HEAD_INIT_SCALE * rng.standard_normal((num_classes, dim)))
        store.add("bias", np.zeros(num_classes))
        return cls(modality, store)

    @property
    def dim(self) -> int:
        return self.store["weight"].shape[1]

    @property
    def num_classes(self) -> int:
        return self.store["weight"].shape[0]

    def forward(self, tape: Tape, tokens) -> Node:
        return tape.linear(tokens, tape.param("weight"), tape.param("bias"))


def token_logits(z: np.ndarray, head: ConfidenceHead) -> np.ndarray:
    """Raw logits l_i = W z_i + b, one row per token (T x C)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != head.dim:
        raise ShapeError(f"{head.modality} confidence head expects dim {head.dim}, got {z.shape}")
    return z @ head.store["weight"].T + head.store["bias"]


def _sample_tokens(split: EncodedSplit, modality: str) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Per present sample: its token matrix and its label broadcast to every token."""
    tokens, labels = [], []
    for s in split.samples:
        z = s.z[modality]
        if z is None:
            continue
        tokens.append(z)
        labels.append(np.broadcast_to(s.label.astype(np.float64), (z.shape[0], s.label.shape[0])))
    return tokens, labels


def token_dataset(split: EncodedSplit, modality: str) -> Tuple[np.ndarray, np.ndarray]:
    """All present tokens of ``modality`` stacked (N x d) with inherited labels (N x C)."""
    tokens, labels = _sample_tokens(split, modality)
    if not tokens:
        return np.zeros((0, 0)), np.zeros((0, split.num_classes))
    return np.concatenate(tokens), np.concatenate(labels)


def _token_bce(head: ConfidenceHead, tokens: np.ndarray, labels: np.ndarray) -> float:
    return bce_loss(sigmoid(token_logits(tokens, head)), labels)


def train_confidence_head(
    modality: str,
    train: EncodedSplit,
    val: EncodedSplit,
    lr: float = 1e-3,
    epochs: int = 20,
    batch: int = 16,
    patience: int = 15,
    seed: int = 0,
) -> Tuple[ConfidenceHead, TrainingRecord]:
    """Fit φ^(m) on every present token; keep the epoch with the lowest validation loss.

    ``batch`` counts samples; a minibatch holds all tokens of those samples.
    """
    per_sample, per_labels = _sample_tokens(train, modality)
    if not per_sample:
        raise ValueError(f"modality {modality} is absent from the entire training set")
    head = ConfidenceHead.init(modality, train.num_classes, per_sample[0].shape[1], seed)
    rng = np.random.default_rng([seed, 3])

    val_X, val_Y = token_dataset(val, modality)
    if val_X.shape[0] == 0:
        logger.warning(f"{modality}: no validation tokens; selecting on training loss")
        val_X, val_Y = np.concatenate(per_sample), np.concatenate(per_labels)

    def train_epoch(_epoch: int) -> float:
        losses = []
        for idx in minibatches(len(per_sample), batch, rng):
            X = np.concatenate([per_sample[i] for i in idx])
            Y = np.concatenate([per_labels[i] for i in idx])
            tape = Tape(head.store)
            loss = tape.bce(tape.sigmoid(head.forward(tape, X)), Y)
            backward(tape, loss)
            adam_step(head.store, lr)
            losses.append(float(loss.value))
        return float(np.mean(losses))

    def validate() -> float:
        return -_token_bce(head, val_X, val_Y)

    record = fit_early_stopping(f"confidence:{modality}", head.store, train_epoch, validate,
                                lr, epochs, patience)
    return head, record


def train_confidence_heads(
    train: EncodedSplit,
    val: EncodedSplit,
    modalities: Optional[Sequence[str]] = None,
    lr: float = 1e-3,
    epochs: int = 20,
    batch: int = 16,
    patience: int = 15,
    seed: int = 0,
) -> Tuple[Dict[str, ConfidenceHead], Dict[str, TrainingRecord]]:
    heads, records = {}, {}
    for m in modalities or train.modalities:
        heads[m], records[m] = train_confidence_head(m, train, val, lr, epochs, batch,
                                                     patience, seed)
    return heads, records


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def calibrated_confidence(l, tau):
    """γ = max(σ(l/τ), 1 - σ(l/τ))."""
    tau_arr = np.asarray(tau, dtype=np.float64)
    if np.any(tau_arr <= 0):
        raise ValueError(f"temperature must be positive, got {tau}")
    # σ(|l|/τ) == max(σ(l/τ), 1 - σ(l/τ)), exactly even in l -> -l
    return sigmoid(np.abs(np.asarray(l, dtype=np.float64)) / tau_arr)


def expected_calibration_error(confidences, correct, bins: int = DEFAULT_ECE_BINS) -> float:
    """Equal-width binned ECE over [0.5, 1]; empty bins contribute nothing."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise ValueError("ECE of an empty input")
    if conf.shape != hit.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    width = 0.5 / bins
    idx = np.clip(np.floor((conf - 0.5) / width).astype(np.int64), 0, bins - 1)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    hit_sum = np.bincount(idx, weights=hit, minlength=bins)
    filled = count > 0
    gap = np.abs(hit_sum[filled] - conf_sum[filled])  # n_b * |acc_b - conf_b|
    return float(gap.sum() / conf.size)


def logits_ece(logits, labels, tau: float = 1.0, bins: int = DEFAULT_ECE_BINS) -> float:
    """ECE of one class's token logits at temperature ``tau``."""
    l = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    correct = (l >= 0.0) == (y == 1)
    return expected_calibration_error(calibrated_confidence(l, tau), correct, bins)


class TemperatureParams(BaseModel):
    """τ per modality per class, persisted as {"modality": {"class_index": tau}}."""
    values: Dict[str, Dict[str, float]] = {}

    @field_validator("values")
    @classmethod
    def _positive(cls, v):
        for m, per_class in v.items():
            for c, tau in per_class.items():
                if not (tau > 0 and math.isfinite(tau)):
                    raise ValueError(f"temperature {m}[{c}] must be positive, got {tau}")
        return v

    @classmethod
    def ones(cls, modalities: Sequence[str], num_classes: int) -> "TemperatureParams":
        return cls(values={m: {str(c): 1.0 for c in range(num_classes)} for m in modalities})

    def tau(self, modality: str) -> np.ndarray:
        per_class = self.values[modality]
        return np.array([per_class[str(c)] for c in range(len(per_class))], dtype=np.float64)

    def to_json_file(self, filepath) -> None:
        from src.config import _atomic_write_json
        _atomic_write_json(Path(filepath), self.values)

    @classmethod
    def from_json_file(cls, filepath) -> 'TemperatureParams':
        with open(filepath, 'r', encoding='utf-8') as f:
            return cls(values=json.load(f))


def calibrate_modality(
    logits: np.ndarray,
    labels: np.ndarray,
    epochs: int = 5,
    lr: float = 0.05,
    bins: int = DEFAULT_ECE_BINS,
    seed: int = 0,
    modality: str = "",
) -> np.ndarray:
    """Per-class τ for one modality's validation token logits (N x C).

    Adam descends the NLL of σ(l/τ) in log τ; after each epoch the current τ
    joins the candidate set, which starts with τ = 1. Each class keeps the
    candidate with the lowest ECE (earliest on ties).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.ndim != 2 or logits.shape != labels.shape:
        raise ShapeError(f"calibration logits {logits.shape} vs labels {labels.shape}")
    n, C = logits.shape
    tau = np.ones(C)
    if n == 0:
        logger.warning(f"{modality}: no validation tokens; temperatures fixed at 1")
        return tau
    degenerate = np.array([np.unique(labels[:, c]).size < 2 for c in range(C)])
    for c in np.flatnonzero(degenerate):
        logger.warning(f"{modality} class {c}: single label value in validation; τ fixed at 1")

    store = ParameterStore.from_arrays({"log_tau": np.zeros(C)})
    rng = np.random.default_rng([seed, 4])
    candidates = [np.ones(C)]
    for _ in range(epochs):
        for idx in minibatches(n, CALIBRATION_BATCH, rng):
            tape = Tape(store)
            inv_tau = tape.exp(tape.neg(tape.param("log_tau")))
            p = tape.sigmoid(tape.mul(logits[idx], inv_tau))
            backward(tape, tape.bce(p, labels[idx]))
            adam_step(store, lr)
        candidates.append(np.exp(store["log_tau"]))

    for c in range(C):
        if degenerate[c]:
            continue
        eces = [logits_ece(logits[:, c], labels[:, c], cand[c], bins) for cand in candidates]
        best = int(np.argmin(eces))
        tau[c] = candidates[best][c]
        logger.debug(f"{modality} class {c}: τ={tau[c]:.4f} (ECE {eces[0]:.4f} -> {eces[best]:.4f})")
    return tau


def calibrate_temperature(
    val_logits: Dict[str, np.ndarray],
    val_labels: Dict[str, np.ndarray],
    epochs: int = 5,
    lr: float = 0.05,
    bins: int = DEFAULT_ECE_BINS,
    seed: int = 0,
) -> TemperatureParams:
    values = {}
    for m, logits in val_logits.items():
        tau = calibrate_modality(logits, val_labels[m], epochs, lr, bins, seed, m)
        values[m] = {str(c): float(t) for c, t in enumerate(tau)}
        logger.info(f"Calibrated {m}: τ = {', '.join(f'{t:.3f}' for t in tau)}")
    return TemperatureParams(values=values)


def calibration_rows(
    val_logits: Dict[str, np.ndarray],
    val_labels: Dict[str, np.ndarray],
    temps: TemperatureParams,
    bins: int = DEFAULT_ECE_BINS,
) -> List[Dict[str, object]]:
    """Per (modality, class): τ and validation ECE before and after scaling."""
    rows = []
    for m, logits in val_logits.items():
        taus = temps.tau(m)
        for c in range(logits.shape[1]):
            if logits.shape[0] == 0:
                continue
            rows.append({
                "modality": m,
                "class": c,
                "tau": float(taus[c]),
                "ece_before": logits_ece(logits[:, c], val_labels[m][:, c], 1.0, bins),
                "ece_after": logits_ece(logits[:, c], val_labels[m][:, c], taus[c], bins),
            })
    return rows


# ---------------------------------------------------------------------------
# Entropy
# ---------------------------------------------------------------------------

def token_entropy(p) -> float:
    """Shannon entropy in bits of one probability vector (0 log 0 = 0)."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size == 0 or np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"not a probability vector: {p}")
    nz = p[p > 0]
    return float(max(0.0, -(nz * np.log2(nz)).sum()))


def binary_entropy(q) -> np.ndarray:
    """Elementwise H(q, 1 - q) in bits."""
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(q * np.log2(q) + (1.0 - q) * np.log2(1.0 - q))
    return np.where((q <= 0.0) | (q >= 1.0), 0.0, h)


def token_confidence(z: np.ndarray, head: ConfidenceHead, tau: np.ndarray) -> np.ndarray:
    """Confidence map of one modality: γ per token and class (T x C)."""
    return calibrated_confidence(token_logits(z, head), tau)


def token_entropies(z: np.ndarray, head: ConfidenceHead, tau: np.ndarray) -> np.ndarray:
    """Binary entropy of σ(l/τ) per token and class (T x C)."""
    return binary_entropy(sigmoid(token_logits(z, head) / tau))
