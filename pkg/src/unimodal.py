"""Frozen encoder stubs and the per-modality unimodal heads g_m.

An encoder stub is a fixed random linear map followed by tanh, applied per
token. Heads are single linear layers over the mean-pooled token embedding
and are trained with BCE on the samples where the modality is present.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.data import MODALITY_ORDER, Dataset, ModalityTokens
from src.errors import MissingModalityError, ShapeError
from src.metrics import selection_auroc
from src.models import TrainingRecord
from src.numeric import Node, ParameterStore, Tape, adam_step, backward, sigmoid
from src.training import fit_early_stopping, minibatches

logger = logging.getLogger(__name__)

# Scale of the encoder bias draw; weights use 1/sqrt(d_in).
ENCODER_BIAS_SCALE = 0.1
HEAD_INIT_SCALE = 0.01


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EncoderStub:
    modality: str
    weight: np.ndarray  # d_m x d_in
    bias: np.ndarray  # d_m
    seed: int = 0
    activation: bool = True

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64, copy=True)
        b = np.array(self.bias, dtype=np.float64, copy=True)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"{self.modality}: encoder weight {w.shape} / bias {b.shape}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def random(cls, modality: str, d_in: int, d_out: int, seed: int) -> "EncoderStub":
        idx = MODALITY_ORDER.index(modality) if modality in MODALITY_ORDER else \
            int.from_bytes(hashlib.sha256(modality.encode("utf-8")).digest()[:4], "little")
        rng = np.random.default_rng([seed, idx])
        w = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        b = ENCODER_BIAS_SCALE * rng.standard_normal(d_out)
        return cls(modality, w, b, seed)

    @classmethod
    def identity(cls, modality: str, dim: int) -> "EncoderStub":
        """Identity weights, zero bias, tanh kept."""
        return cls(modality, np.eye(dim), np.zeros(dim))

    @classmethod
    def passthrough(cls, modality: str, dim: int) -> "EncoderStub":
        """No-op encoder for embedding files that already hold encoder outputs."""
        return cls(modality, np.eye(dim), np.zeros(dim), activation=False)

    def apply(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[1] != self.d_in:
            raise ShapeError(f"{self.modality}: encoder expects dim {self.d_in}, got {tokens.shape}")
        if not self.activation:
            return tokens.copy()
        return np.tanh(tokens @ self.weight.T + self.bias)

    def to_store(self) -> ParameterStore:
        return ParameterStore.from_arrays({"weight": self.weight, "bias": self.bias})


def encode(x: ModalityTokens, stub: EncoderStub) -> np.ndarray:
    """z^(m) for one present modality."""
    if not x.present:
        raise MissingModalityError(f"cannot encode missing modality {x.modality}")
    return stub.apply(x.tokens)


def make_encoders(modalities: Sequence[str], token_dims: Dict[str, int], embed_dim: int,
                  seed: int, kind: str = "stub") -> Dict[str, EncoderStub]:
    encoders = {}
    for m in modalities:
        if kind == "identity":
            encoders[m] = EncoderStub.passthrough(m, token_dims[m])
        elif kind == "stub":
            encoders[m] = EncoderStub.random(m, token_dims[m], embed_dim, seed)
        else:
            raise ValueError(f"unknown encoder kind: {kind}")
    return encoders


def encoders_store(encoders: Dict[str, EncoderStub]) -> ParameterStore:
    store = ParameterStore()
    for m, stub in encoders.items():
        store.add(f"{m}.weight", stub.weight)
        store.add(f"{m}.bias", stub.bias)
    return store


def encoders_from_store(store: ParameterStore, modalities: Sequence[str],
                        kind: str = "stub") -> Dict[str, EncoderStub]:
    return {
        m: EncoderStub(m, store[f"{m}.weight"], store[f"{m}.bias"], activation=(kind == "stub"))
        for m in modalities
    }


# ---------------------------------------------------------------------------
# Encoded samples
# ---------------------------------------------------------------------------

@dataclass
class EncodedSample:
    sample_id: str
    z: Dict[str, Optional[np.ndarray]]  # None when the modality is missing
    availability: np.ndarray
    label: np.ndarray


@dataclass
class EncodedSplit:
    """Encoded samples of one split, with per-modality pooled views cached."""
    modalities: Tuple[str, ...]
    samples: List[EncodedSample]
    num_classes: int
    _pooled: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    def labels(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.num_classes), dtype=np.float64)
        return np.stack([s.label for s in self.samples]).astype(np.float64)

    def availability(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(self.modalities)), dtype=np.float64)
        return np.stack([s.availability for s in self.samples]).astype(np.float64)

    def dim(self, modality: str) -> int:
        for s in self.samples:
            if s.z[modality] is not None:
                return s.z[modality].shape[1]
        raise MissingModalityError(f"modality {modality} is absent from every sample")

    def pooled(self, modality: str) -> Tuple[np.ndarray, np.ndarray]:
        """(present mask, n x d mean-pooled embeddings with zero rows where missing)."""
        if modality not in self._pooled:
            mask = np.array([s.z[modality] is not None for s in self.samples], dtype=bool)
            d = self.dim(modality) if mask.any() else 0
            out = np.zeros((len(self.samples), d))
            for i, s in enumerate(self.samples):
                if mask[i]:
                    out[i] = s.z[modality].mean(axis=0)
            self._pooled[modality] = (mask, out)
        return self._pooled[modality]

    def subset(self, index: Sequence[int]) -> "EncodedSplit":
        return EncodedSplit(self.modalities, [self.samples[i] for i in index], self.num_classes)


def encode_dataset(dataset: Dataset, encoders: Dict[str, EncoderStub]) -> EncodedSplit:
    samples = []
    for s in dataset:
        z = {m: encode(s.modalities[m], encoders[m]) if s.has(m) else None
             for m in dataset.modalities}
        samples.append(EncodedSample(s.sample_id, z, s.availability, s.label))
    return EncodedSplit(tuple(dataset.modalities), samples, dataset.num_classes)


# ---------------------------------------------------------------------------
# Unimodal heads
# ---------------------------------------------------------------------------

@dataclass
class UnimodalHead:
    modality: str
    store: ParameterStore
    trained: bool = False

    @classmethod
    def init(cls, modality: str, num_classes: int, dim: int, seed: int = 0) -> "UnimodalHead":
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        store.add("weight", HEAD_INIT_SCALE * rng.standard_normal((num_classes, dim)))
        store.add("bias", np.zeros(num_classes))
        return cls(modality, store)

    @property
    def num_classes(self) -> int:
        return self.store["weight"].shape[0]

    @property
    def dim(self) -> int:
        return self.store["weight"].shape[1]

    def logits_pooled(self, pooled: np.ndarray) -> np.ndarray:
        pooled = np.asarray(pooled, dtype=np.float64)
        if pooled.shape[-1] != self.dim:
            raise ShapeError(f"{self.modality} head expects dim {self.dim}, got {pooled.shape[-1]}")
        return pooled @ self.store["weight"].T + self.store["bias"]

    def predict_pooled(self, pooled: np.ndarray) -> np.ndarray:
        return np.asarray(sigmoid(self.logits_pooled(pooled)), dtype=np.float64)

    def forward(self, tape: Tape, pooled) -> Node:
        return tape.sigmoid(tape.linear(pooled, tape.param("weight"), tape.param("bias")))


def unimodal_predict(z: np.ndarray, head: UnimodalHead) -> np.ndarray:
    """ŷ^(m) = sigmoid(W meanpool(z) + b)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ShapeError(f"expected a non-empty token matrix, got {z.shape}")
    return head.predict_pooled(z.mean(axis=0))


def predict_split(head: UnimodalHead, split: EncodedSplit, impute: float = 0.5) -> np.ndarray:
    """n x C predictions, ``impute`` where the modality is missing."""
    mask, pooled = split.pooled(head.modality)
    out = np.full((len(split), head.num_classes), impute, dtype=np.float64)
    if mask.any():
        out[mask] = head.predict_pooled(pooled[mask])
    return out


def pretrain_unimodal(
    modality: str,
    train: EncodedSplit,
    val: EncodedSplit,
    lr: float,
    max_epochs: int = 100,
    patience: int = 15,
    batch: int = 16,
    seed: int = 0,
) -> Tuple[UnimodalHead, TrainingRecord]:
    """Fit g_m on the samples where ``modality`` is present."""
    mask, pooled = train.pooled(modality)
    if not mask.any():
        raise ValueError(f"no training sample has modality {modality} present")
    X = pooled[mask]
    Y = train.labels()[mask]
    head = UnimodalHead.init(modality, train.num_classes, X.shape[1], seed)
    rng = np.random.default_rng([seed, 1])

    val_mask, val_pooled = val.pooled(modality) if len(val) else (np.zeros(0, bool), None)
    val_X = val_pooled[val_mask] if val_mask.any() else None
    val_Y = val.labels()[val_mask] if val_mask.any() else None

    def train_epoch(_epoch: int) -> float:
        losses = []
        for idx in minibatches(X.shape[0], batch, rng):
            tape = Tape(head.store)
            loss = tape.bce(head.forward(tape, X[idx]), Y[idx])
            backward(tape, loss)
            adam_step(head.store, lr)
            losses.append(float(loss.value))
        return float(np.mean(losses))

    def validate() -> float:
        if val_X is None:
            return 0.5
        return selection_auroc(head.predict_pooled(val_X), val_Y)

    record = fit_early_stopping(f"pretrain:{modality}", head.store, train_epoch, validate,
                                lr, max_epochs, patience)
    head.trained = True
    return head, record
