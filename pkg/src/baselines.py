"""Fusion baselines: early, joint, late-average and top-k ensembles.

Early and joint fusion both classify the concatenation of mean-pooled
per-modality embeddings (zeros for a missing modality). Early fusion uses the
frozen encoder outputs; joint fusion trains the encoders along with the
classifier, starting from the stub weights.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.data import Dataset
from src.errors import ConfigError
from src.metrics import selection_auroc
from src.models import TrainingRecord
from src.numeric import Node, ParameterStore, Tape, adam_step, backward, sigmoid
from src.training import fit_early_stopping, minibatches
from src.unimodal import EncodedSplit, EncoderStub

logger = logging.getLogger(__name__)

BASELINE_KINDS = ("early", "joint", "late", "ensemble")
ENSEMBLE_SIZE = 3
EVAL_BLOCK = 512


def _concat_pooled(split: EncodedSplit, modalities: Sequence[str]) -> np.ndarray:
    return np.concatenate([split.pooled(m)[1] for m in modalities], axis=1)


# ---------------------------------------------------------------------------
# Early fusion
# ---------------------------------------------------------------------------

@dataclass
class EarlyFusionModel:
    modalities: Tuple[str, ...]
    store: ParameterStore

    @classmethod
    def init(cls, modalities: Sequence[str], dims: Dict[str, int], num_classes: int,
             seed: int = 0) -> "EarlyFusionModel":
        rng = np.random.default_rng([seed, 7])
        total = sum(dims[m] for m in modalities)
        store = ParameterStore()
        store.add("weight", 0.01 * rng.standard_normal((num_classes, total)))
        store.add("bias", np.zeros(num_classes))
        return cls(tuple(modalities), store)

    def forward(self, tape: Tape, x) -> Node:
        return tape.sigmoid(tape.linear(x, tape.param("weight"), tape.param("bias")))

    def predict(self, split: EncodedSplit) -> np.ndarray:
        x = _concat_pooled(split, self.modalities)
        return np.asarray(sigmoid(x @ self.store["weight"].T + self.store["bias"]),
                          dtype=np.float64).reshape(len(split), -1)


def train_early_fusion(train: EncodedSplit, val: EncodedSplit, dims: Dict[str, int], lr: float,
                       max_epochs: int = 100, patience: int = 15, batch: int = 16,
                       seed: int = 0) -> Tuple[EarlyFusionModel, TrainingRecord]:
    model = EarlyFusionModel.init(train.modalities, dims, train.num_classes, seed)
    X = _concat_pooled(train, model.modalities)
    Y = train.labels()
    rng = np.random.default_rng([seed, 8])

    def train_epoch(_epoch: int) -> float:
        losses = []
        for idx in minibatches(X.shape[0], batch, rng):
            tape = Tape(model.store)
            loss = tape.bce(model.forward(tape, X[idx]), Y[idx])
            backward(tape, loss)
            adam_step(model.store, lr)
            losses.append(float(loss.value))
        return float(np.mean(losses))

    def validate() -> float:
        return selection_auroc(model.predict(val), val.labels()) if len(val) else 0.5

    record = fit_early_stopping("baseline:early", model.store, train_epoch, validate,
                                lr, max_epochs, patience)
    return model, record


# ---------------------------------------------------------------------------
# Joint fusion
# ---------------------------------------------------------------------------

@dataclass
class _TokenBatch:
    tokens: Dict[str, np.ndarray]  # all tokens of the batch, stacked
    average: Dict[str, np.ndarray]  # B x N_tokens segment-mean matrix
    labels: np.ndarray


def _token_batch(dataset: Dataset, idx: Sequence[int], modalities: Sequence[str]) -> _TokenBatch:
    tokens, average = {}, {}
    for m in modalities:
        rows, counts = [], []
        for i in idx:
            t = dataset[i].tokens(m)
            rows.append(t)
            counts.append(t.shape[0])
        total = sum(counts)
        A = np.zeros((len(idx), total))
        offset = 0
        for b, n in enumerate(counts):
            if n:
                A[b, offset:offset + n] = 1.0 / n
            offset += n
        tokens[m] = np.concatenate(rows) if total else np.zeros((0, dataset.token_dims[m]))
        average[m] = A
    labels = np.stack([dataset[i].label for i in idx]).astype(np.float64)
    return _TokenBatch(tokens, average, labels)


@dataclass
class JointFusionModel:
    modalities: Tuple[str, ...]
    store: ParameterStore

    @classmethod
    def init(cls, encoders: Dict[str, EncoderStub], modalities: Sequence[str], num_classes: int,
             seed: int = 0) -> "JointFusionModel":
        rng = np.random.default_rng([seed, 9])
        store = ParameterStore()
        for m in modalities:
            store.add(f"enc.{m}.weight", encoders[m].weight)
            store.add(f"enc.{m}.bias", encoders[m].bias)
        total = sum(encoders[m].d_out for m in modalities)
        store.add("weight", 0.01 * rng.standard_normal((num_classes, total)))
        store.add("bias", np.zeros(num_classes))
        return cls(tuple(modalities), store)

    def forward(self, tape: Tape, batch: _TokenBatch) -> Node:
        pooled = []
        for m in self.modalities:
            w = tape.param(f"enc.{m}.weight")
            if batch.tokens[m].shape[0] == 0:
                pooled.append(tape.const(np.zeros((batch.labels.shape[0], w.shape[0]))))
                continue
            z = tape.tanh(tape.linear(batch.tokens[m], w, tape.param(f"enc.{m}.bias")))
            pooled.append(tape.matmul(batch.average[m], z))
        x = tape.concat(pooled, axis=-1)
        return tape.sigmoid(tape.linear(x, tape.param("weight"), tape.param("bias")))

    def predict(self, dataset: Dataset) -> np.ndarray:
        parts = []
        for start in range(0, len(dataset), EVAL_BLOCK):
            idx = list(range(start, min(len(dataset), start + EVAL_BLOCK)))
            parts.append(self.forward(Tape(self.store), _token_batch(dataset, idx, self.modalities)).value)
        if not parts:
            return np.zeros((0, self.store["bias"].shape[0]))
        return np.concatenate(parts)


def train_joint_fusion(train: Dataset, val: Dataset, encoders: Dict[str, EncoderStub], lr: float,
                       max_epochs: int = 100, patience: int = 15, batch: int = 16,
                       seed: int = 0) -> Tuple[JointFusionModel, TrainingRecord]:
    model = JointFusionModel.init(encoders, train.modalities, train.num_classes, seed)
    rng = np.random.default_rng([seed, 10])

    def train_epoch(_epoch: int) -> float:
        losses = []
        for idx in minibatches(len(train), batch, rng):
            tb = _token_batch(train, idx, model.modalities)
            tape = Tape(model.store)
            loss = tape.bce(model.forward(tape, tb), tb.labels)
            backward(tape, loss)
            adam_step(model.store, lr)
            losses.append(float(loss.value))
        return float(np.mean(losses))

    def validate() -> float:
        return selection_auroc(model.predict(val), val.labels()) if len(val) else 0.5

    record = fit_early_stopping("baseline:joint", model.store, train_epoch, validate,
                                lr, max_epochs, patience)
    return model, record


# ---------------------------------------------------------------------------
# Late average and ensembles
# ---------------------------------------------------------------------------

def late_average(unimodal: Dict[str, np.ndarray]) -> np.ndarray:
    """Unweighted mean of unimodal predictions (already 0.5-imputed where missing)."""
    if not unimodal:
        raise ConfigError("late baseline needs at least one unimodal prediction")
    return np.mean(np.stack(list(unimodal.values())), axis=0)


@dataclass
class EnsembleMember:
    name: str
    val_score: float
    predictions: np.ndarray


def top_members(members: Sequence[EnsembleMember], k: int = ENSEMBLE_SIZE) -> List[EnsembleMember]:
    """Best ``k`` by validation score; ties keep the earlier member."""
    if len(members) < k:
        raise ValueError(f"ensemble needs at least {k} members, got {len(members)}")
    ranked = sorted(range(len(members)), key=lambda i: (-members[i].val_score, i))
    return [members[i] for i in ranked[:k]]


def ensemble_predict(members: Sequence[EnsembleMember], k: int = ENSEMBLE_SIZE) -> np.ndarray:
    chosen = top_members(members, k)
    logger.debug(f"ensemble members: {', '.join(m.name for m in chosen)}")
    stacked = np.stack([m.predictions for m in chosen])
    # Offsets from the first member, so identical members average to that member exactly.
    return stacked[0] + np.mean(stacked - stacked[0], axis=0)


def baseline_predict(kind: str, *, model=None, split: Optional[EncodedSplit] = None,
                     dataset: Optional[Dataset] = None,
                     unimodal: Optional[Dict[str, np.ndarray]] = None,
                     members: Optional[Sequence[EnsembleMember]] = None) -> np.ndarray:
    """Dispatch on baseline kind; each kind reads only the inputs it needs."""
    if kind == "early":
        return model.predict(split)
    if kind == "joint":
        return model.predict(dataset)
    if kind == "late":
        return late_average(unimodal)
    if kind == "ensemble":
        return ensemble_predict(members or [])
    raise ConfigError(f"unknown baseline kind: {kind} (expected one of {', '.join(BASELINE_KINDS)})")
