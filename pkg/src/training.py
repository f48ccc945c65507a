"""Minibatch training with early stopping, and random learning-rate sweeps.

Every trainable stage (unimodal heads, confidence heads, fusion, the early
and joint baselines) runs through ``fit_early_stopping``: one callback trains
an epoch and returns its mean loss, another scores the validation split
(higher is better). The parameters of the best epoch are restored at the end.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Generic, Iterator, List, Optional, Tuple, TypeVar

import numpy as np

from src._heartbeat import _emit_heartbeat
from src.errors import ConfigError
from src.models import EpochRecord, TrainingRecord
from src.numeric import ParameterStore

logger = logging.getLogger(__name__)

T = TypeVar("T")


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches covering ``range(n)`` once."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def fit_early_stopping(
    name: str,
    store: ParameterStore,
    train_epoch: Callable[[int], float],
    validate: Callable[[], float],
    lr: float,
    max_epochs: int = 100,
    patience: int = 15,
) -> TrainingRecord:
    """Train until ``patience`` epochs pass without a better validation score.

    Ties do not count as improvement, so the earliest best epoch is kept.
    """
    if max_epochs < 1 or patience < 1:
        raise ValueError("max_epochs and patience must be >= 1")
    best_score = -math.inf
    best_epoch = 0
    best_state = store.state_dict()
    history: List[EpochRecord] = []
    since_best = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        loss = float(train_epoch(epoch))
        score = float(validate())
        history.append(EpochRecord(epoch=epoch, train_loss=loss, val_score=score))
        _emit_heartbeat(name, epoch, max_epochs)
        if score > best_score:
            best_score, best_epoch, since_best = score, epoch, 0
            best_state = store.state_dict()
        else:
            since_best += 1
        logger.debug(f"{name} epoch {epoch}: loss {loss:.5f} val {score:.5f}")
        if since_best >= patience:
            break
    store.load_state_dict(best_state)
    store.zero_grad()
    stopped = epoch < max_epochs
    logger.info(
        f"{name}: best epoch {best_epoch} (val {best_score:.4f}) after {epoch} epochs"
        + (" [early stop]" if stopped else "")
    )
    return TrainingRecord(
        name=name,
        lr=lr,
        best_epoch=best_epoch,
        best_score=best_score,
        epochs_run=epoch,
        stopped_early=stopped,
        history=history,
    )


def sample_learning_rates(bounds: Tuple[float, float], sweeps: int, seed: int) -> List[float]:
    """Log-uniform draws between the bounds."""
    if sweeps < 1:
        raise ConfigError(f"sweeps must be >= 1, got {sweeps}")
    lo, hi = bounds
    if not (0 < lo < hi):
        raise ConfigError(f"learning-rate bounds must satisfy 0 < lo < hi, got {bounds}")
    rng = np.random.default_rng(seed)
    draws = rng.uniform(math.log(lo), math.log(hi), size=sweeps)
    return [float(min(hi, max(lo, math.exp(x)))) for x in draws]


@dataclass
class SweepResult(Generic[T]):
    members: List[Tuple[T, TrainingRecord]] = field(default_factory=list)
    best_index: int = 0

    @property
    def best(self) -> T:
        return self.members[self.best_index][0]

    @property
    def best_record(self) -> TrainingRecord:
        return self.members[self.best_index][1]

    def top(self, k: int) -> List[Tuple[T, TrainingRecord]]:
        """The ``k`` members with the highest validation score (stable on ties)."""
        ranked = sorted(range(len(self.members)),
                        key=lambda i: (-self.members[i][1].best_score, i))
        return [self.members[i] for i in ranked[:k]]


def lr_sweep(
    trainer: Callable[[float, int], Tuple[T, TrainingRecord]],
    bounds: Tuple[float, float] = (1e-5, 1e-3),
    sweeps: int = 10,
    seed: int = 0,
    name: Optional[str] = None,
) -> SweepResult:
    """Run ``trainer(lr, member_seed)`` per sampled lr; keep the best by validation score."""
    lrs = sample_learning_rates(bounds, sweeps, seed)
    result: SweepResult = SweepResult()
    best_score = -math.inf
    for i, lr in enumerate(lrs):
        model, record = trainer(lr, seed * 1000 + i)
        result.members.append((model, record))
        if record.best_score > best_score:
            best_score = record.best_score
            result.best_index = i
    label = name or "sweep"
    logger.info(
        f"{label}: selected lr {lrs[result.best_index]:.3e} "
        f"(val {best_score:.4f}) from {sweeps} sweep(s)"
    )
    return result
