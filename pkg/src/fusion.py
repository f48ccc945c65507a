"""Missingness head, learnable late fusion and end-to-end fusion training.

The fused predictor set is ordered ``high, low, miss, <modalities...>``.
Unimodal predictions enter as constants (their heads stay frozen) with 0.5
imputed for missing modalities. α is K x C with a softmax over K per class;
β weights the late, high and low loss terms.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import AbsentOutputError, ConfigError, ShapeError
from src.metrics import selection_auroc
from src.models import TrainingRecord
from src.numeric import (
    Node,
    ParameterStore,
    Tape,
    adam_step,
    backward,
    bce_loss,
    sigmoid,
    softmax,
)
from src.patching import PatchedSplit
from src.training import fit_early_stopping, minibatches

logger = logging.getLogger(__name__)

IMPUTED_PREDICTION = 0.5
LOSS_TERMS = ("late", "high", "low")
JOINT_PREDICTORS = ("high", "low")
# Forward passes at evaluation time run over row blocks of this size.
EVAL_BLOCK = 512


# ---------------------------------------------------------------------------
# Missingness classifier
# ---------------------------------------------------------------------------

@dataclass
class MissingnessHead:
    weight: np.ndarray  # C x M
    bias: np.ndarray  # C


def _check_binary(a: np.ndarray) -> None:
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"missingness vector must be binary, got {a}")


def missingness_predict(a, head: MissingnessHead) -> np.ndarray:
    """ŷ_miss = sigmoid(W a + b)."""
    a = np.asarray(a, dtype=np.float64)
    _check_binary(a)
    if a.shape[-1] != head.weight.shape[1]:
        raise ShapeError(f"missingness head expects {head.weight.shape[1]} modalities, got {a.shape[-1]}")
    return np.asarray(sigmoid(a @ head.weight.T + head.bias), dtype=np.float64)


# ---------------------------------------------------------------------------
# Late fusion and loss
# ---------------------------------------------------------------------------

@dataclass
class AlphaWeights:
    raw: np.ndarray  # K x C

    def effective(self) -> np.ndarray:
        return softmax(self.raw, axis=0)


@dataclass
class BetaWeights:
    raw: np.ndarray  # (late, high, low)

    def effective(self) -> np.ndarray:
        return softmax(self.raw)


def late_fuse(preds, alpha: AlphaWeights) -> np.ndarray:
    """Per class c: sum_k softmax(α[:, c])_k * preds[k, c]."""
    preds = np.asarray(preds, dtype=np.float64)
    raw = np.asarray(alpha.raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    if preds.ndim == 1:
        preds = preds[:, None]
    if preds.shape[0] != raw.shape[0]:
        raise ConfigError(f"{preds.shape[0]} predictions for {raw.shape[0]} fusion weights")
    return (softmax(raw, axis=0) * preds).sum(axis=0)


def total_loss(y, late, high, low, beta: BetaWeights, low_target: str = "low") -> float:
    """softmax(β)-weighted BCE of the late, high and low predictions."""
    low_pred = low if low_target == "low" else late
    terms = np.array([bce_loss(late, y), bce_loss(high, y), bce_loss(low_pred, y)])
    return float(beta.effective() @ terms)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionVariant:
    setting: int
    fused: Tuple[str, ...]  # predictor kinds; "unimodal" expands to the modality list
    calibrated: bool = True
    loss_terms: Tuple[str, ...] = LOSS_TERMS

    @property
    def uses_patching(self) -> bool:
        return "high" in self.fused

    def predictors(self, modalities: Sequence[str]) -> List[str]:
        out: List[str] = []
        for kind in self.fused:
            out.extend(modalities if kind == "unimodal" else [kind])
        return out


_VARIANTS = {
    0: FusionVariant(0, ("high", "low", "miss", "unimodal")),
    1: FusionVariant(1, ("high", "low", "miss")),
    2: FusionVariant(2, ("high", "low", "unimodal")),
    3: FusionVariant(3, ("high", "low", "miss", "unimodal"), calibrated=False),
    4: FusionVariant(4, ("miss", "unimodal"), loss_terms=("late",)),
}


def ablation_variant(setting: int) -> FusionVariant:
    """0 is the full model; 1-4 each remove one component."""
    try:
        return _VARIANTS[int(setting)]
    except (KeyError, ValueError, TypeError):
        raise ConfigError(f"unknown ablation setting: {setting}") from None


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

@dataclass
class FusionOutputs:
    unimodal: Dict[str, np.ndarray] = field(default_factory=dict)
    high: Optional[np.ndarray] = None
    low: Optional[np.ndarray] = None
    miss: Optional[np.ndarray] = None
    late: Optional[np.ndarray] = None

    def require(self, name: str) -> np.ndarray:
        value = self.unimodal.get(name) if name in self.unimodal else getattr(self, name, None)
        if value is None:
            raise AbsentOutputError(f"output '{name}' is not produced by this model configuration")
        return value

    @property
    def combined(self) -> np.ndarray:
        return derived_predictions(self)[0]

    @property
    def reduced(self) -> np.ndarray:
        return derived_predictions(self)[1]

    def components(self) -> Dict[str, np.ndarray]:
        """Every available prediction, derived ones included when computable."""
        out = {name: v for name, v in (("late", self.late), ("high", self.high),
                                       ("low", self.low), ("miss", self.miss)) if v is not None}
        if all(k in out for k in ("late", "high", "low")):
            out["combined"], out["reduced"] = derived_predictions(self)
        out.update(self.unimodal)
        return out


def derived_predictions(outputs: FusionOutputs) -> Tuple[np.ndarray, np.ndarray]:
    """(ŷ_combined, ŷ_reduced) = ((high + late + low) / 3, (high + late) / 2)."""
    high = outputs.require("high")
    late = outputs.require("late")
    low = outputs.require("low")
    return (high + late + low) / 3.0, (high + late) / 2.0


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class FusionInputs:
    """Frozen-stage outputs for a split: patched pools, unimodal predictions, a, y."""
    modalities: Tuple[str, ...]
    unimodal: Dict[str, np.ndarray]  # n x C, imputed where missing
    availability: np.ndarray
    labels: np.ndarray
    patched: Optional[PatchedSplit] = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    def rows(self, idx) -> "FusionInputs":
        return FusionInputs(
            self.modalities,
            {m: v[idx] for m, v in self.unimodal.items()},
            self.availability[idx],
            self.labels[idx],
            self.patched.rows(idx) if self.patched is not None else None,
        )


class MedPatchModel:
    """Projections, joint heads, missingness head, α and β in one parameter store."""

    def __init__(self, modalities: Sequence[str], num_classes: int, dims: Dict[str, int],
                 d_proj: int = 64, variant: Optional[FusionVariant] = None,
                 per_class_heads: bool = False, low_target: str = "low",
                 store: Optional[ParameterStore] = None, seed: int = 0):
        self.modalities = tuple(modalities)
        self.num_classes = num_classes
        self.dims = dict(dims)
        self.d_proj = d_proj
        self.variant = variant or ablation_variant(0)
        self.per_class_heads = per_class_heads
        if low_target not in ("low", "late"):
            raise ConfigError(f"low_target must be 'low' or 'late', got {low_target}")
        self.low_target = low_target
        self.predictors = self.variant.predictors(self.modalities)
        self.store = store if store is not None else self._init_store(seed)

    @property
    def joint_dim(self) -> int:
        return len(self.modalities) * self.d_proj

    def _init_store(self, seed: int) -> ParameterStore:
        rng = np.random.default_rng([seed, 5])
        store = ParameterStore()
        C, M = self.num_classes, len(self.modalities)
        if self.variant.uses_patching:
            for m in self.modalities:
                d = self.dims[m]
                store.add(f"proj.{m}", rng.standard_normal((self.d_proj, d)) / np.sqrt(d))
            rows = C if self.per_class_heads else 1
            for g in JOINT_PREDICTORS:
                store.add(f"{g}.weight", 0.01 * rng.standard_normal((rows, self.joint_dim)))
                store.add(f"{g}.bias", np.zeros(rows))
        if "miss" in self.predictors:
            store.add("miss.weight", 0.01 * rng.standard_normal((C, M)))
            store.add("miss.bias", np.zeros(C))
        store.add("alpha", np.zeros((len(self.predictors), C)))
        if len(self.variant.loss_terms) > 1:
            store.add("beta", np.zeros(len(self.variant.loss_terms)))
        return store

    # -- forward -------------------------------------------------------------
    def _joint_head(self, tape: Tape, name: str, rep: Node) -> Node:
        w, b = tape.param(f"{name}.weight"), tape.param(f"{name}.bias")
        if self.per_class_heads:
            logits = tape.add(tape.sum(tape.mul(rep, w), axis=-1), b)
        else:
            out = tape.linear(rep, w, b)
            logits = tape.reshape(out, out.shape[:-1])
        return tape.sigmoid(logits)

    def _joint_representation(self, tape: Tape, patched: PatchedSplit, which: str) -> Node:
        pools = patched.high if which == "high" else patched.low
        parts = [tape.linear(pools[m], tape.param(f"proj.{m}")) for m in self.modalities]
        return tape.concat(parts, axis=-1)

    def forward(self, tape: Tape, inputs: FusionInputs) -> Dict[str, Node]:
        out: Dict[str, Node] = {}
        if self.variant.uses_patching:
            if inputs.patched is None:
                raise ConfigError("this fusion variant needs patched token pools")
            for g in JOINT_PREDICTORS:
                out[g] = self._joint_head(tape, g, self._joint_representation(tape, inputs.patched, g))
        if "miss" in self.predictors:
            a = np.asarray(inputs.availability, dtype=np.float64)
            _check_binary(a)
            out["miss"] = tape.sigmoid(tape.linear(a, tape.param("miss.weight"),
                                                   tape.param("miss.bias")))
        stacked = []
        for name in self.predictors:
            stacked.append(out[name] if name in out else tape.const(inputs.unimodal[name]))
        preds = tape.stack(stacked, axis=0)  # K x B x C
        weights = tape.softmax(tape.param("alpha"), axis=0)  # K x C
        K, C = weights.shape
        weights = tape.reshape(weights, (K, 1, C))
        out["late"] = tape.sum(tape.mul(preds, weights), axis=0)
        return out

    def loss(self, tape: Tape, inputs: FusionInputs) -> Node:
        out = self.forward(tape, inputs)
        y = np.asarray(inputs.labels, dtype=np.float64)
        if self.variant.loss_terms == ("late",):
            return tape.bce(out["late"], y)
        low_pred = out["low"] if self.low_target == "low" else out["late"]
        terms = tape.stack([tape.bce(out["late"], y), tape.bce(out["high"], y),
                            tape.bce(low_pred, y)])
        beta = tape.softmax(tape.param("beta"))
        return tape.sum(tape.mul(terms, beta))

    def predict(self, inputs: FusionInputs) -> FusionOutputs:
        n = len(inputs)
        collected: Dict[str, List[np.ndarray]] = {}
        for start in range(0, n, EVAL_BLOCK):
            block = inputs.rows(np.arange(start, min(n, start + EVAL_BLOCK)))
            for name, node in self.forward(Tape(self.store), block).items():
                collected.setdefault(name, []).append(node.value)
        empty = np.zeros((0, self.num_classes))
        merged = {name: np.concatenate(parts) for name, parts in collected.items()}
        return FusionOutputs(
            unimodal={m: inputs.unimodal[m] for m in self.modalities if m in inputs.unimodal},
            high=merged.get("high"),
            low=merged.get("low"),
            miss=merged.get("miss"),
            late=merged.get("late", empty),
        )

    # -- weights ---------------------------------------------------------------
    def alpha(self) -> AlphaWeights:
        return AlphaWeights(self.store["alpha"].copy())

    def beta(self) -> Optional[BetaWeights]:
        return BetaWeights(self.store["beta"].copy()) if "beta" in self.store else None

    def missingness_head(self) -> Optional[MissingnessHead]:
        if "miss.weight" not in self.store:
            return None
        return MissingnessHead(self.store["miss.weight"].copy(), self.store["miss.bias"].copy())


def train_medpatch(
    model: MedPatchModel,
    train: FusionInputs,
    val: FusionInputs,
    lr: float,
    max_epochs: int = 100,
    patience: int = 15,
    batch: int = 16,
    seed: int = 0,
) -> TrainingRecord:
    """Adam on the fusion loss; early stopping on validation AUROC of ŷ_late."""
    rng = np.random.default_rng([seed, 6])

    def train_epoch(_epoch: int) -> float:
        losses = []
        for idx in minibatches(len(train), batch, rng):
            tape = Tape(model.store)
            loss = model.loss(tape, train.rows(idx))
            backward(tape, loss)
            adam_step(model.store, lr)
            losses.append(float(loss.value))
        return float(np.mean(losses)) if losses else 0.0

    def validate() -> float:
        if len(val) == 0:
            return 0.5
        return selection_auroc(model.predict(val).late, val.labels)

    return fit_early_stopping(f"fusion:{model.variant.setting}", model.store, train_epoch,
                              validate, lr, max_epochs, patience)
