"""Confidence-guided token patching and the joint representation.

For every modality and class the tokens are split into a high-confidence
group (γ >= θ) and a low-confidence group, each group is mean-pooled, and the
pools are projected to ``d_proj`` and concatenated in canonical modality
order. Missing modalities and empty groups contribute exact zeros; the
projection has no bias so a zero pool stays zero.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from src.confidence import ConfidenceHead, token_confidence, token_entropies
from src.errors import ConfigError, ShapeError
from src.numeric import sigmoid

logger = logging.getLogger(__name__)

DEFAULT_THETA = 0.75


@dataclass(frozen=True)
class Patch:
    """Token indices of the high- and low-confidence groups for one class."""
    high: np.ndarray
    low: np.ndarray


@dataclass
class JointRepresentation:
    high: np.ndarray  # C x (M * d_proj)
    low: np.ndarray


def check_theta(theta: float) -> None:
    if not 0.5 < theta <= 1.0:
        raise ConfigError(f"theta must be in (0.5, 1], got {theta}")


def check_theta_entropy(theta_h: float) -> None:
    if not 0.0 <= theta_h <= 1.0:
        raise ConfigError(f"entropy threshold must be in [0, 1], got {theta_h}")


def partition_tokens(gamma, theta: float = DEFAULT_THETA) -> Patch:
    check_theta(theta)
    gamma = np.asarray(gamma, dtype=np.float64).ravel()
    confident = gamma >= theta
    return Patch(np.flatnonzero(confident), np.flatnonzero(~confident))


def entropy_partition(entropy, theta_h: float) -> Patch:
    """Low-entropy tokens (H <= θ_H) take the high-confidence role."""
    check_theta_entropy(theta_h)
    h = np.asarray(entropy, dtype=np.float64).ravel()
    confident = h <= theta_h
    return Patch(np.flatnonzero(confident), np.flatnonzero(~confident))


def pool_mean(z: np.ndarray, idx) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return np.zeros(z.shape[1])
    return z[idx].mean(axis=0)


def project(h: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Linear d_m -> d_proj; ``weight`` is d_proj x d_m."""
    h = np.asarray(h, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2 or h.shape[-1] != weight.shape[1]:
        raise ShapeError(f"projection {weight.shape} cannot take input of dim {h.shape[-1]}")
    out = h @ weight.T
    return out if bias is None else out + bias


def assemble_joint(
    high: Dict[str, np.ndarray],
    low: Dict[str, np.ndarray],
    availability: Sequence[int],
    modalities: Sequence[str],
    d_proj: int,
    num_classes: int,
) -> JointRepresentation:
    """Concatenate projected per-class pools in ``modalities`` order.

    ``high``/``low`` map modality -> C x d_proj; entries for missing
    modalities are ignored and their slots are exact zeros.
    """
    a = np.asarray(availability).ravel()
    if a.size != len(modalities):
        raise ShapeError(f"availability has {a.size} entries for {len(modalities)} modalities")
    hi_parts, lo_parts = [], []
    for j, m in enumerate(modalities):
        if a[j]:
            if m not in high or m not in low:
                raise ShapeError(f"present modality {m} has no projected pools")
            for part in (high[m], low[m]):
                if part.shape != (num_classes, d_proj):
                    raise ShapeError(f"{m}: pool shape {part.shape}, expected {(num_classes, d_proj)}")
            hi_parts.append(np.asarray(high[m], dtype=np.float64))
            lo_parts.append(np.asarray(low[m], dtype=np.float64))
        else:
            hi_parts.append(np.zeros((num_classes, d_proj)))
            lo_parts.append(np.zeros((num_classes, d_proj)))
    return JointRepresentation(np.concatenate(hi_parts, axis=1), np.concatenate(lo_parts, axis=1))


def _apply_joint_head(h: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    weight = np.asarray(weight, dtype=np.float64)
    if weight.shape[-1] != h.shape[-1]:
        raise ShapeError(f"joint head dim {weight.shape[-1]} vs representation {h.shape[-1]}")
    if weight.ndim == 2 and weight.shape[0] == 1:
        logits = h @ weight[0] + np.asarray(bias).ravel()[0]
    else:
        logits = (h * weight).sum(axis=-1) + bias
    return np.asarray(sigmoid(logits), dtype=np.float64)


def joint_predict(rep: JointRepresentation, high_head: Tuple[np.ndarray, np.ndarray],
                  low_head: Tuple[np.ndarray, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """(ŷ_high, ŷ_low): each head is ``(weight, bias)``.

    A ``1 x D`` weight is shared by every class; a ``C x D`` weight gives each
    class its own functional.
    """
    return (_apply_joint_head(rep.high, *high_head), _apply_joint_head(rep.low, *low_head))


# ---------------------------------------------------------------------------
# Vectorised pooling over all classes
# ---------------------------------------------------------------------------

def _masked_means(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """C x d means of the rows of ``z`` selected per class by ``mask`` (T x C)."""
    m = mask.astype(np.float64)
    counts = m.sum(axis=0)
    sums = m.T @ z
    out = np.zeros_like(sums)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out


def patch_pools(
    z: np.ndarray,
    head: ConfidenceHead,
    tau: np.ndarray,
    theta: float = DEFAULT_THETA,
    mode: str = "confidence",
    theta_entropy: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """High and low pools (each C x d_m) of one modality's tokens."""
    if mode == "confidence":
        check_theta(theta)
        confident = token_confidence(z, head, tau) >= theta
    elif mode == "entropy":
        if theta_entropy is None:
            raise ConfigError("entropy patching needs theta_entropy")
        check_theta_entropy(theta_entropy)
        confident = token_entropies(z, head, tau) <= theta_entropy
    else:
        raise ConfigError(f"unknown patching mode: {mode}")
    return _masked_means(z, confident), _masked_means(z, ~confident)


@dataclass
class PatchedSplit:
    """Per-modality high/low pools for every sample of a split (n x C x d_m)."""
    modalities: Tuple[str, ...]
    high: Dict[str, np.ndarray]
    low: Dict[str, np.ndarray]
    availability: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    def rows(self, idx) -> "PatchedSplit":
        return PatchedSplit(
            self.modalities,
            {m: v[idx] for m, v in self.high.items()},
            {m: v[idx] for m, v in self.low.items()},
            self.availability[idx],
            self.labels[idx],
        )


def patch_split(
    split,
    heads: Dict[str, ConfidenceHead],
    temps: Dict[str, np.ndarray],
    theta: float = DEFAULT_THETA,
    mode: str = "confidence",
    theta_entropy: Optional[float] = None,
) -> PatchedSplit:
    """Patch every sample of an ``EncodedSplit``; missing modalities pool to zeros."""
    n, C = len(split), split.num_classes
    high, low = {}, {}
    for m in split.modalities:
        d = heads[m].dim
        high[m] = np.zeros((n, C, d))
        low[m] = np.zeros((n, C, d))
        for i, s in enumerate(split.samples):
            z = s.z[m]
            if z is None:
                continue
            high[m][i], low[m][i] = patch_pools(z, heads[m], temps[m], theta, mode, theta_entropy)
    return PatchedSplit(tuple(split.modalities), high, low, split.availability(), split.labels())
