"""Ranking metrics, macro aggregation, bootstrap intervals and paired t-tests.

Conventions that move the third decimal:

* AUROC gives half credit to tied positive/negative pairs (average ranks).
* Average precision breaks score ties by original sample order.
* Bootstrap replicate ``r`` draws its indices from ``default_rng([seed, r,
  attempt])``, so two models scored on the same labels see the same resamples
  (paired tests depend on that) and parallel runs match serial ones.
"""

import logging
import math
import sys
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import betaln

from src.models import MetricReport

logger = logging.getLogger(__name__)

MAX_REDRAWS = 10

Metric = Callable[[np.ndarray, np.ndarray], float]


def _binary_inputs(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC via average ranks."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    ranks = stats.rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: mean of precision@k over the ranks k of the positives."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / n_pos)


METRICS = {"auroc": auroc, "auprc": auprc}


def macro_average(values: Sequence[Optional[float]], names: Optional[Sequence[str]] = None) -> float:
    """Unweighted mean over classes whose metric was computable (None = skipped)."""
    kept = []
    skipped = []
    for i, v in enumerate(values):
        if v is None or not math.isfinite(v):
            skipped.append(names[i] if names is not None else str(i))
        else:
            kept.append(float(v))
    if not kept:
        raise ValueError("every class was skipped; metric undefined")
    if skipped:
        logger.warning(f"macro average skipped {len(skipped)} class(es): {', '.join(skipped)}")
    return float(np.mean(kept))


def per_class(metric: Metric, scores, labels) -> List[Optional[float]]:
    """Metric per column; None where the column's labels make it undefined."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y.reshape(-1, 1)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} vs labels {y.shape}")
    out: List[Optional[float]] = []
    for c in range(s.shape[1]):
        try:
            out.append(metric(s[:, c], y[:, c]))
        except ValueError:
            out.append(None)
    return out


def macro_metric(metric: Metric, scores, labels, names: Optional[Sequence[str]] = None) -> float:
    return macro_average(per_class(metric, scores, labels), names)


def _quiet_macro(metric: Metric, scores, labels) -> float:
    values = [v for v in per_class(metric, scores, labels) if v is not None]
    if not values:
        raise ValueError("every class degenerate")
    return float(np.mean(values))


def selection_auroc(scores, labels) -> float:
    """Macro AUROC for model selection; 0.5 when no class is scorable."""
    try:
        return _quiet_macro(auroc, scores, labels)
    except ValueError:
        return 0.5


def bootstrap_ci(
    metric: Metric,
    scores,
    labels,
    replicates: int = 1000,
    seed: int = 0,
    name: str = "metric",
) -> Tuple[MetricReport, np.ndarray]:
    """Percentile 95% interval over resampled test sets.

    ``metric`` takes ``(scores, labels)`` (2-D per-class arrays are macro
    averaged) and raises ``ValueError`` when the resample is degenerate;
    such replicates are redrawn up to ``MAX_REDRAWS`` times, then skipped.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape[0] == 0:
        raise ValueError("bootstrap needs a non-empty dataset")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    n = s.shape[0]

    def score(idx=None) -> float:
        ss, yy = (s, y) if idx is None else (s[idx], y[idx])
        if ss.ndim == 2 and ss.shape[1] > 1:
            return _quiet_macro(metric, ss, yy)
        return metric(ss.ravel(), yy.ravel())

    point = score()
    values = []
    skipped = 0
    for r in range(replicates):
        for attempt in range(MAX_REDRAWS):
            idx = np.random.default_rng([seed, r, attempt]).integers(0, n, size=n)
            try:
                values.append(score(idx))
                break
            except ValueError:
                continue
        else:
            skipped += 1
    if not values:
        raise ValueError(f"{name}: all {replicates} bootstrap replicates were degenerate")
    if skipped:
        logger.warning(f"{name}: skipped {skipped} degenerate bootstrap replicate(s)")
    reps = np.asarray(values, dtype=np.float64)
    lo, hi = np.percentile(reps, [2.5, 97.5])
    if not lo <= point <= hi and reps.size >= 1000:
        logger.info(f"{name}: point {point:.4f} outside bootstrap CI [{lo:.4f}, {hi:.4f}]")
    report = MetricReport(metric=name, point=point, lo=float(lo), hi=float(hi),
                          n_replicates=int(reps.size), seed=seed)
    return report, reps


# ---------------------------------------------------------------------------
# Paired t-test
# ---------------------------------------------------------------------------

_TINY = 1e-300


def _beta_continued_fraction(a: float, b: float, x: float, max_iter: int = 2000,
                             eps: float = 1e-16) -> float:
    """Modified Lentz evaluation of the incomplete-beta continued fraction."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def _log_inc_beta_direct(a: float, b: float, x: float) -> float:
    """log I_x(a, b) from the continued fraction (accurate for x < (a+1)/(a+b+2))."""
    log_front = a * math.log(x) + b * math.log1p(-x) - betaln(a, b) - math.log(a)
    return log_front + math.log(_beta_continued_fraction(a, b, x))


def log_regularized_beta(a: float, b: float, x: float) -> float:
    """Natural log of the regularized incomplete beta I_x(a, b), finite for tiny values."""
    if x <= 0.0:
        return -math.inf
    if x >= 1.0:
        return 0.0
    if x < (a + 1.0) / (a + b + 2.0):
        return _log_inc_beta_direct(a, b, x)
    complement = math.exp(_log_inc_beta_direct(b, a, 1.0 - x))
    return math.log1p(-min(complement, 1.0))


def t_log10_p(t: float, df: int) -> float:
    """log10 of the two-sided Student-t p-value, I_{df/(df+t^2)}(df/2, 1/2)."""
    if math.isinf(t):
        return -math.inf
    a = df / 2.0
    x = df / (df + t * t)
    if x == 0.0:
        # t*t overflowed or x underflowed: leading series term, log x from log|t|
        log_x = math.log(df) - 2.0 * math.log(abs(t))
        return (a * log_x - betaln(a, 0.5) - math.log(a)) / math.log(10.0)
    return log_regularized_beta(a, 0.5, x) / math.log(10.0)


def paired_t_test(a, b) -> Tuple[float, float]:
    """Two-sided paired t-test on matched bootstrap replicates.

    Identical inputs (all differences zero) give ``(0.0, 1.0)``. A constant
    nonzero difference has no spread; t is then the largest finite float with
    the sign of the difference and p is 0.0.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"replicate vectors differ in length ({a.size} vs {b.size})")
    if a.size < 2:
        raise ValueError("paired t-test needs at least 2 replicates")
    d = a - b
    if np.all(d == 0.0):
        return 0.0, 1.0
    if np.all(d == d[0]):
        return math.copysign(sys.float_info.max, float(d[0])), 0.0
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    t = mean / (sd / math.sqrt(n))
    p = 10.0 ** t_log10_p(t, n - 1)
    return float(t), float(p)


def bonferroni(p: float, comparisons: int) -> float:
    return min(1.0, p * max(1, comparisons))
