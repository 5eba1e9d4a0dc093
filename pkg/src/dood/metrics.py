"""Exact pixel-level evaluation: average precision and FPR at 95% TPR.

Conventions, pinned for bit-reproducibility:
  - a pixel is predicted positive at threshold tau iff score >= tau;
  - thresholds are the distinct score values in descending order, with
    tied scores grouped at a single threshold;
  - AP is the sum of precision times recall increment over thresholds
    (area under the PR curve without interpolation);
  - FPR@95 is the lowest false-positive rate among thresholds whose
    true-positive rate reaches 0.95.

`brute_force_metrics` re-derives both numbers by direct counting at every
threshold and exists only to cross-check the fast path in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .tensor_store import MASK_IGNORE, OoDMask
from .scorer import ScoreMap


@dataclass(frozen=True)
class EvalResult:
    ap: float
    fpr95: float
    n_pos: int
    n_neg: int
    n_ignored: int = 0


def _validate(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DataError(f"scores/labels length mismatch: {scores.shape} vs {labels.shape}")
    if not np.isfinite(scores).all():
        raise DataError("non-finite scores")
    labels = labels.astype(np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be binary 0/1")
    if labels.sum() == 0:
        raise DataError("no positive samples")
    if labels.sum() == labels.size:
        raise DataError("no negative samples")
    return scores, labels


def _threshold_counts(scores: np.ndarray, labels: np.ndarray):
    """Cumulative TP/FP at each distinct score, descending. Stable sort with
    index tiebreak keeps tied groups deterministic."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order]
    cum_tp = np.cumsum(l)
    cum_fp = np.cumsum(1 - l)
    # last index of each tied group
    last = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    return cum_tp[last].astype(np.float64), cum_fp[last].astype(np.float64)


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve via recall increments."""
    scores, labels = _validate(scores, labels)
    tp, fp = _threshold_counts(scores, labels)
    n_pos = labels.sum()
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * precision))


def fpr_at_95_tpr(scores, labels) -> float:
    """Lowest achievable FPR among thresholds with TPR >= 0.95."""
    scores, labels = _validate(scores, labels)
    tp, fp = _threshold_counts(scores, labels)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    ok = tp / n_pos >= 0.95
    if not ok.any():  # unreachable: the lowest threshold gives TPR = 1
        return 1.0
    return float((fp[ok] / n_neg).min())


def brute_force_metrics(scores, labels) -> tuple[float, float]:
    """Independent O(n^2) oracle: evaluates every distinct threshold by
    direct counting. Test-only; arrays should stay small."""
    scores, labels = _validate(scores, labels)
    pos = labels == 1
    neg = ~pos
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    taus = sorted(set(scores.tolist()), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    best_fpr = None
    for tau in taus:
        predicted = scores >= tau
        tp = int(np.count_nonzero(predicted & pos))
        fp_count = int(np.count_nonzero(predicted & neg))
        recall = tp / n_pos
        precision = tp / (tp + fp_count)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        if recall >= 0.95:
            fpr = fp_count / n_neg
            if best_fpr is None or fpr < best_fpr:
                best_fpr = fpr
    return ap, 1.0 if best_fpr is None else best_fpr


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) arrays over descending thresholds, for plotting."""
    scores, labels = _validate(scores, labels)
    tp, fp = _threshold_counts(scores, labels)
    return tp / labels.sum(), tp / (tp + fp)


def _flatten_pair(score_map: ScoreMap, mask: OoDMask):
    sv = score_map.values
    mv = mask.labels
    if sv.shape != mv.shape:
        raise DataError(f"score map shape {sv.shape} != mask shape {mv.shape}")
    keep = mv != MASK_IGNORE
    return sv[keep].astype(np.float64), mv[keep].astype(np.int64), int((~keep).sum())


def evaluate(score_map: ScoreMap, mask: OoDMask) -> EvalResult:
    """Metrics for one image; ignore-labeled pixels are dropped."""
    scores, labels, n_ign = _flatten_pair(score_map, mask)
    if scores.size == 0:
        raise DataError("all pixels ignored")
    res = EvalResult(
        ap=average_precision(scores, labels),
        fpr95=fpr_at_95_tpr(scores, labels),
        n_pos=int(labels.sum()),
        n_neg=int(labels.size - labels.sum()),
        n_ignored=n_ign,
    )
    return res


def evaluate_pooled(pairs: Sequence[tuple[ScoreMap, OoDMask]]) -> EvalResult:
    """Pool pixels from many images into one set before computing metrics."""
    if not pairs:
        raise DataError("no score/mask pairs to evaluate")
    all_scores, all_labels, n_ign = [], [], 0
    for smap, mask in pairs:
        s, l, k = _flatten_pair(smap, mask)
        all_scores.append(s)
        all_labels.append(l)
        n_ign += k
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    if scores.size == 0:
        raise DataError("all pixels ignored")
    return EvalResult(
        ap=average_precision(scores, labels),
        fpr95=fpr_at_95_tpr(scores, labels),
        n_pos=int(labels.sum()),
        n_neg=int(labels.size - labels.sum()),
        n_ignored=n_ign,
    )


@dataclass(frozen=True)
class BootstrapResult:
    ap_mean: float
    ap_std: float
    fpr95_mean: float
    fpr95_std: float
    folds: int


def bootstrap(
    pairs: Sequence[tuple[ScoreMap, OoDMask]],
    folds: int = 10,
    fraction: float = 0.9,
    seed: int = 0,
) -> BootstrapResult:
    """Pooled metrics over `folds` random image subsets (each ceil(fraction*N)
    images, drawn without replacement); returns mean and standard deviation
    per metric."""
    if folds < 2:
        raise DataError("folds must be >= 2")
    if not (0.0 < fraction <= 1.0):
        raise DataError("fraction must be in (0, 1]")
    n = len(pairs)
    k = math.ceil(fraction * n)
    if n < 2 or k < 1:
        raise DataError(f"too few images ({n}) to bootstrap")
    rng = np.random.default_rng([int(seed)])
    aps, fprs = [], []
    for _ in range(folds):
        idx = np.sort(rng.choice(n, size=k, replace=False))
        res = evaluate_pooled([pairs[i] for i in idx])
        aps.append(res.ap)
        fprs.append(res.fpr95)
    aps_arr = np.asarray(aps)
    fprs_arr = np.asarray(fprs)
    return BootstrapResult(
        ap_mean=float(aps_arr.mean()),
        ap_std=float(aps_arr.std(ddof=1)),
        fpr95_mean=float(fprs_arr.mean()),
        fpr95_std=float(fprs_arr.std(ddof=1)),
        folds=folds,
    )
