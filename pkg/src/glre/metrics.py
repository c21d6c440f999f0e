"""ROC curves, tie-corrected AUC, aggregation, and retrieval accuracy."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UndefinedAucError


@dataclass
class RocCurve:
    """Threshold-sweep ROC curve plus the rank-based AUC.

    Points run from (0, 0) to (1, 1) with non-decreasing fpr/tpr. ``auc`` is
    the Mann-Whitney value (ties get half credit), which equals the
    trapezoidal area of the stored points because tied scores are collapsed
    into single diagonal segments.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    n_pos: int
    n_neg: int

    def trapezoid_area(self) -> float:
        trapezoid = getattr(np, "trapezoid", np.trapz)
        return float(trapezoid(self.tpr, self.fpr))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr", "threshold"])
            for f, t, th in zip(self.fpr, self.tpr, self.thresholds):
                writer.writerow([repr(float(f)), repr(float(t)), repr(float(th))])


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, with tied scores sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> RocCurve:
    """Rank the scores against binary labels.

    AUC is the Mann-Whitney statistic U / (n_pos * n_neg) with tied pairs
    counted as one half. The final division is arranged so that the scores
    and their negation yield values summing to exactly 1.0.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValueError(f"scores and labels must be equal-length 1-D, got {s.shape} and {y.shape}")
    if s.size < 2:
        raise UndefinedAucError("need at least 2 samples")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    pos = y == 1
    neg = ~pos
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(
            f"AUC undefined: {n_pos} positive and {n_neg} negative labels"
        )

    ranks = _average_ranks(s)
    # Rank sums of half-integers are exact in float64 at this scale.
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    denom = float(n_pos) * float(n_neg)
    u_comp = denom - u
    if u <= u_comp:
        auc = u / denom
    else:
        auc = 1.0 - u_comp / denom

    fpr, tpr, thresholds = _sweep_curve(s, pos, n_pos, n_neg)
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=float(auc),
                    n_pos=n_pos, n_neg=n_neg)


def _sweep_curve(scores, pos, n_pos, n_neg):
    """Cumulative TP/FP over thresholds at each distinct score, descending."""
    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    pos_sorted = pos[order].astype(np.int64)
    distinct = np.nonzero(np.diff(s_sorted))[0]
    block_ends = np.append(distinct, len(s_sorted) - 1)
    cum_tp = np.cumsum(pos_sorted)[block_ends]
    cum_fp = (block_ends + 1) - cum_tp
    tpr = np.concatenate(([0.0], cum_tp / n_pos))
    fpr = np.concatenate(([0.0], cum_fp / n_neg))
    thresholds = np.concatenate(([np.inf], s_sorted[block_ends]))
    return fpr, tpr, thresholds


def aggregate_auc(values, per_seed=None) -> tuple[float, float]:
    """Arithmetic mean of per-class AUCs; population std across seeds.

    When ``per_seed`` is given it must be a sequence of per-seed means; the
    std is computed over those (population form, ddof=0). Without it the std
    is over ``values`` themselves.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("aggregate_auc needs at least one value")
    mean = float(vals.mean())
    basis = np.asarray(per_seed, dtype=np.float64) if per_seed is not None else vals
    if basis.size == 0:
        raise ValueError("aggregate_auc std basis is empty")
    std = float(basis.std(ddof=0))
    return mean, std


def retrieval_top1(score_matrix) -> dict[str, float]:
    """Top-1 retrieval accuracy for a square pairwise score matrix.

    Row i scores image i against every text; the matched pair sits on the
    diagonal. Returns both directions and their mean.
    """
    m = np.asarray(score_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"retrieval needs a square matrix, got {m.shape}")
    n = m.shape[0]
    i2t = float(np.mean(np.argmax(m, axis=1) == np.arange(n)))
    t2i = float(np.mean(np.argmax(m, axis=0) == np.arange(n)))
    return {"image_to_text": i2t, "text_to_image": t2i, "mean": 0.5 * (i2t + t2i)}
