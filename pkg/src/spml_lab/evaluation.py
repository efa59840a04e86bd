"""Ranking metrics, pseudo-label quality accounting, and artifact export.

Average precision uses the non-interpolated "precision at each positive
rank" definition with ties broken by original index, so it is exactly
reproducible by brute force. Pseudo-label quality follows the missing-label
protocol: per image, only classes outside the confirmed annotation count;
a predicted positive on a true negative is a false positive, and recall's
denominator is the number of missing positives. Accumulated variants are
computed on the union of predicted positives across epochs.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .core import DomainError, MetricUndefinedError, PredictionBatch

logger = logging.getLogger(__name__)


def average_precision(scores, labels) -> float:
    """AP of one ranking: mean precision over the ranks of the positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DomainError("scores and labels must be matching 1-D arrays")
    positives = int(labels.sum())
    if positives == 0:
        raise MetricUndefinedError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.nonzero(hits)[0] + 1
    precision_at_hit = np.cumsum(hits)[hits.astype(bool)] / ranks
    return float(precision_at_hit.sum() / positives)


def mean_average_precision(preds, truths) -> float:
    """Unweighted mean of per-class AP over classes with at least one positive."""
    scores = preds.probabilities if isinstance(preds, PredictionBatch) else np.asarray(preds)
    truths = np.asarray(truths).astype(bool)
    if scores.shape != truths.shape:
        raise DomainError("prediction/truth shape mismatch")
    aps = []
    skipped = 0
    for c in range(scores.shape[1]):
        try:
            aps.append(average_precision(scores[:, c], truths[:, c]))
        except MetricUndefinedError:
            skipped += 1
    if not aps:
        raise MetricUndefinedError("no class has a positive example")
    if skipped:
        logger.warning("mAP computed over %d classes; %d skipped (no positives)", len(aps), skipped)
    return float(np.mean(aps))


@dataclass
class PseudoQualityReport:
    """Missing-label precision/recall, per epoch and accumulated.

    Per-epoch entries are dataset-level (micro) ratios; ``None`` marks an
    undefined value (empty denominator). ``accumulated_positive_sets`` is the
    (N, C) union of predicted positives over all epochs.
    """

    per_epoch_precision: list
    per_epoch_recall: list
    accumulated_precision_by_epoch: list
    accumulated_recall_by_epoch: list
    average_precision: float | None
    average_recall: float | None
    accumulated_precision: float | None
    accumulated_recall: float | None
    accumulated_positive_sets: np.ndarray
    missing_positive_count: int


def _ratio(numer: int, denom: int):
    return numer / denom if denom else None


def pseudo_quality(epoch_labels, truths, annotations) -> PseudoQualityReport:
    """Score pseudo-label quality over the missing-label universe.

    ``epoch_labels`` is a sequence of (N, C) ternary arrays, one per epoch;
    ``truths`` the full (N, C) ground truth; ``annotations`` the one-hot
    single-positive matrix. The universe per image is every class whose
    annotation is 0.
    """
    truths = np.asarray(truths).astype(bool)
    annotations = np.asarray(annotations).astype(bool)
    if truths.shape != annotations.shape:
        raise DomainError("truth/annotation shape mismatch")
    universe = ~annotations
    missing = universe & truths
    missing_count = int(missing.sum())

    per_prec, per_rec, acc_prec, acc_rec = [], [], [], []
    union = np.zeros_like(universe, dtype=bool)
    for labels in epoch_labels:
        labels = np.asarray(labels)
        if labels.shape != truths.shape:
            raise DomainError("epoch label shape mismatch")
        predicted = (labels == 1) & universe
        tp = int((predicted & truths).sum())
        fp = int((predicted & ~truths).sum())
        per_prec.append(_ratio(tp, tp + fp))
        per_rec.append(_ratio(tp, missing_count))

        union |= predicted
        tp_u = int((union & truths).sum())
        fp_u = int((union & ~truths).sum())
        acc_prec.append(_ratio(tp_u, tp_u + fp_u))
        acc_rec.append(_ratio(tp_u, missing_count))

    defined_p = [v for v in per_prec if v is not None]
    defined_r = [v for v in per_rec if v is not None]
    return PseudoQualityReport(
        per_epoch_precision=per_prec,
        per_epoch_recall=per_rec,
        accumulated_precision_by_epoch=acc_prec,
        accumulated_recall_by_epoch=acc_rec,
        average_precision=float(np.mean(defined_p)) if defined_p else None,
        average_recall=float(np.mean(defined_r)) if defined_r else None,
        accumulated_precision=acc_prec[-1] if acc_prec else None,
        accumulated_recall=acc_rec[-1] if acc_rec else None,
        accumulated_positive_sets=union,
        missing_positive_count=missing_count,
    )


@dataclass(frozen=True)
class Histogram:
    """Separate probability histograms for true-positive and true-negative entries."""

    edges: np.ndarray
    positive_counts: np.ndarray
    negative_counts: np.ndarray

    def mass_above(self, threshold: float, positive: bool = True) -> float:
        """Fraction of the (positive or negative) entries in bins starting >= threshold."""
        counts = self.positive_counts if positive else self.negative_counts
        total = counts.sum()
        if total == 0:
            return 0.0
        return float(counts[self.edges[:-1] >= threshold].sum() / total)


def probability_histogram(preds, truths, bins: int = 50) -> Histogram:
    """Bin predicted probabilities by ground-truth sign.

    Bins are right-closed: value p lands in the bin whose interval (lo, hi]
    contains it, with 0.0 kept in the first bin and 1.0 in the last.
    """
    if bins < 1:
        raise DomainError("bins must be >= 1")
    probs = preds.probabilities if isinstance(preds, PredictionBatch) else np.asarray(preds)
    truths = np.asarray(truths).astype(bool)
    if probs.shape != truths.shape:
        raise DomainError("prediction/truth shape mismatch")
    idx = np.clip(np.ceil(probs * bins).astype(int) - 1, 0, bins - 1)
    pos = np.bincount(idx[truths].ravel(), minlength=bins)
    neg = np.bincount(idx[~truths].ravel(), minlength=bins)
    return Histogram(
        edges=np.linspace(0.0, 1.0, bins + 1),
        positive_counts=pos,
        negative_counts=neg,
    )


def validation_positive_mean(truths) -> float:
    """Mean count of positive labels per validation instance."""
    truths = np.asarray(truths)
    if truths.ndim != 2 or truths.shape[0] < 1:
        raise DomainError("validation truths must be a nonempty (N, C) array")
    return float(truths.sum(axis=1).mean())


METRIC_COLUMNS = [
    "epoch",
    "loss_total",
    "loss_L1",
    "loss_L2",
    "loss_L3",
    "loss_L4",
    "regularizer",
    "mAP_val",
    "precision_avg",
    "recall_avg",
    "precision_acc",
    "recall_acc",
    "confidence_CM",
    "gate_active",
]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_metrics_csv(path, rows) -> None:
    """Write per-epoch metric rows (dicts keyed by METRIC_COLUMNS)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row.get(col)) for col in METRIC_COLUMNS])


def write_histogram_csv(path, hist: Histogram) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count_pos", "count_neg"])
        for b in range(len(hist.positive_counts)):
            writer.writerow(
                [
                    repr(float(hist.edges[b])),
                    repr(float(hist.edges[b + 1])),
                    int(hist.positive_counts[b]),
                    int(hist.negative_counts[b]),
                ]
            )
