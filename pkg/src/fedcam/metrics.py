"""Detection-quality metrics over pooled (round, client) decisions and
global-model accuracy tracking.

"Malicious" is the positive class. Metrics with an empty denominator are
reported as None and rendered as "-" in tables, never silently as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ClassifierNet
from .params import ModelParams

METRIC_NAMES = ("recall", "precision", "fpr", "acc", "f1")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def add(self, flagged, truth_malicious) -> "ConfusionCounts":
        """Tally one round: flagged = predicted malicious, truth = actual."""
        flagged = np.asarray(flagged, dtype=bool)
        truth = np.asarray(truth_malicious, dtype=bool)
        self.tp += int((flagged & truth).sum())
        self.fp += int((flagged & ~truth).sum())
        self.tn += int((~flagged & ~truth).sum())
        self.fn += int((~flagged & truth).sum())
        return self

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def detection_metrics(counts: ConfusionCounts) -> dict:
    """recall, precision, fpr, acc, f1; None marks an undefined cell."""
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    fpr = _ratio(counts.fp, counts.fp + counts.tn)
    acc = _ratio(counts.tp + counts.tn, counts.total)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {"recall": recall, "precision": precision, "fpr": fpr,
            "acc": acc, "f1": f1}


def auc(scores, labels) -> float | None:
    """Area under the ROC curve, computed as the normalized Mann-Whitney U
    statistic; higher score must mean more malicious. Ties count 1/2.
    None when either class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def test_accuracy(params: ModelParams, images: np.ndarray,
                  labels: np.ndarray, image_hw: int | None = None) -> float:
    """Fraction of argmax-correct predictions on the given set."""
    if len(labels) == 0:
        raise ValueError("empty test set")
    hw = image_hw if image_hw is not None else images.shape[-1]
    net = ClassifierNet.from_params(params, image_hw=hw)
    preds = net.predict(images)
    return float(np.mean(preds == labels))


def attack_rate(num_attackers: int, num_benign: int) -> float:
    """Share of attackers among all participating clients."""
    total = num_attackers + num_benign
    if total <= 0:
        raise ValueError("no clients")
    return num_attackers / total


def format_cell(value) -> str:
    """Table rendering: undefined metrics print as '-'."""
    if value is None:
        return "-"
    return f"{value:.6g}"
