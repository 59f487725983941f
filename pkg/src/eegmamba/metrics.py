"""Classification metrics: accuracy, ROC-AUC (rank statistic, macro
one-vs-rest for multiclass), and macro F1.  All return values in [0, 1]."""

from __future__ import annotations

import warnings

import numpy as np


def accuracy(labels: np.ndarray, predictions: np.ndarray) -> float:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    return float((labels == predictions).mean())


def binary_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """P(score of a positive > score of a negative), ties counted half.

    Computed from average ranks (Mann-Whitney), so tied scores contribute 0.5.
    """
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("binary_auc needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def multiclass_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Macro one-vs-rest AUC over classes present in ``labels``.

    ``scores`` is [N, C].  With two columns this reduces to the binary AUC of
    column 1.  Classes absent from the labels are skipped with a warning.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores)
    C = scores.shape[1]
    if C == 2:
        return binary_auc(labels == 1, scores[:, 1])
    aucs = []
    for c in range(C):
        mask = labels == c
        if mask.sum() == 0 or mask.sum() == labels.size:
            warnings.warn(f"class {c} absent from eval labels; skipped in macro AUC")
            continue
        aucs.append(binary_auc(mask, scores[:, c]))
    if not aucs:
        raise ValueError("no class with both positives and negatives present")
    return float(np.mean(aucs))


def macro_f1(labels: np.ndarray, predictions: np.ndarray,
             num_classes: int | None = None) -> float:
    """Macro average of per-class F1 over classes present in the labels."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    classes = np.unique(labels) if num_classes is None else np.arange(num_classes)
    f1s = []
    for c in classes:
        tp = int(((predictions == c) & (labels == c)).sum())
        fp = int(((predictions == c) & (labels != c)).sum())
        fn = int(((predictions != c) & (labels == c)).sum())
        if (labels == c).sum() == 0:
            warnings.warn(f"class {c} absent from eval labels; skipped in macro F1")
            continue
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(f1s)) if f1s else 0.0
