"""Evaluation metrics and oversmoothing diagnostics.

Embedding matrices are (dim, n) with one column per node, matching the
model's convention.
"""

from __future__ import annotations

import numpy as np

from .errors import MetricError

__all__ = [
    "accuracy",
    "rank_average",
    "roc_auc_binary",
    "roc_auc_macro",
    "mape",
    "dirichlet_energy",
    "mean_average_distance",
]


def accuracy(scores, labels, mask=None):
    """Fraction of masked nodes whose argmax score matches the label."""
    labels = np.asarray(labels, dtype=np.int64)
    cols = _masked_columns(labels.shape[0], mask)
    if cols.size == 0:
        raise MetricError("accuracy needs at least one labeled node")
    pred = np.argmax(scores[:, cols], axis=0)
    return float(np.mean(pred == labels[cols]))


def _masked_columns(n, mask):
    if mask is None:
        return np.arange(n)
    return np.nonzero(np.asarray(mask, dtype=bool))[0]


def rank_average(x):
    """Ranks starting at 1, with tied values sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc_binary(scores, positives):
    """Mann-Whitney AUC of scalar scores against a boolean positive mask."""
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative samples")
    ranks = rank_average(np.asarray(scores, dtype=np.float64))
    pos_rank_sum = float(ranks[positives].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_auc_macro(scores, labels, mask=None):
    """One-vs-rest AUC averaged over classes.

    scores is (num_classes, n). Classes without both a positive and a
    negative example among the masked nodes are skipped; if every class is
    skipped the metric is undefined.
    """
    labels = np.asarray(labels, dtype=np.int64)
    cols = _masked_columns(labels.shape[0], mask)
    sub_scores = scores[:, cols]
    sub_labels = labels[cols]
    aucs = []
    for c in range(scores.shape[0]):
        pos = sub_labels == c
        if pos.any() and (~pos).any():
            aucs.append(roc_auc_binary(sub_scores[c], pos))
    if not aucs:
        raise MetricError("AUC undefined: no class has both positives and negatives")
    return float(np.mean(aucs))


def mape(y_true, y_pred, eps=1e-8):
    """Mean absolute percentage error.

    Entries with |y_true| <= eps are excluded to avoid division blowups.
    Returns (percentage, number_of_excluded_entries).
    """
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if y_true.shape != y_pred.shape:
        raise MetricError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    keep = np.abs(y_true) > eps
    excluded = int((~keep).sum())
    if not keep.any():
        raise MetricError("MAPE undefined: every target is within eps of zero")
    value = float(np.mean(np.abs(y_true[keep] - y_pred[keep]) / np.abs(y_true[keep]))) * 100.0
    return value, excluded


def dirichlet_energy(Z, A):
    """Root mean (over nodes) of weighted squared neighbor differences.

    sqrt( (1/n) * sum_{stored edges (i,j)} w_ij |z_i - z_j|^2 ). Low values
    mean neighboring embeddings have collapsed onto each other.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = A.n_rows
    if Z.ndim != 2 or Z.shape[1] != n:
        raise MetricError("embeddings must be (dim, n) with one column per node")
    rows = np.repeat(np.arange(n), np.diff(A.indptr))
    cols = A.indices
    if rows.size == 0:
        return 0.0
    diff = Z[:, rows] - Z[:, cols]
    energy = float(np.sum(A.data * np.sum(diff * diff, axis=0)))
    return float(np.sqrt(energy / n))


def mean_average_distance(Z, A):
    """Mean cosine distance across stored edges.

    Pairs where either endpoint has a zero-norm embedding are skipped; the
    metric is undefined if nothing remains.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = A.n_rows
    if Z.ndim != 2 or Z.shape[1] != n:
        raise MetricError("embeddings must be (dim, n) with one column per node")
    rows = np.repeat(np.arange(n), np.diff(A.indptr))
    cols = A.indices
    if rows.size == 0:
        raise MetricError("mean average distance undefined on an edgeless graph")
    norms = np.linalg.norm(Z, axis=0)
    valid = (norms[rows] > 0) & (norms[cols] > 0)
    if not valid.any():
        raise MetricError("mean average distance undefined: all embeddings have zero norm")
    r, c = rows[valid], cols[valid]
    cos = np.sum(Z[:, r] * Z[:, c], axis=0) / (norms[r] * norms[c])
    return float(np.mean(1.0 - cos))
