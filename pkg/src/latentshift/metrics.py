"""Binary classification metrics: thresholded accuracy and rank AUC."""

import numpy as np

from latentshift.errors import DataError


def accuracy_score(probs, labels, threshold=0.5):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise DataError("probs and labels must align")
    return float(((probs >= threshold).astype(np.int64) == labels).mean())


def auc_score(probs, labels):
    """Rank-statistic AUC with tied scores sharing their average rank.

    Degenerate label sets (a single class) score 0.5.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5
    _, inverse, counts = np.unique(probs, return_inverse=True, return_counts=True)
    cum = np.concatenate([[0], np.cumsum(counts)])
    avg_rank = (cum[:-1] + cum[1:] + 1) / 2.0
    ranks = avg_rank[inverse]
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
