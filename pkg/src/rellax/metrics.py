"""AUC, log loss and accuracy for binary CTR predictions."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .numerics import ContractError

CLAMP = 1e-12


def compute_auc(labels, scores) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2).

    Uses the average-rank (Mann-Whitney) formula.
    """
    y = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ContractError(f"labels {y.shape} and scores {s.shape} differ in shape")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pair_count(labels, scores) -> float:
    """Quadratic pair-counting AUC; the reference the rank formula is checked against."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    if not pos or not neg:
        raise ContractError("AUC needs both positive and negative labels")
    credit = 0.0
    for p in pos:
        for n in neg:
            credit += 1.0 if p > n else 0.5 if p == n else 0.0
    return credit / (len(pos) * len(neg))


def compute_logloss_acc(labels, scores, threshold: float = 0.5) -> tuple[float, float]:
    """Mean binary cross-entropy and accuracy; a score equal to the threshold predicts 1."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(scores, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    logloss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
    acc = float(((p >= threshold) == (y == 1)).mean())
    return logloss, acc
