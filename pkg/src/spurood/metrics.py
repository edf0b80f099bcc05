"""Threshold detector, FPR at a fixed TPR, and AUROC.

Scores follow the convention "higher = more in-distribution"; a sample is
accepted as ID when its score is >= the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyScoresError


def detector(score: float, lam: float) -> str:
    return "in" if score >= lam else "out"


def _check(id_scores, ood_scores):
    id_scores = np.asarray(id_scores, dtype=float).ravel()
    ood_scores = np.asarray(ood_scores, dtype=float).ravel()
    if id_scores.size == 0 or ood_scores.size == 0:
        raise EmptyScoresError("both ID and OOD score arrays must be nonempty")
    return id_scores, ood_scores


def fpr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> tuple[float, float]:
    """Return ``(fpr, lambda)``.

    lambda is the largest threshold that keeps at least ceil(tpr * n_id) ID
    scores at or above it; fpr is the fraction of OOD scores >= lambda.
    """
    id_scores, ood_scores = _check(id_scores, ood_scores)
    # round before ceil so 0.95 * 100 does not become 96
    k = max(1, math.ceil(round(tpr * id_scores.size, 9)))
    lam = float(np.sort(id_scores)[::-1][k - 1])
    fpr = np.count_nonzero(ood_scores >= lam) / ood_scores.size
    return float(fpr), lam


def auroc(id_scores, ood_scores) -> float:
    """P(ID score > OOD score) with ties counted one half (Mann-Whitney U)."""
    id_scores, ood_scores = _check(id_scores, ood_scores)
    n, m = id_scores.size, ood_scores.size
    ranks = rankdata(np.concatenate([id_scores, ood_scores]))
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


@dataclass
class DetectionResult:
    id_scores: np.ndarray
    ood_scores: np.ndarray
    fpr95: float
    auroc: float
    threshold_lambda: float

    @classmethod
    def from_scores(cls, id_scores, ood_scores, tpr: float = 0.95) -> DetectionResult:
        id_scores, ood_scores = _check(id_scores, ood_scores)
        fpr, lam = fpr_at_tpr(id_scores, ood_scores, tpr)
        return cls(id_scores, ood_scores, fpr, auroc(id_scores, ood_scores), lam)
