"""Evaluation metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import EvaluationError


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic with midranks.

    Ties between a positive and a negative score count one half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise EvaluationError(f"{scores.size} scores for {labels.size} labels")
    if np.isnan(scores).any():
        raise EvaluationError("scores contain NaN")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_or_none(scores, labels) -> float | None:
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        return None
    return auc(scores, labels)


def rmse(pred, target, mask=None) -> float:
    """Root mean squared error over the cells where ``mask`` is set."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise EvaluationError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if not mask.any():
        raise EvaluationError("rmse over an empty mask")
    return float(np.sqrt(np.mean((pred[mask] - target[mask]) ** 2)))


def support_mask(months, half_width: int) -> np.ndarray:
    """True for each observation with another observation of the same series within ``half_width`` months."""
    m = np.asarray(months, dtype=np.int64)
    if m.size < 2:
        return np.zeros(m.size, dtype=bool)
    order = np.argsort(m, kind="stable")
    s = m[order]
    gaps = np.diff(s)
    near = np.zeros(s.size, dtype=bool)
    near[:-1] |= gaps <= half_width
    near[1:] |= gaps <= half_width
    out = np.empty_like(near)
    out[order] = near
    return out
