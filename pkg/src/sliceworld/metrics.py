"""Scalar evaluation metrics: AUPRC, Spearman, BLEU-1, bootstrap, horizons."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, ValidationError

COSINE_EPS = 1e-12


def auprc(scores, labels) -> float:
    """Area under the precision-recall curve.

    Step integration over the sorted unique score thresholds: tied scores
    enter together, and each recall increment is weighted by the precision
    at that threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be equal-length 1-D")
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos + neg != labels.size:
        raise ValidationError("labels must be binary")
    if pos == 0 or neg == 0:
        raise DegenerateInput("AUPRC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int((l_sorted[i:j] == 1).sum())
        fp += int((l_sorted[i:j] == 0).sum())
        precision = tp / (tp + fp)
        recall = tp / pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(area)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j < x.size and x[order[j]] == x[order[i]]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # average of ranks i+1..j
        i = j
    return ranks


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValidationError("spearman needs two equal-length 1-D arrays, n >= 2")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    den = np.sqrt((sx * sx).sum() * (sy * sy).sum())
    if den == 0.0:
        raise DegenerateInput("constant ranks")
    return float((sx * sy).sum() / den)


def bleu1(candidate, reference) -> float:
    """Clipped unigram precision times the brevity penalty."""
    reference = list(reference)
    if not reference:
        raise ValidationError("empty reference")
    candidate = list(candidate)
    if not candidate:
        return 0.0
    cand_counts = Counter(candidate)
    ref_counts = Counter(reference)
    clipped = sum(min(c, ref_counts.get(tok, 0)) for tok, c in cand_counts.items())
    precision = clipped / len(candidate)
    bp = np.exp(min(0.0, 1.0 - len(reference) / len(candidate)))
    return float(precision * bp)


def paired_bootstrap(metric_a, metric_b, resamples: int = 10000,
                     seed: int = 0) -> float:
    """One-sided bootstrap p-value for "system B beats system A".

    Studies are resampled with replacement; p is the fraction of resamples
    where B's mean is <= A's mean, so ties count against the claimed
    improvement (identical systems give p = 1).
    """
    a = np.asarray(metric_a, dtype=np.float64)
    b = np.asarray(metric_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValidationError("need paired 1-D metrics with n >= 2")
    diff = b - a
    rng = np.random.default_rng(seed)
    n = diff.size
    hits = 0
    chunk = max(1, min(resamples, 20_000_000 // max(n, 1)))
    done = 0
    while done < resamples:
        take = min(chunk, resamples - done)
        idx = rng.integers(0, n, size=(take, n))
        hits += int((diff[idx].mean(axis=1) <= 0.0).sum())
        done += take
    return hits / resamples


@dataclass
class HorizonMetrics:
    mse: float
    cosine: float
    n_pairs: int
    n_skipped: int


def horizon_metrics(predictions, targets) -> HorizonMetrics:
    """MSE over pairs and dims; cosine averaged over pairs.

    Pairs whose target has zero norm are skipped for the cosine and counted
    in ``n_skipped``; remaining norms are epsilon-guarded.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    tgts = np.asarray(targets, dtype=np.float64)
    if preds.shape != tgts.shape or preds.ndim != 2:
        raise ValidationError("predictions/targets must be matching (n, d)")
    if preds.shape[0] == 0:
        raise ValidationError("no prediction pairs")
    mse = float(((preds - tgts) ** 2).mean())
    tn = np.linalg.norm(tgts, axis=1)
    pn = np.linalg.norm(preds, axis=1)
    keep = tn > 0
    skipped = int((~keep).sum())
    if keep.any():
        dots = (preds[keep] * tgts[keep]).sum(axis=1)
        cos = float((dots / np.maximum(pn[keep] * tn[keep], COSINE_EPS)).mean())
    else:
        cos = float("nan")
    return HorizonMetrics(mse=mse, cosine=cos, n_pairs=int(keep.sum()),
                          n_skipped=skipped)
