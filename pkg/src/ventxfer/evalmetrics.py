"""Classification metrics and their aggregation.

AUROC is computed as the Mann-Whitney statistic with half credit for ties,
AUPRC as step-wise average precision with tied scores entering as one group,
and balanced accuracy at an explicit threshold. Threshold selection scans the
midpoints between adjacent distinct validation scores. Significance between
two models on the same test items uses a paired bootstrap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSet:
    """Aligned scores and binary labels for one evaluation set."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        y = np.asarray(self.labels)
        if s.shape != y.shape or s.ndim != 1:
            raise MetricError("scores and labels must be 1-d and aligned")
        if not np.isin(y, (0, 1)).all():
            raise MetricError("labels must be 0 or 1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class ReportRow:
    task: int
    regime: str
    fraction: float
    seed: int
    auroc: float
    auprc: float
    bacc: float
    n_test: int
    runtime: float = 0.0

    def __post_init__(self):
        for name in ("auroc", "auprc", "bacc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name} {v} outside [0, 1]")


def _require_both_classes(labels: np.ndarray, what: str) -> None:
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise MetricError(f"{what} needs both classes present")


def auroc(scored: ScoredSet) -> float:
    """Probability a random positive outscores a random negative; ties 1/2."""
    y = scored.labels
    _require_both_classes(y, "auroc")
    order = np.argsort(scored.scores, kind="stable")
    s = scored.scores[order]
    # midranks: average rank within each tied group
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    rank_sum = ranks[y[order] == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scored: ScoredSet) -> float:
    """Average precision with tied scores entering as one group."""
    y = scored.labels
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("auprc needs at least one positive")
    order = np.argsort(-scored.scores, kind="stable")
    s = scored.scores[order]
    yo = y[order]
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        group_pos = int(yo[i:j + 1].sum())
        tp += group_pos
        seen += j - i + 1
        if group_pos:
            ap += (tp / seen) * (group_pos / n_pos)
        i = j + 1
    return float(ap)


def balanced_accuracy(scored: ScoredSet, threshold: float) -> float:
    """(TPR + TNR) / 2 with score >= threshold predicted positive."""
    y = scored.labels
    _require_both_classes(y, "balanced_accuracy")
    pred = scored.scores >= threshold
    tpr = float(pred[y == 1].mean())
    tnr = float((~pred[y == 0]).mean())
    return 0.5 * (tpr + tnr)


def select_threshold(scored: ScoredSet) -> float:
    """Balanced-accuracy-optimal threshold over midpoints of adjacent
    distinct scores; ties broken toward the smaller threshold."""
    _require_both_classes(scored.labels, "select_threshold")
    distinct = np.unique(scored.scores)
    if len(distinct) == 1:
        return float(distinct[0])
    candidates = 0.5 * (distinct[:-1] + distinct[1:])
    best_t = candidates[0]
    best_b = -1.0
    for t in candidates:
        b = balanced_accuracy(scored, t)
        if b > best_b:
            best_b, best_t = b, t
    return float(best_t)


def paired_bootstrap(
    set_a: ScoredSet,
    set_b: ScoredSet,
    metric,
    n_boot: int = 10_000,
    rng: np.random.Generator | None = None,
) -> float:
    """Two-sided p-value for metric(a) - metric(b) over paired resamples of
    test items, with +1 smoothing so p is never exactly zero."""
    if n_boot < 1_000:
        raise MetricError("n_boot must be at least 1000")
    if len(set_a) != len(set_b) or not np.array_equal(set_a.labels, set_b.labels):
        raise MetricError("paired bootstrap needs identical test items")
    if rng is None:
        rng = np.random.default_rng(0)
    observed = metric(set_a) - metric(set_b)
    n = len(set_a)
    extreme = 0
    done = 0
    for _ in range(n_boot):
        idx = rng.integers(0, n, size=n)
        y = set_a.labels[idx]
        if y.sum() == 0 or y.sum() == n:
            continue  # resample lost a class; metric undefined, skip
        a = ScoredSet(set_a.scores[idx], y)
        b = ScoredSet(set_b.scores[idx], y)
        delta = metric(a) - metric(b)
        done += 1
        # centered null: how often the recentered delta is as extreme as observed
        if abs(delta - observed) >= abs(observed):
            extreme += 1
    if done == 0:
        raise MetricError("all bootstrap resamples were single-class")
    return (extreme + 1) / (done + 1)


@dataclass
class CellStat:
    mean: float | None
    std: float | None
    n: int
    missing_seeds: bool


def aggregate(
    rows: list[ReportRow], expected_seeds: int | None = None
) -> dict[tuple[int, str, float], dict[str, CellStat]]:
    """Mean and sample std (n-1) per (task, regime, fraction) and metric.

    Cells with fewer rows than expected_seeds are flagged, never fabricated.
    """
    cells: dict[tuple[int, str, float], list[ReportRow]] = {}
    for r in rows:
        cells.setdefault((r.task, r.regime, r.fraction), []).append(r)
    out = {}
    for key, group in cells.items():
        stats = {}
        for metric in ("auroc", "auprc", "bacc"):
            vals = np.array([getattr(r, metric) for r in group])
            std = float(vals.std(ddof=1)) if len(vals) > 1 else None
            missing = expected_seeds is not None and len(vals) < expected_seeds
            stats[metric] = CellStat(float(vals.mean()), std, len(vals), missing)
        out[key] = stats
    return out
