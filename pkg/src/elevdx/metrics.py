"""Classification metrics, bootstrap confidence intervals, and paired-model statistics.

All multi-class metrics are macro-averaged (the datasets this toolkit targets
are heavily imbalanced): balanced accuracy = mean per-class recall, F1 = mean
of per-class F1 scores, AUROC = mean one-vs-rest AUROC. Classes absent from
the targets are excluded from macro averages with a logged warning.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "balanced_accuracy", "precision", "recall", "f1", "auroc")


@dataclass
class MetricReport:
    accuracy: float
    balanced_accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float | None
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)
    n_test: int = 0
    run_id: int = 0

    def values(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_dict(self) -> dict:
        out = dict(self.values())
        out["n_test"] = self.n_test
        out["run_id"] = self.run_id
        out["ci"] = {k: list(v) for k, v in self.ci.items()}
        return out


@dataclass
class StatTestResult:
    midp_value: float
    discordant_b: int
    discordant_c: int
    cohens_d: float | None = None
    n_runs_per_group: int = 0

    def to_dict(self) -> dict:
        return {
            "midp_value": self.midp_value,
            "discordant_b": self.discordant_b,
            "discordant_c": self.discordant_c,
            "cohens_d": self.cohens_d,
            "n_runs_per_group": self.n_runs_per_group,
        }


def binary_auroc(scores, positive) -> float:
    """Tie-aware rank AUROC (equals trapezoidal ROC integration).

    Ties receive their average rank, so a constant scorer gives exactly 0.5.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n = scores.size
    n_pos = int(positive.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("binary AUROC needs both positive and negative samples")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    cumulative = np.cumsum(counts)
    average_rank = (cumulative - counts + 1 + cumulative) / 2.0
    ranks = average_rank[inverse]
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auroc(probs, targets, num_classes: int | None = None) -> float | None:
    """Macro one-vs-rest AUROC; None when fewer than two classes are present."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != targets.shape[0]:
        raise DataError(f"probs {probs.shape} do not match targets {targets.shape}")
    num_classes = num_classes or probs.shape[1]
    present = np.unique(targets)
    if present.size < 2:
        return None
    aucs = []
    for c in range(num_classes):
        pos = targets == c
        if not pos.any():
            log.warning("class %d absent from targets; excluded from macro AUROC", c)
            continue
        aucs.append(binary_auroc(probs[:, c], pos))
    return float(np.mean(aucs))


def confusion_matrix(pred, targets, num_classes: int) -> np.ndarray:
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(targets, pred):
        mat[t, p] += 1
    return mat


def classification_metrics(predictions, targets, num_classes: int,
                           run_id: int = 0, ci_level: float | None = 0.95,
                           resamples: int = 1000, seed: int = 0) -> MetricReport:
    """All Table-style metrics for one model on one split.

    `predictions` are per-sample probability vectors; hard decisions are their
    argmax (lowest index on ties). Confidence intervals are percentile
    bootstrap over test items; pass ci_level=None to skip them.
    """
    probs = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != targets.shape[0]:
        raise DataError(f"predictions {probs.shape} do not match targets {targets.shape}")
    if probs.shape[0] == 0:
        raise DataError("no samples to evaluate")

    point = _point_metrics(probs, targets, num_classes)
    ci = {}
    if ci_level is not None:
        rng = np.random.default_rng(seed)
        n = probs.shape[0]
        samples = {name: [] for name in METRIC_NAMES}
        for _ in range(int(resamples)):
            idx = rng.integers(0, n, size=n)
            resample = _point_metrics(probs[idx], targets[idx], num_classes)
            for name in METRIC_NAMES:
                value = resample[name]
                if value is not None:
                    samples[name].append(value)
        alpha = (1.0 - ci_level) / 2.0
        for name in METRIC_NAMES:
            if point[name] is None or not samples[name]:
                continue
            arr = np.asarray(samples[name])
            # widen if needed: the interval must bracket the point estimate
            ci[name] = (min(float(np.percentile(arr, 100 * alpha)), point[name]),
                        max(float(np.percentile(arr, 100 * (1 - alpha))), point[name]))

    return MetricReport(n_test=int(probs.shape[0]), run_id=run_id, ci=ci, **point)


def _point_metrics(probs, targets, num_classes) -> dict:
    pred = np.argmax(probs, axis=1)
    accuracy = float(np.mean(pred == targets))
    mat = confusion_matrix(pred, targets, num_classes)
    support = mat.sum(axis=1)
    predicted = mat.sum(axis=0)
    present = support > 0
    if not present.all():
        log.warning("classes %s absent from targets; excluded from macro averages",
                    np.flatnonzero(~present).tolist())
    diag = np.diag(mat).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        recall_per = np.where(present, diag / np.maximum(support, 1), np.nan)
        precision_per = np.where(predicted > 0, diag / np.maximum(predicted, 1), 0.0)
    recalls = recall_per[present]
    precisions = precision_per[present]
    f1_per = np.where(precisions + recalls > 0,
                      2 * precisions * recalls / np.maximum(precisions + recalls, 1e-300),
                      0.0)
    return {
        "accuracy": accuracy,
        "balanced_accuracy": float(np.mean(recalls)),
        "precision": float(np.mean(precisions)),
        "recall": float(np.mean(recalls)),
        "f1": float(np.mean(f1_per)),
        "auroc": macro_auroc(probs, targets, num_classes),
    }


def bootstrap_ci(values, statistic="mean", level: float = 0.95,
                 resamples: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap CI of a statistic over per-sample values.

    `values` is one array (e.g. 0/1 correctness) or a tuple of aligned arrays
    resampled jointly; `statistic` is 'mean' or a callable over the resampled
    arrays. Deterministic given the seed.
    """
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level must be in (0, 1), got {level}")
    if resamples < 100:
        raise ConfigError(f"need at least 100 resamples, got {resamples}")
    arrays = values if isinstance(values, tuple) else (values,)
    arrays = tuple(np.asarray(a) for a in arrays)
    n = arrays[0].shape[0]
    if n == 0:
        raise DataError("cannot bootstrap an empty sample")
    if any(a.shape[0] != n for a in arrays):
        raise DataError("bootstrap arrays must have equal length")
    if statistic == "mean":
        stat = lambda *parts: float(np.mean(parts[0]))
    elif callable(statistic):
        stat = statistic
    else:
        raise ConfigError(f"unknown statistic {statistic!r}")

    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(int(resamples)):
        idx = rng.integers(0, n, size=n)
        try:
            value = stat(*(a[idx] for a in arrays))
        except DataError:
            continue  # e.g. single-class AUROC resample
        if value is not None and not math.isnan(value):
            draws.append(value)
    if not draws:
        raise DataError("no valid bootstrap resamples")
    alpha = (1.0 - level) / 2.0
    arr = np.asarray(draws)
    return (float(np.percentile(arr, 100 * alpha)),
            float(np.percentile(arr, 100 * (1 - alpha))))


def mcnemar_midp(correct_a, correct_b) -> StatTestResult:
    """McNemar's mid-p test on paired correctness vectors.

    b = items only model A got right, c = items only model B got right.
    With X ~ Binomial(b + c, 1/2) and k = min(b, c), the mid-p value is
    2 P(X <= k) - P(X = k), computed in exact integer arithmetic (no normal
    approximation) and clamped to [0, 1].
    """
    correct_a = np.asarray(correct_a, dtype=bool)
    correct_b = np.asarray(correct_b, dtype=bool)
    if correct_a.shape != correct_b.shape:
        raise DataError("paired correctness vectors differ in length")
    b = int(np.sum(correct_a & ~correct_b))
    c = int(np.sum(~correct_a & correct_b))
    n = b + c
    if n == 0:
        raise DataError("no discordant pairs: McNemar's test is undefined")
    k = min(b, c)
    numerator = 2 * sum(math.comb(n, i) for i in range(k + 1)) - math.comb(n, k)
    midp = numerator / (2 ** n)
    midp = min(max(midp, 0.0), 1.0)
    return StatTestResult(midp_value=midp, discordant_b=b, discordant_c=c)


def cohens_d(group_a, group_b) -> float:
    """Standardized mean difference (mean_b - mean_a) / pooled sample std.

    Positive when the second group's mean is larger. Sample (n-1) variances;
    a degenerate pooled variance is an error rather than an infinite d.
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DataError("Cohen's d needs at least two values per group")
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    pooled = ((a.size - 1) * var_a + (b.size - 1) * var_b) / (a.size + b.size - 2)
    if pooled <= 0.0:
        raise DataError("pooled variance is zero: Cohen's d is undefined")
    return float((b.mean() - a.mean()) / math.sqrt(pooled))


def aggregate_runs(reports: list[MetricReport]) -> dict:
    """Mean +/- sample std per metric over repeated runs.

    A single report yields std 0 with a warning flag set.
    """
    if not reports:
        raise DataError("no reports to aggregate")
    summary = {"n_runs": len(reports), "single_run_warning": len(reports) == 1}
    for name in METRIC_NAMES:
        values = [r.values()[name] for r in reports]
        if any(v is None for v in values):
            summary[name] = None
            continue
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        summary[name] = {"mean": float(arr.mean()), "std": std}
    if summary["single_run_warning"]:
        log.warning("aggregating a single run: std is trivially 0")
    return summary
