"""Binary classification metrics over AMD probabilities (label 1 = amd)."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UndefinedMetricError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __init__(self, scores, labels):
        s = np.asarray(scores, dtype=np.float64).ravel()
        y = np.asarray(labels).ravel()
        if s.shape != y.shape:
            raise ShapeError(f"{s.size} scores but {y.size} labels")
        if not np.isin(y, (0, 1)).all():
            raise ConfigError("labels must be 0 (normal) or 1 (amd)")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def require_both_classes(self, metric):
        n_pos = int(self.labels.sum())
        if n_pos == 0 or n_pos == self.labels.size:
            raise UndefinedMetricError(f"{metric} needs both classes; got {n_pos} positives of {self.labels.size}")


@dataclass(frozen=True)
class CurveResult:
    value: float
    points: list  # [(x, y), ...]


def confusion(scored, threshold=0.5):
    """Positive prediction iff score >= threshold."""
    if not 0 <= threshold <= 1:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    pred = scored.scores >= threshold
    y = scored.labels == 1
    return ConfusionCounts(int((pred & y).sum()), int((~pred & ~y).sum()),
                           int((pred & ~y).sum()), int((~pred & y).sum()))


def accuracy(c):
    if c.total == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return (c.tp + c.tn) / c.total


def precision(c):
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c):
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def f1(c):
    """Harmonic mean of precision and recall; 0 when there is no true positive."""
    if c.tp == 0:
        return 0.0
    p, r = precision(c), recall(c)
    return 2 * p * r / (p + r)


def _sweep(scored):
    """Cumulative (tp, fp) after admitting each group of equal scores, highest first."""
    order = np.argsort(-scored.scores, kind="stable")
    s = scored.scores[order]
    y = scored.labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(1 - y)[last]
    return tps, fps, s[last]


def roc_curve(scored):
    scored.require_both_classes("auc_roc")
    tps, fps, _ = _sweep(scored)
    tpr = np.r_[0, tps] / tps[-1]
    fpr = np.r_[0, fps] / fps[-1]
    return fpr, tpr


def auc_roc(scored):
    """Trapezoidal area under the ROC curve; tied scores form one step (half credit)."""
    fpr, tpr = roc_curve(scored)
    area = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return CurveResult(area, [(float(a), float(b)) for a, b in zip(fpr, tpr)])


def pr_curve(scored):
    scored.require_both_classes("auc_pr")
    tps, fps, _ = _sweep(scored)
    prec = tps / (tps + fps)
    rec = tps / tps[-1]
    return rec, prec


def auc_pr(scored):
    """Step-wise area under precision-recall: sum over thresholds of dR * P.

    The returned points start at (recall 0, precision 1) for plotting.
    """
    rec, prec = pr_curve(scored)
    area = float(np.sum(np.diff(np.r_[0.0, rec]) * prec))
    return CurveResult(area, [(0.0, 1.0)] + [(float(r), float(p)) for r, p in zip(rec, prec)])


def summarize(scores, labels, threshold=0.5):
    sc = ScoredSet(scores, labels)
    c = confusion(sc, threshold)
    roc = auc_roc(sc)
    pr = auc_pr(sc)
    return {"accuracy": accuracy(c), "f1": f1(c), "auc_roc": roc.value, "auc_pr": pr.value,
            "roc_points": roc.points, "pr_points": pr.points, "confusion": c}
