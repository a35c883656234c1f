"""Evaluation metrics written from scratch, plus report assembly."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UndefinedMetricError

MACRO_F1_DEFINITION = (
    "macro F1 = mean of positive-class and negative-class F1 at the threshold, "
    "averaged over tasks; binary F1 = positive-class F1 averaged over tasks"
)


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(x)
    # boundaries of tie groups in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks start+1..end
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with ties credited one half, via rank sums."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def has_score_ties(scores) -> bool:
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    return bool(np.any(s[1:] == s[:-1]))


def auprc(scores, labels) -> float:
    """Average precision with step interpolation.

    Samples are ranked by descending score; ties keep their original order.
    """
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    tp = np.cumsum(y)
    precision = tp / np.arange(1, y.size + 1)
    return float(precision[y == 1].sum() / n_pos)


def _f1(tp, fp, fn) -> float:
    den = 2 * tp + fp + fn
    return 2 * tp / den if den else 0.0


def f1_scores(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """(binary F1, macro F1); 2-D inputs are treated as (samples, tasks) and averaged over tasks."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same shape")
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    binary, macro = [], []
    for j in range(s.shape[1]):
        pred = s[:, j] >= threshold
        truth = y[:, j] == 1
        tp = int(np.sum(pred & truth))
        fp = int(np.sum(pred & ~truth))
        fn = int(np.sum(~pred & truth))
        tn = int(np.sum(~pred & ~truth))
        pos = _f1(tp, fp, fn)
        neg = _f1(tn, fn, fp)
        binary.append(pos)
        macro.append((pos + neg) / 2.0)
    return float(np.mean(binary)), float(np.mean(macro))


@dataclass
class TaskMetrics:
    label: str
    auroc: float | None
    auprc: float | None
    auprc_ties: bool = False


@dataclass
class MetricsReport:
    macro_f1: float
    binary_f1: float
    auroc: float | None
    auprc: float | None
    per_task: list = field(default_factory=list)
    n_samples: int = 0
    config_hash: str = ""
    threshold: float = 0.5
    macro_f1_definition: str = MACRO_F1_DEFINITION
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_task"] = [TaskMetrics(**t) for t in d.get("per_task", [])]
        return cls(**d)

    def headline(self) -> dict:
        return {"macro_f1": self.macro_f1, "binary_f1": self.binary_f1, "auroc": self.auroc, "auprc": self.auprc}


def _round(x):
    return None if x is None else float(round(x, 12))


def report_from_scores(probs, labels, label_names, config_hash: str = "", threshold: float = 0.5) -> MetricsReport:
    """Headline and per-task metrics; undefined per-task metrics become None and are left out of the means."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 1:
        probs, labels = probs[:, None], labels[:, None]
    if probs.shape[0] == 0:
        raise ValueError("cannot evaluate an empty split")
    if len(label_names) != probs.shape[1]:
        raise ValueError("label_names must match the number of tasks")
    per_task, notes = [], []
    for j, name in enumerate(label_names):
        try:
            roc = auroc(probs[:, j], labels[:, j])
        except UndefinedMetricError as exc:
            roc = None
            notes.append(f"{name}: AUROC undefined ({exc})")
        try:
            pr = auprc(probs[:, j], labels[:, j])
        except UndefinedMetricError as exc:
            pr = None
            notes.append(f"{name}: AUPRC undefined ({exc})")
        per_task.append(TaskMetrics(name, _round(roc), _round(pr), has_score_ties(probs[:, j])))
    for note in notes:
        warnings.warn(note, stacklevel=2)
    rocs = [t.auroc for t in per_task if t.auroc is not None]
    prs = [t.auprc for t in per_task if t.auprc is not None]
    binary, macro = f1_scores(probs, labels, threshold)
    return MetricsReport(
        macro_f1=_round(macro),
        binary_f1=_round(binary),
        auroc=_round(float(np.mean(rocs))) if rocs else None,
        auprc=_round(float(np.mean(prs))) if prs else None,
        per_task=per_task,
        n_samples=int(probs.shape[0]),
        config_hash=config_hash,
        threshold=threshold,
        warnings=notes,
    )
