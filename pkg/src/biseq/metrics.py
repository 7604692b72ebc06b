"""Ranking and classification metrics, plus macro-averaging over groups.

Conventions: rankings sort by descending score with ties kept in input
order (AP, P/R/F1@K); ROC AUC gives tied positive/negative pairs half
credit. Metrics that are undefined for the given labels raise
:class:`UndefinedMetricError` rather than returning 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import InputError, ParseError, UndefinedMetricError

DEFAULT_KS = (200, 50, 20, 10, 5)


class ScoredLabel(NamedTuple):
    score: float
    label: int
    group: str | None = None


def _arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores but {y.size} labels")
    if not np.isfinite(s).all():
        raise InputError("scores must be finite")
    return s, y


def _ranking(s: np.ndarray) -> np.ndarray:
    return np.argsort(-s, kind="stable")


def average_precision(scores, labels) -> float:
    """Mean over positives of the precision at each positive's rank."""
    s, y = _arrays(scores, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    hits = pos[_ranking(s)]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def roc_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count half).

    Computed from mid-rank sums in O(n log n).
    """
    s, y = _arrays(scores, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both positive and negative labels")
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    ranks = np.empty(s.size)
    # mid-rank for each run of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    mid = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def prf_at_k(scores, labels, k: int) -> tuple[float, float, float]:
    """Precision, recall and F1 of the top ``min(k, n)`` items."""
    if k < 1:
        raise InputError("k must be >= 1")
    s, y = _arrays(scores, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("recall@k needs at least one positive")
    top = min(k, s.size)
    tp = int((y[_ranking(s)[:top]] == 1).sum())
    p = tp / top
    r = tp / n_pos
    f1 = 0.0 if tp == 0 else 2 * p * r / (p + r)
    return p, r, f1


def accuracy(probs, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InputError("accuracy needs a non-empty 2-d array of class probabilities")
    if p.shape[0] != y.size:
        raise InputError(f"{p.shape[0]} rows but {y.size} labels")
    return float(np.mean(np.argmax(p, axis=1) == y))


@dataclass
class EvalReport:
    n: int
    n_pos: int
    avgp: float | None = None
    auc: float | None = None
    accuracy: float | None = None
    precision_at: dict[int, float] = field(default_factory=dict)
    recall_at: dict[int, float] = field(default_factory=dict)
    f1_at: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float | int | None]:
        out: dict = {"n": self.n, "n_pos": self.n_pos, "avgp": self.avgp, "auc": self.auc,
                     "accuracy": self.accuracy}
        for k in sorted(self.precision_at, reverse=True):
            out[f"p@{k}"] = self.precision_at[k]
            out[f"r@{k}"] = self.recall_at[k]
            out[f"f1@{k}"] = self.f1_at[k]
        return out

    def get(self, name: str):
        return self.as_dict().get(name)


def evaluate(scores=None, labels=None, probs=None, ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
    """Every metric that is defined for the inputs.

    Binary tasks pass positive-class ``scores``; ``probs`` (rows of class
    probabilities) enables accuracy. For binary scores without ``probs`` the
    rows ``[1 - s, s]`` are used.
    """
    if scores is None and probs is None:
        raise InputError("evaluate needs scores or probabilities")
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if probs is None:
        s = np.asarray(scores, dtype=np.float64).reshape(-1)
        probs = np.stack([1.0 - s, s], axis=1)
    report = EvalReport(n=int(y.size), n_pos=int((y == 1).sum()))
    if y.size:
        report.accuracy = accuracy(probs, y)
    if scores is not None and report.n_pos > 0:
        report.avgp = average_precision(scores, y)
        if report.n_pos < y.size:
            report.auc = roc_auc(scores, y)
        for k in ks:
            p, r, f1 = prf_at_k(scores, y, k)
            report.precision_at[k] = p
            report.recall_at[k] = r
            report.f1_at[k] = f1
    return report


@dataclass
class MacroReport:
    groups: dict[str, EvalReport]
    mean: dict[str, float]
    skipped: dict[str, list[str]]

    def get(self, name: str):
        return self.mean.get(name)


def macro_average(reports: Mapping[str, EvalReport]) -> MacroReport:
    """Unweighted mean of each metric over the groups where it is defined.

    ``skipped[metric]`` lists the groups left out of that metric's mean.
    """
    if not reports:
        raise UndefinedMetricError("no groups to average")
    names: list[str] = []
    for rep in reports.values():
        for key in rep.as_dict():
            if key not in ("n", "n_pos") and key not in names:
                names.append(key)
    mean, skipped = {}, {}
    for name in names:
        vals = []
        for group, rep in reports.items():
            v = rep.get(name)
            if v is None:
                skipped.setdefault(name, []).append(group)
            else:
                vals.append(v)
        if vals:
            mean[name] = float(np.mean(vals))
    if not mean:
        raise UndefinedMetricError("no metric is defined for any group")
    return MacroReport(dict(reports), mean, skipped)


def evaluate_grouped(scores, labels, groups, ks: Sequence[int] = DEFAULT_KS) -> MacroReport:
    s, y = _arrays(scores, labels)
    g = np.asarray(groups).reshape(-1)
    reports = {}
    for name in dict.fromkeys(g.tolist()):
        sel = g == name
        reports[str(name)] = evaluate(s[sel], y[sel], ks=ks)
    return macro_average(reports)


def read_score_file(path) -> list[ScoredLabel]:
    """Parse ``score<TAB>label[<TAB>group]`` lines."""
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise ParseError(f"expected 2 or 3 tab-separated columns, got {len(cols)}", lineno)
            try:
                score, label = float(cols[0]), int(cols[1])
            except ValueError:
                raise ParseError("score must be a number and label an integer", lineno) from None
            items.append(ScoredLabel(score, label, cols[2] if len(cols) == 3 else None))
    if not items:
        raise InputError(f"{path}: no scores")
    return items
