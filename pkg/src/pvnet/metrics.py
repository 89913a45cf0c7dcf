"""Classification accuracy, Euclidean retrieval ranking and mean average precision."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from pvnet.tensor import DimensionError

log = logging.getLogger(__name__)


def confusion_matrix(predictions, labels, n_classes: int | None = None) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise DimensionError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if n_classes is None:
        n_classes = int(max(predictions.max(initial=-1), labels.max(initial=-1))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    """Recall per true class; NaN for classes without samples."""
    totals = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, np.diag(cm) / np.maximum(totals, 1), np.nan)


def classify_metrics(predictions, labels, n_classes: int | None = None) -> tuple[float, float]:
    """(overall accuracy, mean class accuracy).

    Classes with no samples are left out of the mean with a warning.
    """
    cm = confusion_matrix(predictions, labels, n_classes)
    total = cm.sum()
    if total == 0:
        raise ValueError("no samples")
    overall = float(np.trace(cm) / total)
    recalls = per_class_accuracy(cm)
    empty = np.isnan(recalls)
    if empty.any():
        warnings.warn(f"classes {np.flatnonzero(empty).tolist()} have no samples; excluded from mean class accuracy")
    return overall, float(np.nanmean(recalls))


def retrieve(query, gallery, exclude: int | None = None) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance to ``query`` (ties by index).

    ``exclude`` drops one gallery index, used when the query sits in the gallery.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    g = np.asarray(gallery, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape[1] != q.shape[0]:
        raise DimensionError(f"query width {q.shape[0]} does not match gallery width {g.shape[1]}")
    diff = g - q
    dist = np.sqrt((diff * diff).sum(axis=1))
    order = np.argsort(dist, kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    return order


def rank_all(features, exclude_self: bool = True) -> list[np.ndarray]:
    """Rank the whole set against each member in turn."""
    feats = np.asarray(features, dtype=np.float64)
    return [retrieve(feats[i], feats, exclude=i if exclude_self else None) for i in range(len(feats))]


def average_precision(relevant_sorted: np.ndarray) -> float:
    """AP for one ranked list of booleans: mean over relevant ranks r of hits(<=r) / r."""
    rel = np.asarray(relevant_sorted, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return float("nan")
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


@dataclass
class RetrievalReport:
    mAP: float
    ap: np.ndarray
    recall: np.ndarray
    precision: np.ndarray


def pr_curve(rel_lists: list[np.ndarray], levels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean interpolated precision at fixed recall levels.

    Interpolated precision at recall r is the maximum precision at any
    recall >= r, computed per query and averaged over queries.
    """
    levels = np.linspace(0, 1, 11) if levels is None else np.asarray(levels, dtype=np.float64)
    curves = []
    for rel in rel_lists:
        rel = np.asarray(rel, dtype=bool)
        n_rel = rel.sum()
        if n_rel == 0:
            continue
        hits = np.cumsum(rel)
        ranks = np.arange(1, rel.size + 1)
        precision = hits / ranks
        recall = hits / n_rel
        # running max from the right
        interp = np.maximum.accumulate(precision[::-1])[::-1]
        at = np.searchsorted(recall, levels, side="left")
        curves.append(np.where(at < rel.size, interp[np.minimum(at, rel.size - 1)], 0.0))
    if not curves:
        return levels, np.zeros_like(levels)
    return levels, np.mean(curves, axis=0)


def map_score(rankings: list[np.ndarray], relevance) -> RetrievalReport:
    """Mean average precision over queries.

    ``relevance`` is either a list of boolean arrays aligned with the gallery
    (one per query) or a callable ``(query_index, gallery_index) -> bool``.
    Queries with no relevant item are skipped with a warning.
    """
    rel_lists, aps = [], []
    for q, order in enumerate(rankings):
        order = np.asarray(order)
        if callable(relevance):
            rel = np.array([bool(relevance(q, int(j))) for j in order], dtype=bool)
        else:
            rel = np.asarray(relevance[q], dtype=bool)[order]
        if not rel.any():
            warnings.warn(f"query {q} has no relevant gallery items; skipped")
            continue
        rel_lists.append(rel)
        aps.append(average_precision(rel))
    if not aps:
        raise ValueError("no query has a relevant gallery item")
    recall, precision = pr_curve(rel_lists)
    ap = np.array(aps)
    return RetrievalReport(float(ap.mean()), ap, recall, precision)


def retrieval_map(features, labels) -> RetrievalReport:
    """Leave-one-out retrieval over a labelled set: each item queries all others."""
    labels = np.asarray(labels)
    rankings = rank_all(features, exclude_self=True)
    relevance = [labels == labels[i] for i in range(len(labels))]
    return map_score(rankings, relevance)


@dataclass
class EvalReport:
    overall: float
    mean_class: float
    per_class: np.ndarray
    confusion: np.ndarray
    mAP: float | None = None
    pr_recall: np.ndarray | None = None
    pr_precision: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @classmethod
    def build(cls, predictions, labels, n_classes: int, features=None) -> "EvalReport":
        cm = confusion_matrix(predictions, labels, n_classes)
        overall, mean_class = classify_metrics(predictions, labels, n_classes)
        report = cls(overall, mean_class, per_class_accuracy(cm), cm)
        if features is not None and len(labels) > 1:
            ret = retrieval_map(features, labels)
            report.mAP, report.pr_recall, report.pr_precision = ret.mAP, ret.recall, ret.precision
        return report

    def to_dict(self) -> dict:
        out = {"overall": self.overall, "mean_class": self.mean_class,
               "per_class": [None if np.isnan(v) else float(v) for v in self.per_class],
               "confusion": self.confusion.tolist()}
        if self.mAP is not None:
            out["mAP"] = self.mAP
            out["pr_curve"] = {"recall": self.pr_recall.tolist(), "precision": self.pr_precision.tolist()}
        out.update(self.extras)
        return out
