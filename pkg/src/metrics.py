"""Average precision and top-k COCO-style multi-label metrics."""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.metrics import multilabel_confusion_matrix, precision_recall_curve

from src.autodiff import Tensor
from src.models import MetricsReport

logger = logging.getLogger(__name__)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """All-points interpolated AP.

    Interpolated precision at recall ``r`` is the best precision reached at
    any recall >= ``r``; AP sums it over every recall increment.
    """

    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    if not np.any(labels == 1):
        raise ValueError("average precision is undefined without positive labels")
    precision, recall, _ = precision_recall_curve(labels, scores)
    # sklearn orders points by decreasing recall; flip to increasing
    precision, recall = precision[::-1], recall[::-1]
    interpolated = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(recall) * interpolated[1:]))


def mean_average_precision(
    scores: np.ndarray,
    labels: np.ndarray,
    names: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """Per-label AP and their unweighted mean; labels without positives are skipped."""

    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must both be [N, C]")
    names = list(names) if names is not None else [str(c) for c in range(labels.shape[1])]
    report = MetricsReport()
    for c, name in enumerate(names):
        if not np.any(labels[:, c] == 1):
            logger.warning("label %s has no positive samples; excluded from mAP", name)
            report.excluded.append(name)
            continue
        report.per_label_ap[name] = average_precision(scores[:, c], labels[:, c])
    if not report.per_label_ap:
        raise ValueError("no label has positive samples; mAP is undefined")
    report.mAP = float(np.mean(list(report.per_label_ap.values())))
    return report


def top_k_predictions(scores: np.ndarray, k: int) -> np.ndarray:
    """Binary matrix marking each row's ``k`` highest scores; ties keep the lower column."""

    scores = np.asarray(scores)
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"top_k must lie in [1, {scores.shape[1]}], got {k}")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    predicted = np.zeros(scores.shape, dtype=np.int64)
    np.put_along_axis(predicted, order, 1, axis=1)
    return predicted


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def _f1(precision: float, recall: float) -> float:
    return _ratio(2 * precision * recall, precision + recall)


def coco_style_metrics(scores: np.ndarray, labels: np.ndarray, k: int = 3) -> MetricsReport:
    """Overall and per-class precision, recall and F1 of top-``k`` predictions.

    Per-class averages run over classes with at least one positive.
    """

    labels = np.asarray(labels).astype(np.int64)
    predicted = top_k_predictions(scores, k)
    tally = multilabel_confusion_matrix(labels, predicted)
    tp, fp, fn = tally[:, 1, 1], tally[:, 0, 1], tally[:, 1, 0]

    report = MetricsReport(top_k=k)
    report.overall_precision = _ratio(tp.sum(), tp.sum() + fp.sum())
    report.overall_recall = _ratio(tp.sum(), tp.sum() + fn.sum())
    report.overall_f1 = _f1(report.overall_precision, report.overall_recall)

    present = np.flatnonzero(labels.sum(axis=0) > 0)
    if present.size:
        report.class_precision = float(np.mean([_ratio(tp[c], tp[c] + fp[c]) for c in present]))
        report.class_recall = float(np.mean([_ratio(tp[c], tp[c] + fn[c]) for c in present]))
    report.class_f1 = _f1(report.class_precision, report.class_recall)
    return report


def evaluate_scores(
    scores: np.ndarray,
    labels: np.ndarray,
    names: Sequence[str],
    k: int = 3,
    name: Optional[str] = None,
) -> MetricsReport:
    """AP per label plus the top-k summary in one report."""

    report = mean_average_precision(scores, labels, names)
    coco = coco_style_metrics(scores, labels, min(k, labels.shape[1]))
    for field_name in (
        "top_k",
        "overall_precision",
        "overall_recall",
        "overall_f1",
        "class_precision",
        "class_recall",
        "class_f1",
    ):
        setattr(report, field_name, getattr(coco, field_name))
    report.name = name
    return report


def predict_in_batches(predict: Callable[[Tensor], np.ndarray], images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Run ``predict`` over fixed, ordered batches and stack the results."""

    chunks = [predict(Tensor._wrap(images[i : i + batch_size])) for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


def evaluate_amalgamated(net, dataset, k: int = 3, batch_size: int = 100, name: Optional[str] = None) -> MetricsReport:
    """Score a regrouped network on the customized labels of ``dataset``."""

    customized = list(net.customized_labels)
    scores = predict_in_batches(net.predict, dataset.images, batch_size)
    names = [dataset.label_names[label] for label in customized]
    return evaluate_scores(scores, dataset.restrict(customized), names, k, name=name)
