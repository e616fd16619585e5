"""Classification metrics and per-class channel-attention summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .model import Model

ATTENTION_THRESHOLD = 0.5  # sigmoid activation midpoint


@dataclass
class MetricsReport:
    precision: List[Optional[float]]
    recall: List[Optional[float]]
    support_fraction: List[float]
    macro_precision: Optional[float]
    macro_recall: Optional[float]
    class_names: List[str]
    accuracy: Optional[float] = None
    confusion: Optional[np.ndarray] = None  # rows = true class, columns = predicted


def _mean_defined(values: Sequence[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(sum(vals) / len(vals)) if vals else None


def metrics_from_confusion(confusion, class_names: Optional[Sequence[str]] = None) -> MetricsReport:
    conf = np.asarray(confusion, dtype=np.int64)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {conf.shape}")
    total = int(conf.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    rows = conf.sum(axis=1)
    cols = conf.sum(axis=0)
    diag = np.diag(conf)
    precision = [float(diag[c] / cols[c]) if cols[c] > 0 else None for c in range(len(conf))]
    recall = [float(diag[c] / rows[c]) if rows[c] > 0 else None for c in range(len(conf))]
    names = list(class_names) if class_names else [str(c) for c in range(len(conf))]
    return MetricsReport(
        precision=precision,
        recall=recall,
        support_fraction=[float(r / total) for r in rows],
        macro_precision=_mean_defined(precision),
        macro_recall=_mean_defined(recall),
        class_names=names,
        accuracy=float(diag.sum() / total),
        confusion=conf,
    )


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return np.bincount(y_true * num_classes + y_pred, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def evaluate(model: Model, dataset, class_names: Optional[Sequence[str]] = None) -> MetricsReport:
    """Main-head argmax predictions scored against the dataset labels."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs, _ = model.predict_proba(dataset.series)
    pred = np.argmax(probs, axis=1)  # first maximum -> lower class index wins ties
    conf = confusion_matrix(dataset.label, pred, model.cfg.num_classes)
    names = class_names or getattr(dataset, "class_names", None) or None
    return metrics_from_confusion(conf, names)


class BoxStats(NamedTuple):
    min: Optional[float]
    q1: Optional[float]
    median: Optional[float]
    q3: Optional[float]
    max: Optional[float]
    count: int


EMPTY_BOX = BoxStats(None, None, None, None, None, 0)


def box_stats(values) -> BoxStats:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return EMPTY_BOX
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    return BoxStats(float(v.min()), float(q1), float(med), float(q3), float(v.max()), int(v.size))


@dataclass
class AttentionReport:
    class_names: List[str]
    channel_names: List[str]
    normalized: List[List[BoxStats]]  # [class][channel]
    raw: List[List[BoxStats]] = field(default_factory=list)
    normalization: str = "pixel"
    threshold: float = ATTENTION_THRESHOLD

    def medians(self) -> np.ndarray:
        """(classes, channels) normalised medians, NaN for empty classes."""
        return np.array([[np.nan if s.median is None else s.median for s in row] for row in self.normalized])


def normalize_alphas(alphas: np.ndarray, labels: np.ndarray, num_classes: int, mode: str = "pixel") -> np.ndarray:
    """Per-pixel division by the pixel's weight sum, or (``class``) by the mean
    pixel sum of the pixel's class."""
    sums = alphas.sum(axis=1, keepdims=True)
    if mode == "pixel":
        return alphas / sums
    if mode == "class":
        out = np.empty_like(alphas)
        for c in range(num_classes):
            sel = labels == c
            if sel.any():
                out[sel] = alphas[sel] / sums[sel].mean()
        return out
    raise ValueError(f"normalization must be 'pixel' or 'class', got {mode!r}")


def attention_report_from_alphas(alphas, labels, class_names: Sequence[str], channel_names: Sequence[str],
                                 normalization: str = "pixel") -> AttentionReport:
    alphas = np.asarray(alphas, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = len(class_names)
    norm = normalize_alphas(alphas, labels, k, normalization)
    normalized, raw = [], []
    for c in range(k):
        sel = labels == c
        normalized.append([box_stats(norm[sel, j]) for j in range(alphas.shape[1])])
        raw.append([box_stats(alphas[sel, j]) for j in range(alphas.shape[1])])
    return AttentionReport(list(class_names), list(channel_names), normalized, raw, normalization)


def attention_report(model: Model, dataset, normalization: str = "pixel",
                     class_names: Optional[Sequence[str]] = None,
                     channel_names: Optional[Sequence[str]] = None) -> AttentionReport:
    """Distribution of channel weights per true class over ``dataset``."""
    if model.cfg.attention_mode == "none":
        raise ValueError("model has no attention layer (attention_mode='none')")
    if len(dataset) == 0:
        raise ValueError("cannot report attention on an empty dataset")
    _, alphas = model.predict_proba(dataset.series)
    classes = class_names or getattr(dataset, "class_names", None) or [str(c) for c in range(model.cfg.num_classes)]
    channels = channel_names or getattr(dataset, "channel_names", None) or [
        f"c{j}" for j in range(model.cfg.num_channels)
    ]
    return attention_report_from_alphas(alphas, dataset.label, classes, channels, normalization)


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------

METRICS_COLUMNS = ("class", "precision", "recall", "support_fraction")
ATTENTION_COLUMNS = ("class", "channel", "min", "q1", "median", "q3", "max", "count")
MEAN_ROW = "mean"


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6f}"


def _opt_float(s: str) -> Optional[float]:
    return None if s == "" else float(s)


def _box_json(s: BoxStats) -> dict:
    return s._asdict()


def report_to_json(report) -> dict:
    if isinstance(report, MetricsReport):
        return {
            "kind": "metrics",
            "class_names": report.class_names,
            "accuracy": report.accuracy,
            "confusion": None if report.confusion is None else report.confusion.tolist(),
            "precision": report.precision,
            "recall": report.recall,
            "support_fraction": report.support_fraction,
            "macro_precision": report.macro_precision,
            "macro_recall": report.macro_recall,
        }
    return {
        "kind": "attention",
        "class_names": report.class_names,
        "channel_names": report.channel_names,
        "normalization": report.normalization,
        "threshold": report.threshold,
        "normalized": [[_box_json(s) for s in row] for row in report.normalized],
        "raw": [[_box_json(s) for s in row] for row in report.raw],
    }


def report_from_json(obj: dict):
    if obj["kind"] == "metrics":
        conf = obj["confusion"]
        return MetricsReport(
            precision=obj["precision"],
            recall=obj["recall"],
            support_fraction=obj["support_fraction"],
            macro_precision=obj["macro_precision"],
            macro_recall=obj["macro_recall"],
            class_names=obj["class_names"],
            accuracy=obj["accuracy"],
            confusion=None if conf is None else np.asarray(conf, dtype=np.int64),
        )
    if obj["kind"] == "attention":
        return AttentionReport(
            class_names=obj["class_names"],
            channel_names=obj["channel_names"],
            normalized=[[BoxStats(**s) for s in row] for row in obj["normalized"]],
            raw=[[BoxStats(**s) for s in row] for row in obj["raw"]],
            normalization=obj["normalization"],
            threshold=obj["threshold"],
        )
    raise ValueError(f"unknown report kind {obj['kind']!r}")


def _check_finite(report) -> None:
    vals: List[Optional[float]] = []
    if isinstance(report, MetricsReport):
        vals += report.precision + report.recall + report.support_fraction
    else:
        for row in report.normalized + report.raw:
            for s in row:
                vals += [s.min, s.q1, s.median, s.q3, s.max]
    if any(v is not None and not np.isfinite(v) for v in vals):
        raise ValueError("report contains non-finite values")


def export_report(report, path, kind: str = "csv") -> None:
    """Write a metrics or attention report as CSV (6 decimals) or JSON (lossless)."""
    _check_finite(report)
    if kind == "json":
        text = json.dumps(report_to_json(report), indent=2, sort_keys=True) + "\n"
        with open(path, "w") as fh:
            fh.write(text)
        return
    if kind != "csv":
        raise ValueError(f"kind must be 'csv' or 'json', got {kind!r}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if isinstance(report, MetricsReport):
            writer.writerow(METRICS_COLUMNS)
            for name, p, r, s in zip(report.class_names, report.precision, report.recall, report.support_fraction):
                writer.writerow([name, _fmt(p), _fmt(r), _fmt(s)])
            writer.writerow([MEAN_ROW, _fmt(report.macro_precision), _fmt(report.macro_recall), ""])
        else:
            writer.writerow(ATTENTION_COLUMNS)
            for cname, row in zip(report.class_names, report.normalized):
                for chname, s in zip(report.channel_names, row):
                    writer.writerow([cname, chname, _fmt(s.min), _fmt(s.q1), _fmt(s.median), _fmt(s.q3),
                                     _fmt(s.max), str(s.count)])


def read_report(path, kind: str = "csv"):
    """Parse a file written by :func:`export_report`.

    CSV input yields only what the CSV carries: no confusion matrix or
    accuracy for metrics, no raw distributions for attention.
    """
    if kind == "json":
        with open(path) as fh:
            return report_from_json(json.load(fh))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = tuple(rows[0]), rows[1:]
    if header == METRICS_COLUMNS:
        classes = [r for r in body if r[0] != MEAN_ROW]
        mean = next((r for r in body if r[0] == MEAN_ROW), None)
        return MetricsReport(
            precision=[_opt_float(r[1]) for r in classes],
            recall=[_opt_float(r[2]) for r in classes],
            support_fraction=[float(r[3]) for r in classes],
            macro_precision=_opt_float(mean[1]) if mean else None,
            macro_recall=_opt_float(mean[2]) if mean else None,
            class_names=[r[0] for r in classes],
        )
    if header == ATTENTION_COLUMNS:
        class_names: List[str] = []
        channel_names: List[str] = []
        cells = {}
        for r in body:
            if r[0] not in class_names:
                class_names.append(r[0])
            if r[1] not in channel_names:
                channel_names.append(r[1])
            cells[(r[0], r[1])] = BoxStats(*[_opt_float(v) for v in r[2:7]], int(r[7]))
        normalized = [[cells[(c, ch)] for ch in channel_names] for c in class_names]
        return AttentionReport(class_names, channel_names, normalized)
    raise ValueError(f"{path}: unrecognised report header {header}")
