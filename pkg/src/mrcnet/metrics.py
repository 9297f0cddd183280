"""Pixel-level evaluation: confusion counts, region/threshold scores and ROC AUC."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, UndefinedMetricError

CSV_VERSION = "mrcnet-metrics v1"
CSV_COLUMNS = (
    "id", "se", "sp", "acc", "bacc", "f1", "dice", "mcc",
    "jaccard", "overlap_error", "auc", "threshold", "n_pixels",
)
METRIC_NAMES = CSV_COLUMNS[1:11]
AGGREGATIONS = ("per_image_mean", "pooled")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricsReport:
    se: float
    sp: float
    acc: float
    bacc: float
    f1: float
    dice: float
    mcc: float
    jaccard: float
    overlap_error: float
    auc: float = float("nan")
    threshold: float = 0.5
    n_pixels: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def csv_row(self, image_id: str) -> list[str]:
        d = self.as_dict()
        return [image_id] + [_fmt(d[c]) for c in CSV_COLUMNS[1:]]


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _as_bool(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise ConfigError(f"{name} must be binary")
    return a.astype(bool)


def _select(arrays: Sequence[np.ndarray], mask) -> list[np.ndarray]:
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ConfigError(f"shape mismatch: {shape} vs {a.shape}")
    if mask is None:
        return [a.ravel() for a in arrays]
    mask = _as_bool(mask, "mask")
    if mask.shape != shape:
        raise ConfigError(f"mask shape {mask.shape} does not match {shape}")
    return [a[mask] for a in arrays]


def confusion(pred_binary, gt, mask=None) -> ConfusionCounts:
    pred, truth = _select([_as_bool(pred_binary, "prediction"), _as_bool(gt, "ground truth")], mask)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp=tp, fp=fp, tn=pred.size - tp - fp - fn, fn=fn)


def scalar_metrics(c: ConfusionCounts, threshold: float = 0.5) -> MetricsReport:
    """Every threshold-dependent score from one set of confusion counts.

    Raises UndefinedMetricError when the evaluated region contains only one
    ground-truth class.
    """
    tp, fp, tn, fn = c.tp, c.fp, c.tn, c.fn
    if tp + fn == 0:
        raise UndefinedMetricError("no positive ground-truth pixels: sensitivity is undefined")
    if tn + fp == 0:
        raise UndefinedMetricError("no negative ground-truth pixels: specificity is undefined")
    se = tp / (tp + fn)
    sp = tn / (tn + fp)
    f1 = 2 * tp / (2 * tp + fp + fn)
    jac = tp / (tp + fp + fn)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    # all-negative prediction: MCC's limit is 0
    mcc = (tp * tn - fp * fn) / math.sqrt(denom) if denom else 0.0
    return MetricsReport(
        se=se, sp=sp, acc=(tp + tn) / c.total, bacc=(se + sp) / 2, f1=f1, dice=f1,
        mcc=mcc, jaccard=jac, overlap_error=1.0 - jac, threshold=threshold, n_pixels=c.total,
    )


def auc(scores, gt, mask=None) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied scores count one half."""
    s, y = _select([np.asarray(scores, dtype=np.float64), _as_bool(gt, "ground truth")], mask)
    n_pos = int(np.count_nonzero(y))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def threshold_map(prob, threshold: float = 0.5) -> np.ndarray:
    if not math.isfinite(threshold):
        raise ConfigError(f"threshold must be finite, got {threshold}")
    return np.asarray(prob) >= threshold


def evaluate(prob, gt, mask=None, threshold: float = 0.5) -> MetricsReport:
    prob = np.asarray(prob, dtype=np.float64)
    report = scalar_metrics(confusion(threshold_map(prob, threshold), gt, mask), threshold)
    report.auc = auc(prob, gt, mask)
    return report


def aggregate(reports: Sequence[MetricsReport], counts: Sequence[ConfusionCounts] | None = None,
              mode: str = "per_image_mean", aucs: Sequence[float] | None = None) -> MetricsReport:
    """Combine per-image reports.

    ``per_image_mean`` averages every metric; ``pooled`` sums the confusion counts
    first (AUC, which needs raw scores, is still the per-image mean).
    """
    if not reports:
        raise ConfigError("cannot aggregate an empty report list")
    if mode not in AGGREGATIONS:
        raise ConfigError(f"unknown aggregation {mode!r}")
    threshold = reports[0].threshold
    mean_auc = float(np.mean([r.auc for r in reports]))
    if mode == "pooled":
        if counts is None or len(counts) != len(reports):
            raise ConfigError("pooled aggregation needs the per-image confusion counts")
        total = counts[0]
        for c in counts[1:]:
            total = total + c
        out = scalar_metrics(total, threshold)
        out.auc = mean_auc
        return out
    means = {name: float(np.mean([getattr(r, name) for r in reports])) for name in METRIC_NAMES}
    return MetricsReport(**means, threshold=threshold, n_pixels=int(sum(r.n_pixels for r in reports)))


def write_metrics_csv(rows: Iterable[tuple[str, MetricsReport]], stream) -> None:
    stream.write(f"# {CSV_VERSION}\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for image_id, report in rows:
        writer.writerow(report.csv_row(image_id))


def read_metrics_csv(stream) -> list[tuple[str, MetricsReport]]:
    lines = [ln for ln in stream if not ln.startswith("#")]
    reader = csv.DictReader(io.StringIO("".join(lines)))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ConfigError(f"unexpected metrics CSV columns {reader.fieldnames}")
    out = []
    for row in reader:
        kwargs = {f.name: float(row[f.name]) for f in fields(MetricsReport) if f.name != "n_pixels"}
        out.append((row["id"], MetricsReport(**kwargs, n_pixels=int(row["n_pixels"]))))
    return out


def summary_line(report: MetricsReport) -> str:
    return " ".join(f"{name}={getattr(report, name):.4f}" for name in METRIC_NAMES)
