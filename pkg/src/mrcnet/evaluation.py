"""Run a generator over samples and score the probability maps."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .data import FundusSample, resize_prob
from .generator import Generator, predict
from .metrics import MetricsReport, aggregate, auc, confusion, scalar_metrics, threshold_map

Predictor = Callable[[FundusSample], np.ndarray]


def model_predictor(model: Generator) -> Predictor:
    return lambda sample: predict(model, sample.image)


def predict_samples(predictor: Predictor, samples: Sequence[FundusSample]) -> list[np.ndarray]:
    return [predictor(s) for s in samples]


def evaluate_samples(
    probs: Sequence[np.ndarray],
    references: Sequence[FundusSample],
    threshold: float = 0.5,
    use_fov: bool = False,
    aggregation: str = "per_image_mean",
) -> tuple[list[tuple[str, MetricsReport]], MetricsReport]:
    """Score each probability map against its reference sample.

    Maps whose grid differs from the reference (native-resolution evaluation)
    are bilinearly resized to it first.
    """
    rows, counts = [], []
    for prob, ref in zip(probs, references, strict=True):
        if prob.shape != ref.gt.shape:
            prob = resize_prob(prob, ref.gt.shape)
        mask = ref.fov if use_fov else None
        c = confusion(threshold_map(prob, threshold), ref.gt, mask)
        report = scalar_metrics(c, threshold)
        report.auc = auc(prob, ref.gt, mask)
        rows.append((ref.id, report))
        counts.append(c)
    agg = aggregate([r for _, r in rows], counts=counts, mode=aggregation)
    return rows, agg


def threshold_sweep(probs, references, thresholds, use_fov: bool = False) -> list[tuple[float, MetricsReport]]:
    return [(t, evaluate_samples(probs, references, t, use_fov)[1]) for t in thresholds]
