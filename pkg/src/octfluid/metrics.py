"""Segmentation metrics for the fluid class (F1, IoU, AROC), per-volume
aggregation, and the fusion-factor sweep harness."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .datasets import LabeledVolume
from .losses import LossConfig
from .network import ModelConfig, RefNet, predict_volume
from .preprocess import prepare_input
from .volumes import FLUID, UNRESOLVED, LabelVolume, ProbabilityVolume


@dataclass
class ConfusionCounts:
    """Pixel counts with fluid as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if v < 0:
                raise ValueError(f"{name} must be nonnegative, got {v}")
            setattr(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricRow:
    label: str
    aroc_mean: float
    aroc_std: float
    iou_mean: float
    iou_std: float
    f1_mean: float
    f1_std: float
    aroc_skipped: int = 0
    best: bool = False

    def __post_init__(self):
        for name in ("aroc_mean", "iou_mean", "f1_mean"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("aroc_std", "iou_std", "f1_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def confusion(pred: LabelVolume, truth: LabelVolume) -> ConfusionCounts:
    """Tally fluid-vs-rest agreement over all voxels."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if np.any(truth.codes == UNRESOLVED):
        raise ValueError("truth contains unresolved pixels")
    p = pred.codes == FLUID
    t = truth.codes == FLUID
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
    )


def f1(counts: ConfusionCounts) -> float:
    """F1 = 2*TP / (2*TP + FP + FN); 1.0 when no fluid exists and none is
    predicted."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2.0 * counts.tp / denom


def iou(counts: ConfusionCounts) -> float:
    """Intersection over union of the fluid masks; 1.0 for two empty masks."""
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return counts.tp / denom


def aroc(scores: np.ndarray, truth_mask: np.ndarray) -> float:
    """Area under the ROC curve by rank summation (Mann-Whitney statistic).

    Equals the probability that a random positive voxel outscores a random
    negative one, with ties counted one half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    mask = np.asarray(truth_mask).astype(bool).ravel()
    if scores.shape != mask.shape:
        raise ValueError("scores and truth mask must have equal sizes")
    n_pos = int(mask.sum())
    n_neg = mask.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AROC undefined: truth contains only one class")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[mask].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class VolumeEvaluation:
    volume_id: str
    counts: ConfusionCounts
    f1: float
    iou: float
    aroc: float | None  # None when the truth is single-class


def evaluate_probability_volume(probs: ProbabilityVolume, truth: LabelVolume) -> VolumeEvaluation:
    pred = probs.argmax_labels()
    counts = confusion(pred, truth)
    truth_fluid = truth.codes == FLUID
    if truth_fluid.all() or not truth_fluid.any():
        volume_aroc = None
    else:
        volume_aroc = aroc(probs.fluid_probs(), truth_fluid)
    return VolumeEvaluation(
        volume_id=truth.volume_id, counts=counts, f1=f1(counts), iou=iou(counts),
        aroc=volume_aroc,
    )


def aggregate_rows(label: str, evaluations: Sequence[VolumeEvaluation]) -> MetricRow:
    """Mean and population standard deviation across volumes. Volumes whose
    truth has no fluid (or is all fluid) are excluded from the AROC
    aggregate and counted in aroc_skipped."""
    if not evaluations:
        raise ValueError("no volumes to aggregate")
    f1s = np.array([e.f1 for e in evaluations])
    ious = np.array([e.iou for e in evaluations])
    arocs = np.array([e.aroc for e in evaluations if e.aroc is not None])
    skipped = sum(1 for e in evaluations if e.aroc is None)
    if arocs.size:
        aroc_mean, aroc_std = float(arocs.mean()), float(arocs.std())
    else:
        aroc_mean, aroc_std = 0.0, 0.0
    return MetricRow(
        label=label,
        aroc_mean=aroc_mean, aroc_std=aroc_std,
        iou_mean=float(ious.mean()), iou_std=float(ious.std()),
        f1_mean=float(f1s.mean()), f1_std=float(f1s.std()),
        aroc_skipped=skipped,
    )


def evaluate_model(
    model: RefNet,
    test_volumes: Sequence[LabeledVolume],
    beta: float | None,
    label: str | None = None,
    batch_size: int = 16,
) -> MetricRow:
    """Segment every test volume and aggregate fluid metrics across volumes."""
    volumes = sorted(test_volumes, key=lambda v: v.volume_id)
    if not volumes:
        raise ValueError("empty test set")
    if label is None:
        label = "oct-only" if beta is None else f"beta={beta:.2f}"
    evaluations = []
    for vol in volumes:
        prepared = prepare_input(vol.oct, vol.octa, beta)
        probs = predict_volume(model, prepared, batch_size=batch_size)
        evaluations.append(evaluate_probability_volume(probs, vol.labels))
    return aggregate_rows(label, evaluations)


def sweep_beta(
    dataset: Sequence[LabeledVolume],
    betas: Sequence[float],
    train_config,
    model_config: ModelConfig,
    loss_config: LossConfig | None = None,
) -> list[MetricRow]:
    """Train one model per fusion factor plus an OCT-only model on a shared
    eye-level split, and evaluate all of them on the shared test side.

    Rows come back OCT-only first, then betas ascending; the row with the
    best mean F1 is flagged.
    """
    from .training import split_volumes_by_eye, train  # deferred: avoids cycle

    betas = list(betas)
    if not betas:
        raise ValueError("empty beta list")
    for b in betas:
        if not 0.0 <= b <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {b}")
    train_vols, test_vols = split_volumes_by_eye(
        dataset, train_config.split_ratio, train_config.seed
    )
    rows = []
    for beta in [None] + sorted(betas):
        config = replace(train_config, beta=beta)
        model, _ = train(train_vols, config, model_config, loss_config)
        rows.append(evaluate_model(model, test_vols, beta))
    best_idx = int(np.argmax([row.f1_mean for row in rows]))
    rows[best_idx].best = True
    return rows
