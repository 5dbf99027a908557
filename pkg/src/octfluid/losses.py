"""Training objective: smoothed per-class Jaccard losses, weighted toward
the fluid class, optionally combined with categorical cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import torch

# Probability floor inside the cross-entropy log; avoids log(0).
CE_EPSILON = 1e-7


@dataclass
class LossConfig:
    """Weights are ordered (fluid, tissue, background) and must sum to 1,
    with fluid receiving the largest weight to counter class imbalance."""

    class_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)
    alpha: float = 100.0
    include_cross_entropy: bool = True

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if len(self.class_weights) != 3:
            raise ValueError("class_weights must be a (fluid, tissue, background) triple")
        if any(w < 0 for w in self.class_weights):
            raise ValueError("class weights must be nonnegative")
        if abs(sum(self.class_weights) - 1.0) > 1e-6:
            raise ValueError(f"weights must sum to 1, got {sum(self.class_weights)}")
        w_fluid, w_tissue, w_background = self.class_weights
        if w_fluid < w_tissue or w_fluid < w_background:
            raise ValueError("the fluid class must receive the largest weight")
        self.alpha = float(self.alpha)
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")

    def weights_by_class_index(self) -> tuple[float, float, float]:
        """Reorder (fluid, tissue, background) weights to the map class order
        (background, tissue, fluid)."""
        w_fluid, w_tissue, w_background = self.class_weights
        return (w_background, w_tissue, w_fluid)


def jaccard_class_loss(y, yhat, alpha: float) -> torch.Tensor:
    """Smoothed Jaccard loss for one class, scaled by the smoothing factor.

        J = (1 - (sum(y*yhat) + alpha) / (sum(y + yhat) - sum(y*yhat) + alpha)) * alpha

    y is the binary map for the class, yhat the predicted probability map.
    J lies in [0, alpha) and is 0 for a perfect prediction (including the
    empty-class case y = yhat = 0).
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    y = torch.as_tensor(y)
    yhat = torch.as_tensor(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: y {tuple(y.shape)} vs yhat {tuple(yhat.shape)}")
    intersection = (y * yhat).sum()
    total = (y + yhat).sum()
    ratio = (intersection + alpha) / (total - intersection + alpha)
    return (1.0 - ratio) * alpha


def total_loss(y, yhat, config: LossConfig) -> torch.Tensor:
    """Weighted sum of per-class Jaccard losses, plus mean categorical
    cross-entropy when enabled.

    Maps are class-last with class order (background, tissue, fluid):
    (H, W, 3) for one sample or (B, H, W, 3) for a batch. The pixel sums
    inside each Jaccard term run over one sample; batches average the
    per-sample losses. y is one-hot; yhat holds per-pixel probabilities.
    """
    y = torch.as_tensor(y)
    yhat = torch.as_tensor(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: y {tuple(y.shape)} vs yhat {tuple(yhat.shape)}")
    if y.dim() not in (3, 4) or y.shape[-1] != 3:
        raise ValueError(
            f"expected (..., H, W, 3) class-last maps, got {tuple(y.shape)}"
        )
    batch = 1 if y.dim() == 3 else y.shape[0]
    y_flat = y.reshape(batch, -1, 3)
    yhat_flat = yhat.reshape(batch, -1, 3)

    alpha = config.alpha
    intersection = (y_flat * yhat_flat).sum(dim=1)  # (B, 3)
    union = (y_flat + yhat_flat).sum(dim=1) - intersection
    per_class = (1.0 - (intersection + alpha) / (union + alpha)) * alpha  # (B, 3)
    weights = torch.as_tensor(config.weights_by_class_index(), dtype=yhat_flat.dtype)
    loss = (per_class * weights).sum(dim=1).mean()
    if config.include_cross_entropy:
        log_probs = torch.log(torch.clamp(yhat_flat, min=CE_EPSILON))
        loss = loss - (y_flat * log_probs).sum(dim=-1).mean()
    return loss
