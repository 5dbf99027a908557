"""Scan preprocessing: adjacent-B-scan smoothing, normalization, OCT/OCTA
fusion, and the horizontal-flip training augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import ScanVolume


@dataclass
class FusionConfig:
    """Mixing weight between OCT and OCTA: fused = (1-beta)*oct + beta*octa."""

    beta: float = 0.2

    def __post_init__(self):
        self.beta = float(self.beta)
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def smooth_bscans(volume: ScanVolume) -> ScanVolume:
    """Average each B-scan with its two adjacent B-scans.

    Boundary B-scans are averaged over the neighbors that exist (a 2-scan
    window at each end); a single-B-scan volume is returned unchanged.
    """
    v = volume.voxels
    if v.shape[0] == 1:
        return volume.with_voxels(v.copy())
    acc = v.astype(np.float64).copy()
    acc[1:] += v[:-1]
    acc[:-1] += v[1:]
    counts = np.full(v.shape[0], 3.0)
    counts[0] = counts[-1] = 2.0
    out = acc / counts[:, None, None]
    return volume.with_voxels(np.clip(out, 0.0, 1.0))


def normalize(volume: ScanVolume) -> ScanVolume:
    """Min-max rescale the whole volume to [0, 1]; constant volumes map to zeros."""
    v = volume.voxels
    lo = float(v.min())
    hi = float(v.max())
    if hi == lo:
        return volume.with_voxels(np.zeros_like(v))
    out = (v.astype(np.float64) - lo) / (hi - lo)
    return volume.with_voxels(out)


def fuse(oct_volume: ScanVolume, octa_volume: ScanVolume, config: FusionConfig) -> ScanVolume:
    """Blend the two modalities voxelwise: (1-beta)*oct + beta*octa."""
    if oct_volume.shape != octa_volume.shape:
        raise ValueError(
            f"shape mismatch: oct {oct_volume.shape} vs octa {octa_volume.shape}"
        )
    if oct_volume.spacing_um != octa_volume.spacing_um:
        raise ValueError("oct and octa spacing must match")
    beta = np.float32(config.beta)
    fused = (np.float32(1.0) - beta) * oct_volume.voxels + beta * octa_volume.voxels
    extras = dict(oct_volume.extras)
    extras["beta"] = config.beta
    return oct_volume.with_voxels(fused, modality="fused", extras=extras)


def augment_flip(image: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror a B-scan sample and its label map along the width axis."""
    if image.shape != labels.shape:
        raise ValueError(f"shape mismatch: image {image.shape} vs labels {labels.shape}")
    return np.ascontiguousarray(image[:, ::-1]), np.ascontiguousarray(labels[:, ::-1])


def prepare_input(
    oct_volume: ScanVolume,
    octa_volume: ScanVolume | None,
    beta: float | FusionConfig | None,
) -> ScanVolume:
    """Standard network input: smooth and normalize each modality, then fuse.

    With beta=None the input is the smoothed, normalized OCT alone (the
    OCT-only network variant). Each modality is normalized independently
    before fusion so the mixing weight acts on comparable dynamic ranges.
    """
    oct_prepped = normalize(smooth_bscans(oct_volume))
    if beta is None:
        return oct_prepped
    config = beta if isinstance(beta, FusionConfig) else FusionConfig(beta)
    if octa_volume is None:
        raise ValueError("fusion requested but no OCTA volume supplied")
    octa_prepped = normalize(smooth_bscans(octa_volume))
    return fuse(oct_prepped, octa_prepped, config)
