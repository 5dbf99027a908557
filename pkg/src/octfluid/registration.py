"""Longitudinal registration: axial alignment by flattening the retina's
lower boundary, lateral alignment by exhaustive normalized cross-
correlation of en-face vessel images, and fluid change maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datasets import LabeledVolume
from .volumes import FLUID, TISSUE, LabelVolume, ScanVolume


@dataclass
class RegistrationResult:
    axial_shift_map: np.ndarray  # per-column integer row shifts applied to the moving scan
    lateral_shift: tuple[int, int]  # (d_bscan, d_width), fixed -> moving displacement
    correlation_peak: float

    def __post_init__(self):
        self.axial_shift_map = np.asarray(self.axial_shift_map, dtype=np.int64)
        self.lateral_shift = (int(self.lateral_shift[0]), int(self.lateral_shift[1]))
        if not np.isfinite(self.correlation_peak):
            raise ValueError("correlation peak must be finite")

    def to_dict(self) -> dict:
        return {
            "lateral_shift": list(self.lateral_shift),
            "correlation_peak": self.correlation_peak,
            "axial_shift_map": self.axial_shift_map.tolist(),
        }


@dataclass
class ChangeMap:
    """Disjoint fluid-change masks between two registered scans."""

    gained: np.ndarray  # fluid in follow-up only
    lost: np.ndarray  # fluid in baseline only
    stable: np.ndarray  # fluid in both
    delta_volume_mm3: float


def estimate_bm_surface(labels: LabelVolume) -> np.ndarray:
    """Deepest tissue-or-fluid row per lateral position (the retina's lower
    boundary, standing in for Bruch's membrane). Columns with no retina are
    filled from their nearest labeled neighbor."""
    retina = (labels.codes == TISSUE) | (labels.codes == FLUID)
    any_col = retina.any(axis=1)
    if not any_col.any():
        raise ValueError("volume contains no tissue; cannot estimate a surface")
    nd = labels.shape[1]
    deepest = nd - 1 - retina[:, ::-1, :].argmax(axis=1)
    if not any_col.all():
        _, (ib, iw) = ndimage.distance_transform_edt(~any_col, return_indices=True)
        deepest = deepest[ib, iw]
    return deepest.astype(np.int64)


def axial_shift_map(surface: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-column shifts that land the surface on its median row."""
    target = int(np.median(surface))
    return (target - surface).astype(np.int64), target


def _shift_columns(arr: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Shift each (b, w) column along depth by its integer offset, zero-filling."""
    nb, nd, nw = arr.shape
    moved = np.moveaxis(arr, 1, 2).reshape(nb * nw, nd)
    flat_shifts = shifts.reshape(nb * nw)
    out = np.zeros_like(moved)
    for d in np.unique(flat_shifts):
        rows = flat_shifts == d
        if d >= nd or d <= -nd:
            continue
        if d >= 0:
            out[rows, d:] = moved[rows, : nd - d]
        else:
            out[rows, :d] = moved[rows, -d:]
    return np.moveaxis(out.reshape(nb, nw, nd), 2, 1)


def flatten_axial(
    volume: ScanVolume, labels: LabelVolume, surface: np.ndarray
) -> tuple[ScanVolume, LabelVolume]:
    """Shift every column so `surface` lands on the grid's median row.

    Shifts are integer, vacated voxels are zero-filled, and labels move
    identically with the intensities.
    """
    if surface.shape != (volume.shape[0], volume.shape[2]):
        raise ValueError("surface grid must cover (bscan, width)")
    if surface.min() < 0 or surface.max() >= volume.shape[1]:
        raise ValueError("surface rows out of depth bounds")
    shifts, _ = axial_shift_map(surface)
    flat_vox = _shift_columns(volume.voxels, shifts)
    flat_codes = _shift_columns(labels.codes, shifts)
    if not ((flat_codes == TISSUE) | (flat_codes == FLUID)).any():
        raise ValueError("flattening pushed all tissue out of the depth range")
    return volume.with_voxels(flat_vox), labels.with_codes(flat_codes)


def vessel_enface(octa: ScanVolume, labels: LabelVolume) -> np.ndarray:
    """Mean-over-depth OCTA projection of the tissue slab: the vessel image
    used as the lateral registration reference."""
    retina = (labels.codes == TISSUE) | (labels.codes == FLUID)
    counts = retina.sum(axis=1)
    sums = (octa.voxels * retina).sum(axis=1)
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def register_lateral(
    fixed_enface: np.ndarray, moving_enface: np.ndarray
) -> tuple[tuple[int, int], float]:
    """Exhaustive integer-translation normalized cross-correlation.

    Returns the (d_bscan, d_width) displacement from the fixed image to the
    moving image, searched within +/- a quarter of each dimension, plus the
    signed correlation at that shift. Selection is by correlation
    magnitude (a negated image pins (0, 0) at peak -1), with ties broken by
    smallest shift magnitude then lexicographic order.
    """
    fixed = np.asarray(fixed_enface, dtype=np.float64)
    moving = np.asarray(moving_enface, dtype=np.float64)
    if fixed.shape != moving.shape:
        raise ValueError(f"shape mismatch: {fixed.shape} vs {moving.shape}")
    if fixed.std() == 0 or moving.std() == 0:
        raise ValueError("constant image: correlation undefined")
    nb, nw = fixed.shape
    max_db, max_dw = nb // 4, nw // 4
    best = None
    for db in range(-max_db, max_db + 1):
        b_lo, b_hi = max(0, -db), nb - max(0, db)
        for dw in range(-max_dw, max_dw + 1):
            w_lo, w_hi = max(0, -dw), nw - max(0, dw)
            f = fixed[b_lo:b_hi, w_lo:w_hi]
            m = moving[b_lo + db: b_hi + db, w_lo + dw: w_hi + dw]
            if f.size < 4:
                continue
            fc = f - f.mean()
            mc = m - m.mean()
            denom = np.sqrt((fc**2).sum() * (mc**2).sum())
            if denom == 0:
                continue
            r = float((fc * mc).sum() / denom)
            key = (-abs(r), db * db + dw * dw, db, dw)
            if best is None or key < best[0]:
                best = (key, (db, dw), r)
    if best is None:
        raise ValueError("no valid overlap for any candidate shift")
    return best[1], best[2]


def translate_lateral(arr: np.ndarray, shift: tuple[int, int]) -> np.ndarray:
    """Move a (bscan, depth, width) array by integer lateral offsets,
    zero-filling vacated voxels."""
    db, dw = int(shift[0]), int(shift[1])
    out = np.zeros_like(arr)
    nb, _, nw = arr.shape
    b_src = slice(max(0, -db), nb - max(0, db))
    b_dst = slice(max(0, db), nb - max(0, -db))
    w_src = slice(max(0, -dw), nw - max(0, dw))
    w_dst = slice(max(0, dw), nw - max(0, -dw))
    out[b_dst, :, w_dst] = arr[b_src, :, w_src]
    return out


def change_map(
    baseline_fluid: LabelVolume,
    followup_fluid: LabelVolume,
    registration: RegistrationResult | None = None,
) -> ChangeMap:
    """Fluid gained/lost/stable between registered scans.

    The follow-up must already be resampled through the registration
    transforms; this is pure mask arithmetic plus the signed volume change
    (gained minus lost, in mm3).
    """
    if baseline_fluid.shape != followup_fluid.shape:
        raise ValueError(
            f"shape mismatch after registration: {baseline_fluid.shape} "
            f"vs {followup_fluid.shape}"
        )
    base = baseline_fluid.codes == FLUID
    follow = followup_fluid.codes == FLUID
    gained = follow & ~base
    lost = base & ~follow
    stable = base & follow
    voxel = baseline_fluid.voxel_volume_mm3()
    delta = (int(gained.sum()) - int(lost.sum())) * voxel
    return ChangeMap(gained=gained, lost=lost, stable=stable, delta_volume_mm3=delta)


def register_pair(
    baseline: LabeledVolume, followup: LabeledVolume
) -> tuple[RegistrationResult, LabeledVolume]:
    """Full pipeline: flatten both scans axially on their lower retinal
    boundary, recover the lateral displacement from en-face vessel images,
    and return the follow-up resampled into the baseline frame."""
    if baseline.oct.shape != followup.oct.shape:
        raise ValueError("baseline and follow-up shapes must match")
    base_surface = estimate_bm_surface(baseline.labels)
    base_oct, base_labels = flatten_axial(baseline.oct, baseline.labels, base_surface)
    base_octa, _ = flatten_axial(baseline.octa, baseline.labels, base_surface)

    follow_surface = estimate_bm_surface(followup.labels)
    follow_shifts, _ = axial_shift_map(follow_surface)
    follow_oct, follow_labels = flatten_axial(followup.oct, followup.labels, follow_surface)
    follow_octa, _ = flatten_axial(followup.octa, followup.labels, follow_surface)

    fixed = vessel_enface(base_octa, base_labels)
    moving = vessel_enface(follow_octa, follow_labels)
    shift, peak = register_lateral(fixed, moving)

    # moving content sits at +shift relative to fixed; undo it
    undo = (-shift[0], -shift[1])
    registered = LabeledVolume(
        oct=follow_oct.with_voxels(translate_lateral(follow_oct.voxels, undo)),
        octa=follow_octa.with_voxels(translate_lateral(follow_octa.voxels, undo)),
        labels=follow_labels.with_codes(translate_lateral(follow_labels.codes, undo)),
    )
    result = RegistrationResult(
        axial_shift_map=follow_shifts, lateral_shift=shift, correlation_peak=peak
    )
    return result, registered
