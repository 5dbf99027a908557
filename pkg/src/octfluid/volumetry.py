"""3D fluid quantification: volume in mm3, en-face projected area,
connected components, retinal thickness maps, and central macular
thickness, plus the sparse-sampling experiment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volumes import FLUID, TISSUE, UNRESOLVED, LabelVolume

CMT_DISC_RADIUS_UM = 500.0  # central 1-mm-diameter disc
ETDRS_RING_RADII_UM = (500.0, 1500.0, 3000.0)  # 1 / 3 / 6-mm rings


@dataclass
class FluidComponent:
    id: int
    voxel_count: int
    volume_mm3: float
    bounding_box: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]  # inclusive


@dataclass
class FluidReport:
    volume_id: str
    total_volume_mm3: float
    enface_area_mm2: float
    components: list[FluidComponent]
    cmt_um: float | None
    thickness_map: np.ndarray  # (bscan, width) in um
    etdrs_um: dict[str, float | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "volume_id": self.volume_id,
            "total_volume_mm3": self.total_volume_mm3,
            "enface_area_mm2": self.enface_area_mm2,
            "component_count": len(self.components),
            "components": [
                {
                    "id": c.id,
                    "voxel_count": c.voxel_count,
                    "volume_mm3": c.volume_mm3,
                    "bounding_box": [list(ax) for ax in c.bounding_box],
                }
                for c in self.components
            ],
            "cmt_um": self.cmt_um,
            "etdrs_um": self.etdrs_um,
        }


def _require_complete(labels: LabelVolume) -> None:
    if np.any(labels.codes == UNRESOLVED):
        raise ValueError("labels contain unresolved pixels")


def fluid_volume(labels: LabelVolume) -> float:
    """Fluid volume in mm3: voxel count times the voxel volume."""
    _require_complete(labels)
    count = int(np.count_nonzero(labels.codes == FLUID))
    return count * labels.voxel_volume_mm3()


def enface_projection(labels: LabelVolume) -> tuple[np.ndarray, float]:
    """Top-down fluid footprint over (bscan, width) and its area in mm2.

    A lateral cell is marked if any voxel along its depth column is fluid,
    so stacked pockets collapse onto the same footprint.
    """
    _require_complete(labels)
    mask = (labels.codes == FLUID).any(axis=1)
    b_um, _, l_um = labels.spacing_um
    area = float(np.count_nonzero(mask)) * (b_um * l_um) / 1e6
    return mask, area


_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(labels: LabelVolume, connectivity: int = 6) -> list[FluidComponent]:
    """Fluid components, largest first; voxel counts sum to the fluid total."""
    _require_complete(labels)
    if connectivity not in _STRUCTS:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = labels.codes == FLUID
    labeled, n = ndimage.label(mask, structure=_STRUCTS[connectivity])
    if n == 0:
        return []
    voxel_mm3 = labels.voxel_volume_mm3()
    counts = np.bincount(labeled.ravel())[1:]
    slices = ndimage.find_objects(labeled)
    components = []
    for idx in np.argsort(counts)[::-1]:
        count = int(counts[idx])
        box = tuple((s.start, s.stop - 1) for s in slices[idx])
        components.append(
            FluidComponent(
                id=int(idx + 1), voxel_count=count,
                volume_mm3=count * voxel_mm3, bounding_box=box,
            )
        )
    return components


def thickness_map(labels: LabelVolume) -> tuple[np.ndarray, float | None]:
    """Retinal thickness per lateral position in um, and the CMT.

    Fluid counts as retina (edema thickens the profile). Thickness spans
    the first through last tissue-or-fluid row; columns with neither are 0
    and are excluded from the CMT, which averages the central
    1-mm-diameter disc.
    """
    _require_complete(labels)
    codes = labels.codes
    retina = (codes == TISSUE) | (codes == FLUID)
    any_col = retina.any(axis=1)
    nb, nd, nw = codes.shape
    first = retina.argmax(axis=1)
    last = nd - 1 - retina[:, ::-1, :].argmax(axis=1)
    b_um, axial_um, l_um = labels.spacing_um
    thickness = np.where(any_col, (last - first + 1) * axial_um, 0.0)

    db = (np.arange(nb) - (nb - 1) / 2.0)[:, None] * b_um
    dw = (np.arange(nw) - (nw - 1) / 2.0)[None, :] * l_um
    disc = db**2 + dw**2 <= CMT_DISC_RADIUS_UM**2
    valid = disc & any_col
    cmt = float(thickness[valid].mean()) if valid.any() else None
    return thickness, cmt


def etdrs_grid_means(thickness: np.ndarray, spacing_um, any_col: np.ndarray | None = None
                     ) -> dict[str, float | None]:
    """Mean thickness per standard 1/3/6-mm grid zone.

    Quadrant names are axis-based: sup/inf run along decreasing/increasing
    B-scan index, left/right along the width axis. Zones with no valid
    column report None.
    """
    nb, nw = thickness.shape
    b_um, _, l_um = spacing_um
    if any_col is None:
        any_col = thickness > 0
    db = (np.arange(nb) - (nb - 1) / 2.0)[:, None] * b_um
    dw = (np.arange(nw) - (nw - 1) / 2.0)[None, :] * l_um
    radius = np.sqrt(db**2 + dw**2)
    angle = np.arctan2(-db, dw)  # 0 = +width, pi/2 = decreasing b-scan
    quadrants = {
        "right": (angle > -np.pi / 4) & (angle <= np.pi / 4),
        "sup": (angle > np.pi / 4) & (angle <= 3 * np.pi / 4),
        "left": (angle > 3 * np.pi / 4) | (angle <= -3 * np.pi / 4),
        "inf": (angle > -3 * np.pi / 4) & (angle <= -np.pi / 4),
    }
    r1, r2, r3 = ETDRS_RING_RADII_UM
    zones = {"center": radius <= r1}
    for name, quad in quadrants.items():
        zones[f"inner_{name}"] = (radius > r1) & (radius <= r2) & quad
        zones[f"outer_{name}"] = (radius > r2) & (radius <= r3) & quad
    out: dict[str, float | None] = {}
    for name, zone in zones.items():
        sel = zone & any_col
        out[name] = float(thickness[sel].mean()) if sel.any() else None
    return out


def fluid_report(labels: LabelVolume) -> FluidReport:
    """Full quantification bundle for one segmented volume."""
    components = connected_components(labels)
    total = sum(c.volume_mm3 for c in components)
    mask, area = enface_projection(labels)
    thickness, cmt = thickness_map(labels)
    retina_cols = ((labels.codes == TISSUE) | (labels.codes == FLUID)).any(axis=1)
    etdrs = etdrs_grid_means(thickness, labels.spacing_um, retina_cols)
    return FluidReport(
        volume_id=labels.volume_id,
        total_volume_mm3=total,
        enface_area_mm2=area,
        components=components,
        cmt_um=cmt,
        thickness_map=thickness,
        etdrs_um=etdrs,
    )


def simulate_sparse_sampling(labels: LabelVolume, keep_every: int) -> tuple[float, int]:
    """Undersampling experiment: keep every k-th B-scan and report the
    retained fluid fraction plus the count of fluid components that vanish
    entirely from the retained B-scans."""
    _require_complete(labels)
    if keep_every < 1:
        raise ValueError("keep_every must be >= 1")
    fluid = labels.codes == FLUID
    total = int(fluid.sum())
    retained_idx = np.arange(0, labels.shape[0], keep_every)
    retained = int(fluid[retained_idx].sum())
    fraction = retained / total if total else 1.0

    missed = 0
    on_retained = np.zeros(labels.shape[0], dtype=bool)
    on_retained[retained_idx] = True
    for comp in connected_components(labels):
        (b_lo, b_hi), _, _ = comp.bounding_box
        if not on_retained[b_lo: b_hi + 1].any():
            missed += 1
    return fraction, missed
