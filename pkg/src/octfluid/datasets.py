"""Labeled-volume triples, the on-disk dataset layout, and randomized
phantom recipes for desk-scale experiments.

A dataset directory holds one RFNV1 file triple per volume:
    {volume_id}_oct.rfnv, {volume_id}_octa.rfnv, {volume_id}_labels.rfnv
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .phantom import (
    Ellipsoid,
    PhantomSpec,
    ShadowSpec,
    SurfaceUndulation,
    apply_shadows,
    generate_phantom,
)
from .volumes import LabelVolume, ScanVolume, load_volume, save_volume


@dataclass
class LabeledVolume:
    oct: ScanVolume
    octa: ScanVolume
    labels: LabelVolume

    def __post_init__(self):
        shapes = {self.oct.shape, self.octa.shape, self.labels.shape}
        if len(shapes) != 1:
            raise ValueError(f"oct/octa/labels shapes differ: {sorted(shapes)}")

    @property
    def volume_id(self) -> str:
        return self.oct.volume_id

    @property
    def eye_id(self) -> str:
        return self.oct.eye_id or self.oct.volume_id


def volume_paths(directory: str | Path, volume_id: str) -> dict[str, Path]:
    directory = Path(directory)
    return {
        "oct": directory / f"{volume_id}_oct.rfnv",
        "octa": directory / f"{volume_id}_octa.rfnv",
        "labels": directory / f"{volume_id}_labels.rfnv",
    }


def save_labeled_volume(volume: LabeledVolume, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = volume_paths(directory, volume.volume_id)
    save_volume(volume.oct, paths["oct"])
    save_volume(volume.octa, paths["octa"])
    save_volume(volume.labels, paths["labels"])


def list_volume_ids(directory: str | Path) -> list[str]:
    directory = Path(directory)
    ids = sorted(p.name[: -len("_oct.rfnv")] for p in directory.glob("*_oct.rfnv"))
    return ids


def load_labeled_volume(directory: str | Path, volume_id: str) -> LabeledVolume:
    paths = volume_paths(directory, volume_id)
    return LabeledVolume(
        oct=load_volume(paths["oct"]),
        octa=load_volume(paths["octa"]),
        labels=load_volume(paths["labels"]),
    )


def load_dataset(directory: str | Path) -> list[LabeledVolume]:
    ids = list_volume_ids(directory)
    if not ids:
        raise ValueError(f"no volumes found under {directory}")
    return [load_labeled_volume(directory, vid) for vid in ids]


def random_phantom_spec(
    seed: int,
    shape: tuple[int, int, int] = (64, 128, 128),
    with_fluid: bool = True,
    shadowed: bool = False,
    max_pockets: int = 3,
) -> PhantomSpec:
    """Sample a plausible retina recipe; distinct seeds give distinct eyes.

    Alongside real fluid pockets, most recipes place "dark tissue patches":
    perfused tissue with fluid-like reflectance. Structural intensity alone
    cannot separate the two (both are dark ellipsoids inside the retina);
    only the flow signal in the OCTA channel can, which mirrors the
    anatomical fact that fluid and blood flow are never collocated.
    """
    rng = np.random.default_rng([seed, 17])
    nb, nd, nw = shape
    ilm = rng.uniform(0.20, 0.27) * nd
    bm = rng.uniform(0.70, 0.80) * nd
    amplitude = rng.uniform(2.0, 5.0)

    placed: list[Ellipsoid] = []

    def sample_blob():
        lo = ilm + amplitude
        hi = bm - amplitude
        for _ in range(40):
            rd = rng.uniform(0.10, 0.26) * (hi - lo) / 2
            rb = rng.uniform(4.0, 0.20 * nb)
            rw = rng.uniform(5.0, 0.16 * nw)
            cd = rng.uniform(lo + rd + 1.5, hi - rd - 1.5)
            cb = rng.uniform(rb + 1, nb - rb - 2)
            cw = rng.uniform(rw + 1, nw - rw - 2)
            candidate = Ellipsoid(center=(cb, cd, cw), semi_axes=(rb, rd, rw))
            # keep blobs laterally separated so labels stay unambiguous
            clear = all(
                abs(cb - other.center[0]) > rb + other.semi_axes[0] + 2
                or abs(cw - other.center[2]) > rw + other.semi_axes[2] + 2
                for other in placed
            )
            if clear:
                placed.append(candidate)
                return candidate
        return None

    pockets = []
    if with_fluid:
        for _ in range(int(rng.integers(1, max_pockets + 1))):
            blob = sample_blob()
            if blob is not None:
                pockets.append(blob)
    patches = []
    if rng.random() < 0.6:
        blob = sample_blob()
        if blob is not None:
            patches.append(blob)
    shadows = []
    if shadowed:
        for _ in range(int(rng.integers(2, 5))):
            kind = ("vessel", "floater", "vignetting")[int(rng.integers(0, 3))]
            attenuation = rng.uniform(0.25, 0.55)
            if kind == "vessel":
                loc = {"width": int(rng.integers(4, nw - 4)), "half_width": int(rng.integers(2, 4))}
            elif kind == "floater":
                loc = {
                    "bscan": int(rng.integers(6, nb - 6)),
                    "width": int(rng.integers(8, nw - 8)),
                    "radius": float(rng.uniform(5.0, 12.0)),
                }
            else:
                loc = {
                    "edge": ("left", "right")[int(rng.integers(0, 2))],
                    "extent": float(rng.uniform(0.3, 0.5)),
                }
            shadows.append(ShadowSpec(kind=kind, location=loc, attenuation=attenuation))
    return PhantomSpec(
        shape=shape,
        ilm_mean_row=ilm,
        bm_mean_row=bm,
        surface_undulation=SurfaceUndulation(amplitude=amplitude, smoothness=rng.uniform(0.6, 0.9)),
        tissue_reflectance=rng.uniform(0.48, 0.62),
        vitreous_reflectance=rng.uniform(0.05, 0.13),
        fluid_reflectance=rng.uniform(0.10, 0.24),
        speckle_contrast=rng.uniform(0.20, 0.38),
        fluid_pockets=pockets,
        dark_tissue_patches=patches,
        vessel_density=rng.uniform(8.0, 14.0),
        shadow_spec=shadows,
        seed=seed,
    )


def synthesize_labeled(spec: PhantomSpec, *, volume_id: str | None = None,
                       eye_id: str | None = None) -> LabeledVolume:
    """Generate a phantom and apply its own shadow recipe, if any."""
    oct_volume, octa_volume, truth = generate_phantom(spec, volume_id=volume_id, eye_id=eye_id)
    if spec.shadow_spec:
        oct_volume, octa_volume = apply_shadows(
            oct_volume, octa_volume, spec.shadow_spec, seed=spec.seed
        )
    return LabeledVolume(oct=oct_volume, octa=octa_volume, labels=truth)
