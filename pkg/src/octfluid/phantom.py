"""Synthetic OCT/OCTA phantom volumes with exact fluid ground truth.

A phantom is a retina-like slab between two smooth undulating surfaces,
with ellipsoidal fluid pockets, multiplicative speckle, flow tubes in the
OCTA channel, and optional shadow artifacts. Everything is a deterministic
function of the spec (including its seeds), so downstream claims can be
tested without clinical scans.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .volumes import DEFAULT_AXIAL_UM, FLUID, TISSUE, LabelVolume, ScanVolume

SHADOW_KINDS = ("vessel", "floater", "vignetting")

# OCTA intensity levels: diffuse decorrelation inside perfused tissue and
# the elevated signal inside flow tubes.
FLOW_FLOOR = 0.06
FLOW_TUBE = 0.85


@dataclass
class Ellipsoid:
    """Axis-aligned ellipsoid in voxel coordinates (bscan, depth, width)."""

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.semi_axes = tuple(float(a) for a in self.semi_axes)
        if len(self.center) != 3 or len(self.semi_axes) != 3:
            raise ValueError("ellipsoid center and semi_axes must be voxel triples")
        if any(a <= 0 for a in self.semi_axes):
            raise ValueError("ellipsoid semi-axes must be strictly positive")

    def membership(self, shape: tuple[int, int, int]) -> np.ndarray:
        """Exact voxel-center membership mask over a (bscan, depth, width) grid."""
        b = np.arange(shape[0], dtype=np.float64)
        d = np.arange(shape[1], dtype=np.float64)
        w = np.arange(shape[2], dtype=np.float64)
        cb, cd, cw = self.center
        rb, rd, rw = self.semi_axes
        q = (
            ((b[:, None, None] - cb) / rb) ** 2
            + ((d[None, :, None] - cd) / rd) ** 2
            + ((w[None, None, :] - cw) / rw) ** 2
        )
        return q <= 1.0


@dataclass
class ShadowSpec:
    """One shadow artifact: a vessel band, a floater blob, or pupil vignetting.

    `location` is kind-specific:
      vessel:     {"width": col, "half_width": cols (default 2), "depth": origin row (default 0)}
      floater:    {"bscan": row, "width": col, "radius": voxels}
      vignetting: {"edge": "left"|"right"|"front"|"back", "extent": fraction (default 0.5)}
    """

    kind: str
    location: dict
    attenuation: float

    def __post_init__(self):
        if self.kind not in SHADOW_KINDS:
            raise ValueError(f"unknown shadow kind {self.kind!r}")
        self.attenuation = float(self.attenuation)
        if not 0.0 < self.attenuation < 1.0:
            raise ValueError(f"attenuation must lie in (0, 1), got {self.attenuation}")
        self.location = dict(self.location)


@dataclass
class SurfaceUndulation:
    amplitude: float = 4.0  # voxels, bound on |surface - mean row|
    smoothness: float = 0.7  # (0, 1]: 1 = gentlest curvature

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("undulation amplitude must be >= 0")
        if not 0.0 < self.smoothness <= 1.0:
            raise ValueError("undulation smoothness must lie in (0, 1]")


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 128, 128)  # (n_bscans, depth, width)
    spacing_um: tuple[float, float, float] | None = None  # None: 3x3-mm field, 3 um axial
    ilm_mean_row: float = 30.0
    bm_mean_row: float = 95.0
    surface_undulation: SurfaceUndulation = field(default_factory=SurfaceUndulation)
    tissue_reflectance: float = 0.55
    vitreous_reflectance: float = 0.08
    fluid_reflectance: float = 0.12
    speckle_contrast: float = 0.25
    fluid_pockets: list[Ellipsoid] = field(default_factory=list)
    # perfused tissue regions with fluid-like (dark) reflectance: they keep
    # normal flow signal and tissue labels, so structure alone cannot tell
    # them from fluid but angiography can
    dark_tissue_patches: list[Ellipsoid] = field(default_factory=list)
    vessel_density: float = 10.0
    shadow_spec: list[ShadowSpec] = field(default_factory=list)
    seed: int = 0
    noise_seed: int | None = None  # None: derived from seed; set for fresh-speckle re-scans

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if len(self.shape) != 3 or any(n < 1 for n in self.shape):
            raise ValueError(f"shape must be three dimensions >= 1, got {self.shape}")
        if self.spacing_um is None:
            # 3x3-mm field at this raster density, standard axial sampling
            nb, _, nw = self.shape
            self.spacing_um = (3000.0 / nb, DEFAULT_AXIAL_UM, 3000.0 / nw)
        self.spacing_um = tuple(float(s) for s in self.spacing_um)
        if any(s <= 0 for s in self.spacing_um):
            raise ValueError("spacings must be strictly positive")
        for name in ("tissue_reflectance", "vitreous_reflectance", "fluid_reflectance"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.fluid_reflectance >= self.tissue_reflectance:
            raise ValueError("fluid reflectance must be below tissue reflectance")
        if not 0.0 <= self.speckle_contrast <= 1.0:
            raise ValueError("speckle_contrast must lie in [0, 1]")
        if not 0 <= self.ilm_mean_row < self.bm_mean_row <= self.shape[1] - 1:
            raise ValueError("need 0 <= ilm_mean_row < bm_mean_row <= depth-1")
        if self.vessel_density < 0:
            raise ValueError("vessel_density must be >= 0")
        if isinstance(self.surface_undulation, dict):
            self.surface_undulation = SurfaceUndulation(**self.surface_undulation)
        self.fluid_pockets = [
            p if isinstance(p, Ellipsoid) else Ellipsoid(**p) for p in self.fluid_pockets
        ]
        self.dark_tissue_patches = [
            p if isinstance(p, Ellipsoid) else Ellipsoid(**p) for p in self.dark_tissue_patches
        ]
        self.shadow_spec = [
            s if isinstance(s, ShadowSpec) else ShadowSpec(**s) for s in self.shadow_spec
        ]
        amp = self.surface_undulation.amplitude
        for name, group in (("fluid pocket", self.fluid_pockets),
                            ("dark tissue patch", self.dark_tissue_patches)):
            for pocket in group:
                _, cd, _ = pocket.center
                _, rd, _ = pocket.semi_axes
                if cd - rd <= self.ilm_mean_row + amp or cd + rd >= self.bm_mean_row - amp:
                    raise ValueError(
                        f"{name} must lie strictly between the ILM and BM surfaces "
                        f"(depth span [{cd - rd}, {cd + rd}] vs retina "
                        f"[{self.ilm_mean_row + amp}, {self.bm_mean_row - amp}])"
                    )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls(**json.loads(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "PhantomSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _axis_wave(rng: np.random.Generator, n: int, smoothness: float) -> np.ndarray:
    """Sum of three random-phase sinusoids along one axis, bounded in [-1, 1]."""
    max_cycles = 0.5 + 3.0 * (1.0 - smoothness)
    weights = rng.uniform(0.2, 1.0, size=3)
    weights /= weights.sum()
    freqs = rng.uniform(0.25, max_cycles, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    t = np.arange(n, dtype=np.float64) / max(n, 1)
    wave = np.zeros(n, dtype=np.float64)
    for a, f, p in zip(weights, freqs, phases):
        wave += a * np.sin(2.0 * np.pi * f * t + p)
    return wave


def phantom_surfaces(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Realized ILM and BM surfaces as float row maps over (bscan, width).

    Deterministic in spec.seed; |surface - mean row| <= undulation amplitude.
    """
    rng = np.random.default_rng([spec.seed, 0])
    nb, _, nw = spec.shape
    amp = spec.surface_undulation.amplitude
    smooth = spec.surface_undulation.smoothness
    ilm = spec.ilm_mean_row + amp * (
        0.5 * _axis_wave(rng, nb, smooth)[:, None] + 0.5 * _axis_wave(rng, nw, smooth)[None, :]
    )
    bm = spec.bm_mean_row + amp * (
        0.5 * _axis_wave(rng, nb, smooth)[:, None] + 0.5 * _axis_wave(rng, nw, smooth)[None, :]
    )
    return ilm, bm


def _fluid_mask(spec: PhantomSpec) -> np.ndarray:
    mask = np.zeros(spec.shape, dtype=bool)
    for pocket in spec.fluid_pockets:
        mask |= pocket.membership(spec.shape)
    return mask


def _speckle(rng: np.random.Generator, contrast: float, shape) -> np.ndarray:
    """Multiplicative gamma speckle with unit mean and std = contrast."""
    if contrast == 0.0:
        return np.ones(shape, dtype=np.float64)
    k = 1.0 / contrast**2
    return rng.gamma(shape=k, scale=1.0 / k, size=shape)


def _vessel_tubes(spec: PhantomSpec, ilm: np.ndarray, bm: np.ndarray) -> np.ndarray:
    """Random-walk flow tubes dilated to 2-4 voxel radius, inside the slab."""
    rng = np.random.default_rng([spec.seed, 1])
    nb, nd, nw = spec.shape
    mask = np.zeros(spec.shape, dtype=bool)
    count = int(rng.poisson(spec.vessel_density))
    for _ in range(count):
        pos = np.array([rng.uniform(0, nb - 1), rng.uniform(0, nw - 1)])
        heading = rng.uniform(0.0, 2.0 * np.pi)
        depth_frac = rng.uniform(0.2, 0.5)
        radius = rng.uniform(2.0, 4.0)
        steps = int(1.5 * max(nb, nw))
        stride = max(1, int(radius / 2))
        r_int = int(np.ceil(radius))
        offsets = np.indices((2 * r_int + 1,) * 3).reshape(3, -1) - r_int
        ball = offsets[:, (offsets**2).sum(axis=0) <= radius**2]
        for step in range(steps):
            heading += rng.normal(0.0, 0.15)
            pos += np.array([np.cos(heading), np.sin(heading)])
            pos[0] = np.clip(pos[0], 0, nb - 1)
            pos[1] = np.clip(pos[1], 0, nw - 1)
            if step % stride:
                continue
            bi, wi = int(round(pos[0])), int(round(pos[1]))
            di = ilm[bi, wi] + depth_frac * (bm[bi, wi] - ilm[bi, wi])
            centers = np.array([bi, int(round(di)), wi])[:, None] + ball
            keep = (
                (centers[0] >= 0) & (centers[0] < nb)
                & (centers[1] >= 0) & (centers[1] < nd)
                & (centers[2] >= 0) & (centers[2] < nw)
            )
            mask[centers[0, keep], centers[1, keep], centers[2, keep]] = True
    return mask


def generate_phantom(
    spec: PhantomSpec,
    *,
    volume_id: str | None = None,
    eye_id: str | None = None,
) -> tuple[ScanVolume, ScanVolume, LabelVolume]:
    """Build the (oct, octa, truth) triple described by `spec`.

    Shadows listed in spec.shadow_spec are NOT applied here; pair with
    apply_shadows so clean and artifacted versions of the same anatomy
    stay available.
    """
    if volume_id is None:
        volume_id = f"phantom-{spec.seed:05d}"
    if eye_id is None:
        eye_id = f"eye-{spec.seed:05d}"

    ilm, bm = phantom_surfaces(spec)
    ilm_rows = np.round(ilm).astype(np.int64)
    bm_rows = np.round(bm).astype(np.int64)

    nb, nd, nw = spec.shape
    depth = np.arange(nd, dtype=np.int64)[None, :, None]
    tissue = (depth >= ilm_rows[:, None, :]) & (depth <= bm_rows[:, None, :])
    fluid = _fluid_mask(spec)

    codes = np.zeros(spec.shape, dtype=np.uint8)
    codes[tissue] = TISSUE
    codes[fluid] = FLUID

    mean_map = np.full(spec.shape, spec.vitreous_reflectance, dtype=np.float64)
    mean_map[tissue] = spec.tissue_reflectance
    for patch in spec.dark_tissue_patches:
        mean_map[patch.membership(spec.shape) & tissue] = spec.fluid_reflectance
    mean_map[fluid] = spec.fluid_reflectance

    noise_rng = np.random.default_rng([spec.seed if spec.noise_seed is None else spec.noise_seed, 2])
    oct_vox = np.clip(mean_map * _speckle(noise_rng, spec.speckle_contrast, spec.shape), 0.0, 1.0)

    tubes = _vessel_tubes(spec, ilm, bm) & tissue & ~fluid
    octa_vox = np.zeros(spec.shape, dtype=np.float64)
    perfused = tissue & ~fluid
    octa_vox[perfused] = FLOW_FLOOR
    octa_vox[tubes] = FLOW_TUBE
    octa_vox *= _speckle(noise_rng, spec.speckle_contrast, spec.shape)
    octa_vox[fluid] = 0.0  # retinal fluid carries no flow signal
    octa_vox = np.clip(octa_vox, 0.0, 1.0)

    oct_volume = ScanVolume(
        voxels=oct_vox, spacing_um=spec.spacing_um, modality="oct",
        volume_id=volume_id, eye_id=eye_id,
    )
    octa_volume = ScanVolume(
        voxels=octa_vox, spacing_um=spec.spacing_um, modality="octa",
        volume_id=volume_id, eye_id=eye_id,
    )
    truth = LabelVolume(
        codes=codes, spacing_um=spec.spacing_um, provenance="phantom-truth",
        volume_id=volume_id,
    )
    return oct_volume, octa_volume, truth


def _shadow_weight(shadow: ShadowSpec, shape: tuple[int, int, int],
                   rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Lateral shadow weight map in [0, 1] plus the depth row it starts at."""
    nb, _, nw = shape
    loc = shadow.location
    if shadow.kind == "vessel":
        col = int(loc["width"])
        if not 0 <= col < nw:
            raise ValueError(f"vessel shadow width {col} outside [0, {nw})")
        half = int(loc.get("half_width", 2))
        weight = np.zeros((nb, nw))
        weight[:, max(0, col - half): col + half + 1] = 1.0
        return weight, int(loc.get("depth", 0))
    if shadow.kind == "floater":
        b0, w0 = float(loc["bscan"]), float(loc["width"])
        if not (0 <= b0 < nb and 0 <= w0 < nw):
            raise ValueError(f"floater shadow center ({b0}, {w0}) outside lateral bounds")
        radius = float(loc["radius"])
        # irregular blob: random axis ratio and orientation
        ra = radius * (1.0 + 0.2 * rng.uniform())
        rb_ = radius * (1.0 - 0.2 * rng.uniform())
        phi = rng.uniform(0.0, np.pi)
        db = np.arange(nb)[:, None] - b0
        dw = np.arange(nw)[None, :] - w0
        u = db * np.cos(phi) + dw * np.sin(phi)
        v = -db * np.sin(phi) + dw * np.cos(phi)
        rho = np.sqrt((u / ra) ** 2 + (v / rb_) ** 2)
        weight = np.where(rho <= 1.0, np.cos(0.5 * np.pi * np.clip(rho, 0, 1)) ** 2, 0.0)
        return weight, 0
    # vignetting
    edge = loc.get("edge", "right")
    extent = float(loc.get("extent", 0.5))
    if not 0.0 < extent <= 1.0:
        raise ValueError(f"vignetting extent must lie in (0, 1], got {extent}")
    axis_len = nw if edge in ("left", "right") else nb
    span = max(1, int(round(extent * axis_len)))
    ramp = np.zeros(axis_len)
    t = np.arange(span) / span
    profile = 0.5 * (1.0 - np.cos(np.pi * (t + 1.0 / span)))  # smooth 0 -> 1
    if edge in ("right", "back"):
        ramp[axis_len - span:] = profile
    elif edge in ("left", "front"):
        ramp[:span] = profile[::-1]
    else:
        raise ValueError(f"unknown vignetting edge {edge!r}")
    if edge in ("left", "right"):
        weight = np.broadcast_to(ramp[None, :], (nb, nw)).copy()
    else:
        weight = np.broadcast_to(ramp[:, None], (nb, nw)).copy()
    return weight, 0


def apply_shadows(
    oct_volume: ScanVolume,
    octa_volume: ScanVolume,
    shadows: list[ShadowSpec],
    seed: int,
) -> tuple[ScanVolume, ScanVolume]:
    """Attenuate intensities below each shadow origin; anatomy labels untouched.

    Each shadow multiplies voxels at depth >= its origin row by a factor
    interpolating from 1 (clear) down to its attenuation (full shadow)
    across the lateral footprint.
    """
    if oct_volume.shape != octa_volume.shape:
        raise ValueError("oct and octa shapes must match")
    shadows = [s if isinstance(s, ShadowSpec) else ShadowSpec(**s) for s in shadows]
    if not shadows:
        return oct_volume, octa_volume
    rng = np.random.default_rng([seed, 3])
    nb, nd, nw = oct_volume.shape
    oct_vox = oct_volume.voxels.astype(np.float64)
    octa_vox = octa_volume.voxels.astype(np.float64)
    for shadow in shadows:
        weight, origin = _shadow_weight(shadow, oct_volume.shape, rng)
        factor = 1.0 - (1.0 - shadow.attenuation) * weight  # (nb, nw)
        oct_vox[:, origin:, :] *= factor[:, None, :]
        octa_vox[:, origin:, :] *= factor[:, None, :]
    return (
        oct_volume.with_voxels(np.clip(oct_vox, 0.0, 1.0)),
        octa_volume.with_voxels(np.clip(octa_vox, 0.0, 1.0)),
    )
